//! Temporary diagnostic: evaluate an existing checkpoint and print details.

use faceadapt::config::TrainConfig;
use faceadapt::dataset::generate_synthetic_identity_dataset;
use faceadapt::encoder::{mask_face_region, FaceEncoder};
use faceadapt::eval::{evaluate_model, identity_similarity};
use faceadapt::tensor::Tensor;
use faceadapt::trainer::load_model;

#[test]
#[ignore]
fn eval_existing_run() {
    let dir = std::env::var("EVAL_DIR").expect("set EVAL_DIR");
    let mut cfg = TrainConfig::default();
    if let Ok(lambda) = std::env::var("EVAL_LAMBDA") {
        cfg.loss.lambda_fair = lambda.parse().unwrap();
    }
    let model = load_model::<f32>(&cfg, std::path::Path::new(&dir)).unwrap();
    let dataset = generate_synthetic_identity_dataset(&cfg.dataset).unwrap();

    for (scale, alpha) in [(7.0, 0.5), (3.0, 0.5), (1.5, 0.5), (7.0, 1.0), (3.0, 1.0), (0.0, 1.0)] {
        let mut scfg = cfg.sampler.clone();
        scfg.cfg_scale = scale;
        scfg.alpha = alpha;
        let report = evaluate_model(&model, &dataset, &scfg, vec![], cfg.config_hash()).unwrap();
        println!(
            "cfg_scale {scale:>4} alpha {alpha:>4}: sim {:.4} wins {}/{} locality {:?}",
            report.identity_sim, report.identity_margin_wins, report.n_identities,
            report.locality_ratio.map(|v| (v * 1000.0).round() / 1000.0),
        );
    }
}

#[test]
#[ignore]
fn encoder_separation_under_model_seed() {
    // the model's encoder is seeded by train.seed (=1), not the value used
    // in the dataset unit test; check separation under the real seed
    let cfg = TrainConfig::default();
    let enc =
        faceadapt::encoder::ToyEncoder::<f32>::build(&cfg.model.encoder, cfg.train.seed).unwrap();
    let ds = generate_synthetic_identity_dataset(&cfg.dataset).unwrap();
    let embeddings: Vec<(usize, Tensor<f32>)> = (0..ds.len())
        .map(|i| {
            let img = ds.face_image::<f32>(i).unwrap();
            let masked = mask_face_region(&img).unwrap();
            (ds.records[i].identity_id, enc.global_embedding(&masked).unwrap())
        })
        .collect();
    let cos = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64) * (y as f64)).sum()
    };
    let mut within = (0.0, 0u32);
    let mut across = (0.0, 0u32);
    let mut across_min: f64 = 1.0;
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let c = cos(&embeddings[i].1, &embeddings[j].1);
            if embeddings[i].0 == embeddings[j].0 {
                within = (within.0 + c, within.1 + 1);
            } else {
                across = (across.0 + c, across.1 + 1);
                across_min = across_min.min(c);
            }
        }
    }
    println!(
        "within {:.4} across {:.4} (min across {:.4})",
        within.0 / within.1 as f64,
        across.0 / across.1 as f64,
        across_min
    );

    // per-identity margins: own-reference vs next identity's reference,
    // using a SECOND record of the same identity as the "generated" stand-in
    let mut wins = 0;
    for k in 0..ds.n_identities() {
        let own_ref = ds.of_identity(k)[0];
        let probe = ds.of_identity(k)[1];
        let other_ref = ds.of_identity((k + 1) % ds.n_identities())[0];
        let probe_img = mask_face_region(&ds.face_image::<f32>(probe).unwrap()).unwrap();
        let own_img = mask_face_region(&ds.face_image::<f32>(own_ref).unwrap()).unwrap();
        let other_img = mask_face_region(&ds.face_image::<f32>(other_ref).unwrap()).unwrap();
        let sim_own = identity_similarity(&probe_img, &own_img, &enc).unwrap();
        let sim_other = identity_similarity(&probe_img, &other_img, &enc).unwrap();
        if sim_own > sim_other {
            wins += 1;
        }
        println!("identity {k}: own {sim_own:.4} other {sim_other:.4}");
    }
    println!("dataset-level wins: {wins}/{}", ds.n_identities());
}
