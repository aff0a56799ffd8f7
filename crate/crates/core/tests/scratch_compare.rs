//! Temporary diagnostic: compare two checkpoints' gates and regularizer
//! values on identical training-style samples.

use faceadapt::adapter::AdapterScale;
use faceadapt::config::TrainConfig;
use faceadapt::dataset::generate_synthetic_identity_dataset;
use faceadapt::encoder::{extract_penultimate_tokens, mask_face_region, project_identity};
use faceadapt::objective::{fair_loss, MaskPyramid};
use faceadapt::params::normal;
use faceadapt::trainer::load_model;

#[test]
#[ignore]
fn compare_checkpoints() {
    let fair_dir = std::env::var("FAIR_DIR").unwrap();
    let nofair_dir = std::env::var("NOFAIR_DIR").unwrap();

    let cfg = TrainConfig::default();
    let mut cfg_nofair = cfg.clone();
    cfg_nofair.loss.lambda_fair = 0.0;

    let fair = load_model::<f32>(&cfg, std::path::Path::new(&fair_dir)).unwrap();
    let nofair = load_model::<f32>(&cfg_nofair, std::path::Path::new(&nofair_dir)).unwrap();
    let ds = generate_synthetic_identity_dataset(&cfg.dataset).unwrap();

    for (name, model) in [("fair", &fair), ("nofair", &nofair)] {
        let gammas: Vec<f32> = (0..6)
            .map(|b| {
                model
                    .store
                    .get(model.store.id_of(&format!("unet.block{b}.gsa.gamma")).unwrap())
                    .item()
            })
            .collect();
        println!("{name} gammas: {gammas:?}");

        // regularizer values on training-style forwards, averaged over
        // records and a few timesteps
        let mut sums = vec![0.0f64; 6];
        let mut n = 0;
        for rec_idx in [0usize, 11, 22, 33] {
            let img = ds.face_image::<f32>(rec_idx).unwrap();
            let masked = mask_face_region(&img).unwrap();
            let raw = extract_penultimate_tokens(&masked, &model.encoder).unwrap();
            let e_id = project_identity(&model.store, &model.proj, &raw).unwrap();
            let e_text = model.text_embedding(ds.records[rec_idx].caption_id).unwrap();
            let z0 = ds.latent::<f32>(rec_idx, (8, 8)).unwrap();
            let pyramid = MaskPyramid::build(&img.mask, &model.cfg.unet).unwrap();
            for t in [10usize, 40, 80] {
                let mut rng = faceadapt::rng::stream(99, "diag", (rec_idx * 100 + t) as u64);
                let eps = normal::<f32>(&[8, 8, 4], 1.0, &mut rng);
                let z_t = faceadapt::backbone::add_noise(&model.schedule, &z0, t, &eps).unwrap();
                let (_, recs) = model
                    .predict_noise(&z_t, t, &e_text, Some(&e_id), AdapterScale::training())
                    .unwrap();
                for r in &recs {
                    let m = pyramid.for_block(r.block_index).unwrap();
                    sums[r.block_index] += fair_loss(r, m).unwrap() as f64;
                }
                n += 1;
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| (s / n as f64 * 1000.0).round() / 1000.0).collect();
        println!("{name} fair loss per block: {means:?}");

        // profile-style locality on training-style forwards: per block,
        // mean increment row norm outside the mask / mean inside
        let mut outside = vec![(0.0f64, 0.0f64); 6];
        let mut inside = vec![(0.0f64, 0.0f64); 6];
        for rec_idx in 0..ds.len() {
            let img = ds.face_image::<f32>(rec_idx).unwrap();
            let masked = mask_face_region(&img).unwrap();
            let raw = extract_penultimate_tokens(&masked, &model.encoder).unwrap();
            let e_id = project_identity(&model.store, &model.proj, &raw).unwrap();
            let e_text = model.text_embedding(ds.records[rec_idx].caption_id).unwrap();
            let z0 = ds.latent::<f32>(rec_idx, (8, 8)).unwrap();
            let pyramid = MaskPyramid::build(&img.mask, &model.cfg.unet).unwrap();
            for t in [5usize, 20, 50, 90] {
                let mut rng = faceadapt::rng::stream(7, "diag2", (rec_idx * 100 + t) as u64);
                let eps = normal::<f32>(&[8, 8, 4], 1.0, &mut rng);
                let z_t = faceadapt::backbone::add_noise(&model.schedule, &z0, t, &eps).unwrap();
                let (_, recs) = model
                    .predict_noise(&z_t, t, &e_text, Some(&e_id), AdapterScale::training())
                    .unwrap();
                for r in &recs {
                    let m = pyramid.for_block(r.block_index).unwrap();
                    let d = r.increment.cols();
                    for (cell, row) in r.increment.data().chunks_exact(d).enumerate() {
                        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                        let mm = m.data()[cell] as f64;
                        inside[r.block_index].0 += norm * mm;
                        inside[r.block_index].1 += mm;
                        outside[r.block_index].0 += norm * (1.0 - mm);
                        outside[r.block_index].1 += 1.0 - mm;
                    }
                }
            }
        }
        let ratios: Vec<f64> = (0..6)
            .map(|b| {
                let o = outside[b].0 / outside[b].1;
                let i = inside[b].0 / inside[b].1;
                ((o / i) * 1000.0).round() / 1000.0
            })
            .collect();
        println!("{name} train-style locality per block: {ratios:?}");
    }
}
