//! Condition drop and same-identity shuffle under a curriculum schedule.
//!
//! Per sample the identity condition resolves to one of three cases:
//! paired (the record's own face), dropped (null condition), or shuffled
//! (another photo of the same identity). The shuffle probability ramps
//! linearly over training; drop is resolved first so the cases stay
//! disjoint.

use rand::Rng;

use crate::dataset::IdentityDataset;
use crate::error::{invalid_config, Result};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub shuffle_start: f64,
    pub shuffle_end: f64,
    pub drop_prob: f64,
    /// Independent probability of replacing the caption with the null text.
    pub text_drop_prob: f64,
    /// Filled in by the trainer from the run length; not a config key.
    #[serde(skip)]
    pub total_steps: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            shuffle_start: 0.2,
            shuffle_end: 0.6,
            drop_prob: 0.1,
            text_drop_prob: 0.1,
            total_steps: 0,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shuffle_start)
            || !(0.0..=1.0).contains(&self.shuffle_end)
            || self.shuffle_start > self.shuffle_end
        {
            return Err(invalid_config("curriculum: need 0 <= shuffle_start <= shuffle_end <= 1"));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) || !(0.0..=1.0).contains(&self.text_drop_prob) {
            return Err(invalid_config("curriculum: drop probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn with_total_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self
    }
}

/// Shuffle probability at a training step: linear ramp from start to end,
/// clamped to the endpoints.
pub fn schedule_shuffle_prob(step: usize, sched: &CurriculumSchedule) -> f64 {
    if sched.total_steps == 0 {
        return sched.shuffle_start;
    }
    let frac = (step as f64 / sched.total_steps as f64).clamp(0.0, 1.0);
    sched.shuffle_start + (sched.shuffle_end - sched.shuffle_start) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionCase {
    Paired,
    Dropped,
    Shuffled,
}

/// Resolved identity condition for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionPlan {
    pub case: ConditionCase,
    /// Record supplying the identity image; None when dropped.
    pub source_record: Option<usize>,
}

/// Draw the condition for one record at one step.
///
/// Drop wins first with `drop_prob`; otherwise shuffle is attempted with
/// the scheduled probability, falling back to paired when the identity has
/// no other record. Exactly two uniform draws happen on every call (plus
/// one index draw when a shuffle source is picked), so a fixed rng stream
/// yields a fixed plan.
pub fn sample_condition(
    dataset: &IdentityDataset,
    record: usize,
    step: usize,
    sched: &CurriculumSchedule,
    rng: &mut impl Rng,
) -> ConditionPlan {
    let r_drop: f64 = rng.gen();
    let r_shuffle: f64 = rng.gen();
    if r_drop < sched.drop_prob {
        return ConditionPlan { case: ConditionCase::Dropped, source_record: None };
    }
    if r_shuffle < schedule_shuffle_prob(step, sched) {
        let pool = dataset.shuffle_pool(record);
        if !pool.is_empty() {
            let pick = pool[rng.gen_range(0..pool.len())];
            return ConditionPlan { case: ConditionCase::Shuffled, source_record: Some(pick) };
        }
    }
    ConditionPlan { case: ConditionCase::Paired, source_record: Some(record) }
}
