//! The multi-seed synthetic transfer study: pretrain on task A, then
//! transfer to task B under each regime and compare the curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, Split, Task, SYNTH_CHANNELS, SYNTH_CLASSES, SYNTH_SIDE};
use super::experiment::{run_experiment, Augmentation, MetricsLog, Schedule, TrainConfig, DEFAULT_EPOCHS};
use crate::error::Result;
use crate::model::{build_backbone, stream_seed, ArchSpec, Model};
use crate::projection::Regime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub pretrain_samples: usize,
    pub pretrain_test_samples: usize,
    pub pretrain_epochs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub augmentation: Augmentation,
    pub timing: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seeds: vec![0, 1, 2, 3, 4],
            pretrain_samples: 10_000,
            pretrain_test_samples: 1_000,
            pretrain_epochs: DEFAULT_EPOCHS,
            train_samples: 2_000,
            test_samples: 1_000,
            augmentation: Augmentation::None,
            timing: true,
        }
    }
}

/// The transfer schedules compared by the study, with their CSV names.
pub fn study_schedules() -> Vec<(&'static str, Schedule)> {
    vec![
        ("lr", Schedule::single(Regime::Lr)),
        ("ft", Schedule::single(Regime::Ft)),
        ("projection", Schedule::single(Regime::Projection)),
        ("projection+ft", Schedule::TwoStage { first: Regime::Projection, second: Regime::Ft }),
    ]
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrain: MetricsLog,
    /// One log per entry of [`study_schedules`], in that order.
    pub runs: Vec<(String, MetricsLog)>,
}

impl SeedResult {
    pub fn run(&self, name: &str) -> Option<&MetricsLog> {
        self.runs.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }
}

/// Task-A pretraining for one seed: full fine-tuning from a fresh desk-scale
/// backbone with Adam.
pub fn pretrain_seed(cfg: &StudyConfig, seed: u64) -> Result<(Model, MetricsLog)> {
    let train = gen_synthetic(Task::A, cfg.pretrain_samples, stream_seed(&[seed, 1]), Split::Pretrain)?;
    let test = gen_synthetic(Task::A, cfg.pretrain_test_samples, stream_seed(&[seed, 4]), Split::Test)?;
    let model =
        build_backbone(&ArchSpec::desk_scale(SYNTH_CHANNELS, SYNTH_SIDE, SYNTH_CLASSES, stream_seed(&[seed, 5])))?;
    let mut tc =
        TrainConfig::new(Schedule::Single { regime: Regime::Ft, epochs: cfg.pretrain_epochs }, stream_seed(&[seed, 7]));
    tc.augmentation = cfg.augmentation;
    tc.timing = cfg.timing;
    let out = run_experiment(&tc, model, &train, &test)?;
    Ok((out.model, out.log))
}

/// Pretrains, swaps in a fresh head, and runs every study schedule on task B.
/// When `out_dir` is given, every log is written there as
/// `seed{seed}_{name}.csv`.
pub fn run_seed(cfg: &StudyConfig, seed: u64, out_dir: Option<&Path>) -> Result<SeedResult> {
    let (pretrained, pretrain) = pretrain_seed(cfg, seed)?;
    let train = gen_synthetic(Task::BShifted, cfg.train_samples, stream_seed(&[seed, 2]), Split::Train)?;
    let test = gen_synthetic(Task::BShifted, cfg.test_samples, stream_seed(&[seed, 3]), Split::Test)?;
    let backbone = pretrained.with_new_head(SYNTH_CLASSES, stream_seed(&[seed, 6]))?;
    let mut runs = Vec::new();
    for (name, schedule) in study_schedules() {
        let mut tc = TrainConfig::new(schedule, stream_seed(&[seed, 8]));
        tc.augmentation = cfg.augmentation;
        tc.timing = cfg.timing;
        let out = run_experiment(&tc, backbone.clone(), &train, &test)?;
        runs.push((name.to_string(), out.log));
    }
    let result = SeedResult { seed, pretrain, runs };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        result.pretrain.save_csv(dir.join(format!("seed{seed}_pretrain.csv")))?;
        for (name, log) in &result.runs {
            log.save_csv(dir.join(format!("seed{seed}_{name}.csv")))?;
        }
    }
    Ok(result)
}

pub fn run_study(cfg: &StudyConfig, out_dir: Option<&Path>) -> Result<Vec<SeedResult>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, s, out_dir)).collect()
}
