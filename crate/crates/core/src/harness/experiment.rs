//! Training loops, schedules, and per-epoch metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{hflip, Dataset};
use crate::autodiff::{backward, LossKind, OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{stream_seed, Mode, Model};
use crate::projection::{apply_regime, Regime};
use crate::tensor::ChannelStack;

pub const STAGE_ONE_EPOCHS: usize = 7;
pub const STAGE_TWO_EPOCHS: usize = 13;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// One regime trained with Adam.
    Single { regime: Regime, epochs: usize },
    /// 7 epochs of Adam under `first`, then 13 epochs of SGD with momentum
    /// under `second`.
    TwoStage { first: Regime, second: Regime },
}

impl Schedule {
    pub fn single(regime: Regime) -> Self {
        Schedule::Single { regime, epochs: DEFAULT_EPOCHS }
    }

    /// Parses the two-stage names `lr+ft`, `proj+ft`, and `proj+proj`.
    pub fn two_stage(name: &str) -> Result<Self> {
        let (a, b) = name
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("two-stage schedule {name:?} is not of the form a+b")))?;
        let s = Schedule::TwoStage { first: a.parse()?, second: b.parse()? };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        use Regime::*;
        match *self {
            Schedule::Single { epochs: 0, .. } => Err(Error::Config("a schedule needs at least one epoch".into())),
            Schedule::Single { .. } => Ok(()),
            Schedule::TwoStage { first: Lr, second: Ft }
            | Schedule::TwoStage { first: Projection, second: Ft }
            | Schedule::TwoStage { first: Projection, second: Projection } => Ok(()),
            Schedule::TwoStage { first, second } => Err(Error::Config(format!(
                "two-stage {}+{} is not one of lr+ft, projection+ft, projection+projection",
                first.as_str(),
                second.as_str()
            ))),
        }
    }

    /// `(regime, epochs, optimizer)` per stage.
    pub fn stages(&self) -> Vec<(Regime, usize, OptimizerKind)> {
        match *self {
            Schedule::Single { regime, epochs } => vec![(regime, epochs, OptimizerKind::adam_default())],
            Schedule::TwoStage { first, second } => vec![
                (first, STAGE_ONE_EPOCHS, OptimizerKind::adam_default()),
                (second, STAGE_TWO_EPOCHS, OptimizerKind::sgd_stage_two()),
            ],
        }
    }

    pub fn name(&self) -> String {
        match self {
            Schedule::Single { regime, .. } => regime.as_str().to_string(),
            Schedule::TwoStage { first, second } => format!("{}+{}", first.as_str(), second.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    #[default]
    None,
    /// Horizontal flip with probability 0.5.
    Hflip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Seeded per-epoch permutation of the training set.
    pub shuffle: bool,
    /// Record wall-clock time per epoch. Off, `wall_ms` is 0 and the log is
    /// a pure function of the inputs.
    pub timing: bool,
}

impl TrainConfig {
    pub fn new(schedule: Schedule, seed: u64) -> Self {
        TrainConfig {
            schedule,
            batch_size: DEFAULT_BATCH,
            seed,
            augmentation: Augmentation::None,
            shuffle: true,
            timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub regime: String,
    pub stage: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub trainable_params: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(MetricsLog { rows })
    }

    pub fn row(&self, epoch: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.epoch == epoch)
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// Fraction of `data` whose most probable class is the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot score an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (xs, ys) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        let probs = model.forward(xs, Mode::Eval)?;
        correct += probs.iter().zip(ys).filter(|(p, &y)| argmax(p) == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over `data` with dropout off.
pub fn eval_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (xs, ys) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        total += crate::autodiff::loss_value(model, xs, ys, LossKind::CrossEntropy, Mode::Eval)? * xs.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// First index of the maximum.
fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

fn check_compatible(model: &Model, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    let (d, shape) = data.image_format().expect("non-empty");
    if d != model.input_channels() || shape != model.input_shape() {
        return Err(Error::Dimension(format!(
            "{what} images are {d} x {shape}, model expects {} x {}",
            model.input_channels(),
            model.input_shape()
        )));
    }
    if data.classes > model.classes() || data.labels.iter().any(|&l| l >= model.classes()) {
        return Err(Error::Dimension(format!(
            "{what} set has {} classes, model head has {}",
            data.classes,
            model.classes()
        )));
    }
    Ok(())
}

pub struct RunOutput {
    pub model: Model,
    pub log: MetricsLog,
}

/// Trains `model` on `train` under `config` and scores it on `test` before
/// training (epoch 0) and after every epoch. Projection regimes project the
/// model first. The result depends only on the arguments; with timing off
/// the log is reproducible bit for bit.
pub fn run_experiment(config: &TrainConfig, model: Model, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    check_compatible(&model, train, "training")?;
    check_compatible(&model, test, "test")?;
    let stages = config.schedule.stages();
    let mut model = apply_regime(model, stages[0].0);
    let mut log = MetricsLog::default();

    let clock = Instant::now();
    log.rows.push(MetricsRow {
        epoch: 0,
        regime: stages[0].0.as_str().into(),
        stage: 1,
        train_loss: eval_loss(&model, train)?,
        test_acc: accuracy(&model, test)?,
        trainable_params: model.num_trainable(),
        wall_ms: if config.timing { clock.elapsed().as_millis() as u64 } else { 0 },
    });

    let mut epoch = 0;
    let mut step = 0u64;
    for (s, &(regime, epochs, optimizer)) in stages.iter().enumerate() {
        if s > 0 {
            model = apply_regime(model, regime);
        }
        let mut opt = OptimizerState::new(optimizer);
        for _ in 0..epochs {
            epoch += 1;
            let clock = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            if config.shuffle {
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[config.seed, epoch as u64, 0x5f])));
            }
            let mut flips = ChaCha8Rng::seed_from_u64(stream_seed(&[config.seed, epoch as u64, 0xf1]));
            let mut loss_sum = 0.0;
            for idx in order.chunks(config.batch_size) {
                let inputs: Vec<ChannelStack> = idx
                    .iter()
                    .map(|&i| match config.augmentation {
                        Augmentation::Hflip if flips.gen_bool(0.5) => hflip(&train.images[i]),
                        _ => train.images[i].clone(),
                    })
                    .collect();
                let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let mode = Mode::Train { step: stream_seed(&[config.seed, step]) };
                let tape = backward(&model, &inputs, &labels, LossKind::CrossEntropy, mode)?;
                opt.step(&mut model, &tape)?;
                loss_sum += tape.loss * idx.len() as f64;
                step += 1;
            }
            log.rows.push(MetricsRow {
                epoch,
                regime: regime.as_str().into(),
                stage: s + 1,
                train_loss: loss_sum / train.len() as f64,
                test_acc: accuracy(&model, test)?,
                trainable_params: model.num_trainable(),
                wall_ms: if config.timing { clock.elapsed().as_millis() as u64 } else { 0 },
            });
        }
    }
    Ok(RunOutput { model, log })
}
