//! Synthetic class-conditional token-grid datasets and the SGD training loop.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, EarError, Result};
use crate::generator::TokenGrid;
use crate::mask::SequencePlan;
use crate::model::{
    gradient, teacher_forced_predictions, GradientRecord, MaskMode, ModelParameters, Real,
    TrainingInstance,
};
use crate::schedule::StepSchedule;
use crate::spiral::SpiralMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `(chebyshev distance to center + class offset) mod V`.
    Rings,
    /// One id per (class, quadrant).
    Quadrants,
    /// Every cell equals the class id.
    Constant,
}

impl FromStr for Family {
    type Err = EarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rings" => Ok(Family::Rings),
            "quadrants" => Ok(Family::Quadrants),
            "constant" => Ok(Family::Constant),
            _ => invalid(format!("unknown dataset family {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub family: Family,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.vocab == 0 || self.num_classes == 0 {
            return invalid("n, vocab and num_classes must be positive");
        }
        if self.vocab < self.num_classes {
            return invalid("vocab must be at least num_classes");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return invalid(format!("noise_rate {} not in [0, 1)", self.noise_rate));
        }
        Ok(())
    }

    /// Noise-free token at `(row, col)` for `class`.
    pub fn clean_token(&self, class: usize, row: usize, col: usize) -> u32 {
        let c = self.n / 2;
        let v = match self.family {
            Family::Rings => {
                let dist = row.abs_diff(c).max(col.abs_diff(c));
                // rings per class: distances run 0..=n/2
                dist + class * (c + 1)
            }
            Family::Quadrants => {
                let quadrant = 2 * usize::from(row >= c) + usize::from(col >= c);
                class * 4 + quadrant
            }
            Family::Constant => class,
        };
        (v % self.vocab) as u32
    }
}

/// `count` grids with classes assigned round-robin; deterministic in `spec.seed`.
pub fn gen_dataset(spec: &SyntheticSpec, count: usize) -> Result<Vec<TokenGrid>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..count)
        .map(|i| {
            let class = i % spec.num_classes;
            let tokens = (0..spec.n)
                .map(|r| {
                    (0..spec.n)
                        .map(|c| {
                            if spec.noise_rate > 0.0 && rng.random::<f64>() < spec.noise_rate {
                                rng.random_range(0..spec.vocab as u32)
                            } else {
                                spec.clean_token(class, r, c)
                            }
                        })
                        .collect()
                })
                .collect();
            TokenGrid::new(tokens, Some(class))
        })
        .collect()
}

/// A dataset that can only be solved by peeking at the future.
///
/// Every token is uniform noise except two: the first rank of `probe_step`
/// copies the first rank of `probe_step + 1` (a later step), and the first
/// rank of `probe_step + 2` copies rank 0 (an earlier step, the control a
/// working model should learn).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageProbe {
    pub probe_rank: usize,
    pub source_rank: usize,
    pub control_rank: usize,
}

impl LeakageProbe {
    pub fn new(schedule: &StepSchedule, probe_step: usize) -> Result<Self> {
        if probe_step < 2 || probe_step + 2 > schedule.num_steps() {
            return invalid(format!(
                "probe step {probe_step} needs a step before it and two after (K = {})",
                schedule.num_steps()
            ));
        }
        let first = |k: usize| schedule.step_range(k).start;
        Ok(Self {
            probe_rank: first(probe_step),
            source_rank: first(probe_step + 1),
            control_rank: first(probe_step + 2),
        })
    }

    pub fn instances(
        &self,
        tokens: usize,
        vocab: usize,
        count: usize,
        seed: u64,
    ) -> Vec<TrainingInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut t: Vec<u32> = (0..tokens)
                    .map(|_| rng.random_range(0..vocab as u32))
                    .collect();
                t[self.probe_rank] = t[self.source_rank];
                t[self.control_rank] = t[0];
                TrainingInstance {
                    tokens: t,
                    class_id: 0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` every `every` epochs.
    StepDecay {
        factor: f64,
        every: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; `0` disables clipping.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::StepDecay {
                factor: 0.5,
                every: 20,
            },
            seed: 0,
            mask_mode: MaskMode::Unified,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must be in [0, 1)");
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return invalid("step decay needs every > 0 and factor > 0");
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::StepDecay { factor, every } => {
                self.learning_rate * factor.powi((epoch / every) as i32)
            }
        }
    }

    /// Applies a `key=value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || EarError::InvalidArgument(format!("bad value {value:?} for {key}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "learning_rate" | "lr" => self.learning_rate = value.parse().map_err(|_| bad())?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad())?,
            "grad_clip" => self.grad_clip = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "mask_mode" => self.mask_mode = value.parse()?,
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    v => {
                        // step-decay:<factor>:<every>
                        let parts: Vec<&str> = v.split(':').collect();
                        match parts[..] {
                            ["step-decay", f, e] => LrSchedule::StepDecay {
                                factor: f.parse().map_err(|_| bad())?,
                                every: e.parse().map_err(|_| bad())?,
                            },
                            _ => return Err(bad()),
                        }
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| EarError::Format(format!("expected key=value, got {l:?}")))
        })
        .collect()
}

pub fn to_instances(grids: &[TokenGrid], map: &SpiralMap) -> Result<Vec<TrainingInstance>> {
    grids
        .iter()
        .map(|g| {
            Ok(TrainingInstance {
                tokens: map.flatten(&g.tokens)?,
                class_id: g.class_id.unwrap_or(0),
            })
        })
        .collect()
}

fn clip_and_norm<F: Real>(grad: &mut GradientRecord<F>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let sq: f64 = grad
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > clip {
        grad.scale(F::of(clip / norm));
    }
}

/// SGD with momentum over shuffled minibatches. Returns the updated
/// parameters and the mean training loss of every epoch.
pub fn train_instances<F: Real>(
    mut params: ModelParameters<F>,
    instances: &[TrainingInstance],
    schedule: &StepSchedule,
    config: &TrainConfig,
) -> Result<(ModelParameters<F>, Vec<f64>)> {
    config.validate()?;
    if instances.is_empty() {
        return invalid("training set is empty");
    }
    let plan = SequencePlan::new(schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = params.zero_grad();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = F::of(config.lr_at(epoch));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainingInstance> =
                chunk.iter().map(|&i| instances[i].clone()).collect();
            let (loss, mut grad) = gradient(&params, &plan, &batch, config.mask_mode)?;
            clip_and_norm(&mut grad, config.grad_clip);
            velocity.scale(F::of(config.momentum));
            velocity.accumulate(&grad);
            params.axpy(-lr, &velocity);
            total += loss.to_f64().unwrap() * chunk.len() as f64;
        }
        let mean = total / instances.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(EarError::Numeric(format!(
                "training diverged at epoch {epoch}"
            )));
        }
        curve.push(mean);
    }
    Ok((params, curve))
}

/// Trains on token grids, which must match the model's vocabulary and the
/// schedule's token count.
pub fn train<F: Real>(
    params: ModelParameters<F>,
    dataset: &[TokenGrid],
    schedule: &StepSchedule,
    config: &TrainConfig,
) -> Result<(ModelParameters<F>, Vec<f64>)> {
    let Some(first) = dataset.first() else {
        return invalid("training set is empty");
    };
    let map = SpiralMap::new(first.n)?;
    if map.len() != schedule.total() {
        return invalid(format!(
            "grids hold {} tokens but the schedule covers {}",
            map.len(),
            schedule.total()
        ));
    }
    for g in dataset {
        g.check_vocab(params.config.vocab_size)?;
    }
    let instances = to_instances(dataset, &map)?;
    train_instances(params, &instances, schedule, config)
}

/// Per-rank teacher-forced accuracy (fraction of instances whose MT argmax
/// equals the ground truth at that rank).
pub fn rank_accuracy<F: Real>(
    params: &ModelParameters<F>,
    instances: &[TrainingInstance],
    schedule: &StepSchedule,
    mode: MaskMode,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let plan = SequencePlan::new(schedule);
    let preds: Vec<Vec<u32>> = instances
        .par_iter()
        .map(|inst| teacher_forced_predictions(params, &plan, inst, mode))
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; schedule.total()];
    for (inst, pred) in instances.iter().zip(&preds) {
        for (r, (a, b)) in inst.tokens.iter().zip(pred).enumerate() {
            hits[r] += usize::from(a == b);
        }
    }
    let n = instances.len().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// Teacher-forced fraction of MT-slot argmax predictions equal to the GT.
pub fn eval_token_accuracy<F: Real>(
    params: &ModelParameters<F>,
    dataset: &[TokenGrid],
    schedule: &StepSchedule,
    mode: MaskMode,
) -> Result<f64> {
    let Some(first) = dataset.first() else {
        return invalid("evaluation set is empty");
    };
    let map = SpiralMap::new(first.n)?;
    let instances = to_instances(dataset, &map)?;
    let per_rank = rank_accuracy(params, &instances, schedule, mode)?;
    Ok(per_rank.iter().sum::<f64>() / per_rank.len() as f64)
}

/// Writes `grid_NNNNN.eartok` files plus `manifest.csv` (`file,class`).
pub fn write_dataset(dir: &Path, grids: &[TokenGrid]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))
        .map_err(|e| EarError::Format(e.to_string()))?;
    manifest
        .write_record(["file", "class"])
        .map_err(|e| EarError::Format(e.to_string()))?;
    for (i, g) in grids.iter().enumerate() {
        let name = format!("grid_{i:05}.eartok");
        fs::write(dir.join(&name), g.to_eartok())?;
        let class = g.class_id.map_or("-".to_string(), |c| c.to_string());
        manifest
            .write_record([name, class])
            .map_err(|e| EarError::Format(e.to_string()))?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<TokenGrid>> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))
        .map_err(|e| EarError::Format(e.to_string()))?;
    let mut grids = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EarError::Format(e.to_string()))?;
        let file = record
            .get(0)
            .ok_or_else(|| EarError::Format("manifest row missing file".into()))?;
        let grid = TokenGrid::from_eartok(&fs::read_to_string(dir.join(file))?)?;
        let class = record.get(1).unwrap_or("-");
        let listed = if class == "-" {
            None
        } else {
            Some(
                class
                    .parse::<usize>()
                    .map_err(|_| EarError::Format(format!("bad class {class:?}")))?,
            )
        };
        if listed != grid.class_id {
            return Err(EarError::Format(format!(
                "{file}: manifest class disagrees with file header"
            )));
        }
        grids.push(grid);
    }
    Ok(grids)
}

/// `epoch,loss` CSV.
pub fn write_loss_curve<W: std::io::Write>(curve: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| EarError::Format(e.to_string());
    w.write_record(["epoch", "loss"]).map_err(err)?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.8}")])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}
