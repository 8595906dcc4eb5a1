//! Four-stage training plan: learning-rate schedules, freeze maps and the
//! step loop.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::diagnostics::{classify, grad_stats, Outcome, RunVerdict, TrainRecord, VanishRule};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::taskspec::{build_stage_batch_with, encode_sample, stage_mode, stage_resolution, BatchOptions, EncodedSample};
use crate::tensor::SeededRng;

/// Per-epoch linear ramp from `lr_start` to `lr_end`, reset every `period`
/// steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SawtoothLinear {
    pub lr_start: f64,
    pub lr_end: f64,
    pub period: usize,
}

impl SawtoothLinear {
    pub fn new(lr_start: f64, lr_end: f64, period: usize) -> Result<Self> {
        let s = SawtoothLinear { lr_start, lr_end, period };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Schedule(format!(
                "sawtooth period must be at least 2 steps, got {}",
                self.period
            )));
        }
        if !(self.lr_start.is_finite() && self.lr_end.is_finite() && self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return Err(Error::Schedule("sawtooth learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub fn sawtooth_lr(step: usize, s: &SawtoothLinear) -> Result<f64> {
    s.validate()?;
    let pos = step % s.period;
    if pos == 0 {
        return Ok(s.lr_start);
    }
    if pos == s.period - 1 {
        return Ok(s.lr_end);
    }
    let p = pos as f64 / (s.period - 1) as f64;
    Ok(s.lr_start + p * (s.lr_end - s.lr_start))
}

/// Linear warmup from `warmup_lr` to `init_lr`, then cosine decay to
/// `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupCosine {
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub init_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(warmup_steps: usize, warmup_lr: f64, init_lr: f64, min_lr: f64, total_steps: usize) -> Result<Self> {
        let s = WarmupCosine {
            warmup_steps,
            warmup_lr,
            init_lr,
            min_lr,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.warmup_lr, self.init_lr, self.min_lr]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Schedule("learning rates must be finite and non-negative".into()));
        }
        if self.warmup_lr > self.init_lr {
            return Err(Error::Schedule(format!(
                "warmup_lr ({:e}) must not exceed init_lr ({:e})",
                self.warmup_lr, self.init_lr
            )));
        }
        if self.min_lr > self.init_lr {
            return Err(Error::Schedule(format!(
                "min_lr ({:e}) must not exceed init_lr ({:e}): a cosine decay cannot rise",
                self.min_lr, self.init_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Schedule(format!(
                "warmup_steps ({}) must not exceed total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

pub fn warmup_cosine_lr(step: usize, s: &WarmupCosine) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(Error::Schedule(format!(
            "step {step} is past the end of the schedule ({})",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        let t = step as f64 / s.warmup_steps as f64;
        return Ok(s.warmup_lr * (1.0 - t) + s.init_lr * t);
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return Ok(s.init_lr);
    }
    // Weighted form so both ends land exactly on init_lr and min_lr.
    let w = 0.5 * (1.0 + (PI * (step - s.warmup_steps) as f64 / span as f64).cos());
    Ok(s.init_lr * w + s.min_lr * (1.0 - w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Sawtooth(SawtoothLinear),
    WarmupCosine(WarmupCosine),
}

impl Schedule {
    pub fn lr(&self, step: usize) -> Result<f64> {
        match self {
            Schedule::Sawtooth(s) => sawtooth_lr(step, s),
            Schedule::WarmupCosine(s) => warmup_cosine_lr(step, s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Sawtooth(s) => s.validate(),
            Schedule::WarmupCosine(s) => s.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage_id: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub schedule: Schedule,
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub resolution: usize,
}

impl StageSpec {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    /// `(step, lr)` for every step of the curve. A warmup-cosine curve is
    /// closed and includes its final point at `total_steps`.
    pub fn lr_curve(&self) -> Result<Vec<(usize, f64)>> {
        let last = match self.schedule {
            Schedule::Sawtooth(_) => self.total_steps().saturating_sub(1),
            Schedule::WarmupCosine(s) => s.total_steps,
        };
        (0..=last).map(|i| Ok((i, self.schedule.lr(i)?))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stage_id) {
            return Err(Error::invalid(format!("stage must be 1 to 4, got {}", self.stage_id)));
        }
        if self.total_steps() == 0 {
            return Err(Error::Schedule(format!("stage {} has no steps", self.stage_id)));
        }
        if ![224, 448].contains(&self.resolution) {
            return Err(Error::invalid(format!("resolution must be 224 or 448, got {}", self.resolution)));
        }
        self.schedule.validate()
    }
}

/// Stage-4 cosine floor, kept below the stage's 1e-5 peak so the decay
/// never rises.
pub const STAGE4_MIN_LR: f64 = 8e-6;

pub fn stage_groups(stage_id: usize) -> BTreeSet<ParamGroup> {
    use ParamGroup::*;
    match stage_id {
        1 => [ProjectionStack, Norms].into(),
        2 => [Lora].into(),
        _ => [Lora, ProjectionStack, Norms].into(),
    }
}

/// Default plan for `stage_id`, with iterations per epoch and warmup steps
/// divided by `scale_divisor`.
pub fn build_stage_plan(stage_id: usize, scale_divisor: usize) -> Result<StageSpec> {
    if !(1..=4).contains(&stage_id) {
        return Err(Error::invalid(format!("stage must be 1 to 4, got {stage_id}")));
    }
    if scale_divisor == 0 {
        return Err(Error::Schedule("scale divisor must be at least 1".into()));
    }
    // (epochs, iters per epoch, warmup, warmup_lr, init_lr, min_lr)
    let (epochs, iters, warmup, warmup_lr, init_lr, min_lr) = match stage_id {
        1 => (17, 1000, 0, 1e-5, 1e-4, 0.0),
        2 => (4, 5000, 5000, 1e-6, 1e-4, 8e-5),
        3 => (5, 200, 200, 1e-6, 3e-5, 1e-5),
        _ => (50, 1000, 1000, 1e-6, 1e-5, STAGE4_MIN_LR),
    };
    if iters % scale_divisor != 0 || warmup % scale_divisor != 0 {
        return Err(Error::Schedule(format!(
            "scale divisor {scale_divisor} does not divide stage {stage_id}'s {iters} iterations per epoch{}",
            if warmup > 0 { format!(" and {warmup} warmup steps") } else { String::new() }
        )));
    }
    let iters = iters / scale_divisor;
    let schedule = if stage_id == 1 {
        Schedule::Sawtooth(SawtoothLinear::new(warmup_lr, init_lr, iters)?)
    } else {
        Schedule::WarmupCosine(WarmupCosine::new(
            warmup / scale_divisor,
            warmup_lr,
            init_lr,
            min_lr,
            epochs * iters,
        )?)
    };
    Ok(StageSpec {
        stage_id,
        epochs,
        iters_per_epoch: iters,
        schedule,
        trainable_groups: stage_groups(stage_id),
        resolution: stage_resolution(stage_id),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies collected gradients to trainable parameters. Frozen parameters
/// (no gradient slot) are never written.
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() < ids.len() {
            self.m.resize(ids.len(), Vec::new());
            self.v.resize(ids.len(), Vec::new());
        }
        self.t += 1;
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.tensor_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            match self.cfg {
                OptimizerConfig::Sgd => {
                    if lr == 0.0 {
                        continue;
                    }
                    for (w, gi) in t.data_mut().iter_mut().zip(&g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    if m.len() != g.len() {
                        *m = vec![0.0; g.len()];
                        *v = vec![0.0; g.len()];
                    }
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    for (i, w) in t.data_mut().iter_mut().enumerate() {
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cycles through a fixed pool of encoded samples in seeded shuffled order.
pub struct DataStream {
    samples: Vec<EncodedSample>,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: SeededRng,
}

impl DataStream {
    pub fn new(samples: Vec<EncodedSample>, batch_size: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyStream);
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut s = DataStream {
            order: Vec::new(),
            cursor: 0,
            rng: SeededRng::derived(seed, "data-stream"),
            samples,
            batch_size,
        };
        s.reshuffle();
        Ok(s)
    }

    /// Synthetic pool for a stage, encoded with that stage's template.
    pub fn for_stage(model: &Model, stage: usize, pool: usize, batch_size: usize, image_pool: u64, seed: u64) -> Result<Self> {
        let opts = BatchOptions {
            resolution: stage_resolution(stage),
            image_pool: Some(image_pool),
        };
        let samples = build_stage_batch_with(stage, seed, pool, opts)?
            .iter()
            .map(|s| encode_sample(&model.vocab, s, stage_mode(stage)))
            .collect::<Result<Vec<_>>>()?;
        DataStream::new(samples, batch_size, seed)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.samples.len()).collect();
        for i in (1..self.order.len()).rev() {
            let j = self.rng.below(i + 1);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<EncodedSample> {
        let n = self.batch_size.min(self.samples.len());
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.samples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        out
    }
}

/// Append-only destination for per-step records.
pub trait RecordSink {
    fn record(&mut self, r: &TrainRecord) -> Result<()>;
}

impl RecordSink for Vec<TrainRecord> {
    fn record(&mut self, r: &TrainRecord) -> Result<()> {
        self.push(r.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write>(pub W);

impl<W: Write> RecordSink for JsonlSink<W> {
    fn record(&mut self, r: &TrainRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, r)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _: &TrainRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Multiplies every scheduled learning rate.
    #[serde(default = "one")]
    pub lr_scale: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub vanish: VanishRule,
    /// Stop a stage as soon as the trailing window classifies as bad.
    #[serde(default = "yes")]
    pub halt_on_bad: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optimizer: OptimizerConfig::Sgd,
            lr_scale: 1.0,
            batch_size: 4,
            vanish: VanishRule::default(),
            halt_on_bad: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: usize,
    pub steps_run: usize,
    pub halted: bool,
    pub final_record: TrainRecord,
    pub verdict: RunVerdict,
}

/// Runs one stage: marks the stage's groups trainable, then for each step
/// computes the loss on the next batch, back-propagates, records, and
/// applies the optimizer at the scheduled rate.
pub fn run_stage(
    model: &mut Model,
    data: &mut DataStream,
    spec: &StageSpec,
    opts: &TrainOptions,
    sink: &mut dyn RecordSink,
) -> Result<StageOutcome> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyStream);
    }
    model.store.mark_groups(&spec.trainable_groups);
    let mut opt = Optimizer::new(opts.optimizer);
    let mut records: Vec<TrainRecord> = Vec::new();
    let mut tape = Tape::new();
    let mut halted = false;
    for step in 0..spec.total_steps() {
        let lr = spec.schedule.lr(step)? * opts.lr_scale;
        let batch = data.next_batch();
        tape.clear();
        let bind = model.store.bind(&mut tape);
        let loss_var = model.loss(&mut tape, &bind, &batch, spec.resolution)?;
        let loss = tape.scalar(loss_var);
        tape.backward(loss_var)?;
        model.store.clear_grads();
        model.store.collect_grads(&tape, &bind);
        let stats = grad_stats(&model.store)?;
        let finite_in = loss.is_finite() && stats.all_finite;
        if finite_in {
            opt.step(&mut model.store, lr);
        }
        let rec = TrainRecord {
            stage: spec.stage_id,
            step,
            loss,
            lr,
            grad_norms: stats.norms,
            untouched: stats.untouched,
            nonfinite: !(finite_in && model.store.all_finite()),
        };
        sink.record(&rec)?;
        records.push(rec);
        if opts.halt_on_bad {
            let bad = records.last().is_some_and(|r| r.nonfinite)
                || (records.len() >= opts.vanish.window
                    && classify(&records, opts.vanish)?.outcome != Outcome::Ok);
            if bad {
                halted = step + 1 < spec.total_steps();
                break;
            }
        }
    }
    model.store.clear_grads();
    let verdict = classify(&records, opts.vanish)?;
    Ok(StageOutcome {
        stage: spec.stage_id,
        steps_run: records.len(),
        halted,
        final_record: records.pop().expect("at least one step"),
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataOptions {
    /// Distinct samples per stage.
    pub pool: usize,
    /// Distinct procedural images per stage.
    pub image_pool: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { pool: 64, image_pool: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub outcome: StageOutcome,
    /// Every parameter outside the stage's trainable set kept its bits.
    pub frozen_intact: bool,
}

/// Runs stages in order on one model. Data for stage `s` is drawn from a
/// stream seeded by `(seed, s)`.
pub fn run_curriculum(
    model: &mut Model,
    plan: &[StageSpec],
    opts: &TrainOptions,
    data: &DataOptions,
    seed: u64,
    sink: &mut dyn RecordSink,
) -> Result<Vec<StageReport>> {
    let mut out = Vec::with_capacity(plan.len());
    for spec in plan {
        let stage_seed = SeededRng::derived(seed, &format!("stage-{}", spec.stage_id)).next_u64();
        let mut stream = DataStream::for_stage(model, spec.stage_id, data.pool, opts.batch_size, data.image_pool, stage_seed)?;
        let before = model.store.snapshot();
        let outcome = run_stage(model, &mut stream, spec, opts, sink)?;
        let after = model.store.snapshot();
        let frozen_intact = model
            .store
            .iter()
            .zip(before.iter().zip(&after))
            .filter(|((_, p), _)| !spec.trainable_groups.contains(&p.group))
            .all(|(_, (b, a))| b.iter().map(|v| v.to_bits()).eq(a.iter().map(|v| v.to_bits())));
        out.push(StageReport { outcome, frozen_intact });
    }
    Ok(out)
}
