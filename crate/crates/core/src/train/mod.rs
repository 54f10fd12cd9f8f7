//! Quantization-aware robust training.
//!
//! Training runs in two phases. Pretraining minimizes cross-entropy on the
//! fake-quantized point forward pass. The robust phase then minimizes the
//! hinge loss on fake-quantized interval bounds while the input radius ramps
//! linearly to its target. Both phases use Adam with decoupled weight decay.
//!
//! Batches are drawn from an RNG keyed by `(seed, phase, step)`, and the
//! per-sample gradients are reduced in a fixed order, so a run is a pure
//! function of its seed and can be resumed from any checkpoint.

mod loss;
mod optim;
mod schedule;
mod shadow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QnnError, Result};
use crate::network::QNetwork;

pub use loss::{cross_entropy_grad, is_certified, qaibp_loss, qaibp_loss_grad};
pub use optim::Adam;
pub use schedule::epsilon_schedule;
pub use shadow::{
    export_quantized, fake_quant, fake_quant_grad, ArchSpec, FakeQuant, FormatSpec, IntervalTape,
    LayerParams, LayerSpec, ParamSet, PointTape, Prepared, QuantSpec, Semantics, ShadowAffine,
    ShadowLayer, ShadowNetwork, TrainBounds,
};

/// Samples per work unit; the reduction order depends only on this.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Robust-phase steps.
    pub total_steps: u64,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    /// Target radius in input raw units.
    pub eps_target: f64,
    /// Ramp start; defaults to 10% of `total_steps`.
    pub eps_start_step: Option<u64>,
    /// Ramp end; defaults to 90% of `total_steps`.
    pub eps_end_step: Option<u64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fold the last dense layer into the margin bounds.
    pub elide_last: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 512,
            total_steps: 10_000,
            pretrain_steps: 5000,
            pretrain_lr: 5e-4,
            eps_target: 4.0,
            eps_start_step: None,
            eps_end_step: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            elide_last: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn eps_window(&self) -> (u64, u64) {
        (
            self.eps_start_step.unwrap_or(self.total_steps / 10),
            self.eps_end_step.unwrap_or(self.total_steps - self.total_steps / 10),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(QnnError::Config(format!("{field}: {why}")));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("pretrain_lr", self.pretrain_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be a positive number");
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be nonnegative");
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, "must lie in [0, 1)");
            }
        }
        if !(self.eps_target.is_finite() && self.eps_target >= 0.0) {
            return bad("eps_target", "must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        let (s, e) = self.eps_window();
        if s > e || e > self.total_steps {
            return bad(
                "eps_schedule",
                "need 0 <= eps_start_step <= eps_end_step <= total_steps",
            );
        }
        Ok(())
    }

    pub fn epsilon(&self, step: u64) -> f64 {
        let (s, e) = self.eps_window();
        epsilon_schedule(step, s, e, self.eps_target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Robust,
    Done,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Global step counter across both phases, starting at 1.
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub eps: f64,
    pub clean_acc: f64,
    /// Absent during pretraining.
    pub certified_frac: Option<f64>,
    pub saturated_neuron_frac: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,loss,eps,clean_acc,certified_frac,saturated_neuron_frac";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.eps,
            self.clean_acc,
            opt(self.certified_frac),
            opt(self.saturated_neuron_frac)
        )
    }
}

/// Batch statistics of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub loss: f64,
    pub clean_acc: f64,
    pub certified_frac: f64,
    pub saturated_neuron_frac: f64,
}

#[derive(Default)]
struct Partial {
    grads: Option<ParamSet>,
    loss: f64,
    correct: usize,
    certified: usize,
    saturated: usize,
    hidden: usize,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        match (&mut self.grads, other.grads) {
            (Some(a), Some(b)) => a.add_assign(&b),
            (None, b) => self.grads = b,
            _ => {}
        }
        self.loss += other.loss;
        self.correct += other.correct;
        self.certified += other.certified;
        self.saturated += other.saturated;
        self.hidden += other.hidden;
        self
    }
}

fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Real-valued input box of radius `eps` raw units around sample `i`.
fn input_box(data: &Dataset, i: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let s = data.input_format.scale();
    let (lo, hi) = (data.input_format.min_value(), data.input_format.max_value());
    data.raw_sample(i)
        .iter()
        .map(|r| {
            let x = *r as f64 * s;
            ((x - eps * s).max(lo), (x + eps * s).min(hi))
        })
        .unzip()
}

/// Per-sample losses and gradients over `batch`, reduced in a fixed order.
fn batch_gradients(
    shadow: &ShadowNetwork,
    data: &Dataset,
    batch: &[usize],
    robust: Option<(f64, bool)>,
) -> Result<(ParamSet, StepMetrics)> {
    if batch.is_empty() {
        return Err(QnnError::shape("empty batch"));
    }
    let prepared = shadow.prepare(Semantics::Quantized);
    let partials: Vec<Result<Partial>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Partial {
                grads: Some(shadow.zero_params()),
                ..Partial::default()
            };
            let grads = acc.grads.as_mut().expect("initialized");
            for &i in chunk {
                let label = data.labels[i];
                let x = data.values(i);
                let (logits, tape) = prepared.forward_point(&x);
                acc.correct += (argmax_f64(&logits) == label) as usize;
                match robust {
                    None => {
                        let (l, g) = cross_entropy_grad(&logits, label);
                        acc.loss += l;
                        prepared.backward_point(&tape, &g, grads);
                    }
                    Some((eps, elide)) => {
                        let (lo, hi) = input_box(data, i, eps);
                        let (b, tape) = prepared.forward_interval(&lo, &hi, elide.then_some(label))?;
                        let (l, gl, gu) = qaibp_loss_grad(&b.lower, &b.upper, label);
                        acc.loss += l;
                        acc.certified += is_certified(&b.lower, &b.upper, label) as usize;
                        acc.saturated += b.saturated;
                        acc.hidden += b.hidden;
                        prepared.backward_interval(&tape, &gl, &gu, grads);
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = Partial::default();
    for p in partials {
        total = total.merge(p?);
    }
    let n = batch.len() as f64;
    let mut grads = total.grads.expect("nonempty batch");
    grads.scale(1.0 / n);
    prepared.mask_gradients(&mut grads);
    let metrics = StepMetrics {
        loss: total.loss / n,
        clean_acc: total.correct as f64 / n,
        certified_frac: total.certified as f64 / n,
        saturated_neuron_frac: if total.hidden == 0 {
            0.0
        } else {
            total.saturated as f64 / total.hidden as f64
        },
    };
    if !metrics.loss.is_finite() || !grads.is_finite() {
        return Err(QnnError::Numeric("non-finite loss or gradient".into()));
    }
    Ok((grads, metrics))
}

/// Interval forward pass of one real input with radius `eps` (raw input
/// units). With `elide_label` the result bounds `logit[j] - logit[label]`.
pub fn ibp_forward_train(
    shadow: &ShadowNetwork,
    x: &[f64],
    eps: f64,
    elide_label: Option<usize>,
) -> Result<(TrainBounds, IntervalTape)> {
    if !(eps >= 0.0) {
        return Err(QnnError::InvalidValue(eps));
    }
    let f = shadow.input_format;
    let s = f.scale();
    let (lo, hi): (Vec<f64>, Vec<f64>) = x
        .iter()
        .map(|v| ((v - eps * s).max(f.min_value()), (v + eps * s).min(f.max_value())))
        .unzip();
    let out = shadow
        .prepare(Semantics::Quantized)
        .forward_interval(&lo, &hi, elide_label)?;
    if out.0.lower.iter().chain(&out.0.upper).any(|v| !v.is_finite()) {
        return Err(QnnError::Numeric("non-finite interval bounds".into()));
    }
    Ok(out)
}

/// One robust-phase update on `batch` at radius `eps`.
pub fn train_step(
    shadow: &mut ShadowNetwork,
    adam: &mut Adam,
    data: &Dataset,
    batch: &[usize],
    eps: f64,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let (grads, metrics) = batch_gradients(shadow, data, batch, Some((eps, config.elide_last)))?;
    let mut params = shadow.params();
    adam.step(&mut params, &grads, config.learning_rate, config.weight_decay);
    shadow.set_params(&params)?;
    Ok(metrics)
}

/// One cross-entropy update on `batch`.
pub fn pretrain_step(
    shadow: &mut ShadowNetwork,
    adam: &mut Adam,
    data: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let (grads, metrics) = batch_gradients(shadow, data, batch, None)?;
    let mut params = shadow.params();
    adam.step(&mut params, &grads, config.pretrain_lr, config.weight_decay);
    shadow.set_params(&params)?;
    Ok(metrics)
}

/// Mean cross-entropy and accuracy over a whole dataset.
pub fn evaluate_point(shadow: &ShadowNetwork, data: &Dataset) -> Result<StepMetrics> {
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(batch_gradients(shadow, data, &idx, None)?.1)
}

fn batch_indices(seed: u64, phase: Phase, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let tag = match phase {
        Phase::Pretrain => 1u64,
        Phase::Robust => 2,
        Phase::Done => 3,
    };
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag << 56)
        .wrapping_add(step);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchSpec,
    pub config: TrainConfig,
    pub phase: Phase,
    /// Steps completed in the current phase.
    pub step: u64,
    pub params: ParamSet,
    pub adam: Adam,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| QnnError::ModelFormat(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(s).map_err(|e| QnnError::ModelFormat(e.to_string()))?;
        if c.version != Self::VERSION {
            return Err(QnnError::ModelFormat(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        Ok(c)
    }
}

/// Step-by-step driver for both training phases.
pub struct Trainer<'d> {
    data: &'d Dataset,
    arch: ArchSpec,
    config: TrainConfig,
    shadow: ShadowNetwork,
    adam: Adam,
    phase: Phase,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, arch: ArchSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shadow = ShadowNetwork::from_arch(&arch, &mut rng)?;
        Self::check_data(data, &shadow)?;
        let adam = Adam::new(&shadow, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let mut t = Trainer {
            data,
            arch,
            config,
            shadow,
            adam,
            phase: Phase::Pretrain,
            step: 0,
        };
        t.settle_phase();
        Ok(t)
    }

    pub fn resume(data: &'d Dataset, ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
        let shadow = ShadowNetwork::from_arch(&ckpt.arch, &mut rng)?.with_params(&ckpt.params)?;
        Self::check_data(data, &shadow)?;
        Ok(Trainer {
            data,
            arch: ckpt.arch,
            config: ckpt.config,
            shadow,
            adam: ckpt.adam,
            phase: ckpt.phase,
            step: ckpt.step,
        })
    }

    fn check_data(data: &Dataset, shadow: &ShadowNetwork) -> Result<()> {
        if data.is_empty() {
            return Err(QnnError::shape("training set is empty"));
        }
        if data.input_shape != shadow.input_shape || data.input_format != shadow.input_format {
            return Err(QnnError::shape(format!(
                "dataset inputs {:?} {} do not match architecture {:?} {}",
                data.input_shape, data.input_format, shadow.input_shape, shadow.input_format
            )));
        }
        if data.classes > shadow.class_count {
            return Err(QnnError::shape(format!(
                "dataset has {} classes but the network emits {}",
                data.classes, shadow.class_count
            )));
        }
        Ok(())
    }

    /// Skips phases that have no steps left.
    fn settle_phase(&mut self) {
        if self.phase == Phase::Pretrain && self.step >= self.config.pretrain_steps {
            self.phase = Phase::Robust;
            self.step = 0;
            self.adam = Adam::new(
                &self.shadow,
                self.config.adam_beta1,
                self.config.adam_beta2,
                self.config.adam_eps,
            );
        }
        if self.phase == Phase::Robust && self.step >= self.config.total_steps {
            self.phase = Phase::Done;
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn shadow(&self) -> &ShadowNetwork {
        &self.shadow
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Global step index of the last completed step.
    pub fn global_step(&self) -> u64 {
        match self.phase {
            Phase::Pretrain => self.step,
            Phase::Robust => self.config.pretrain_steps + self.step,
            Phase::Done => self.config.pretrain_steps + self.config.total_steps,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            arch: self.arch.clone(),
            config: self.config.clone(),
            phase: self.phase,
            step: self.step,
            params: self.shadow.params(),
            adam: self.adam.clone(),
        }
    }

    /// Runs one step; `None` once training is complete.
    pub fn advance(&mut self) -> Result<Option<MetricsRow>> {
        let batch = batch_indices(
            self.config.seed,
            self.phase,
            self.step,
            self.data.len(),
            self.config.batch_size,
        );
        let (m, eps) = match self.phase {
            Phase::Done => return Ok(None),
            Phase::Pretrain => (
                pretrain_step(&mut self.shadow, &mut self.adam, self.data, &batch, &self.config)?,
                0.0,
            ),
            Phase::Robust => {
                let eps = self.config.epsilon(self.step + 1);
                let m = train_step(
                    &mut self.shadow,
                    &mut self.adam,
                    self.data,
                    &batch,
                    eps,
                    &self.config,
                )?;
                (m, eps)
            }
        };
        let phase = self.phase;
        self.step += 1;
        let step = self.global_step();
        self.settle_phase();
        let robust = phase == Phase::Robust;
        Ok(Some(MetricsRow {
            step,
            phase,
            loss: m.loss,
            eps,
            clean_acc: m.clean_acc,
            certified_frac: robust.then_some(m.certified_frac),
            saturated_neuron_frac: robust.then_some(m.saturated_neuron_frac),
        }))
    }

    /// Exact network from the current parameters plus the count of
    /// parameters that saturated during quantization.
    pub fn export(&self) -> Result<(QNetwork, usize)> {
        export_quantized(&self.shadow)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub saturated_parameters: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Pretraining for `config.pretrain_steps` steps in place.
pub fn pretrain(shadow: &mut ShadowNetwork, data: &Dataset, config: &TrainConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    Trainer::check_data(data, shadow)?;
    let mut adam = Adam::new(shadow, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut rows = Vec::new();
    for step in 0..config.pretrain_steps {
        let batch = batch_indices(config.seed, Phase::Pretrain, step, data.len(), config.batch_size);
        let m = pretrain_step(shadow, &mut adam, data, &batch, config)?;
        rows.push(MetricsRow {
            step: step + 1,
            phase: Phase::Pretrain,
            loss: m.loss,
            eps: 0.0,
            clean_acc: m.clean_acc,
            certified_frac: None,
            saturated_neuron_frac: None,
        });
    }
    Ok(rows)
}

/// Pretraining, robust training and export. `on_row` sees every
/// `log_every`-th row and the last row of each phase.
pub fn train(
    data: &Dataset,
    arch: &ArchSpec,
    config: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, arch.clone(), config.clone())?;
    let mut metrics = Vec::new();
    while let Some(row) = trainer.advance()? {
        if row.step % config.log_every == 0 || trainer.phase() != row.phase {
            on_row(&row);
            metrics.push(row);
        }
    }
    let (network, saturated_parameters) = trainer.export()?;
    Ok(TrainOutcome {
        network,
        saturated_parameters,
        metrics,
    })
}

#[cfg(test)]
mod tests;
