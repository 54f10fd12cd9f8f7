//! Complete L-infinity robustness verification.
//!
//! [`verify`] runs branch-and-bound over the input box: each region is
//! bounded with interval propagation, attacked with PGD when the bounds do
//! not certify it, and split along its widest dimension otherwise. Single
//! points are decided by exact evaluation, so the search always terminates
//! with a definite answer unless a budget runs out first.

mod pgd;
mod search;

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QnnError, Result};
use crate::fixedpoint::QTensor;
use crate::ibp::{certify_region, input_region, Certification};
use crate::network::{classify, QNetwork};
use crate::train::{Semantics, ShadowNetwork};

pub use pgd::{pgd_attack, region_seed, PgdConfig};
pub use search::{split, SearchTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchOrder {
    /// Depth first.
    Lifo,
    /// Breadth first.
    Fifo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Wall-clock budget per sample; `None` disables it.
    #[serde(with = "opt_secs")]
    pub timeout: Option<Duration>,
    /// Budget on processed regions per sample; `None` disables it.
    pub max_regions: Option<u64>,
    pub pgd: PgdConfig,
    pub order: SearchOrder,
    /// Threads per sample in [`verify`], or samples in flight in
    /// [`certify_dataset`].
    pub workers: usize,
    /// Single worker and no timing fields in reports.
    pub deterministic: bool,
    /// Bound logit differences through the last layer directly.
    pub elide_last: bool,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            timeout: Some(Duration::from_secs(20)),
            max_regions: None,
            pgd: PgdConfig::default(),
            order: SearchOrder::Lifo,
            workers: 1,
            deterministic: false,
            elide_last: true,
            seed: 0,
        }
    }
}

mod opt_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&d.as_secs_f64()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        let v: Option<f64> = Option::deserialize(d)?;
        match v {
            None => Ok(None),
            Some(s) if s.is_finite() && s > 0.0 => Ok(Some(Duration::from_secs_f64(s))),
            Some(s) => Err(serde::de::Error::custom(format!(
                "timeout must be positive seconds, got {s}"
            ))),
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_some_and(|t| t.is_zero()) {
            return Err(QnnError::Config("timeout: must be positive".into()));
        }
        if self.pgd.steps == 0 {
            return Err(QnnError::Config("pgd.steps: must be at least 1".into()));
        }
        if !(self.pgd.step_fraction.is_finite() && self.pgd.step_fraction > 0.0) {
            return Err(QnnError::Config("pgd.step_fraction: must be positive".into()));
        }
        if self.workers == 0 {
            return Err(QnnError::Config("workers: must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }

    /// Budget check, never before the first region has been processed.
    pub(crate) fn exhausted(&self, stats: &VerifyStats, start: Instant) -> Option<UndecidedReason> {
        if stats.regions_processed == 0 {
            return None;
        }
        if self.max_regions.is_some_and(|m| stats.regions_processed >= m) {
            return Some(UndecidedReason::RegionBudget);
        }
        if self.timeout.is_some_and(|t| start.elapsed() >= t) {
            return Some(UndecidedReason::Timeout);
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndecidedReason {
    Timeout,
    RegionBudget,
    /// Baseline only: bounds and attack both failed on the whole ball.
    NoBranching,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Robust,
    Vulnerable { witness: QTensor },
    Undecided { reason: UndecidedReason },
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Robust => "robust",
            Verdict::Vulnerable { .. } => "vulnerable",
            Verdict::Undecided { .. } => "undecided",
        }
    }

    pub fn is_decided(&self) -> bool {
        !matches!(self, Verdict::Undecided { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyStats {
    pub regions_processed: u64,
    pub splits: u64,
    pub pgd_calls: u64,
    /// Singleton regions decided by exact evaluation.
    pub point_checks: u64,
    pub wall_time: Duration,
}

impl VerifyStats {
    fn absorb(&mut self, o: &VerifyStats) {
        self.regions_processed += o.regions_processed;
        self.splits += o.splits;
        self.pgd_calls += o.pgd_calls;
        self.point_checks += o.point_checks;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    pub verdict: Verdict,
    /// Class of the unperturbed input; robustness is relative to it.
    pub reference_class: usize,
    pub stats: VerifyStats,
}

struct Setup {
    class: usize,
    shadow: ShadowNetwork,
}

fn setup(net: &QNetwork, x: &QTensor, cfg: &VerifyConfig) -> Result<Setup> {
    cfg.validate()?;
    net.check_input(x)?;
    Ok(Setup {
        class: classify(net, x)?,
        shadow: ShadowNetwork::from_qnetwork(net),
    })
}

/// Rejects witnesses that are outside the ball or not misclassified.
fn checked(net: &QNetwork, x: &QTensor, eps: u32, class: usize, v: Verdict) -> Result<Verdict> {
    if let Verdict::Vulnerable { witness } = &v {
        let inside = witness
            .raw
            .iter()
            .zip(&x.raw)
            .all(|(a, b)| (a - b).abs() <= eps as i64);
        if !inside || classify(net, witness)? == class {
            return Err(QnnError::Numeric("attack produced an invalid witness".into()));
        }
    }
    Ok(v)
}

fn run(
    net: &QNetwork,
    x: &QTensor,
    eps: u32,
    cfg: &VerifyConfig,
    trace: Option<&mut SearchTrace>,
) -> Result<VerifyResult> {
    let start = Instant::now();
    let s = setup(net, x, cfg)?;
    let prepared = s.shadow.prepare(Semantics::Quantized);
    let ctx = search::Context {
        net,
        shadow: &prepared,
        class: s.class,
        cfg,
    };
    let root = input_region(x, eps);
    let mut stats = VerifyStats::default();
    let workers = cfg.effective_workers();
    let verdict = if trace.is_some() || workers <= 1 {
        search::run_sequential(&ctx, root, start, &mut stats, trace)?
    } else {
        search::run_parallel(&ctx, root, start, workers, &mut stats)?
    };
    stats.wall_time = start.elapsed();
    Ok(VerifyResult {
        verdict: checked(net, x, eps, s.class, verdict)?,
        reference_class: s.class,
        stats,
    })
}

/// Decides whether every grid point within `eps` raw levels of `x` (in the
/// L-infinity norm) receives the same class as `x`.
pub fn verify(net: &QNetwork, x: &QTensor, eps: u32, cfg: &VerifyConfig) -> Result<VerifyResult> {
    run(net, x, eps, cfg, None)
}

/// Sequential [`verify`] that also records the search trace.
pub fn verify_instrumented(
    net: &QNetwork,
    x: &QTensor,
    eps: u32,
    cfg: &VerifyConfig,
) -> Result<(VerifyResult, SearchTrace)> {
    let mut trace = SearchTrace::default();
    let r = run(net, x, eps, cfg, Some(&mut trace))?;
    Ok((r, trace))
}

/// The first iteration of [`verify`] alone: one bound check and one attack on
/// the whole ball, without branching.
pub fn verify_baseline(net: &QNetwork, x: &QTensor, eps: u32, cfg: &VerifyConfig) -> Result<VerifyResult> {
    let start = Instant::now();
    let s = setup(net, x, cfg)?;
    let prepared = s.shadow.prepare(Semantics::Quantized);
    let root = input_region(x, eps);
    let mut stats = VerifyStats {
        regions_processed: 1,
        ..VerifyStats::default()
    };
    let verdict = if certify_region(net, &root, s.class, cfg.elide_last)? == Certification::Certified {
        Verdict::Robust
    } else {
        stats.pgd_calls = 1;
        match pgd_attack(net, &prepared, &root, s.class, &cfg.pgd, cfg.seed) {
            Some(witness) => Verdict::Vulnerable { witness },
            None if root.is_point() => {
                stats.point_checks = 1;
                Verdict::Robust
            }
            None => Verdict::Undecided {
                reason: UndecidedReason::NoBranching,
            },
        }
    };
    stats.wall_time = start.elapsed();
    Ok(VerifyResult {
        verdict: checked(net, x, eps, s.class, verdict)?,
        reference_class: s.class,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full branch-and-bound.
    Complete,
    /// Bounds and attack without branching.
    Baseline,
}

/// Per-sample line of a dataset report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<UndecidedReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<i64>>,
    pub regions_processed: u64,
    pub splits: u64,
    pub pgd_calls: u64,
    /// Seconds; omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub method: Method,
    pub eps: u32,
    pub total: usize,
    pub robust_count: usize,
    pub vulnerable_count: usize,
    pub undecided_count: usize,
    /// Correctly classified samples.
    pub correct_count: usize,
    /// Correctly classified and verified robust.
    pub certified_correct_count: usize,
    pub certified_robust_accuracy: f64,
    pub samples: Vec<SampleRecord>,
}

fn record(index: usize, label: usize, r: &VerifyResult, deterministic: bool) -> SampleRecord {
    let (reason, witness) = match &r.verdict {
        Verdict::Undecided { reason } => (Some(*reason), None),
        Verdict::Vulnerable { witness } => (None, Some(witness.raw.clone())),
        Verdict::Robust => (None, None),
    };
    SampleRecord {
        index,
        label,
        predicted: r.reference_class,
        verdict: r.verdict.name().to_string(),
        reason,
        witness,
        regions_processed: r.stats.regions_processed,
        splits: r.stats.splits,
        pgd_calls: r.stats.pgd_calls,
        wall_time: (!deterministic).then(|| r.stats.wall_time.as_secs_f64()),
    }
}

/// Verifies every sample of `data` and aggregates the verdicts. Samples are
/// processed concurrently (up to `cfg.workers`) unless `cfg.deterministic`.
pub fn certify_dataset(
    net: &QNetwork,
    data: &Dataset,
    eps: u32,
    cfg: &VerifyConfig,
    method: Method,
) -> Result<DatasetReport> {
    cfg.validate()?;
    let one = |i: usize| -> Result<SampleRecord> {
        let sample_cfg = VerifyConfig {
            workers: 1,
            ..cfg.clone()
        };
        let x = data.sample(i);
        let r = match method {
            Method::Complete => verify(net, &x, eps, &sample_cfg)?,
            Method::Baseline => verify_baseline(net, &x, eps, &sample_cfg)?,
        };
        Ok(record(i, data.labels[i], &r, cfg.deterministic))
    };
    let workers = cfg.effective_workers();
    let samples: Vec<SampleRecord> = if workers <= 1 {
        (0..data.len()).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| QnnError::Config(format!("workers: {e}")))?;
        pool.install(|| (0..data.len()).into_par_iter().map(one).collect::<Result<_>>())?
    };
    let count = |v: &str| samples.iter().filter(|s| s.verdict == v).count();
    let correct_count = samples.iter().filter(|s| s.predicted == s.label).count();
    let certified_correct_count = samples
        .iter()
        .filter(|s| s.predicted == s.label && s.verdict == "robust")
        .count();
    Ok(DatasetReport {
        method,
        eps,
        total: samples.len(),
        robust_count: count("robust"),
        vulnerable_count: count("vulnerable"),
        undecided_count: count("undecided"),
        correct_count,
        certified_correct_count,
        certified_robust_accuracy: if samples.is_empty() {
            0.0
        } else {
            certified_correct_count as f64 / samples.len() as f64
        },
        samples,
    })
}
