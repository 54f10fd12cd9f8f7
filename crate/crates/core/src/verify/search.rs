//! Branch-and-bound over input boxes.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use crate::error::{QnnError, Result};
use crate::fixedpoint::QTensor;
use crate::ibp::{certify_region, Certification, IntervalTensor};
use crate::network::{classify, QNetwork};
use crate::train::Prepared;

use super::pgd::pgd_attack;
use super::{SearchOrder, Verdict, VerifyConfig, VerifyStats};

/// Splits the widest dimension (smallest index on ties) at
/// `l + floor((u - l) / 2)` into `[l, mid]` and `[mid + 1, u]`.
pub fn split(region: &IntervalTensor) -> Result<(IntervalTensor, IntervalTensor)> {
    let (mut best, mut width) = (None, 0i64);
    for (i, (l, u)) in region.lower.raw.iter().zip(&region.upper.raw).enumerate() {
        if u - l > width {
            best = Some(i);
            width = u - l;
        }
    }
    let i = best.ok_or(QnnError::SingletonRegion)?;
    let mid = region.lower.raw[i] + width / 2;
    let mut left = region.clone();
    let mut right = region.clone();
    left.upper.raw[i] = mid;
    right.lower.raw[i] = mid + 1;
    Ok((left, right))
}

/// What happened to one popped region.
pub(crate) enum Step {
    Certified,
    /// Singleton region decided by exact evaluation.
    PointOk,
    Witness(QTensor),
    Split(IntervalTensor, IntervalTensor),
}

pub(crate) struct Context<'a> {
    pub net: &'a QNetwork,
    pub shadow: &'a Prepared<'a>,
    pub class: usize,
    pub cfg: &'a VerifyConfig,
}

impl Context<'_> {
    /// One iteration of the loop body on `region`.
    pub fn process(&self, region: &IntervalTensor, stats: &mut VerifyStats) -> Result<Step> {
        stats.regions_processed += 1;
        if certify_region(self.net, region, self.class, self.cfg.elide_last)? == Certification::Certified {
            return Ok(Step::Certified);
        }
        stats.pgd_calls += 1;
        if let Some(w) = pgd_attack(self.net, self.shadow, region, self.class, &self.cfg.pgd, self.cfg.seed) {
            return Ok(Step::Witness(w));
        }
        if region.is_point() {
            stats.point_checks += 1;
            return Ok(if classify(self.net, &region.lower)? != self.class {
                Step::Witness(region.lower.clone())
            } else {
                Step::PointOk
            });
        }
        stats.splits += 1;
        let (a, b) = split(region)?;
        Ok(Step::Split(a, b))
    }
}

/// Per-iteration measurements of the sequential search.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchTrace {
    /// Sum over queued regions of `(#points)^2`, recorded before each pop.
    pub potential: Vec<u128>,
    /// Whether queued, certified and current regions tiled the initial box at
    /// every iteration.
    pub partition_ok: bool,
}

fn disjoint(a: &IntervalTensor, b: &IntervalTensor) -> bool {
    a.lower
        .raw
        .iter()
        .zip(&a.upper.raw)
        .zip(b.lower.raw.iter().zip(&b.upper.raw))
        .any(|((al, au), (bl, bu))| au < bl || bu < al)
}

fn tiles(root: &IntervalTensor, parts: &[&IntervalTensor]) -> bool {
    let total: Option<u128> = parts
        .iter()
        .try_fold(0u128, |s, p| s.checked_add(p.point_count()?));
    if total != root.point_count() || !parts.iter().all(|p| p.is_within(root)) {
        return false;
    }
    for (i, a) in parts.iter().enumerate() {
        if parts[i + 1..].iter().any(|b| !disjoint(a, b)) {
            return false;
        }
    }
    true
}

fn potential(queue: &VecDeque<IntervalTensor>) -> u128 {
    queue
        .iter()
        .map(|r| {
            let n = r.point_count().unwrap_or(u128::MAX);
            n.checked_mul(n).unwrap_or(u128::MAX)
        })
        .fold(0u128, u128::saturating_add)
}

/// Sequential search in a fixed pop order. With `trace` the termination
/// potential and the partition property are recorded (costly; for tests).
pub(crate) fn run_sequential(
    ctx: &Context<'_>,
    root: IntervalTensor,
    start: Instant,
    stats: &mut VerifyStats,
    mut trace: Option<&mut SearchTrace>,
) -> Result<Verdict> {
    let mut queue = VecDeque::from([root.clone()]);
    let mut certified: Vec<IntervalTensor> = Vec::new();
    if let Some(t) = trace.as_deref_mut() {
        t.partition_ok = true;
    }
    loop {
        if let Some(t) = trace.as_deref_mut() {
            t.potential.push(potential(&queue));
            let parts: Vec<&IntervalTensor> = queue.iter().chain(&certified).collect();
            t.partition_ok &= tiles(&root, &parts);
        }
        let region = match ctx.cfg.order {
            SearchOrder::Lifo => queue.pop_back(),
            SearchOrder::Fifo => queue.pop_front(),
        };
        let Some(region) = region else {
            return Ok(Verdict::Robust);
        };
        if let Some(reason) = ctx.cfg.exhausted(stats, start) {
            return Ok(Verdict::Undecided { reason });
        }
        match ctx.process(&region, stats)? {
            Step::Witness(w) => return Ok(Verdict::Vulnerable { witness: w }),
            Step::Certified | Step::PointOk => {
                if trace.is_some() {
                    certified.push(region);
                }
            }
            // The lower half is popped first under LIFO.
            Step::Split(a, b) => match ctx.cfg.order {
                SearchOrder::Lifo => {
                    queue.push_back(b);
                    queue.push_back(a);
                }
                SearchOrder::Fifo => {
                    queue.push_back(a);
                    queue.push_back(b);
                }
            },
        }
    }
}

struct Shared {
    queue: VecDeque<IntervalTensor>,
    busy: usize,
    outcome: Option<Result<Verdict>>,
}

/// Worker-pool search over a shared queue. The first witness or error stops
/// every worker; `Robust` requires the queue to drain with no worker busy.
pub(crate) fn run_parallel(
    ctx: &Context<'_>,
    root: IntervalTensor,
    start: Instant,
    workers: usize,
    stats: &mut VerifyStats,
) -> Result<Verdict> {
    let shared = Mutex::new(Shared {
        queue: VecDeque::from([root]),
        busy: 0,
        outcome: None,
    });
    let ready = Condvar::new();
    let stop = AtomicBool::new(false);
    let totals = Mutex::new(VerifyStats::default());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| {
                let mut local = VerifyStats::default();
                loop {
                    let region = {
                        let mut g = shared.lock().expect("verifier queue poisoned");
                        loop {
                            if stop.load(Ordering::Acquire) {
                                break None;
                            }
                            let next = match ctx.cfg.order {
                                SearchOrder::Lifo => g.queue.pop_back(),
                                SearchOrder::Fifo => g.queue.pop_front(),
                            };
                            if let Some(r) = next {
                                g.busy += 1;
                                break Some(r);
                            }
                            if g.busy == 0 {
                                if g.outcome.is_none() {
                                    g.outcome = Some(Ok(Verdict::Robust));
                                }
                                stop.store(true, Ordering::Release);
                                ready.notify_all();
                                break None;
                            }
                            g = ready.wait(g).expect("verifier queue poisoned");
                        }
                    };
                    let Some(region) = region else { break };
                    let seen = {
                        let t = totals.lock().expect("stats poisoned");
                        t.regions_processed + local.regions_processed
                    };
                    let budget = VerifyStats {
                        regions_processed: seen,
                        ..VerifyStats::default()
                    };
                    let result = match ctx.cfg.exhausted(&budget, start) {
                        Some(reason) => Err(Ok(Verdict::Undecided { reason })),
                        None => match ctx.process(&region, &mut local) {
                            Ok(Step::Witness(w)) => Err(Ok(Verdict::Vulnerable { witness: w })),
                            Ok(Step::Split(a, b)) => Ok(Some((a, b))),
                            Ok(_) => Ok(None),
                            Err(e) => Err(Err(e)),
                        },
                    };
                    let mut g = shared.lock().expect("verifier queue poisoned");
                    g.busy -= 1;
                    match result {
                        Ok(Some((a, b))) => {
                            g.queue.push_back(b);
                            g.queue.push_back(a);
                        }
                        Ok(None) => {}
                        Err(outcome) => {
                            if g.outcome.is_none() {
                                g.outcome = Some(outcome);
                            }
                            stop.store(true, Ordering::Release);
                        }
                    }
                    ready.notify_all();
                }
                totals.lock().expect("stats poisoned").absorb(&local);
            });
        }
    });
    let totals = totals.into_inner().expect("stats poisoned");
    stats.absorb(&totals);
    let g = shared.into_inner().expect("verifier queue poisoned");
    g.outcome.unwrap_or(Ok(Verdict::Robust))
}
