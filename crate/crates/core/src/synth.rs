//! Deterministic synthetic probe traces of the blocked GEMM.
//!
//! Time is linear in work: an L2 iteration of an `mc`-row block inside an L1
//! iteration of depth `kc` lasts `unit * kc * mc` slots. The L3 loop runs
//! inside the first L2 iteration and splits its duration in proportion to the
//! `n` chunks, so every loop's iteration durations are proportional to its
//! chunk sizes. Each probed slot carries one row per monitored function;
//! a trailing all-miss slot marks the end of the call.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::gemm_model::{schedule, BlockingConstants, ConvGeometry, GemmDims};
use crate::inverter::TraceExecutor;
use crate::trace_io::{Func, ProbeSample};

const HIT_LATENCY: (u64, u64) = (28, 60);
const MISS_LATENCY: (u64, u64) = (190, 320);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    /// Slots per row of an `m` block per element of `k` depth.
    pub unit: f64,
    /// Relative standard deviation of each iteration's duration.
    pub jitter: f64,
    /// Probability that a hit is observed a second time shortly after.
    pub duplicate_prob: f64,
    /// Largest offset, in slots, of a duplicate observation.
    pub duplicate_spread: u64,
    /// Probability that a hit is missed.
    pub drop_prob: f64,
    /// Spurious hits per 1000 slots.
    pub spurious_rate: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            unit: 4.0,
            jitter: 0.0,
            duplicate_prob: 0.0,
            duplicate_spread: 9,
            drop_prob: 0.0,
            spurious_rate: 0.0,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<(), String> {
        if !self.unit.is_finite() || self.unit <= 0.0 {
            return Err("unit must be > 0".into());
        }
        if [self.jitter, self.spurious_rate]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return Err("jitter and spurious rate must be >= 0".into());
        }
        for (name, p) in [("duplicate", self.duplicate_prob), ("drop", self.drop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} probability must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Dummy rows and columns added to the first layer's input matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObfuscationPlan {
    pub dummy_rows: u64,
    pub dummy_cols: u64,
}

pub fn apply_obfuscation(dims: &GemmDims, plan: &ObfuscationPlan) -> GemmDims {
    GemmDims {
        m: dims.m + plan.dummy_rows,
        k: dims.k + plan.dummy_cols,
        n: dims.n,
    }
}

/// Sidecar written next to a synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dims: GemmDims,
    pub geometry: ConvGeometry,
    pub id: u64,
    pub seed: u64,
    pub timing_model: TimingModel,
    pub constants: BlockingConstants,
    #[serde(default)]
    pub obfuscation: ObfuscationPlan,
}

struct Marker {
    time: f64,
    func: Func,
    /// Kernel call issued right after this marker.
    with_kernel: bool,
}

fn jittered(rng: &mut ChaCha8Rng, normal: &Normal<f64>, d: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        (d * (1.0 + sigma * normal.sample(rng))).max(1.0)
    } else {
        d
    }
}

pub fn synthesize(
    dims: &GemmDims,
    consts: &BlockingConstants,
    tm: &TimingModel,
    seed: u64,
) -> Vec<ProbeSample> {
    let sched = schedule(dims, consts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut markers = Vec::new();
    let mut clock = 0.0f64;
    let n = dims.n as f64;
    for &kc in &sched.l1 {
        let per_row = tm.unit * kc;
        markers.push(Marker {
            time: clock,
            func: Func::Itcopy,
            with_kernel: false,
        });
        let first_block = per_row * sched.l2[0];
        for &nc in &sched.l3 {
            markers.push(Marker {
                time: clock,
                func: Func::Oncopy,
                with_kernel: true,
            });
            clock += jittered(&mut rng, &normal, first_block * nc as f64 / n, tm.jitter);
        }
        for &mc in &sched.l2[1..] {
            markers.push(Marker {
                time: clock,
                func: Func::Itcopy,
                with_kernel: true,
            });
            clock += jittered(&mut rng, &normal, per_row * mc, tm.jitter);
        }
    }
    let end = clock.round() as u64;

    // Intended hits, before observation noise.
    let slots: Vec<u64> = markers.iter().map(|m| m.time.round() as u64).collect();
    let mut intended: Vec<(u64, Func)> = Vec::with_capacity(markers.len() * 2);
    for (i, m) in markers.iter().enumerate() {
        let slot = slots[i];
        intended.push((slot, m.func));
        if m.with_kernel {
            let next = slots.get(i + 1).copied().unwrap_or(end);
            let k_slot = if next > slot + 1 { slot + 1 } else { slot };
            intended.push((k_slot, Func::Kernel));
        }
    }

    let mut probed: BTreeSet<u64> = BTreeSet::new();
    let mut hits: BTreeSet<(u64, Func)> = BTreeSet::new();
    probed.insert(end);
    for &(slot, func) in &intended {
        probed.insert(slot);
        if tm.drop_prob > 0.0 && rng.gen_bool(tm.drop_prob) {
            continue;
        }
        hits.insert((slot, func));
        if tm.duplicate_prob > 0.0 && tm.duplicate_spread > 0 && rng.gen_bool(tm.duplicate_prob) {
            let dup = slot + rng.gen_range(1..=tm.duplicate_spread);
            if dup < end {
                probed.insert(dup);
                hits.insert((dup, func));
            }
        }
    }
    if tm.spurious_rate > 0.0 {
        let gaps = Exp::new(tm.spurious_rate / 1000.0).expect("positive rate");
        let mut t = gaps.sample(&mut rng);
        while t < end as f64 {
            let slot = t as u64;
            let func = Func::ALL[rng.gen_range(0..3)];
            probed.insert(slot);
            hits.insert((slot, func));
            t += gaps.sample(&mut rng);
        }
    }

    let mut samples = Vec::with_capacity(probed.len() * 3);
    let mut hit_at: BTreeMap<u64, Vec<Func>> = BTreeMap::new();
    for &(slot, func) in &hits {
        hit_at.entry(slot).or_default().push(func);
    }
    for slot in probed {
        let slot_hits = hit_at.get(&slot).map(Vec::as_slice).unwrap_or(&[]);
        for func in Func::ALL {
            let (lo, hi) = if slot_hits.contains(&func) {
                HIT_LATENCY
            } else {
                MISS_LATENCY
            };
            samples.push(ProbeSample {
                slot,
                func,
                latency: rng.gen_range(lo..=hi),
            });
        }
    }
    samples
}

/// Executor backed by [`synthesize`], used for L1 calibration when no real
/// library is available.
#[derive(Debug, Clone)]
pub struct SyntheticExecutor {
    pub constants: BlockingConstants,
    pub timing: TimingModel,
    pub seed: u64,
}

impl TraceExecutor for SyntheticExecutor {
    fn execute(&mut self, dims: GemmDims) -> Result<Vec<ProbeSample>, String> {
        Ok(synthesize(&dims, &self.constants, &self.timing, self.seed))
    }
}
