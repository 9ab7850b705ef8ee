//! Inverse calculation of the GEMM dimensions and the input image dimension
//! from loop properties.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gemm_model::{ConvGeometry, GemmDims};
use crate::loop_profile::{l1_openings, LoopId, LoopProperties};
use crate::noise_filter::{filter_dcg, FilterConfig};
use crate::trace_io::{create_dcg, trace_end, ProbeConfig, ProbeSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvertError {
    #[error("below calibration range: {loop_id} has {n_iters} iterations, at least {min} needed")]
    BelowCalibrationRange {
        loop_id: LoopId,
        n_iters: u64,
        min: u64,
    },
    #[error("missing average execution time for {0}")]
    MissingAverage(LoopId),
    #[error("calibration failure: {0}")]
    Calibration(String),
}

/// What the attacker is assumed to know about the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownGeometry {
    pub stride: u32,
    pub padding: u32,
    pub in_channels: u32,
}

impl Default for KnownGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            in_channels: 3,
        }
    }
}

impl From<&ConvGeometry> for KnownGeometry {
    fn from(g: &ConvGeometry) -> Self {
        Self {
            stride: g.stride,
            padding: g.padding,
            in_channels: g.in_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdEstimate {
    pub m_est: f64,
    pub n_est: u64,
    pub k_est: f64,
    pub kernel_est: f64,
    pub id_raw: f64,
    pub id_rounded: i64,
}

/// Source of probe traces for a GEMM of chosen dimensions, e.g. a local
/// library run under a probe, or the synthetic generator.
pub trait TraceExecutor {
    fn execute(&mut self, dims: GemmDims) -> Result<Vec<ProbeSample>, String>;
}

fn ratio(props: &LoopProperties, id: LoopId) -> Result<f64, InvertError> {
    let avg = props.avg_time.ok_or(InvertError::MissingAverage(id))?;
    Ok(props.short_time / avg)
}

/// `m = ((N - 2) + 2 * ST / AT) * P`.
pub fn estimate_m(l2: &LoopProperties, p: u64) -> Result<f64, InvertError> {
    if l2.n_iters < 3 {
        return Err(InvertError::BelowCalibrationRange {
            loop_id: LoopId::L2,
            n_iters: l2.n_iters,
            min: 3,
        });
    }
    let r = ratio(l2, LoopId::L2)?;
    Ok(((l2.n_iters - 2) as f64 + 2.0 * r) * p as f64)
}

/// A short final L3 iteration means it processed `unroll` columns instead of
/// `3 * unroll`. Without an average (single iteration) the full width is
/// assumed.
pub fn estimate_n(l3: &LoopProperties, unroll: u64) -> u64 {
    let short_tail = l3.avg_time.is_some_and(|avg| l3.short_time < avg / 2.0);
    if short_tail {
        (l3.n_iters - 1) * 3 * unroll + unroll
    } else {
        l3.n_iters * 3 * unroll
    }
}

/// With fewer than two L1 iterations the average comes from a calibration
/// run (`at_l1`); otherwise from the properties themselves.
pub fn estimate_k(l1: &LoopProperties, q: u64, at_l1: Option<f64>) -> Result<f64, InvertError> {
    if l1.n_iters < 2 {
        let at = at_l1.ok_or(InvertError::MissingAverage(LoopId::L1))?;
        Ok(l1.short_time / at * q as f64)
    } else {
        let r = ratio(l1, LoopId::L1)?;
        Ok(((l1.n_iters - 2) as f64 + 2.0 * r) * q as f64)
    }
}

/// `kernel = sqrt(k / C_in)`, `ID = (sqrt(m) + kernel - 1 - 2 * padding) * stride`.
/// The kernel estimate is used unrounded.
pub fn estimate_id(m_est: f64, k_est: f64, geom: &KnownGeometry) -> (f64, f64, i64) {
    let kernel = (k_est / geom.in_channels as f64).sqrt();
    let id_raw = (m_est.sqrt() + (kernel - 1.0) - 2.0 * geom.padding as f64) * geom.stride as f64;
    (kernel, id_raw, id_raw.round() as i64)
}

/// Measures the time of one full-`q` L1 iteration by running a GEMM of
/// depth `4q` with the estimated `m` and `n`, and averaging the intervals
/// between successive L1 openings, excluding the last interval.
pub fn estimate_l1_at(
    m_est: f64,
    n_est: u64,
    q: u64,
    probe: &ProbeConfig,
    filter: &FilterConfig,
    executor: &mut dyn TraceExecutor,
) -> Result<f64, InvertError> {
    let dims = GemmDims {
        m: (m_est.round() as u64).max(1),
        k: 4 * q,
        n: n_est.max(1),
    };
    let samples = executor.execute(dims).map_err(InvertError::Calibration)?;
    let events = filter_dcg(&create_dcg(&samples, probe), filter);
    let openings: Vec<u64> = l1_openings(&events)
        .into_iter()
        .map(|i| events[i].slot)
        .collect();
    if openings.is_empty() {
        return Err(InvertError::Calibration(
            "L1 pattern not found in executor trace".into(),
        ));
    }
    let end = trace_end(&samples).unwrap_or(0);
    let mut spans: Vec<u64> = openings.windows(2).map(|w| w[1] - w[0]).collect();
    if spans.len() >= 2 {
        spans.pop();
    } else if spans.is_empty() {
        // Single occurrence: the only measurable span runs to the end.
        spans.push(end.saturating_sub(openings[0]));
    }
    let at = spans.iter().sum::<u64>() as f64 / spans.len() as f64;
    if at <= 0.0 {
        return Err(InvertError::Calibration("zero-length L1 iteration".into()));
    }
    Ok(at)
}
