//! End-to-end analysis: DCG construction, filtering, loop extraction and the
//! inverse calculation, with a serializable report.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gemm_model::BlockingConstants;
use crate::inverter::{
    estimate_id, estimate_k, estimate_l1_at, estimate_m, estimate_n, IdEstimate, InvertError,
    KnownGeometry, TraceExecutor,
};
use crate::loop_profile::{extract_properties, LoopSet, ProfileError};
use crate::noise_filter::{filter_dcg, FilterConfig};
use crate::trace_io::{create_dcg, trace_end, DcgEvent, ProbeConfig, ProbeSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    EstimateM,
    EstimateK,
    CalibrateL1,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Extract => "extract",
            Stage::EstimateM => "estimate_m",
            Stage::EstimateK => "estimate_k",
            Stage::CalibrateL1 => "calibrate_l1",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Invert(#[from] InvertError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("[{stage}] {error}")]
pub struct AnalysisError {
    pub stage: Stage,
    pub error: StageError,
}

impl AnalysisError {
    fn at(stage: Stage, error: impl Into<StageError>) -> Self {
        Self {
            stage,
            error: error.into(),
        }
    }
}

/// Where the loop properties come from.
#[derive(Debug, Clone)]
pub enum AnalysisInput {
    Samples(Vec<ProbeSample>),
    Events {
        events: Vec<DcgEvent>,
        end_slot: u64,
    },
    /// Pre-extracted properties. An `AT` on a single-iteration L1 is taken as
    /// the calibrated full-`Q` time.
    Properties(LoopSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub constants: BlockingConstants,
    pub probe: ProbeConfig,
    pub filter: FilterConfig,
    pub geometry: KnownGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Source {
    Trace,
    Provided,
    Executor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(flatten)]
    pub config: AnalysisConfig,
    pub l1_average_source: L1Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub m: f64,
    pub n: u64,
    pub k: f64,
    pub kernel: f64,
    pub id_raw: f64,
    pub id_rounded: i64,
    /// Calibrated full-`Q` L1 time used for `k`, when `N_L1 < 2`.
    pub at_l1: Option<f64>,
}

impl From<&Estimates> for IdEstimate {
    fn from(e: &Estimates) -> Self {
        IdEstimate {
            m_est: e.m,
            n_est: e.n,
            k_est: e.k,
            kernel_est: e.kernel,
            id_raw: e.id_raw,
            id_rounded: e.id_rounded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: ConfigEcho,
    pub loops: LoopSet,
    pub estimates: Estimates,
    pub warnings: Vec<String>,
}

impl AnalysisReport {
    pub fn id_estimate(&self) -> IdEstimate {
        (&self.estimates).into()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config.config;
        writeln!(
            f,
            "P={} Q={} UNROLL={} threshold={} window={} stride={} padding={} channels={}",
            c.constants.p,
            c.constants.q,
            c.constants.unroll,
            c.probe.hit_threshold,
            c.filter.duplicate_window,
            c.geometry.stride,
            c.geometry.padding,
            c.geometry.in_channels
        )?;
        writeln!(f, "{:<4} {:>6} {:>10} {:>10}", "loop", "N", "ST", "AT")?;
        for (name, p) in [
            ("L1", &self.loops.l1),
            ("L2", &self.loops.l2),
            ("L3", &self.loops.l3),
        ] {
            writeln!(
                f,
                "{:<4} {:>6} {:>10.1} {:>10}",
                name,
                p.n_iters,
                p.short_time,
                fmt_opt(p.avg_time)
            )?;
        }
        let e = &self.estimates;
        writeln!(
            f,
            "m={:.1} n={} k={:.1} kernel={:.1} ID={:.1} -> {}",
            e.m, e.n, e.k, e.kernel, e.id_raw, e.id_rounded
        )?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Runs the full pipeline. `executor` is needed only when the trace has a
/// single L1 iteration and no calibrated L1 average was supplied.
pub fn analyze(
    input: AnalysisInput,
    cfg: &AnalysisConfig,
    executor: Option<&mut dyn TraceExecutor>,
) -> Result<AnalysisReport, AnalysisError> {
    let mut warnings = Vec::new();
    let (loops, from_trace) = match input {
        AnalysisInput::Properties(loops) => (loops, false),
        AnalysisInput::Samples(samples) => {
            let end = trace_end(&samples).unwrap_or(0);
            let events = filter_dcg(&create_dcg(&samples, &cfg.probe), &cfg.filter);
            let profile = extract_properties(&events, end)
                .map_err(|e| AnalysisError::at(Stage::Extract, e))?;
            warnings.extend(profile.warnings);
            (profile.loops, true)
        }
        AnalysisInput::Events { events, end_slot } => {
            let events = filter_dcg(&events, &cfg.filter);
            let profile = extract_properties(&events, end_slot)
                .map_err(|e| AnalysisError::at(Stage::Extract, e))?;
            warnings.extend(profile.warnings);
            (profile.loops, true)
        }
    };

    let consts = &cfg.constants;
    let m = estimate_m(&loops.l2, consts.p).map_err(|e| AnalysisError::at(Stage::EstimateM, e))?;
    let n = estimate_n(&loops.l3, consts.unroll);
    if loops.l3.avg_time.is_none() {
        warnings.push(format!(
            "single L3 iteration: n assumed to fill one {}-wide chunk",
            consts.l3_chunk()
        ));
    }
    if let Some(at) = loops.l3.avg_time {
        let r = loops.l3.short_time / at;
        if (0.4..=0.6).contains(&r) {
            warnings.push(format!(
                "L3 tail ratio {r:.2} is near 1/2; n is exact only when n mod {} is 0 or {}",
                consts.l3_chunk(),
                consts.unroll
            ));
        }
    }
    if let Some(at) = loops.l2.avg_time {
        let r = loops.l2.short_time / at;
        if !(0.5..=1.0).contains(&r) {
            warnings.push(format!(
                "L2 tail ratio {r:.3} is outside the blocking rule's [0.5, 1] range"
            ));
        }
    }
    if loops.l1.n_iters == 2 {
        warnings.push("N_L1 = 2 is below calibrated range; k is biased".to_string());
    }

    let (at_l1, source) = if loops.l1.n_iters >= 2 {
        (None, L1Source::Trace)
    } else if let (false, Some(at)) = (from_trace, loops.l1.avg_time) {
        (Some(at), L1Source::Provided)
    } else {
        let exec = executor.ok_or_else(|| {
            AnalysisError::at(
                Stage::CalibrateL1,
                InvertError::Calibration("no executor available for L1 calibration".into()),
            )
        })?;
        let at = estimate_l1_at(m, n, consts.q, &cfg.probe, &cfg.filter, exec)
            .map_err(|e| AnalysisError::at(Stage::CalibrateL1, e))?;
        (Some(at), L1Source::Executor)
    };
    let k = estimate_k(&loops.l1, consts.q, at_l1)
        .map_err(|e| AnalysisError::at(Stage::EstimateK, e))?;
    let (kernel, id_raw, id_rounded) = estimate_id(m, k, &cfg.geometry);

    let kernel_side = kernel.round();
    if (kernel - kernel_side).abs() > 0.25 {
        warnings.push(format!(
            "kernel estimate {kernel:.2} is not close to an integer side"
        ));
    }

    Ok(AnalysisReport {
        config: ConfigEcho {
            config: *cfg,
            l1_average_source: source,
        },
        loops,
        estimates: Estimates {
            m,
            n,
            k,
            kernel,
            id_raw,
            id_rounded,
            at_l1,
        },
        warnings,
    })
}
