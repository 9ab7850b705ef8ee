//! Recovers the input image dimension of a network's first convolution from
//! cache probe traces of a blocked GEMM library.
//!
//! Pipeline: [`trace_io`] reads probe logs and keeps cache hits as a dynamic
//! call graph, [`noise_filter`] removes duplicate and spurious observations,
//! [`loop_profile`] recovers per-loop iteration counts and timings, and
//! [`inverter`] turns those into `m`, `n`, `k`, the kernel side and the input
//! dimension. [`gemm_model`] and [`synth`] are the forward direction used to
//! generate traces with known answers.

pub mod analysis;
pub mod gemm_model;
pub mod inverter;
pub mod loop_profile;
pub mod noise_filter;
pub mod synth;
pub mod trace_io;

pub use analysis::{analyze, AnalysisConfig, AnalysisError, AnalysisInput, AnalysisReport, Stage};
pub use gemm_model::{
    conv_to_gemm, schedule, BlockingConstants, ConvGeometry, GemmDims, LoopSchedule,
};
pub use inverter::{IdEstimate, KnownGeometry, TraceExecutor};
pub use loop_profile::{extract_properties, LoopId, LoopProperties, LoopSet};
pub use noise_filter::{filter_dcg, FilterConfig};
pub use synth::{
    apply_obfuscation, synthesize, GroundTruth, ObfuscationPlan, SyntheticExecutor, TimingModel,
};
pub use trace_io::{
    create_dcg, read_probe_log, trace_end, write_probe_log, DcgEvent, Func, ProbeConfig,
    ProbeSample,
};
