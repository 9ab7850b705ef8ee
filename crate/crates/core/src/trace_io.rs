//! Probe logs and raw dynamic call graph (DCG) construction.
//!
//! A probe log is headerless UTF-8 CSV, one row per probe of one monitored
//! function: `slot,func,latency\n`. Hits and misses are both recorded so the
//! hit threshold can be re-applied offline.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three monitored GEMM routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Func {
    Itcopy,
    Oncopy,
    Kernel,
}

impl Func {
    pub const ALL: [Func; 3] = [Func::Itcopy, Func::Oncopy, Func::Kernel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Func::Itcopy => "itcopy",
            Func::Oncopy => "oncopy",
            Func::Kernel => "kernel",
        }
    }
}

impl fmt::Display for Func {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Func {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "itcopy" => Ok(Func::Itcopy),
            "oncopy" => Ok(Func::Oncopy),
            "kernel" => Ok(Func::Kernel),
            other => Err(format!("unknown function name {other:?}")),
        }
    }
}

/// One timed probe of a monitored function address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub slot: u64,
    pub func: Func,
    pub latency: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Latency strictly below this many cycles is a cache hit.
    pub hit_threshold: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hit_threshold: 100 }
    }
}

/// A probe classified as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcgEvent {
    pub slot: u64,
    pub func: Func,
    pub latency: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{msg} at row {row}")]
    Parse { row: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn parse_field(field: &str, name: &str, row: usize) -> Result<u64, TraceError> {
    if field.starts_with('-') {
        return Err(TraceError::Parse {
            row,
            msg: format!("negative {name}"),
        });
    }
    field.parse().map_err(|_| TraceError::Parse {
        row,
        msg: format!("invalid {name} {field:?}"),
    })
}

/// Parses a probe log. Rows are numbered from 1 in error messages.
pub fn read_probe_log<R: BufRead>(source: R) -> Result<Vec<ProbeSample>, TraceError> {
    let mut samples: Vec<ProbeSample> = Vec::new();
    for (idx, line) in source.split(b'\n').enumerate() {
        let row = idx + 1;
        let line = String::from_utf8(line?).map_err(|_| TraceError::Parse {
            row,
            msg: "invalid UTF-8".into(),
        })?;
        let mut fields = line.split(',');
        let (Some(slot), Some(func), Some(latency), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(TraceError::Parse {
                row,
                msg: "expected 3 fields".into(),
            });
        };
        let slot = parse_field(slot, "slot", row)?;
        let func = func
            .parse::<Func>()
            .map_err(|msg| TraceError::Parse { row, msg })?;
        let latency = parse_field(latency, "latency", row)?;
        if samples.last().is_some_and(|prev| prev.slot > slot) {
            return Err(TraceError::Parse {
                row,
                msg: "non-monotone slot".into(),
            });
        }
        samples.push(ProbeSample {
            slot,
            func,
            latency,
        });
    }
    Ok(samples)
}

pub fn write_probe_log<W: Write>(mut sink: W, samples: &[ProbeSample]) -> io::Result<()> {
    for s in samples {
        writeln!(sink, "{},{},{}", s.slot, s.func, s.latency)?;
    }
    sink.flush()
}

/// Hit/miss classification: keeps the samples whose latency is below the
/// threshold, in order.
pub fn create_dcg(samples: &[ProbeSample], cfg: &ProbeConfig) -> Vec<DcgEvent> {
    samples
        .iter()
        .filter(|s| s.latency < cfg.hit_threshold)
        .map(|s| DcgEvent {
            slot: s.slot,
            func: s.func,
            latency: s.latency,
        })
        .collect()
}

/// Slot of the final probe, which marks the end of the traced call.
pub fn trace_end(samples: &[ProbeSample]) -> Option<u64> {
    samples.last().map(|s| s.slot)
}
