//! Loop structure recovery from a filtered call graph.
//!
//! An L1 iteration opens with an `itcopy` whose next non-kernel event is an
//! `oncopy`. Within a segment every `itcopy` starts one L2 iteration and every
//! `oncopy` starts one L3 iteration. Durations are intervals between
//! consecutive markers of the same kind; the final iteration of a loop runs
//! until the next boundary (the next `itcopy` for L3, the next segment or the
//! end of the trace for L1 and L2).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_io::{DcgEvent, Func};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoopId {
    L1,
    L2,
    L3,
}

impl fmt::Display for LoopId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LoopId::L1 => "L1",
            LoopId::L2 => "L2",
            LoopId::L3 => "L3",
        };
        f.write_str(s)
    }
}

/// Iteration count, final-iteration ("short") time and mean time of the
/// other iterations, in slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopProperties {
    #[serde(rename = "N")]
    pub n_iters: u64,
    #[serde(rename = "ST")]
    pub short_time: f64,
    #[serde(rename = "AT", default)]
    pub avg_time: Option<f64>,
}

impl LoopProperties {
    pub fn new(n_iters: u64, short_time: f64, avg_time: Option<f64>) -> Self {
        Self {
            n_iters,
            short_time,
            avg_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSet {
    #[serde(rename = "L1")]
    pub l1: LoopProperties,
    #[serde(rename = "L2")]
    pub l2: LoopProperties,
    #[serde(rename = "L3")]
    pub l3: LoopProperties,
}

impl LoopSet {
    pub fn get(&self, id: LoopId) -> &LoopProperties {
        match id {
            LoopId::L1 => &self.l1,
            LoopId::L2 => &self.l2,
            LoopId::L3 => &self.l3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopProfile {
    pub loops: LoopSet,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("pattern not found: {0}")]
    PatternNotFound(&'static str),
    #[error("insufficient markers in {0}")]
    InsufficientMarkers(LoopId),
}

/// Indices of L1-opening `itcopy` events.
pub fn l1_openings(events: &[DcgEvent]) -> Vec<usize> {
    let mut openings = Vec::new();
    let mut pending: Option<usize> = None;
    for (i, e) in events.iter().enumerate() {
        match e.func {
            Func::Itcopy => pending = Some(i),
            Func::Oncopy => {
                if let Some(p) = pending.take() {
                    openings.push(p);
                }
            }
            Func::Kernel => {}
        }
    }
    openings
}

/// Final duration `ST` and mean of the preceding durations. `tail` is how many
/// trailing durations are left out of the mean when enough are available.
fn summarize(durations: &[u64], tail: usize) -> (f64, Option<f64>) {
    let short = *durations.last().expect("at least one duration") as f64;
    let n = durations.len();
    let body = if n > tail {
        &durations[..n - tail]
    } else if n >= 2 {
        &durations[..n - 1]
    } else {
        &[][..]
    };
    let avg = (!body.is_empty()).then(|| body.iter().sum::<u64>() as f64 / body.len() as f64);
    (short, avg)
}

/// Durations between successive slots, closing with `terminator`.
fn durations(starts: &[u64], terminator: u64) -> Vec<u64> {
    starts
        .windows(2)
        .map(|w| w[1] - w[0])
        .chain(starts.last().map(|&s| terminator.saturating_sub(s)))
        .collect()
}

fn properties(
    id: LoopId,
    starts: &[u64],
    terminator: u64,
    tail: usize,
) -> Result<LoopProperties, ProfileError> {
    let d = durations(starts, terminator);
    if d.is_empty() || d.last() == Some(&0) {
        return Err(ProfileError::InsufficientMarkers(id));
    }
    let (short, avg) = summarize(&d, tail);
    Ok(LoopProperties::new(d.len() as u64, short, avg))
}

struct Segment {
    itcopy: Vec<u64>,
    oncopy: Vec<u64>,
    terminator: u64,
}

impl Segment {
    /// End of the final L3 iteration: the first `itcopy` after the last
    /// `oncopy`, or the segment terminator.
    fn l3_terminator(&self) -> u64 {
        let last_on = *self.oncopy.last().expect("segment has an oncopy");
        self.itcopy
            .iter()
            .copied()
            .find(|&s| s > last_on)
            .unwrap_or(self.terminator)
    }
}

/// Computes `N`, `ST` and `AT` for the three loops.
///
/// `end_slot` is the end-of-trace sentinel closing the final iteration. L2 and
/// L3 properties come from the first L1 segment. For L1 and L2 the mean leaves
/// out the two half-sized trailing iterations when `N >= 3`; for L3 only the
/// final one. `AT` is absent when no other iteration exists.
pub fn extract_properties(events: &[DcgEvent], end_slot: u64) -> Result<LoopProfile, ProfileError> {
    if !events.iter().any(|e| e.func == Func::Oncopy) {
        return Err(ProfileError::PatternNotFound("no oncopy events"));
    }
    let openings = l1_openings(events);
    if openings.is_empty() {
        return Err(ProfileError::PatternNotFound(
            "no itcopy precedes an oncopy",
        ));
    }
    let mut warnings = Vec::new();
    if openings[0] > 0 && events[..openings[0]].iter().any(|e| e.func != Func::Kernel) {
        warnings.push("markers before the first L1 opening were ignored".to_string());
    }
    if !events.iter().any(|e| e.func == Func::Kernel) {
        warnings.push("no kernel observations; loop shape not confirmed".to_string());
    }

    let mut segments = Vec::with_capacity(openings.len());
    for (i, &start) in openings.iter().enumerate() {
        let stop = openings.get(i + 1).copied().unwrap_or(events.len());
        let terminator = match openings.get(i + 1) {
            Some(&next) => events[next].slot,
            None => end_slot,
        };
        let slots_of = |f: Func| {
            events[start..stop]
                .iter()
                .filter(|e| e.func == f)
                .map(|e| e.slot)
                .collect::<Vec<_>>()
        };
        segments.push(Segment {
            itcopy: slots_of(Func::Itcopy),
            oncopy: slots_of(Func::Oncopy),
            terminator,
        });
    }

    let first = &segments[0];
    let l2 = properties(LoopId::L2, &first.itcopy, first.terminator, 2)?;
    let l3 = properties(LoopId::L3, &first.oncopy, first.l3_terminator(), 1)?;
    let opening_slots: Vec<u64> = openings.iter().map(|&i| events[i].slot).collect();
    let l1 = properties(LoopId::L1, &opening_slots, end_slot, 2)?;

    let mismatched = segments[1..]
        .iter()
        .filter(|s| s.itcopy.len() != first.itcopy.len() || s.oncopy.len() != first.oncopy.len())
        .count();
    if mismatched > 0 {
        warnings.push(format!(
            "{mismatched} of {} L1 segments disagree with the first segment's L2/L3 counts",
            segments.len()
        ));
    }

    Ok(LoopProfile {
        loops: LoopSet { l1, l2, l3 },
        warnings,
    })
}
