//! Duplicate and spurious observation removal.
//!
//! Rule 1 drops an event that follows the previously retained event of the
//! same function by fewer than `duplicate_window` slots. Rule 2 drops an
//! `itcopy` whose interval to the preceding retained `itcopy` of its L1
//! segment is below `interval_fraction` of that segment's mean `itcopy`
//! interval. L1 openings are never removed by rule 2.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::loop_profile::l1_openings;
use crate::trace_io::{DcgEvent, Func};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub duplicate_window: u64,
    pub itcopy_interval_rule: bool,
    pub interval_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            duplicate_window: 10,
            itcopy_interval_rule: true,
            interval_fraction: 0.5,
        }
    }
}

pub fn filter_dcg(events: &[DcgEvent], cfg: &FilterConfig) -> Vec<DcgEvent> {
    let mut kept = drop_duplicates(events, cfg.duplicate_window);
    if cfg.itcopy_interval_rule {
        // Each pass can raise a segment's mean, so run to a fixed point.
        loop {
            let before = kept.len();
            kept = drop_short_itcopy_intervals(&kept, cfg.interval_fraction);
            if kept.len() == before {
                break;
            }
        }
    }
    kept
}

fn drop_duplicates(events: &[DcgEvent], window: u64) -> Vec<DcgEvent> {
    let mut last: HashMap<Func, u64> = HashMap::new();
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        if let Some(&prev) = last.get(&e.func) {
            if e.slot.saturating_sub(prev) < window {
                continue;
            }
        }
        last.insert(e.func, e.slot);
        out.push(*e);
    }
    out
}

fn drop_short_itcopy_intervals(events: &[DcgEvent], fraction: f64) -> Vec<DcgEvent> {
    let openings = l1_openings(events);
    // Segment boundaries: the prefix before the first opening is its own group.
    let mut bounds: Vec<usize> = Vec::with_capacity(openings.len() + 2);
    bounds.push(0);
    bounds.extend(openings.iter().copied().filter(|&i| i > 0));
    bounds.push(events.len());

    let mut drop = vec![false; events.len()];
    for w in bounds.windows(2) {
        let itcopy: Vec<usize> = (w[0]..w[1])
            .filter(|&i| events[i].func == Func::Itcopy)
            .collect();
        if itcopy.len() < 2 {
            continue;
        }
        let span = events[*itcopy.last().unwrap()]
            .slot
            .saturating_sub(events[itcopy[0]].slot);
        let mean = span as f64 / (itcopy.len() - 1) as f64;
        let cut = fraction * mean;
        let mut prev = events[itcopy[0]].slot;
        for &i in &itcopy[1..] {
            let gap = events[i].slot.saturating_sub(prev) as f64;
            if gap < cut {
                drop[i] = true;
            } else {
                prev = events[i].slot;
            }
        }
    }
    events
        .iter()
        .zip(drop)
        .filter_map(|(e, d)| (!d).then_some(*e))
        .collect()
}
