//! Layout diagnostics: cold blocks stranded among hot ones, and the span of
//! hot code.

use std::fmt;

use crate::passes::{LayoutPlan, PlacedBlock};
use crate::profile::FlowGraph;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadLayout {
    pub function: String,
    /// Hot block right before the cold run, with its count.
    pub before: (String, u64),
    /// Never-executed blocks, in layout order.
    pub cold: Vec<String>,
    pub after: (String, u64),
}

impl fmt::Display for BadLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ({}) -> [{}] (0) -> {} ({})",
            self.function,
            self.before.0,
            self.before.1,
            self.cold.join(", "),
            self.after.0,
            self.after.1
        )
    }
}

/// Every run of zero-count blocks sitting, in final layout order and within
/// one section, between two blocks of the same function with count at least
/// `hot_threshold`.
pub fn report_bad_layout(plan: &LayoutPlan, flow: &FlowGraph, hot_threshold: u64) -> Vec<BadLayout> {
    let mut sorted: Vec<&PlacedBlock> = plan.blocks.iter().collect();
    sorted.sort_by_key(|b| b.address);
    let count = |b: &PlacedBlock| flow.block_count(&b.function, &b.label);
    let hot_threshold = hot_threshold.max(1);
    let mut findings = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let b = sorted[i];
        let c = count(b);
        if c < hot_threshold {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < sorted.len()
            && sorted[j].function == b.function
            && sorted[j].section == b.section
            && count(sorted[j]) == 0
        {
            j += 1;
        }
        if j > i + 1 && j < sorted.len() {
            let after = sorted[j];
            let ac = count(after);
            if after.function == b.function && after.section == b.section && ac >= hot_threshold {
                findings.push(BadLayout {
                    function: b.function.clone(),
                    before: (b.label.clone(), c),
                    cold: sorted[i + 1..j].iter().map(|x| x.label.clone()).collect(),
                    after: (after.label.clone(), ac),
                });
            }
        }
        i = j.max(i + 1);
    }
    findings
}

/// Smallest address interval holding blocks that together account for at
/// least `coverage` of all executed bytes (block count times block size).
pub fn hot_span(plan: &LayoutPlan, flow: &FlowGraph, coverage: f64) -> u64 {
    assert!(coverage > 0.0 && coverage <= 1.0, "coverage must be in (0, 1]");
    let mut blocks: Vec<(u64, u64, u128)> = plan
        .blocks
        .iter()
        .map(|b| (b.address, b.end(), flow.block_count(&b.function, &b.label) as u128 * b.size as u128))
        .filter(|&(_, _, w)| w > 0)
        .collect();
    blocks.sort_unstable();
    let total: u128 = blocks.iter().map(|b| b.2).sum();
    if total == 0 {
        return 0;
    }
    let need = coverage * total as f64;
    let mut best = u64::MAX;
    let mut lo = 0;
    let mut acc: u128 = 0;
    for hi in 0..blocks.len() {
        acc += blocks[hi].2;
        while lo < hi && (acc - blocks[lo].2) as f64 >= need {
            acc -= blocks[lo].2;
            lo += 1;
        }
        if acc as f64 >= need {
            best = best.min(blocks[hi].1 - blocks[lo].0);
        }
    }
    best
}
