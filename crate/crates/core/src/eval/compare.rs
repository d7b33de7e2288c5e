//! Side-by-side measurement of two pipeline runs, and the split of a gain
//! into its function-ordering and block-ordering parts.

use std::fmt::Write as _;

use super::cache::{simulate_icache, CacheConfig, CacheStats};
use super::dyno::{delta, dyno_stats, DynoStats};
use super::report::hot_span;
use crate::error::EvalError;
use crate::model::ProgramModel;
use crate::passes::{BlockAlgorithm, FunctionAlgorithm, LayoutPlan, PipelineConfig, PipelineOutput, SplitMode};
use crate::profile::FlowGraph;
use crate::trace::LbrStack;

pub const HOT_SPAN_COVERAGE: f64 = 0.99;

type Metric = fn(&LayoutMetrics) -> u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayoutMetrics {
    pub dyno: DynoStats,
    pub cache: CacheStats,
    pub hot_span: u64,
    /// Reference edge weight between blocks placed back to back.
    pub fallthrough: u64,
}

/// Sum of `reference` edge counts over pairs of blocks of one function that
/// `plan` places back to back.
pub fn layout_fallthrough(plan: &LayoutPlan, reference: &FlowGraph) -> u64 {
    let mut blocks: Vec<_> = plan.blocks.iter().collect();
    blocks.sort_by_key(|b| b.address);
    blocks
        .windows(2)
        .filter(|w| w[0].function == w[1].function && w[0].end() == w[1].address)
        .map(|w| reference.edge(&w[0].function, &w[0].label, &w[1].label))
        .sum()
}

/// Measures one pipeline run. Branch statistics and the hot span use the
/// run's own profile; the cache model replays `stacks`, recorded against
/// `original`.
pub fn measure(
    original: &ProgramModel,
    stacks: &[LbrStack],
    out: &PipelineOutput,
    reference: &FlowGraph,
    cache: &CacheConfig,
) -> Result<LayoutMetrics, EvalError> {
    Ok(LayoutMetrics {
        dyno: dyno_stats(&out.model, &out.plan, &out.flow)?,
        cache: simulate_icache(original, &out.plan, stacks, cache)?,
        hot_span: hot_span(&out.plan, &out.flow, HOT_SPAN_COVERAGE),
        fallthrough: layout_fallthrough(&out.plan, reference),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Functions,
    Blocks,
    Both,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Functions, Scenario::Blocks, Scenario::Both];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Functions => "Functions",
            Scenario::Blocks => "BBs",
            Scenario::Both => "Both",
        }
    }

    /// `base` restricted to function ordering, block ordering, or both.
    /// A disabled ordering in `base` falls back to its default algorithm.
    pub fn config(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        c.assign_addresses = true;
        let blocks = if base.reorder_blocks == BlockAlgorithm::None {
            BlockAlgorithm::CachePlus
        } else {
            base.reorder_blocks
        };
        let split = if base.split == SplitMode::None {
            SplitMode::ColdOnly
        } else {
            base.split
        };
        if self != Scenario::Blocks {
            c.reorder_functions = FunctionAlgorithm::Hfsort;
        } else {
            c.reorder_functions = FunctionAlgorithm::None;
        }
        if self != Scenario::Functions {
            c.reorder_blocks = blocks;
            c.split = split;
            c.fixup = true;
        } else {
            c.reorder_blocks = BlockAlgorithm::None;
            c.split = SplitMode::None;
        }
        c
    }
}

fn rows(m: &LayoutMetrics) -> Vec<(&'static str, u64)> {
    let mut v: Vec<(&'static str, u64)> = m.dyno.rows().to_vec();
    v.push(("i-cache misses", m.cache.icache_misses));
    v.push(("i-TLB misses", m.cache.itlb_misses));
    v.push(("hot span (99%)", m.hot_span));
    v.push(("fall-through weight", m.fallthrough));
    v
}

/// One row per metric: `a`, `b`, and the change from `a` to `b`.
pub fn format_comparison(a_name: &str, a: &LayoutMetrics, b_name: &str, b: &LayoutMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<32} {:>16} {:>16} {:>10}", "metric", a_name, b_name, "delta");
    for ((name, x), (_, y)) in rows(a).into_iter().zip(rows(b)) {
        let _ = writeln!(out, "{name:<32} {x:>16} {y:>16} {:>10}", delta(x, y));
    }
    out
}

/// Change against `baseline` per scenario column.
pub fn format_breakdown(title: &str, baseline: &LayoutMetrics, columns: &[(Scenario, LayoutMetrics)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{title:<32}");
    for (s, _) in columns {
        let _ = write!(out, " {:>10}", s.label());
    }
    out.push('\n');
    let pick: [(&str, Metric); 5] = [
        ("taken branches", |m| m.dyno.taken_branches),
        ("executed instructions", |m| m.dyno.executed_instructions),
        ("i-cache misses", |m| m.cache.icache_misses),
        ("i-TLB misses", |m| m.cache.itlb_misses),
        ("hot span (99%)", |m| m.hot_span),
    ];
    for (name, get) in pick {
        let _ = write!(out, "{name:<32}");
        for (_, m) in columns {
            let _ = write!(out, " {:>10}", delta(get(baseline), get(m)));
        }
        out.push('\n');
    }
    out
}
