//! Dynamic branch statistics.

use std::fmt::Write as _;

use crate::error::EvalError;
use crate::model::{InstrKind, ProgramModel};
use crate::passes::LayoutPlan;
use crate::profile::FlowGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DynoStats {
    pub executed_forward_branches: u64,
    pub taken_forward_branches: u64,
    pub executed_backward_branches: u64,
    pub taken_backward_branches: u64,
    pub executed_unconditional_branches: u64,
    pub executed_instructions: u64,
    pub total_branches: u64,
    pub taken_branches: u64,
    pub nontaken_conditional_branches: u64,
    pub taken_conditional_branches: u64,
}

pub const ROW_NAMES: [&str; 10] = [
    "executed forward branches",
    "taken forward branches",
    "executed backward branches",
    "taken backward branches",
    "executed unconditional branches",
    "executed instructions",
    "total branches",
    "taken branches",
    "non-taken conditional branches",
    "taken conditional branches",
];

impl DynoStats {
    pub fn rows(&self) -> [(&'static str, u64); 10] {
        let v = [
            self.executed_forward_branches,
            self.taken_forward_branches,
            self.executed_backward_branches,
            self.taken_backward_branches,
            self.executed_unconditional_branches,
            self.executed_instructions,
            self.total_branches,
            self.taken_branches,
            self.nontaken_conditional_branches,
            self.taken_conditional_branches,
        ];
        std::array::from_fn(|i| (ROW_NAMES[i], v[i]))
    }

    pub fn executed_conditional_branches(&self) -> u64 {
        self.executed_forward_branches + self.executed_backward_branches
    }

    /// Checks the identities that tie the ten counters together.
    pub fn identities_hold(&self) -> bool {
        let cond = self.executed_conditional_branches();
        self.taken_conditional_branches + self.nontaken_conditional_branches == cond
            && self.taken_forward_branches + self.taken_backward_branches == self.taken_conditional_branches
            && self.taken_branches == self.taken_conditional_branches + self.executed_unconditional_branches
            && self.total_branches == cond + self.executed_unconditional_branches
    }

    fn cond(&mut self, forward: bool, taken: bool, n: u64) {
        if forward {
            self.executed_forward_branches += n;
            if taken {
                self.taken_forward_branches += n;
            }
        } else {
            self.executed_backward_branches += n;
            if taken {
                self.taken_backward_branches += n;
            }
        }
        if taken {
            self.taken_conditional_branches += n;
        } else {
            self.nontaken_conditional_branches += n;
        }
    }

    fn uncond(&mut self, n: u64) {
        self.executed_unconditional_branches += n;
    }

    fn finish(&mut self) {
        let cond = self.executed_conditional_branches();
        self.total_branches = cond + self.executed_unconditional_branches;
        self.taken_branches = self.taken_conditional_branches + self.executed_unconditional_branches;
    }
}

/// Counts branch executions of `model` laid out by `plan` under `flow`.
/// A conditional branch is forward when its target lies above it.
pub fn dyno_stats(model: &ProgramModel, plan: &LayoutPlan, flow: &FlowGraph) -> Result<DynoStats, EvalError> {
    let mut stats = DynoStats::default();
    for f in &model.functions {
        let Some(ff) = flow.function(&f.name) else {
            continue;
        };
        let cfg = f.cfg();
        let placed = |label: &str| {
            plan.block(&f.name, label).ok_or_else(|| EvalError::MissingBlock {
                function: f.name.clone(),
                block: label.to_string(),
            })
        };
        for (bi, b) in f.blocks.iter().enumerate() {
            let count = ff.block_count(&b.label);
            stats.executed_instructions += count * b.instructions.len() as u64;
            let out: Vec<(usize, u64)> = cfg.succs[bi]
                .iter()
                .map(|&(d, _)| (d, ff.edge(&b.label, &f.blocks[d].label)))
                .filter(|&(_, n)| n > 0)
                .collect();
            if out.is_empty() {
                continue;
            }
            let base = placed(&b.label)?.address;
            let offsets: Vec<u64> = b.instruction_offsets().collect();
            let target_of = |i: usize| f.block_index(b.instructions[i].target().unwrap_or(""));
            let n = b.instructions.len();
            match b.terminator().map(|t| t.kind) {
                Some(InstrKind::CondBranch) => {
                    let t = target_of(n - 1).expect("validated");
                    let forward = placed(&f.blocks[t].label)?.address > base + offsets[n - 1];
                    for (d, c) in out {
                        stats.cond(forward, d == t, c);
                    }
                }
                Some(InstrKind::UncondBranch) if b.paired_cond().is_some() => {
                    let t = target_of(n - 2).expect("validated");
                    let forward = placed(&f.blocks[t].label)?.address > base + offsets[n - 2];
                    for (d, c) in out {
                        stats.cond(forward, d == t, c);
                        if d != t {
                            stats.uncond(c);
                        }
                    }
                }
                Some(InstrKind::UncondBranch) | Some(InstrKind::IndirectBranch) => {
                    stats.uncond(out.iter().map(|&(_, c)| c).sum());
                }
                _ => {}
            }
        }
    }
    stats.finish();
    Ok(stats)
}

pub(crate) fn delta(before: u64, after: u64) -> String {
    if before == 0 {
        if after == 0 {
            "+0.0%".to_string()
        } else {
            "n/a".to_string()
        }
    } else {
        format!("{:+.1}%", (after as f64 - before as f64) * 100.0 / before as f64)
    }
}

/// One `name: value` line per counter.
pub fn format_dyno(stats: &DynoStats) -> String {
    let mut out = String::new();
    for (name, v) in stats.rows() {
        let _ = writeln!(out, "{name}: {v}");
    }
    out
}

/// One `name: after (delta)` line per counter, with the change relative to
/// `before` in percent.
pub fn format_dyno_delta(before: &DynoStats, after: &DynoStats) -> String {
    let mut out = String::new();
    for ((name, b), (_, a)) in before.rows().into_iter().zip(after.rows()) {
        let _ = writeln!(out, "{name}: {a} ({})", delta(b, a));
    }
    out
}
