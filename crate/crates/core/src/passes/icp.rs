//! Indirect call promotion.
//!
//! A promoted site `icall` in block `b` becomes
//!
//! ```text
//! b:       ...  <guard compare>  jcc b.icpN.f
//! b.icpN.d:     call <target>
//! b.icpN.c:     <rest of b>
//!   ...
//! b.icpN.f:     icall
//!               jmp b.icpN.c
//! ```
//!
//! with the fall-back block placed at the end of the function. When the icall
//! was the last instruction of `b`, the continuation is `b`'s old fall-through
//! block and no `.c` block is created.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::PassError;
use crate::model::{BasicBlock, EdgeKind, Function, InstrKind, Instruction, ProgramModel};
use crate::profile::{CallSite, CallSiteProfile, EdgeCount, FlowGraph, FunctionFlow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    /// Minimum share of the site's calls the hottest target must hold.
    pub threshold: f64,
    /// Bytes of the compare-and-branch guard, branch included.
    pub guard_size: u32,
    pub call_size: u32,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            threshold: 0.9,
            guard_size: 8,
            call_size: 5,
        }
    }
}

const GUARD_BRANCH_SIZE: u32 = 2;
const REJOIN_JUMP_SIZE: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromotedSite {
    pub site: CallSite,
    pub target: String,
    /// Calls that went to `target` according to the site histogram.
    pub promoted: u64,
    /// Calls to every other target.
    pub residual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedSite {
    pub site: CallSite,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub model: ProgramModel,
    pub flow: FlowGraph,
    pub promoted: Vec<PromotedSite>,
    pub skipped: Vec<SkippedSite>,
}

fn fresh_label(func: &Function, taken: &BTreeSet<String>, base: &str) -> String {
    let mut k = 0;
    loop {
        let l = if k == 0 {
            base.to_string()
        } else {
            format!("{base}{k}")
        };
        if func.block(&l).is_none() && !taken.contains(&l) {
            return l;
        }
        k += 1;
    }
}

/// Promotes every site whose hottest target reaches the threshold.
pub fn promote_indirect_calls(
    model: &ProgramModel,
    flow: &FlowGraph,
    sites: &CallSiteProfile,
    opts: &IcpOptions,
) -> Result<IcpResult, PassError> {
    if opts.guard_size <= GUARD_BRANCH_SIZE || !(0.0..=1.0).contains(&opts.threshold) {
        return Err(PassError::BadOption {
            option: "icp".into(),
            value: format!("threshold {} guard {}", opts.threshold, opts.guard_size),
        });
    }
    let mut out = model.clone();
    let mut flow = flow.clone();
    let mut promoted = Vec::new();
    let mut skipped = Vec::new();

    // Later sites in a block first, so earlier indices stay valid.
    let mut ordered: Vec<(&CallSite, &BTreeMap<String, u64>)> = sites.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.0.function, &a.0.block)
            .cmp(&(&b.0.function, &b.0.block))
            .then(b.0.index.cmp(&a.0.index))
    });

    for (site, hist) in ordered {
        let not_found = || PassError::SiteNotFound {
            function: site.function.clone(),
            block: site.block.clone(),
            index: site.index,
        };
        let fi = out.function_index(&site.function).ok_or_else(not_found)?;
        let bi = out.functions[fi].block_index(&site.block).ok_or_else(not_found)?;
        let ins = out.functions[fi].blocks[bi]
            .instructions
            .get(site.index)
            .ok_or_else(not_found)?;
        if ins.kind != InstrKind::IndirectCall {
            return Err(not_found());
        }
        let total: u64 = hist.values().sum();
        let Some((target, &hot)) = hist.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            skipped.push(SkippedSite {
                site: site.clone(),
                reason: "empty histogram".into(),
            });
            continue;
        };
        if total == 0 {
            skipped.push(SkippedSite {
                site: site.clone(),
                reason: "empty histogram".into(),
            });
            continue;
        }
        if (hot as f64) < opts.threshold * total as f64 {
            skipped.push(SkippedSite {
                site: site.clone(),
                reason: format!("hottest target holds {hot} of {total} calls"),
            });
            continue;
        }
        if out.function(target).is_none() {
            skipped.push(SkippedSite {
                site: site.clone(),
                reason: format!("unknown target `{target}`"),
            });
            continue;
        }
        let ff = flow.functions.entry(site.function.clone()).or_default();
        promote_site(&mut out.functions[fi], ff, bi, site.index, target, hot, total, opts);
        promoted.push(PromotedSite {
            site: site.clone(),
            target: target.clone(),
            promoted: hot,
            residual: total - hot,
        });
    }
    promoted.reverse();
    Ok(IcpResult {
        model: out,
        flow,
        promoted,
        skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn promote_site(
    func: &mut Function,
    flow: &mut FunctionFlow,
    bi: usize,
    index: usize,
    target: &str,
    hot: u64,
    total: u64,
    opts: &IcpOptions,
) {
    let b_label = func.blocks[bi].label.clone();
    let executions = flow.block_count(&b_label);
    let direct_count = (executions as u128 * hot as u128 + total as u128 / 2) / total as u128;
    let direct_count = direct_count as u64;
    let fallback_count = executions - direct_count;

    let mut taken = BTreeSet::new();
    let mut label = |func: &Function, suffix: &str| {
        let l = fresh_label(func, &taken, &format!("{b_label}.icp{index}.{suffix}"));
        taken.insert(l.clone());
        l
    };
    let direct = label(func, "d");
    let fallback = label(func, "f");

    let mut block = func.blocks[bi].clone();
    let rest: Vec<Instruction> = block.instructions.split_off(index + 1);
    let icall = block.instructions.pop().expect("icall at index");
    let cont = if rest.is_empty() {
        let ft = func.fallthrough(bi).expect("block ending in a call falls through");
        func.blocks[ft].label.clone()
    } else {
        label(func, "c")
    };
    block.instructions.push(Instruction::plain(opts.guard_size - GUARD_BRANCH_SIZE));
    block.instructions.push(Instruction::cond(GUARD_BRANCH_SIZE, fallback.clone()));

    // Edges that left `b` now leave the continuation.
    let moved: Vec<((String, String), EdgeCount)> = if rest.is_empty() {
        Vec::new()
    } else {
        flow.edges
            .iter()
            .filter(|((s, _), _)| *s == b_label)
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    };
    if rest.is_empty() {
        flow.edges.remove(&(b_label.clone(), cont.clone()));
    }
    for ((s, d), e) in moved {
        flow.edges.remove(&(s, d.clone()));
        flow.edges.insert((cont.clone(), d), e);
    }
    let mut put = |s: &str, d: &str, count: u64, kind: EdgeKind| {
        flow.edges.insert(
            (s.to_string(), d.to_string()),
            EdgeCount {
                count,
                mispreds: 0,
                kind,
            },
        );
    };
    put(&b_label, &fallback, fallback_count, EdgeKind::Taken);
    put(&b_label, &direct, direct_count, EdgeKind::FallThrough);
    put(&direct, &cont, direct_count, EdgeKind::FallThrough);
    put(&fallback, &cont, fallback_count, EdgeKind::Taken);

    let mut new_blocks = Vec::with_capacity(func.blocks.len() + 3);
    for (i, b) in func.blocks.iter().enumerate() {
        if i == bi {
            new_blocks.push(block.clone());
            new_blocks.push(BasicBlock::new(direct.clone(), vec![Instruction::call(opts.call_size, target)]));
            if !rest.is_empty() {
                new_blocks.push(BasicBlock::new(cont.clone(), rest.clone()));
            }
        } else {
            new_blocks.push(b.clone());
        }
    }
    new_blocks.push(BasicBlock::new(
        fallback,
        vec![icall, Instruction::jump(REJOIN_JUMP_SIZE, cont)],
    ));
    let counts: Vec<(String, u64)> = new_blocks
        .iter()
        .map(|b| {
            let inflow: u64 = flow.edges.iter().filter(|((_, d), _)| *d == b.label).map(|(_, e)| e.count).sum();
            let outflow: u64 = flow.edges.iter().filter(|((s, _), _)| *s == b.label).map(|(_, e)| e.count).sum();
            let entry = if b.label == new_blocks[0].label { flow.entry_count } else { 0 };
            (b.label.clone(), (inflow + entry).max(outflow))
        })
        .collect();
    flow.block_counts = counts.into_iter().collect();
    func.blocks = new_blocks;
    func.recompute_addresses();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::profile::reconcile_flow;

    fn setup(hist: &[(&str, u64)]) -> (ProgramModel, FlowGraph, CallSiteProfile) {
        let m = parse_model(
            "MODEL v1\n\
             F f 0x0\nB a\nI 3 plain\nI 2 icall\nI 3 plain\nI 2 jcc c\nB b\nI 1 plain\nB c\nI 1 ret\n\
             F g 0x40\nB e\nI 1 ret\n\
             F h 0x50\nB e\nI 1 ret\n",
        )
        .unwrap();
        let mut flow = FlowGraph::default();
        let f = flow.functions.entry("f".into()).or_default();
        f.entry_count = 1000;
        f.edges.insert(
            ("a".into(), "c".into()),
            EdgeCount {
                count: 400,
                mispreds: 0,
                kind: EdgeKind::Taken,
            },
        );
        let (flow, _) = reconcile_flow(&m, &flow);
        let mut sites = CallSiteProfile::new();
        sites.insert(
            CallSite {
                function: "f".into(),
                block: "a".into(),
                index: 1,
            },
            hist.iter().map(|&(t, n)| (t.to_string(), n)).collect(),
        );
        (m, flow, sites)
    }

    #[test]
    fn dominant_target_is_promoted() {
        let (m, flow, sites) = setup(&[("g", 950), ("h", 50)]);
        let r = promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()).unwrap();
        assert_eq!(r.promoted.len(), 1);
        assert_eq!(r.promoted[0].promoted, 950);
        assert_eq!(r.promoted[0].residual, 50);
        r.model.validate().unwrap();
        let f = r.model.function("f").unwrap();
        let labels: Vec<&str> = f.blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["a", "a.icp1.d", "a.icp1.c", "b", "c", "a.icp1.f"]);
        assert_eq!(f.block("a.icp1.d").unwrap().instructions[0].target(), Some("g"));
        // the block executes 1000 times, 95% of them through the direct call
        let ff = &r.flow.functions["f"];
        assert_eq!(ff.edge("a", "a.icp1.d"), 950);
        assert_eq!(ff.edge("a", "a.icp1.f"), 50);
        assert_eq!(ff.edge("a.icp1.c", "c"), 400);
        assert_eq!(ff.edge("a.icp1.c", "b"), 600);
        // flow stays balanced
        let (_, report) = reconcile_flow(&r.model, &r.flow);
        assert!(report.imbalances.is_empty());
    }

    #[test]
    fn split_site_below_threshold_is_untouched() {
        let (m, flow, sites) = setup(&[("g", 60), ("h", 40)]);
        let r = promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()).unwrap();
        assert!(r.promoted.is_empty());
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.model, m);
    }

    #[test]
    fn growth_is_guard_plus_call_plus_rejoin() {
        let (m, flow, sites) = setup(&[("g", 950), ("h", 50)]);
        let r = promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()).unwrap();
        let before = m.function("f").unwrap().size();
        let after = r.model.function("f").unwrap().size();
        // the icall moves to the fall-back block; the guard and direct call
        // are new, as is the jump back to the continuation
        assert_eq!(after - before, 8 + 5 + REJOIN_JUMP_SIZE as u64);
    }

    #[test]
    fn empty_histogram_is_skipped() {
        let (m, flow, sites) = setup(&[]);
        let r = promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()).unwrap();
        assert!(r.promoted.is_empty());
        assert_eq!(r.skipped[0].reason, "empty histogram");
    }

    #[test]
    fn missing_site_is_an_error() {
        let (m, flow, _) = setup(&[]);
        let mut sites = CallSiteProfile::new();
        sites.insert(
            CallSite {
                function: "f".into(),
                block: "a".into(),
                index: 0,
            },
            [("g".to_string(), 10)].into_iter().collect(),
        );
        assert!(matches!(
            promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()),
            Err(PassError::SiteNotFound { .. })
        ));
    }

    #[test]
    fn call_at_block_end_continues_at_fallthrough() {
        let m = parse_model(
            "MODEL v1\nF f 0x0\nB a\nI 2 icall\nB b\nI 1 ret\nF g 0x40\nB e\nI 1 ret\n",
        )
        .unwrap();
        let mut flow = FlowGraph::default();
        flow.functions.entry("f".into()).or_default().entry_count = 10;
        let (flow, _) = reconcile_flow(&m, &flow);
        let mut sites = CallSiteProfile::new();
        sites.insert(
            CallSite {
                function: "f".into(),
                block: "a".into(),
                index: 0,
            },
            [("g".to_string(), 10)].into_iter().collect(),
        );
        let r = promote_indirect_calls(&m, &flow, &sites, &IcpOptions::default()).unwrap();
        r.model.validate().unwrap();
        let f = r.model.function("f").unwrap();
        let labels: Vec<&str> = f.blocks.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["a", "a.icp0.d", "b", "a.icp0.f"]);
        assert_eq!(r.flow.edge("f", "a.icp0.d", "b"), 10);
        let (_, report) = reconcile_flow(&r.model, &r.flow);
        assert!(report.imbalances.is_empty());
    }
}
