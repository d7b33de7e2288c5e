//! Turning raw samples into a per-function edge profile and a weighted call
//! graph.
//!
//! With branch stacks every taken branch is recorded directly and the
//! not-taken paths are recovered from the straight-line code between two
//! consecutive records. Plain instruction-pointer samples only give block
//! counts, from which edge counts have to be guessed.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::ProfileError;
use crate::model::{Cfg, EdgeKind, Function, InstrKind, ProgramModel};
use crate::trace::{IpSample, LbrStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeCount {
    pub count: u64,
    pub mispreds: u64,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FunctionFlow {
    pub entry_count: u64,
    pub edges: BTreeMap<(String, String), EdgeCount>,
    pub block_counts: BTreeMap<String, u64>,
    /// Edge counts were guessed from block counts rather than recorded.
    pub inferred: bool,
}

impl FunctionFlow {
    pub fn edge(&self, src: &str, dst: &str) -> u64 {
        self.edges
            .get(&(src.to_string(), dst.to_string()))
            .map_or(0, |e| e.count)
    }

    pub fn block_count(&self, label: &str) -> u64 {
        self.block_counts.get(label).copied().unwrap_or(0)
    }

    pub fn total_edge_count(&self) -> u64 {
        self.edges.values().map(|e| e.count).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entry_count == 0
            && self.edges.values().all(|e| e.count == 0)
            && self.block_counts.values().all(|&c| c == 0)
    }
}

/// Reconciled or raw edge profile, keyed by function name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowGraph {
    pub functions: BTreeMap<String, FunctionFlow>,
}

impl FlowGraph {
    pub fn function(&self, name: &str) -> Option<&FunctionFlow> {
        self.functions.get(name)
    }

    pub fn edge(&self, func: &str, src: &str, dst: &str) -> u64 {
        self.functions.get(func).map_or(0, |f| f.edge(src, dst))
    }

    pub fn block_count(&self, func: &str, label: &str) -> u64 {
        self.functions.get(func).map_or(0, |f| f.block_count(label))
    }

    /// Sum of block counts of one function.
    pub fn function_weight(&self, func: &str) -> u64 {
        self.functions
            .get(func)
            .map_or(0, |f| f.block_counts.values().sum())
    }

    /// Sets every block count to the larger of its inflow and outflow.
    pub fn recompute_block_counts(&mut self, model: &ProgramModel) {
        for func in &model.functions {
            if let Some(flow) = self.functions.get_mut(&func.name) {
                let cfg = func.cfg();
                let dense = DenseFlow::from_flow(&cfg, flow);
                flow.block_counts = func
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(b, block)| {
                        (block.label.clone(), dense.inflow(&cfg, b).max(dense.outflow(&cfg, b)))
                    })
                    .collect();
            }
        }
    }
}

/// Edge counts of one function indexed by block number.
#[derive(Debug, Clone, Default)]
pub(crate) struct DenseFlow {
    pub entry: u64,
    pub edges: HashMap<(usize, usize), (u64, u64)>,
}

impl DenseFlow {
    pub fn from_flow(cfg: &Cfg, flow: &FunctionFlow) -> Self {
        let mut edges = HashMap::new();
        for ((s, d), e) in &flow.edges {
            if let (Some(s), Some(d)) = (cfg.index_of(s), cfg.index_of(d)) {
                edges.insert((s, d), (e.count, e.mispreds));
            }
        }
        DenseFlow {
            entry: flow.entry_count,
            edges,
        }
    }

    pub fn get(&self, s: usize, d: usize) -> u64 {
        self.edges.get(&(s, d)).map_or(0, |e| e.0)
    }

    pub fn add(&mut self, s: usize, d: usize, n: u64) {
        self.edges.entry((s, d)).or_default().0 += n;
    }

    pub fn inflow(&self, cfg: &Cfg, b: usize) -> u64 {
        let entry = if b == 0 { self.entry } else { 0 };
        entry + cfg.preds[b].iter().map(|&(p, _)| self.get(p, b)).sum::<u64>()
    }

    pub fn outflow(&self, cfg: &Cfg, b: usize) -> u64 {
        cfg.succs[b].iter().map(|&(s, _)| self.get(b, s)).sum()
    }

    pub fn into_flow(self, func: &Function, cfg: &Cfg, inferred: bool) -> FunctionFlow {
        let mut flow = FunctionFlow {
            entry_count: self.entry,
            inferred,
            ..Default::default()
        };
        for b in 0..cfg.len() {
            let count = self.inflow(cfg, b).max(self.outflow(cfg, b));
            flow.block_counts.insert(func.blocks[b].label.clone(), count);
        }
        let mut edges: Vec<_> = self.edges.into_iter().collect();
        edges.sort();
        for ((s, d), (count, mispreds)) in edges {
            let kind = cfg.edge_kind(s, d).unwrap_or(EdgeKind::Taken);
            flow.edges.insert(
                (func.blocks[s].label.clone(), func.blocks[d].label.clone()),
                EdgeCount {
                    count,
                    mispreds,
                    kind,
                },
            );
        }
        flow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallNode {
    pub size: u64,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallGraph {
    pub nodes: BTreeMap<String, CallNode>,
    pub edges: BTreeMap<(String, String), u64>,
}

impl CallGraph {
    /// One node per model function, weighted by the profile's block counts.
    pub fn with_nodes(model: &ProgramModel, weight: impl Fn(&Function) -> u64) -> Self {
        CallGraph {
            nodes: model
                .functions
                .iter()
                .map(|f| {
                    (
                        f.name.clone(),
                        CallNode {
                            size: f.size(),
                            weight: weight(f),
                        },
                    )
                })
                .collect(),
            edges: BTreeMap::new(),
        }
    }

    pub fn edge(&self, caller: &str, callee: &str) -> u64 {
        self.edges
            .get(&(caller.to_string(), callee.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn add_edge(&mut self, caller: &str, callee: &str, n: u64) {
        *self
            .edges
            .entry((caller.to_string(), callee.to_string()))
            .or_default() += n;
    }
}

/// An indirect call instruction, identified by its position in the model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallSite {
    pub function: String,
    pub block: String,
    pub index: usize,
}

/// Observed callee histogram of every indirect call site.
pub type CallSiteProfile = BTreeMap<CallSite, BTreeMap<String, u64>>;

/// Per-function, per-block sample counts.
pub type BlockCounts = BTreeMap<String, BTreeMap<String, u64>>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttributionStats {
    /// Entries whose endpoints do not resolve to a valid branch.
    pub dropped_entries: usize,
    /// Consecutive entries whose straight-line path could not be followed.
    pub dropped_paths: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LbrProfile {
    pub flow: FlowGraph,
    pub calls: CallGraph,
    pub call_sites: CallSiteProfile,
    pub stats: AttributionStats,
}

/// Builds a raw (unreconciled) edge profile and call graph from branch stacks.
pub fn attribute_lbr(model: &ProgramModel, stacks: &[LbrStack]) -> LbrProfile {
    let cfgs: Vec<Cfg> = model.functions.iter().map(Function::cfg).collect();
    let mut dense: Vec<DenseFlow> = vec![DenseFlow::default(); model.functions.len()];
    let mut call_edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut call_sites: BTreeMap<(usize, usize, usize), BTreeMap<usize, u64>> = BTreeMap::new();
    let mut stats = AttributionStats::default();

    for stack in stacks {
        let mut landing = None;
        for entry in stack.entries.iter().rev() {
            let from = model.resolve(entry.from);
            let mut to = model.resolve(entry.to);
            if let (Some(src), Some(dst)) = (from, to.as_mut()) {
                if src.function == dst.function && dst.byte_offset == 0 {
                    let func = &model.functions[src.function];
                    dst.block = branch_target(func, &cfgs[src.function], src.block, dst.block);
                }
            }

            if let (Some(land), Some(src)) = (landing, from) {
                match straight_line_path(model, land, src, entry.from) {
                    Some(path) => {
                        for (s, d) in path {
                            dense[src.function].add(s, d, 1);
                        }
                    }
                    None => stats.dropped_paths += 1,
                }
            }
            landing = to;

            let (Some(src), Some(dst)) = (from, to) else {
                stats.dropped_entries += 1;
                continue;
            };
            let func = &model.functions[src.function];
            let kind = func.blocks[src.block].instructions[src.instruction].kind;
            let at_entry = entry.to == model.functions[dst.function].address;
            let cross = src.function != dst.function;
            match kind {
                InstrKind::CondBranch | InstrKind::UncondBranch | InstrKind::IndirectBranch
                    if !cross =>
                {
                    let taken = dst.byte_offset == 0
                        && cfgs[src.function].edge_kind(src.block, dst.block)
                            == Some(EdgeKind::Taken)
                        && is_exit_branch(&func.blocks[src.block], src.instruction);
                    if taken {
                        let e = dense[src.function]
                            .edges
                            .entry((src.block, dst.block))
                            .or_default();
                        e.0 += 1;
                        e.1 += entry.mispredicted as u64;
                    } else {
                        stats.dropped_entries += 1;
                    }
                }
                InstrKind::DirectCall | InstrKind::IndirectCall | InstrKind::IndirectBranch
                    if at_entry =>
                {
                    let ins = &func.blocks[src.block].instructions[src.instruction];
                    let callee = &model.functions[dst.function];
                    if kind == InstrKind::DirectCall && ins.target() != Some(callee.name.as_str())
                    {
                        stats.dropped_entries += 1;
                        continue;
                    }
                    *call_edges.entry((src.function, dst.function)).or_default() += 1;
                    dense[dst.function].entry += 1;
                    if kind == InstrKind::IndirectCall {
                        *call_sites
                            .entry((src.function, src.block, src.instruction))
                            .or_default()
                            .entry(dst.function)
                            .or_default() += 1;
                    }
                }
                InstrKind::Return => {}
                _ => stats.dropped_entries += 1,
            }
        }
    }

    let mut flow = FlowGraph::default();
    for ((func, cfg), d) in model.functions.iter().zip(&cfgs).zip(dense) {
        flow.functions
            .insert(func.name.clone(), d.into_flow(func, cfg, false));
    }
    let mut calls = CallGraph::with_nodes(model, |f| flow.function_weight(&f.name));
    for ((caller, callee), n) in call_edges {
        calls.add_edge(&model.functions[caller].name, &model.functions[callee].name, n);
    }
    let call_sites = call_sites
        .into_iter()
        .map(|((f, b, i), hist)| {
            let func = &model.functions[f];
            (
                CallSite {
                    function: func.name.clone(),
                    block: func.blocks[b].label.clone(),
                    index: i,
                },
                hist.into_iter()
                    .map(|(g, n)| (model.functions[g].name.clone(), n))
                    .collect(),
            )
        })
        .collect();
    LbrProfile {
        flow,
        calls,
        call_sites,
        stats,
    }
}

/// Empty blocks share their address with the block after them. Picks the
/// block at `dst`, or one of the empty blocks right before it, that `src`
/// branches to.
fn branch_target(func: &Function, cfg: &Cfg, src: usize, dst: usize) -> usize {
    let mut b = dst;
    loop {
        if cfg.edge_kind(src, b) == Some(EdgeKind::Taken) {
            return b;
        }
        if b == 0 || !func.blocks[b - 1].instructions.is_empty() {
            return dst;
        }
        b -= 1;
    }
}

/// Whether instruction `i` leaves its block: the last instruction, or the
/// conditional half of a trailing `jcc`/`jmp` pair.
fn is_exit_branch(block: &crate::model::BasicBlock, i: usize) -> bool {
    let n = block.instructions.len();
    i + 1 == n || (i + 2 == n && block.paired_cond().is_some())
}

/// Fall-through edges crossed when executing from `landing` up to the branch
/// at `from_addr` without any taken branch in between.
pub(crate) fn straight_line_path(
    model: &ProgramModel,
    landing: crate::model::Location,
    source: crate::model::Location,
    from_addr: u64,
) -> Option<Vec<(usize, usize)>> {
    if landing.function != source.function {
        return None;
    }
    let func = &model.functions[landing.function];
    let landing_addr = func.blocks[landing.block].address + landing.byte_offset;
    if landing_addr > from_addr {
        return None;
    }
    let mut path = Vec::new();
    for b in landing.block..source.block {
        if func.fallthrough(b) != Some(b + 1) {
            return None;
        }
        path.push((b, b + 1));
    }
    Some(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleProfile {
    pub counts: BlockCounts,
    pub dropped: usize,
}

pub fn attribute_samples(model: &ProgramModel, samples: &[IpSample]) -> SampleProfile {
    let mut counts: BlockCounts = model
        .functions
        .iter()
        .map(|f| {
            (
                f.name.clone(),
                f.blocks.iter().map(|b| (b.label.clone(), 0)).collect(),
            )
        })
        .collect();
    let mut dropped = 0;
    for s in samples {
        match model.resolve(s.ip) {
            Some(loc) => {
                let f = &model.functions[loc.function];
                *counts
                    .get_mut(&f.name)
                    .and_then(|m| m.get_mut(&f.blocks[loc.block].label))
                    .expect("every model block is pre-seeded") += 1;
            }
            None => dropped += 1,
        }
    }
    SampleProfile { counts, dropped }
}

const MAX_INFERENCE_SWEEPS: usize = 100;

/// Splits `total` in proportion to `weights` so the parts sum to `total`.
/// Leftover units go to the largest remainders, earlier entries of
/// `preference` first on ties. All-zero weights send everything to
/// `preference[0]`.
fn apportion(total: u64, weights: &[u64], preference: &[usize]) -> Vec<u64> {
    let mut out = vec![0u64; weights.len()];
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        if let Some(&first) = preference.first() {
            out[first] = total;
        }
        return out;
    }
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned = 0u64;
    for (i, &w) in weights.iter().enumerate() {
        let exact = total as u128 * w as u128;
        out[i] = (exact / sum) as u64;
        assigned += out[i];
        remainders.push((exact % sum, i));
    }
    let rank = |i: usize| preference.iter().position(|&p| p == i).unwrap_or(usize::MAX);
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(rank(a.1).cmp(&rank(b.1))));
    for &(_, i) in remainders.iter().take((total - assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Guesses edge counts from block counts alone.
///
/// Each block's count is split over its successors in proportion to the part
/// of each successor's count not yet explained by its other predecessors.
/// The first sweep splits uniformly. Unexplained splits go to the
/// fall-through successor.
pub fn infer_edges_from_counts(model: &ProgramModel, counts: &BlockCounts) -> FlowGraph {
    let mut flow = FlowGraph::default();
    for func in &model.functions {
        let cfg = func.cfg();
        let per_block = counts.get(&func.name);
        let count: Vec<u64> = func
            .blocks
            .iter()
            .map(|b| per_block.and_then(|m| m.get(&b.label)).copied().unwrap_or(0))
            .collect();
        let preference = |b: usize| -> Vec<usize> {
            let succs = &cfg.succs[b];
            let mut order: Vec<usize> = (0..succs.len())
                .filter(|&i| succs[i].1 == EdgeKind::FallThrough)
                .collect();
            order.extend((0..succs.len()).filter(|&i| succs[i].1 != EdgeKind::FallThrough));
            order
        };

        let mut dense = DenseFlow::default();
        for b in 0..cfg.len() {
            let n = cfg.succs[b].len();
            if n == 0 {
                continue;
            }
            let split = apportion(count[b], &vec![1; n], &preference(b));
            for (&(s, _), c) in cfg.succs[b].iter().zip(split) {
                dense.edges.insert((b, s), (c, 0));
            }
        }
        for _ in 0..MAX_INFERENCE_SWEEPS {
            let mut changed = false;
            for b in 0..cfg.len() {
                if cfg.succs[b].is_empty() {
                    continue;
                }
                let demand: Vec<u64> = cfg.succs[b]
                    .iter()
                    .map(|&(s, _)| {
                        let others: u64 = cfg.preds[s]
                            .iter()
                            .filter(|&&(p, _)| p != b)
                            .map(|&(p, _)| dense.get(p, s))
                            .sum();
                        count[s].saturating_sub(others)
                    })
                    .collect();
                let split = apportion(count[b], &demand, &preference(b));
                for (&(s, _), c) in cfg.succs[b].iter().zip(split) {
                    let e = dense.edges.entry((b, s)).or_default();
                    if e.0 != c {
                        e.0 = c;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let incoming: u64 = cfg.preds[0].iter().map(|&(p, _)| dense.get(p, 0)).sum();
        dense.entry = count[0].saturating_sub(incoming);
        let mut ff = dense.into_flow(func, &cfg, true);
        for (b, block) in func.blocks.iter().enumerate() {
            ff.block_counts.insert(block.label.clone(), count[b]);
        }
        flow.functions.insert(func.name.clone(), ff);
    }
    flow
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Imbalance {
    pub function: String,
    pub block: String,
    pub inflow: u64,
    pub outflow: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReconcileReport {
    /// Blocks with successors whose flow still does not balance.
    pub imbalances: Vec<Imbalance>,
}

/// Restores flow conservation by adjusting fall-through edges.
///
/// Blocks are visited in layout order, so the fall-through edges (which always
/// point to the next block) form a chain that settles in a single sweep:
///
/// * a block that sends out more than it receives gets the missing amount on
///   the fall-through edge that enters it, or on the entry count for the
///   entry block (branch stacks never see how the function was entered or the
///   straight-line prefix before the first recorded branch);
/// * a block that receives more than it sends out pushes the surplus onto its
///   fall-through successor, the path branch stacks cannot record;
/// * a block still sending out more than it receives gives up the excess on
///   its own fall-through edge, as far as that edge carries it.
///
/// Measured taken edges are never modified. In an inferred profile, where
/// every edge is a guess, taken edges that carry more than reaches their
/// block are cut back and the sweep repeated. Whatever still does not balance
/// is reported.
pub fn reconcile_flow(model: &ProgramModel, flow: &FlowGraph) -> (FlowGraph, ReconcileReport) {
    let mut out = flow.clone();
    let mut report = ReconcileReport::default();
    for func in &model.functions {
        let Some(ff) = flow.functions.get(&func.name) else {
            continue;
        };
        let cfg = func.cfg();
        let mut dense = DenseFlow::from_flow(&cfg, ff);
        let n = cfg.len();
        balance(&cfg, &mut dense);
        if ff.inferred {
            for _ in 0..MAX_INFERENCE_SWEEPS {
                if !clamp_taken(&cfg, &mut dense) {
                    break;
                }
                balance(&cfg, &mut dense);
            }
        }
        for b in 0..n {
            let (inflow, outflow) = (dense.inflow(&cfg, b), dense.outflow(&cfg, b));
            if !cfg.succs[b].is_empty() && inflow != outflow {
                report.imbalances.push(Imbalance {
                    function: func.name.clone(),
                    block: func.blocks[b].label.clone(),
                    inflow,
                    outflow,
                });
            }
        }
        out.functions
            .insert(func.name.clone(), dense.into_flow(func, &cfg, ff.inferred));
    }
    (out, report)
}

fn balance(cfg: &Cfg, dense: &mut DenseFlow) {
    let n = cfg.len();
    for b in (0..n).rev() {
        let (inflow, outflow) = (dense.inflow(cfg, b), dense.outflow(cfg, b));
        if outflow <= inflow {
            continue;
        }
        let missing = outflow - inflow;
        if b == 0 {
            dense.entry += missing;
        } else if cfg.fallthrough_succ(b - 1) == Some(b) {
            dense.add(b - 1, b, missing);
        }
    }
    for b in 0..n {
        let (inflow, outflow) = (dense.inflow(cfg, b), dense.outflow(cfg, b));
        let Some(ft) = cfg.fallthrough_succ(b) else {
            continue;
        };
        if inflow > outflow {
            dense.add(b, ft, inflow - outflow);
        } else if outflow > inflow {
            if let Some(e) = dense.edges.get_mut(&(b, ft)) {
                e.0 -= (outflow - inflow).min(e.0);
            }
        }
    }
}

/// Cuts taken edges of blocks with a fall-through successor down to the
/// block's inflow. Only for guessed profiles.
fn clamp_taken(cfg: &Cfg, dense: &mut DenseFlow) -> bool {
    let mut changed = false;
    for b in 0..cfg.len() {
        let Some(ft) = cfg.fallthrough_succ(b) else {
            continue;
        };
        let inflow = dense.inflow(cfg, b);
        let taken: u64 = cfg.succs[b]
            .iter()
            .filter(|&&(s, _)| s != ft)
            .map(|&(s, _)| dense.get(b, s))
            .sum();
        if taken <= inflow {
            continue;
        }
        let mut excess = taken - inflow;
        for &(s, _) in cfg.succs[b].iter().rev().filter(|&&(s, _)| s != ft) {
            if let Some(e) = dense.edges.get_mut(&(b, s)) {
                let cut = excess.min(e.0);
                e.0 -= cut;
                excess -= cut;
            }
        }
        changed = true;
    }
    changed
}

/// Call graph from direct calls only, weighted by the caller block's count.
pub fn build_call_graph_no_lbr(model: &ProgramModel, counts: &BlockCounts) -> CallGraph {
    let count = |f: &str, b: &str| counts.get(f).and_then(|m| m.get(b)).copied().unwrap_or(0);
    let mut cg = CallGraph::with_nodes(model, |f| {
        counts.get(&f.name).map_or(0, |m| m.values().sum())
    });
    for f in &model.functions {
        for b in &f.blocks {
            for ins in &b.instructions {
                if ins.kind == InstrKind::DirectCall {
                    let callee = ins.target().expect("validated call target");
                    cg.add_edge(&f.name, callee, count(&f.name, &b.label));
                }
            }
        }
    }
    cg
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileQuality {
    pub accuracy: BTreeMap<String, f64>,
}

/// `1 - sum(|in - out|) / max(1, 2 * total edge count)` per function, over
/// blocks that have successors.
pub fn profile_accuracy(model: &ProgramModel, flow: &FlowGraph) -> ProfileQuality {
    let mut accuracy = BTreeMap::new();
    for func in &model.functions {
        let cfg = func.cfg();
        let empty = FunctionFlow::default();
        let ff = flow.functions.get(&func.name).unwrap_or(&empty);
        let dense = DenseFlow::from_flow(&cfg, ff);
        let imbalance: u64 = (0..cfg.len())
            .filter(|&b| !cfg.succs[b].is_empty())
            .map(|b| dense.inflow(&cfg, b).abs_diff(dense.outflow(&cfg, b)))
            .sum();
        let total: u64 = dense.edges.values().map(|e| e.0).sum();
        let acc = 1.0 - imbalance as f64 / (2 * total).max(1) as f64;
        accuracy.insert(func.name.clone(), acc.clamp(0.0, 1.0));
    }
    ProfileQuality { accuracy }
}

/// Serializes the profile as `N`, `E` and `C` lines.
pub fn serialize_profile(flow: &FlowGraph, calls: &CallGraph) -> String {
    let mut out = String::new();
    for (name, ff) in &flow.functions {
        let _ = writeln!(out, "N {name} {}", ff.entry_count);
        for ((s, d), e) in &ff.edges {
            let kind = match e.kind {
                EdgeKind::Taken => 'T',
                EdgeKind::FallThrough => 'F',
            };
            let _ = writeln!(out, "E {name} {s} {d} {} {} {kind}", e.count, e.mispreds);
        }
    }
    for ((caller, callee), n) in &calls.edges {
        let _ = writeln!(out, "C {caller} {callee} {n}");
    }
    out
}

/// Reads a profile file and checks it against `model`. Block counts are
/// rebuilt from the edges; call graph node weights from the block counts.
pub fn parse_profile(
    text: &str,
    model: &ProgramModel,
) -> Result<(FlowGraph, CallGraph), ProfileError> {
    let mut flow = FlowGraph::default();
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |message: &str| ProfileError::Syntax {
            line: i + 1,
            message: message.to_string(),
        };
        let num = |s: &str| s.parse::<u64>().map_err(|_| syntax("expected a count"));
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[..] {
            ["N", func, entry] => {
                let f = model
                    .function(func)
                    .ok_or_else(|| ProfileError::UnknownFunction(func.to_string()))?;
                flow.functions.entry(f.name.clone()).or_default().entry_count = num(entry)?;
            }
            ["E", func, src, dst, count, mispreds, kind] => {
                let f = model
                    .function(func)
                    .ok_or_else(|| ProfileError::UnknownFunction(func.to_string()))?;
                let cfg = f.cfg();
                let unknown = || ProfileError::UnknownEdge {
                    function: func.to_string(),
                    src: src.to_string(),
                    dst: dst.to_string(),
                };
                let (s, d) = cfg
                    .index_of(src)
                    .zip(cfg.index_of(dst))
                    .ok_or_else(unknown)?;
                let edge_kind = cfg.edge_kind(s, d).ok_or_else(unknown)?;
                let declared = match kind {
                    "T" => EdgeKind::Taken,
                    "F" => EdgeKind::FallThrough,
                    _ => return Err(syntax("edge kind must be T or F")),
                };
                if declared != edge_kind {
                    return Err(syntax("edge kind disagrees with the CFG"));
                }
                let (count, mispreds) = (num(count)?, num(mispreds)?);
                if mispreds > count {
                    return Err(syntax("more mispredictions than executions"));
                }
                flow.functions
                    .entry(f.name.clone())
                    .or_default()
                    .edges
                    .insert(
                        (src.to_string(), dst.to_string()),
                        EdgeCount {
                            count,
                            mispreds,
                            kind: edge_kind,
                        },
                    );
            }
            ["C", caller, callee, n] => {
                for name in [caller, callee] {
                    if model.function(name).is_none() {
                        return Err(ProfileError::UnknownFunction(name.to_string()));
                    }
                }
                edges.push((caller.to_string(), callee.to_string(), num(n)?));
            }
            _ => return Err(syntax("unrecognized profile record")),
        }
    }
    flow.recompute_block_counts(model);
    let mut calls = CallGraph::with_nodes(model, |f| flow.function_weight(&f.name));
    for (a, b, n) in edges {
        calls.add_edge(&a, &b, n);
    }
    Ok((flow, calls))
}
