//! Layout passes and the pipeline that runs them.

pub mod address;
pub mod fixup;
pub mod hfsort;
pub mod icf;
pub mod icp;
pub mod reorder;
pub mod split;
pub mod uce;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use address::{assign_addresses, fits_short, parse_plan, serialize_plan, LayoutPlan, PlacedBlock};
pub use fixup::fixup_branches;
pub use hfsort::{reorder_functions, Cluster, FunctionAlgorithm, FunctionOrder, HfsortOptions};
pub use icf::{fold_identical, FoldMap};
pub use icp::{promote_indirect_calls, IcpOptions, IcpResult};
pub use reorder::{fallthrough_weight, proximity_score, reorder_blocks, BlockAlgorithm, BlockOrder, Section};
pub use split::{split_function, SplitMode};
pub use uce::eliminate_unreachable;

use crate::error::PassError;
use crate::model::{Address, ProgramModel};
use crate::profile::{CallGraph, CallSiteProfile, FlowGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub strip_nops: bool,
    pub icf: bool,
    /// `None` disables promotion.
    pub icp: Option<IcpOptions>,
    pub reorder_blocks: BlockAlgorithm,
    pub split: SplitMode,
    pub uce: bool,
    pub fixup: bool,
    pub reorder_functions: FunctionAlgorithm,
    pub hfsort: HfsortOptions,
    pub assign_addresses: bool,
    /// Defaults to the input's text base.
    pub hot_base: Option<Address>,
    /// Defaults to the first aligned address after the hot section.
    pub cold_base: Option<Address>,
}

impl Default for PipelineConfig {
    /// Every pass off.
    fn default() -> Self {
        PipelineConfig {
            strip_nops: false,
            icf: false,
            icp: None,
            reorder_blocks: BlockAlgorithm::None,
            split: SplitMode::None,
            uce: false,
            fixup: false,
            reorder_functions: FunctionAlgorithm::None,
            hfsort: HfsortOptions::default(),
            assign_addresses: false,
            hot_base: None,
            cold_base: None,
        }
    }
}

impl PipelineConfig {
    /// Every pass on with its default settings.
    pub fn full() -> Self {
        PipelineConfig {
            strip_nops: true,
            icf: true,
            icp: Some(IcpOptions::default()),
            reorder_blocks: BlockAlgorithm::CachePlus,
            split: SplitMode::ColdOnly,
            uce: true,
            fixup: true,
            reorder_functions: FunctionAlgorithm::Hfsort,
            hfsort: HfsortOptions::default(),
            assign_addresses: true,
            hot_base: None,
            cold_base: None,
        }
    }
}

/// Profile data consumed by the pipeline; `flow` should be reconciled.
#[derive(Debug, Clone, Default)]
pub struct PipelineProfile {
    pub flow: FlowGraph,
    pub calls: CallGraph,
    pub call_sites: CallSiteProfile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassLogEntry {
    pub pass: &'static str,
    pub ran: bool,
    pub detail: String,
}

impl fmt::Display for PassLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ran {
            write!(f, "{}: {}", self.pass, self.detail)
        } else {
            write!(f, "{}: disabled", self.pass)
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: ProgramModel,
    pub plan: LayoutPlan,
    /// Input profile carried through every transformation, keyed by the
    /// output model's functions and blocks.
    pub flow: FlowGraph,
    pub calls: CallGraph,
    pub block_orders: BTreeMap<String, BlockOrder>,
    pub function_order: FunctionOrder,
    pub fold_map: FoldMap,
    pub log: Vec<PassLogEntry>,
}

struct Log(Vec<PassLogEntry>);

impl Log {
    fn ran(&mut self, pass: &'static str, detail: String) {
        self.0.push(PassLogEntry { pass, ran: true, detail });
    }

    fn off(&mut self, pass: &'static str) {
        self.0.push(PassLogEntry {
            pass,
            ran: false,
            detail: String::new(),
        });
    }
}

type BlockKey = (String, String);

fn run_icf(
    model: &mut ProgramModel,
    profile: &mut PipelineProfile,
    fold_map: &mut FoldMap,
    aliases: &mut Vec<(BlockKey, BlockKey)>,
) -> usize {
    let (folded, fold) = fold_identical(model);
    if fold.is_empty() {
        return 0;
    }
    for (victim, rep) in &fold {
        let (Some(v), Some(r)) = (model.function(victim), model.function(rep)) else {
            continue;
        };
        for (vb, rb) in v.blocks.iter().zip(&r.blocks) {
            aliases.push(((victim.clone(), vb.label.clone()), (rep.clone(), rb.label.clone())));
        }
    }
    profile.flow = icf::merge_folded_flow(&profile.flow, model, &fold);
    profile.calls = icf::merge_folded_calls(&profile.calls, &fold);
    profile.call_sites = icf::merge_folded_sites(&profile.call_sites, model, &fold);
    for rep in fold_map.values_mut() {
        if let Some(r) = fold.get(rep) {
            *rep = r.clone();
        }
    }
    fold_map.extend(fold.iter().map(|(v, r)| (v.clone(), r.clone())));
    *model = folded;
    fold.len()
}

/// Puts functions in `order` and gives them addresses: their current ones
/// when those still ascend without overlap, otherwise packed from the old
/// text base.
fn arrange(model: &ProgramModel, order: &[String]) -> ProgramModel {
    let names = model.name_index();
    let mut funcs: Vec<_> = order
        .iter()
        .filter_map(|n| names.get(n.as_str()).map(|&i| model.functions[i].clone()))
        .collect();
    let listed: BTreeSet<&str> = order.iter().map(String::as_str).collect();
    funcs.extend(
        model
            .functions
            .iter()
            .filter(|f| !listed.contains(f.name.as_str()))
            .cloned(),
    );
    let keeps = funcs.windows(2).all(|w| w[0].address + w[0].size() <= w[1].address);
    if !keeps {
        let mut addr = model.text_base();
        for f in &mut funcs {
            f.address = addr;
            addr += f.size();
        }
    }
    for f in &mut funcs {
        f.recompute_addresses();
    }
    ProgramModel::new(funcs)
}

/// Runs strip-nops, icf, icp, icf again, block reordering with splitting,
/// unreachable code elimination, branch fixup, function reordering and
/// address assignment, in that order.
pub fn run_pipeline(
    model: &ProgramModel,
    profile: &PipelineProfile,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PassError> {
    model.validate()?;
    let mut log = Log(Vec::new());
    let mut m = model.clone();
    let mut prof = profile.clone();
    let mut fold_map = FoldMap::new();
    let mut aliases = Vec::new();

    if config.strip_nops {
        let before: u64 = m.functions.iter().map(|f| f.size()).sum();
        m = m.strip_nops();
        for f in &mut m.functions {
            f.recompute_addresses();
        }
        let after: u64 = m.functions.iter().map(|f| f.size()).sum();
        log.ran("strip-nops", format!("removed {} bytes", before - after));
    } else {
        log.off("strip-nops");
    }

    if config.icf {
        let n = run_icf(&mut m, &mut prof, &mut fold_map, &mut aliases);
        log.ran("icf", format!("folded {n} functions"));
    } else {
        log.off("icf");
    }

    if let Some(opts) = &config.icp {
        let r = promote_indirect_calls(&m, &prof.flow, &prof.call_sites, opts)?;
        for p in &r.promoted {
            let slot = prof
                .calls
                .edges
                .entry((p.site.function.clone(), p.target.clone()))
                .or_default();
            *slot = (*slot).max(p.promoted);
        }
        log.ran(
            "icp",
            format!("promoted {} sites, skipped {}", r.promoted.len(), r.skipped.len()),
        );
        m = r.model;
        prof.flow = r.flow;
        prof.call_sites.clear();
    } else {
        log.off("icp");
    }

    if config.icf {
        let n = run_icf(&mut m, &mut prof, &mut fold_map, &mut aliases);
        log.ran("icf", format!("folded {n} functions"));
    } else {
        log.off("icf");
    }

    let mut block_orders: BTreeMap<String, BlockOrder> = BTreeMap::new();
    if config.reorder_blocks != BlockAlgorithm::None || config.split != SplitMode::None {
        let mut moved = 0;
        let mut cold = 0;
        for f in &m.functions {
            let ff = prof.flow.function(&f.name);
            let sections = split_function(f, ff, config.split);
            cold += sections.values().filter(|&&s| s == Section::Cold).count();
            let order = reorder_blocks(f, ff, config.reorder_blocks).with_sections(sections);
            if order != BlockOrder::identity(f) {
                moved += 1;
            }
            block_orders.insert(f.name.clone(), order);
        }
        log.ran(
            "reorder-bbs",
            format!(
                "{} with split {}: {moved} functions changed, {cold} cold blocks",
                config.reorder_blocks, config.split
            ),
        );
    } else {
        log.off("reorder-bbs");
    }

    if config.uce {
        let mut total = 0;
        for f in &mut m.functions {
            let (nf, removed) = eliminate_unreachable(f);
            if removed.is_empty() {
                continue;
            }
            if let Some(ff) = prof.flow.functions.get_mut(&f.name) {
                for l in &removed {
                    let count = ff.block_count(l);
                    if count > 0 {
                        return Err(PassError::ProfiledBlockUnreachable {
                            function: f.name.clone(),
                            block: l.clone(),
                            count,
                        });
                    }
                }
                ff.edges.retain(|(s, d), _| !removed.contains(s) && !removed.contains(d));
                ff.block_counts.retain(|l, _| !removed.contains(l));
            }
            if let Some(order) = block_orders.get_mut(&f.name) {
                order.retain(|l| !removed.iter().any(|r| r == l));
            }
            total += removed.len();
            *f = nf;
        }
        log.ran("uce", format!("removed {total} blocks"));
    } else {
        log.off("uce");
    }

    if config.fixup {
        let mut changed = 0;
        for f in &mut m.functions {
            if let Some(order) = block_orders.get(&f.name) {
                let nf = fixup_branches(f, order)?;
                if nf != *f {
                    changed += 1;
                }
                *f = nf;
            }
        }
        log.ran("fixup-branches", format!("rewrote {changed} functions"));
    } else {
        if !block_orders.is_empty() {
            block_orders.clear();
        }
        log.off("fixup-branches");
    }

    for f in &m.functions {
        if let Some(ff) = prof.flow.functions.get_mut(&f.name) {
            let cfg = f.cfg();
            for ((s, d), e) in ff.edges.iter_mut() {
                if let (Some(s), Some(d)) = (cfg.index_of(s), cfg.index_of(d)) {
                    if let Some(k) = cfg.edge_kind(s, d) {
                        e.kind = k;
                    }
                }
            }
        }
    }
    prof.flow.recompute_block_counts(&m);

    let function_order = match config.reorder_functions {
        FunctionAlgorithm::Hfsort => {
            let mut cg = CallGraph::with_nodes(&m, |f| prof.flow.function_weight(&f.name));
            cg.edges = prof.calls.edges.clone();
            let order = reorder_functions(&m, &cg, &config.hfsort);
            log.ran(
                "reorder-functions",
                format!("{} clusters, {} cold or non-simple functions", order.clusters.len(), order.tail.len()),
            );
            prof.calls = cg;
            order
        }
        FunctionAlgorithm::None => {
            log.off("reorder-functions");
            FunctionOrder::identity(&m)
        }
    };

    let hot_base = config.hot_base.unwrap_or_else(|| model.text_base());
    let (m, mut plan) = if config.assign_addresses {
        let names = function_order.names();
        let plan = assign_addresses(&m, &names, &block_orders, hot_base, config.cold_base)?;
        log.ran(
            "assign-addresses",
            format!("{} relaxation rounds, {} branches", plan.iterations, plan.branch_sizes.len()),
        );
        let m = arrange(&plan.apply_branch_sizes(&m), &names);
        (m, plan)
    } else {
        log.off("assign-addresses");
        let m = arrange(&m, &function_order.names());
        let plan = LayoutPlan::identity(&m, hot_base + m.text_base() - model.text_base());
        (m, plan)
    };
    m.validate()?;
    for (from, to) in aliases {
        plan.add_alias(from, to);
    }

    Ok(PipelineOutput {
        model: m,
        plan,
        flow: prof.flow,
        calls: prof.calls,
        block_orders,
        function_order,
        fold_map,
        log: log.0,
    })
}
