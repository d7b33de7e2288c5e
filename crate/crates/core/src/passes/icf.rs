//! Identical code folding.
//!
//! Functions are partitioned by shape (instruction kinds, sizes and local
//! branch targets), then the partition is refined by the classes of the
//! called functions until nothing splits any more. Starting from the coarsest
//! partition makes mutually recursive twins fold.

use std::collections::{BTreeMap, HashMap};

use crate::model::{Function, InstrKind, ProgramModel};
use crate::profile::{CallGraph, CallSite, CallSiteProfile, EdgeCount, FlowGraph};

/// Folded function → surviving representative.
pub type FoldMap = BTreeMap<String, String>;

#[derive(Hash, PartialEq, Eq)]
enum Operand {
    None,
    Block(usize),
    Table(Vec<usize>),
    Call,
}

type Shape = Vec<Vec<(InstrKind, u32, bool, Operand)>>;

fn shape(f: &Function) -> Shape {
    let local = |l: &str| f.block_index(l).expect("validated label");
    f.blocks
        .iter()
        .map(|b| {
            b.instructions
                .iter()
                .map(|i| {
                    let op = match i.kind {
                        InstrKind::CondBranch | InstrKind::UncondBranch => {
                            Operand::Block(local(i.target().expect("validated")))
                        }
                        InstrKind::IndirectBranch => match &i.jump_table {
                            Some(t) => Operand::Table(t.iter().map(|l| local(l)).collect()),
                            None => Operand::None,
                        },
                        InstrKind::DirectCall => Operand::Call,
                        _ => Operand::None,
                    };
                    (i.kind, i.size, i.inverted, op)
                })
                .collect()
        })
        .collect()
}

fn callees(f: &Function, names: &HashMap<&str, usize>) -> Vec<usize> {
    f.blocks
        .iter()
        .flat_map(|b| &b.instructions)
        .filter(|i| i.kind == InstrKind::DirectCall)
        .map(|i| names[i.target().expect("validated call")])
        .collect()
}

/// Equivalence class of every function at the fixpoint.
fn classes(model: &ProgramModel) -> Vec<usize> {
    let names = model.name_index();
    let n = model.functions.len();
    let mut class = vec![0usize; n];
    let mut shapes: HashMap<Shape, usize> = HashMap::new();
    for (i, f) in model.functions.iter().enumerate() {
        class[i] = if f.simple {
            let next = shapes.len() + n;
            *shapes.entry(shape(f)).or_insert(next)
        } else {
            i
        };
    }
    let calls: Vec<Vec<usize>> = model.functions.iter().map(|f| callees(f, &names)).collect();
    let count = |c: &[usize]| {
        let mut v = c.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let mut classes_now = count(&class);
    loop {
        let mut ids: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
        let next: Vec<usize> = (0..n)
            .map(|i| {
                let key = (class[i], calls[i].iter().map(|&c| class[c]).collect());
                let id = ids.len();
                *ids.entry(key).or_insert(id)
            })
            .collect();
        let classes_next = count(&next);
        class = next;
        if classes_next == classes_now {
            return class;
        }
        classes_now = classes_next;
    }
}

/// Folds equivalent functions into the one with the lowest address and
/// redirects all calls to it.
pub fn fold_identical(model: &ProgramModel) -> (ProgramModel, FoldMap) {
    let class = classes(model);
    let mut rep: HashMap<usize, usize> = HashMap::new();
    for (i, f) in model.functions.iter().enumerate() {
        let r = rep.entry(class[i]).or_insert(i);
        if f.address < model.functions[*r].address {
            *r = i;
        }
    }
    let mut fold = FoldMap::new();
    for (i, f) in model.functions.iter().enumerate() {
        let r = rep[&class[i]];
        if r != i {
            fold.insert(f.name.clone(), model.functions[r].name.clone());
        }
    }
    if fold.is_empty() {
        return (model.clone(), fold);
    }
    let mut out = model.clone();
    out.functions.retain(|f| !fold.contains_key(&f.name));
    for f in &mut out.functions {
        for ins in f.blocks.iter_mut().flat_map(|b| &mut b.instructions) {
            if ins.kind == InstrKind::DirectCall {
                if let Some(r) = ins.target().and_then(|t| fold.get(t)) {
                    ins.target = Some(r.clone());
                }
            }
        }
    }
    (out, fold)
}

/// Label of the block at the same position in the representative.
fn relabel<'a>(before: &'a ProgramModel, victim: &str, rep: &str, label: &str) -> Option<&'a str> {
    let v = before.function(victim)?;
    let r = before.function(rep)?;
    let idx = v.block_index(label)?;
    r.blocks.get(idx).map(|b| b.label.as_str())
}

/// Adds every folded function's profile onto its representative, block by
/// block.
pub fn merge_folded_flow(flow: &FlowGraph, before: &ProgramModel, fold: &FoldMap) -> FlowGraph {
    let mut out = flow.clone();
    for (victim, rep) in fold {
        let Some(vf) = out.functions.remove(victim) else {
            continue;
        };
        let target = out.functions.entry(rep.clone()).or_default();
        target.entry_count += vf.entry_count;
        target.inferred |= vf.inferred;
        for ((s, d), e) in vf.edges {
            let (Some(s), Some(d)) = (
                relabel(before, victim, rep, &s),
                relabel(before, victim, rep, &d),
            ) else {
                continue;
            };
            let slot = target
                .edges
                .entry((s.to_string(), d.to_string()))
                .or_insert(EdgeCount {
                    count: 0,
                    mispreds: 0,
                    kind: e.kind,
                });
            slot.count += e.count;
            slot.mispreds += e.mispreds;
        }
        for (l, c) in vf.block_counts {
            if let Some(l) = relabel(before, victim, rep, &l) {
                *target.block_counts.entry(l.to_string()).or_default() += c;
            }
        }
    }
    out
}

/// Renames folded functions in the call graph and sums their arcs and weights.
pub fn merge_folded_calls(calls: &CallGraph, fold: &FoldMap) -> CallGraph {
    let name = |n: &String| fold.get(n).unwrap_or(n).clone();
    let mut out = CallGraph::default();
    for (n, node) in &calls.nodes {
        let slot = out.nodes.entry(name(n)).or_default();
        if !fold.contains_key(n) {
            slot.size = node.size;
        }
        slot.weight += node.weight;
    }
    for ((a, b), &w) in &calls.edges {
        out.add_edge(&name(a), &name(b), w);
    }
    out
}

/// Moves call-site histograms of folded functions onto the representative.
pub fn merge_folded_sites(sites: &CallSiteProfile, before: &ProgramModel, fold: &FoldMap) -> CallSiteProfile {
    let mut out = CallSiteProfile::new();
    for (site, hist) in sites {
        let site = match fold.get(&site.function) {
            Some(rep) => match relabel(before, &site.function, rep, &site.block) {
                Some(l) => CallSite {
                    function: rep.clone(),
                    block: l.to_string(),
                    index: site.index,
                },
                None => continue,
            },
            None => site.clone(),
        };
        let slot = out.entry(site).or_default();
        for (callee, &n) in hist {
            *slot.entry(fold.get(callee).unwrap_or(callee).clone()).or_default() += n;
        }
    }
    out
}
