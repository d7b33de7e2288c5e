//! Basic block reordering.
//!
//! `ph` is bottom-up chain merging: the heaviest edge whose source ends a chain
//! and whose destination starts another chain glues the two together. `cache+`
//! forms the same chains but picks the order in which they are concatenated to
//! maximize a proximity score that also rewards short jumps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::PassError;
use crate::model::Function;
use crate::profile::FunctionFlow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Hot,
    Cold,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Hot => "hot",
            Section::Cold => "cold",
        })
    }
}

/// New block order of one function plus the section of every block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockOrder {
    pub labels: Vec<String>,
    pub sections: BTreeMap<String, Section>,
}

impl BlockOrder {
    pub fn identity(func: &Function) -> Self {
        Self::from_labels(func.blocks.iter().map(|b| b.label.clone()).collect())
    }

    /// All blocks hot, in the given order.
    pub fn from_labels(labels: Vec<String>) -> Self {
        let sections = labels.iter().map(|l| (l.clone(), Section::Hot)).collect();
        BlockOrder { labels, sections }
    }

    pub fn section(&self, label: &str) -> Section {
        self.sections.get(label).copied().unwrap_or(Section::Hot)
    }

    /// Applies a section assignment; hot blocks keep their relative order and
    /// precede the cold ones.
    pub fn with_sections(mut self, sections: BTreeMap<String, Section>) -> Self {
        self.sections = sections;
        let (hot, cold): (Vec<String>, Vec<String>) = self
            .labels
            .into_iter()
            .partition(|l| self.sections.get(l).copied().unwrap_or(Section::Hot) == Section::Hot);
        self.labels = hot.into_iter().chain(cold).collect();
        self
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.labels.retain(|l| keep(l));
        self.sections.retain(|l, _| keep(l));
    }

    /// Checks that this is a permutation of `func`'s blocks with the entry
    /// first and hot.
    pub fn validate(&self, func: &Function) -> Result<(), PassError> {
        let bad = |reason: &str| PassError::BadOrder {
            function: func.name.clone(),
            reason: reason.to_string(),
        };
        if self.labels.len() != func.blocks.len() {
            return Err(bad("block count differs"));
        }
        let mut seen: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        seen.sort_unstable();
        let mut expected: Vec<&str> = func.blocks.iter().map(|b| b.label.as_str()).collect();
        expected.sort_unstable();
        if seen != expected {
            return Err(bad("not a permutation of the function's blocks"));
        }
        if self.labels.first() != Some(&func.entry().label) {
            return Err(bad("entry block is not first"));
        }
        if self.section(&func.entry().label) != Section::Hot {
            return Err(bad("entry block is cold"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockAlgorithm {
    #[default]
    None,
    Ph,
    CachePlus,
}

impl FromStr for BlockAlgorithm {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(BlockAlgorithm::None),
            "ph" => Ok(BlockAlgorithm::Ph),
            "cache+" | "cache-plus" => Ok(BlockAlgorithm::CachePlus),
            other => Err(PassError::UnknownAlgorithm(other.to_string())),
        }
    }
}

impl fmt::Display for BlockAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockAlgorithm::None => "none",
            BlockAlgorithm::Ph => "ph",
            BlockAlgorithm::CachePlus => "cache+",
        })
    }
}

pub const FALLTHROUGH_SCORE: f64 = 1.0;
pub const JUMP_SCORE: f64 = 0.1;
pub const FORWARD_WINDOW: u64 = 1024;
pub const BACKWARD_WINDOW: u64 = 640;

/// Positive-count CFG edges of a function by block index, excluding self loops.
fn weighted_edges(func: &Function, flow: Option<&FunctionFlow>) -> Vec<(usize, usize, u64)> {
    let Some(flow) = flow else {
        return Vec::new();
    };
    let cfg = func.cfg();
    let mut edges = Vec::new();
    for (s, succs) in cfg.succs.iter().enumerate() {
        for &(d, _) in succs {
            let w = flow.edge(&func.blocks[s].label, &func.blocks[d].label);
            if s != d && w > 0 {
                edges.push((s, d, w));
            }
        }
    }
    edges
}

/// Total count of edges whose destination directly follows the source.
pub fn fallthrough_weight(order: &[String], flow: &FunctionFlow) -> u64 {
    order.windows(2).map(|w| flow.edge(&w[0], &w[1])).sum()
}

/// Proximity score of a block order: full weight for fall-through edges and a
/// tenth of the count for jumps that stay within the short windows.
pub fn proximity_score(func: &Function, order: &[String], flow: &FunctionFlow) -> f64 {
    let idx: Vec<usize> = order
        .iter()
        .map(|l| func.block_index(l).expect("order labels exist"))
        .collect();
    score_indices(func, &idx, &weighted_edges(func, Some(flow)))
}

fn score_indices(func: &Function, order: &[usize], edges: &[(usize, usize, u64)]) -> f64 {
    let n = func.blocks.len();
    let mut start = vec![0u64; n];
    let mut pos = vec![0usize; n];
    let mut addr = 0;
    for (p, &b) in order.iter().enumerate() {
        start[b] = addr;
        pos[b] = p;
        addr += func.blocks[b].size();
    }
    let mut score = 0.0;
    for &(s, d, w) in edges {
        let end = start[s] + func.blocks[s].size();
        let w = w as f64;
        if pos[d] == pos[s] + 1 {
            score += FALLTHROUGH_SCORE * w;
        } else if start[d] >= end {
            if start[d] - end <= FORWARD_WINDOW {
                score += JUMP_SCORE * w;
            }
        } else if end - start[d] <= BACKWARD_WINDOW {
            score += JUMP_SCORE * w;
        }
    }
    score
}

/// Greedy chain formation shared by both algorithms. Chains are returned in
/// original order of their first block; the entry chain is first.
fn form_chains(n: usize, edges: &[(usize, usize, u64)]) -> Vec<Vec<usize>> {
    let mut chains: Vec<Vec<usize>> = (0..n).map(|b| vec![b]).collect();
    let mut chain_of: Vec<usize> = (0..n).collect();
    let mut sorted = edges.to_vec();
    sorted.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    for (u, v, _) in sorted {
        let (cu, cv) = (chain_of[u], chain_of[v]);
        if cu == cv || v == 0 {
            continue;
        }
        if chains[cu].last() != Some(&u) || chains[cv].first() != Some(&v) {
            continue;
        }
        let moved = std::mem::take(&mut chains[cv]);
        for &b in &moved {
            chain_of[b] = cu;
        }
        chains[cu].extend(moved);
    }
    let mut chains: Vec<Vec<usize>> = chains.into_iter().filter(|c| !c.is_empty()).collect();
    chains.sort_by_key(|c| c[0]);
    chains
}

/// Entry chain first, then repeatedly the chain receiving the most flow from
/// the blocks already placed; ties go to the chain whose head comes first in
/// the original order.
fn order_by_connection(chains: &[Vec<usize>], edges: &[(usize, usize, u64)], n: usize) -> Vec<usize> {
    let mut chain_of = vec![0; n];
    for (c, chain) in chains.iter().enumerate() {
        for &b in chain {
            chain_of[b] = c;
        }
    }
    let mut placed = vec![false; chains.len()];
    let mut incoming = vec![0u64; chains.len()];
    let mut order = Vec::with_capacity(chains.len());
    let mut place = |c: usize, placed: &mut Vec<bool>, incoming: &mut Vec<u64>| {
        placed[c] = true;
        order.push(c);
        for &(s, d, w) in edges {
            if chain_of[s] == c {
                incoming[chain_of[d]] += w;
            }
        }
    };
    let entry_chain = chain_of[0];
    place(entry_chain, &mut placed, &mut incoming);
    while let Some(next) = (0..chains.len())
        .filter(|&c| !placed[c])
        .max_by(|&a, &b| incoming[a].cmp(&incoming[b]).then(chains[b][0].cmp(&chains[a][0])))
    {
        place(next, &mut placed, &mut incoming);
    }
    order
}

fn flatten(chains: &[Vec<usize>], order: &[usize]) -> Vec<usize> {
    order.iter().flat_map(|&c| chains[c].iter().copied()).collect()
}

/// Improves a chain order by moving single chains while the proximity score
/// strictly increases. The entry chain stays first.
fn improve_chain_order(
    func: &Function,
    chains: &[Vec<usize>],
    mut order: Vec<usize>,
    edges: &[(usize, usize, u64)],
) -> Vec<usize> {
    const MAX_ROUNDS: usize = 64;
    let mut best = score_indices(func, &flatten(chains, &order), edges);
    for _ in 0..MAX_ROUNDS {
        let mut best_move = None;
        for from in 1..order.len() {
            for to in 1..order.len() {
                if from == to {
                    continue;
                }
                let mut cand = order.clone();
                let c = cand.remove(from);
                cand.insert(to, c);
                let s = score_indices(func, &flatten(chains, &cand), edges);
                if s > best + 1e-9 {
                    best = s;
                    best_move = Some(cand);
                }
            }
        }
        match best_move {
            Some(cand) => order = cand,
            None => break,
        }
    }
    order
}

/// Greedy append: after the entry chain, always add the chain that raises the
/// proximity score the most.
fn greedy_chain_order(func: &Function, chains: &[Vec<usize>], edges: &[(usize, usize, u64)]) -> Vec<usize> {
    let entry_chain = chains.iter().position(|c| c[0] == 0).expect("entry chain");
    let mut order = vec![entry_chain];
    let mut remaining: Vec<usize> = (0..chains.len()).filter(|&c| c != entry_chain).collect();
    while !remaining.is_empty() {
        let mut best: Option<(f64, usize)> = None;
        for (i, &c) in remaining.iter().enumerate() {
            let mut cand = order.clone();
            cand.push(c);
            let s = score_indices(func, &flatten(chains, &cand), edges);
            if best.is_none_or(|(bs, _)| s > bs + 1e-9) {
                best = Some((s, i));
            }
        }
        let (_, i) = best.expect("non-empty");
        order.push(remaining.remove(i));
    }
    order
}

/// Computes a new block order. Non-simple functions and functions without
/// profile keep their original order.
pub fn reorder_blocks(
    func: &Function,
    flow: Option<&FunctionFlow>,
    algorithm: BlockAlgorithm,
) -> BlockOrder {
    if algorithm == BlockAlgorithm::None || !func.simple {
        return BlockOrder::identity(func);
    }
    let n = func.blocks.len();
    let edges = weighted_edges(func, flow);
    let chains = form_chains(n, &edges);
    let ph_order = order_by_connection(&chains, &edges, n);
    let order = match algorithm {
        BlockAlgorithm::Ph => ph_order,
        BlockAlgorithm::CachePlus => {
            let greedy = greedy_chain_order(func, &chains, &edges);
            let start = if score_indices(func, &flatten(&chains, &greedy), &edges)
                > score_indices(func, &flatten(&chains, &ph_order), &edges) + 1e-9
            {
                greedy
            } else {
                ph_order
            };
            improve_chain_order(func, &chains, start, &edges)
        }
        BlockAlgorithm::None => unreachable!(),
    };
    BlockOrder::from_labels(
        flatten(&chains, &order)
            .into_iter()
            .map(|b| func.blocks[b].label.clone())
            .collect(),
    )
}

/// Maps block labels to indices; used by callers that work with positions.
pub fn label_positions(order: &BlockOrder) -> HashMap<&str, usize> {
    order
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::profile::{EdgeCount, FunctionFlow};
    use crate::model::EdgeKind;

    fn flow(edges: &[(&str, &str, u64)]) -> FunctionFlow {
        let mut f = FunctionFlow::default();
        for &(s, d, c) in edges {
            f.edges.insert(
                (s.into(), d.into()),
                EdgeCount {
                    count: c,
                    mispreds: 0,
                    kind: EdgeKind::Taken,
                },
            );
        }
        f
    }

    fn labels(o: &BlockOrder) -> Vec<&str> {
        o.labels.iter().map(String::as_str).collect()
    }

    // A: jcc C / ft B; B: jmp C... B falls into C; C: ret
    fn three() -> Function {
        parse_model("MODEL v1\nF f 0x0\nB A\nI 2 jcc C\nB B\nI 3 plain\nB C\nI 1 ret\n")
            .unwrap()
            .functions
            .remove(0)
    }

    #[test]
    fn three_block_example_matches_brute_force() {
        let f = three();
        let fl = flow(&[("A", "B", 90), ("A", "C", 10), ("B", "C", 100)]);
        let o = reorder_blocks(&f, Some(&fl), BlockAlgorithm::Ph);
        assert_eq!(labels(&o), ["A", "B", "C"]);
        assert_eq!(fallthrough_weight(&o.labels, &fl), 190);
        // the other permutation with A first
        let alt: Vec<String> = ["A", "C", "B"].iter().map(|s| s.to_string()).collect();
        assert!(fallthrough_weight(&alt, &fl) < 190);
    }

    #[test]
    fn zero_profile_keeps_original_order() {
        let f = three();
        for algo in [BlockAlgorithm::Ph, BlockAlgorithm::CachePlus] {
            assert_eq!(labels(&reorder_blocks(&f, Some(&flow(&[])), algo)), ["A", "B", "C"]);
            assert_eq!(labels(&reorder_blocks(&f, None, algo)), ["A", "B", "C"]);
        }
    }

    #[test]
    fn hot_taken_edge_becomes_fallthrough() {
        let f = three();
        let fl = flow(&[("A", "C", 100), ("A", "B", 1), ("B", "C", 1)]);
        let o = reorder_blocks(&f, Some(&fl), BlockAlgorithm::Ph);
        assert_eq!(labels(&o), ["A", "C", "B"]);
        o.validate(&f).unwrap();
    }

    #[test]
    fn non_simple_functions_are_untouched() {
        let m = parse_model("MODEL v1\nF f 0x0\nB A\nI 2 jcc C\nB B\nI 2 ijmp\nB C\nI 1 ret\n")
            .unwrap();
        let f = &m.functions[0];
        assert!(!f.simple);
        let fl = flow(&[("A", "C", 100)]);
        assert_eq!(labels(&reorder_blocks(f, Some(&fl), BlockAlgorithm::Ph)), ["A", "B", "C"]);
    }

    #[test]
    fn unknown_algorithm_is_an_error() {
        assert!("ext-tsp".parse::<BlockAlgorithm>().is_err());
        assert_eq!("cache+".parse::<BlockAlgorithm>().unwrap(), BlockAlgorithm::CachePlus);
    }

    #[test]
    fn sections_put_cold_blocks_last() {
        let o = BlockOrder::from_labels(vec!["A".into(), "B".into(), "C".into()]).with_sections(
            [("A", Section::Hot), ("B", Section::Cold), ("C", Section::Hot)]
                .into_iter()
                .map(|(l, s)| (l.to_string(), s))
                .collect(),
        );
        assert_eq!(labels(&o), ["A", "C", "B"]);
    }

    #[test]
    fn proximity_rewards_short_jumps() {
        let f = three();
        let fl = flow(&[("A", "C", 10)]);
        // A (2 bytes) then B (3) then C: jump A->C is forward by 3 bytes
        let s = proximity_score(&f, &["A".into(), "B".into(), "C".into()], &fl);
        assert!((s - 1.0).abs() < 1e-12);
        let s = proximity_score(&f, &["A".into(), "C".into(), "B".into()], &fl);
        assert!((s - 10.0).abs() < 1e-12);
    }
}
