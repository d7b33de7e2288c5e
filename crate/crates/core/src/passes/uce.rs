//! Unreachable code elimination.

use crate::model::Function;

/// Removes blocks that cannot be reached from the entry. Jump-table entries
/// count as edges; functions with unknown indirect jumps are left alone.
/// Returns the new function and the labels removed.
pub fn eliminate_unreachable(func: &Function) -> (Function, Vec<String>) {
    if !func.simple {
        return (func.clone(), Vec::new());
    }
    let cfg = func.cfg();
    let mut seen = vec![false; func.blocks.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(b) = stack.pop() {
        for &(s, _) in &cfg.succs[b] {
            if !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    let removed: Vec<String> = func
        .blocks
        .iter()
        .zip(&seen)
        .filter(|(_, &r)| !r)
        .map(|(b, _)| b.label.clone())
        .collect();
    if removed.is_empty() {
        return (func.clone(), removed);
    }
    let mut out = func.clone();
    out.blocks = func
        .blocks
        .iter()
        .zip(&seen)
        .filter(|(_, &r)| r)
        .map(|(b, _)| b.clone())
        .collect();
    out.recompute_addresses();
    (out, removed)
}
