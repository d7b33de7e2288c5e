//! Rewrites block terminators so that a function is correct in its new order.

use super::reorder::BlockOrder;
use crate::error::PassError;
use crate::model::{Function, InstrKind, Instruction};

/// Size of a freshly inserted unconditional branch before relaxation.
pub const SHORT_JUMP_SIZE: u32 = 2;

/// Returns `func` with its blocks in `order` and every terminator adjusted to
/// the new layout. The layout successor of the last hot block is not the
/// first cold block.
pub fn fixup_branches(func: &Function, order: &BlockOrder) -> Result<Function, PassError> {
    order.validate(func)?;
    let idx: Vec<usize> = order
        .labels
        .iter()
        .map(|l| func.block_index(l).expect("validated"))
        .collect();
    let mut blocks = Vec::with_capacity(idx.len());
    for (pos, &b) in idx.iter().enumerate() {
        let next = idx
            .get(pos + 1)
            .copied()
            .filter(|&n| order.section(&func.blocks[n].label) == order.section(&func.blocks[b].label));
        let mut block = func.blocks[b].clone();
        let label_of = |i: usize| func.blocks[i].label.clone();
        let ft = func.fallthrough(b);
        let kind = block.terminator().map(|t| t.kind);
        match kind {
            Some(InstrKind::CondBranch) => {
                let ft = ft.ok_or_else(|| PassError::MissingFallThrough {
                    function: func.name.clone(),
                    block: block.label.clone(),
                })?;
                let target = func
                    .block_index(block.terminator().and_then(Instruction::target).unwrap_or(""))
                    .expect("validated target");
                if next == Some(target) {
                    let term = block.instructions.last_mut().expect("terminator");
                    term.target = Some(label_of(ft));
                    term.inverted = !term.inverted;
                } else if next != Some(ft) {
                    block.instructions.push(Instruction::jump(SHORT_JUMP_SIZE, label_of(ft)));
                }
            }
            Some(InstrKind::UncondBranch) => {
                let target = block.terminator().and_then(Instruction::target).and_then(|t| func.block_index(t));
                if target.is_some() && target == next {
                    block.instructions.pop();
                }
            }
            None => {
                let ft = ft.ok_or_else(|| PassError::MissingFallThrough {
                    function: func.name.clone(),
                    block: block.label.clone(),
                })?;
                if next != Some(ft) {
                    block.instructions.push(Instruction::jump(SHORT_JUMP_SIZE, label_of(ft)));
                }
            }
            Some(_) => {}
        }
        blocks.push(block);
    }
    let mut out = func.clone();
    out.blocks = blocks;
    out.recompute_addresses();
    Ok(out)
}
