//! Final address assignment and branch relaxation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::reorder::{BlockOrder, Section};
use crate::error::PassError;
use crate::model::{format_hex, Address, InstrKind, ProgramModel};

pub const SHORT_BRANCH: u32 = 2;
pub const LONG_COND_BRANCH: u32 = 6;
pub const LONG_JUMP: u32 = 5;
/// Alignment of the cold section when its base is derived from the hot end.
pub const COLD_ALIGN: u64 = 64;

pub const PLAN_HEADER: &str = "PLAN v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedBlock {
    pub function: String,
    pub label: String,
    pub section: Section,
    pub address: Address,
    pub size: u64,
}

impl PlacedBlock {
    pub fn end(&self) -> Address {
        self.address + self.size
    }
}

/// Final placement of every block and the encoded size of every branch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayoutPlan {
    pub hot_base: Address,
    pub cold_base: Address,
    /// Hot section first, then cold, each in address order.
    pub blocks: Vec<PlacedBlock>,
    /// `(function, block, instruction index)` → size, for direct branches.
    pub branch_sizes: BTreeMap<(String, String, usize), u32>,
    /// Relaxation rounds that grew at least one branch.
    pub iterations: usize,
    index: HashMap<(String, String), usize>,
    /// Blocks of folded functions, pointing at their representative's.
    aliases: HashMap<(String, String), (String, String)>,
}

impl LayoutPlan {
    fn new(hot_base: Address, cold_base: Address, blocks: Vec<PlacedBlock>) -> Self {
        let index = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ((b.function.clone(), b.label.clone()), i))
            .collect();
        LayoutPlan {
            hot_base,
            cold_base,
            blocks,
            branch_sizes: BTreeMap::new(),
            iterations: 0,
            index,
            aliases: HashMap::new(),
        }
    }

    /// The model's own layout moved so that its text starts at `hot_base`.
    pub fn identity(model: &ProgramModel, hot_base: Address) -> Self {
        let base = model.text_base();
        let blocks = model
            .functions
            .iter()
            .flat_map(|f| {
                f.blocks.iter().map(move |b| PlacedBlock {
                    function: f.name.clone(),
                    label: b.label.clone(),
                    section: Section::Hot,
                    address: b.address - base + hot_base,
                    size: b.size(),
                })
            })
            .collect();
        let mut plan = Self::new(hot_base, hot_base, blocks);
        for f in &model.functions {
            for b in &f.blocks {
                for (i, ins) in b.instructions.iter().enumerate() {
                    if is_direct_branch(ins.kind) {
                        plan.branch_sizes
                            .insert((f.name.clone(), b.label.clone(), i), ins.size);
                    }
                }
            }
        }
        plan
    }

    /// Placement of a block, following aliases of folded functions.
    pub fn block(&self, function: &str, label: &str) -> Option<&PlacedBlock> {
        let mut key = (function.to_string(), label.to_string());
        for _ in 0..=self.aliases.len() {
            if let Some(&i) = self.index.get(&key) {
                return Some(&self.blocks[i]);
            }
            key = self.aliases.get(&key)?.clone();
        }
        None
    }

    /// Makes `from` resolve to wherever `to` is placed.
    pub fn add_alias(&mut self, from: (String, String), to: (String, String)) {
        self.aliases.insert(from, to);
    }

    fn range(&self, section: Section) -> Option<(Address, Address)> {
        let mut it = self.blocks.iter().filter(|b| b.section == section);
        let first = it.next()?;
        let mut lo = first.address;
        let mut hi = first.end();
        for b in it {
            lo = lo.min(b.address);
            hi = hi.max(b.end());
        }
        Some((lo, hi))
    }

    pub fn hot_range(&self) -> Option<(Address, Address)> {
        self.range(Section::Hot)
    }

    pub fn cold_range(&self) -> Option<(Address, Address)> {
        self.range(Section::Cold)
    }

    /// Writes the resolved branch sizes into a copy of `model`.
    pub fn apply_branch_sizes(&self, model: &ProgramModel) -> ProgramModel {
        let mut out = model.clone();
        for f in &mut out.functions {
            for b in &mut f.blocks {
                for (i, ins) in b.instructions.iter_mut().enumerate() {
                    if let Some(&s) = self.branch_sizes.get(&(f.name.clone(), b.label.clone(), i)) {
                        ins.size = s;
                    }
                }
            }
            f.recompute_addresses();
        }
        out
    }
}

fn is_direct_branch(kind: InstrKind) -> bool {
    matches!(kind, InstrKind::CondBranch | InstrKind::UncondBranch)
}

fn long_size(kind: InstrKind) -> u32 {
    if kind == InstrKind::CondBranch {
        LONG_COND_BRANCH
    } else {
        LONG_JUMP
    }
}

/// Whether a branch of `size` bytes at `addr` reaches `target` with a signed
/// 8-bit displacement measured from the end of a short encoding.
pub fn fits_short(addr: Address, target: Address) -> bool {
    let disp = target as i128 - (addr as i128 + SHORT_BRANCH as i128);
    (-128..=127).contains(&disp)
}

fn align_up(x: u64, a: u64) -> u64 {
    x.div_ceil(a) * a
}

struct Slot {
    func: usize,
    block: usize,
    section: Section,
}

/// Lays out hot parts of all functions in `fn_order` from `hot_base`, then
/// the cold parts from `cold_base` (or right after the hot section), and
/// relaxes branch sizes until nothing grows. Functions missing from
/// `fn_order` follow it in model order; functions without a block order
/// keep their blocks in model order, all hot.
pub fn assign_addresses(
    model: &ProgramModel,
    fn_order: &[String],
    block_orders: &BTreeMap<String, BlockOrder>,
    hot_base: Address,
    cold_base: Option<Address>,
) -> Result<LayoutPlan, PassError> {
    let names = model.name_index();
    let mut seq: Vec<usize> = Vec::with_capacity(model.functions.len());
    let mut used = vec![false; model.functions.len()];
    for n in fn_order {
        if let Some(&i) = names.get(n.as_str()) {
            if !used[i] {
                used[i] = true;
                seq.push(i);
            }
        }
    }
    seq.extend((0..model.functions.len()).filter(|&i| !used[i]));

    let mut hot = Vec::new();
    let mut cold = Vec::new();
    for &fi in &seq {
        let f = &model.functions[fi];
        match block_orders.get(&f.name) {
            Some(order) => {
                order.validate(f)?;
                for l in &order.labels {
                    let block = f.block_index(l).expect("validated");
                    let section = order.section(l);
                    let slot = Slot { func: fi, block, section };
                    match section {
                        Section::Hot => hot.push(slot),
                        Section::Cold => cold.push(slot),
                    }
                }
            }
            None => hot.extend((0..f.blocks.len()).map(|block| Slot {
                func: fi,
                block,
                section: Section::Hot,
            })),
        }
    }
    let slots: Vec<Slot> = hot.into_iter().chain(cold).collect();

    let mut sizes: Vec<Vec<Vec<u32>>> = model
        .functions
        .iter()
        .map(|f| {
            f.blocks
                .iter()
                .map(|b| {
                    b.instructions
                        .iter()
                        .map(|i| if is_direct_branch(i.kind) { SHORT_BRANCH } else { i.size })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut iterations = 0;
    loop {
        let (addrs, _) = place(&slots, &sizes, hot_base, cold_base);
        let mut grew = false;
        for s in &slots {
            let f = &model.functions[s.func];
            let b = &f.blocks[s.block];
            let mut addr = addrs[&(s.func, s.block)];
            for (i, ins) in b.instructions.iter().enumerate() {
                let size = sizes[s.func][s.block][i];
                if is_direct_branch(ins.kind) && size == SHORT_BRANCH {
                    let t = f.block_index(ins.target().expect("validated")).expect("validated");
                    if !fits_short(addr, addrs[&(s.func, t)]) {
                        sizes[s.func][s.block][i] = long_size(ins.kind);
                        grew = true;
                    }
                }
                addr += size as u64;
            }
        }
        if !grew {
            break;
        }
        iterations += 1;
    }

    let (addrs, cold_start) = place(&slots, &sizes, hot_base, cold_base);
    let blocks: Vec<PlacedBlock> = slots
        .iter()
        .map(|s| {
            let f = &model.functions[s.func];
            PlacedBlock {
                function: f.name.clone(),
                label: f.blocks[s.block].label.clone(),
                section: s.section,
                address: addrs[&(s.func, s.block)],
                size: sizes[s.func][s.block].iter().map(|&x| x as u64).sum(),
            }
        })
        .collect();
    let mut plan = LayoutPlan::new(hot_base, cold_start, blocks);
    plan.iterations = iterations;
    for s in &slots {
        let f = &model.functions[s.func];
        let b = &f.blocks[s.block];
        for (i, ins) in b.instructions.iter().enumerate() {
            if is_direct_branch(ins.kind) {
                plan.branch_sizes
                    .insert((f.name.clone(), b.label.clone(), i), sizes[s.func][s.block][i]);
            }
        }
    }
    if let (Some((hs, he)), Some((cs, ce))) = (plan.hot_range(), plan.cold_range()) {
        if hs < ce && cs < he {
            return Err(PassError::SectionOverlap {
                hot_start: hs,
                hot_end: he,
                cold_start: cs,
                cold_end: ce,
            });
        }
    }
    Ok(plan)
}

fn place(
    slots: &[Slot],
    sizes: &[Vec<Vec<u32>>],
    hot_base: Address,
    cold_base: Option<Address>,
) -> (HashMap<(usize, usize), Address>, Address) {
    let mut addrs = HashMap::with_capacity(slots.len());
    let mut cursor = hot_base;
    let mut cold_start = None;
    for s in slots {
        if s.section == Section::Cold && cold_start.is_none() {
            let start = cold_base.unwrap_or_else(|| align_up(cursor, COLD_ALIGN));
            cold_start = Some(start);
            cursor = start;
        }
        addrs.insert((s.func, s.block), cursor);
        cursor += sizes[s.func][s.block].iter().map(|&x| x as u64).sum::<u64>();
    }
    let cold_start = cold_start.unwrap_or_else(|| cold_base.unwrap_or(align_up(cursor, COLD_ALIGN)));
    (addrs, cold_start)
}

pub fn serialize_plan(plan: &LayoutPlan) -> String {
    let mut out = String::new();
    out.push_str(PLAN_HEADER);
    out.push('\n');
    let _ = writeln!(out, "H {}", format_hex(plan.hot_base));
    let _ = writeln!(out, "C {}", format_hex(plan.cold_base));
    for b in &plan.blocks {
        let _ = writeln!(
            out,
            "P {} {} {} {} {}",
            b.function,
            b.label,
            b.section,
            format_hex(b.address),
            b.size
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("plan line {line}: {message}")]
pub struct PlanSyntaxError {
    pub line: usize,
    pub message: String,
}

/// Reads a plan written by [`serialize_plan`]. Branch sizes are not part of
/// the file; they live in the optimized model.
pub fn parse_plan(text: &str) -> Result<LayoutPlan, PlanSyntaxError> {
    let err = |line: usize, message: &str| PlanSyntaxError {
        line,
        message: message.to_string(),
    };
    let hex = |t: &str| t.strip_prefix("0x").and_then(|d| u64::from_str_radix(d, 16).ok());
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, PLAN_HEADER)) => {}
        Some((n, _)) => return Err(err(n, "missing PLAN v1 header")),
        None => return Err(err(1, "empty plan")),
    }
    let (mut hot, mut cold) = (None, None);
    let mut blocks = Vec::new();
    for (n, line) in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["H", a] => hot = Some(hex(a).ok_or_else(|| err(n, "bad address"))?),
            ["C", a] => cold = Some(hex(a).ok_or_else(|| err(n, "bad address"))?),
            ["P", f, l, s, a, size] => blocks.push(PlacedBlock {
                function: f.to_string(),
                label: l.to_string(),
                section: match *s {
                    "hot" => Section::Hot,
                    "cold" => Section::Cold,
                    _ => return Err(err(n, "section must be hot or cold")),
                },
                address: hex(a).ok_or_else(|| err(n, "bad address"))?,
                size: size.parse().map_err(|_| err(n, "bad size"))?,
            }),
            _ => return Err(err(n, "unrecognized line")),
        }
    }
    let hot = hot.ok_or_else(|| err(0, "missing H line"))?;
    Ok(LayoutPlan::new(hot, cold.unwrap_or(hot), blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn model(text: &str) -> ProgramModel {
        parse_model(&format!("MODEL v1\n{text}")).unwrap()
    }

    #[test]
    fn short_displacement_stays_two_bytes() {
        let m = model("F f 0x1000\nB a\nI 2 jcc c\nB b\nI 100 plain\nB c\nI 1 ret\n");
        let plan = assign_addresses(&m, &[], &BTreeMap::new(), 0x1000, None).unwrap();
        assert_eq!(plan.branch_sizes[&("f".into(), "a".into(), 0)], 2);
        assert_eq!(plan.block("f", "c").unwrap().address, 0x1000 + 102);
        assert_eq!(plan.iterations, 0);
    }

    #[test]
    fn branch_to_distant_cold_block_grows() {
        let m = model("F f 0x1000\nB a\nI 2 jcc c\nB b\nI 1 ret\nB c\nI 1 ret\n");
        let f = &m.functions[0];
        let order = BlockOrder::identity(f).with_sections(
            [("a", Section::Hot), ("b", Section::Hot), ("c", Section::Cold)]
                .into_iter()
                .map(|(l, s)| (l.to_string(), s))
                .collect(),
        );
        let orders = [("f".to_string(), order)].into_iter().collect();
        let plan = assign_addresses(&m, &[], &orders, 0x1000, Some(0x1000 + (1 << 20))).unwrap();
        assert_eq!(plan.branch_sizes[&("f".into(), "a".into(), 0)], 6);
        assert_eq!(plan.block("f", "c").unwrap().address, 0x1000 + (1 << 20));
        assert_eq!(plan.block("f", "c").unwrap().section, Section::Cold);
    }

    #[test]
    fn cascade_needs_two_rounds() {
        // a jcc in b jumps over d's backward jcc; growing the first pushes
        // the second from -128 to -132
        let m = model(
            "F f 0x0\nB a\nI 4 plain\nB b\nI 2 jcc f\nB c\nI 118 plain\nB d\nI 2 jcc a\nB e\nI 10 plain\nB f\nI 1 ret\n",
        );
        let plan = assign_addresses(&m, &[], &BTreeMap::new(), 0, None).unwrap();
        assert_eq!(plan.branch_sizes[&("f".into(), "b".into(), 0)], 6);
        assert_eq!(plan.branch_sizes[&("f".into(), "d".into(), 0)], 6);
        assert_eq!(plan.iterations, 2);
    }

    #[test]
    fn overlapping_sections_are_rejected() {
        let m = model("F f 0x0\nB a\nI 2 jcc c\nB b\nI 50 plain\nI 1 ret\nB c\nI 1 ret\n");
        let f = &m.functions[0];
        let order = BlockOrder::identity(f).with_sections(
            [("a", Section::Hot), ("b", Section::Cold), ("c", Section::Hot)]
                .into_iter()
                .map(|(l, s)| (l.to_string(), s))
                .collect(),
        );
        let orders = [("f".to_string(), order)].into_iter().collect();
        let r = assign_addresses(&m, &[], &orders, 0, Some(2));
        assert!(matches!(r, Err(PassError::SectionOverlap { .. })));
    }

    #[test]
    fn functions_follow_the_given_order() {
        let m = model("F f 0x0\nB a\nI 3 plain\nI 1 ret\nF g 0x10\nB a\nI 1 ret\n");
        let plan = assign_addresses(&m, &["g".into(), "f".into()], &BTreeMap::new(), 0x400, None).unwrap();
        assert_eq!(plan.block("g", "a").unwrap().address, 0x400);
        assert_eq!(plan.block("f", "a").unwrap().address, 0x401);
    }

    #[test]
    fn identity_plan_translates_addresses() {
        let m = model("F f 0x1000\nB a\nI 3 plain\nI 1 ret\nF g 0x1010\nB a\nI 1 ret\n");
        let plan = LayoutPlan::identity(&m, 0x400000);
        assert_eq!(plan.block("g", "a").unwrap().address, 0x400010);
    }

    #[test]
    fn plan_round_trips() {
        let m = model("F f 0x1000\nB a\nI 2 jcc c\nB b\nI 1 ret\nB c\nI 1 ret\n");
        let plan = assign_addresses(&m, &[], &BTreeMap::new(), 0x1000, None).unwrap();
        let text = serialize_plan(&plan);
        let back = parse_plan(&text).unwrap();
        assert_eq!(back.blocks, plan.blocks);
        assert_eq!(serialize_plan(&back), text);
    }
}
