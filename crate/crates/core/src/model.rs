//! The abstract binary: functions made of basic blocks made of sized
//! instructions, with original addresses.
//!
//! The on-disk form is a line-based text file:
//!
//! ```text
//! MODEL v1
//! F <name> 0x<hex-addr>
//! B <label>
//! I <size> plain|nop|ret
//! I <size> jcc <label> [inverted]
//! I <size> jmp <label>
//! I <size> ijmp [table <label>,<label>,...]
//! I <size> call <func>
//! I <size> icall
//! ```
//!
//! Block addresses are derived from the function address plus the cumulative
//! size of the preceding instructions. Address ranges are half-open.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::ModelError;

pub type Address = u64;

pub const MODEL_HEADER: &str = "MODEL v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrKind {
    Plain,
    CondBranch,
    UncondBranch,
    IndirectBranch,
    DirectCall,
    IndirectCall,
    Return,
    Nop,
}

impl InstrKind {
    /// Branches and returns end a basic block.
    pub fn is_terminator(self) -> bool {
        matches!(
            self,
            InstrKind::CondBranch
                | InstrKind::UncondBranch
                | InstrKind::IndirectBranch
                | InstrKind::Return
        )
    }

    pub fn is_call(self) -> bool {
        matches!(self, InstrKind::DirectCall | InstrKind::IndirectCall)
    }

    fn mnemonic(self) -> &'static str {
        match self {
            InstrKind::Plain => "plain",
            InstrKind::CondBranch => "jcc",
            InstrKind::UncondBranch => "jmp",
            InstrKind::IndirectBranch => "ijmp",
            InstrKind::DirectCall => "call",
            InstrKind::IndirectCall => "icall",
            InstrKind::Return => "ret",
            InstrKind::Nop => "nop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub size: u32,
    pub kind: InstrKind,
    /// Block label for `jcc`/`jmp`, function name for `call`.
    pub target: Option<String>,
    /// Possible targets of an `ijmp`, when known.
    pub jump_table: Option<Vec<String>>,
    /// Set when a layout pass flipped the branch condition.
    pub inverted: bool,
}

impl Instruction {
    fn new(size: u32, kind: InstrKind) -> Self {
        Instruction {
            size,
            kind,
            target: None,
            jump_table: None,
            inverted: false,
        }
    }

    pub fn plain(size: u32) -> Self {
        Self::new(size, InstrKind::Plain)
    }

    pub fn nop(size: u32) -> Self {
        Self::new(size, InstrKind::Nop)
    }

    pub fn ret(size: u32) -> Self {
        Self::new(size, InstrKind::Return)
    }

    pub fn icall(size: u32) -> Self {
        Self::new(size, InstrKind::IndirectCall)
    }

    pub fn cond(size: u32, target: impl Into<String>) -> Self {
        Instruction {
            target: Some(target.into()),
            ..Self::new(size, InstrKind::CondBranch)
        }
    }

    pub fn jump(size: u32, target: impl Into<String>) -> Self {
        Instruction {
            target: Some(target.into()),
            ..Self::new(size, InstrKind::UncondBranch)
        }
    }

    pub fn call(size: u32, callee: impl Into<String>) -> Self {
        Instruction {
            target: Some(callee.into()),
            ..Self::new(size, InstrKind::DirectCall)
        }
    }

    pub fn ijmp(size: u32, table: Option<Vec<String>>) -> Self {
        Instruction {
            jump_table: table,
            ..Self::new(size, InstrKind::IndirectBranch)
        }
    }

    pub fn target(&self) -> Option<&str> {
        self.target.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub address: Address,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(label: impl Into<String>, instructions: Vec<Instruction>) -> Self {
        BasicBlock {
            label: label.into(),
            address: 0,
            instructions,
        }
    }

    pub fn size(&self) -> u64 {
        self.instructions.iter().map(|i| i.size as u64).sum()
    }

    pub fn end(&self) -> Address {
        self.address + self.size()
    }

    pub fn terminator(&self) -> Option<&Instruction> {
        self.instructions.last().filter(|i| i.kind.is_terminator())
    }

    /// The conditional branch of a block ending in a `jcc`/`jmp` pair.
    pub fn paired_cond(&self) -> Option<&Instruction> {
        match self.instructions.as_slice() {
            [.., c, j] if c.kind == InstrKind::CondBranch && j.kind == InstrKind::UncondBranch => {
                Some(c)
            }
            _ => None,
        }
    }

    /// Whether control may continue into the next block in layout order.
    pub fn falls_through(&self) -> bool {
        match self.terminator() {
            None => true,
            Some(t) => t.kind == InstrKind::CondBranch,
        }
    }

    /// Byte offset of every instruction from the block start.
    pub fn instruction_offsets(&self) -> impl Iterator<Item = u64> + '_ {
        self.instructions.iter().scan(0u64, |off, i| {
            let here = *off;
            *off += i.size as u64;
            Some(here)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Taken,
    FallThrough,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub address: Address,
    pub blocks: Vec<BasicBlock>,
    /// Functions whose CFG is not fully understood are never transformed.
    pub simple: bool,
}

impl Function {
    pub fn new(name: impl Into<String>, address: Address, blocks: Vec<BasicBlock>) -> Self {
        let mut f = Function {
            name: name.into(),
            address,
            blocks,
            simple: true,
        };
        f.recompute_addresses();
        f.simple = f.derive_simple();
        f
    }

    pub fn size(&self) -> u64 {
        self.blocks.iter().map(BasicBlock::size).sum()
    }

    pub fn end(&self) -> Address {
        self.address + self.size()
    }

    pub fn entry(&self) -> &BasicBlock {
        &self.blocks[0]
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    /// Lays the blocks out contiguously from the function address.
    pub fn recompute_addresses(&mut self) {
        let mut addr = self.address;
        for b in &mut self.blocks {
            b.address = addr;
            addr += b.size();
        }
    }

    fn derive_simple(&self) -> bool {
        !self.blocks.iter().flat_map(|b| &b.instructions).any(|i| {
            i.kind == InstrKind::IndirectBranch && i.jump_table.is_none()
        })
    }

    /// Index of the block control falls into from block `idx`, if any.
    pub fn fallthrough(&self, idx: usize) -> Option<usize> {
        if self.blocks[idx].falls_through() && idx + 1 < self.blocks.len() {
            Some(idx + 1)
        } else {
            None
        }
    }

    pub fn cfg(&self) -> Cfg {
        Cfg::new(self)
    }
}

/// Successor and predecessor lists of one function, by block index.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<(usize, EdgeKind)>>,
    pub preds: Vec<Vec<(usize, EdgeKind)>>,
    index: HashMap<String, usize>,
}

impl Cfg {
    pub fn new(func: &Function) -> Self {
        let index: HashMap<String, usize> = func
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.clone(), i))
            .collect();
        let n = func.blocks.len();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for (i, block) in func.blocks.iter().enumerate() {
            let out = &mut succs[i];
            let mut push = |dst: usize, kind: EdgeKind| {
                if !out.iter().any(|&(d, _)| d == dst) {
                    out.push((dst, kind));
                }
            };
            if let Some(t) = block.paired_cond().and_then(|c| c.target()).and_then(|t| index.get(t)) {
                push(*t, EdgeKind::Taken);
            }
            if let Some(term) = block.terminator() {
                match term.kind {
                    InstrKind::CondBranch | InstrKind::UncondBranch => {
                        if let Some(&t) = term.target().and_then(|t| index.get(t)) {
                            push(t, EdgeKind::Taken);
                        }
                    }
                    InstrKind::IndirectBranch => {
                        for l in term.jump_table.iter().flatten() {
                            if let Some(&t) = index.get(l.as_str()) {
                                push(t, EdgeKind::Taken);
                            }
                        }
                    }
                    _ => {}
                }
            }
            if let Some(ft) = func.fallthrough(i) {
                push(ft, EdgeKind::FallThrough);
            }
            for &(d, k) in out.iter() {
                preds[d].push((i, k));
            }
        }
        Cfg {
            succs,
            preds,
            index,
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.succs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succs.is_empty()
    }

    pub fn edge_kind(&self, src: usize, dst: usize) -> Option<EdgeKind> {
        self.succs[src]
            .iter()
            .find(|&&(d, _)| d == dst)
            .map(|&(_, k)| k)
    }

    pub fn fallthrough_succ(&self, src: usize) -> Option<usize> {
        self.succs[src]
            .iter()
            .find(|&&(_, k)| k == EdgeKind::FallThrough)
            .map(|&(d, _)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProgramModel {
    pub functions: Vec<Function>,
}

/// Where an address lands in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub function: usize,
    pub block: usize,
    pub instruction: usize,
    /// Offset of the containing instruction's first byte within the block.
    pub instruction_offset: u64,
    /// Raw offset of the address within the block.
    pub byte_offset: u64,
}

impl ProgramModel {
    pub fn new(functions: Vec<Function>) -> Self {
        ProgramModel { functions }
    }

    pub fn text_base(&self) -> Address {
        self.functions.first().map_or(0, |f| f.address)
    }

    /// Span of the text from the first function start to the last function end.
    pub fn total_text_size(&self) -> u64 {
        match (self.functions.first(), self.functions.last()) {
            (Some(first), Some(last)) => last.end() - first.address,
            _ => 0,
        }
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    /// Map from function name to its index.
    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i))
            .collect()
    }

    pub fn resolve(&self, addr: Address) -> Option<Location> {
        let fi = self.functions.partition_point(|f| f.address <= addr);
        let fi = fi.checked_sub(1)?;
        let func = &self.functions[fi];
        if addr >= func.end() {
            return None;
        }
        let bi = func.blocks.partition_point(|b| b.address <= addr).checked_sub(1)?;
        let block = &func.blocks[bi];
        if addr >= block.end() {
            return None;
        }
        let byte_offset = addr - block.address;
        let (instruction, instruction_offset) = block
            .instruction_offsets()
            .zip(&block.instructions)
            .enumerate()
            .find(|(_, (off, ins))| byte_offset < off + ins.size as u64)
            .map(|(i, (off, _))| (i, off))?;
        Some(Location {
            function: fi,
            block: bi,
            instruction,
            instruction_offset,
            byte_offset,
        })
    }

    /// `(function name, block label, offset of the containing instruction)`.
    pub fn resolve_address(&self, addr: Address) -> Option<(&str, &str, u64)> {
        self.resolve(addr).map(|loc| {
            let f = &self.functions[loc.function];
            (
                f.name.as_str(),
                f.blocks[loc.block].label.as_str(),
                loc.instruction_offset,
            )
        })
    }

    /// Address of the first byte of instruction `ins` of a block.
    pub fn instruction_address(&self, func: usize, block: usize, ins: usize) -> Address {
        let b = &self.functions[func].blocks[block];
        b.address + b.instructions[..ins].iter().map(|i| i.size as u64).sum::<u64>()
    }

    /// Drops every NOP. Addresses are left as they were.
    pub fn strip_nops(&self) -> ProgramModel {
        let mut out = self.clone();
        for f in &mut out.functions {
            for b in &mut f.blocks {
                b.instructions.retain(|i| i.kind != InstrKind::Nop);
            }
        }
        out
    }

    /// Checks every structural invariant the parser enforces.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut names = HashSet::new();
        for f in &self.functions {
            if !names.insert(f.name.as_str()) {
                return Err(ModelError::DuplicateFunction {
                    name: f.name.clone(),
                });
            }
        }
        for pair in self.functions.windows(2) {
            if pair[0].end() > pair[1].address {
                return Err(ModelError::OverlappingFunctions {
                    first: pair[0].name.clone(),
                    second: pair[1].name.clone(),
                });
            }
        }
        for f in &self.functions {
            validate_function(f, &names)?;
        }
        Ok(())
    }
}

fn validate_function(f: &Function, functions: &HashSet<&str>) -> Result<(), ModelError> {
    let invalid = |block: &str, reason: &str| ModelError::InvalidBlock {
        function: f.name.clone(),
        block: block.to_string(),
        reason: reason.to_string(),
    };
    if f.blocks.is_empty() {
        return Err(ModelError::EmptyFunction {
            name: f.name.clone(),
        });
    }
    let mut labels = HashSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            return Err(ModelError::DuplicateLabel {
                function: f.name.clone(),
                label: b.label.clone(),
            });
        }
    }
    let dangling = |block: &str, target: &str| ModelError::DanglingTarget {
        function: f.name.clone(),
        block: block.to_string(),
        target: target.to_string(),
    };
    for (idx, b) in f.blocks.iter().enumerate() {
        let last = b.instructions.len().saturating_sub(1);
        for (i, ins) in b.instructions.iter().enumerate() {
            if ins.size == 0 {
                return Err(invalid(&b.label, "zero-sized instruction"));
            }
            let paired = i + 1 == last && b.paired_cond().is_some();
            if ins.kind.is_terminator() && i != last && !paired {
                return Err(invalid(&b.label, "terminator is not the last instruction"));
            }
            match ins.kind {
                InstrKind::CondBranch | InstrKind::UncondBranch => {
                    let t = ins.target().ok_or_else(|| invalid(&b.label, "branch without target"))?;
                    if !labels.contains(t) {
                        return Err(dangling(&b.label, t));
                    }
                }
                InstrKind::DirectCall => {
                    let t = ins.target().ok_or_else(|| invalid(&b.label, "call without target"))?;
                    if !functions.contains(t) {
                        return Err(dangling(&b.label, t));
                    }
                }
                InstrKind::IndirectBranch => {
                    for t in ins.jump_table.iter().flatten() {
                        if !labels.contains(t.as_str()) {
                            return Err(dangling(&b.label, t));
                        }
                    }
                }
                _ => {
                    if ins.target.is_some() {
                        return Err(invalid(&b.label, "operand on an instruction that takes none"));
                    }
                }
            }
            if ins.jump_table.is_some() && ins.kind != InstrKind::IndirectBranch {
                return Err(invalid(&b.label, "jump table on a non-ijmp instruction"));
            }
        }
        if b.falls_through() {
            match f.blocks.get(idx + 1) {
                None => return Err(invalid(&b.label, "falls through past the function end")),
                Some(next) => {
                    let term = b.terminator();
                    if term.and_then(Instruction::target) == Some(next.label.as_str()) {
                        return Err(invalid(&b.label, "conditional branch targets its own fall-through"));
                    }
                }
            }
        }
    }
    Ok(())
}

fn parse_hex(tok: &str) -> Option<Address> {
    let digits = tok.strip_prefix("0x")?;
    if digits.is_empty() {
        return None;
    }
    Address::from_str_radix(digits, 16).ok()
}

pub fn format_hex(addr: Address) -> String {
    format!("0x{addr:x}")
}

/// Parses and validates a model file.
pub fn parse_model(text: &str) -> Result<ProgramModel, ModelError> {
    let syntax = |line: usize, message: &str| ModelError::Syntax {
        line,
        message: message.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    match lines.next() {
        Some((_, l)) if l.split_whitespace().collect::<Vec<_>>() == ["MODEL", "v1"] => {}
        Some((n, _)) => return Err(syntax(n, "expected `MODEL v1` header")),
        None => return Err(syntax(1, "missing `MODEL v1` header")),
    }

    struct Pending {
        name: String,
        address: Address,
        blocks: Vec<BasicBlock>,
    }
    let mut functions: Vec<Pending> = Vec::new();

    for (n, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "F" => {
                let [_, name, addr] = toks[..] else {
                    return Err(syntax(n, "expected `F <name> 0x<addr>`"));
                };
                let address = parse_hex(addr).ok_or_else(|| syntax(n, "bad function address"))?;
                functions.push(Pending {
                    name: name.to_string(),
                    address,
                    blocks: Vec::new(),
                });
            }
            "B" => {
                let [_, label] = toks[..] else {
                    return Err(syntax(n, "expected `B <label>`"));
                };
                let f = functions
                    .last_mut()
                    .ok_or_else(|| syntax(n, "block outside of a function"))?;
                f.blocks.push(BasicBlock::new(label, Vec::new()));
            }
            "I" => {
                let block = functions
                    .last_mut()
                    .and_then(|f| f.blocks.last_mut())
                    .ok_or_else(|| syntax(n, "instruction outside of a block"))?;
                block.instructions.push(parse_instruction(&toks[1..], n)?);
            }
            _ => return Err(syntax(n, "unknown record type")),
        }
    }

    let model = ProgramModel::new(
        functions
            .into_iter()
            .map(|p| Function::new(p.name, p.address, p.blocks))
            .collect(),
    );
    model.validate()?;
    Ok(model)
}

fn parse_instruction(toks: &[&str], n: usize) -> Result<Instruction, ModelError> {
    let syntax = |message: &str| ModelError::Syntax {
        line: n,
        message: message.to_string(),
    };
    let size: u32 = toks
        .first()
        .and_then(|s| s.parse().ok())
        .filter(|&s| s > 0)
        .ok_or_else(|| syntax("instruction size must be a positive decimal integer"))?;
    let kind = toks.get(1).ok_or_else(|| syntax("missing instruction kind"))?;
    let ins = match (*kind, &toks[2..]) {
        ("plain", []) => Instruction::plain(size),
        ("nop", []) => Instruction::nop(size),
        ("ret", []) => Instruction::ret(size),
        ("icall", []) => Instruction::icall(size),
        ("jcc", [target]) => Instruction::cond(size, *target),
        ("jcc", [target, "inverted"]) => Instruction {
            inverted: true,
            ..Instruction::cond(size, *target)
        },
        ("jmp", [target]) => Instruction::jump(size, *target),
        ("call", [callee]) => Instruction::call(size, *callee),
        ("ijmp", []) => Instruction::ijmp(size, None),
        ("ijmp", ["table", labels]) => {
            let table: Vec<String> = labels.split(',').map(str::to_string).collect();
            if table.iter().any(String::is_empty) {
                return Err(syntax("empty label in jump table"));
            }
            Instruction::ijmp(size, Some(table))
        }
        _ => return Err(syntax("malformed instruction")),
    };
    Ok(ins)
}

pub fn serialize_model(model: &ProgramModel) -> String {
    let mut out = String::new();
    out.push_str(MODEL_HEADER);
    out.push('\n');
    for f in &model.functions {
        let _ = writeln!(out, "F {} {}", f.name, format_hex(f.address));
        for b in &f.blocks {
            let _ = writeln!(out, "B {}", b.label);
            for ins in &b.instructions {
                let _ = write!(out, "I {} {}", ins.size, ins.kind.mnemonic());
                if let Some(t) = &ins.target {
                    let _ = write!(out, " {t}");
                }
                if let Some(table) = &ins.jump_table {
                    let _ = write!(out, " table {}", table.join(","));
                }
                if ins.inverted {
                    out.push_str(" inverted");
                }
                out.push('\n');
            }
        }
    }
    out
}
