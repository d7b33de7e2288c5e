//! Branch-stack and IP-sample traces.
//!
//! File format, one record per line:
//!
//! ```text
//! S 0x<ip>
//! L 0x<from>/0x<to>/<P|M> ...
//! ```
//!
//! `L` entries are newest first, at most 32 per line. `P` marks a correctly
//! predicted branch, `M` a mispredicted one.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{format_hex, Address, Cfg, EdgeKind, Function, InstrKind, ProgramModel};
use crate::profile::{CallGraph, DenseFlow, FlowGraph};

pub const MAX_STACK_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LbrEntry {
    pub from: Address,
    pub to: Address,
    pub mispredicted: bool,
}

/// Taken branches, newest first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LbrStack {
    pub entries: Vec<LbrEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpSample {
    pub ip: Address,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub stacks: Vec<LbrStack>,
    pub samples: Vec<IpSample>,
    /// Malformed lines that were ignored.
    pub skipped: usize,
}

fn hex(tok: &str) -> Option<Address> {
    let digits = tok.strip_prefix("0x")?;
    if digits.is_empty() {
        return None;
    }
    Address::from_str_radix(digits, 16).ok()
}

fn parse_entry(tok: &str) -> Option<LbrEntry> {
    let mut parts = tok.split('/');
    let from = hex(parts.next()?)?;
    let to = hex(parts.next()?)?;
    let mispredicted = match parts.next()? {
        "P" => false,
        "M" => true,
        _ => return None,
    };
    if parts.next().is_some() {
        return None;
    }
    Some(LbrEntry {
        from,
        to,
        mispredicted,
    })
}

pub fn parse_trace(text: &str) -> Trace {
    let mut trace = Trace::default();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("S") => match (toks.next().and_then(hex), toks.next()) {
                (Some(ip), None) => trace.samples.push(IpSample { ip }),
                _ => trace.skipped += 1,
            },
            Some("L") => {
                let entries: Option<Vec<LbrEntry>> = toks.map(parse_entry).collect();
                match entries {
                    Some(entries) if (1..=MAX_STACK_DEPTH).contains(&entries.len()) => {
                        trace.stacks.push(LbrStack { entries })
                    }
                    _ => trace.skipped += 1,
                }
            }
            _ => trace.skipped += 1,
        }
    }
    trace
}

pub fn render_trace(stacks: &[LbrStack], samples: &[IpSample]) -> String {
    let mut out = String::new();
    for s in stacks {
        out.push('L');
        for e in &s.entries {
            let flag = if e.mispredicted { 'M' } else { 'P' };
            let _ = write!(out, " {}/{}/{flag}", format_hex(e.from), format_hex(e.to));
        }
        out.push('\n');
    }
    for s in samples {
        let _ = writeln!(out, "S {}", format_hex(s.ip));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub mispredict_rate: f64,
    /// Descend into direct callees, recording call and return branches.
    pub follow_calls: bool,
    pub max_call_depth: usize,
    /// Blocks executed by one walk before it is abandoned.
    pub step_limit: usize,
    /// Probability that an executed instruction also yields an IP sample.
    pub sample_rate: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            mispredict_rate: 0.02,
            follow_calls: true,
            max_call_depth: 32,
            step_limit: 100_000,
            sample_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerateDiagnostics {
    /// Walks that produced no taken branch.
    pub empty_walks: usize,
    /// Walks stuck in a block with no known successor.
    pub trapped: usize,
    pub step_limit: usize,
    pub call_depth_exceeded: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GeneratedTrace {
    pub stacks: Vec<LbrStack>,
    pub samples: Vec<IpSample>,
    /// Edges, entry counts and calls actually executed by the walks.
    pub truth: FlowGraph,
    pub truth_calls: CallGraph,
    pub diagnostics: GenerateDiagnostics,
}

struct Walker<'a> {
    model: &'a ProgramModel,
    cfgs: Vec<Cfg>,
    weights: Vec<DenseFlow>,
    opts: &'a GenerateOptions,
    rng: ChaCha8Rng,
    sampler: ChaCha8Rng,
    truth: Vec<DenseFlow>,
    calls: BTreeMap<(usize, usize), u64>,
    samples: Vec<IpSample>,
}

enum Step {
    Goto(usize, usize, usize),
    End,
}

impl Walker<'_> {
    fn choose(&mut self, func: usize, block: usize, succs: &[(usize, EdgeKind)]) -> usize {
        let w: Vec<u64> = succs
            .iter()
            .map(|&(s, _)| self.weights[func].get(block, s))
            .collect();
        let total: u64 = w.iter().sum();
        if total == 0 {
            return succs[self.rng.gen_range(0..succs.len())].0;
        }
        let mut pick = self.rng.gen_range(0..total);
        for (&(s, _), &wi) in succs.iter().zip(&w) {
            if pick < wi {
                return s;
            }
            pick -= wi;
        }
        unreachable!("pick < total")
    }

    fn entry(&mut self, from: Address, to: Address) -> LbrEntry {
        LbrEntry {
            from,
            to,
            mispredicted: self.rng.gen_bool(self.opts.mispredict_rate),
        }
    }

    /// One walk from a root function entry; entries in execution order.
    fn walk(&mut self, root: usize, depth: usize, diag: &mut GenerateDiagnostics) -> Vec<LbrEntry> {
        let model = self.model;
        let mut out = Vec::new();
        let mut stack: Vec<(usize, usize, usize)> = Vec::new();
        let (mut f, mut b, mut start) = (root, 0usize, 0usize);
        self.truth[root].entry += 1;
        let mut steps = 0;
        'walk: while out.len() < depth {
            steps += 1;
            if steps > self.opts.step_limit {
                diag.step_limit += 1;
                break;
            }
            let func: &Function = &model.functions[f];
            let block = &func.blocks[b];
            let mut addr = block.address
                + block.instructions[..start].iter().map(|i| i.size as u64).sum::<u64>();
            let mut next = None;
            for (i, ins) in block.instructions.iter().enumerate().skip(start) {
                if self.opts.sample_rate > 0.0 && self.sampler.gen_bool(self.opts.sample_rate) {
                    self.samples.push(IpSample { ip: addr });
                }
                match ins.kind {
                    InstrKind::DirectCall if self.opts.follow_calls => {
                        let callee = model
                            .function_index(ins.target().expect("validated call"))
                            .expect("validated call target");
                        if stack.len() >= self.opts.max_call_depth {
                            diag.call_depth_exceeded += 1;
                        } else {
                            let to = model.functions[callee].address;
                            let e = self.entry(addr, to);
                            out.push(e);
                            stack.push((f, b, i + 1));
                            *self.calls.entry((f, callee)).or_default() += 1;
                            self.truth[callee].entry += 1;
                            next = Some(Step::Goto(callee, 0, 0));
                            break;
                        }
                    }
                    InstrKind::CondBranch | InstrKind::UncondBranch | InstrKind::IndirectBranch => {
                        let succs = self.cfgs[f].succs[b].clone();
                        if succs.is_empty() {
                            diag.trapped += 1;
                            break 'walk;
                        }
                        let s = self.choose(f, b, &succs);
                        self.truth[f].add(b, s, 1);
                        if self.cfgs[f].edge_kind(b, s) == Some(EdgeKind::Taken) {
                            // a jcc/jmp pair leaves through the jmp unless the jcc is taken
                            let from = match block.paired_cond() {
                                Some(c) if c.target() != Some(func.blocks[s].label.as_str()) => {
                                    addr + ins.size as u64
                                }
                                _ => addr,
                            };
                            let e = self.entry(from, func.blocks[s].address);
                            out.push(e);
                        }
                        next = Some(Step::Goto(f, s, 0));
                        break;
                    }
                    InstrKind::Return => {
                        next = Some(match stack.pop() {
                            Some((cf, cb, ci)) => {
                                let caller = &model.functions[cf].blocks[cb];
                                let ret_to = caller.address
                                    + caller.instructions[..ci]
                                        .iter()
                                        .map(|i| i.size as u64)
                                        .sum::<u64>();
                                let e = self.entry(addr, ret_to);
                                out.push(e);
                                Step::Goto(cf, cb, ci)
                            }
                            None => Step::End,
                        });
                        break;
                    }
                    _ => {}
                }
                addr += ins.size as u64;
            }
            match next {
                Some(Step::Goto(nf, nb, ni)) => {
                    (f, b, start) = (nf, nb, ni);
                    // resuming after a call that ended its block means falling through
                    if start >= model.functions[f].blocks[b].instructions.len() {
                        match model.functions[f].fallthrough(b) {
                            Some(ft) => {
                                self.truth[f].add(b, ft, 1);
                                (b, start) = (ft, 0);
                            }
                            None => {
                                diag.trapped += 1;
                                break;
                            }
                        }
                    }
                }
                Some(Step::End) => break,
                None => match func.fallthrough(b) {
                    Some(ft) => {
                        self.truth[f].add(b, ft, 1);
                        (b, start) = (ft, 0);
                    }
                    None => {
                        diag.trapped += 1;
                        break;
                    }
                },
            }
        }
        out
    }
}

/// Seeded random walks over the CFG, recording the taken branches the way a
/// branch-stack sampler would.
///
/// Each stack comes from an independent walk that starts at a function entry
/// (chosen in proportion to the entry counts of `weights`, uniformly when none
/// are set) and stops once `depth` taken branches have been recorded or the
/// root function returns. Successors are drawn in proportion to the edge
/// counts of `weights`, uniformly when a block has none.
pub fn generate_trace(
    model: &ProgramModel,
    weights: &FlowGraph,
    seed: u64,
    n_stacks: usize,
    depth: usize,
    opts: &GenerateOptions,
) -> GeneratedTrace {
    assert!(
        (1..=MAX_STACK_DEPTH).contains(&depth),
        "stack depth must be within 1..={MAX_STACK_DEPTH}"
    );
    let cfgs: Vec<Cfg> = model.functions.iter().map(Function::cfg).collect();
    let dense: Vec<DenseFlow> = model
        .functions
        .iter()
        .zip(&cfgs)
        .map(|(f, cfg)| {
            weights
                .functions
                .get(&f.name)
                .map(|ff| DenseFlow::from_flow(cfg, ff))
                .unwrap_or_default()
        })
        .collect();
    let roots: Vec<u64> = dense.iter().map(|d| d.entry).collect();
    let root_total: u64 = roots.iter().sum();

    let mut walker = Walker {
        model,
        cfgs,
        weights: dense,
        opts,
        rng: ChaCha8Rng::seed_from_u64(seed),
        sampler: ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a_5a5a_5a5a),
        truth: vec![DenseFlow::default(); model.functions.len()],
        calls: BTreeMap::new(),
        samples: Vec::new(),
    };
    let mut diag = GenerateDiagnostics::default();
    let mut stacks = Vec::new();
    if !model.functions.is_empty() {
        for _ in 0..n_stacks {
            let root = if root_total == 0 {
                walker.rng.gen_range(0..model.functions.len())
            } else {
                let mut pick = walker.rng.gen_range(0..root_total);
                roots
                    .iter()
                    .position(|&w| {
                        if pick < w {
                            true
                        } else {
                            pick -= w;
                            false
                        }
                    })
                    .expect("pick < total")
            };
            let mut entries = walker.walk(root, depth, &mut diag);
            if entries.is_empty() {
                diag.empty_walks += 1;
                continue;
            }
            entries.reverse();
            stacks.push(LbrStack { entries });
        }
    }

    let mut truth = FlowGraph::default();
    for ((f, cfg), d) in model.functions.iter().zip(&walker.cfgs).zip(walker.truth) {
        truth.functions.insert(f.name.clone(), d.into_flow(f, cfg, false));
    }
    let mut truth_calls = CallGraph::with_nodes(model, |f| truth.function_weight(&f.name));
    for ((a, b), n) in walker.calls {
        truth_calls.add_edge(&model.functions[a].name, &model.functions[b].name, n);
    }
    GeneratedTrace {
        stacks,
        samples: walker.samples,
        truth,
        truth_calls,
        diagnostics: diag,
    }
}
