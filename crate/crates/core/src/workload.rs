//! Deterministic synthetic programs with a known branch bias, for driving
//! the trace generator and the evaluation end to end.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Address, BasicBlock, Function, Instruction, ProgramModel};
use crate::profile::{EdgeCount, FlowGraph, FunctionFlow};
use crate::trace::{generate_trace, GenerateOptions, GeneratedTrace, MAX_STACK_DEPTH};

pub const DEFAULT_TEXT_BASE: Address = 0x40_0000;
const FUNCTION_ALIGN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown workload shape `{0}`")]
pub struct UnknownShape(pub String);

/// Control-flow shape of the generated functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Chains of if/else diamonds whose likely arm is the taken side of the
    /// branch, with some never-executed error arms.
    Diamond,
    /// A loop around a diamond.
    Loop,
    /// Two oppositely biased branches sharing both successors, so that block
    /// counts alone cannot tell which branch feeds which successor.
    Correlated,
    /// A per-function random pick of the other shapes.
    Mixed,
}

impl FromStr for Shape {
    type Err = UnknownShape;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diamond" | "diamond-heavy" => Ok(Shape::Diamond),
            "loop" | "loops" => Ok(Shape::Loop),
            "correlated" => Ok(Shape::Correlated),
            "mixed" => Ok(Shape::Mixed),
            _ => Err(UnknownShape(s.to_string())),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Diamond => "diamond",
            Shape::Loop => "loop",
            Shape::Correlated => "correlated",
            Shape::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub functions: usize,
    /// Share of functions that are executed at all.
    pub hot_fraction: f64,
    pub shape: Shape,
    pub seed: u64,
    pub text_base: Address,
}

impl WorkloadSpec {
    pub fn new(functions: usize, hot_fraction: f64, shape: Shape, seed: u64) -> Self {
        WorkloadSpec {
            functions,
            hot_fraction,
            shape,
            seed,
            text_base: DEFAULT_TEXT_BASE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub model: ProgramModel,
    /// Relative successor weights and root entry weights used to drive walks.
    pub bias: FlowGraph,
    /// Executed functions, in address order.
    pub hot: Vec<String>,
}

impl Workload {
    /// Branch stacks (and IP samples when `sample_rate > 0`) from walks that
    /// start at hot function entries. Without hot functions nothing runs.
    pub fn trace(&self, seed: u64, stacks: usize, sample_rate: f64) -> GeneratedTrace {
        if self.hot.is_empty() {
            return GeneratedTrace::default();
        }
        let opts = GenerateOptions {
            sample_rate,
            ..GenerateOptions::default()
        };
        generate_trace(&self.model, &self.bias, seed, stacks, MAX_STACK_DEPTH, &opts)
    }
}

struct Builder {
    blocks: Vec<BasicBlock>,
    weights: Vec<(String, String, u64)>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            blocks: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn block(&mut self, label: String, instructions: Vec<Instruction>) {
        self.blocks.push(BasicBlock::new(label, instructions));
    }

    fn weight(&mut self, src: &str, dst: &str, w: u64) {
        self.weights.push((src.to_string(), dst.to_string(), w));
    }
}

struct Ctx<'a> {
    rng: &'a mut ChaCha8Rng,
    hot: bool,
    /// Hot functions this one may call.
    hot_callees: &'a [String],
    cold_callees: &'a [String],
}

impl Ctx<'_> {
    fn body(&mut self) -> u32 {
        if self.hot {
            self.rng.gen_range(2..=12)
        } else {
            self.rng.gen_range(16..=96)
        }
    }

    fn cold_body(&mut self) -> u32 {
        self.rng.gen_range(24..=128)
    }

    /// Likely-side weight out of 100.
    fn bias(&mut self) -> u64 {
        self.rng.gen_range(85..=98)
    }

    fn maybe_hot_call(&mut self, ins: &mut Vec<Instruction>) {
        if self.hot && !self.hot_callees.is_empty() && self.rng.gen_bool(0.3) {
            let c = &self.hot_callees[self.rng.gen_range(0..self.hot_callees.len())];
            ins.push(Instruction::call(5, c.clone()));
            ins.push(Instruction::plain(self.rng.gen_range(2..=6)));
        }
    }

    fn maybe_cold_call(&mut self, ins: &mut Vec<Instruction>) {
        if !self.cold_callees.is_empty() && self.rng.gen_bool(0.5) {
            let c = &self.cold_callees[self.rng.gen_range(0..self.cold_callees.len())];
            ins.push(Instruction::call(5, c.clone()));
        }
    }
}

/// `d{i}` branches to the likely arm `h{i}`; the unlikely arm `c{i}` is the
/// fall-through and jumps to `next`. Only never-executed arms call cold code.
fn diamond(b: &mut Builder, cx: &mut Ctx<'_>, tag: &str, next: &str) {
    let (d, c, h) = (format!("d{tag}"), format!("c{tag}"), format!("h{tag}"));
    let body = cx.body();
    b.block(d.clone(), vec![Instruction::plain(body), Instruction::cond(2, h.clone())]);
    let likely = cx.bias();
    let never = cx.rng.gen_bool(0.4);
    let unlikely = if never { 0 } else { 100 - likely };
    let mut cold = vec![Instruction::plain(cx.cold_body())];
    if never {
        cx.maybe_cold_call(&mut cold);
    }
    cold.push(Instruction::jump(2, next));
    b.block(c.clone(), cold);
    let mut hot = vec![Instruction::plain(cx.body())];
    cx.maybe_hot_call(&mut hot);
    b.block(h.clone(), hot);
    b.weight(&d, &h, likely);
    b.weight(&d, &c, unlikely);
    b.weight(&c, next, 1);
    b.weight(&h, next, 1);
}

fn diamond_function(cx: &mut Ctx<'_>) -> Builder {
    let mut b = Builder::new();
    let k = cx.rng.gen_range(2..=6);
    for i in 0..k {
        diamond(&mut b, cx, &i.to_string(), &format!("d{}", i + 1));
    }
    let body = cx.body();
    b.block(format!("d{k}"), vec![Instruction::plain(body), Instruction::ret(1)]);
    b
}

fn loop_function(cx: &mut Ctx<'_>) -> Builder {
    let mut b = Builder::new();
    let body = cx.body();
    b.block("entry".into(), vec![Instruction::plain(body)]);
    b.weight("entry", "head", 1);
    let body = cx.body();
    b.block("head".into(), vec![Instruction::plain(body), Instruction::cond(2, "exit")]);
    let trips = cx.rng.gen_range(4..=16);
    b.weight("head", "exit", 1);
    b.weight("head", "dloop", trips);
    diamond(&mut b, cx, "loop", "latch");
    let body = cx.body();
    b.block("latch".into(), vec![Instruction::plain(body), Instruction::jump(2, "head")]);
    b.weight("latch", "head", 1);
    let body = cx.body();
    b.block("exit".into(), vec![Instruction::plain(body), Instruction::ret(1)]);
    b
}

/// Per unit: `e` picks `x` or `y`; `x` mostly reaches `p` and `y` mostly
/// reaches `q`, but `x` falls through into `q` and `y` into `p`.
fn correlated_function(cx: &mut Ctx<'_>) -> Builder {
    let mut b = Builder::new();
    let k = cx.rng.gen_range(1..=3);
    for i in 0..k {
        let [e, x, q, y, p] = ["e", "x", "q", "y", "p"].map(|s| format!("{s}{i}"));
        let next = if i + 1 == k { "ret".to_string() } else { format!("e{}", i + 1) };
        let mut body = || cx.body();
        let sizes: [u32; 5] = std::array::from_fn(|_| body());
        b.block(e.clone(), vec![Instruction::plain(sizes[0]), Instruction::cond(2, y.clone())]);
        b.block(x.clone(), vec![Instruction::plain(sizes[1]), Instruction::cond(2, p.clone())]);
        b.block(q.clone(), vec![Instruction::plain(sizes[2]), Instruction::jump(2, next.clone())]);
        b.block(y.clone(), vec![Instruction::plain(sizes[3]), Instruction::cond(2, q.clone())]);
        let mut tail = vec![Instruction::plain(sizes[4])];
        cx.maybe_hot_call(&mut tail);
        b.block(p.clone(), tail);
        let to_x = cx.rng.gen_range(30..=70);
        b.weight(&e, &x, to_x);
        b.weight(&e, &y, 100 - to_x);
        let (bx, by) = (cx.bias(), cx.bias());
        b.weight(&x, &p, bx);
        b.weight(&x, &q, 100 - bx);
        b.weight(&y, &q, by);
        b.weight(&y, &p, 100 - by);
        b.weight(&q, &next, 1);
        b.weight(&p, &next, 1);
    }
    let body = cx.body();
    b.block("ret".into(), vec![Instruction::plain(body), Instruction::ret(1)]);
    b
}

fn hot_indices(n: usize, fraction: f64) -> Vec<usize> {
    let fraction = fraction.clamp(0.0, 1.0);
    let mut h = ((n as f64) * fraction).round() as usize;
    if fraction > 0.0 && n > 0 {
        h = h.max(1);
    }
    // spread evenly over the address space
    (0..h).map(|j| (2 * j + 1) * n / (2 * h)).collect()
}

/// Builds the program described by `spec`. Identical specs give identical
/// workloads.
pub fn generate_workload(spec: &WorkloadSpec) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.functions;
    let names: Vec<String> = (0..n).map(|i| format!("fn{i:04}")).collect();
    let hot_idx = hot_indices(n, spec.hot_fraction);
    let is_hot: Vec<bool> = (0..n).map(|i| hot_idx.contains(&i)).collect();
    let cold_names: Vec<String> = (0..n).filter(|&i| !is_hot[i]).map(|i| names[i].clone()).collect();

    let mut functions = Vec::with_capacity(n);
    let mut bias = FlowGraph::default();
    let mut addr = spec.text_base;
    for i in 0..n {
        let hot = is_hot[i];
        let later_hot: Vec<String> = hot_idx.iter().filter(|&&j| j > i).map(|&j| names[j].clone()).collect();
        let shape = match spec.shape {
            Shape::Mixed => [Shape::Diamond, Shape::Loop, Shape::Correlated][rng.gen_range(0..3)],
            s => s,
        };
        let cold_callees: Vec<String> = if hot { cold_names.clone() } else { Vec::new() };
        let mut cx = Ctx {
            rng: &mut rng,
            hot,
            hot_callees: &later_hot,
            cold_callees: &cold_callees,
        };
        let b = match shape {
            Shape::Diamond | Shape::Mixed => diamond_function(&mut cx),
            Shape::Loop => loop_function(&mut cx),
            Shape::Correlated => correlated_function(&mut cx),
        };
        let entry_weight = if hot { rng.gen_range(1..=10) } else { 0 };
        let func = Function::new(names[i].clone(), addr, b.blocks);
        addr = func.end().next_multiple_of(FUNCTION_ALIGN);
        if hot {
            let cfg = func.cfg();
            let mut ff = FunctionFlow {
                entry_count: entry_weight,
                ..FunctionFlow::default()
            };
            for (s, d, w) in b.weights {
                let (si, di) = (cfg.index_of(&s).expect("built"), cfg.index_of(&d).expect("built"));
                let kind = cfg.edge_kind(si, di).expect("weights follow the CFG");
                ff.edges.insert((s, d), EdgeCount { count: w, mispreds: 0, kind });
            }
            bias.functions.insert(func.name.clone(), ff);
        }
        functions.push(func);
    }
    let model = ProgramModel::new(functions);
    debug_assert!(model.validate().is_ok());
    Workload {
        model,
        bias,
        hot: hot_idx.into_iter().map(|i| names[i].clone()).collect(),
    }
}
