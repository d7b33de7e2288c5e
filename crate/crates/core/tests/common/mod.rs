#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use postlink::model::{BasicBlock, EdgeKind, Function, Instruction, ProgramModel};
use postlink::profile::{EdgeCount, FlowGraph, FunctionFlow};

#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub max_functions: usize,
    pub max_blocks: usize,
    pub calls: bool,
    /// Allow indirect jumps, indirect calls and empty blocks.
    pub exotic: bool,
}

impl ModelShape {
    pub fn small() -> Self {
        ModelShape {
            max_functions: 6,
            max_blocks: 8,
            calls: true,
            exotic: true,
        }
    }
}

fn terminator(rng: &mut ChaCha8Rng, i: usize, n: usize, exotic: bool, out: &mut Vec<Instruction>) {
    let label = |k: usize| format!("b{k}");
    let last = i + 1 == n;
    let not_next = |rng: &mut ChaCha8Rng| loop {
        let t = rng.gen_range(0..n);
        if t != i + 1 {
            break t;
        }
    };
    let pick = rng.gen_range(0..if exotic { 7 } else { 5 });
    match pick {
        0 if !last => {}
        1 if !last && n > 1 => {
            let t = not_next(rng);
            out.push(Instruction::cond(2, label(t)));
        }
        2 if n > 1 => {
            let t = rng.gen_range(0..n);
            out.push(Instruction::jump(2, label(t)));
        }
        3 if n > 2 => {
            let t = not_next(rng);
            let mut u = rng.gen_range(0..n);
            while u == t {
                u = rng.gen_range(0..n);
            }
            out.push(Instruction::cond(2, label(t)));
            out.push(Instruction::jump(2, label(u)));
        }
        5 => {
            let k = rng.gen_range(1..=n.min(4));
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            let table = all[..k].iter().map(|&t| label(t)).collect();
            out.push(Instruction::ijmp(2, Some(table)));
        }
        6 if !last => {
            out.push(Instruction::icall(3));
        }
        _ => out.push(Instruction::ret(1)),
    }
}

/// A valid random model; calls only go to later functions.
pub fn random_model(rng: &mut ChaCha8Rng, shape: ModelShape) -> ProgramModel {
    let nf = rng.gen_range(1..=shape.max_functions);
    let mut functions = Vec::with_capacity(nf);
    let mut addr = 0x1000u64;
    for fi in 0..nf {
        let n = rng.gen_range(1..=shape.max_blocks);
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let mut ins = Vec::new();
            let empty = shape.exotic && i + 1 < n && rng.gen_bool(0.05);
            if !empty {
                for _ in 0..rng.gen_range(1..=3) {
                    ins.push(Instruction::plain(rng.gen_range(1..=8)));
                }
                if shape.exotic && rng.gen_bool(0.1) {
                    ins.push(Instruction::nop(rng.gen_range(1..=4)));
                }
                if shape.calls && fi + 1 < nf && rng.gen_bool(0.15) {
                    let callee = rng.gen_range(fi + 1..nf);
                    ins.push(Instruction::call(5, format!("f{callee}")));
                    ins.push(Instruction::plain(1));
                }
                terminator(rng, i, n, shape.exotic, &mut ins);
            }
            blocks.push(BasicBlock::new(format!("b{i}"), ins));
        }
        let f = Function::new(format!("f{fi}"), addr, blocks);
        addr = f.end() + rng.gen_range(0..32);
        functions.push(f);
    }
    let m = ProgramModel::new(functions);
    m.validate().expect("generator emits valid models");
    m
}

/// Flow over `f`'s CFG with `count(src, dst)` on every edge; block counts are
/// the larger of inflow and outflow.
pub fn flow_with(f: &Function, entry: u64, mut count: impl FnMut(usize, usize) -> u64) -> FunctionFlow {
    let cfg = f.cfg();
    let mut ff = FunctionFlow {
        entry_count: entry,
        ..FunctionFlow::default()
    };
    let mut inflow = vec![0u64; cfg.len()];
    let mut outflow = vec![0u64; cfg.len()];
    inflow[0] = entry;
    for (s, succs) in cfg.succs.iter().enumerate() {
        for &(t, kind) in succs {
            let c = count(s, t);
            inflow[t] += c;
            outflow[s] += c;
            ff.edges.insert(
                (f.blocks[s].label.clone(), f.blocks[t].label.clone()),
                EdgeCount { count: c, mispreds: 0, kind },
            );
        }
    }
    for (b, block) in f.blocks.iter().enumerate() {
        ff.block_counts.insert(block.label.clone(), inflow[b].max(outflow[b]));
    }
    ff
}

/// Random positive weight on every CFG edge and on every function entry.
pub fn random_bias(rng: &mut ChaCha8Rng, model: &ProgramModel) -> FlowGraph {
    let mut g = FlowGraph::default();
    for f in &model.functions {
        let entry = rng.gen_range(1..=10);
        let ff = flow_with(f, entry, |_, _| rng.gen_range(1..=100));
        g.functions.insert(f.name.clone(), ff);
    }
    g
}

/// Random counts on every CFG edge of `f`, zero included.
pub fn random_function_flow(rng: &mut ChaCha8Rng, f: &Function) -> FunctionFlow {
    flow_with(f, 1, |_, _| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..=1000) })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Taken-edge counts keyed by (function, src, dst).
pub fn taken_edges(flow: &FlowGraph) -> Vec<((String, String, String), u64)> {
    let mut v = Vec::new();
    for (f, ff) in &flow.functions {
        for ((s, d), e) in &ff.edges {
            if e.kind == EdgeKind::Taken && e.count > 0 {
                v.push(((f.clone(), s.clone(), d.clone()), e.count));
            }
        }
    }
    v
}

/// Named text artifacts of one fixed end-to-end run, compared byte for byte
/// against `tests/golden/`.
pub fn golden_outputs() -> Vec<(&'static str, String)> {
    use postlink::eval::{dyno_stats, expand_fetches, format_dyno_delta, HeatMap};
    use postlink::model::serialize_model;
    use postlink::passes::{run_pipeline, serialize_plan, LayoutPlan, PipelineConfig, PipelineProfile};
    use postlink::profile::{attribute_lbr, reconcile_flow, serialize_profile};
    use postlink::trace::render_trace;
    use postlink::workload::{generate_workload, Shape, WorkloadSpec};

    let w = generate_workload(&WorkloadSpec::new(12, 0.25, Shape::Mixed, 42));
    let t = w.trace(42, 40, 0.01);
    let lbr = attribute_lbr(&w.model, &t.stacks);
    let (flow, _) = reconcile_flow(&w.model, &lbr.flow);
    let profile = PipelineProfile {
        flow: flow.clone(),
        calls: lbr.calls.clone(),
        call_sites: lbr.call_sites.clone(),
    };
    let out = run_pipeline(&w.model, &profile, &PipelineConfig::full()).expect("pipeline");
    let before = dyno_stats(&w.model, &LayoutPlan::identity(&w.model, w.model.text_base()), &flow).expect("dyno");
    let after = dyno_stats(&out.model, &out.plan, &out.flow).expect("dyno");
    let mut heat = HeatMap::for_plan(&out.plan);
    heat.add_fetches(&expand_fetches(&w.model, &out.plan, &t.stacks).0);
    vec![
        ("model.txt", serialize_model(&w.model)),
        ("trace.txt", render_trace(&t.stacks, &t.samples)),
        ("profile.txt", serialize_profile(&flow, &lbr.calls)),
        ("optimized.txt", serialize_model(&out.model)),
        ("plan.txt", serialize_plan(&out.plan)),
        ("dyno.txt", format_dyno_delta(&before, &after)),
        ("heatmap.csv", heat.to_csv()),
    ]
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Names of artifacts that differ from their golden file. With
/// `UPDATE_GOLDEN=1` the golden files are rewritten instead.
pub fn golden_mismatches() -> Vec<String> {
    let dir = golden_dir();
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let mut bad = Vec::new();
    for (name, text) in golden_outputs() {
        let path = dir.join(name);
        if update {
            std::fs::create_dir_all(&dir).expect("golden dir");
            std::fs::write(&path, &text).expect("write golden");
            continue;
        }
        match std::fs::read_to_string(&path) {
            Ok(expected) if expected == text => {}
            _ => bad.push(name.to_string()),
        }
    }
    bad
}
