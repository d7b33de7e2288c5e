use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use postlink::eval::{
    dyno_stats, expand_fetches, format_breakdown, format_comparison, format_dyno, format_dyno_delta, hot_span, measure,
    report_bad_layout, simulate_icache, CacheConfig, HeatMap, LayoutMetrics, Scenario,
};
use postlink::model::{parse_model, serialize_model, ProgramModel};
use postlink::passes::{parse_plan, run_pipeline, serialize_plan, LayoutPlan, PipelineConfig, PipelineProfile};
use postlink::profile::{
    attribute_lbr, attribute_samples, build_call_graph_no_lbr, infer_edges_from_counts, reconcile_flow,
    serialize_profile, FlowGraph,
};
use postlink::trace::{parse_trace, render_trace, Trace};
use postlink::workload::{generate_workload, WorkloadSpec};

use crate::args::{parse_pass_string, CompareArgs, GenArgs, HeatmapArgs, Inputs, Mode, OptimizeArgs, StatsArgs};
use crate::stage;

struct Loaded {
    model: ProgramModel,
    trace: Trace,
}

fn read(path: &Path) -> Result<String> {
    stage("read", fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    stage("write", fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display())))
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let model = stage("model", parse_model(&read(&inputs.model)?))?;
    let mut trace = Trace::default();
    for path in &inputs.traces {
        let t = parse_trace(&read(path)?);
        trace.stacks.extend(t.stacks);
        trace.samples.extend(t.samples);
        trace.skipped += t.skipped;
    }
    Ok(Loaded { model, trace })
}

/// Reconciled profile for `mode`. Branch-stack mode needs at least one stack;
/// sample mode ignores stacks and infers edges from block counts.
fn build_profile(model: &ProgramModel, trace: &Trace, mode: Mode) -> Result<PipelineProfile> {
    match mode {
        Mode::Lbr => {
            if trace.stacks.is_empty() {
                bail!("profile: lbr mode needs at least one L line in the trace");
            }
            let lbr = attribute_lbr(model, &trace.stacks);
            let (flow, _) = reconcile_flow(model, &lbr.flow);
            Ok(PipelineProfile {
                flow,
                calls: lbr.calls,
                call_sites: lbr.call_sites,
            })
        }
        Mode::Samples => {
            if trace.samples.is_empty() {
                bail!("profile: samples mode needs at least one S line in the trace");
            }
            let counts = attribute_samples(model, &trace.samples).counts;
            let (flow, _) = reconcile_flow(model, &infer_edges_from_counts(model, &counts));
            Ok(PipelineProfile {
                flow,
                calls: build_call_graph_no_lbr(model, &counts),
                call_sites: Default::default(),
            })
        }
    }
}

fn pipeline(model: &ProgramModel, profile: &PipelineProfile, config: &PipelineConfig) -> Result<postlink::passes::PipelineOutput> {
    stage("pipeline", run_pipeline(model, profile, config))
}

pub fn optimize(args: &OptimizeArgs) -> Result<()> {
    let Loaded { model, trace } = load(&args.inputs)?;
    let profile = build_profile(&model, &trace, args.passes.mode)?;
    let out = pipeline(&model, &profile, &args.passes.pipeline_config())?;

    stage("write", fs::create_dir_all(&args.out_dir).map_err(|e| format!("{}: {e}", args.out_dir.display())))?;
    write(&args.out_dir.join("optimized.txt"), serialize_model(&out.model))?;
    write(&args.out_dir.join("plan.txt"), serialize_plan(&out.plan))?;
    let log: String = out.log.iter().map(|e| format!("{e}\n")).collect();
    write(&args.out_dir.join("passes.log"), &log)?;
    print!("{log}");

    if args.dyno_stats {
        let identity = LayoutPlan::identity(&model, model.text_base());
        let before = stage("eval", dyno_stats(&model, &identity, &profile.flow))?;
        let after = stage("eval", dyno_stats(&out.model, &out.plan, &out.flow))?;
        let report = format_dyno_delta(&before, &after);
        write(&args.out_dir.join("dyno.txt"), &report)?;
        print!("{report}");
    }
    if let Some(path) = &args.emit_profile {
        write(path, serialize_profile(&profile.flow, &profile.calls))?;
    }
    if let Some(path) = &args.heatmap_out {
        if trace.stacks.is_empty() {
            bail!("heatmap: the optimized layout can only be mapped from L lines");
        }
        let mut heat = HeatMap::for_plan(&out.plan);
        heat.add_fetches(&expand_fetches(&model, &out.plan, &trace.stacks).0);
        write(path, heat.to_csv())?;
    }
    Ok(())
}

/// Baseline with every pass off, then one run per scenario.
type Breakdown = (LayoutMetrics, Vec<(Scenario, LayoutMetrics)>);

fn side_metrics(
    loaded: &Loaded,
    flags: &str,
    reference: Option<&FlowGraph>,
    breakdown: bool,
) -> Result<(LayoutMetrics, Option<Breakdown>)> {
    let passes = stage("args", parse_pass_string(flags).map_err(|e| first_line(&e.to_string())))?;
    let config = passes.pipeline_config();
    let profile = build_profile(&loaded.model, &loaded.trace, passes.mode)?;
    let reference = reference.unwrap_or(&profile.flow);
    let cache = CacheConfig::default();
    let run = |c: &PipelineConfig| -> Result<LayoutMetrics> {
        let out = pipeline(&loaded.model, &profile, c)?;
        stage("eval", measure(&loaded.model, &loaded.trace.stacks, &out, reference, &cache))
    };
    let main = run(&config)?;
    if !breakdown {
        return Ok((main, None));
    }
    let baseline = run(&PipelineConfig::default())?;
    let mut cols = Vec::new();
    for s in Scenario::ALL {
        cols.push((s, run(&s.config(&config))?));
    }
    Ok((main, Some((baseline, cols))))
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let loaded = load(&args.inputs)?;
    let reference = if loaded.trace.stacks.is_empty() {
        None
    } else {
        let lbr = attribute_lbr(&loaded.model, &loaded.trace.stacks);
        Some(reconcile_flow(&loaded.model, &lbr.flow).0)
    };
    let (a, a_parts) = side_metrics(&loaded, &args.a, reference.as_ref(), args.breakdown)?;
    let (b, b_parts) = side_metrics(&loaded, &args.b, reference.as_ref(), args.breakdown)?;
    print!("{}", format_comparison(&args.name_a, &a, &args.name_b, &b));
    for (name, parts) in [(&args.name_a, a_parts), (&args.name_b, b_parts)] {
        if let Some((baseline, cols)) = parts {
            println!();
            print!("{}", format_breakdown(name, &baseline, &cols));
        }
    }
    Ok(())
}

pub fn gen(args: &GenArgs) -> Result<()> {
    if args.functions == 0 {
        bail!("gen: --functions must be positive");
    }
    if !(0.0..=1.0).contains(&args.hot_fraction) {
        bail!("gen: --hot-fraction must lie in [0, 1]");
    }
    if !(0.0..=1.0).contains(&args.sample_rate) {
        bail!("gen: --sample-rate must lie in [0, 1]");
    }
    let w = generate_workload(&WorkloadSpec::new(args.functions, args.hot_fraction, args.shape, args.seed));
    let t = w.trace(args.seed, args.stacks, args.sample_rate);
    stage("write", fs::create_dir_all(&args.out_dir).map_err(|e| format!("{}: {e}", args.out_dir.display())))?;
    write(&args.out_dir.join("model.txt"), serialize_model(&w.model))?;
    write(&args.out_dir.join("trace.txt"), render_trace(&t.stacks, &t.samples))?;
    println!(
        "{} functions ({} hot), {} stacks, {} samples",
        w.model.functions.len(),
        w.hot.len(),
        t.stacks.len(),
        t.samples.len()
    );
    Ok(())
}

pub fn heatmap(args: &HeatmapArgs) -> Result<()> {
    let Loaded { model, trace } = load(&args.inputs)?;
    let plan = match &args.plan {
        Some(p) => Some(stage("plan", parse_plan(&read(p)?))?),
        None => None,
    };
    let heat = match (&plan, trace.stacks.is_empty()) {
        (Some(plan), false) => {
            let mut h = HeatMap::for_plan(plan);
            h.add_fetches(&expand_fetches(&model, plan, &trace.stacks).0);
            h
        }
        (Some(_), true) => bail!("heatmap: mapping onto a plan needs L lines"),
        (None, false) => {
            let identity = LayoutPlan::identity(&model, model.text_base());
            let mut h = HeatMap::for_model(&model);
            h.add_fetches(&expand_fetches(&model, &identity, &trace.stacks).0);
            h
        }
        (None, true) => {
            let mut h = HeatMap::for_model(&model);
            h.add_samples(&model, &trace.samples);
            h
        }
    };
    write(&args.out, heat.to_csv())?;
    if let Some(p) = &args.pgm {
        write(p, heat.to_pgm())?;
    }
    Ok(())
}

pub fn stats(args: &StatsArgs) -> Result<()> {
    let Loaded { model, trace } = load(&args.inputs)?;
    let profile = build_profile(&model, &trace, args.mode)?;
    let plan = LayoutPlan::identity(&model, model.text_base());
    let blocks: usize = model.functions.iter().map(|f| f.blocks.len()).sum();
    let mut out = String::new();
    let _ = writeln!(out, "functions: {}", model.functions.len());
    let _ = writeln!(out, "blocks: {blocks}");
    let _ = writeln!(out, "text bytes: {}", model.total_text_size());
    let _ = writeln!(out, "stacks: {}", trace.stacks.len());
    let _ = writeln!(out, "samples: {}", trace.samples.len());
    let _ = writeln!(out, "skipped trace lines: {}", trace.skipped);
    if args.mode == Mode::Lbr {
        let s = attribute_lbr(&model, &trace.stacks).stats;
        let _ = writeln!(out, "dropped entries: {}", s.dropped_entries);
        let _ = writeln!(out, "dropped paths: {}", s.dropped_paths);
    } else {
        let _ = writeln!(out, "dropped samples: {}", attribute_samples(&model, &trace.samples).dropped);
    }
    out.push_str(&format_dyno(&stage("eval", dyno_stats(&model, &plan, &profile.flow))?));
    let cache = stage("eval", simulate_icache(&model, &plan, &trace.stacks, &CacheConfig::default()))?;
    let _ = writeln!(out, "i-cache misses: {}", cache.icache_misses);
    let _ = writeln!(out, "i-TLB misses: {}", cache.itlb_misses);
    let _ = writeln!(out, "hot span (99%): {}", hot_span(&plan, &profile.flow, 0.99));
    let bad = report_bad_layout(&plan, &profile.flow, 1);
    let _ = writeln!(out, "bad layouts: {}", bad.len());
    for b in &bad {
        let _ = writeln!(out, "  {b}");
    }
    print!("{out}");
    Ok(())
}

pub fn first_line(s: &str) -> String {
    s.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}
