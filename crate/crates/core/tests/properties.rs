mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{random_bias, random_function_flow, random_model, rng, ModelShape};
use postlink::eval::{dyno_stats, simulate_fetches, CacheConfig, Fetch};
use postlink::model::{parse_model, serialize_model, InstrKind, ProgramModel};
use postlink::passes::{
    assign_addresses, fixup_branches, reorder_blocks, BlockAlgorithm, BlockOrder, LayoutPlan, Section,
};
use postlink::profile::{
    attribute_lbr, infer_edges_from_counts, parse_profile, reconcile_flow, serialize_profile, BlockCounts, FlowGraph,
};
use postlink::trace::{generate_trace, parse_trace, render_trace, GenerateOptions, IpSample, LbrEntry, LbrStack};

fn model_for(seed: u64) -> ProgramModel {
    random_model(&mut rng(seed), ModelShape::small())
}

fn traced(seed: u64) -> (ProgramModel, FlowGraph, postlink::trace::GeneratedTrace) {
    let mut r = rng(seed);
    let m = random_model(&mut r, ModelShape::small());
    let bias = random_bias(&mut r, &m);
    let opts = GenerateOptions {
        sample_rate: 0.05,
        ..GenerateOptions::default()
    };
    let t = generate_trace(&m, &bias, seed, 60, 32, &opts);
    (m, bias, t)
}

fn balanced_fallthrough_blocks(m: &ProgramModel, flow: &FlowGraph) -> bool {
    m.functions.iter().all(|f| {
        let cfg = f.cfg();
        let Some(ff) = flow.function(&f.name) else {
            return true;
        };
        let l = |i: usize| f.blocks[i].label.as_str();
        (0..cfg.len()).filter(|&b| cfg.fallthrough_succ(b).is_some()).all(|b| {
            let entry = if b == 0 { ff.entry_count } else { 0 };
            let inflow = entry + cfg.preds[b].iter().map(|&(p, _)| ff.edge(l(p), l(b))).sum::<u64>();
            let outflow: u64 = cfg.succs[b].iter().map(|&(s, _)| ff.edge(l(b), l(s))).sum();
            inflow == outflow
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_text_round_trips(seed in any::<u64>()) {
        let m = model_for(seed);
        let text = serialize_model(&m);
        let back = parse_model(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(serialize_model(&back), text);
    }

    #[test]
    fn every_instruction_byte_resolves_to_its_instruction(seed in any::<u64>()) {
        let m = model_for(seed);
        for (fi, f) in m.functions.iter().enumerate() {
            for (bi, b) in f.blocks.iter().enumerate() {
                for (ii, off) in b.instruction_offsets().enumerate() {
                    for k in 0..b.instructions[ii].size as u64 {
                        let loc = m.resolve(b.address + off + k).unwrap();
                        prop_assert_eq!((loc.function, loc.block, loc.instruction), (fi, bi, ii));
                        prop_assert_eq!(loc.instruction_offset, off);
                    }
                }
            }
            if fi + 1 < m.functions.len() {
                for a in f.end()..m.functions[fi + 1].address {
                    prop_assert!(m.resolve(a).is_none());
                }
            }
        }
        prop_assert!(m.resolve(m.functions.last().unwrap().end()).is_none());
    }

    #[test]
    fn stripping_nops_is_idempotent(seed in any::<u64>()) {
        let m = model_for(seed);
        let once = m.strip_nops();
        prop_assert_eq!(once.strip_nops(), once.clone());
        prop_assert!(once.functions.iter().flat_map(|f| &f.blocks).flat_map(|b| &b.instructions).all(|i| i.kind != InstrKind::Nop));
    }

    #[test]
    fn trace_text_round_trips(
        stacks in prop::collection::vec(prop::collection::vec((any::<u64>(), any::<u64>(), any::<bool>()), 1..=32), 0..8),
        samples in prop::collection::vec(any::<u64>(), 0..16),
    ) {
        let stacks: Vec<LbrStack> = stacks
            .into_iter()
            .map(|s| LbrStack { entries: s.into_iter().map(|(from, to, mispredicted)| LbrEntry { from, to, mispredicted }).collect() })
            .collect();
        let samples: Vec<IpSample> = samples.into_iter().map(|ip| IpSample { ip }).collect();
        let text = render_trace(&stacks, &samples);
        let t = parse_trace(&text);
        prop_assert_eq!(t.skipped, 0);
        prop_assert_eq!(&t.stacks, &stacks);
        prop_assert_eq!(&t.samples, &samples);
    }

    #[test]
    fn profile_text_round_trips(seed in any::<u64>()) {
        let (m, _, t) = traced(seed);
        let lbr = attribute_lbr(&m, &t.stacks);
        let (flow, _) = reconcile_flow(&m, &lbr.flow);
        let text = serialize_profile(&flow, &lbr.calls);
        let (f2, c2) = parse_profile(&text, &m).unwrap();
        prop_assert_eq!(serialize_profile(&f2, &c2), text);
    }

    #[test]
    fn reconciled_branch_stack_flow_is_conserved(seed in any::<u64>()) {
        let (m, _, t) = traced(seed);
        let (flow, _) = reconcile_flow(&m, &attribute_lbr(&m, &t.stacks).flow);
        prop_assert!(balanced_fallthrough_blocks(&m, &flow));
    }

    #[test]
    fn reconciliation_never_touches_measured_taken_edges(seed in any::<u64>()) {
        let (m, _, t) = traced(seed);
        let raw = attribute_lbr(&m, &t.stacks).flow;
        let (flow, _) = reconcile_flow(&m, &raw);
        prop_assert_eq!(common::taken_edges(&flow), common::taken_edges(&raw));
    }

    #[test]
    fn inference_splits_each_block_count_exactly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_model(&mut r, ModelShape::small());
        let mut counts = BlockCounts::new();
        for f in &m.functions {
            counts.insert(f.name.clone(), f.blocks.iter().map(|b| (b.label.clone(), r.gen_range(0..500u64))).collect());
        }
        let flow = infer_edges_from_counts(&m, &counts);
        for f in &m.functions {
            let cfg = f.cfg();
            let ff = flow.function(&f.name).unwrap();
            prop_assert!(ff.inferred);
            for (b, block) in f.blocks.iter().enumerate() {
                if cfg.succs[b].is_empty() {
                    continue;
                }
                let out: u64 = cfg.succs[b].iter().map(|&(s, _)| ff.edge(&block.label, &f.blocks[s].label)).sum();
                prop_assert_eq!(out, counts[&f.name][&block.label]);
            }
        }
        let (rec, _) = reconcile_flow(&m, &flow);
        prop_assert!(balanced_fallthrough_blocks(&m, &rec));
    }

    #[test]
    fn fixup_preserves_successor_sets(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_model(&mut r, ModelShape { max_functions: 3, max_blocks: 12, calls: false, exotic: true });
        for f in m.functions.iter().filter(|f| f.simple) {
            let mut rest: Vec<String> = f.blocks[1..].iter().map(|b| b.label.clone()).collect();
            rest.shuffle(&mut r);
            let mut labels = vec![f.blocks[0].label.clone()];
            labels.extend(rest);
            let sections: BTreeMap<String, Section> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), if i > 0 && r.gen_bool(0.3) { Section::Cold } else { Section::Hot }))
                .collect();
            let order = BlockOrder::from_labels(labels).with_sections(sections);
            let g = fixup_branches(f, &order).unwrap();
            let succ = |f: &postlink::model::Function| -> BTreeMap<String, BTreeSet<String>> {
                let cfg = f.cfg();
                f.blocks.iter().enumerate().map(|(i, b)| (b.label.clone(), cfg.succs[i].iter().map(|&(s, _)| f.blocks[s].label.clone()).collect())).collect()
            };
            prop_assert_eq!(succ(&g), succ(f));
            let got: Vec<&str> = g.blocks.iter().map(|b| b.label.as_str()).collect();
            let want: Vec<&str> = order.labels.iter().map(String::as_str).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn relaxation_only_grows_and_settles_quickly(seed in any::<u64>(), gap in 0u64..4096) {
        let mut r = rng(seed);
        let m = random_model(&mut r, ModelShape { max_functions: 4, max_blocks: 16, calls: true, exotic: false });
        let names: Vec<String> = m.functions.iter().map(|f| f.name.clone()).collect();
        let orders: BTreeMap<String, BlockOrder> = m.functions.iter().filter(|f| f.simple).map(|f| {
            let ff = random_function_flow(&mut r, f);
            let sections = f.blocks.iter().enumerate().map(|(i, b)| (b.label.clone(), if i > 0 && ff.block_count(&b.label) == 0 { Section::Cold } else { Section::Hot })).collect();
            (f.name.clone(), reorder_blocks(f, Some(&ff), BlockAlgorithm::Ph).with_sections(sections))
        }).collect();
        let fixed = ProgramModel::new(m.functions.iter().map(|f| orders.get(&f.name).map_or(f.clone(), |o| fixup_branches(f, o).unwrap())).collect());
        let plan = assign_addresses(&fixed, &names, &orders, 0x1000, None).unwrap();
        prop_assert!(plan.iterations <= plan.branch_sizes.len());
        prop_assert!(plan.branch_sizes.values().all(|&s| s == 2 || s == 5 || s == 6));
        // moving the cold section further away never shortens a branch
        let far = assign_addresses(&fixed, &names, &orders, 0x1000, Some(0x1000 + 0x10_0000 + gap)).unwrap();
        prop_assert!(far.iterations <= far.branch_sizes.len());
        let short = plan.branch_sizes.values().filter(|&&s| s == 2).count();
        let short_far = far.branch_sizes.values().filter(|&&s| s == 2).count();
        prop_assert!(short_far <= short);
    }

    #[test]
    fn doubling_the_cache_never_adds_misses(
        fetches in prop::collection::vec((0u64..1 << 20, 1u64..256), 1..400),
        ways in prop::sample::select(vec![1u64, 2, 4, 8]),
    ) {
        let f: Vec<Fetch> = fetches.into_iter().map(|(address, len)| Fetch { address, len }).collect();
        let small = CacheConfig { cache_size: 4096, associativity: ways, ..CacheConfig::default() };
        let big = CacheConfig { cache_size: 8192, ..small };
        let (a, b) = (simulate_fetches(&f, &small), simulate_fetches(&f, &big));
        prop_assert!(b.icache_misses <= a.icache_misses);
        prop_assert_eq!(a.line_accesses, b.line_accesses);
        let more_tlb = CacheConfig { tlb_entries: small.tlb_entries * 2, ..small };
        prop_assert!(simulate_fetches(&f, &more_tlb).itlb_misses <= a.itlb_misses);
    }

    #[test]
    fn dyno_counters_are_consistent(seed in any::<u64>()) {
        let (m, _, t) = traced(seed);
        let (flow, _) = reconcile_flow(&m, &attribute_lbr(&m, &t.stacks).flow);
        let s = dyno_stats(&m, &LayoutPlan::identity(&m, m.text_base()), &flow).unwrap();
        prop_assert!(s.identities_hold());
        prop_assert!(s.taken_branches <= s.total_branches);
    }

    #[test]
    fn block_orders_are_permutations_starting_at_entry(seed in any::<u64>(), algo in prop::sample::select(vec!["none", "ph", "cache+"])) {
        let mut r = rng(seed);
        let m = random_model(&mut r, ModelShape { max_functions: 3, max_blocks: 16, calls: false, exotic: true });
        let algo: BlockAlgorithm = algo.parse().unwrap();
        for f in &m.functions {
            let ff = random_function_flow(&mut r, f);
            let order = reorder_blocks(f, Some(&ff), algo);
            prop_assert_eq!(order.labels.first(), Some(&f.blocks[0].label));
            let mut got = order.labels.clone();
            got.sort();
            let mut want: Vec<String> = f.blocks.iter().map(|b| b.label.clone()).collect();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
