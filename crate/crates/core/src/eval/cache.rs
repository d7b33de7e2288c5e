//! Trace-driven instruction cache and TLB model.

use std::collections::HashMap;

use crate::error::EvalError;
use crate::model::ProgramModel;
use crate::passes::LayoutPlan;
use crate::trace::LbrStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub cache_size: u64,
    pub line_size: u64,
    pub associativity: u64,
    pub page_size: u64,
    pub tlb_entries: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            cache_size: 32 * 1024,
            line_size: 64,
            associativity: 8,
            page_size: 4096,
            tlb_entries: 128,
        }
    }
}

impl CacheConfig {
    pub fn sets(&self) -> u64 {
        self.cache_size / (self.line_size * self.associativity)
    }

    pub fn is_valid(&self) -> bool {
        let pow2 = |x: u64| x.is_power_of_two();
        pow2(self.cache_size)
            && pow2(self.line_size)
            && pow2(self.page_size)
            && self.associativity >= 1
            && self.tlb_entries >= 1
            && self.cache_size >= self.line_size * self.associativity
            && self.cache_size.is_multiple_of(self.line_size * self.associativity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub icache_misses: u64,
    pub itlb_misses: u64,
    pub line_accesses: u64,
    pub fetched_bytes: u64,
    /// Straight-line segments that could not be mapped to the layout.
    pub skipped_segments: u64,
}

/// A contiguous run of fetched bytes in final addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fetch {
    pub address: u64,
    pub len: u64,
}

/// LRU cache of tags, either set-associative or fully associative.
struct Lru {
    sets: Vec<Vec<u64>>,
    ways: usize,
    last: HashMap<u64, u64>,
    fully: bool,
    clock: u64,
}

impl Lru {
    fn new(sets: u64, ways: u64) -> Self {
        Lru {
            sets: vec![Vec::new(); sets as usize],
            ways: ways as usize,
            last: HashMap::new(),
            fully: false,
            clock: 0,
        }
    }

    fn fully_associative(entries: u64) -> Self {
        Lru {
            fully: true,
            ..Lru::new(1, entries)
        }
    }

    /// Returns whether `tag` missed.
    fn access(&mut self, tag: u64) -> bool {
        if self.fully {
            self.clock += 1;
            if let Some(t) = self.last.get_mut(&tag) {
                *t = self.clock;
                return false;
            }
            if self.last.len() == self.ways {
                let victim = *self.last.iter().min_by_key(|(_, &t)| t).expect("full").0;
                self.last.remove(&victim);
            }
            self.last.insert(tag, self.clock);
            return true;
        }
        let n = self.sets.len() as u64;
        let set = &mut self.sets[(tag % n) as usize];
        if let Some(pos) = set.iter().position(|&t| t == tag) {
            let t = set.remove(pos);
            set.insert(0, t);
            false
        } else {
            if set.len() == self.ways {
                set.pop();
            }
            set.insert(0, tag);
            true
        }
    }
}

/// Expands branch stacks into the byte ranges executed between consecutive
/// records, in final addresses. Blocks are looked up in `plan` by the
/// function and label they have in `model`, the model the trace was
/// recorded against. Returns the fetches and the number of segments that
/// could not be mapped.
pub fn expand_fetches(model: &ProgramModel, plan: &LayoutPlan, stacks: &[LbrStack]) -> (Vec<Fetch>, u64) {
    let mut fetches = Vec::new();
    let mut skipped = 0;
    for stack in stacks {
        let mut landing = None;
        for entry in stack.entries.iter().rev() {
            let src = model.resolve(entry.from);
            if let (Some(land), Some(src)) = (landing, src) {
                if !segment(model, plan, land, src, &mut fetches) {
                    skipped += 1;
                }
            }
            landing = model.resolve(entry.to);
        }
    }
    (fetches, skipped)
}

fn segment(
    model: &ProgramModel,
    plan: &LayoutPlan,
    land: crate::model::Location,
    src: crate::model::Location,
    out: &mut Vec<Fetch>,
) -> bool {
    if land.function != src.function || land.block > src.block {
        return false;
    }
    let f = &model.functions[land.function];
    if (land.block..src.block).any(|b| f.fallthrough(b) != Some(b + 1)) {
        return false;
    }
    let src_block = &f.blocks[src.block];
    let src_end = src.instruction_offset + src_block.instructions[src.instruction].size as u64;
    if land.block == src.block && land.byte_offset > src_end {
        return false;
    }
    let mut pieces = Vec::with_capacity(src.block - land.block + 1);
    for b in land.block..=src.block {
        let Some(p) = plan.block(&f.name, &f.blocks[b].label) else {
            return false;
        };
        let start = if b == land.block { land.byte_offset.min(p.size) } else { 0 };
        let end = if b == src.block { src_end.min(p.size) } else { p.size };
        if end > start {
            pieces.push(Fetch {
                address: p.address + start,
                len: end - start,
            });
        }
    }
    out.extend(pieces);
    true
}

/// Feeds `fetches` line by line through the i-cache and the i-TLB. Panics on
/// an invalid configuration.
pub fn simulate_fetches(fetches: &[Fetch], cfg: &CacheConfig) -> CacheStats {
    assert!(cfg.is_valid(), "invalid cache configuration {cfg:?}");
    let mut icache = Lru::new(cfg.sets(), cfg.associativity);
    let mut itlb = Lru::fully_associative(cfg.tlb_entries);
    let mut stats = CacheStats::default();
    for f in fetches {
        stats.fetched_bytes += f.len;
        let first = f.address / cfg.line_size;
        let last = (f.address + f.len - 1) / cfg.line_size;
        for line in first..=last {
            stats.line_accesses += 1;
            if icache.access(line) {
                stats.icache_misses += 1;
            }
            if itlb.access(line * cfg.line_size / cfg.page_size) {
                stats.itlb_misses += 1;
            }
        }
    }
    stats
}

pub fn simulate_icache(
    model: &ProgramModel,
    plan: &LayoutPlan,
    stacks: &[LbrStack],
    cfg: &CacheConfig,
) -> Result<CacheStats, EvalError> {
    if !cfg.is_valid() {
        return Err(EvalError::BadCacheConfig(format!("{cfg:?}")));
    }
    let (fetches, skipped) = expand_fetches(model, plan, stacks);
    let mut stats = simulate_fetches(&fetches, cfg);
    stats.skipped_segments = skipped;
    Ok(stats)
}
