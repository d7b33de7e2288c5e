//! 64×64 heat maps of fetched code bytes.

use std::fmt::Write as _;

use super::cache::Fetch;
use crate::model::ProgramModel;
use crate::passes::LayoutPlan;
use crate::trace::IpSample;

pub const GRID: usize = 64;
pub const CELLS: usize = GRID * GRID;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub base: u64,
    pub text_size: u64,
    pub bytes_per_cell: u64,
    /// Bytes fetched per cell, row-major.
    fetched: Vec<u64>,
}

impl HeatMap {
    pub fn new(base: u64, text_size: u64) -> Self {
        let text_size = text_size.max(1);
        HeatMap {
            base,
            text_size,
            bytes_per_cell: text_size.div_ceil(CELLS as u64),
            fetched: vec![0; CELLS],
        }
    }

    /// Covers the span of `model`'s functions.
    pub fn for_model(model: &ProgramModel) -> Self {
        Self::new(model.text_base(), model.total_text_size())
    }

    /// Covers every placed block, hot and cold, and the gap between.
    pub fn for_plan(plan: &LayoutPlan) -> Self {
        let lo = plan.blocks.iter().map(|b| b.address).min().unwrap_or(0);
        let hi = plan.blocks.iter().map(|b| b.end()).max().unwrap_or(0);
        Self::new(lo, hi.saturating_sub(lo))
    }

    /// Counts `len` bytes from `addr`; bytes outside the text are dropped.
    pub fn add_range(&mut self, addr: u64, len: u64) {
        let end = addr.saturating_add(len).min(self.base + self.text_size);
        let mut a = addr.max(self.base);
        while a < end {
            let off = a - self.base;
            let cell = (off / self.bytes_per_cell) as usize;
            let cell_end = self.base + (cell as u64 + 1) * self.bytes_per_cell;
            let stop = cell_end.min(end);
            self.fetched[cell] += stop - a;
            a = stop;
        }
    }

    pub fn add_fetches(&mut self, fetches: &[Fetch]) {
        for f in fetches {
            self.add_range(f.address, f.len);
        }
    }

    /// Adds the bytes of the instruction under every sample.
    pub fn add_samples(&mut self, model: &ProgramModel, samples: &[IpSample]) {
        for s in samples {
            if let Some(loc) = model.resolve(s.ip) {
                let b = &model.functions[loc.function].blocks[loc.block];
                let start = b.address + loc.instruction_offset;
                self.add_range(start, b.instructions[loc.instruction].size as u64);
            }
        }
    }

    pub fn fetched_bytes(&self) -> u64 {
        self.fetched.iter().sum()
    }

    /// Mean fetches per byte of cell `(y, x)`, before the logarithm.
    pub fn raw(&self, y: usize, x: usize) -> f64 {
        self.fetched[y * GRID + x] as f64 / self.bytes_per_cell as f64
    }

    pub fn value(&self, y: usize, x: usize) -> f64 {
        self.raw(y, x).ln_1p()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..GRID {
            for x in 0..GRID {
                if x > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{:.4}", self.value(y, x));
            }
            out.push('\n');
        }
        out
    }

    /// Binary graymap, brightest cell at 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{GRID} {GRID}\n255\n").into_bytes();
        let max = (0..CELLS)
            .map(|i| self.value(i / GRID, i % GRID))
            .fold(0.0f64, f64::max);
        for i in 0..CELLS {
            let v = self.value(i / GRID, i % GRID);
            let px = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            out.push(px);
        }
        out
    }
}
