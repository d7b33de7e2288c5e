//! Hot/cold splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::reorder::Section;
use crate::error::PassError;
use crate::model::Function;
use crate::profile::FunctionFlow;

pub const DEFAULT_SPLIT_THETA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SplitMode {
    #[default]
    None,
    ColdOnly,
    /// Also moves blocks whose count is below `theta` times the hottest block.
    Aggressive(f64),
}

impl FromStr for SplitMode {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "0" => Ok(SplitMode::None),
            "cold" | "cold-only" => Ok(SplitMode::ColdOnly),
            "aggressive" => Ok(SplitMode::Aggressive(DEFAULT_SPLIT_THETA)),
            other => Err(PassError::BadOption {
                option: "split-functions".into(),
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::None => f.write_str("none"),
            SplitMode::ColdOnly => f.write_str("cold"),
            SplitMode::Aggressive(t) => write!(f, "aggressive({t})"),
        }
    }
}

/// Assigns every block of `func` to a section. The entry block is always hot
/// and non-simple functions are never split.
pub fn split_function(
    func: &Function,
    flow: Option<&FunctionFlow>,
    mode: SplitMode,
) -> BTreeMap<String, Section> {
    let count = |l: &str| flow.map_or(0, |f| f.block_count(l));
    let max = func.blocks.iter().map(|b| count(&b.label)).max().unwrap_or(0);
    let enabled = mode != SplitMode::None && func.simple && max > 0;
    func.blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let c = count(&b.label);
            let cold = enabled
                && i != 0
                && match mode {
                    SplitMode::None => false,
                    SplitMode::ColdOnly => c == 0,
                    SplitMode::Aggressive(theta) => c == 0 || (c as f64) < theta * max as f64,
                };
            let section = if cold { Section::Cold } else { Section::Hot };
            (b.label.clone(), section)
        })
        .collect()
}
