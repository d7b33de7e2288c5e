//! Measuring a layout: branch statistics, cache and TLB behavior, heat maps
//! and layout diagnostics.

pub mod cache;
pub mod compare;
pub mod dyno;
pub mod heatmap;
pub mod report;

pub use cache::{expand_fetches, simulate_fetches, simulate_icache, CacheConfig, CacheStats, Fetch};
pub use compare::{format_breakdown, format_comparison, layout_fallthrough, measure, LayoutMetrics, Scenario};
pub use dyno::{dyno_stats, format_dyno, format_dyno_delta, DynoStats, ROW_NAMES};
pub use heatmap::HeatMap;
pub use report::{hot_span, report_bad_layout, BadLayout};
