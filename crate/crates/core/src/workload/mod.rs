//! Expert-popularity sampling and routing traces.

mod dirichlet;
mod routing;
mod skew;

pub use dirichlet::{sample_popularity, PopularityVector};
pub use routing::{active_expert_stats, gen_routing_trace, ActiveStats, Drift, IterationRouting, RoutedToken, RoutingTrace, TraceOptions};
pub use skew::{alpha_for_skew, expected_skewness, hhi, skewness, Concentration};
