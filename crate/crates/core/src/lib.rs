//! Shapley cost-sharing broadcast games on metric graphs: routing dynamics,
//! online dual charging and lower-bound instance generators.

pub mod dual;
pub mod dynamics;
pub mod experiment;
pub mod instances;
pub mod metric;
pub mod par;
pub mod rational;
pub mod routing;

pub use metric::{MetricInstance, VertexId};
pub use rational::Rational;
pub use routing::RoutingState;
