//! Distributed virtual resource allocation for virtualized small-cell
//! networks whose small cells are backhauled in-band over full duplex.
//!
//! The crate builds network instances ([`scenario`]), evaluates link rates
//! ([`rates`]) and utilities ([`utility`]), and solves the association and
//! resource allocation problem: a convex relaxation at fixed spectrum split
//! ([`relaxed`]) solved by consensus ADMM across InPs ([`admm`]), wrapped in
//! an outer loop over the spectrum split ([`alpha`]). A brute-force solver
//! ([`oracle`]) validates small instances, and [`harness`] drives sweeps.

pub mod admm;
pub mod alpha;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod rates;
pub mod relaxed;
mod roots;
pub mod scenario;
pub mod utility;

pub use admm::{run_admm, run_admm_from, solve_centralized, AdmmConfig, SolveReport, Termination};
pub use alpha::{run_algorithm2, solve_alpha, OuterConfig, OuterReport};
pub use oracle::{brute_force, AlphaGrid, OracleGrid, OracleResult};
pub use error::{Error, Result};
pub use rates::{build_rate_table, RateTable};
pub use relaxed::{AllocationPoint, RelaxedProblem, Scheme};
pub use scenario::{generate_scenario, Scenario, ScenarioConfig};
pub use utility::{BackhaulPricing, UtilityBreakdown};
