//! Scaling limits of multiscale stochastic reaction networks, with and without
//! spatial structure.
//!
//! The crate reads a network with abundance and rate exponents, classifies its time
//! scales, builds the reduced limit model with averaged rates and checks the
//! reduction against exact stochastic simulation.
//!
//! ```
//! use mscrn::{parse_model, classify};
//!
//! let model = parse_model("\
//! species A alpha=1
//! species B alpha=0
//! A + B -> 0 @ mass_action(1) beta=1
//! 0 -> B @ mass_action(1) beta=1
//! B -> 0 @ mass_action(1) beta=1
//! ").unwrap();
//! let cls = classify(&model).unwrap();
//! assert_eq!(cls.class.name(), "two-scale");
//! ```

pub mod analysis;
pub mod averaging;
pub mod error;
pub mod ensemble;
pub mod expr;
pub mod model;
pub mod parser;
pub mod pdmp;
pub mod reduce;
pub mod ssa;
pub mod symbolic;
pub mod verify;

pub use analysis::{
    classify, conserved_basis, movement_as_reactions, spatial_case, spatial_case_for, ConservedBasis, ScaleClass,
    ScaleClassification, SpatialCase,
};
pub use averaging::{
    averaged_rate_single_scale, averaged_rate_spatial, averaged_rate_three_scale, averaged_rate_two_scale,
    mass_action_avg_kappa, movement_equilibrium, product_measure, stationary_fast, AveragedRate, AveragingOptions,
    Estimate, McConfig, Mode, RateKind, StationaryMeasure,
};
pub use averaging::nonspatial::simulate_conditional_fast;
pub use error::{Error, Result};
pub use model::{Model, State};
pub use parser::{parse_model, serialize_model, serialize_reduced};
pub use pdmp::{run_pdmp, simulate_pdmp, HybridSystem, OdeConfig, PdmpOptions};
pub use reduce::{build_limit_system, build_reduced_model, ReduceOptions, ReducedModel};
pub use ssa::{simulate, simulate_spatial, SsaConfig, Trajectory};
pub use verify::{verify_convergence, VerifyOptions, VerifyReport};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/averaging.md")]
    mod averaging {}
    #[doc = include_str!("../../../book/src/spatial.md")]
    mod spatial {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
