//! Core data model: time grids, path ensembles, process tables, drivers, free terms,
//! weight profiles and concavity moduli.
//!
//! Everything downstream (path generation, regression, the solvers, diagnostics) is written
//! against these types; they own all validation so the numerics can assume clean inputs.

mod driver;
mod free_term;
mod grid;
mod modulus;
mod process;
mod weights;

pub use driver::{Coeff, CoeffSample, Driver, DriverKind, Kernel};
pub use free_term::{Feature, FreeTerm, FreeTermKind};
pub use grid::TimeGrid;
pub use modulus::{f_example, standard_moduli, Modulus};
pub use process::{
    DomainMode, PathEnsemble, PathRef, Process1P, Process2P, DEFAULT_MEMORY_BUDGET_BYTES,
};
pub use weights::{build_weight_profile, WeightMode, WeightProfile};
