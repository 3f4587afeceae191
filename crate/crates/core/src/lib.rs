//! Constraint energy minimizing multiscale discontinuous Galerkin solver for
//! high-contrast Darcy flow and acoustic wave propagation.

pub mod aux_spectral;
pub mod cem_basis;
pub mod cli;
pub mod darcy_driver;
pub mod dg_assembly;
pub mod element;
pub mod error;
pub mod grids;
pub mod linalg;
pub mod msfem_pou;
pub mod perm_field;
pub mod wave_driver;

pub use error::{CemError, Result};
