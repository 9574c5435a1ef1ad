//! Stochastic control barrier functions from the dominant eigenpair of the
//! killed-diffusion semigroup.

pub mod filter;
pub mod grid;
pub mod montecarlo;
pub mod semigroup;
pub mod spectral;
pub mod systems;
