pub mod adversarial;
pub mod approx;
pub mod demos;
pub mod envs;
pub mod error;
pub mod group;
pub mod harness;
pub mod marl;
pub mod tabular;

pub use error::{Error, Result};
pub use group::{dihedral_elements, GroupElement, StructuredVector};
