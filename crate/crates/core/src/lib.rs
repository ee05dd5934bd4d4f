//! Cross-risk minimization (XRM) for discovering training environments
//! without annotations, and the group-robust learners that consume them.
//!
//! Phase 1 ([`xrm`]) trains two twins on random halves of the data, lets
//! each imitate its sibling's confident held-out mistakes by flipping
//! labels, and assigns every example to environment 1 when either twin
//! misclassifies it. Phase 2 ([`phase2`]) trains ERM, GroupDRO, RWG or
//! SUBG on groups built from those environments. [`harness`] ties both
//! phases to the hyper-parameter search and reporting.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod phase2;
pub mod xrm;

pub use error::{Error, Result};
pub use models::{ModelParams, ModelSpec};
pub use numerics::{Matrix, RngStream, StreamLabel};
