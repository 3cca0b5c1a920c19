//! Numerical forge for pairs of non-isometric conductivities on a box whose
//! Dirichlet-to-Neumann maps coincide at a fixed non-zero frequency.
//!
//! The pipeline runs mesh -> spectrum -> constrained energy search ->
//! conformal factor and zero-mean source -> prescribed-Jacobian flow ->
//! pushforward and conformal conductivities -> DN maps -> certificate.

pub mod acceptance;
pub mod certify;
pub mod conductivity;
pub mod conformal;
pub mod dictionary;
pub mod dn;
pub mod energy_search;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod linalg;
pub mod mesh;
pub mod moser;
pub mod pipeline;
pub mod pushforward;
pub mod quadrature;
pub mod sparse;
pub mod spectral;
pub mod spline;

pub use conductivity::{ConductivityField, GammaSpec};
pub use conformal::{ConformalFactor, FrequencyPlan, ZeroMeanField};
pub use dictionary::{BumpDictionary, BumpExpansion};
pub use dn::{DnMatrix, DnMode, SmoothBoundaryBasis};
pub use error::{ForgeError, Result};
pub use fem::ScalarField;
pub use geometry::{Aabb, Mat3, Vec3};
pub use mesh::{BoxDomain, Mesh};
pub use moser::FlowDiffeomorphism;
pub use pipeline::{ForgeConfig, ForgeReport};
pub use sparse::SparseSymMatrix;
pub use spectral::SpectrumReport;
