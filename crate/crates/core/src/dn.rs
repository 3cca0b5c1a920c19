//! Discrete Dirichlet-to-Neumann matrices over nodal boundary traces and
//! their comparison.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::ConductivityField;
use crate::error::{ForgeError, Result};
use crate::fem::{assemble_stiffness, FemSpace, NodePartition, QuadratureSpec, ShiftedSystem, SolverKind};
use crate::mesh::Mesh;
use crate::sparse::SparseSymMatrix;

/// Λ restricted to nodal boundary hats: Λ_ij = a(u_i, v_j) − λ(u_i, v_j)
/// with u_i the discrete solution for boundary data e_i.
#[derive(Clone, Debug)]
pub struct DnMatrix {
    pub tag: String,
    pub lambda: f64,
    pub resolution: usize,
    pub boundary: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dimension: usize,
    frequency: f64,
    tag: String,
}

impl DnMatrix {
    /// Schur complement of K − λM onto the boundary, one column per
    /// boundary node, sharing the interior factorization.
    pub fn from_matrices(mesh: &Mesh, k: &SparseSymMatrix, m: &SparseSymMatrix, lambda: f64, kind: SolverKind, tag: &str) -> Result<Self> {
        let sys = ShiftedSystem::new(mesh, k, m, lambda, kind)?;
        let nb = sys.partition.boundary.len();
        let ni = sys.partition.interior.len();
        let a_bi = sys.a_ib.transpose();
        let columns: Vec<Vec<f64>> = (0..nb)
            .into_par_iter()
            .map(|j| {
                let mut rhs = vec![0.0; ni];
                for (r, v) in a_bi.row(j) {
                    rhs[r] = v;
                }
                let x = sys.solve_interior(&rhs).map_err(|e| match e {
                    ForgeError::NonConvergence { iterations, last, history, .. } => ForgeError::NonConvergence {
                        what: format!("DN column {j}"),
                        iterations,
                        last,
                        history,
                    },
                    other => other,
                })?;
                let mut col: Vec<f64> = vec![0.0; nb];
                for (r, v) in sys.a_bb.row(j) {
                    col[r] = v;
                }
                let mut ax = vec![0.0; nb];
                a_bi.matvec(&x, &mut ax);
                for (c, a) in col.iter_mut().zip(&ax) {
                    *c -= a;
                }
                Ok(col)
            })
            .collect::<Result<_>>()?;
        let matrix = DMatrix::from_fn(nb, nb, |i, j| columns[j][i]);
        Ok(DnMatrix {
            tag: tag.to_string(),
            lambda,
            resolution: mesh.resolution,
            boundary: sys.partition.boundary.clone(),
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.boundary.len()
    }

    /// ‖Λ − Λᵀ‖_F / ‖Λ‖_F.
    pub fn symmetry_defect(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).norm() / self.matrix.norm()
    }

    fn check_compatible(&self, other: &DnMatrix) -> Result<()> {
        if self.boundary != other.boundary || self.resolution != other.resolution {
            return Err(ForgeError::InvalidInput(format!(
                "DN matrices '{}' and '{}' live on different meshes",
                self.tag, other.tag
            )));
        }
        if self.lambda != other.lambda {
            return Err(ForgeError::InvalidInput(format!(
                "DN matrices '{}' and '{}' have different frequencies ({} vs {})",
                self.tag, other.tag, self.lambda, other.lambda
            )));
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (row-major little-endian f64) and `<stem>.json`.
    pub fn dump(&self, stem: &Path) -> Result<()> {
        let n = self.dim();
        let mut bytes = Vec::with_capacity(8 * n * n);
        for i in 0..n {
            for j in 0..n {
                bytes.extend_from_slice(&self.matrix[(i, j)].to_le_bytes());
            }
        }
        std::fs::write(stem.with_extension("bin"), bytes)?;
        let header = DumpHeader { dimension: n, frequency: self.lambda, tag: self.tag.clone() };
        let mut f = std::fs::File::create(stem.with_extension("json"))?;
        serde_json::to_writer_pretty(&mut f, &header)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Reads a dump written by [`DnMatrix::dump`]; mesh data is not stored.
    pub fn load_dense(stem: &Path) -> Result<(DMatrix<f64>, f64, String)> {
        let header: DumpHeader = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let n = header.dimension;
        if bytes.len() != 8 * n * n {
            return Err(ForgeError::InvalidInput(format!("DN dump has {} bytes, expected {}", bytes.len(), 8 * n * n)));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((DMatrix::from_row_slice(n, n, &vals), header.frequency, header.tag))
    }
}

/// Λ_{γ,λ} with the default quadrature and a direct solver.
pub fn assemble_dn(gamma: &dyn ConductivityField, lambda: f64, mesh: &Mesh) -> Result<DnMatrix> {
    let space = FemSpace::new(mesh);
    let k = assemble_stiffness(mesh, &space.pattern, gamma, &QuadratureSpec::default())?;
    DnMatrix::from_matrices(mesh, &k, &space.mass, lambda, SolverKind::Direct, &gamma.name())
}

/// Lowest eigenvectors of the graph Laplacian of the boundary surface mesh.
#[derive(Clone, Debug)]
pub struct SmoothBoundaryBasis {
    pub requested: usize,
    pub eigenvalues: Vec<f64>,
    /// Columns are orthonormal modes in boundary-node order.
    pub modes: DMatrix<f64>,
    pub boundary: Vec<usize>,
}

/// Relative eigenvalue gap used to avoid splitting a degenerate cluster.
pub const CLUSTER_GAP: f64 = 1e-8;

impl SmoothBoundaryBasis {
    pub fn new(mesh: &Mesh, k: usize) -> Result<Self> {
        let part = NodePartition::new(mesh);
        let nb = part.boundary.len();
        if k == 0 || k > nb {
            return Err(ForgeError::InvalidInput(format!("cannot take {k} boundary modes out of {nb}")));
        }
        let mut lap = DMatrix::<f64>::zeros(nb, nb);
        let mut seen = std::collections::BTreeSet::new();
        for f in &mesh.boundary_facets {
            for (a, b) in [(0, 1), (1, 2), (0, 2)] {
                let (i, j) = (part.local[f.nodes[a]], part.local[f.nodes[b]]);
                if seen.insert((i.min(j), i.max(j))) {
                    lap[(i, j)] -= 1.0;
                    lap[(j, i)] -= 1.0;
                    lap[(i, i)] += 1.0;
                    lap[(j, j)] += 1.0;
                }
            }
        }
        let eig = lap.symmetric_eigen();
        let mut order: Vec<usize> = (0..nb).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut count = k;
        while count < nb && (vals[count] - vals[count - 1]).abs() <= CLUSTER_GAP * vals[count].abs().max(1.0) {
            count += 1;
        }
        let modes = DMatrix::from_fn(nb, count, |r, c| {
            let v = eig.eigenvectors.column(order[c]);
            // Fix the sign so the first significant entry is positive.
            let s = v.iter().find(|x| x.abs() > 1e-8).map_or(1.0, |x| x.signum());
            s * v[r]
        });
        Ok(SmoothBoundaryBasis { requested: k, eigenvalues: vals[..count].to_vec(), modes, boundary: part.boundary })
    }

    pub fn len(&self) -> usize {
        self.modes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.ncols() == 0
    }

    pub fn project(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.modes.transpose() * a * &self.modes
    }
}

/// Comparison metric for DN matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnMode {
    /// ‖Λ₁ − Λ₂‖_F / ‖Λ₁‖_F.
    Full,
    /// Same after projection onto the smooth boundary modes.
    Smooth,
}

pub fn dn_distance(a: &DnMatrix, b: &DnMatrix, mode: DnMode, basis: Option<&SmoothBoundaryBasis>) -> Result<f64> {
    a.check_compatible(b)?;
    match mode {
        DnMode::Full => Ok((&a.matrix - &b.matrix).norm() / a.matrix.norm()),
        DnMode::Smooth => {
            let basis = basis.ok_or_else(|| ForgeError::InvalidInput("smooth distance needs a boundary basis".into()))?;
            if basis.boundary != a.boundary {
                return Err(ForgeError::InvalidInput("boundary basis belongs to a different mesh".into()));
            }
            let pa = basis.project(&a.matrix);
            Ok((&pa - basis.project(&b.matrix)).norm() / pa.norm())
        }
    }
}

/// Solver-noise floor: 10 × distance between direct and Krylov DN matrices
/// of the same operator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Floor {
    pub solver_distance: f64,
    pub krylov_tol: f64,
    pub floor: f64,
}

pub const FLOOR_SAFETY: f64 = 10.0;

pub fn calibrate_floor(
    mesh: &Mesh,
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    lambda: f64,
    basis: &SmoothBoundaryBasis,
    krylov_tol: f64,
    direct: Option<&DnMatrix>,
) -> Result<Floor> {
    let owned;
    let d = match direct {
        Some(d) => d,
        None => {
            owned = DnMatrix::from_matrices(mesh, k, m, lambda, SolverKind::Direct, "floor-direct")?;
            &owned
        }
    };
    let kr = DnMatrix::from_matrices(mesh, k, m, lambda, SolverKind::Krylov { tol: krylov_tol }, "floor-krylov")?;
    let solver_distance = dn_distance(d, &kr, DnMode::Smooth, Some(basis))?;
    Ok(Floor { solver_distance, krylov_tol, floor: FLOOR_SAFETY * solver_distance.max(f64::EPSILON) })
}
