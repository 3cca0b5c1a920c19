//! Lowest Dirichlet eigenpairs by shift-invert subspace iteration and
//! frequency-gap certification.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conductivity::ConductivityField;
use crate::error::{ForgeError, Result};
use crate::fem::{assemble_stiffness, FemSpace, NodePartition, QuadratureSpec, ScalarField};
use crate::linalg::{dot, generalized_eigen, BandedLdlt};
use crate::mesh::Mesh;
use crate::sparse::{Csr, SparseSymMatrix};

#[derive(Clone, Debug)]
pub struct EigenOptions {
    pub count: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl EigenOptions {
    pub fn new(count: usize) -> Self {
        EigenOptions {
            count,
            tol: 1e-10,
            max_iter: 300,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// ‖K x − θ M x‖ / θ with ‖x‖_M = 1 (constraint-projected when constrained).
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

fn matvec_dense(a: &Csr, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows];
    a.matvec(x, &mut y);
    y
}

/// Lowest `count` eigenpairs of `K x = θ M x` on the interior block,
/// optionally restricted to `{x : bᵀx = 0}`.
pub fn lowest_eigenpairs(k: &Csr, m: &Csr, constraint: Option<&[f64]>, opts: &EigenOptions) -> Result<EigenResult> {
    let n = k.nrows;
    let count = opts.count;
    if count == 0 || count >= n {
        return Err(ForgeError::InvalidInput(format!("cannot compute {count} eigenpairs of a size-{n} problem")));
    }
    let p = (2 * count).max(count + 8).min(n);
    let factor = BandedLdlt::factor(k)
        .map_err(|f| ForgeError::Solver(format!("stiffness not positive definite (pivot {} at row {})", f.value, f.row)))?;
    let kinv_b = constraint.map(|b| {
        let z = factor.solve(b);
        let denom = dot(b, &z);
        (b.to_vec(), z, denom)
    });
    let op = |x: &[f64]| -> Vec<f64> {
        let mut y = factor.solve(&matvec_dense(m, x));
        if let Some((b, z, denom)) = &kinv_b {
            let l = dot(b, &y) / denom;
            for i in 0..n {
                y[i] -= l * z[i];
            }
        }
        y
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut history = Vec::new();
    for iter in 1..=opts.max_iter {
        let y: Vec<Vec<f64>> = x.iter().map(|v| op(v)).collect();
        let ky: Vec<Vec<f64>> = y.iter().map(|v| matvec_dense(k, v)).collect();
        let my: Vec<Vec<f64>> = y.iter().map(|v| matvec_dense(m, v)).collect();
        let kr = DMatrix::from_fn(p, p, |i, j| dot(&y[i], &ky[j]));
        let mr = DMatrix::from_fn(p, p, |i, j| dot(&y[i], &my[j]));
        let kr = (&kr + kr.transpose()) * 0.5;
        let mr = (&mr + mr.transpose()) * 0.5;
        let (theta, q) = generalized_eigen(&kr, &mr)?;
        let combine = |src: &Vec<Vec<f64>>, col: usize| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (r, s) in src.iter().enumerate() {
                let c = q[(r, col)];
                for i in 0..n {
                    out[i] += c * s[i];
                }
            }
            out
        };
        x = (0..p).map(|c| combine(&y, c)).collect();
        let mut residuals = Vec::with_capacity(count);
        for c in 0..count {
            let kx = combine(&ky, c);
            let mx = combine(&my, c);
            let mut r: Vec<f64> = (0..n).map(|i| kx[i] - theta[c] * mx[i]).collect();
            if let Some((b, _, _)) = &kinv_b {
                let s = dot(b, &r) / dot(b, b);
                for i in 0..n {
                    r[i] -= s * b[i];
                }
            }
            residuals.push(dot(&r, &r).sqrt() / theta[c].abs());
        }
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        history.push(worst);
        if worst <= opts.tol {
            let mut vectors: Vec<Vec<f64>> = x.into_iter().take(count).collect();
            for v in vectors.iter_mut() {
                let s: f64 = v.iter().sum();
                let pivot = if s.abs() > 1e-8 * v.iter().map(|a| a.abs()).sum::<f64>() {
                    s
                } else {
                    *v.iter().max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap()).unwrap()
                };
                if pivot < 0.0 {
                    v.iter_mut().for_each(|a| *a = -*a);
                }
            }
            return Ok(EigenResult {
                values: theta[..count].to_vec(),
                vectors,
                residuals,
                iterations: iter,
            });
        }
    }
    Err(ForgeError::NonConvergence {
        what: "subspace iteration".into(),
        iterations: opts.max_iter,
        last: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

/// Lowest discrete Dirichlet eigenpairs of L_γ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<f64>,
    #[serde(skip)]
    pub eigenvectors: Vec<ScalarField>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl SpectrumReport {
    pub fn gap(&self, lambda: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|e| (lambda - e).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Eigenpairs from assembled matrices; eigenvectors are M-orthonormal nodal
/// fields vanishing on the boundary.
pub fn eigenpairs_from_matrices(mesh: &Mesh, k: &SparseSymMatrix, m: &SparseSymMatrix, count: usize) -> Result<SpectrumReport> {
    let part = NodePartition::new(mesh);
    let kii = k.block(&part.interior, &part.interior);
    let mii = m.block(&part.interior, &part.interior);
    let res = lowest_eigenpairs(&kii, &mii, None, &EigenOptions::new(count))?;
    let zeros = vec![0.0; part.boundary.len()];
    let eigenvectors = res.vectors.iter().map(|v| part.scatter(v, &zeros)).collect();
    Ok(SpectrumReport {
        eigenvalues: res.values,
        eigenvectors,
        residuals: res.residuals,
        iterations: res.iterations,
    })
}

pub fn dirichlet_eigenpairs(gamma: &dyn ConductivityField, mesh: &Mesh, count: usize) -> Result<SpectrumReport> {
    if count < 2 {
        return Err(ForgeError::InvalidInput("at least two eigenpairs are required".into()));
    }
    let space = FemSpace::new(mesh);
    let k = assemble_stiffness(mesh, &space.pattern, gamma, &QuadratureSpec::default())?;
    eigenpairs_from_matrices(mesh, &k, &space.mass, count)
}

/// True iff `lambda` is farther than `tol` from every computed eigenvalue.
pub fn certify_gap(lambda: f64, report: &SpectrumReport, tol: f64) -> Result<bool> {
    let top = *report
        .eigenvalues
        .last()
        .ok_or_else(|| ForgeError::Inconclusive("empty spectrum".into()))?;
    if lambda >= top {
        return Err(ForgeError::Inconclusive(format!(
            "frequency {lambda} is not below the largest computed eigenvalue {top}; request more eigenpairs"
        )));
    }
    Ok(report.gap(lambda) > tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{Identity, Scaled};
    use crate::mesh::{build_box_mesh, BoxDomain};
    use std::f64::consts::PI;
    use std::sync::Arc;

    #[test]
    fn cube_spectrum_bounds_and_cluster() {
        let mesh = build_box_mesh(6, BoxDomain::unit()).unwrap();
        let rep = dirichlet_eigenpairs(&Identity, &mesh, 6).unwrap();
        assert!(rep.eigenvalues[0] > 3.0 * PI * PI);
        assert!(rep.eigenvalues[0] < rep.eigenvalues[1]);
        for r in &rep.residuals {
            assert!(*r <= 1e-8);
        }
        // Second eigenvalue 6π² has multiplicity 3; the Kuhn mesh splits the
        // cluster but keeps all three above 6π² and below the next level 9π².
        for &e in &rep.eigenvalues[1..4] {
            assert!(e > 6.0 * PI * PI && e < 9.0 * PI * PI, "{:?}", rep.eigenvalues);
        }
        assert!(rep.eigenvalues[4] > 9.0 * PI * PI);
        let first = &rep.eigenvectors[0];
        let interior = mesh.interior_nodes();
        assert!(interior.iter().all(|&v| first.values[v] > 0.0));
    }

    #[test]
    fn eigenvectors_are_mass_orthonormal() {
        let mesh = build_box_mesh(5, BoxDomain::unit()).unwrap();
        let space = FemSpace::new(&mesh);
        let k = assemble_stiffness(&mesh, &space.pattern, &Identity, &QuadratureSpec::default()).unwrap();
        let rep = eigenpairs_from_matrices(&mesh, &k, &space.mass, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mij = (0..mesh.num_vertices())
                        .map(|a| {
                            rep.eigenvectors[i].values[a]
                                * space.mass.row(a).map(|(b, v)| v * rep.eigenvectors[j].values[b]).sum::<f64>()
                        })
                        .sum::<f64>();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((mij - e).abs() < 1e-10);
            }
            let rq = crate::fem::energy(&rep.eigenvectors[i], &k);
            assert!((rq - rep.eigenvalues[i]).abs() < 1e-8 * rep.eigenvalues[i]);
        }
    }

    #[test]
    fn scaling_scales_spectrum() {
        let mesh = build_box_mesh(4, BoxDomain::unit()).unwrap();
        let a = dirichlet_eigenpairs(&Identity, &mesh, 3).unwrap();
        let s = Scaled { scale: 2.5, inner: Arc::new(Identity) };
        let b = dirichlet_eigenpairs(&s, &mesh, 3).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((2.5 * x - y).abs() < 1e-9 * y);
        }
    }

    #[test]
    fn gap_certification() {
        let mesh = build_box_mesh(6, BoxDomain::unit()).unwrap();
        let rep = dirichlet_eigenpairs(&Identity, &mesh, 6).unwrap();
        assert!(certify_gap(10.0, &rep, 0.1).unwrap());
        assert!(!certify_gap(rep.eigenvalues[0], &rep, 0.01 * rep.eigenvalues[0]).unwrap());
        assert!(certify_gap(rep.eigenvalues[5] + 1.0, &rep, 0.1).is_err());
    }
}
