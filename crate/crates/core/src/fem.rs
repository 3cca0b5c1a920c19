//! P1 finite elements: stiffness and mass assembly, Dirichlet solves.

use std::sync::Arc;

use rayon::prelude::*;

use crate::conductivity::ConductivityField;
use crate::error::{ForgeError, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::linalg::{self, BandedLdlt, KrylovFailure};
use crate::mesh::Mesh;
use crate::quadrature::TetRule;
use crate::sparse::{Csr, Pattern, SparseSymMatrix};

/// Nodal P1 function.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Self {
        ScalarField { values: vec![0.0; n] }
    }

    pub fn from_fn<F: Fn(&Vec3) -> f64>(mesh: &Mesh, f: F) -> Self {
        ScalarField {
            values: mesh.vertices.iter().map(f).collect(),
        }
    }

    pub fn evaluate(&self, mesh: &Mesh, x: &Vec3) -> f64 {
        let loc = mesh.locate(x);
        let tet = &mesh.tets[loc.tet];
        (0..4).map(|a| loc.bary[a] * self.values[tet[a]]).sum()
    }
}

/// Tetrahedral quadrature choice: order-4 rule, optionally refined into
/// `8^level` sub-tetrahedra on elements meeting `region`.
#[derive(Clone, Debug)]
pub struct QuadratureSpec {
    pub level: u32,
    pub region: Option<Aabb>,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { level: 0, region: None }
    }
}

impl QuadratureSpec {
    pub fn refined(level: u32, region: Option<Aabb>) -> Self {
        QuadratureSpec { level, region }
    }

    fn rules(&self) -> (TetRule, TetRule) {
        let base = TetRule::order4();
        let fine = base.refined(self.level);
        (base, fine)
    }
}

fn tet_box(mesh: &Mesh, t: usize) -> Aabb {
    let mut b = Aabb::empty();
    for p in mesh.tet_vertices(t) {
        b = b.union(&Aabb::new([p[0], p[1], p[2]], [p[0], p[1], p[2]]));
    }
    b
}

fn overlaps(a: &Aabb, b: &Aabb) -> bool {
    (0..3).all(|k| a.min[k] <= b.max[k] && b.min[k] <= a.max[k])
}

/// Assembles one 4x4 block per element with `element` and merges them in
/// element order.
pub fn assemble_blocks<F>(mesh: &Mesh, pattern: &Arc<Pattern>, element: F) -> Result<SparseSymMatrix>
where
    F: Fn(usize) -> Result<[[f64; 4]; 4]> + Sync,
{
    let blocks: Vec<[[f64; 4]; 4]> = (0..mesh.num_tets())
        .into_par_iter()
        .map(&element)
        .collect::<Result<Vec<_>>>()?;
    let mut m = SparseSymMatrix::zeros(pattern.clone());
    m.add_elements(&mesh.tets, &blocks);
    Ok(m)
}

/// Stiffness with an arbitrary tensor integrand evaluated at quadrature points.
pub fn assemble_tensor<F>(mesh: &Mesh, pattern: &Arc<Pattern>, quad: &QuadratureSpec, integrand: F) -> Result<SparseSymMatrix>
where
    F: Fn(&Vec3) -> Result<Mat3> + Sync,
{
    let (base, fine) = quad.rules();
    assemble_blocks(mesh, pattern, |t| {
        let rule = match &quad.region {
            Some(r) if quad.level > 0 && overlaps(&tet_box(mesh, t), r) => &fine,
            None if quad.level > 0 => &fine,
            _ => &base,
        };
        let (g, vol) = mesh.tet_gradients(t);
        let mut avg = Mat3::zeros();
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point(t, p);
            avg += integrand(&x)? * *w;
        }
        let mut block = [[0.0; 4]; 4];
        for a in 0..4 {
            let ga = avg * g[a];
            for b in 0..4 {
                block[a][b] = vol * ga.dot(&g[b]);
            }
        }
        Ok(block)
    })
}

fn checked_tensor(gamma: &dyn ConductivityField, x: &Vec3) -> Result<Mat3> {
    let g = gamma.evaluate(x);
    if !g.iter().all(|v| v.is_finite()) {
        return Err(ForgeError::Ellipticity {
            at: [x[0], x[1], x[2]],
            detail: format!("non-finite value from {}", gamma.name()),
        });
    }
    if nalgebra::Cholesky::new(g).is_none() {
        return Err(ForgeError::Ellipticity {
            at: [x[0], x[1], x[2]],
            detail: format!("{} is not positive definite", gamma.name()),
        });
    }
    Ok(g)
}

pub fn assemble_stiffness(mesh: &Mesh, pattern: &Arc<Pattern>, gamma: &dyn ConductivityField, quad: &QuadratureSpec) -> Result<SparseSymMatrix> {
    assemble_tensor(mesh, pattern, quad, |x| checked_tensor(gamma, x))
}

/// Consistent P1 mass matrix (closed form).
pub fn assemble_mass(mesh: &Mesh, pattern: &Arc<Pattern>) -> SparseSymMatrix {
    let blocks: Vec<[[f64; 4]; 4]> = (0..mesh.num_tets())
        .map(|t| {
            let vol = mesh.signed_volume(t).abs();
            let mut b = [[vol / 20.0; 4]; 4];
            for (a, row) in b.iter_mut().enumerate() {
                row[a] = vol / 10.0;
            }
            b
        })
        .collect();
    let mut m = SparseSymMatrix::zeros(pattern.clone());
    m.add_elements(&mesh.tets, &blocks);
    m
}

/// Mass matrix with a pointwise weight, M_ij = ∫ w φ_i φ_j.
pub fn assemble_weighted_mass<F>(mesh: &Mesh, pattern: &Arc<Pattern>, quad: &QuadratureSpec, weight: F) -> Result<SparseSymMatrix>
where
    F: Fn(&Vec3) -> Result<f64> + Sync,
{
    let (base, fine) = quad.rules();
    assemble_blocks(mesh, pattern, |t| {
        let rule = match &quad.region {
            Some(r) if quad.level > 0 && overlaps(&tet_box(mesh, t), r) => &fine,
            None if quad.level > 0 => &fine,
            _ => &base,
        };
        let vol = mesh.signed_volume(t).abs();
        let mut block = [[0.0; 4]; 4];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point(t, p);
            let rho = weight(&x)? * w * vol;
            for a in 0..4 {
                for b in 0..4 {
                    block[a][b] += rho * p[a] * p[b];
                }
            }
        }
        Ok(block)
    })
}

/// Interior / boundary split of the nodes.
#[derive(Clone, Debug)]
pub struct NodePartition {
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
    /// Position of each node inside its own set.
    pub local: Vec<usize>,
}

impl NodePartition {
    pub fn new(mesh: &Mesh) -> Self {
        let interior = mesh.interior_nodes();
        let boundary = mesh.boundary_nodes();
        let mut local = vec![0; mesh.num_vertices()];
        for (k, &v) in interior.iter().enumerate() {
            local[v] = k;
        }
        for (k, &v) in boundary.iter().enumerate() {
            local[v] = k;
        }
        NodePartition { interior, boundary, local }
    }

    pub fn scatter(&self, interior: &[f64], boundary: &[f64]) -> ScalarField {
        let mut values = vec![0.0; self.interior.len() + self.boundary.len()];
        for (k, &v) in self.interior.iter().enumerate() {
            values[v] = interior[k];
        }
        for (k, &v) in self.boundary.iter().enumerate() {
            values[v] = boundary[k];
        }
        ScalarField { values }
    }

    pub fn gather_interior(&self, u: &ScalarField) -> Vec<f64> {
        self.interior.iter().map(|&v| u.values[v]).collect()
    }
}

/// Linear solver used for interior systems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverKind {
    /// Banded LDLᵀ with two steps of iterative refinement.
    Direct,
    /// PCG for positive definite systems, MINRES otherwise.
    Krylov { tol: f64 },
}

/// The shifted operator K − λM split into interior and boundary blocks.
pub struct ShiftedSystem {
    pub lambda: f64,
    pub partition: NodePartition,
    pub a_ii: Csr,
    pub a_ib: Csr,
    pub a_bb: Csr,
    kind: SolverKind,
    factor: Option<BandedLdlt>,
    diag: Vec<f64>,
}

impl ShiftedSystem {
    pub fn new(mesh: &Mesh, k: &SparseSymMatrix, m: &SparseSymMatrix, lambda: f64, kind: SolverKind) -> Result<Self> {
        let a = k.axpy(-lambda, m);
        let partition = NodePartition::new(mesh);
        let a_ii = a.block(&partition.interior, &partition.interior);
        let a_ib = a.block(&partition.interior, &partition.boundary);
        let a_bb = a.block(&partition.boundary, &partition.boundary);
        let factor = match kind {
            SolverKind::Direct => Some(BandedLdlt::factor(&a_ii).map_err(|p| ForgeError::Resonance {
                lambda,
                gap: p.value.abs(),
            })?),
            SolverKind::Krylov { .. } => None,
        };
        let diag = a_ii.diagonal();
        Ok(ShiftedSystem { lambda, partition, a_ii, a_ib, a_bb, kind, factor, diag })
    }

    pub fn factorization(&self) -> Option<&BandedLdlt> {
        self.factor.as_ref()
    }

    /// Solves A_II x = rhs.
    pub fn solve_interior(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            SolverKind::Direct => Ok(linalg::refined_solve(&self.a_ii, self.factor.as_ref().unwrap(), rhs, 2)),
            SolverKind::Krylov { tol } => {
                let n = rhs.len();
                let max_iter = 20 * n + 100;
                let apply = |v: &[f64], o: &mut [f64]| self.a_ii.matvec(v, o);
                let mut x = vec![0.0; n];
                if self.lambda <= 0.0 {
                    match linalg::pcg(apply, &self.diag, rhs, &mut x, tol, max_iter) {
                        Ok(_) => return Ok(x),
                        Err(KrylovFailure::Indefinite) => {}
                        Err(KrylovFailure::NotConverged { history }) => {
                            return Err(self.stagnation(history));
                        }
                    }
                    x.iter_mut().for_each(|v| *v = 0.0);
                }
                let inv: Vec<f64> = self.diag.iter().map(|d| 1.0 / d.abs()).collect();
                let pre = |v: &[f64], o: &mut [f64]| {
                    for i in 0..v.len() {
                        o[i] = inv[i] * v[i];
                    }
                };
                match linalg::minres(apply, pre, rhs, &mut x, tol, max_iter) {
                    Ok(_) => Ok(x),
                    Err(KrylovFailure::NotConverged { history }) => Err(self.stagnation(history)),
                    Err(KrylovFailure::Indefinite) => Err(ForgeError::Solver("indefinite preconditioner".into())),
                }
            }
        }
    }

    fn stagnation(&self, history: Vec<f64>) -> ForgeError {
        let last = history.last().copied().unwrap_or(f64::NAN);
        if last > 1e-3 {
            ForgeError::Resonance { lambda: self.lambda, gap: f64::NAN }
        } else {
            ForgeError::NonConvergence {
                what: "interior Krylov solve".into(),
                iterations: history.len(),
                last,
                history,
            }
        }
    }

    /// Discrete solution with boundary values `g` (in boundary-node order).
    pub fn solve_dirichlet(&self, g: &[f64]) -> Result<ScalarField> {
        let mut rhs = vec![0.0; self.partition.interior.len()];
        self.a_ib.matvec(g, &mut rhs);
        rhs.iter_mut().for_each(|v| *v = -*v);
        let ui = self.solve_interior(&rhs)?;
        Ok(self.partition.scatter(&ui, g))
    }
}

/// Shared pattern and matrices for one mesh and conductivity.
pub struct FemSpace {
    pub pattern: Arc<Pattern>,
    pub mass: SparseSymMatrix,
}

impl FemSpace {
    pub fn new(mesh: &Mesh) -> Self {
        let pattern = Arc::new(Pattern::from_mesh(mesh));
        let mass = assemble_mass(mesh, &pattern);
        FemSpace { pattern, mass }
    }
}

/// Solves (L_γ − λ) u = 0 with u = g on the boundary nodes (`g` indexed by
/// all vertices; interior entries are ignored).
pub fn solve_dirichlet(gamma: &dyn ConductivityField, lambda: f64, g: &ScalarField, mesh: &Mesh) -> Result<ScalarField> {
    let space = FemSpace::new(mesh);
    let k = assemble_stiffness(mesh, &space.pattern, gamma, &QuadratureSpec::default())?;
    let sys = ShiftedSystem::new(mesh, &k, &space.mass, lambda, SolverKind::Direct)?;
    let gb: Vec<f64> = sys.partition.boundary.iter().map(|&v| g.values[v]).collect();
    sys.solve_dirichlet(&gb)
}

/// uᵀ A u.
pub fn energy(u: &ScalarField, stiffness: &SparseSymMatrix) -> f64 {
    stiffness.quadratic_form(&u.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{AnisotropicSmooth, Identity};
    use crate::mesh::{build_box_mesh, BoxDomain};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_tet_element_matrices() {
        // Single reference tetrahedron (0,0,0),(1,0,0),(0,1,0),(0,0,1).
        let mut mesh = build_box_mesh(1, BoxDomain::unit()).unwrap();
        mesh.vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        mesh.tets = vec![[0, 1, 2, 3]];
        let pattern = Arc::new(Pattern::from_mesh(&mesh));
        let k = assemble_stiffness(&mesh, &pattern, &Identity, &QuadratureSpec::default()).unwrap();
        // Hand integration: gradients (-1,-1,-1), e1, e2, e3 on volume 1/6.
        let expected = [
            [0.5, -1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
            [-1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0],
            [-1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0],
            [-1.0 / 6.0, 0.0, 0.0, 1.0 / 6.0],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!((k.get(a, b) - expected[a][b]).abs() < 1e-15);
            }
        }
        let m = assemble_mass(&mesh, &pattern);
        let vol = 1.0 / 6.0;
        for a in 0..4 {
            for b in 0..4 {
                let e = if a == b { vol / 10.0 } else { vol / 20.0 };
                assert!((m.get(a, b) - e).abs() < 1e-16);
            }
        }
        let w = assemble_weighted_mass(&mesh, &pattern, &QuadratureSpec::default(), |_| Ok(1.0)).unwrap();
        for (x, y) in w.values.iter().zip(&m.values) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_mass_sums_to_volume() {
        let mesh = build_box_mesh(4, BoxDomain::unit()).unwrap();
        let space = FemSpace::new(&mesh);
        let g = AnisotropicSmooth { amplitude: 0.3, domain: mesh.domain };
        let k = assemble_stiffness(&mesh, &space.pattern, &g, &QuadratureSpec::default()).unwrap();
        for i in 0..k.n() {
            assert!(k.row(i).map(|(_, v)| v).sum::<f64>().abs() < 1e-13);
        }
        assert!((space.mass.total() - 1.0).abs() < 1e-13);
        let part = NodePartition::new(&mesh);
        let kii = k.block(&part.interior, &part.interior).to_dense();
        assert!(nalgebra::Cholesky::new(kii).is_some());
        assert!(nalgebra::Cholesky::new(space.mass.to_dense()).is_some());
    }

    #[test]
    fn affine_data_is_reproduced() {
        let mesh = build_box_mesh(4, BoxDomain::unit()).unwrap();
        let ell = |x: &Vec3| 0.3 + 1.5 * x[0] - 0.7 * x[1] + 2.0 * x[2];
        let g = ScalarField::from_fn(&mesh, ell);
        let u = solve_dirichlet(&Identity, 0.0, &g, &mesh).unwrap();
        for (v, x) in mesh.vertices.iter().enumerate() {
            assert!((u.values[v] - ell(x)).abs() < 1e-10);
        }
        let zero = solve_dirichlet(&Identity, 5.0, &ScalarField::zeros(mesh.num_vertices()), &mesh).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_data_matches_dense_oracle() {
        let mesh = build_box_mesh(4, BoxDomain::unit()).unwrap();
        let space = FemSpace::new(&mesh);
        let gamma = AnisotropicSmooth { amplitude: 0.4, domain: mesh.domain };
        let k = assemble_stiffness(&mesh, &space.pattern, &gamma, &QuadratureSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ScalarField {
            values: (0..mesh.num_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        for (lambda, kind) in [
            (0.0, SolverKind::Direct),
            (45.0, SolverKind::Direct),
            (0.0, SolverKind::Krylov { tol: 1e-12 }),
            (45.0, SolverKind::Krylov { tol: 1e-12 }),
        ] {
            let sys = ShiftedSystem::new(&mesh, &k, &space.mass, lambda, kind).unwrap();
            let gb: Vec<f64> = sys.partition.boundary.iter().map(|&v| g.values[v]).collect();
            let u = sys.solve_dirichlet(&gb).unwrap();
            // Dense LU oracle on the full interior system.
            let a = k.to_dense() - space.mass.to_dense() * lambda;
            let part = &sys.partition;
            let aii = DMatrix::from_fn(part.interior.len(), part.interior.len(), |i, j| a[(part.interior[i], part.interior[j])]);
            let rhs = DVector::from_fn(part.interior.len(), |i, _| {
                -part.boundary.iter().enumerate().map(|(k, &b)| a[(part.interior[i], b)] * gb[k]).sum::<f64>()
            });
            let x = aii.lu().solve(&rhs).unwrap();
            for (i, &v) in part.interior.iter().enumerate() {
                assert!((u.values[v] - x[i]).abs() < 1e-8, "lambda {lambda} {kind:?}");
            }
        }
    }

    #[test]
    fn energy_matches_elementwise_gradient_oracle() {
        let mesh = build_box_mesh(3, BoxDomain::unit()).unwrap();
        let space = FemSpace::new(&mesh);
        let k = assemble_stiffness(&mesh, &space.pattern, &Identity, &QuadratureSpec::default()).unwrap();
        let u = ScalarField::from_fn(&mesh, |x| (3.0 * x[0]).sin() * x[1] * x[1] + x[2]);
        let mut oracle = 0.0;
        for t in 0..mesh.num_tets() {
            let (g, vol) = mesh.tet_gradients(t);
            let grad: Vec3 = (0..4).map(|a| g[a] * u.values[mesh.tets[t][a]]).sum();
            oracle += vol * grad.norm_squared();
        }
        assert!((energy(&u, &k) - oracle).abs() < 1e-12 * oracle);
        assert_eq!(energy(&ScalarField::zeros(mesh.num_vertices()), &k), 0.0);
    }

    #[test]
    fn resonant_shift_is_reported() {
        // λ equal to a discrete eigenvalue makes the interior block singular.
        let mesh = build_box_mesh(2, BoxDomain::unit()).unwrap();
        let space = FemSpace::new(&mesh);
        let k = assemble_stiffness(&mesh, &space.pattern, &Identity, &QuadratureSpec::default()).unwrap();
        let v = mesh.interior_nodes()[0];
        let lambda = k.get(v, v) / space.mass.get(v, v);
        let err = ShiftedSystem::new(&mesh, &k, &space.mass, lambda, SolverKind::Direct).err().unwrap();
        assert_eq!(err.exit_code(), 3);
    }
}
