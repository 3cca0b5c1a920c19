//! Diffeomorphisms with prescribed Jacobian determinant by flowing along
//! divergence-constrained vector fields.
//!
//! Convention: with div w = f and v_s = w / (1 + (1−s) f), s ∈ [0, 1], the
//! time-one map Ψ satisfies det DΨ(x) = 1 + f(x) at the source point x.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::Identity;
use crate::conformal::SourceFlux;
use crate::dictionary::radial_bump_jet;
use crate::error::{ForgeError, Result};
use crate::fem::{assemble_stiffness, FemSpace, NodePartition, QuadratureSpec};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::linalg::{minres, BandedLdlt, KrylovFailure};
use crate::mesh::Mesh;
use crate::quadrature::TetRule;
use crate::spline::DivergenceSpline;

/// Time-dependent velocity with its spatial Jacobian; zero outside `support`.
pub trait FlowField: Send + Sync {
    fn velocity(&self, s: f64, x: &Vec3) -> (Vec3, Mat3);
    fn support(&self) -> Aabb;
}

/// v_s = w/(1 + (1−s)F) for the spline pair (F, w) with div w = F.
pub struct SplineFlow {
    pub spline: Arc<DivergenceSpline>,
}

impl FlowField for SplineFlow {
    fn velocity(&self, s: f64, x: &Vec3) -> (Vec3, Mat3) {
        let e = self.spline.eval(x);
        let rho = 1.0 + (1.0 - s) * e.f;
        let v = e.w / rho;
        let dv = e.dw / rho - e.w * e.grad_f.transpose() * ((1.0 - s) / (rho * rho));
        (v, dv)
    }

    fn support(&self) -> Aabb {
        self.spline.region
    }
}

/// Moser field for f = div q + g: w = q + w_g with the closed-form flux q and
/// the spline pair (g, w_g).
pub struct SplitFlow {
    pub flux: Arc<SourceFlux>,
    pub spline: Arc<DivergenceSpline>,
}

impl SplitFlow {
    /// The source F = div w realised by the flow.
    pub fn source(&self, x: &Vec3) -> f64 {
        self.flux.jet(x).div + self.spline.eval(x).f
    }
}

impl FlowField for SplitFlow {
    fn velocity(&self, s: f64, x: &Vec3) -> (Vec3, Mat3) {
        if !self.spline.region.contains_open(x) {
            return (Vec3::zeros(), Mat3::zeros());
        }
        let e = self.spline.eval(x);
        let q = self.flux.jet(x);
        let f = e.f + q.div;
        let w = e.w + q.q;
        let rho = 1.0 + (1.0 - s) * f;
        let v = w / rho;
        let dv = (e.dw + q.dq) / rho - w * (e.grad_f + q.grad_div).transpose() * ((1.0 - s) / (rho * rho));
        (v, dv)
    }

    fn support(&self) -> Aabb {
        self.spline.region
    }
}

/// Divergence-free w = ∇a × e for a bump potential a.
#[derive(Clone, Copy, Debug)]
pub struct CurlField {
    pub center: Vec3,
    pub radius: f64,
    pub amplitude: f64,
    pub axis: Vec3,
}

fn cross_matrix(e: &Vec3) -> Mat3 {
    Mat3::new(0.0, -e[2], e[1], e[2], 0.0, -e[0], -e[1], e[0], 0.0)
}

impl FlowField for CurlField {
    fn velocity(&self, _s: f64, x: &Vec3) -> (Vec3, Mat3) {
        let j = radial_bump_jet(&self.center, self.radius, x);
        let g = j.grad * self.amplitude;
        let h = j.hess * self.amplitude;
        // (∇a × e)_i = −(e × ∇a)_i, so D(∇a × e) = −[e]× H.
        (g.cross(&self.axis), -cross_matrix(&self.axis) * h)
    }

    fn support(&self) -> Aabb {
        let r = self.radius;
        let c = self.center;
        Aabb::new([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
    }
}

/// Gradient field w = ∇φ for a bump potential φ (not volume preserving).
#[derive(Clone, Copy, Debug)]
pub struct GradientField {
    pub center: Vec3,
    pub radius: f64,
    pub amplitude: f64,
}

impl FlowField for GradientField {
    fn velocity(&self, _s: f64, x: &Vec3) -> (Vec3, Mat3) {
        let j = radial_bump_jet(&self.center, self.radius, x);
        (j.grad * self.amplitude, j.hess * self.amplitude)
    }

    fn support(&self) -> Aabb {
        let r = self.radius;
        let c = self.center;
        Aabb::new([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r])
    }
}

/// Time-one map of a flow field, integrated with classical RK4.
#[derive(Clone)]
pub struct FlowDiffeomorphism {
    pub field: Arc<dyn FlowField>,
    pub steps: usize,
}

impl std::fmt::Debug for FlowDiffeomorphism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowDiffeomorphism").field("steps", &self.steps).field("support", &self.field.support()).finish()
    }
}

/// Newton tolerance of the inverse map.
const INVERSE_TOL: f64 = 1e-14;

impl FlowDiffeomorphism {
    pub fn new(field: Arc<dyn FlowField>, steps: usize) -> Self {
        FlowDiffeomorphism { field, steps: steps.max(1) }
    }

    pub fn identity() -> Self {
        Self::new(Arc::new(CurlField { center: Vec3::zeros(), radius: 1.0, amplitude: 0.0, axis: Vec3::z() }), 1)
    }

    fn moves(&self, x: &Vec3) -> bool {
        self.field.support().contains_open(x)
    }

    pub fn forward(&self, x: &Vec3) -> Vec3 {
        if !self.moves(x) {
            return *x;
        }
        let dt = 1.0 / self.steps as f64;
        let mut y = *x;
        for k in 0..self.steps {
            let s = k as f64 * dt;
            let k1 = self.field.velocity(s, &y).0;
            let k2 = self.field.velocity(s + 0.5 * dt, &(y + k1 * (0.5 * dt))).0;
            let k3 = self.field.velocity(s + 0.5 * dt, &(y + k2 * (0.5 * dt))).0;
            let k4 = self.field.velocity(s + dt, &(y + k3 * dt)).0;
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        y
    }

    /// Ψ(x) and DΨ(x) from the variational system J' = Dv(X) J.
    pub fn forward_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        if !self.moves(x) {
            return (*x, Mat3::identity());
        }
        let dt = 1.0 / self.steps as f64;
        let mut y = *x;
        let mut j = Mat3::identity();
        for k in 0..self.steps {
            let s = k as f64 * dt;
            let (v1, d1) = self.field.velocity(s, &y);
            let j1 = d1 * j;
            let (v2, d2) = self.field.velocity(s + 0.5 * dt, &(y + v1 * (0.5 * dt)));
            let j2 = d2 * (j + j1 * (0.5 * dt));
            let (v3, d3) = self.field.velocity(s + 0.5 * dt, &(y + v2 * (0.5 * dt)));
            let j3 = d3 * (j + j2 * (0.5 * dt));
            let (v4, d4) = self.field.velocity(s + dt, &(y + v3 * dt));
            let j4 = d4 * (j + j3 * dt);
            y += (v1 + v2 * 2.0 + v3 * 2.0 + v4) * (dt / 6.0);
            j += (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (dt / 6.0);
        }
        (y, j)
    }

    /// Backward RK4 guess refined by Newton on the discrete forward map.
    pub fn inverse(&self, y: &Vec3) -> Result<Vec3> {
        if !self.moves(y) {
            return Ok(*y);
        }
        let dt = 1.0 / self.steps as f64;
        let mut x = *y;
        for k in (0..self.steps).rev() {
            let s = (k + 1) as f64 * dt;
            let k1 = -self.field.velocity(s, &x).0;
            let k2 = -self.field.velocity(s - 0.5 * dt, &(x + k1 * (0.5 * dt))).0;
            let k3 = -self.field.velocity(s - 0.5 * dt, &(x + k2 * (0.5 * dt))).0;
            let k4 = -self.field.velocity(s - dt, &(x + k3 * dt)).0;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let (px, j) = self.forward_jacobian(&x);
            let r = px - y;
            last = r.norm();
            if last <= INVERSE_TOL * (1.0 + y.norm()) {
                return Ok(x);
            }
            let lu = j.lu();
            if lu.determinant().abs() < 1e-12 {
                return Err(ForgeError::SingularJacobian { at: [x[0], x[1], x[2]] });
            }
            x -= lu.solve(&r).ok_or(ForgeError::SingularJacobian { at: [x[0], x[1], x[2]] })?;
        }
        if last <= 1e-12 * (1.0 + y.norm()) {
            return Ok(x);
        }
        Err(ForgeError::NonConvergence { what: "inverse flow map".into(), iterations: 30, last, history: vec![] })
    }
}

/// Moser flow for a spline divergence pair.
pub fn moser_flow(spline: Arc<DivergenceSpline>, steps: usize) -> FlowDiffeomorphism {
    FlowDiffeomorphism::new(Arc::new(SplineFlow { spline }), steps)
}

/// Moser flow of f = div q + g with g fitted by a spline of the given spacing.
pub fn split_moser_flow(flux: Arc<SourceFlux>, spacing: f64, steps: usize) -> Result<(Arc<SplitFlow>, FlowDiffeomorphism)> {
    let spline = Arc::new(DivergenceSpline::fit(flux.support(), spacing, |x| flux.remainder(x))?);
    let field = Arc::new(SplitFlow { flux, spline });
    Ok((field.clone(), FlowDiffeomorphism::new(field, steps)))
}

/// Volume-preserving flow of w = ∇a × e.
pub fn unimodular_flow(field: CurlField, steps: usize) -> FlowDiffeomorphism {
    FlowDiffeomorphism::new(Arc::new(field), steps)
}

/// One row of the Jacobian-determinant diagnostics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DetSample {
    pub x: [f64; 3],
    pub det: f64,
    pub one_plus_f: f64,
    pub deviation: f64,
}

pub fn det_check<F>(flow: &FlowDiffeomorphism, points: &[Vec3], target: F) -> Vec<DetSample>
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    points
        .par_iter()
        .map(|x| {
            let det = flow.forward_jacobian(x).1.determinant();
            let t = target(x);
            DetSample { x: [x[0], x[1], x[2]], det, one_plus_f: t, deviation: (det - t).abs() }
        })
        .collect()
}

/// Largest deviation with its location.
pub fn worst_sample(samples: &[DetSample]) -> Option<DetSample> {
    samples.iter().copied().fold(None, |acc: Option<DetSample>, s| match acc {
        Some(a) if a.deviation >= s.deviation => Some(a),
        _ => Some(s),
    })
}

/// CSV with header `x,y,z,det,one_plus_f,deviation`.
pub fn write_det_csv<W: Write>(samples: &[DetSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "z", "det", "one_plus_f", "deviation"])?;
    for s in samples {
        w.write_record(
            [s.x[0], s.x[1], s.x[2], s.det, s.one_plus_f, s.deviation]
                .iter()
                .map(|v| format!("{v:.17e}")),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Nodal P1 vector field.
#[derive(Clone, Debug)]
pub struct VectorField {
    pub values: Vec<Vec3>,
}

impl VectorField {
    pub fn evaluate(&self, mesh: &Mesh, x: &Vec3) -> Vec3 {
        let loc = mesh.locate(x);
        let tet = &mesh.tets[loc.tet];
        (0..4).map(|a| self.values[tet[a]] * loc.bary[a]).sum()
    }

    /// Value and (piecewise constant) Jacobian.
    pub fn jet(&self, mesh: &Mesh, x: &Vec3) -> (Vec3, Mat3) {
        let loc = mesh.locate(x);
        let tet = &mesh.tets[loc.tet];
        let (grads, _) = mesh.tet_gradients(loc.tet);
        let mut v = Vec3::zeros();
        let mut d = Mat3::zeros();
        for a in 0..4 {
            let w = self.values[tet[a]];
            v += w * loc.bary[a];
            d += w * grads[a].transpose();
        }
        (v, d)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SaddleOptions {
    /// Pressure stabilization δ = scale·h².
    pub stabilization: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SaddleOptions {
    fn default() -> Self {
        SaddleOptions { stabilization: 0.05, tol: 1e-10, max_iter: 5000 }
    }
}

#[derive(Clone, Debug)]
pub struct DivergenceSolution {
    pub w: VectorField,
    /// Discrete L² norm of the weak divergence residual (lumped-mass dual norm).
    pub weak_residual: f64,
    pub f_norm: f64,
    pub iterations: usize,
}

/// Compatibility tolerance on ∫f relative to ∫|f|.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

/// P1–P1 pressure-stabilized saddle point: minimize ‖∇w‖² subject to
/// (div w, q) = (f, q), w = 0 on the boundary.
pub fn solve_divergence<F>(mesh: &Mesh, f: F, opts: &SaddleOptions) -> Result<DivergenceSolution>
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    let n = mesh.num_vertices();
    let part = NodePartition::new(mesh);
    let ni = part.interior.len();
    let rule = TetRule::order4();
    let per_tet: Vec<([f64; 4], [f64; 4])> = (0..mesh.num_tets())
        .into_par_iter()
        .map(|t| {
            let verts = mesh.tet_vertices(t);
            let vol = mesh.signed_volume(t);
            let mut load = [0.0; 4];
            let mut abs = [0.0; 4];
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let x = verts[0] * p[0] + verts[1] * p[1] + verts[2] * p[2] + verts[3] * p[3];
                let fx = f(&x);
                for a in 0..4 {
                    load[a] += w * vol * fx * p[a];
                    abs[a] += w * vol * fx.abs() * p[a];
                }
            }
            (load, abs)
        })
        .collect();
    let mut rhs_p = vec![0.0; n];
    let mut total_abs = 0.0;
    for (t, (load, abs)) in per_tet.iter().enumerate() {
        for a in 0..4 {
            rhs_p[mesh.tets[t][a]] += load[a];
            total_abs += abs[a];
        }
    }
    let integral: f64 = rhs_p.iter().sum();
    if integral.abs() > COMPATIBILITY_TOL * total_abs.max(f64::MIN_POSITIVE) && integral.abs() > 1e-300 {
        return Err(ForgeError::Incompatible { integral, tolerance: COMPATIBILITY_TOL * total_abs });
    }
    let f_norm = (total_abs > 0.0).then(|| {
        let s: f64 = (0..mesh.num_tets())
            .map(|t| {
                let verts = mesh.tet_vertices(t);
                let vol = mesh.signed_volume(t);
                rule.points.iter().zip(&rule.weights).map(|(p, w)| {
                    let x = verts[0] * p[0] + verts[1] * p[1] + verts[2] * p[2] + verts[3] * p[3];
                    w * vol * f(&x).powi(2)
                }).sum::<f64>()
            })
            .sum();
        s.sqrt()
    }).unwrap_or(0.0);
    if total_abs == 0.0 {
        return Ok(DivergenceSolution {
            w: VectorField { values: vec![Vec3::zeros(); n] },
            weak_residual: 0.0,
            f_norm: 0.0,
            iterations: 0,
        });
    }
    let space = FemSpace::new(mesh);
    let k = assemble_stiffness(mesh, &space.pattern, &Identity, &QuadratureSpec::default())?;
    let kii = k.block(&part.interior, &part.interior);
    let factor = BandedLdlt::factor(&kii)
        .map_err(|e| ForgeError::Solver(format!("vector Laplacian factorization failed at row {}", e.row)))?;
    // B[q][(i, d)] = ∫ ψ_q ∂_d φ_i.
    let mut brows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for t in 0..mesh.num_tets() {
        let (grads, vol) = mesh.tet_gradients(t);
        let tet = mesh.tets[t];
        for a in 0..4 {
            for b in 0..4 {
                if mesh.is_boundary(tet[b]) {
                    continue;
                }
                let ib = part.local[tet[b]];
                for d in 0..3 {
                    *brows[tet[a]].entry(3 * ib + d).or_insert(0.0) += grads[b][d] * vol / 4.0;
                }
            }
        }
    }
    let delta = opts.stabilization * mesh.h() * mesh.h();
    let lumped: Vec<f64> = (0..n).map(|i| space.mass.row(i).map(|(_, v)| v).sum()).collect();
    let cdiag = k.diagonal();
    let dim = 3 * ni + n;
    let apply = |x: &[f64], y: &mut [f64]| {
        let (xw, xp) = x.split_at(3 * ni);
        let (yw, yp) = y.split_at_mut(3 * ni);
        for d in 0..3 {
            for r in 0..ni {
                yw[3 * r + d] = kii.row(r).map(|(c, v)| v * xw[3 * c + d]).sum();
            }
        }
        for q in 0..n {
            let mut acc = 0.0;
            for (&col, &v) in &brows[q] {
                acc += v * xw[col];
                yw[col] += v * xp[q];
            }
            let cp: f64 = k.row(q).map(|(c, v)| v * xp[c]).sum();
            yp[q] = acc - delta * cp;
        }
    };
    let precond = |r: &[f64], z: &mut [f64]| {
        for d in 0..3 {
            let comp: Vec<f64> = (0..ni).map(|i| r[3 * i + d]).collect();
            let sol = factor.solve(&comp);
            for i in 0..ni {
                z[3 * i + d] = sol[i];
            }
        }
        for q in 0..n {
            z[3 * ni + q] = r[3 * ni + q] / (lumped[q] + delta * cdiag[q]);
        }
    };
    let mut b = vec![0.0; dim];
    b[3 * ni..].copy_from_slice(&rhs_p);
    let mut x = vec![0.0; dim];
    let stats = minres(apply, precond, &b, &mut x, opts.tol, opts.max_iter).map_err(|e| match e {
        KrylovFailure::NotConverged { history } => ForgeError::NonConvergence {
            what: "divergence saddle-point solve".into(),
            iterations: opts.max_iter,
            last: history.last().copied().unwrap_or(f64::NAN),
            history,
        },
        KrylovFailure::Indefinite => ForgeError::Solver("unexpected breakdown in saddle-point solve".into()),
    })?;
    let mut values = vec![Vec3::zeros(); n];
    for (r, &v) in part.interior.iter().enumerate() {
        values[v] = Vec3::new(x[3 * r], x[3 * r + 1], x[3 * r + 2]);
    }
    let mut res2 = 0.0;
    for q in 0..n {
        let bw: f64 = brows[q].iter().map(|(&c, &v)| v * x[c]).sum();
        let r = bw - rhs_p[q];
        res2 += r * r / lumped[q];
    }
    Ok(DivergenceSolution {
        w: VectorField { values },
        weak_residual: res2.sqrt(),
        f_norm,
        iterations: stats.iterations,
    })
}

/// v_s = w_h/(1 + (1−s) f) for a P1 field w_h and analytic f.
pub struct P1Flow<F: Fn(&Vec3) -> f64 + Send + Sync> {
    pub mesh: Arc<Mesh>,
    pub w: VectorField,
    pub f: F,
}

impl<F: Fn(&Vec3) -> f64 + Send + Sync> FlowField for P1Flow<F> {
    fn velocity(&self, s: f64, x: &Vec3) -> (Vec3, Mat3) {
        let (w, dw) = self.w.jet(&self.mesh, x);
        let fx = (self.f)(x);
        let h = 1e-6;
        let mut gf = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            gf[k] = ((self.f)(&(x + e)) - (self.f)(&(x - e))) / (2.0 * h);
        }
        let rho = 1.0 + (1.0 - s) * fx;
        (w / rho, dw / rho - w * gf.transpose() * ((1.0 - s) / (rho * rho)))
    }

    fn support(&self) -> Aabb {
        self.mesh.domain.aabb()
    }
}
