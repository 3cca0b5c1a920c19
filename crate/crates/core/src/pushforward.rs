//! Pushforward and conformally scaled conductivities, and FEM assembly of
//! pushforwards in the transported Galerkin space.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::conductivity::{Conductivity, ConductivityField};
use crate::conformal::ConformalFactor;
use crate::error::{ForgeError, Result};
use crate::fem::{assemble_stiffness, assemble_weighted_mass, QuadratureSpec};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::mesh::{BoxDomain, Mesh};
use crate::moser::FlowDiffeomorphism;
use crate::sparse::{Pattern, SparseSymMatrix};

/// A point map with its Jacobian and inverse; identity outside `support`.
pub trait Diffeomorphism: Send + Sync {
    fn forward_jacobian(&self, x: &Vec3) -> (Vec3, Mat3);
    fn inverse(&self, y: &Vec3) -> Result<Vec3>;
    fn support(&self) -> Aabb;
}

impl Diffeomorphism for FlowDiffeomorphism {
    fn forward_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        FlowDiffeomorphism::forward_jacobian(self, x)
    }

    fn inverse(&self, y: &Vec3) -> Result<Vec3> {
        FlowDiffeomorphism::inverse(self, y)
    }

    fn support(&self) -> Aabb {
        self.field.support()
    }
}

/// D γ Dᵀ / |det D|.
pub fn transform(gamma: &Mat3, d: &Mat3) -> Result<Mat3> {
    let det = d.determinant();
    if !(det.abs() > 1e-12) {
        return Err(ForgeError::SingularJacobian { at: [f64::NAN; 3] });
    }
    Ok(d * gamma * d.transpose() / det.abs())
}

fn key(y: &Vec3) -> [u64; 3] {
    [y[0].to_bits(), y[1].to_bits(), y[2].to_bits()]
}

/// Ψ*γ(y) = (DΨ γ DΨᵀ / |det DΨ|)(Ψ⁻¹(y)), with cached inverse-map calls.
pub struct PushforwardConductivity {
    pub base: Conductivity,
    pub map: Arc<dyn Diffeomorphism>,
    bounds: (f64, f64),
    cache: Mutex<HashMap<[u64; 3], (Vec3, Mat3)>>,
}

impl PushforwardConductivity {
    /// Samples the support on a lattice to bound the singular values of DΨ.
    pub fn new(base: Conductivity, map: Arc<dyn Diffeomorphism>) -> Result<Self> {
        let s = map.support();
        let (lo, hi) = base.ellipticity();
        let mut bounds = (lo, hi);
        if !s.is_empty() {
            let n = 12;
            let (mut smin, mut smax): (f64, f64) = (1.0, 1.0);
            let (mut dmin, mut dmax): (f64, f64) = (1.0, 1.0);
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let t = [i, j, k].map(|v| v as f64 / n as f64);
                        let x = Vec3::from_fn(|a, _| s.min[a] + t[a] * s.extent(a));
                        let d = map.forward_jacobian(&x).1;
                        let det = d.determinant();
                        if !(det > 1e-12) {
                            return Err(ForgeError::SingularJacobian { at: [x[0], x[1], x[2]] });
                        }
                        let sv = d.singular_values();
                        smin = smin.min(sv.min());
                        smax = smax.max(sv.max());
                        dmin = dmin.min(det);
                        dmax = dmax.max(det);
                    }
                }
            }
            bounds = (0.9 * lo * smin * smin / dmax, 1.1 * hi * smax * smax / dmin);
        }
        Ok(PushforwardConductivity { base, map, bounds, cache: Mutex::new(HashMap::new()) })
    }

    /// Value at the image of a known preimage x, without inverting.
    pub fn at_preimage(&self, x: &Vec3) -> Result<(Vec3, Mat3)> {
        let (y, d) = self.map.forward_jacobian(x);
        let g = transform(&self.base.evaluate(x), &d).map_err(|_| ForgeError::SingularJacobian { at: [x[0], x[1], x[2]] })?;
        Ok((y, g))
    }

    pub fn try_evaluate(&self, y: &Vec3) -> Result<Mat3> {
        if !self.map.support().contains_open(y) {
            return Ok(self.base.evaluate(y));
        }
        if let Some((_, g)) = self.cache.lock().unwrap().get(&key(y)) {
            return Ok(*g);
        }
        let x = self.map.inverse(y)?;
        let (_, g) = self.at_preimage(&x)?;
        self.cache.lock().unwrap().insert(key(y), (x, g));
        Ok(g)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl ConductivityField for PushforwardConductivity {
    fn evaluate(&self, y: &Vec3) -> Mat3 {
        self.try_evaluate(y).unwrap_or_else(|_| Mat3::from_element(f64::NAN))
    }

    fn ellipticity(&self) -> (f64, f64) {
        self.bounds
    }

    fn name(&self) -> String {
        format!("pushforward({})", self.base.name())
    }
}

pub fn push_forward(gamma: Conductivity, map: Arc<dyn Diffeomorphism>) -> Result<Conductivity> {
    Ok(Arc::new(PushforwardConductivity::new(gamma, map)?))
}

/// c²γ.
#[derive(Clone)]
pub struct ConformalScaled {
    pub base: Conductivity,
    pub c: ConformalFactor,
}

impl ConformalScaled {
    fn c_range(&self) -> (f64, f64) {
        let t = self.c.eps * self.c.sup_u;
        let a = (1.0 - t).powf(2.0 * self.c.alpha);
        let b = (1.0 + t).powf(2.0 * self.c.alpha);
        (a.min(b).min(1.0), a.max(b).max(1.0))
    }
}

impl ConductivityField for ConformalScaled {
    fn evaluate(&self, x: &Vec3) -> Mat3 {
        let c = self.c.value(x);
        self.base.evaluate(x) * (c * c)
    }

    fn derivative(&self, x: &Vec3) -> Option<[Mat3; 3]> {
        let d = self.base.derivative(x)?;
        let j = self.c.jet(x);
        let g = self.base.evaluate(x);
        let c2 = j.value * j.value;
        Some([0, 1, 2].map(|k| g * (2.0 * j.value * j.grad[k]) + d[k] * c2))
    }

    fn ellipticity(&self) -> (f64, f64) {
        let (lo, hi) = self.base.ellipticity();
        let (a, b) = self.c_range();
        (lo * a, hi * b)
    }

    fn name(&self) -> String {
        format!("conformal(eps={}, alpha={})*{}", self.c.eps, self.c.alpha, self.base.name())
    }
}

pub fn conformal_scale(gamma: Conductivity, c: ConformalFactor) -> Conductivity {
    Arc::new(ConformalScaled { base: gamma, c })
}

/// How the Jacobian determinant J enters the transported mass matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    /// J from the prescribed divergence target (Liouville identity of the flow).
    Liouville,
    /// J and the stiffness integrand from the integrated variational Jacobian.
    Integrated,
}

/// Stiffness and mass of Ψ*γ pulled back to the reference variable:
/// ∫ DΨ⁻¹ (Ψ*γ)(Ψx) DΨ⁻ᵀ J ∇φ_i·∇φ_j dx and ∫ J φ_i φ_j dx.
pub fn transported_matrices<J>(
    mesh: &Mesh,
    pattern: &Arc<Pattern>,
    push: &PushforwardConductivity,
    quad: &QuadratureSpec,
    mode: TransportMode,
    liouville: J,
) -> Result<(SparseSymMatrix, SparseSymMatrix)>
where
    J: Fn(&Vec3) -> f64 + Sync,
{
    let support = push.map.support();
    match mode {
        TransportMode::Liouville => {
            let k = assemble_stiffness(mesh, pattern, push.base.as_ref(), quad)?;
            let m = assemble_weighted_mass(mesh, pattern, quad, |x| {
                Ok(if support.contains_open(x) { liouville(x) } else { 1.0 })
            })?;
            Ok((k, m))
        }
        TransportMode::Integrated => {
            let k = crate::fem::assemble_tensor(mesh, pattern, quad, |x| {
                if !support.contains_open(x) {
                    return Ok(push.base.evaluate(x));
                }
                let (_, d) = push.map.forward_jacobian(x);
                let (_, g) = push.at_preimage(x)?;
                let inv = d.try_inverse().ok_or(ForgeError::SingularJacobian { at: [x[0], x[1], x[2]] })?;
                Ok(inv * g * inv.transpose() * d.determinant())
            })?;
            let m = assemble_weighted_mass(mesh, pattern, quad, |x| {
                Ok(if support.contains_open(x) { push.map.forward_jacobian(x).1.determinant() } else { 1.0 })
            })?;
            Ok((k, m))
        }
    }
}

/// Max Frobenius distance between two conductivities on a 17³ lattice.
pub fn c0_distance(a: &dyn ConductivityField, b: &dyn ConductivityField, domain: &BoxDomain) -> f64 {
    let n = 16;
    let mut worst: f64 = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let t = [i, j, k].map(|v| v as f64 / n as f64);
                let x = Vec3::from_fn(|r, _| domain.min[r] + t[r] * domain.extent(r));
                worst = worst.max((a.evaluate(&x) - b.evaluate(&x)).norm());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{AnisotropicSmooth, Identity};
    use crate::dictionary::{radial_bump_jet, BumpDictionary, BumpExpansion, DictionaryConfig};
    use crate::moser::{unimodular_flow, CurlField};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Affine {
        a: Mat3,
        center: Vec3,
    }

    impl Diffeomorphism for Affine {
        fn forward_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
            (self.center + self.a * (x - self.center), self.a)
        }
        fn inverse(&self, y: &Vec3) -> Result<Vec3> {
            Ok(self.center + self.a.try_inverse().unwrap() * (y - self.center))
        }
        fn support(&self) -> Aabb {
            Aabb::new([0.3; 3], [0.7; 3])
        }
    }

    fn points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95))).collect()
    }

    fn aniso() -> Conductivity {
        Arc::new(AnisotropicSmooth { amplitude: 0.3, domain: BoxDomain::unit() })
    }

    #[test]
    fn identity_map_leaves_gamma_unchanged() {
        let p = PushforwardConductivity::new(aniso(), Arc::new(FlowDiffeomorphism::identity())).unwrap();
        for x in points(20, 1) {
            assert_eq!(p.evaluate(&x), aniso().evaluate(&x));
        }
    }

    #[test]
    fn affine_unimodular_pushforward_is_conjugation() {
        let a = Mat3::new(1.2, 0.1, 0.0, 0.0, 1.0 / 1.2, 0.3, 0.0, 0.0, 1.0);
        assert!((a.determinant() - 1.0).abs() < 1e-14);
        let g0 = Mat3::new(2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0);
        struct Constant(Mat3);
        impl ConductivityField for Constant {
            fn evaluate(&self, _x: &Vec3) -> Mat3 {
                self.0
            }
            fn ellipticity(&self) -> (f64, f64) {
                (0.5, 3.0)
            }
            fn name(&self) -> String {
                "constant".into()
            }
        }
        let map = Affine { a, center: Vec3::new(0.5, 0.5, 0.5) };
        let p = PushforwardConductivity::new(Arc::new(Constant(g0)), Arc::new(map)).unwrap();
        let y = Vec3::new(0.52, 0.47, 0.55);
        assert!((p.evaluate(&y) - a * g0 * a.transpose()).norm() < 1e-13);
    }

    #[test]
    fn unimodular_flow_preserves_determinant_along_orbits() {
        let field = CurlField { center: Vec3::new(0.5, 0.5, 0.5), radius: 0.3, amplitude: 0.05, axis: Vec3::new(0.2, 0.6, -0.7) };
        let map: Arc<dyn Diffeomorphism> = Arc::new(unimodular_flow(field, 64));
        let p = PushforwardConductivity::new(aniso(), map.clone()).unwrap();
        for x in points(40, 2) {
            let (y, _) = map.forward_jacobian(&x);
            let lhs = p.evaluate(&y).determinant();
            let rhs = aniso().evaluate(&x).determinant();
            assert!((lhs - rhs).abs() < 1e-6 * rhs, "{lhs} {rhs}");
            let ev = p.evaluate(&y).symmetric_eigenvalues();
            let (lo, hi) = p.ellipticity();
            assert!(ev.min() >= lo && ev.max() <= hi);
        }
        assert!(p.cache_len() > 0);
    }

    fn factor(eps: f64, alpha: f64) -> ConformalFactor {
        let cfg = DictionaryConfig { per_axis: 2, ..DictionaryConfig::default() };
        let dict = Arc::new(BumpDictionary::build(&BoxDomain::unit(), &cfg, &Identity).unwrap());
        let n = dict.len();
        let coeffs = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.7 });
        ConformalFactor::new(BumpExpansion::new(dict, coeffs), eps, alpha).unwrap()
    }

    #[test]
    fn conformal_scale_identities() {
        let one = conformal_scale(aniso(), factor(0.0, 0.25));
        let c = factor(0.2, 0.25);
        let scaled = conformal_scale(aniso(), c.clone());
        for x in points(30, 3) {
            assert_eq!(one.evaluate(&x), aniso().evaluate(&x));
            let cv = c.value(&x);
            let lhs = scaled.evaluate(&x).determinant();
            assert!((lhs - cv.powi(6) * aniso().evaluate(&x).determinant()).abs() < 1e-12 * lhs);
        }
    }

    #[test]
    fn conformal_identity_holds_pointwise() {
        // div(c²γ∇v) = c[div(γ∇(cv)) − div(γ∇c) v] for analytic v.
        let c = factor(0.2, -0.25);
        let scaled = ConformalScaled { base: aniso(), c: c.clone() };
        let g = aniso();
        let vj = |x: &Vec3| radial_bump_jet(&Vec3::new(0.45, 0.5, 0.55), 0.35, x);
        for x in points(100, 4) {
            let v = vj(&x);
            let cj = c.jet(&x);
            let lhs = scaled.divergence_apply(&x, &v.grad, &v.hess).unwrap();
            let w_grad = cj.grad * v.value + v.grad * cj.value;
            let w_hess = cj.hess * v.value + cj.grad * v.grad.transpose() + v.grad * cj.grad.transpose() + v.hess * cj.value;
            let rhs = cj.value * (g.divergence_apply(&x, &w_grad, &w_hess).unwrap() - g.divergence_apply(&x, &cj.grad, &cj.hess).unwrap() * v.value);
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} {rhs}");
        }
    }

    #[test]
    fn transported_modes_agree() {
        let mesh = crate::mesh::build_box_mesh(4, BoxDomain::unit()).unwrap();
        let pattern = Arc::new(Pattern::from_mesh(&mesh));
        let field = CurlField { center: Vec3::new(0.5, 0.5, 0.5), radius: 0.3, amplitude: 0.05, axis: Vec3::z() };
        let p = PushforwardConductivity::new(aniso(), Arc::new(unimodular_flow(field, 32))).unwrap();
        let q = QuadratureSpec::default();
        let (k1, m1) = transported_matrices(&mesh, &pattern, &p, &q, TransportMode::Liouville, |_| 1.0).unwrap();
        let (k2, m2) = transported_matrices(&mesh, &pattern, &p, &q, TransportMode::Integrated, |_| 1.0).unwrap();
        let dk = (k1.to_dense() - k2.to_dense()).norm() / k1.to_dense().norm();
        let dm = (m1.to_dense() - m2.to_dense()).norm() / m1.to_dense().norm();
        assert!(dk < 1e-12 && dm < 1e-8, "{dk} {dm}");
    }

    #[test]
    fn c0_distance_is_linear_in_eps() {
        let d1 = c0_distance(&*conformal_scale(aniso(), factor(0.1, 0.25)), &*aniso(), &BoxDomain::unit());
        let d2 = c0_distance(&*conformal_scale(aniso(), factor(0.05, 0.25)), &*aniso(), &BoxDomain::unit());
        assert!(d1 > 0.0 && (d1 / d2 - 2.0).abs() < 0.2, "{d1} {d2}");
    }
}
