//! Conformal factor c = (1+εu)^α, the constructed frequency, the zero-mean
//! source f and the rescaled conductivity.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::{Conductivity, ConductivityField, Scaled};
use crate::dictionary::{grid_sum, BumpExpansion, Jet, Jet3};
use crate::error::{ForgeError, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::quadrature::GridRule;

#[derive(Clone, Debug)]
pub struct ConformalFactor {
    pub u: BumpExpansion,
    pub eps: f64,
    pub alpha: f64,
    /// Estimated ‖u‖_∞.
    pub sup_u: f64,
}

impl ConformalFactor {
    /// Requires ε‖u‖_∞ ≤ 1/2.
    pub fn new(u: BumpExpansion, eps: f64, alpha: f64) -> Result<Self> {
        let sup_u = u.sup_norm();
        Self::with_sup(u, eps, alpha, sup_u)
    }

    pub fn with_sup(u: BumpExpansion, eps: f64, alpha: f64, sup_u: f64) -> Result<Self> {
        if !eps.is_finite() || eps < 0.0 || !alpha.is_finite() {
            return Err(ForgeError::InvalidInput(format!("invalid ε = {eps} or α = {alpha}")));
        }
        if eps * sup_u > 0.5 {
            return Err(ForgeError::Construction(format!(
                "ε‖u‖∞ = {:.4} exceeds 1/2 (ε = {eps}, ‖u‖∞ = {sup_u:.4})",
                eps * sup_u
            )));
        }
        Ok(ConformalFactor { u, eps, alpha, sup_u })
    }

    /// Region outside which c ≡ 1.
    pub fn support(&self) -> Aabb {
        self.u.dict.support
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        (1.0 + self.eps * self.u.value(x)).powf(self.alpha)
    }

    /// c, ∇c and the Hessian of c by the chain rule.
    pub fn jet(&self, x: &Vec3) -> Jet {
        let uj = self.u.jet(x);
        if uj.value == 0.0 && uj.grad == Vec3::zeros() && uj.hess == Mat3::zeros() {
            return Jet { value: 1.0, grad: Vec3::zeros(), hess: Mat3::zeros() };
        }
        let (e, a) = (self.eps, self.alpha);
        let p = 1.0 + e * uj.value;
        let d1 = a * e * p.powf(a - 1.0);
        let d2 = a * (a - 1.0) * e * e * p.powf(a - 2.0);
        Jet {
            value: p.powf(a),
            grad: uj.grad * d1,
            hess: uj.hess * d1 + uj.grad * uj.grad.transpose() * d2,
        }
    }

    /// 1/c² − 1 without cancellation for small εu.
    pub fn deficit(&self, x: &Vec3) -> f64 {
        let u = self.u.value(x);
        if u == 0.0 {
            return 0.0;
        }
        (-2.0 * self.alpha * (self.eps * u).ln_1p()).exp_m1()
    }

    /// Jet of c including third derivatives.
    pub fn jet3(&self, x: &Vec3) -> Jet3 {
        let u3 = self.u.jet3(x);
        let uj = u3.jet;
        if uj.value == 0.0 && uj.grad == Vec3::zeros() && uj.hess == Mat3::zeros() {
            return Jet3 { jet: Jet { value: 1.0, grad: Vec3::zeros(), hess: Mat3::zeros() }, third: [Mat3::zeros(); 3] };
        }
        let (e, a) = (self.eps, self.alpha);
        let p = 1.0 + e * uj.value;
        let d1 = a * e * p.powf(a - 1.0);
        let d2 = a * (a - 1.0) * e * e * p.powf(a - 2.0);
        let d3 = a * (a - 1.0) * (a - 2.0) * e * e * e * p.powf(a - 3.0);
        let g = uj.grad;
        let ggt = g * g.transpose();
        let third = std::array::from_fn(|k| {
            let mut t = u3.third[k] * d1 + ggt * (d3 * g[k]) + uj.hess * (d2 * g[k]);
            for i in 0..3 {
                for j in 0..3 {
                    t[(i, j)] += d2 * (uj.hess[(i, k)] * g[j] + uj.hess[(j, k)] * g[i]);
                }
            }
            t
        });
        Jet3 { jet: Jet { value: p.powf(a), grad: g * d1, hess: uj.hess * d1 + ggt * d2 }, third }
    }
}

/// Target frequency λ₀, constructed λ_{ε,α} and the scaling s = λ₀/λ_{ε,α}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPlan {
    pub lambda0: f64,
    pub lambda: f64,
    pub scale: f64,
    /// ∫γ∇c·∇c/c².
    pub numerator: f64,
    /// ∫div(γ∇c)/c, equal to the numerator by Green's formula.
    pub green_numerator: f64,
    /// ∫(1/c² − 1).
    pub denominator: f64,
}

impl FrequencyPlan {
    /// ∫γ∇c·∇c/c² / ∫(1/c² − 1).
    pub fn energy_quotient(&self) -> f64 {
        self.numerator / self.denominator
    }

    /// Relative disagreement of the two numerators (quadrature defect).
    pub fn green_defect(&self) -> f64 {
        (self.numerator - self.green_numerator).abs() / self.numerator.abs()
    }
}

/// λ_{ε,α} = ∫γ∇c·∇c/c² / ∫(1/c² − 1) on the grid. The Green form
/// ∫div(γ∇c)/c is reported as a quadrature check.
pub fn compute_frequency(c: &ConformalFactor, gamma: &dyn ConductivityField, lambda0: f64, grid: &GridRule) -> Result<FrequencyPlan> {
    if c.eps == 0.0 || c.alpha == 0.0 {
        return Err(ForgeError::Construction("ε = 0 or α = 0 gives c ≡ 1 and an undefined frequency".into()));
    }
    let probe = grid.point(0);
    gamma.divergence_apply(&probe, &Vec3::zeros(), &Mat3::zeros())?;
    let [num, green, den] = grid_sum(grid, |x| {
        let j = c.jet(x);
        if j.value == 1.0 && j.grad == Vec3::zeros() && j.hess == Mat3::zeros() {
            return [0.0, 0.0, 0.0];
        }
        let inv2 = 1.0 / (j.value * j.value);
        let deficit = c.deficit(x);
        let div = gamma.divergence_apply(x, &j.grad, &j.hess).unwrap_or(f64::NAN);
        [(gamma.evaluate(x) * j.grad).dot(&j.grad) * inv2, div / j.value, deficit]
    });
    let lambda = num / den;
    if den == 0.0 || !lambda.is_finite() {
        return Err(ForgeError::Construction("degenerate frequency quotient".into()));
    }
    if lambda.signum() != lambda0.signum() {
        return Err(ForgeError::Construction(format!(
            "constructed frequency {lambda} has the wrong sign for λ₀ = {lambda0}; decrease ε"
        )));
    }
    Ok(FrequencyPlan {
        lambda0,
        lambda,
        scale: lambda0 / lambda,
        numerator: num,
        green_numerator: green,
        denominator: den,
    })
}

/// f = −div(γ∇c)/(λc) + 1/c² − 1 with quadrature statistics.
#[derive(Clone)]
pub struct ZeroMeanField {
    pub c: ConformalFactor,
    pub gamma: Conductivity,
    pub lambda: f64,
    /// ∫f in flux form: ∫g, since div q integrates to zero exactly.
    pub integral: f64,
    /// Direct grid sum of f (carries the quadrature error of ∫div q).
    pub integral_direct: f64,
    pub l1: f64,
    pub sup: f64,
    pub min_one_plus: f64,
}

impl std::fmt::Debug for ZeroMeanField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ZeroMeanField")
            .field("lambda", &self.lambda)
            .field("integral", &self.integral)
            .field("integral_direct", &self.integral_direct)
            .field("l1", &self.l1)
            .field("sup", &self.sup)
            .field("min_one_plus", &self.min_one_plus)
            .finish()
    }
}

fn f_from_jet(gamma: &dyn ConductivityField, lambda: f64, x: &Vec3, j: &Jet, deficit: f64) -> Result<f64> {
    if j.value == 1.0 && j.grad == Vec3::zeros() && j.hess == Mat3::zeros() {
        return Ok(0.0);
    }
    let div = gamma.divergence_apply(x, &j.grad, &j.hess)?;
    Ok(-div / (lambda * j.value) + deficit)
}

/// g = 1/c² − 1 − ∇c·γ∇c/(λc²), the part of f without second derivatives.
fn remainder_from_jet(gamma: &dyn ConductivityField, lambda: f64, x: &Vec3, j: &Jet, deficit: f64) -> f64 {
    if j.value == 1.0 && j.grad == Vec3::zeros() {
        return 0.0;
    }
    let c2 = j.value * j.value;
    deficit - j.grad.dot(&(gamma.evaluate(x) * j.grad)) / (lambda * c2)
}

/// Relative tolerance on ∫f against ‖f‖_{L¹}.
pub const ZERO_MEAN_TOL: f64 = 1e-10;

pub fn build_f(c: &ConformalFactor, gamma: Conductivity, lambda: f64, grid: &GridRule) -> Result<ZeroMeanField> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(ForgeError::InvalidInput("frequency for f must be nonzero".into()));
    }
    let probe = c.support();
    let centre = Vec3::new(
        0.5 * (probe.min[0] + probe.max[0]),
        0.5 * (probe.min[1] + probe.max[1]),
        0.5 * (probe.min[2] + probe.max[2]),
    );
    gamma.divergence_apply(&centre, &Vec3::zeros(), &Mat3::zeros())?;
    let chunk = 4096usize;
    let n = grid.len();
    let parts: Vec<[f64; 5]> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|k| {
            let mut acc = [0.0, 0.0, 0.0, f64::INFINITY, 0.0];
            for i in k * chunk..((k + 1) * chunk).min(n) {
                let x = grid.point(i);
                let j = c.jet(&x);
                let d = c.deficit(&x);
                let f = f_from_jet(gamma.as_ref(), lambda, &x, &j, d).unwrap_or(f64::NAN);
                acc[0] += f;
                acc[1] += f.abs();
                acc[2] = acc[2].max(f.abs());
                acc[3] = acc[3].min(1.0 + f);
                acc[4] += remainder_from_jet(gamma.as_ref(), lambda, &x, &j, d);
            }
            acc
        })
        .collect();
    let mut tot = [0.0, 0.0, 0.0, f64::INFINITY, 0.0];
    for p in parts {
        tot[0] += p[0];
        tot[1] += p[1];
        tot[2] = tot[2].max(p[2]);
        tot[3] = tot[3].min(p[3]);
        tot[4] += p[4];
    }
    let w = grid.weight();
    let field = ZeroMeanField {
        c: c.clone(),
        gamma,
        lambda,
        integral: tot[4] * w,
        integral_direct: tot[0] * w,
        l1: tot[1] * w,
        sup: tot[2],
        min_one_plus: tot[3].min(1.0),
    };
    if !field.integral.is_finite() || !field.sup.is_finite() {
        return Err(ForgeError::Construction("non-finite source term".into()));
    }
    if field.integral.abs() > ZERO_MEAN_TOL * field.l1.max(f64::MIN_POSITIVE) {
        return Err(ForgeError::Incompatible { integral: field.integral, tolerance: ZERO_MEAN_TOL * field.l1 });
    }
    Ok(field)
}

impl ZeroMeanField {
    pub fn value(&self, x: &Vec3) -> f64 {
        let j = self.c.jet(x);
        f_from_jet(self.gamma.as_ref(), self.lambda, x, &j, self.c.deficit(x)).unwrap_or(f64::NAN)
    }

    /// div(γ∇c) + λ(c − 1/c + c f) at `x`.
    pub fn residual(&self, x: &Vec3) -> f64 {
        let j = self.c.jet(x);
        let f = f_from_jet(self.gamma.as_ref(), self.lambda, x, &j, self.c.deficit(x)).unwrap_or(f64::NAN);
        let div = self.gamma.divergence_apply(x, &j.grad, &j.hess).unwrap_or(f64::NAN);
        div + self.lambda * (j.value - 1.0 / j.value + j.value * f)
    }

    pub fn support(&self) -> Aabb {
        self.c.support()
    }
}

/// β = (λ₀/λ_{ε,α}) γ.
pub fn rescale_conductivity(gamma: Conductivity, plan: &FrequencyPlan) -> Conductivity {
    if plan.scale == 1.0 {
        return gamma;
    }
    Arc::new(Scaled { scale: plan.scale, inner: gamma })
}

/// Splitting f = div q + g with the closed-form flux q = −γ∇c/(λc) and the
/// remainder g = 1/c² − 1 − ∇c·γ∇c/(λc²), which has no second derivatives
/// of u.
#[derive(Clone)]
pub struct SourceFlux {
    pub c: ConformalFactor,
    pub gamma: Conductivity,
    pub lambda: f64,
}

/// q, Dq (`dq[(i, k)]` = ∂_k q_i), div q and ∇ div q at a point.
#[derive(Clone, Copy, Debug, Default)]
pub struct FluxJet {
    pub q: Vec3,
    pub dq: Mat3,
    pub div: f64,
    pub grad_div: Vec3,
}

/// Step of the fourth-order difference for second derivatives of γ.
const GAMMA_FD_STEP: f64 = 1e-3;

impl SourceFlux {
    pub fn new(field: &ZeroMeanField) -> Result<Self> {
        let x = field.support().min;
        let x = Vec3::new(x[0], x[1], x[2]);
        field.gamma.derivative(&x).ok_or_else(|| ForgeError::MissingDerivative(field.gamma.name()))?;
        Ok(SourceFlux { c: field.c.clone(), gamma: field.gamma.clone(), lambda: field.lambda })
    }

    fn gamma_derivative(&self, x: &Vec3) -> [Mat3; 3] {
        self.gamma.derivative(x).unwrap_or([Mat3::zeros(); 3])
    }

    /// `out[l][k]` = ∂_l ∂_k γ by fourth-order central differences of ∂γ.
    fn gamma_second(&self, x: &Vec3) -> [[Mat3; 3]; 3] {
        let h = GAMMA_FD_STEP;
        std::array::from_fn(|l| {
            let mut e = Vec3::zeros();
            e[l] = h;
            let d = |t: f64| self.gamma_derivative(&(x + e * t));
            let (p1, m1, p2, m2) = (d(1.0), d(-1.0), d(2.0), d(-2.0));
            std::array::from_fn(|k| (m2[k] - p2[k] + (p1[k] - m1[k]) * 8.0) / (12.0 * h))
        })
    }

    pub fn jet(&self, x: &Vec3) -> FluxJet {
        let j3 = self.c.jet3(x);
        let Jet { value: c, grad: gc, hess: h } = j3.jet;
        if gc == Vec3::zeros() && h == Mat3::zeros() {
            return FluxJet::default();
        }
        let lam = self.lambda;
        let g = self.gamma.evaluate(x);
        let dg = self.gamma_derivative(x);
        let ddg = self.gamma_second(x);
        let gv = g * gc;
        let b = gc.dot(&gv);
        let mut a = g.component_mul(&h).sum();
        for (k, dk) in dg.iter().enumerate() {
            a += (dk.row(k) * gc)[0];
        }
        let mut dq = (g * h) / c - gv * gc.transpose() / (c * c);
        for (k, dk) in dg.iter().enumerate() {
            let col = dk * gc / c;
            for i in 0..3 {
                dq[(i, k)] += col[i];
            }
        }
        let mut grad_div = Vec3::zeros();
        for l in 0..3 {
            let mut da = dg[l].component_mul(&h).sum() + g.component_mul(&j3.third[l]).sum();
            for k in 0..3 {
                da += (ddg[l][k].row(k) * gc)[0] + (dg[k].row(k) * h.column(l))[0];
            }
            let db = 2.0 * (h * gv)[l] + gc.dot(&(dg[l] * gc));
            grad_div[l] = -(da / c - a * gc[l] / (c * c) - db / (c * c) + 2.0 * b * gc[l] / (c * c * c)) / lam;
        }
        FluxJet { q: -gv / (lam * c), dq: -dq / lam, div: -(a / c - b / (c * c)) / lam, grad_div }
    }

    pub fn remainder(&self, x: &Vec3) -> f64 {
        remainder_from_jet(self.gamma.as_ref(), self.lambda, x, &self.c.jet(x), self.c.deficit(x))
    }

    pub fn support(&self) -> Aabb {
        self.c.support()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{AnisotropicSmooth, Identity};
    use crate::dictionary::{BumpDictionary, DictionaryConfig};
    use crate::energy_search::constrained_infimum;
    use crate::mesh::BoxDomain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(gamma: &dyn ConductivityField) -> (BumpExpansion, f64) {
        let cfg = DictionaryConfig {
            per_axis: 3,
            radius_spacings: 1.5,
            collar: 0.15,
            gram_points_per_radius: 10.0,
            fine_points_per_radius: 24.0,
        };
        let d = Arc::new(BumpDictionary::build(&BoxDomain::unit(), &cfg, gamma).unwrap());
        let (m, u) = constrained_infimum(&d).unwrap();
        (u, m)
    }

    #[test]
    fn zero_eps_gives_unit_factor_and_no_frequency() {
        let (u, _) = setup(&Identity);
        let c = ConformalFactor::new(u, 0.0, 0.5).unwrap();
        let x = Vec3::new(0.5, 0.45, 0.52);
        assert_eq!(c.value(&x), 1.0);
        assert!(compute_frequency(&c, &Identity, 10.0, &c.u.dict.fine_grid).is_err());
    }

    #[test]
    fn flux_split_reproduces_source() {
        for gamma in [Arc::new(Identity) as Conductivity, Arc::new(AnisotropicSmooth { amplitude: 0.3, domain: BoxDomain::unit() })] {
            let (u, _) = setup(gamma.as_ref());
            let c = ConformalFactor::new(u, 0.04, 0.6).unwrap();
            let plan = compute_frequency(&c, gamma.as_ref(), 20.0, &c.u.dict.fine_grid).unwrap();
            let f = build_f(&c, gamma.clone(), plan.lambda, &c.u.dict.fine_grid).unwrap();
            let split = SourceFlux::new(&f).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = split.support();
            for _ in 0..20 {
                let x = Vec3::from_fn(|k, _| rng.gen_range(s.min[k]..s.max[k]));
                let j = split.jet(&x);
                assert!((j.div + split.remainder(&x) - f.value(&x)).abs() < 1e-12);
                assert!((j.dq.trace() - j.div).abs() < 1e-12 * j.div.abs().max(1.0));
                let h = 1e-6;
                for k in 0..3 {
                    let mut e = Vec3::zeros();
                    e[k] = h;
                    let (p, m) = (split.jet(&(x + e)), split.jet(&(x - e)));
                    let dq = (p.q - m.q) / (2.0 * h);
                    let dd = (p.div - m.div) / (2.0 * h);
                    let scale = j.dq.amax().max(1e-3);
                    assert!((dq - j.dq.column(k)).amax() < 1e-5 * scale, "{dq} {}", j.dq.column(k));
                    assert!((dd - j.grad_div[k]).abs() < 1e-5 * j.grad_div.amax().max(1e-3), "{dd} {}", j.grad_div[k]);
                }
            }
        }
    }

    #[test]
    fn chain_rule_jet_matches_finite_differences() {
        let (u, _) = setup(&Identity);
        let c = ConformalFactor::new(u, 0.05, 0.7).unwrap();
        let x = Vec3::new(0.47, 0.52, 0.41);
        let j = c.jet(&x);
        let h = 1e-5;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let g = (c.value(&(x + e)) - c.value(&(x - e))) / (2.0 * h);
            assert!((g - j.grad[k]).abs() < 1e-7 * (1.0 + j.grad.norm()));
            let hc = (c.jet(&(x + e)).grad - c.jet(&(x - e)).grad) / (2.0 * h);
            for i in 0..3 {
                assert!((hc[i] - j.hess[(i, k)]).abs() < 1e-5 * (1.0 + j.hess.norm()));
            }
        }
    }

    #[test]
    fn taylor_remainder_is_second_order() {
        let (u, _) = setup(&Identity);
        let x = *u
            .dict
            .centers
            .iter()
            .max_by(|a, b| u.value(a).abs().partial_cmp(&u.value(b).abs()).unwrap())
            .unwrap();
        let rem = |eps: f64| {
            let c = ConformalFactor::new(u.clone(), eps, 0.5).unwrap();
            (c.value(&x) - (1.0 + eps * 0.5 * u.value(&x))).abs()
        };
        let r1 = rem(0.002);
        let r2 = rem(0.001);
        assert!((r1 / r2 - 4.0).abs() < 0.2);
    }

    #[test]
    fn positivity_guard() {
        let (u, _) = setup(&Identity);
        let sup = u.sup_norm();
        assert!(ConformalFactor::new(u, 0.6 / sup, 0.5).is_err());
    }

    #[test]
    fn f_has_zero_mean_and_solves_the_identity() {
        let g: Conductivity = Arc::new(AnisotropicSmooth { amplitude: 0.2, domain: BoxDomain::unit() });
        let (u, _) = setup(g.as_ref());
        let c = ConformalFactor::new(u, 0.05, 0.5).unwrap();
        let grid = c.u.dict.fine_grid.clone();
        let plan = compute_frequency(&c, g.as_ref(), 20.0, &grid).unwrap();
        let f = build_f(&c, g.clone(), plan.lambda, &grid).unwrap();
        assert!(f.integral.abs() <= ZERO_MEAN_TOL * f.l1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            assert!(f.residual(&x).abs() <= 1e-12 * plan.lambda.abs());
        }
        assert_eq!(f.value(&Vec3::new(0.05, 0.5, 0.5)), 0.0);
    }

    #[test]
    fn frequency_matches_refined_quadrature_oracle() {
        let cfg = DictionaryConfig {
            per_axis: 2,
            radius_spacings: 1.0,
            collar: 0.3,
            gram_points_per_radius: 10.0,
            fine_points_per_radius: 96.0,
        };
        let d = Arc::new(BumpDictionary::build(&BoxDomain::unit(), &cfg, &Identity).unwrap());
        let (_, u) = constrained_infimum(&d).unwrap();
        let c = ConformalFactor::new(u, 0.02, 0.5).unwrap();
        let plan = compute_frequency(&c, &Identity, 20.0, &d.fine_grid).unwrap();
        // The energy form of the quotient converges much faster than the
        // Hessian form, so it serves as the oracle.
        let oracle = plan.energy_quotient();
        assert!((plan.lambda - oracle).abs() < 1e-8 * oracle.abs(), "{plan:?} {oracle}");
    }

    #[test]
    fn rescaling_scales_the_conductivity() {
        let plan = FrequencyPlan { lambda0: 10.0, lambda: 4.0, scale: 2.5, numerator: 1.0, green_numerator: 1.0, denominator: 0.25 };
        let b = rescale_conductivity(Arc::new(Identity), &plan);
        assert_eq!(b.evaluate(&Vec3::new(0.2, 0.3, 0.4)), Mat3::identity() * 2.5);
        let same = FrequencyPlan { scale: 1.0, ..plan };
        assert_eq!(rescale_conductivity(Arc::new(Identity), &same).ellipticity(), (1.0, 1.0));
    }
}
