//! Conformal-volume invariant I(γ) = ∫(det γ)^{1/(n−2)} and the
//! second-order non-isometry certificate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::ConductivityField;
use crate::conformal::ConformalFactor;
use crate::dictionary::grid_sum;
use crate::energy_search::excluded_alpha;
use crate::error::{ForgeError, Result};
use crate::geometry::{Aabb, Vec3};
use crate::mesh::Mesh;
use crate::pushforward::PushforwardConductivity;
use crate::quadrature::{gauss_legendre, GridRule, TetRule};

/// Space dimension.
pub const DIM: usize = 3;

/// 1/(n−2).
pub fn invariant_exponent(n: usize) -> f64 {
    1.0 / (n as f64 - 2.0)
}

fn density(g: &dyn ConductivityField, x: &Vec3) -> f64 {
    g.evaluate(x).determinant().powf(invariant_exponent(DIM))
}

fn tet_quadrature(g: &dyn ConductivityField, mesh: &Mesh, rule: &TetRule) -> f64 {
    let parts: Vec<f64> = (0..mesh.num_tets())
        .into_par_iter()
        .map(|t| {
            let vol = mesh.signed_volume(t).abs();
            rule.points.iter().zip(&rule.weights).map(|(p, w)| w * vol * density(g, &mesh.point(t, p))).sum()
        })
        .collect();
    parts.iter().sum()
}

/// Order-4 element quadrature of (det γ)^{1/(n−2)} over the mesh.
pub fn volume_invariant(g: &dyn ConductivityField, mesh: &Mesh) -> f64 {
    tet_quadrature(g, mesh, &TetRule::order4())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Invariant with `8^level` sub-elements and the difference to one more level
/// as error estimate.
pub fn volume_invariant_estimate(g: &dyn ConductivityField, mesh: &Mesh, level: u32) -> Estimate {
    let base = TetRule::order4();
    let a = tet_quadrature(g, mesh, &base.refined(level));
    let b = tet_quadrature(g, mesh, &base.refined(level + 1));
    Estimate { value: b, error: (a - b).abs() }
}

/// Tensor Gauss–Legendre integral of `f` over a box.
pub fn gauss_box<F>(region: &Aabb, panels: usize, order: usize, f: F) -> f64
where
    F: Fn(&Vec3) -> f64 + Sync,
{
    let (x, w) = gauss_legendre(order);
    let m = panels * order;
    let node = |k: usize, i: usize| {
        let h = region.extent(k) / panels as f64;
        let (p, q) = (i / order, i % order);
        (region.min[k] + h * (p as f64 + 0.5 * (x[q] + 1.0)), 0.5 * h * w[q])
    };
    let planes: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|k| {
            let (z, wz) = node(2, k);
            let mut s = 0.0;
            for j in 0..m {
                let (y, wy) = node(1, j);
                for i in 0..m {
                    let (xx, wx) = node(0, i);
                    s += wx * wy * f(&Vec3::new(xx, y, z));
                }
            }
            wz * s
        })
        .collect();
    planes.iter().sum()
}

/// ∫ over the map support of det(Ψ*β)(y) dy and of det β(x) dx. The change of
/// variables gives equality (the exponent on 1 + f is 0).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PushforwardInvariantCheck {
    pub pushed: f64,
    pub base: f64,
    pub relative_defect: f64,
}

pub fn pushforward_invariant_check(push: &PushforwardConductivity, panels: usize) -> PushforwardInvariantCheck {
    let region = push.map.support();
    let pushed = gauss_box(&region, panels, 4, |y| density(push, y));
    let base = gauss_box(&region, panels, 4, |x| density(push.base.as_ref(), x));
    PushforwardInvariantCheck { pushed, base, relative_defect: (pushed - base).abs() / base.abs() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NonIsometric,
    Inconclusive,
}

/// Evidence that c²β and Ψ*β are not related by a volume-preserving map.
/// One-sided: a nonzero gap proves non-isometry, a zero gap proves nothing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IsometryCertificate {
    /// I(Ψ*β), equal to I(β).
    pub invariant_pushforward: f64,
    /// I(c²β).
    pub invariant_conformal: f64,
    /// I(c²β) − I(Ψ*β).
    pub gap: f64,
    pub error_bound: f64,
    pub predicted: f64,
    pub ratio: f64,
    pub verdict: Verdict,
}

/// Required margin of |ΔI| over its error bound.
pub const VERDICT_MARGIN: f64 = 10.0;

/// Grids used by the certificate: the gap on `fine`, with `coarse` for the
/// error estimate.
pub struct CertificateGrids<'a> {
    pub fine: &'a GridRule,
    pub coarse: &'a GridRule,
}

/// ΔI = s^{n/(n−2)} ∫ (c^{2n/(n−2)} − 1)(det γ)^{1/(n−2)} and the predicted
/// ε² term s^{n/(n−2)} ε² (αn/(n−2))(2αn/(n−2) − 1) ∫ u² (det γ)^{1/(n−2)}.
///
/// `base_invariant` is I(β) over the whole domain and `pushforward_tol`
/// bounds the error of I(Ψ*β) = I(β).
pub fn second_order_certificate(
    gamma: &dyn ConductivityField,
    c: &ConformalFactor,
    scale: f64,
    grids: &CertificateGrids<'_>,
    base_invariant: f64,
    pushforward_tol: f64,
) -> Result<IsometryCertificate> {
    let n = DIM as f64;
    if (c.alpha - excluded_alpha(DIM)).abs() < 1e-12 {
        return Err(ForgeError::InvalidInput(format!("α = {} is the excluded value 1/2 − 1/n", c.alpha)));
    }
    let power = 2.0 * n / (n - 2.0);
    let sn = scale.powf(n / (n - 2.0));
    let integrand = |x: &Vec3| {
        let u = c.u.value(x);
        if u == 0.0 {
            return [0.0, 0.0];
        }
        let d = density(gamma, x);
        // (1+εu)^{αp} − 1 without cancellation.
        let t = (c.alpha * power * (c.eps * u).ln_1p()).exp_m1();
        [t * d, u * u * d]
    };
    let [fine, u2] = grid_sum(grids.fine, integrand);
    let [coarse, _] = grid_sum(grids.coarse, integrand);
    let gap = sn * fine;
    let a = c.alpha;
    let predicted = sn * c.eps * c.eps * (a * n / (n - 2.0)) * (2.0 * a * n / (n - 2.0) - 1.0) * u2;
    let error_bound = sn * (fine - coarse).abs() + pushforward_tol;
    let verdict = if c.eps > 0.0 && gap.abs() >= VERDICT_MARGIN * error_bound {
        Verdict::NonIsometric
    } else {
        Verdict::Inconclusive
    };
    Ok(IsometryCertificate {
        invariant_pushforward: base_invariant,
        invariant_conformal: base_invariant + gap,
        gap,
        error_bound,
        predicted,
        ratio: if predicted != 0.0 { gap / predicted } else { f64::NAN },
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{AnisotropicSmooth, Identity, Scaled};
    use crate::dictionary::{BumpDictionary, BumpExpansion, DictionaryConfig};
    use crate::energy_search::constrained_infimum;
    use crate::mesh::{build_box_mesh, BoxDomain};
    use crate::moser::{unimodular_flow, CurlField};
    use crate::pushforward::push_forward;
    use std::sync::Arc;

    #[test]
    fn identity_and_scaled_invariants() {
        let mesh = build_box_mesh(3, BoxDomain::unit()).unwrap();
        assert!((volume_invariant(&Identity, &mesh) - 1.0).abs() < 1e-14);
        let s = Scaled { scale: 1.7, inner: Arc::new(Identity) };
        assert!((volume_invariant(&s, &mesh) - 1.7f64.powi(3)).abs() < 1e-12);
        let est = volume_invariant_estimate(&AnisotropicSmooth { amplitude: 0.3, domain: BoxDomain::unit() }, &mesh, 0);
        assert!(est.error < 1e-3 && est.value > 0.0);
    }

    #[test]
    fn unimodular_pushforward_preserves_invariant() {
        let g: Arc<dyn ConductivityField> = Arc::new(AnisotropicSmooth { amplitude: 0.3, domain: BoxDomain::unit() });
        let field = CurlField { center: Vec3::new(0.5, 0.5, 0.5), radius: 0.3, amplitude: 0.04, axis: Vec3::new(0.0, 0.6, 0.8) };
        let push = PushforwardConductivity::new(g.clone(), Arc::new(unimodular_flow(field, 32))).unwrap();
        let check = pushforward_invariant_check(&push, 12);
        assert!(check.relative_defect < 1e-6, "{check:?}");
        let _ = push_forward(g, Arc::new(unimodular_flow(field, 8))).unwrap();
    }

    fn factor(eps: f64) -> ConformalFactor {
        let cfg = DictionaryConfig { per_axis: 3, ..DictionaryConfig::default() };
        let dict = Arc::new(BumpDictionary::build(&BoxDomain::unit(), &cfg, &Identity).unwrap());
        let (_, u) = constrained_infimum(&dict).unwrap();
        let _ = BumpExpansion::new(dict, u.coeffs.clone());
        ConformalFactor::new(u, eps, 0.125).unwrap()
    }

    #[test]
    fn gap_is_second_order_and_matches_prediction() {
        let c = factor(0.01);
        let fine = GridRule::with_spacing(c.support(), c.u.dict.radius / 24.0);
        let coarse = GridRule::with_spacing(c.support(), c.u.dict.radius / 12.0);
        let grids = CertificateGrids { fine: &fine, coarse: &coarse };
        let zero = ConformalFactor { eps: 0.0, ..c.clone() };
        let cert0 = second_order_certificate(&Identity, &zero, 1.0, &grids, 1.0, 0.0).unwrap();
        assert_eq!(cert0.gap, 0.0);
        assert_eq!(cert0.verdict, Verdict::Inconclusive);
        let gaps: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&e| second_order_certificate(&Identity, &ConformalFactor { eps: e, ..c.clone() }, 1.0, &grids, 1.0, 0.0).unwrap().gap)
            .collect();
        let slope = (gaps[0].abs() / gaps[2].abs()).ln() / 4f64.ln();
        assert!((slope - 2.0).abs() < 0.1, "{slope}");
        let cert = second_order_certificate(&Identity, &c, 1.0, &grids, 1.0, 0.0).unwrap();
        assert!((cert.ratio - 1.0).abs() < 0.05, "{}", cert.ratio);
        assert_eq!(cert.verdict, Verdict::NonIsometric);
        let bad = ConformalFactor { alpha: excluded_alpha(3), ..c.clone() };
        assert!(second_order_certificate(&Identity, &bad, 1.0, &grids, 1.0, 0.0).is_err());
    }
}
