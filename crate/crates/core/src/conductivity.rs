//! Matrix-valued conductivities with analytic first derivatives.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::geometry::{Mat3, Vec3};
use crate::mesh::BoxDomain;

pub trait ConductivityField: Send + Sync {
    fn evaluate(&self, x: &Vec3) -> Mat3;

    /// Partial derivatives `d_k gamma` for k = 0, 1, 2, when available.
    fn derivative(&self, _x: &Vec3) -> Option<[Mat3; 3]> {
        None
    }

    /// div(gamma grad c) at `x` from the gradient and Hessian of c.
    fn divergence_apply(&self, x: &Vec3, grad: &Vec3, hess: &Mat3) -> Result<f64> {
        let d = self
            .derivative(x)
            .ok_or_else(|| ForgeError::MissingDerivative(self.name()))?;
        let g = self.evaluate(x);
        let mut s = g.component_mul(hess).sum();
        for (i, di) in d.iter().enumerate() {
            for j in 0..3 {
                s += di[(i, j)] * grad[j];
            }
        }
        Ok(s)
    }

    /// Lower and upper eigenvalue bounds over the domain.
    fn ellipticity(&self) -> (f64, f64);

    fn name(&self) -> String;
}

pub type Conductivity = Arc<dyn ConductivityField>;

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl ConductivityField for Identity {
    fn evaluate(&self, _x: &Vec3) -> Mat3 {
        Mat3::identity()
    }

    fn derivative(&self, _x: &Vec3) -> Option<[Mat3; 3]> {
        Some([Mat3::zeros(); 3])
    }

    fn ellipticity(&self) -> (f64, f64) {
        (1.0, 1.0)
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Unit-box coordinates of `x`.
fn unit_coords(domain: &BoxDomain, x: &Vec3) -> [f64; 3] {
    [
        (x[0] - domain.min[0]) / domain.extent(0),
        (x[1] - domain.min[1]) / domain.extent(1),
        (x[2] - domain.min[2]) / domain.extent(2),
    ]
}

/// a(x) I with a = 1 + amplitude * prod sin(pi t_k) in unit-box coordinates.
#[derive(Clone, Copy, Debug)]
pub struct IsotropicSmooth {
    pub amplitude: f64,
    pub domain: BoxDomain,
}

impl IsotropicSmooth {
    fn profile(&self, x: &Vec3) -> (f64, Vec3) {
        let t = unit_coords(&self.domain, x);
        let s = [(PI * t[0]).sin(), (PI * t[1]).sin(), (PI * t[2]).sin()];
        let c = [(PI * t[0]).cos(), (PI * t[1]).cos(), (PI * t[2]).cos()];
        let a = 1.0 + self.amplitude * s[0] * s[1] * s[2];
        let g = Vec3::new(
            PI / self.domain.extent(0) * c[0] * s[1] * s[2],
            PI / self.domain.extent(1) * s[0] * c[1] * s[2],
            PI / self.domain.extent(2) * s[0] * s[1] * c[2],
        ) * self.amplitude;
        (a, g)
    }
}

impl ConductivityField for IsotropicSmooth {
    fn evaluate(&self, x: &Vec3) -> Mat3 {
        Mat3::identity() * self.profile(x).0
    }

    fn derivative(&self, x: &Vec3) -> Option<[Mat3; 3]> {
        let (_, g) = self.profile(x);
        Some([
            Mat3::identity() * g[0],
            Mat3::identity() * g[1],
            Mat3::identity() * g[2],
        ])
    }

    fn ellipticity(&self) -> (f64, f64) {
        let a = self.amplitude;
        (1.0 - a.abs(), 1.0 + a.abs())
    }

    fn name(&self) -> String {
        format!("isotropic(amplitude={})", self.amplitude)
    }
}

/// I + amplitude * s sᵀ with s = (sin pi t_y, sin pi t_z, sin pi t_x).
#[derive(Clone, Copy, Debug)]
pub struct AnisotropicSmooth {
    pub amplitude: f64,
    pub domain: BoxDomain,
}

impl AnisotropicSmooth {
    fn vector(&self, x: &Vec3) -> (Vec3, [Vec3; 3]) {
        let t = unit_coords(&self.domain, x);
        let s = Vec3::new((PI * t[1]).sin(), (PI * t[2]).sin(), (PI * t[0]).sin());
        let mut ds = [Vec3::zeros(); 3];
        ds[1][0] = PI / self.domain.extent(1) * (PI * t[1]).cos();
        ds[2][1] = PI / self.domain.extent(2) * (PI * t[2]).cos();
        ds[0][2] = PI / self.domain.extent(0) * (PI * t[0]).cos();
        (s, ds)
    }
}

impl ConductivityField for AnisotropicSmooth {
    fn evaluate(&self, x: &Vec3) -> Mat3 {
        let (s, _) = self.vector(x);
        Mat3::identity() + s * s.transpose() * self.amplitude
    }

    fn derivative(&self, x: &Vec3) -> Option<[Mat3; 3]> {
        let (s, ds) = self.vector(x);
        let a = self.amplitude;
        Some([
            (ds[0] * s.transpose() + s * ds[0].transpose()) * a,
            (ds[1] * s.transpose() + s * ds[1].transpose()) * a,
            (ds[2] * s.transpose() + s * ds[2].transpose()) * a,
        ])
    }

    fn ellipticity(&self) -> (f64, f64) {
        let a = self.amplitude;
        (1.0 + 3.0 * a.min(0.0), 1.0 + 3.0 * a.max(0.0))
    }

    fn name(&self) -> String {
        format!("anisotropic(amplitude={})", self.amplitude)
    }
}

/// s * gamma for a positive constant s.
#[derive(Clone)]
pub struct Scaled {
    pub scale: f64,
    pub inner: Conductivity,
}

impl ConductivityField for Scaled {
    fn evaluate(&self, x: &Vec3) -> Mat3 {
        self.inner.evaluate(x) * self.scale
    }

    fn derivative(&self, x: &Vec3) -> Option<[Mat3; 3]> {
        self.inner
            .derivative(x)
            .map(|d| [d[0] * self.scale, d[1] * self.scale, d[2] * self.scale])
    }

    fn ellipticity(&self) -> (f64, f64) {
        let (lo, hi) = self.inner.ellipticity();
        (lo * self.scale, hi * self.scale)
    }

    fn name(&self) -> String {
        format!("{}*{}", self.scale, self.inner.name())
    }
}

/// Named built-in conductivity, as written in configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSpec {
    Identity,
    Isotropic { amplitude: f64 },
    Anisotropic { amplitude: f64 },
}

impl Default for GammaSpec {
    fn default() -> Self {
        GammaSpec::Identity
    }
}

impl GammaSpec {
    pub fn build(&self, domain: BoxDomain) -> Result<Conductivity> {
        match *self {
            GammaSpec::Identity => Ok(Arc::new(Identity)),
            GammaSpec::Isotropic { amplitude } => {
                if !(amplitude.abs() < 1.0) {
                    return Err(ForgeError::Config(format!(
                        "isotropic amplitude {amplitude} must lie in (-1, 1)"
                    )));
                }
                Ok(Arc::new(IsotropicSmooth { amplitude, domain }))
            }
            GammaSpec::Anisotropic { amplitude } => {
                if !(amplitude > -1.0 / 3.0) || !amplitude.is_finite() {
                    return Err(ForgeError::Config(format!(
                        "anisotropic amplitude {amplitude} must exceed -1/3"
                    )));
                }
                Ok(Arc::new(AnisotropicSmooth { amplitude, domain }))
            }
        }
    }
}

/// Checks symmetry and the ellipticity bounds of `gamma` at `points`.
pub fn check_ellipticity(gamma: &dyn ConductivityField, points: &[Vec3]) -> Result<()> {
    let (lo, hi) = gamma.ellipticity();
    for x in points {
        let g = gamma.evaluate(x);
        let asym = (g - g.transpose()).abs().max();
        let scale = g.abs().max().max(1.0);
        if asym > 1e-12 * scale || !g.iter().all(|v| v.is_finite()) {
            return Err(ForgeError::Ellipticity {
                at: [x[0], x[1], x[2]],
                detail: format!("asymmetry {asym:.3e}"),
            });
        }
        let ev = g.symmetric_eigenvalues();
        let (mn, mx) = (ev.min(), ev.max());
        let slack = 1e-12 * hi.abs().max(1.0);
        if mn <= 0.0 || mn < lo - slack || mx > hi + slack {
            return Err(ForgeError::Ellipticity {
                at: [x[0], x[1], x[2]],
                detail: format!("eigenvalues [{mn:.6e}, {mx:.6e}] outside [{lo:.6e}, {hi:.6e}]"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..n)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect()
    }

    fn fd_derivative(g: &dyn ConductivityField, x: &Vec3, k: usize) -> Mat3 {
        let h = 1e-6;
        let mut e = Vec3::zeros();
        e[k] = h;
        (g.evaluate(&(x + e)) - g.evaluate(&(x - e))) / (2.0 * h)
    }

    #[test]
    fn builtins_are_symmetric_elliptic() {
        let d = BoxDomain::unit();
        let pts = samples(200);
        for spec in [
            GammaSpec::Identity,
            GammaSpec::Isotropic { amplitude: 0.4 },
            GammaSpec::Anisotropic { amplitude: 0.3 },
        ] {
            let g = spec.build(d).unwrap();
            check_ellipticity(g.as_ref(), &pts).unwrap();
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let d = BoxDomain::new([0.0, 0.0, 0.0], [1.0, 2.0, 0.5]).unwrap();
        let fields: Vec<Conductivity> = vec![
            Arc::new(IsotropicSmooth { amplitude: 0.3, domain: d }),
            Arc::new(AnisotropicSmooth { amplitude: 0.25, domain: d }),
        ];
        for g in &fields {
            for x in samples(20) {
                let x = Vec3::new(x[0], 2.0 * x[1], 0.5 * x[2]);
                let dd = g.derivative(&x).unwrap();
                for k in 0..3 {
                    assert!((dd[k] - fd_derivative(g.as_ref(), &x, k)).abs().max() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn divergence_apply_matches_finite_difference_flux() {
        // c(x) = sin(x) cos(2y) exp(z); div(gamma grad c) by central differences of the flux.
        let g = AnisotropicSmooth { amplitude: 0.3, domain: BoxDomain::unit() };
        let grad_c = |x: &Vec3| {
            Vec3::new(
                x[0].cos() * (2.0 * x[1]).cos() * x[2].exp(),
                -2.0 * x[0].sin() * (2.0 * x[1]).sin() * x[2].exp(),
                x[0].sin() * (2.0 * x[1]).cos() * x[2].exp(),
            )
        };
        let x = Vec3::new(0.3, 0.6, 0.2);
        let (s, c2, s2, e) = (x[0].sin(), (2.0 * x[1]).cos(), (2.0 * x[1]).sin(), x[2].exp());
        let c1 = x[0].cos();
        let hess = Mat3::new(
            -s * c2 * e,
            -2.0 * c1 * s2 * e,
            c1 * c2 * e,
            -2.0 * c1 * s2 * e,
            -4.0 * s * c2 * e,
            -2.0 * s * s2 * e,
            c1 * c2 * e,
            -2.0 * s * s2 * e,
            s * c2 * e,
        );
        let v = g.divergence_apply(&x, &grad_c(&x), &hess).unwrap();
        let h = 1e-5;
        let mut fd = 0.0;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fp = g.evaluate(&(x + e)) * grad_c(&(x + e));
            let fm = g.evaluate(&(x - e)) * grad_c(&(x - e));
            fd += (fp[k] - fm[k]) / (2.0 * h);
        }
        assert!((v - fd).abs() < 1e-7);
    }

    #[test]
    fn scaled_scales_everything() {
        let base: Conductivity = Arc::new(AnisotropicSmooth { amplitude: 0.2, domain: BoxDomain::unit() });
        let s = Scaled { scale: 2.5, inner: base.clone() };
        let x = Vec3::new(0.1, 0.7, 0.4);
        assert!((s.evaluate(&x) - base.evaluate(&x) * 2.5).abs().max() < 1e-15);
        let (lo, hi) = base.ellipticity();
        assert_eq!(s.ellipticity(), (2.5 * lo, 2.5 * hi));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = GammaSpec::Anisotropic { amplitude: 0.2 };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<GammaSpec>(&text).unwrap(), spec);
        assert!(GammaSpec::Isotropic { amplitude: 1.5 }.build(BoxDomain::unit()).is_err());
    }
}
