//! Smooth compactly supported bump dictionary and expansions over it.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conductivity::ConductivityField;
use crate::error::{ForgeError, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::mesh::BoxDomain;
use crate::quadrature::{integrate_line, GridRule};

/// Dictionary geometry and quadrature densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionaryConfig {
    /// Centers per axis.
    pub per_axis: usize,
    /// Bump radius in units of the center spacing.
    pub radius_spacings: f64,
    /// Width of the boundary collar that every bump support avoids.
    pub collar: f64,
    /// Gram-matrix grid density (points per bump radius).
    pub gram_points_per_radius: f64,
    /// Density of the fine grid used for frequency and zero-mean integrals.
    pub fine_points_per_radius: f64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            per_axis: 5,
            radius_spacings: 1.5,
            collar: 0.125,
            gram_points_per_radius: 24.0,
            fine_points_per_radius: 32.0,
        }
    }
}

/// φ(q) = exp(−1/(1−q)) with q = r²/ρ², and its first two q-derivatives.
#[inline]
fn profile(q: f64) -> (f64, f64, f64) {
    if q >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let t = 1.0 / (1.0 - q);
    let g = (-t).exp();
    let gq = -g * t * t;
    let gqq = g * t * t * t * t * (2.0 * q - 1.0);
    (g, gq, gqq)
}

fn profile_third(q: f64) -> f64 {
    if q >= 1.0 {
        return 0.0;
    }
    let t = 1.0 / (1.0 - q);
    let g = (-t).exp();
    g * t.powi(4) * (2.0 + (2.0 * q - 1.0) * t * (4.0 - t))
}

/// Jet of exp(−1/(1 − |x−c|²/ρ²)) (zero outside the ball).
pub fn radial_bump_jet(center: &Vec3, radius: f64, x: &Vec3) -> Jet {
    let inv = 1.0 / (radius * radius);
    let d = x - center;
    let (g, gq, gqq) = profile(d.norm_squared() * inv);
    if g == 0.0 {
        return Jet::default();
    }
    let grad = d * (2.0 * gq * inv);
    let hess = d * d.transpose() * (4.0 * gqq * inv * inv) + Mat3::identity() * (2.0 * gq * inv);
    Jet { value: g, grad, hess }
}

/// Jet with third derivatives, `third[k]` = ∂_k of the Hessian.
#[derive(Clone, Copy, Debug, Default)]
pub struct Jet3 {
    pub jet: Jet,
    pub third: [Mat3; 3],
}

pub fn radial_bump_jet3(center: &Vec3, radius: f64, x: &Vec3) -> Jet3 {
    let inv = 1.0 / (radius * radius);
    let d = x - center;
    let q = d.norm_squared() * inv;
    let (_, _, gqq) = profile(q);
    let jet = radial_bump_jet(center, radius, x);
    if jet.value == 0.0 {
        return Jet3::default();
    }
    let g3 = profile_third(q);
    let ddt = d * d.transpose();
    let third = std::array::from_fn(|k| {
        let mut t = ddt * (8.0 * g3 * inv * inv * inv * d[k]) + Mat3::identity() * (4.0 * gqq * inv * inv * d[k]);
        for i in 0..3 {
            t[(i, k)] += 4.0 * gqq * inv * inv * d[i];
            t[(k, i)] += 4.0 * gqq * inv * inv * d[i];
        }
        t
    });
    Jet3 { jet, third }
}

/// Value, gradient and Hessian of a bump.
#[derive(Clone, Copy, Debug, Default)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec3,
    pub hess: Mat3,
}

/// Gram data over the dictionary.
#[derive(Clone, Debug)]
pub struct Gram {
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub integrals: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct BumpDictionary {
    pub config: DictionaryConfig,
    pub centers: Vec<Vec3>,
    pub radius: f64,
    /// Box containing every bump support.
    pub support: Aabb,
    origin: [f64; 3],
    step: [f64; 3],
    pub gram: Gram,
    pub gram_grid: GridRule,
    pub fine_grid: GridRule,
}

/// Integral of one bump over R³.
pub fn bump_integral(radius: f64) -> f64 {
    let s2 = integrate_line(|s| s * s * profile(s * s).0, 0.0, 1.0, 64, 20);
    4.0 * PI * radius.powi(3) * s2
}

/// Sums `f` over the grid with a fixed chunking, so the result does not
/// depend on the thread count.
pub fn grid_sum<const N: usize, F>(grid: &GridRule, f: F) -> [f64; N]
where
    F: Fn(&Vec3) -> [f64; N] + Sync,
{
    let chunk = 4096usize;
    let n = grid.len();
    let parts: Vec<[f64; N]> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut acc = [0.0; N];
            for i in c * chunk..((c + 1) * chunk).min(n) {
                let v = f(&grid.point(i));
                for k in 0..N {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let w = grid.weight();
    let mut out = [0.0; N];
    for p in parts {
        for k in 0..N {
            out[k] += p[k];
        }
    }
    out.iter_mut().for_each(|v| *v *= w);
    out
}

impl BumpDictionary {
    pub fn build(domain: &BoxDomain, config: &DictionaryConfig, gamma: &dyn ConductivityField) -> Result<Self> {
        let n = config.per_axis;
        if n == 0 || !(config.radius_spacings > 0.0) || !(config.collar > 0.0) {
            return Err(ForgeError::Config("dictionary needs per_axis >= 1, positive radius and collar".into()));
        }
        let inner = domain.shrunk(config.collar);
        if inner.is_empty() || (0..3).any(|k| inner.extent(k) <= 0.0) {
            return Err(ForgeError::Config("dictionary collar exhausts the domain".into()));
        }
        let kappa = config.radius_spacings;
        let spacing = (0..3)
            .map(|k| inner.extent(k) / ((n as f64 - 1.0) + 2.0 * kappa))
            .fold(f64::INFINITY, f64::min);
        let radius = kappa * spacing;
        let mut origin = [0.0; 3];
        let mut step = [0.0; 3];
        for k in 0..3 {
            let lo = inner.min[k] + radius;
            let hi = inner.max[k] - radius;
            origin[k] = if n == 1 { 0.5 * (lo + hi) } else { lo };
            step[k] = if n == 1 { 0.0 } else { (hi - lo) / (n as f64 - 1.0) };
        }
        let mut centers = Vec::with_capacity(n * n * n);
        for kz in 0..n {
            for ky in 0..n {
                for kx in 0..n {
                    centers.push(Vec3::new(
                        origin[0] + kx as f64 * step[0],
                        origin[1] + ky as f64 * step[1],
                        origin[2] + kz as f64 * step[2],
                    ));
                }
            }
        }
        let mut support = Aabb::empty();
        for c in &centers {
            support = support.union(&Aabb::new(
                [c[0] - radius, c[1] - radius, c[2] - radius],
                [c[0] + radius, c[1] + radius, c[2] + radius],
            ));
        }
        let gram_grid = GridRule::with_spacing(support, radius / config.gram_points_per_radius);
        let fine_grid = GridRule::with_spacing(support, radius / config.fine_points_per_radius);
        let empty = Gram {
            stiffness: DMatrix::zeros(0, 0),
            mass: DMatrix::zeros(0, 0),
            integrals: DVector::zeros(0),
        };
        let mut dict = BumpDictionary {
            config: config.clone(),
            centers,
            radius,
            support,
            origin,
            step,
            gram: empty,
            gram_grid,
            fine_grid,
        };
        dict.gram = dict.assemble_gram(gamma);
        Ok(dict)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Indices of bumps whose support contains `x`.
    pub fn active(&self, x: &Vec3, out: &mut Vec<usize>) {
        out.clear();
        let n = self.config.per_axis;
        let mut range = [(0usize, 0usize); 3];
        for k in 0..3 {
            if self.step[k] == 0.0 {
                range[k] = (0, 0);
                if (x[k] - self.origin[k]).abs() >= self.radius {
                    return;
                }
                continue;
            }
            let lo = ((x[k] - self.radius - self.origin[k]) / self.step[k]).ceil();
            let hi = ((x[k] + self.radius - self.origin[k]) / self.step[k]).floor();
            let lo = lo.max(0.0);
            let hi = hi.min(n as f64 - 1.0);
            if lo > hi {
                return;
            }
            range[k] = (lo as usize, hi as usize);
        }
        for kz in range[2].0..=range[2].1 {
            for ky in range[1].0..=range[1].1 {
                for kx in range[0].0..=range[0].1 {
                    let j = kx + n * (ky + n * kz);
                    if (x - self.centers[j]).norm_squared() < self.radius * self.radius {
                        out.push(j);
                    }
                }
            }
        }
    }

    pub fn bump_value(&self, j: usize, x: &Vec3) -> f64 {
        profile((x - self.centers[j]).norm_squared() / (self.radius * self.radius)).0
    }

    pub fn bump_jet(&self, j: usize, x: &Vec3) -> Jet {
        radial_bump_jet(&self.centers[j], self.radius, x)
    }

    fn assemble_gram(&self, gamma: &dyn ConductivityField) -> Gram {
        let nb = self.len();
        let grid = &self.gram_grid;
        let chunk = 2048usize;
        let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len().div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut k = vec![0.0; nb * nb];
                let mut m = vec![0.0; nb * nb];
                let mut act = Vec::new();
                let mut vals = Vec::new();
                let mut grads = Vec::new();
                for i in c * chunk..((c + 1) * chunk).min(grid.len()) {
                    let x = grid.point(i);
                    self.active(&x, &mut act);
                    if act.is_empty() {
                        continue;
                    }
                    let g = gamma.evaluate(&x);
                    vals.clear();
                    grads.clear();
                    for &j in &act {
                        let jet = self.bump_jet(j, &x);
                        vals.push(jet.value);
                        grads.push(jet.grad);
                    }
                    let flux: Vec<Vec3> = grads.iter().map(|gr| g * gr).collect();
                    for (a, &ja) in act.iter().enumerate() {
                        for (b, &jb) in act.iter().enumerate() {
                            m[ja * nb + jb] += vals[a] * vals[b];
                            k[ja * nb + jb] += flux[a].dot(&grads[b]);
                        }
                    }
                }
                (k, m)
            })
            .collect();
        let w = grid.weight();
        let mut k = DMatrix::zeros(nb, nb);
        let mut m = DMatrix::zeros(nb, nb);
        for (pk, pm) in parts {
            for a in 0..nb {
                for b in 0..nb {
                    k[(a, b)] += pk[a * nb + b];
                    m[(a, b)] += pm[a * nb + b];
                }
            }
        }
        k *= w;
        m *= w;
        let k = (&k + k.transpose()) * 0.5;
        let m = (&m + m.transpose()) * 0.5;
        let integrals = DVector::from_element(nb, bump_integral(self.radius));
        Gram { stiffness: k, mass: m, integrals }
    }

    /// ∫ φ_j f on the Gram grid, for every j.
    pub fn project<F>(&self, f: F) -> DVector<f64>
    where
        F: Fn(&Vec3) -> f64 + Sync,
    {
        let nb = self.len();
        let grid = &self.gram_grid;
        let chunk = 2048usize;
        let parts: Vec<Vec<f64>> = (0..grid.len().div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; nb];
                let mut act = Vec::new();
                for i in c * chunk..((c + 1) * chunk).min(grid.len()) {
                    let x = grid.point(i);
                    self.active(&x, &mut act);
                    if act.is_empty() {
                        continue;
                    }
                    let fx = f(&x);
                    for &j in &act {
                        acc[j] += fx * self.bump_value(j, &x);
                    }
                }
                acc
            })
            .collect();
        let mut out = DVector::zeros(nb);
        for p in parts {
            for j in 0..nb {
                out[j] += p[j];
            }
        }
        out * grid.weight()
    }
}

/// u = Σ a_j φ_j.
#[derive(Clone, Debug)]
pub struct BumpExpansion {
    pub dict: Arc<BumpDictionary>,
    pub coeffs: DVector<f64>,
}

impl BumpExpansion {
    pub fn new(dict: Arc<BumpDictionary>, coeffs: DVector<f64>) -> Self {
        BumpExpansion { dict, coeffs }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        if !self.dict.support.contains(x) {
            return 0.0;
        }
        let mut act = Vec::with_capacity(64);
        self.dict.active(x, &mut act);
        act.iter().map(|&j| self.coeffs[j] * self.dict.bump_value(j, x)).sum()
    }

    pub fn jet(&self, x: &Vec3) -> Jet {
        let mut out = Jet::default();
        if !self.dict.support.contains(x) {
            return out;
        }
        let mut act = Vec::with_capacity(64);
        self.dict.active(x, &mut act);
        for &j in &act {
            let a = self.coeffs[j];
            let jet = self.dict.bump_jet(j, x);
            out.value += a * jet.value;
            out.grad += jet.grad * a;
            out.hess += jet.hess * a;
        }
        out
    }

    pub fn jet3(&self, x: &Vec3) -> Jet3 {
        let mut out = Jet3::default();
        if !self.dict.support.contains(x) {
            return out;
        }
        let mut act = Vec::with_capacity(64);
        self.dict.active(x, &mut act);
        for &j in &act {
            let a = self.coeffs[j];
            let b = radial_bump_jet3(&self.dict.centers[j], self.dict.radius, x);
            out.jet.value += a * b.jet.value;
            out.jet.grad += b.jet.grad * a;
            out.jet.hess += b.jet.hess * a;
            for k in 0..3 {
                out.third[k] += b.third[k] * a;
            }
        }
        out
    }

    /// ∫ u = bᵀa.
    pub fn integral(&self) -> f64 {
        self.dict.gram.integrals.dot(&self.coeffs)
    }

    /// ‖u‖₂² = aᵀMa.
    pub fn norm_squared(&self) -> f64 {
        self.coeffs.dot(&(&self.dict.gram.mass * &self.coeffs))
    }

    /// ⟨L_γ u, u⟩ = aᵀKa.
    pub fn energy(&self) -> f64 {
        self.coeffs.dot(&(&self.dict.gram.stiffness * &self.coeffs))
    }

    /// Maximum of |u| over a grid of spacing ρ/16, refined by local search.
    pub fn sup_norm(&self) -> f64 {
        let grid = GridRule::with_spacing(self.dict.support, self.dict.radius / 16.0);
        let best = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let x = grid.point(i);
                (self.value(&x).abs(), i)
            })
            .reduce(|| (0.0, 0), |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
        let mut x = grid.point(best.1);
        let mut v = best.0;
        let mut h = grid.step(0);
        for _ in 0..30 {
            let mut moved = false;
            for k in 0..3 {
                for s in [-1.0, 1.0] {
                    let mut y = x;
                    y[k] += s * h;
                    let vy = self.value(&y).abs();
                    if vy > v {
                        v = vy;
                        x = y;
                        moved = true;
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        v
    }
}
