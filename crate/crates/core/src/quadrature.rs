//! Quadrature rules: symmetric tetrahedral rules with uniform sub-tet
//! refinement, uniform midpoint grids, and Gauss-Legendre lines.

use crate::geometry::{Aabb, Vec3};

/// Rule on the reference tetrahedron in barycentric coordinates; weights sum to 1.
#[derive(Clone, Debug)]
pub struct TetRule {
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

fn orbit_4(a: f64) -> Vec<[f64; 4]> {
    let b = 1.0 - 3.0 * a;
    vec![[b, a, a, a], [a, b, a, a], [a, a, b, a], [a, a, a, b]]
}

fn orbit_6(a: f64) -> Vec<[f64; 4]> {
    let b = 0.5 - a;
    vec![
        [a, a, b, b],
        [a, b, a, b],
        [a, b, b, a],
        [b, a, a, b],
        [b, a, b, a],
        [b, b, a, a],
    ]
}

impl TetRule {
    /// Fourteen-point symmetric rule, exact for polynomials of degree 5.
    pub fn order4() -> Self {
        let groups: [(f64, f64, bool); 3] = [
            (0.310_885_919_263_300_6, 0.112_687_925_718_015_9, true),
            (0.092_735_250_310_891_2, 0.073_493_043_116_361_9, true),
            (0.045_503_704_125_649_6, 0.042_546_020_777_081_5, false),
        ];
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (a, w, four) in groups {
            let orbit = if four { orbit_4(a) } else { orbit_6(a) };
            for p in orbit {
                points.push(p);
                weights.push(w);
            }
        }
        TetRule { points, weights }
    }

    pub fn centroid() -> Self {
        TetRule {
            points: vec![[0.25; 4]],
            weights: vec![1.0],
        }
    }

    /// Composite rule over `8^level` congruent-volume sub-tetrahedra.
    pub fn refined(&self, level: u32) -> Self {
        let mut subs: Vec<[[f64; 4]; 4]> = vec![[
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]];
        for _ in 0..level {
            subs = subs.iter().flat_map(split8).collect();
        }
        let frac = 1.0 / subs.len() as f64;
        let mut points = Vec::with_capacity(subs.len() * self.points.len());
        let mut weights = Vec::with_capacity(points.capacity());
        for s in &subs {
            for (p, w) in self.points.iter().zip(&self.weights) {
                let mut q = [0.0; 4];
                for (v, &l) in s.iter().zip(p.iter()) {
                    for k in 0..4 {
                        q[k] += l * v[k];
                    }
                }
                points.push(q);
                weights.push(w * frac);
            }
        }
        TetRule { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn mid(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        0.5 * (a[0] + b[0]),
        0.5 * (a[1] + b[1]),
        0.5 * (a[2] + b[2]),
        0.5 * (a[3] + b[3]),
    ]
}

fn split8(t: &[[f64; 4]; 4]) -> Vec<[[f64; 4]; 4]> {
    let [v0, v1, v2, v3] = *t;
    let m01 = mid(&v0, &v1);
    let m02 = mid(&v0, &v2);
    let m03 = mid(&v0, &v3);
    let m12 = mid(&v1, &v2);
    let m13 = mid(&v1, &v3);
    let m23 = mid(&v2, &v3);
    vec![
        [v0, m01, m02, m03],
        [m01, v1, m12, m13],
        [m02, m12, v2, m23],
        [m03, m13, m23, v3],
        [m01, m02, m03, m13],
        [m01, m02, m12, m13],
        [m02, m03, m13, m23],
        [m02, m12, m13, m23],
    ]
}

/// Uniform midpoint grid over a box with equal weights.
#[derive(Clone, Debug)]
pub struct GridRule {
    pub region: Aabb,
    pub counts: [usize; 3],
}

impl GridRule {
    /// Grid whose spacing does not exceed `spacing` along any axis.
    pub fn with_spacing(region: Aabb, spacing: f64) -> Self {
        let mut counts = [1usize; 3];
        for (k, c) in counts.iter_mut().enumerate() {
            *c = ((region.extent(k) / spacing).ceil() as usize).max(1);
        }
        GridRule { region, counts }
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight(&self) -> f64 {
        self.region.volume() / self.len() as f64
    }

    pub fn step(&self, k: usize) -> f64 {
        self.region.extent(k) / self.counts[k] as f64
    }

    pub fn point(&self, idx: usize) -> Vec3 {
        let i = idx % self.counts[0];
        let j = (idx / self.counts[0]) % self.counts[1];
        let k = idx / (self.counts[0] * self.counts[1]);
        Vec3::new(
            self.region.min[0] + (i as f64 + 0.5) * self.step(0),
            self.region.min[1] + (j as f64 + 0.5) * self.step(1),
            self.region.min[2] + (k as f64 + 0.5) * self.step(2),
        )
    }

    /// Same region with the spacing halved.
    pub fn doubled(&self) -> Self {
        GridRule {
            region: self.region,
            counts: [2 * self.counts[0], 2 * self.counts[1], 2 * self.counts[2]],
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss-Legendre integral of `f` over `[a, b]`.
pub fn integrate_line<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(lo + 0.5 * h * (xi + 1.0));
        }
        total += 0.5 * h * s;
    }
    total
}
