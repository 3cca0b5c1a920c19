use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Closed axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn empty() -> Self {
        Aabb {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    /// Strict interior test; points on the faces are outside.
    pub fn contains_open(&self, x: &Vec3) -> bool {
        (0..3).all(|k| x[k] > self.min[k] && x[k] < self.max[k])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        for k in 0..3 {
            out.min[k] = out.min[k].min(other.min[k]);
            out.max[k] = out.max[k].max(other.max[k]);
        }
        out
    }

    pub fn extent(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    pub fn volume(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            (0..3).map(|k| self.extent(k)).product()
        }
    }
}

pub fn to_array(v: &Vec3) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

/// Symmetric part of a 3x3 matrix.
pub fn sym(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric 3x3 matrix, or `None` when the
/// Cholesky factorization fails.
pub fn spd_min_eigenvalue(m: &Mat3) -> Option<f64> {
    nalgebra::Cholesky::new(*m)?;
    Some(m.symmetric_eigenvalues().min())
}
