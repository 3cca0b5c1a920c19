//! Constrained numerical range of L_γ over zero-mean, unit-norm functions and
//! synthesis of functions with a prescribed energy.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dictionary::{BumpDictionary, BumpExpansion};
use crate::error::{ForgeError, Result};
use crate::fem::{NodePartition, ScalarField};
use crate::linalg::generalized_eigen;
use crate::mesh::Mesh;
use crate::sparse::SparseSymMatrix;
use crate::spectral::{lowest_eigenpairs, EigenOptions, SpectrumReport};

/// Orthonormal basis (columns) of the complement of `b`, from one Householder
/// reflection.
pub fn null_space_basis(b: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = b.len();
    let nb = b.norm();
    if n < 2 || nb == 0.0 {
        return Err(ForgeError::InvalidInput("constraint vector must be nonzero with length >= 2".into()));
    }
    let mut v = b.clone();
    v[0] += nb.copysign(b[0]);
    let vv = v.norm_squared();
    let mut q = DMatrix::zeros(n, n - 1);
    for c in 1..n {
        let s = 2.0 * v[c] / vv;
        for r in 0..n {
            let e = if r == c { 1.0 } else { 0.0 };
            q[(r, c - 1)] = e - s * v[r];
        }
    }
    Ok(q)
}

/// All constrained Ritz pairs of (K, M) on `{a : bᵀa = 0}`, ascending,
/// with M-orthonormal coefficient columns.
#[derive(Clone, Debug)]
pub struct ConstrainedSpectrum {
    pub values: Vec<f64>,
    pub coeffs: DMatrix<f64>,
}

pub fn constrained_spectrum(k: &DMatrix<f64>, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<ConstrainedSpectrum> {
    let q = null_space_basis(b)?;
    let kq = q.transpose() * k * &q;
    let mq = q.transpose() * m * &q;
    let (values, y) = generalized_eigen(&kq, &mq)?;
    let mut coeffs = &q * y;
    for mut col in coeffs.column_iter_mut() {
        let s: f64 = col.iter().sum();
        if s < 0.0 {
            col.neg_mut();
        }
    }
    Ok(ConstrainedSpectrum { values, coeffs })
}

/// Removes the `b` component (Euclidean) and rescales to unit M-norm.
fn restore_constraints(a: &mut DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<()> {
    let s = b.dot(a) / b.norm_squared();
    a.axpy(-s, b, 1.0);
    let norm2 = a.dot(&(m * &*a));
    if !(norm2 > 0.0) {
        return Err(ForgeError::Construction("function vanishes after imposing the mean constraint".into()));
    }
    *a /= norm2.sqrt();
    Ok(())
}

/// m = inf W(L_γ) over the dictionary span, with a minimizer.
pub fn constrained_infimum(dict: &Arc<BumpDictionary>) -> Result<(f64, BumpExpansion)> {
    let spec = dictionary_spectrum(dict)?;
    let mut a = spec.coeffs.column(0).into_owned();
    restore_constraints(&mut a, &dict.gram.mass, &dict.gram.integrals)?;
    Ok((spec.values[0], BumpExpansion::new(dict.clone(), a)))
}

pub fn dictionary_spectrum(dict: &BumpDictionary) -> Result<ConstrainedSpectrum> {
    if dict.len() < 2 {
        return Err(ForgeError::Construction("dictionary too small for a zero-mean subspace".into()));
    }
    constrained_spectrum(&dict.gram.stiffness, &dict.gram.mass, &dict.gram.integrals)
}

/// m over the full interior P1 space: lowest eigenvalue of (K, M) restricted
/// to nodal vectors with ∫u_h = 0.
pub fn fem_constrained_infimum(mesh: &Mesh, k: &SparseSymMatrix, m: &SparseSymMatrix) -> Result<(f64, ScalarField)> {
    let part = NodePartition::new(mesh);
    let kii = k.block(&part.interior, &part.interior);
    let mii = m.block(&part.interior, &part.interior);
    let ones = vec![1.0; mii.nrows];
    let mut b = vec![0.0; mii.nrows];
    mii.matvec(&ones, &mut b);
    let res = lowest_eigenpairs(&kii, &mii, Some(&b), &EigenOptions::new(1))?;
    let zeros = vec![0.0; part.boundary.len()];
    Ok((res.values[0], part.scatter(&res.vectors[0], &zeros)))
}

/// Energy of v_k = (u_k − α u_1)/√(1+α²) for M-orthonormal eigenfunctions.
pub fn sweep_energy(lambda_k: f64, lambda_1: f64, alpha_k: f64) -> f64 {
    (lambda_k + alpha_k * alpha_k * lambda_1) / (1.0 + alpha_k * alpha_k)
}

/// The zero-mean combination v_k of eigenfunctions k and 1 (0-based `k`),
/// with α_k = ∫u_k / ∫u_1.
pub fn sweep_vector(spectrum: &SpectrumReport, mass: &SparseSymMatrix, k: usize) -> Result<(ScalarField, f64)> {
    if k == 0 || k >= spectrum.len() {
        return Err(ForgeError::InvalidInput(format!("sweep index {k} outside 1..{}", spectrum.len())));
    }
    let n = mass.n();
    let ones = vec![1.0; n];
    let mut w = vec![0.0; n];
    mass.matvec(&ones, &mut w);
    let integral = |u: &ScalarField| u.values.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let u1 = &spectrum.eigenvectors[0];
    let uk = &spectrum.eigenvectors[k];
    let alpha = integral(uk) / integral(u1);
    let scale = 1.0 / (1.0 + alpha * alpha).sqrt();
    let values = uk.values.iter().zip(&u1.values).map(|(a, b)| (a - alpha * b) * scale).collect();
    Ok((ScalarField { values }, alpha))
}

/// How the sweep reached the target energy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepSource {
    /// Least-squares fit of a mesh eigenfunction combination.
    MeshEigenfunction,
    /// Constrained Ritz vector of the dictionary itself.
    DictionaryRitz,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub v: BumpExpansion,
    pub index: usize,
    pub energy: f64,
    /// Relative L² residual of the least-squares fit (0 for Ritz vectors).
    pub fit_residual: f64,
    pub source: SweepSource,
}

/// Finds v in the dictionary span, zero-mean and unit-norm, with energy ≥ τ.
pub fn upper_sweep(
    dict: &Arc<BumpDictionary>,
    mesh: &Mesh,
    spectrum: &SpectrumReport,
    mass: &SparseSymMatrix,
    tau: f64,
) -> Result<SweepResult> {
    let m = &dict.gram.mass;
    let b = &dict.gram.integrals;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(m.clone())
        .ok_or_else(|| ForgeError::Construction("dictionary mass matrix is singular".into()))?;
    for k in 1..spectrum.len() {
        let (vk, _) = sweep_vector(spectrum, mass, k)?;
        let rhs = dict.project(|x| vk.evaluate(mesh, x));
        let mut a = chol.solve(&rhs);
        let captured = rhs.dot(&a);
        let norm2 = vk.values.iter().enumerate().map(|(i, vi)| vi * mass.row(i).map(|(j, w)| w * vk.values[j]).sum::<f64>()).sum::<f64>();
        let fit_residual = (1.0 - captured / norm2).max(0.0).sqrt();
        restore_constraints(&mut a, m, b)?;
        let energy = a.dot(&(&dict.gram.stiffness * &a));
        if energy >= tau {
            return Ok(SweepResult {
                v: BumpExpansion::new(dict.clone(), a),
                index: k,
                energy,
                fit_residual,
                source: SweepSource::MeshEigenfunction,
            });
        }
    }
    let spec = dictionary_spectrum(dict)?;
    for (j, &val) in spec.values.iter().enumerate() {
        if val >= tau {
            let mut a = spec.coeffs.column(j).into_owned();
            restore_constraints(&mut a, m, b)?;
            let energy = a.dot(&(&dict.gram.stiffness * &a));
            return Ok(SweepResult {
                v: BumpExpansion::new(dict.clone(), a),
                index: j,
                energy,
                fit_residual: 0.0,
                source: SweepSource::DictionaryRitz,
            });
        }
    }
    Err(ForgeError::Construction(format!(
        "dictionary cannot reach energy {tau} (max {}); enlarge the dictionary",
        spec.values.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Result of the bisection along w_t = (t u + (1−t) v)/‖·‖.
#[derive(Clone, Debug)]
pub struct EnergyTarget {
    pub w: BumpExpansion,
    pub t: f64,
    pub energy: f64,
    pub iterations: usize,
}

fn path_point(u: &DVector<f64>, v: &DVector<f64>, t: f64, m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let a = u * t + v * (1.0 - t);
    let n2 = a.dot(&(m * &a));
    if !(n2 > 0.0) {
        return Err(ForgeError::Construction(format!("interpolation path vanishes at t = {t}")));
    }
    Ok(a / n2.sqrt())
}

/// Bisection on t until |energy(w_t) − τ| ≤ rel_tol·τ.
pub fn find_energy_function(u: &BumpExpansion, v: &BumpExpansion, tau: f64, rel_tol: f64) -> Result<EnergyTarget> {
    let dict = u.dict.clone();
    let m = &dict.gram.mass;
    let k = &dict.gram.stiffness;
    let energy = |a: &DVector<f64>| a.dot(&(k * a));
    let eu = energy(&path_point(&u.coeffs, &v.coeffs, 1.0, m)?);
    let ev = energy(&path_point(&u.coeffs, &v.coeffs, 0.0, m)?);
    let target_tol = rel_tol * tau.abs();
    if (eu - tau).abs() <= target_tol {
        return Ok(EnergyTarget { w: u.clone(), t: 1.0, energy: eu, iterations: 0 });
    }
    if (ev - tau).abs() <= target_tol {
        return Ok(EnergyTarget { w: v.clone(), t: 0.0, energy: ev, iterations: 0 });
    }
    if (eu - tau) * (ev - tau) > 0.0 {
        return Err(ForgeError::Construction(format!(
            "energy {tau} not bracketed by path endpoints [{eu}, {ev}]"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let lo_above = ev > tau;
    for it in 1..=200 {
        let t = 0.5 * (lo + hi);
        let a = path_point(&u.coeffs, &v.coeffs, t, m)?;
        let e = energy(&a);
        if (e - tau).abs() <= target_tol {
            return Ok(EnergyTarget { w: BumpExpansion::new(dict, a), t, energy: e, iterations: it });
        }
        if (e > tau) == lo_above {
            lo = t;
        } else {
            hi = t;
        }
    }
    Err(ForgeError::NonConvergence {
        what: "energy bisection".into(),
        iterations: 200,
        last: hi - lo,
        history: vec![],
    })
}

/// (α, τ) for the conformal construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub tau: f64,
}

/// Exponent excluded by the second-order isometry obstruction.
pub fn excluded_alpha(n: usize) -> f64 {
    0.5 - 1.0 / n as f64
}

fn nudge(alpha: f64, n: usize) -> f64 {
    let bad = excluded_alpha(n);
    if (alpha - bad).abs() < 1e-12 {
        bad * (1.0 - 1e-3)
    } else {
        alpha
    }
}

/// λ₀ > 0: largest α ∈ {1, 1/2, 1/4, …} with αm/(2α+1) < λ₀.
/// λ₀ < 0: α ∈ {−1/4, −1/8, …}, the first with λ₀ < mα/(2α+1) < 0.
/// In both cases τ = (2α+1)λ₀/α > m.
pub fn choose_alpha(lambda0: f64, m: f64, n: usize) -> Result<AlphaChoice> {
    if lambda0 == 0.0 || !lambda0.is_finite() {
        return Err(ForgeError::InvalidInput("frequency must be nonzero and finite".into()));
    }
    if !(m > 0.0) {
        return Err(ForgeError::InvalidInput(format!("constrained infimum must be positive, got {m}")));
    }
    let admissible = |a: f64| {
        let r = a * m / (2.0 * a + 1.0);
        if lambda0 > 0.0 { r < lambda0 } else { lambda0 < r && r < 0.0 }
    };
    let mut alpha = if lambda0 > 0.0 { 1.0 } else { -0.25 };
    for _ in 0..1100 {
        if admissible(alpha) {
            let mut a = nudge(alpha, n);
            if !admissible(a) {
                a = alpha * 0.5;
            }
            let tau = (2.0 * a + 1.0) * lambda0 / a;
            return Ok(AlphaChoice { alpha: a, tau });
        }
        alpha *= 0.5;
    }
    Err(ForgeError::Construction(format!("no admissible exponent for λ₀ = {lambda0}, m = {m}")))
}

/// Projected Rayleigh-quotient gradient norm at `a`, relative to ‖Ka‖.
pub fn stationarity(k: &DMatrix<f64>, m: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let ka = k * a;
    let ma = m * a;
    let rq = a.dot(&ka) / a.dot(&ma);
    let mut r = &ka - ma * rq;
    let s = b.dot(&r) / b.norm_squared();
    r.axpy(-s, b, 1.0);
    r.norm() / ka.norm()
}
