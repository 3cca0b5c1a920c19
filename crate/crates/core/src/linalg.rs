//! Linear solvers: banded LDLᵀ, preconditioned CG, preconditioned MINRES and
//! a small dense generalized symmetric eigensolver.

use nalgebra::{DMatrix, DVector};

use crate::error::{ForgeError, Result};
use crate::sparse::Csr;

/// Zero or tiny pivot met during an unpivoted LDLᵀ factorization.
#[derive(Clone, Copy, Debug)]
pub struct PivotFailure {
    pub row: usize,
    pub value: f64,
}

/// LDLᵀ factorization of a symmetric banded matrix without pivoting.
#[derive(Clone, Debug)]
pub struct BandedLdlt {
    n: usize,
    b: usize,
    l: Vec<f64>,
    d: Vec<f64>,
}

impl BandedLdlt {
    pub fn factor(a: &Csr) -> std::result::Result<Self, PivotFailure> {
        assert_eq!(a.nrows, a.ncols);
        let n = a.nrows;
        let b = a.bandwidth();
        let w = b + 1;
        let mut l = vec![0.0; n * w];
        let mut scale = 0.0f64;
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    l[i * w + j + b - i] = v;
                }
                if j == i {
                    scale = scale.max(v.abs());
                }
            }
        }
        let mut d = vec![0.0; n];
        let mut tmp = vec![0.0; w];
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            let ri = i * w + b - i;
            for j in j0..i {
                let k0 = j0.max(j.saturating_sub(b));
                let rj = j * w + b - j;
                let mut s = l[ri + j];
                for k in k0..j {
                    s -= tmp[k - j0] * l[rj + k];
                }
                tmp[j - j0] = s;
                l[ri + j] = s / d[j];
            }
            let mut di = l[ri + i];
            for j in j0..i {
                di -= tmp[j - j0] * l[ri + j];
            }
            if !(di.abs() > 1e-13 * scale) {
                return Err(PivotFailure { row: i, value: di });
            }
            d[i] = di;
        }
        Ok(BandedLdlt { n, b, l, d })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.b
    }

    /// Number of negative pivots, equal to the number of negative eigenvalues.
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn min_abs_pivot(&self) -> f64 {
        self.d.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, b, w) = (self.n, self.b, self.b + 1);
        for i in 0..n {
            let j0 = i.saturating_sub(b);
            let ri = i * w + b - i;
            let mut s = x[i];
            for j in j0..i {
                s -= self.l[ri + j] * x[j];
            }
            x[i] = s;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let j0 = i.saturating_sub(b);
            let ri = i * w + b - i;
            let xi = x[i];
            for j in j0..i {
                x[j] -= self.l[ri + j] * xi;
            }
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solve with iterative refinement against the original matrix.
pub fn refined_solve(a: &Csr, f: &BandedLdlt, rhs: &[f64], steps: usize) -> Vec<f64> {
    let mut x = f.solve(rhs);
    let mut r = vec![0.0; rhs.len()];
    for _ in 0..steps {
        a.matvec(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
        }
        f.solve_in_place(&mut r);
        for (xi, di) in x.iter_mut().zip(&r) {
            *xi += di;
        }
    }
    x
}

#[derive(Clone, Debug)]
pub struct KrylovStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Clone, Debug)]
pub enum KrylovFailure {
    /// Non-positive curvature met by CG.
    Indefinite,
    NotConverged { history: Vec<f64> },
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients; `x` holds the initial guess.
pub fn pcg<A>(
    apply: A,
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> std::result::Result<KrylovStats, KrylovFailure>
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats { iterations: 0, relative_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(r, d)| r / d.abs()).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut history = Vec::new();
    for it in 0..max_iter {
        let rel = norm(&r) / bnorm;
        history.push(rel);
        if rel <= tol {
            return Ok(KrylovStats { iterations: it, relative_residual: rel });
        }
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(KrylovFailure::Indefinite);
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i].abs();
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm(&r) / bnorm;
    if rel <= tol {
        return Ok(KrylovStats { iterations: max_iter, relative_residual: rel });
    }
    history.push(rel);
    Err(KrylovFailure::NotConverged { history })
}

/// MINRES for symmetric (possibly indefinite) systems with a symmetric
/// positive definite preconditioner given by `precond`.
pub fn minres<A, P>(
    apply: A,
    precond: P,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> std::result::Result<KrylovStats, KrylovFailure>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats { iterations: 0, relative_residual: 0.0 });
    }
    let mut r1 = vec![0.0; n];
    apply(x, &mut r1);
    for i in 0..n {
        r1[i] = b[i] - r1[i];
    }
    let mut y = vec![0.0; n];
    precond(&r1, &mut y);
    let beta1 = dot(&r1, &y);
    if beta1 < 0.0 {
        return Err(KrylovFailure::Indefinite);
    }
    let beta1 = beta1.sqrt();
    if beta1 == 0.0 {
        return Ok(KrylovStats { iterations: 0, relative_residual: 0.0 });
    }
    let mut r2 = r1.clone();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let (mut oldb, mut beta, mut dbar, mut epsln, mut phibar) = (0.0, beta1, 0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut history = Vec::new();
    let check_every = 25;
    let true_residual = |x: &[f64]| {
        let mut r = vec![0.0; n];
        apply(x, &mut r);
        let s: f64 = r.iter().zip(b).map(|(r, b)| (b - r) * (b - r)).sum();
        s.sqrt() / bnorm
    };
    for itn in 1..=max_iter {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        apply(&v, &mut y);
        if itn >= 2 {
            let f = beta / oldb;
            for i in 0..n {
                y[i] -= f * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        let f = alfa / beta;
        for i in 0..n {
            y[i] -= f * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        precond(&r2, &mut y);
        oldb = beta;
        let bb = dot(&r2, &y);
        if bb < 0.0 {
            return Err(KrylovFailure::Indefinite);
        }
        beta = bb.sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        let est = phibar / beta1;
        history.push(est);
        if est <= tol || itn % check_every == 0 || beta == 0.0 {
            let rel = true_residual(x);
            if rel <= tol {
                return Ok(KrylovStats { iterations: itn, relative_residual: rel });
            }
            if beta == 0.0 {
                break;
            }
        }
    }
    history.push(true_residual(x));
    Err(KrylovFailure::NotConverged { history })
}

/// Generalized symmetric eigenproblem `K q = theta M q` for small dense
/// matrices; eigenvalues ascending, eigenvectors M-orthonormal columns.
pub fn generalized_eigen(k: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let ms = (m + m.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(ms)
        .ok_or_else(|| ForgeError::Solver("Rayleigh-Ritz mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| ForgeError::Solver("singular Cholesky factor".into()))?;
    let c = &linv * k * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let n = k.nrows();
    let mut vecs = DMatrix::zeros(n, order.len());
    let back = linv.transpose();
    for (col, &j) in order.iter().enumerate() {
        let q: DVector<f64> = &back * eig.eigenvectors.column(j);
        vecs.set_column(col, &q);
    }
    Ok((order.iter().map(|&j| eig.eigenvalues[j]).collect(), vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tridiag(n: usize, diag: f64) -> Csr {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            if i > 0 {
                col_idx.push(i - 1);
                values.push(-1.0);
            }
            col_idx.push(i);
            values.push(diag);
            if i + 1 < n {
                col_idx.push(i + 1);
                values.push(-1.0);
            }
            row_ptr.push(col_idx.len());
        }
        Csr { nrows: n, ncols: n, row_ptr, col_idx, values }
    }

    fn random_banded(n: usize, b: usize, shift: f64, seed: u64) -> Csr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(b)..i {
                let v: f64 = rng.gen_range(-1.0..1.0);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
            dense[(i, i)] = 2.0 * b as f64 + shift;
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if dense[(i, j)] != 0.0 {
                    col_idx.push(j);
                    values.push(dense[(i, j)]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Csr { nrows: n, ncols: n, row_ptr, col_idx, values }
    }

    #[test]
    fn banded_ldlt_matches_dense_solve() {
        let a = random_banded(40, 5, 0.5, 3);
        let f = BandedLdlt::factor(&a).unwrap();
        assert_eq!(f.bandwidth(), 5);
        let rhs: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&rhs);
        let dense = a.to_dense().lu().solve(&DVector::from_vec(rhs)).unwrap();
        for i in 0..40 {
            assert!((x[i] - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_pivots_count_eigenvalues_below_shift() {
        // Eigenvalues of tridiag(-1, 2, -1) are 2 - 2 cos(k pi / (n + 1)).
        let n = 30;
        let shift = 1.1;
        let a = tridiag(n, 2.0 - shift);
        let f = BandedLdlt::factor(&a).unwrap();
        let below = (1..=n)
            .filter(|&k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos() < shift)
            .count();
        assert_eq!(f.negative_pivots(), below);
    }

    #[test]
    fn pcg_and_minres_solve_spd() {
        let a = tridiag(50, 2.5);
        let b: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.1).collect();
        let diag = a.diagonal();
        let mut x = vec![0.0; 50];
        pcg(|v, o| a.matvec(v, o), &diag, &b, &mut x, 1e-12, 500).unwrap();
        let mut y = vec![0.0; 50];
        minres(|v, o| a.matvec(v, o), |v, o| o.copy_from_slice(v), &b, &mut y, 1e-12, 500).unwrap();
        for i in 0..50 {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn minres_handles_indefinite_and_cg_detects_it() {
        let a = tridiag(60, 0.7);
        let b: Vec<f64> = (0..60).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let diag = a.diagonal();
        let mut x = vec![0.0; 60];
        assert!(matches!(
            pcg(|v, o| a.matvec(v, o), &diag, &b, &mut x, 1e-10, 500),
            Err(KrylovFailure::Indefinite) | Err(KrylovFailure::NotConverged { .. })
        ));
        let mut y = vec![0.0; 60];
        let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d.abs()).collect();
        let stats = minres(
            |v, o| a.matvec(v, o),
            |v, o| {
                for i in 0..v.len() {
                    o[i] = inv[i] * v[i];
                }
            },
            &b,
            &mut y,
            1e-10,
            2000,
        )
        .unwrap();
        assert!(stats.relative_residual <= 1e-10);
        let exact = a.to_dense().lu().solve(&DVector::from_vec(b)).unwrap();
        let err: f64 = (0..60).map(|i| (y[i] - exact[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6 * exact.amax());
    }

    #[test]
    fn generalized_eigen_diagonal_case() {
        let k = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 8.0]));
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let (vals, vecs) = generalized_eigen(&k, &m).unwrap();
        assert!((vals[0] - 0.5).abs() < 1e-14);
        assert!((vals[1] - 2.0).abs() < 1e-14);
        assert!((vals[2] - 3.0).abs() < 1e-14);
        let g = vecs.transpose() * &m * &vecs;
        assert!((g - DMatrix::identity(3, 3)).amax() < 1e-14);
    }
}
