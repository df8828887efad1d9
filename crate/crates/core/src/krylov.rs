//! Right-preconditioned restarted GMRES, a reference CG, and a CG/Lanczos
//! spectrum estimator for Jacobi-preconditioned operators.

use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigen;
use crate::scalar::{axpy, dot, norm2, Real};

/// Square linear map acting on vectors of length `size()`.
pub trait LinearOperator<T> {
    fn size(&self) -> usize;
    fn apply(&self, src: &[T], dst: &mut [T]);
}

impl<T, O: LinearOperator<T> + ?Sized> LinearOperator<T> for &O {
    fn size(&self) -> usize {
        (**self).size()
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        (**self).apply(src, dst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Identity(pub usize);

impl<T: Real> LinearOperator<T> for Identity {
    fn size(&self) -> usize {
        self.0
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        dst.copy_from_slice(src);
    }
}

/// Diagonal matrix `diag(d)`.
#[derive(Debug, Clone)]
pub struct Diagonal<T>(pub Vec<T>);

impl<T: Real> LinearOperator<T> for Diagonal<T> {
    fn size(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        for ((d, &s), &a) in dst.iter_mut().zip(src).zip(&self.0) {
            *d = a * s;
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> LinearOperator<T> for DenseMatrix<T> {
    fn size(&self) -> usize {
        self.n
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = dot(&self.data[i * self.n..(i + 1) * self.n], src);
        }
    }
}

/// Wraps a closure `f(src, dst)` as an operator.
pub struct FnOperator<F> {
    pub n: usize,
    pub f: F,
}

impl<T, F: Fn(&[T], &mut [T])> LinearOperator<T> for FnOperator<F> {
    fn size(&self) -> usize {
        self.n
    }

    fn apply(&self, src: &[T], dst: &mut [T]) {
        (self.f)(src, dst)
    }
}

/// Stopping rule: `|r_k| <= max(abs_tol, rel_tol |r_0|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverControl {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub restart: usize,
}

impl Default for SolverControl {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-4,
            max_iters: 1000,
            restart: 30,
        }
    }
}

impl SolverControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(invalid("solver tolerances must be positive"));
        }
        if self.restart == 0 || self.max_iters == 0 {
            return Err(invalid("restart and max_iters must be positive"));
        }
        Ok(())
    }

    fn target(&self, r0: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * r0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T> {
    pub x: Vec<T>,
    /// Number of Arnoldi steps (operator applications inside the Krylov loop).
    pub iterations: usize,
    pub initial_residual: f64,
    /// True residual norm `|b - A x|` of the returned iterate.
    pub residual: f64,
    /// Residual estimate after each iteration.
    pub history: Vec<f64>,
}

fn residual_into<T: Real, A: LinearOperator<T>>(op: &A, x: &[T], b: &[T], r: &mut [T]) {
    op.apply(x, r);
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Solves `A x = b` with GMRES(m) preconditioned from the right by `M`,
/// starting from `x0` (zero when `None`).
///
/// Orthogonalization is modified Gram-Schmidt with a second pass whenever the
/// norm of the new basis vector drops below `1e-3` of its pre-projection value.
pub fn gmres<T: Real, A: LinearOperator<T>, M: LinearOperator<T>>(
    op: &A,
    precond: &M,
    b: &[T],
    x0: Option<&[T]>,
    control: &SolverControl,
) -> Result<SolveReport<T>> {
    control.validate()?;
    let n = b.len();
    if op.size() != n || precond.size() != n {
        return Err(invalid(format!(
            "size mismatch: rhs {n}, operator {}, preconditioner {}",
            op.size(),
            precond.size()
        )));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(x0) => return Err(invalid(format!("initial guess has length {}, expected {n}", x0.len()))),
        None => vec![T::zero(); n],
    };
    let mut r = vec![T::zero(); n];
    if x0.is_some() {
        residual_into(op, &x, b, &mut r);
    } else {
        r.copy_from_slice(b);
    }
    let r0 = norm2(&r).to_f64_lossy();
    let target = control.target(r0);
    let mut report = SolveReport {
        x: Vec::new(),
        iterations: 0,
        initial_residual: r0,
        residual: r0,
        history: Vec::new(),
    };
    if !r0.is_finite() {
        return Err(Error::LinearNoConvergence {
            iterations: 0,
            residual: r0,
        });
    }
    if r0 <= target {
        report.x = x;
        return Ok(report);
    }

    let m = control.restart;
    let mut v: Vec<Vec<T>> = Vec::with_capacity(m + 1);
    let mut z = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    let mut h = vec![T::zero(); (m + 1) * m];
    let mut cs = vec![T::zero(); m];
    let mut sn = vec![T::zero(); m];
    let mut g = vec![T::zero(); m + 1];
    let mut beta = r0;

    loop {
        v.clear();
        let inv = T::one() / T::lit(beta);
        v.push(r.iter().map(|&ri| ri * inv).collect());
        g.iter_mut().for_each(|x| *x = T::zero());
        g[0] = T::lit(beta);
        let mut k = 0;
        while k < m && report.iterations < control.max_iters {
            precond.apply(&v[k], &mut z);
            op.apply(&z, &mut w);
            report.iterations += 1;
            let before = norm2(&w);
            for (i, vi) in v.iter().enumerate() {
                let hij = dot(&w, vi);
                h[i * m + k] = hij;
                axpy(-hij, vi, &mut w);
            }
            let mut after = norm2(&w);
            if after < T::lit(1e-3) * before {
                for (i, vi) in v.iter().enumerate() {
                    let c = dot(&w, vi);
                    h[i * m + k] += c;
                    axpy(-c, vi, &mut w);
                }
                after = norm2(&w);
            }
            h[(k + 1) * m + k] = after;
            for i in 0..k {
                let a = h[i * m + k];
                let bb = h[(i + 1) * m + k];
                h[i * m + k] = cs[i] * a + sn[i] * bb;
                h[(i + 1) * m + k] = -sn[i] * a + cs[i] * bb;
            }
            let a = h[k * m + k];
            let bb = h[(k + 1) * m + k];
            let rho = a.hypot(bb);
            if rho == T::zero() {
                cs[k] = T::one();
                sn[k] = T::zero();
            } else {
                cs[k] = a / rho;
                sn[k] = bb / rho;
            }
            h[k * m + k] = rho;
            h[(k + 1) * m + k] = T::zero();
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k] * g[k];
            let estimate = g[k + 1].abs().to_f64_lossy();
            report.history.push(estimate);
            k += 1;
            let breakdown = after <= T::epsilon() * before;
            if estimate <= target || breakdown {
                break;
            }
            let inv = T::one() / after;
            v.push(w.iter().map(|&wi| wi * inv).collect());
        }
        // back substitution for y, then x += M^{-1} V y
        let mut y = vec![T::zero(); k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[i * m + j] * y[j];
            }
            y[i] = if h[i * m + i] != T::zero() { s / h[i * m + i] } else { T::zero() };
        }
        w.iter_mut().for_each(|x| *x = T::zero());
        for (j, &yj) in y.iter().enumerate() {
            axpy(yj, &v[j], &mut w);
        }
        precond.apply(&w, &mut z);
        axpy(T::one(), &z, &mut x);
        residual_into(op, &x, b, &mut r);
        beta = norm2(&r).to_f64_lossy();
        report.residual = beta;
        if !beta.is_finite() {
            return Err(Error::LinearNoConvergence {
                iterations: report.iterations,
                residual: beta,
            });
        }
        if beta <= target {
            report.x = x;
            return Ok(report);
        }
        if report.iterations >= control.max_iters {
            return Err(Error::LinearNoConvergence {
                iterations: report.iterations,
                residual: beta,
            });
        }
    }
}

/// Preconditioned conjugate gradients (reference solver for SPD systems).
pub fn cg<T: Real, A: LinearOperator<T>, M: LinearOperator<T>>(
    op: &A,
    precond: &M,
    b: &[T],
    control: &SolverControl,
) -> Result<SolveReport<T>> {
    control.validate()?;
    let n = b.len();
    let mut x = vec![T::zero(); n];
    let mut r = b.to_vec();
    let mut z = vec![T::zero(); n];
    let mut q = vec![T::zero(); n];
    let r0 = norm2(&r).to_f64_lossy();
    let target = control.target(r0);
    let mut report = SolveReport {
        x: Vec::new(),
        iterations: 0,
        initial_residual: r0,
        residual: r0,
        history: Vec::new(),
    };
    if r0 <= target {
        report.x = x;
        return Ok(report);
    }
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    while report.iterations < control.max_iters {
        op.apply(&p, &mut q);
        report.iterations += 1;
        let alpha = rz / dot(&p, &q);
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        let res = norm2(&r).to_f64_lossy();
        report.history.push(res);
        report.residual = res;
        if res <= target {
            report.x = x;
            return Ok(report);
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, &zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(Error::LinearNoConvergence {
        iterations: report.iterations,
        residual: report.residual,
    })
}

/// Extreme eigenvalue estimates of `D^{-1} A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumEstimate<T> {
    pub lambda_min: T,
    pub lambda_max: T,
    /// CG iterations that contributed to the estimate.
    pub iterations: usize,
    /// True when CG broke down immediately and the `(1, 1)` fallback was used.
    pub fallback: bool,
}

/// splitmix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic vector with entries uniform in `[-1, 1)`.
pub fn pseudo_random_vector<T: Real>(n: usize, seed: u64) -> Vec<T> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            let u = (splitmix64(&mut s) >> 11) as f64 / (1u64 << 53) as f64;
            T::lit(2.0 * u - 1.0)
        })
        .collect()
}

/// Runs `n_iters` Jacobi-preconditioned CG steps on `A x = b` for a seeded
/// random `b` (zero where `skip` is set) and returns the extreme eigenvalues of
/// the Lanczos matrix built from the CG coefficients.
pub fn estimate_spectrum<T: Real, A: LinearOperator<T>>(
    op: &A,
    diag: &[T],
    n_iters: usize,
    seed: u64,
    skip: Option<&[bool]>,
) -> Result<SpectrumEstimate<T>> {
    let n = op.size();
    if diag.len() != n {
        return Err(invalid(format!("diagonal has length {}, operator size {n}", diag.len())));
    }
    if let Some(i) = diag.iter().position(|&d| !(d > T::zero())) {
        return Err(invalid(format!("diagonal entry {i} is not positive")));
    }
    let mut r = pseudo_random_vector::<T>(n, seed);
    if let Some(skip) = skip {
        for (ri, &s) in r.iter_mut().zip(skip) {
            if s {
                *ri = T::zero();
            }
        }
    }
    let mut z: Vec<T> = r.iter().zip(diag).map(|(&ri, &d)| ri / d).collect();
    let mut p = z.clone();
    let mut q = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    let r0 = norm2(&r);
    let mut alphas: Vec<T> = Vec::new();
    let mut betas: Vec<T> = Vec::new();
    if rz > T::zero() {
        for _ in 0..n_iters {
            op.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > T::zero()) {
                break;
            }
            let alpha = rz / pq;
            alphas.push(alpha);
            axpy(-alpha, &q, &mut r);
            if norm2(&r) <= T::lit(1e-14) * r0 {
                break;
            }
            for ((zi, &ri), &d) in z.iter_mut().zip(&r).zip(diag) {
                *zi = ri / d;
            }
            let rz_new = dot(&r, &z);
            if !(rz_new > T::zero()) {
                break;
            }
            let beta = rz_new / rz;
            betas.push(beta);
            rz = rz_new;
            for (pi, &zi) in p.iter_mut().zip(&z) {
                *pi = zi + beta * *pi;
            }
        }
    }
    let k = alphas.len();
    if k == 0 {
        return Ok(SpectrumEstimate {
            lambda_min: T::one(),
            lambda_max: T::one(),
            iterations: 0,
            fallback: true,
        });
    }
    let mut t = vec![T::zero(); k * k];
    for i in 0..k {
        t[i * k + i] = T::one() / alphas[i];
        if i > 0 {
            t[i * k + i] += betas[i - 1] / alphas[i - 1];
            let off = betas[i - 1].sqrt() / alphas[i - 1];
            t[i * k + i - 1] = off;
            t[(i - 1) * k + i] = off;
        }
    }
    let (vals, _) = sym_eigen(&t, k);
    Ok(SpectrumEstimate {
        lambda_min: vals[0],
        lambda_max: vals[k - 1],
        iterations: k,
        fallback: false,
    })
}
