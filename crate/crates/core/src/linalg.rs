//! Small dense helpers: symmetric eigen-decomposition and second-order tensors.

use crate::scalar::Real;

/// Row-major symmetric tensor; only the leading `dim x dim` block is used.
pub type Tensor2<T> = [[T; 3]; 3];

pub fn zero2<T: Real>() -> Tensor2<T> {
    [[T::zero(); 3]; 3]
}

pub fn identity2<T: Real>(dim: usize) -> Tensor2<T> {
    let mut t = zero2();
    for (d, row) in t.iter_mut().enumerate().take(dim) {
        row[d] = T::one();
    }
    t
}

pub fn trace<T: Real>(a: &Tensor2<T>, dim: usize) -> T {
    (0..dim).map(|d| a[d][d]).sum()
}

pub fn ddot<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>, dim: usize) -> T {
    let mut s = T::zero();
    for i in 0..dim {
        for j in 0..dim {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

pub fn frobenius<T: Real>(a: &Tensor2<T>, dim: usize) -> T {
    ddot(a, a, dim).sqrt()
}

/// Index pairs of the Mandel vector of a symmetric tensor.
pub fn mandel_pairs(dim: usize) -> &'static [(usize, usize)] {
    if dim == 2 {
        &[(0, 0), (1, 1), (0, 1)]
    } else {
        &[(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
    }
}

pub fn mandel_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Mandel vector (off-diagonals scaled by sqrt 2) so that `a : b = a_m . b_m`.
pub fn to_mandel<T: Real>(a: &Tensor2<T>, dim: usize, out: &mut [T]) {
    let s2 = T::lit(std::f64::consts::SQRT_2);
    for (m, &(i, j)) in mandel_pairs(dim).iter().enumerate() {
        out[m] = if i == j { a[i][j] } else { s2 * a[i][j] };
    }
}

pub fn from_mandel<T: Real>(v: &[T], dim: usize) -> Tensor2<T> {
    let s2 = T::lit(std::f64::consts::SQRT_2);
    let mut a = zero2();
    for (m, &(i, j)) in mandel_pairs(dim).iter().enumerate() {
        if i == j {
            a[i][i] = v[m];
        } else {
            a[i][j] = v[m] / s2;
            a[j][i] = a[i][j];
        }
    }
    a
}

/// Cyclic Jacobi eigen-decomposition of a symmetric row-major `n x n` matrix.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as the
/// columns of a row-major matrix.
pub fn sym_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let mut m = a.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let scale = m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    let tol = T::epsilon() * T::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= tol || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = vec![T::zero(); n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new] = v[k * n + old];
        }
    }
    (vals, vecs)
}
