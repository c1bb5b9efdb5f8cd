//! Dense complex linear algebra helpers on top of nalgebra.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;
pub type Mat = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(d: usize) -> Mat {
    Mat::identity(d, d)
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn trace(m: &Mat) -> C64 {
    m.diagonal().iter().sum()
}

/// tr(a^dagger b) without forming the product.
pub fn inner(a: &Mat, b: &Mat) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn is_unitary(m: &Mat, tol: f64) -> bool {
    m.is_square() && max_abs_diff(&(m.adjoint() * m), &identity(m.nrows())) <= tol
}

/// Largest entrywise deviation after removing the best global phase.
pub fn phase_distance(a: &Mat, b: &Mat) -> f64 {
    let ov = inner(a, b);
    let phase = if ov.norm() > 0.0 { ov / ov.norm() } else { ONE };
    max_abs_diff(&a.map(|x| x * phase), b)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Haar-distributed unitary: QR of a complex Ginibre matrix with the
/// phases of R's diagonal pushed into Q.
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    let z = Mat::from_fn(d, d, |_, _| gaussian(rng));
    let qr = z.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        let rjj = r[(j, j)];
        let ph = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { ONE };
        for i in 0..d {
            q[(i, j)] *= ph;
        }
    }
    q
}

/// Haar-random unit vector.
pub fn haar_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<C64> {
    let mut v: Vec<C64> = (0..d).map(|_| gaussian(rng)).collect();
    let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a Hermitian matrix.
pub fn hermitian_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let h = (m + m.adjoint()).map(|x| x * 0.5);
    let eig = h.symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = Mat::from_fn(m.nrows(), idx.len(), |r, k| eig.eigenvectors[(r, idx[k])]);
    (vals, vecs)
}

pub fn spectral_norm(m: &Mat) -> f64 {
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn outer(v: &[C64]) -> Mat {
    let d = v.len();
    Mat::from_fn(d, d, |i, j| v[i] * v[j].conj())
}

pub fn mat_vec(m: &Mat, v: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; m.nrows()];
    for j in 0..m.ncols() {
        let vj = v[j];
        if vj == ZERO {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * vj;
        }
    }
    out
}

pub fn vdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Lowest eigenpair of a Hermitian operator given only as a matvec.
/// Lanczos with full reorthogonalisation; exact when `steps >= dim`.
pub fn lowest_eigpair<F>(dim: usize, steps: usize, start: &[C64], apply: F) -> (f64, Vec<C64>)
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    let k = steps.min(dim).max(1);
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut beta: Vec<f64> = Vec::with_capacity(k);
    let mut q: Vec<C64> = start.to_vec();
    let n0 = norm(&q);
    q.iter_mut().for_each(|x| *x /= n0);
    for j in 0..k {
        let mut w = apply(&q);
        let a = vdot(&q, &w).re;
        alpha.push(a);
        basis.push(q.clone());
        for _ in 0..2 {
            for b in &basis {
                let proj = vdot(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let bn = norm(&w);
        if j + 1 == k || bn < 1e-12 {
            break;
        }
        beta.push(bn);
        q = w.into_iter().map(|x| x / bn).collect();
    }
    let m = alpha.len();
    let t = DMatrix::<f64>::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = t.symmetric_eigen();
    let (imin, &lam) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let mut v = vec![ZERO; dim];
    for (r, b) in basis.iter().enumerate().take(m) {
        let coef = eig.eigenvectors[(r, imin)];
        v.iter_mut().zip(b).for_each(|(x, y)| *x += y * coef);
    }
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    (lam, v)
}
