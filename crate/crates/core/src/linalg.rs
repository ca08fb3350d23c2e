//! Symmetric eigendecomposition (cyclic Jacobi) with its backward pass, and
//! thin QR used as the Stiefel retraction.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maximum number of Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to `‖A‖_F`, at which Jacobi stops.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Eigengaps smaller than this are clamped in the backward pass.
pub const EIGENGAP_CLAMP: f64 = 1e-6;
/// `|R_ii|` below this marks a rank-deficient QR input.
pub const QR_RANK_TOL: f64 = 1e-12;

/// `A = U diag(S) Uᵀ` with eigenvalues sorted in descending order and
/// eigenvectors stored as the columns of `U`.
#[derive(Clone, Debug)]
pub struct EigPair<T = f64> {
    pub u: Tensor<T>,
    pub s: Vec<T>,
}

impl<T: Scalar> EigPair<T> {
    /// `U diag(values) Uᵀ`.
    pub fn reconstruct_with(&self, values: &[T]) -> Tensor<T> {
        let n = self.s.len();
        let u = self.u.data();
        Tensor::from_fn([n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut acc = T::zero();
            for (k, &v) in values.iter().enumerate() {
                acc += u[i * n + k] * v * u[j * n + k];
            }
            acc
        })
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        self.reconstruct_with(&self.s)
    }

    /// Smallest `|S_i - S_j|` over distinct indices (infinite for D = 1).
    pub fn min_gap(&self) -> f64 {
        self.s
            .windows(2)
            .map(|w| (w[0] - w[1]).abs().f64())
            .fold(f64::INFINITY, f64::min)
    }
}

fn square_dim<T: Scalar>(a: &Tensor<T>, what: &str) -> Result<usize> {
    match *a.dims() {
        [r, c] if r == c => Ok(r),
        _ => shape_err(format!("{what} expects a square matrix, got {:?}", a.shape())),
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized first. Each eigenvector is sign-normalized so
/// that its entry of largest magnitude is positive (lowest row index wins
/// ties).
pub fn sym_eig<T: Scalar>(a: &Tensor<T>) -> Result<EigPair<T>> {
    let n = square_dim(a, "sym_eig")?;
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let mut m = a.symmetrize()?.into_data();
    let mut v = Tensor::<T>::eye(n).into_data();

    let frob = m.iter().map(|&x| x * x).sum::<T>().sqrt();
    let rel = T::of(OFF_DIAGONAL_TOL).max(T::epsilon() * T::of(10.0));
    let tol = rel * frob;

    let off_norm = |m: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = T::zero();
                m[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&m) <= tol;
    }
    if !converged {
        return Err(Error::Convergence { what: "Jacobi eigensolver", iterations: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).expect("finite eigenvalues"));
    let s: Vec<T> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut u = vec![T::zero(); n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 0..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < T::zero() { -T::one() } else { T::one() };
        for r in 0..n {
            u[r * n + col] = sign * v[r * n + src];
        }
    }
    Ok(EigPair { u: Tensor::new([n, n], u)?, s })
}

/// Gradient with respect to the (symmetric) input of [`sym_eig`], given
/// upstream gradients for the eigenvectors `d_u` and eigenvalues `d_s`.
///
/// `dA = U (F ∘ (Uᵀ dU) + diag(dS)) Uᵀ`, symmetrized, where
/// `F_ij = 1 / (S_j - S_i)` off the diagonal and `F_ii = 0`. Gaps below
/// [`EIGENGAP_CLAMP`] are replaced by `±EIGENGAP_CLAMP` with the sign of the
/// gap (index order breaks exact ties).
pub fn sym_eig_backward<T: Scalar>(
    eig: &EigPair<T>,
    d_u: Option<&Tensor<T>>,
    d_s: &[T],
) -> Result<Tensor<T>> {
    let n = eig.s.len();
    if d_s.len() != n {
        return shape_err(format!("d_s has length {}, expected {n}", d_s.len()));
    }
    let mut inner = Tensor::<T>::diag(d_s);
    if let Some(d_u) = d_u {
        if d_u.dims() != [n, n] {
            return shape_err(format!("d_u has shape {:?}, expected [{n}, {n}]", d_u.shape()));
        }
        let x = eig.u.transpose()?.matmul(d_u)?;
        let clamp = T::of(EIGENGAP_CLAMP);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut gap = eig.s[j] - eig.s[i];
                if gap.abs() < clamp {
                    gap = if gap > T::zero() || (gap == T::zero() && i > j) { clamp } else { -clamp };
                }
                let cur = inner.at(i, j);
                inner.set(i, j, cur + x.at(i, j) / gap);
            }
        }
    }
    let da = eig.u.matmul(&inner)?.matmul(&eig.u.transpose()?)?.symmetrize()?;
    if !da.is_finite() {
        return Err(Error::NonFinite("sym_eig_backward"));
    }
    Ok(da)
}

/// Thin QR factorization `A = Q R` of a tall `D × D'` matrix by Householder
/// reflections, normalized so that `R` has a positive diagonal.
pub fn qr_thin<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n) = match *a.dims() {
        [m, n] if m >= n => (m, n),
        _ => return shape_err(format!("qr_thin expects a tall matrix, got {:?}", a.shape())),
    };
    if !a.is_finite() {
        return Err(Error::NonFinite("qr_thin input"));
    }
    let mut r = a.data().to_vec();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(n);
    for k in 0..n {
        let norm = (k..m).map(|i| r[i * n + k] * r[i * n + k]).sum::<T>().sqrt();
        let mut v: Vec<T> = (k..m).map(|i| r[i * n + k]).collect();
        if norm == T::zero() {
            reflectors.push(vec![T::zero(); m - k]);
            continue;
        }
        let alpha = if v[0] > T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if vnorm > T::zero() {
            v.iter_mut().for_each(|x| *x /= vnorm);
            for j in k..n {
                let dot: T = (k..m).map(|i| v[i - k] * r[i * n + j]).sum();
                for i in k..m {
                    r[i * n + j] -= T::of(2.0) * v[i - k] * dot;
                }
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = vec![T::zero(); m * n];
    for i in 0..n {
        q[i * n + i] = T::one();
    }
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let dot: T = (k..m).map(|i| v[i - k] * q[i * n + j]).sum();
            for i in k..m {
                q[i * n + j] -= T::of(2.0) * v[i - k] * dot;
            }
        }
    }

    let mut rr = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            rr[i * n + j] = r[i * n + j];
        }
    }
    for i in 0..n {
        let d = rr[i * n + i];
        if d.abs().f64() < QR_RANK_TOL {
            return Err(Error::RankDeficient { index: i, value: d.abs().f64() });
        }
        if d < T::zero() {
            for j in i..n {
                rr[i * n + j] = -rr[i * n + j];
            }
            for row in 0..m {
                q[row * n + i] = -q[row * n + i];
            }
        }
    }
    Ok((Tensor::new([m, n], q)?, Tensor::new([n, n], rr)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let a = Tensor::from_fn([n, n], |_| rng.gen_range(-1.0..1.0));
        a.symmetrize().unwrap()
    }

    /// Determinant by LU with partial pivoting.
    fn det(a: &Tensor) -> f64 {
        let n = a.rows();
        let mut m = a.data().to_vec();
        let mut det = 1.0;
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs())).unwrap();
            if m[piv * n + k] == 0.0 {
                return 0.0;
            }
            if piv != k {
                for j in 0..n {
                    m.swap(k * n + j, piv * n + j);
                }
                det = -det;
            }
            det *= m[k * n + k];
            for i in (k + 1)..n {
                let f = m[i * n + k] / m[k * n + k];
                for j in k..n {
                    m[i * n + j] -= f * m[k * n + j];
                }
            }
        }
        det
    }

    /// Roots of det(A - λI) by grid scan plus bisection.
    fn char_poly_roots(a: &Tensor) -> Vec<f64> {
        let n = a.rows();
        let bound = (0..n).map(|i| (0..n).map(|j| a.at(i, j).abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
        let p = |l: f64| det(&a.sub(&Tensor::eye(n).scale(l)).unwrap());
        let steps = 20000;
        let mut roots = Vec::new();
        let mut x0 = -bound;
        let mut f0 = p(x0);
        for s in 1..=steps {
            let x1 = -bound + 2.0 * bound * s as f64 / steps as f64;
            let f1 = p(x1);
            if f0 == 0.0 {
                roots.push(x0);
            } else if f0.signum() != f1.signum() && f1 != 0.0 {
                let (mut lo, mut hi, mut flo) = (x0, x1, f0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let fm = p(mid);
                    if fm.signum() == flo.signum() {
                        lo = mid;
                        flo = fm;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            x0 = x1;
            f0 = f1;
        }
        roots.sort_by(|a, b| b.total_cmp(a));
        roots
    }

    #[test]
    fn identity_spectrum() {
        let e = sym_eig(&Tensor::<f64>::eye(3)).unwrap();
        assert_eq!(e.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_sorted_permutation() {
        let e = sym_eig(&Tensor::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(e.s, vec![3.0, 2.0, 1.0]);
        let expected = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(e.u, expected);
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let a = random_symmetric(5, &mut rng);
            let e = sym_eig(&a).unwrap();
            let roots = char_poly_roots(&a);
            assert_eq!(roots.len(), 5);
            for (s, r) in e.s.iter().zip(&roots) {
                assert!((s - r).abs() < 1e-8, "{s} vs {r}");
            }
        }
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 5, 8, 17, 32, 64] {
            let a = random_symmetric(n, &mut rng);
            let e = sym_eig(&a).unwrap();
            assert!(e.reconstruct().sub(&a).unwrap().max_abs() < 1e-9, "n = {n}");
            let utu = e.u.transpose().unwrap().matmul(&e.u).unwrap();
            assert!(utu.sub(&Tensor::eye(n)).unwrap().max_abs() < 1e-10);
            assert!(e.s.windows(2).all(|w| w[0] >= w[1]));
            for c in 0..n {
                let col: Vec<f64> = (0..n).map(|r| e.u.at(r, c)).collect();
                let big = col.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
                let first = col.iter().position(|v| v.abs() == big).unwrap();
                assert!(col[first] > 0.0);
            }
        }
    }

    #[test]
    fn psd_input_has_nonnegative_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = Tensor::from_fn([6, 3], |_| rng.gen_range(-1.0..1.0));
            let a = b.matmul(&b.transpose().unwrap()).unwrap();
            let e = sym_eig(&a).unwrap();
            assert!(e.s.iter().all(|&s| s >= -1e-10));
        }
    }

    #[test]
    fn non_finite_input_errors() {
        let a = Tensor::from_rows(&[&[1.0, f64::NAN], &[f64::NAN, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn eigenvalue_perturbation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_symmetric(4, &mut rng);
        let e = sym_eig(&a).unwrap();
        for i in 0..4 {
            let mut ds = vec![0.0; 4];
            ds[i] = 1.0;
            let da = sym_eig_backward(&e, None, &ds).unwrap();
            let ui: Vec<f64> = (0..4).map(|r| e.u.at(r, i)).collect();
            let outer = Tensor::from_fn([4, 4], |k| ui[k / 4] * ui[k % 4]);
            assert!(da.sub(&outer).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_eigenvalues_with_zero_du_are_finite() {
        let e = sym_eig(&Tensor::<f64>::eye(3)).unwrap();
        let ds = [0.5, -1.0, 2.0];
        let da = sym_eig_backward(&e, Some(&Tensor::zeros([3, 3])), &ds).unwrap();
        assert!(da.sub(&e.reconstruct_with(&ds)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Loss = Σ_ij R_ij U_ij + Σ_i r_i S_i on a matrix with a separated spectrum.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let q = qr_thin(&Tensor::from_fn([4, 4], |_| rng.gen_range(-1.0..1.0))).unwrap().0;
            let a = q.matmul(&Tensor::diag(&[4.0, 2.5, 1.0, 0.3])).unwrap().matmul(&q.transpose().unwrap()).unwrap();
            let r_u = Tensor::from_fn([4, 4], |_| rng.gen_range(-1.0..1.0));
            let r_s: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |m: &Tensor| {
                let e = sym_eig(m).unwrap();
                e.u.hadamard(&r_u).unwrap().sum() + e.s.iter().zip(&r_s).map(|(a, b)| a * b).sum::<f64>()
            };
            let e = sym_eig(&a).unwrap();
            let da = sym_eig_backward(&e, Some(&r_u), &r_s).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for j in 0..4 {
                    let mut p = a.clone();
                    let mut m = a.clone();
                    p.set(i, j, a.at(i, j) + h);
                    m.set(i, j, a.at(i, j) - h);
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    assert!((fd - da.at(i, j)).abs() < 1e-5, "({i},{j}) fd {fd} vs {}", da.at(i, j));
                }
            }
        }
    }

    #[test]
    fn qr_of_orthonormal_is_identity_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q0, _) = qr_thin(&Tensor::from_fn([5, 3], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let (q, r) = qr_thin(&q0).unwrap();
        assert!(q.sub(&q0).unwrap().max_abs() < 1e-14);
        assert!(r.sub(&Tensor::eye(3)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn qr_of_diagonal() {
        let a = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]).unwrap();
        let (q, r) = qr_thin(&a).unwrap();
        assert!(q.sub(&Tensor::eye(2)).unwrap().max_abs() < 1e-15);
        assert!(r.sub(&a).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn qr_reconstructs_random_tall_matrices() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn([6, 3], |_| rng.gen_range(-1.0..1.0));
            let (q, r) = qr_thin(&a).unwrap();
            let qtq = q.transpose().unwrap().matmul(&q).unwrap();
            assert!(qtq.sub(&Tensor::eye(3)).unwrap().max_abs() < 1e-12);
            assert!(q.matmul(&r).unwrap().sub(&a).unwrap().max_abs() < 1e-12);
            for i in 0..3 {
                assert!(r.at(i, i) > 0.0);
                for j in 0..i {
                    assert_eq!(r.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_rank_deficiency_detected() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]).unwrap();
        assert!(matches!(qr_thin(&a), Err(Error::RankDeficient { index: 1, .. })));
        assert!(qr_thin(&Tensor::<f64>::zeros([2, 3])).is_err());
    }
}
