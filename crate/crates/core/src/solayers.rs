//! Second-order layers.
//!
//! * Cov: covariance of the `N × D` feature matrix, optionally augmented with
//!   the mean into a `(D+1) × (D+1)` matrix.
//! * O2T: `Y = W M Wᵀ` with `W` stored as `dout × din`.
//! * PV: `v_j = W[:, j]ᵀ Y W[:, j]`, computed as column sums of `W ⊙ (Y W)`.
//! * Robust rectification: `Σ̂ = U f(S) Uᵀ`.
//! * Transition: `h(x_k) = W x_k + b` applied to every site.
//!
//! Each layer has a plain tensor function and a differentiable graph op.

use crate::autodiff::{mean_rows, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{sym_eig, sym_eig_backward, EigPair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 0.75;

#[derive(Clone, Debug)]
pub struct CovOutput<T = f64> {
    /// Augmented matrix when a `beta` was given, otherwise a copy of `sigma`.
    pub c: Tensor<T>,
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct O2TParams<T = f64> {
    pub w: Tensor<T>,
    pub orthonormal: bool,
}

impl<T: Scalar> O2TParams<T> {
    pub fn forward(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        o2t_forward(m, &self.w)
    }
}

#[derive(Clone, Debug)]
pub struct PVParams<T = f64> {
    pub w: Tensor<T>,
}

impl<T: Scalar> PVParams<T> {
    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        pv_forward(y, &self.w)
    }
}

#[derive(Clone, Debug)]
pub struct TransitionParams<T = f64> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> TransitionParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        transition_forward(x, &self.w, &self.b)
    }
}

fn matrix_of<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.dims() {
        [r, c] => Ok((r, c)),
        _ => shape_err(format!("{what} expects a matrix, got {:?}", t.shape())),
    }
}

fn square_of<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<usize> {
    match matrix_of(t, what)? {
        (r, c) if r == c => Ok(r),
        _ => shape_err(format!("{what} expects a square matrix, got {:?}", t.shape())),
    }
}

/// Biased (1/N) covariance and mean of the rows of `x`.
pub fn cov_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = matrix_of(x, "cov")?;
    if n == 0 {
        return Err(Error::EmptyInput("covariance of zero feature vectors".into()));
    }
    let mu = mean_rows(x)?;
    let mut sigma = vec![T::zero(); d * d];
    let mut centered = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for ((c, &v), &m) in centered.iter_mut().zip(row).zip(mu.data()) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..d {
                sigma[i * d + j] += ci * centered[j];
            }
        }
    }
    let inv = T::one() / T::of(n as f64);
    let sigma = Tensor::new([d, d], sigma)?.scale(inv).symmetrize()?;
    Ok((sigma, mu))
}

/// `[[Σ + β²μμᵀ, βμ], [βμᵀ, 1]]`.
pub fn cov_augment<T: Scalar>(sigma: &Tensor<T>, mu: &Tensor<T>, beta: T) -> Result<Tensor<T>> {
    let d = square_of(sigma, "cov_augment")?;
    if mu.numel() != d {
        return shape_err(format!("cov_augment: mu has {} entries, sigma is {d}×{d}", mu.numel()));
    }
    let m = mu.data();
    let n = d + 1;
    Ok(Tensor::from_fn([n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        match (i < d, j < d) {
            (true, true) => sigma.at(i, j) + beta * beta * m[i] * m[j],
            (true, false) => beta * m[i],
            (false, true) => beta * m[j],
            (false, false) => T::one(),
        }
    }))
}

/// The full Cov layer: statistics plus optional mean augmentation.
pub fn cov_forward<T: Scalar>(x: &Tensor<T>, beta: Option<T>) -> Result<CovOutput<T>> {
    let (sigma, mu) = cov_stats(x)?;
    let c = match beta {
        Some(beta) => cov_augment(&sigma, &mu, beta)?,
        None => sigma.clone(),
    };
    Ok(CovOutput { c, mu, sigma })
}

pub fn o2t_forward<T: Scalar>(m: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let din = square_of(m, "o2t")?;
    let (_, wcols) = matrix_of(w, "o2t weights")?;
    if wcols != din {
        return shape_err(format!("o2t: weights {:?} do not accept a {din}×{din} input", w.shape()));
    }
    w.matmul(m)?.matmul(&w.transpose()?)
}

/// Column sums of `W ⊙ (Y W)`.
pub fn pv_forward<T: Scalar>(y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d = square_of(y, "pv")?;
    let (wrows, dout) = matrix_of(w, "pv weights")?;
    if wrows != d {
        return shape_err(format!("pv: weights {:?} do not accept a {d}×{d} input", w.shape()));
    }
    let prod = w.hadamard(&y.matmul(w)?)?;
    let mut v = vec![T::zero(); dout];
    for row in prod.data().chunks(dout) {
        for (acc, &x) in v.iter_mut().zip(row) {
            *acc += x;
        }
    }
    Ok(Tensor::vector(v))
}

/// `v_j = W[:, j]ᵀ Y W[:, j]` evaluated one quadratic form at a time.
pub fn pv_quadratic_forms<T: Scalar>(y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d = square_of(y, "pv")?;
    let (wrows, dout) = matrix_of(w, "pv weights")?;
    if wrows != d {
        return shape_err(format!("pv: weights {:?} do not accept a {d}×{d} input", w.shape()));
    }
    let v = (0..dout)
        .map(|j| {
            let mut s = T::zero();
            for a in 0..d {
                for b in 0..d {
                    s += w.at(a, j) * y.at(a, b) * w.at(b, j);
                }
            }
            s
        })
        .collect();
    Ok(Tensor::vector(v))
}

/// `f(x) = sqrt(((1−2α)/(2α))² + x/α) − (1−α)/(2α)`.
pub fn robust_f<T: Scalar>(x: T, alpha: T) -> T {
    let two = T::of(2.0);
    let a = (T::one() - two * alpha) / (two * alpha);
    (a * a + x / alpha).sqrt() - (T::one() - alpha) / (two * alpha)
}

pub fn robust_f_prime<T: Scalar>(x: T, alpha: T) -> T {
    let two = T::of(2.0);
    let a = (T::one() - two * alpha) / (two * alpha);
    T::one() / (two * alpha * (a * a + x / alpha).sqrt())
}

/// `U f(S) Uᵀ` for a symmetric input, with the eigendecomposition used.
pub fn spectral_map_forward<T: Scalar>(m: &Tensor<T>, f: impl Fn(T) -> T) -> Result<(Tensor<T>, EigPair<T>)> {
    square_of(m, "spectral map")?;
    let eig = sym_eig(m)?;
    let fs: Vec<T> = eig.s.iter().map(|&s| f(s)).collect();
    Ok((eig.reconstruct_with(&fs), eig))
}

/// Robust covariance estimate: eigenvalues clamped at 0, then mapped by [`robust_f`].
pub fn robust_rectify_forward<T: Scalar>(sigma: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    Ok(spectral_map_forward(sigma, |s| robust_f(s.max(T::zero()), alpha))?.0)
}

pub fn transition_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = matrix_of(x, "transition")?;
    let (dt, wd) = matrix_of(w, "transition weights")?;
    if wd != d || b.numel() != dt {
        return shape_err(format!(
            "transition: weights {:?} / bias {:?} incompatible with {d}-dim features",
            w.shape(),
            b.shape()
        ));
    }
    let mut y = x.matmul(&w.transpose()?)?.into_data();
    for row in y.chunks_mut(dt) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::new([x.rows(), dt], y)
}

// Graph ops.

/// Differentiable `Σ` of the rows of `x` (use [`Graph::mean_rows`] for `μ`).
pub fn cov<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (sigma, _) = cov_stats(g.val(x)?)?;
    g.record("cov", &[x], sigma, |c| {
        let x = c.inputs[0];
        let (n, d) = (x.rows(), x.cols());
        let mu = mean_rows(x)?;
        let xc = Tensor::from_fn([n, d], |i| x.data()[i] - mu.data()[i % d]);
        let gs = c.grad.add(&c.grad.transpose()?)?;
        let inv = T::one() / T::of(n as f64);
        Ok(vec![Some(xc.matmul(&gs)?.scale(inv))])
    })
}

pub fn cov_augment_op<T: Scalar>(g: &mut Graph<T>, sigma: Var, mu: Var, beta: T) -> Result<Var> {
    let c = cov_augment(g.val(sigma)?, g.val(mu)?, beta)?;
    g.record("cov_augment", &[sigma, mu], c, move |c| {
        let d = c.inputs[0].rows();
        let n = d + 1;
        let gd = c.grad.data();
        let dsigma = Tensor::from_fn([d, d], |idx| gd[(idx / d) * n + idx % d]);
        let mu = c.inputs[1].data();
        let beta2 = beta * beta;
        let dmu = (0..d)
            .map(|i| {
                let mut s = beta * (gd[i * n + d] + gd[d * n + i]);
                for j in 0..d {
                    s += beta2 * (gd[i * n + j] + gd[j * n + i]) * mu[j];
                }
                s
            })
            .collect();
        Ok(vec![Some(dsigma), Some(Tensor::vector(dmu))])
    })
}

pub fn o2t<T: Scalar>(g: &mut Graph<T>, m: Var, w: Var) -> Result<Var> {
    let y = o2t_forward(g.val(m)?, g.val(w)?)?;
    g.record("o2t", &[m, w], y, |c| {
        let (m, w) = (c.inputs[0], c.inputs[1]);
        let dy = c.grad;
        let wt = w.transpose()?;
        let dm = if c.needs[0] { Some(wt.matmul(dy)?.matmul(w)?) } else { None };
        let dw = if c.needs[1] {
            let a = dy.matmul(w)?.matmul(&m.transpose()?)?;
            let b = dy.transpose()?.matmul(w)?.matmul(m)?;
            Some(a.add(&b)?)
        } else {
            None
        };
        Ok(vec![dm, dw])
    })
}

pub fn pv<T: Scalar>(g: &mut Graph<T>, y: Var, w: Var) -> Result<Var> {
    let v = pv_forward(g.val(y)?, g.val(w)?)?;
    g.record("pv", &[y, w], v, |c| {
        let (y, w) = (c.inputs[0], c.inputs[1]);
        let (d, dout) = (w.rows(), w.cols());
        let dv = c.grad.data();
        let w_dv = Tensor::from_fn([d, dout], |idx| w.data()[idx] * dv[idx % dout]);
        let dy = if c.needs[0] { Some(w_dv.matmul(&w.transpose()?)?) } else { None };
        let dw = if c.needs[1] { Some(y.add(&y.transpose()?)?.matmul(&w_dv)?) } else { None };
        Ok(vec![dy, dw])
    })
}

/// Differentiable `U f(S) Uᵀ`; `f_prime` is the derivative of `f`. The
/// backward pass goes through [`sym_eig_backward`].
pub fn spectral_map<T, F, FP>(g: &mut Graph<T>, m: Var, f: F, f_prime: FP) -> Result<Var>
where
    T: Scalar,
    F: Fn(T) -> T,
    FP: Fn(T) -> T + 'static,
{
    let (out, eig) = spectral_map_forward(g.val(m)?, &f)?;
    let fs: Vec<T> = eig.s.iter().map(|&s| f(s)).collect();
    g.record("spectral_map", &[m], out, move |c| {
        let gsym = c.grad.add(&c.grad.transpose()?)?;
        let n = fs.len();
        let gu = gsym.matmul(&eig.u)?;
        let d_u = Tensor::from_fn([n, n], |idx| gu.data()[idx] * fs[idx % n]);
        let inner = eig.u.transpose()?.matmul(c.grad)?.matmul(&eig.u)?;
        let d_s: Vec<T> = (0..n).map(|i| f_prime(eig.s[i]) * inner.at(i, i)).collect();
        Ok(vec![Some(sym_eig_backward(&eig, Some(&d_u), &d_s)?)])
    })
}

pub fn robust_rectify<T: Scalar>(g: &mut Graph<T>, sigma: Var, alpha: T) -> Result<Var> {
    spectral_map(
        g,
        sigma,
        move |s| robust_f(s.max(T::zero()), alpha),
        move |s| if s > T::zero() { robust_f_prime(s, alpha) } else { T::zero() },
    )
}

pub fn transition<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = transition_forward(g.val(x)?, g.val(w)?, g.val(b)?)?;
    g.record("transition", &[x, w, b], y, |c| {
        let (x, w) = (c.inputs[0], c.inputs[1]);
        let dy = c.grad;
        let dx = if c.needs[0] { Some(dy.matmul(w)?) } else { None };
        let dw = if c.needs[1] { Some(dy.transpose()?.matmul(x)?) } else { None };
        let db = if c.needs[2] {
            let dt = w.rows();
            let mut acc = vec![T::zero(); dt];
            for row in dy.data().chunks(dt) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Some(Tensor::vector(acc))
        } else {
            None
        };
        Ok(vec![dx, dw, db])
    })
}
