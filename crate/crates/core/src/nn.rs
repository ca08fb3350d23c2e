//! First-order layers: 2-D convolution, 2×2 max pooling, dense, softmax
//! cross-entropy.
//!
//! Activations are `H × W × C` tensors (channels last). Convolution is
//! cross-correlation; kernels are `kH × kW × Cin × Cout`.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug)]
pub struct Conv2dParams<T = f64> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weights, &self.bias, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct DenseParams<T = f64> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense_forward(x, &self.weights, &self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        let [h, wd, cin] = *x.dims() else {
            return shape_err(format!("conv2d input must be H×W×C, got {:?}", x.shape()));
        };
        let [kh, kw, kcin, cout] = *w.dims() else {
            return shape_err(format!("conv2d kernel must be kH×kW×Cin×Cout, got {:?}", w.shape()));
        };
        if kcin != cin {
            return shape_err(format!("conv2d: input has {cin} channels, kernel expects {kcin}"));
        }
        if b.dims() != [cout] {
            return shape_err(format!("conv2d bias must be [{cout}], got {:?}", b.shape()));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < kh || wd < kw {
                    return shape_err(format!("conv2d: {h}×{wd} input smaller than {kh}×{kw} kernel"));
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(ConvGeom { h, w: wd, cin, kh, kw, cout, stride, oh, ow, pad_top, pad_left })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input offset for output site (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then(|| (iy * self.w + ix) * self.cin)
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Tensor<T> {
        let pl = self.patch_len();
        let mut cols = vec![T::zero(); self.oh * self.ow * pl];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * pl..][..pl];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let dst = (ky * self.kw + kx) * self.cin;
                            row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        Tensor::new([self.oh * self.ow, pl], cols).expect("im2col shape")
    }

    fn col2im<T: Scalar>(&self, cols: &Tensor<T>) -> Tensor<T> {
        let pl = self.patch_len();
        let mut x = vec![T::zero(); self.h * self.w * self.cin];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols.data()[(oy * self.ow + ox) * pl..][..pl];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some(src) = self.source(oy, ox, ky, kx) {
                            let off = (ky * self.kw + kx) * self.cin;
                            for c in 0..self.cin {
                                x[src + c] += row[off + c];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new([self.h, self.w, self.cin], x).expect("col2im shape")
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x, w, b, stride, padding)?;
    conv_with_geom(&geom, x, w, b)
}

fn conv_with_geom<T: Scalar>(geom: &ConvGeom, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = geom.im2col(x.data());
    let wmat = w.reshape([geom.patch_len(), geom.cout])?;
    let mut out = cols.matmul(&wmat)?.into_data();
    for row in out.chunks_mut(geom.cout) {
        for (o, &bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    Tensor::new([geom.oh, geom.ow, geom.cout], out)
}

/// Differentiable convolution with respect to input, kernel and bias.
pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
    let geom = ConvGeom::new(g.val(x)?, g.val(w)?, g.val(b)?, stride, padding)?;
    let y = conv_with_geom(&geom, g.val(x)?, g.val(w)?, g.val(b)?)?;
    g.record("conv2d", &[x, w, b], y, move |c| {
        let dy = c.grad.reshape([geom.oh * geom.ow, geom.cout])?;
        let dx = if c.needs[0] {
            let wmat = c.inputs[1].reshape([geom.patch_len(), geom.cout])?;
            Some(geom.col2im(&dy.matmul(&wmat.transpose()?)?))
        } else {
            None
        };
        let dw = if c.needs[1] {
            let cols = geom.im2col(c.inputs[0].data());
            Some(cols.transpose()?.matmul(&dy)?.reshape(c.inputs[1].shape().clone())?)
        } else {
            None
        };
        let db = if c.needs[2] {
            let mut acc = vec![T::zero(); geom.cout];
            for row in dy.data().chunks(geom.cout) {
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

/// 2×2 max pooling with stride 2. Odd spatial extents are padded with −∞ on
/// the bottom/right. Returns the pooled map and, per output element, the
/// flat input index of the (first) maximum.
pub fn maxpool2x2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [h, w, ch] = *x.dims() else {
        return shape_err(format!("maxpool input must be H×W×C, got {:?}", x.shape()));
    };
    if h == 0 || w == 0 {
        return Err(Error::EmptyInput("maxpool of an empty map".into()));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow * ch);
    let mut arg = Vec::with_capacity(oh * ow * ch);
    let xd = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ch {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        if iy >= h || ix >= w {
                            continue;
                        }
                        let idx = (iy * w + ix) * ch + c;
                        if best_idx == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new([oh, ow, ch], out)?, arg))
}

pub fn maxpool2x2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (y, arg) = maxpool2x2_forward(g.val(x)?)?;
    g.record("maxpool2x2", &[x], y, move |c| {
        let mut dx = Tensor::zeros(c.inputs[0].shape().clone());
        let d = dx.data_mut();
        for (&i, &gv) in arg.iter().zip(c.grad.data()) {
            d[i] += gv;
        }
        Ok(vec![Some(dx)])
    })
}

fn dense_check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let [din, dout] = *w.dims() else {
        return shape_err(format!("dense weights must be Din×Dout, got {:?}", w.shape()));
    };
    if x.numel() != din || x.dims().len() != 1 {
        return shape_err(format!("dense input must be a vector of length {din}, got {:?}", x.shape()));
    }
    if b.dims() != [dout] {
        return shape_err(format!("dense bias must be [{dout}], got {:?}", b.shape()));
    }
    Ok((din, dout))
}

/// `y = xᵀ W + b` for a vector `x`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (din, dout) = dense_check(x, w, b)?;
    let mut y = b.data().to_vec();
    let wd = w.data();
    for (i, &xi) in x.data().iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        for (yj, &wij) in y.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
            *yj += xi * wij;
        }
    }
    debug_assert_eq!(din, x.numel());
    Ok(Tensor::vector(y))
}

pub fn dense<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = dense_forward(g.val(x)?, g.val(w)?, g.val(b)?)?;
    g.record("dense", &[x, w, b], y, |c| {
        let (x, w) = (c.inputs[0], c.inputs[1]);
        let (din, dout) = (w.rows(), w.cols());
        let dy = c.grad.data();
        let dx = if c.needs[0] {
            Some(Tensor::vector(
                (0..din)
                    .map(|i| w.data()[i * dout..(i + 1) * dout].iter().zip(dy).map(|(&a, &b)| a * b).sum())
                    .collect(),
            ))
        } else {
            None
        };
        let dw = if c.needs[1] {
            let xd = x.data();
            Some(Tensor::from_fn([din, dout], |k| xd[k / dout] * dy[k % dout]))
        } else {
            None
        };
        let db = c.needs[2].then(|| c.grad.clone());
        Ok(vec![dx, dw, db])
    })
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `−log softmax(logits)[label]`, computed as `logsumexp(logits) − logits[label]`.
pub fn softmax_cross_entropy_forward<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
    Ok(lse - logits[label])
}

pub fn softmax_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, label: usize) -> Result<Var> {
    let loss = softmax_cross_entropy_forward(g.val(logits)?.data(), label)?;
    g.record("softmax_ce", &[logits], Tensor::scalar(loss), move |c| {
        let up = c.grad.item()?;
        let mut p = softmax(c.inputs[0].data());
        p[label] -= T::one();
        Ok(vec![Some(Tensor::new(c.inputs[0].shape().clone(), p.into_iter().map(|v| v * up).collect())?)])
    })
}
