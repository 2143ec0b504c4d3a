//! Forward and backward kernels on NHWC tensors.
//!
//! Convolution weights are laid out `[kh, kw, c_in, c_out]`, depthwise weights
//! `[kh, kw, c]` and dense weights `[in, out]`.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split with the extra pixel at the end.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

/// Resolved spatial geometry of a sliding-window operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                return Err(Error::Shape(format!(
                    "valid window of {k} does not fit extent {input}"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
    }
}

impl WindowGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || k_h == 0 || k_w == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::Shape(format!(
                "degenerate window: input {in_h}x{in_w}, kernel {k_h}x{k_w}, stride {stride}"
            )));
        }
        let (out_h, pad_top) = out_extent(in_h, k_h, stride, padding)?;
        let (out_w, pad_left) = out_extent(in_w, k_w, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Input coordinate touched by output `o` at kernel tap `k`, if in bounds.
    #[inline]
    fn in_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.in_h)
    }

    #[inline]
    fn in_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.in_w)
    }

    /// Output coordinate fed by input `i` through tap `k`, if any.
    #[inline]
    fn out_row(&self, i: usize, k: usize) -> Option<usize> {
        let t = (i + self.pad_top).checked_sub(k)?;
        (t % self.stride == 0 && t / self.stride < self.out_h).then_some(t / self.stride)
    }

    #[inline]
    fn out_col(&self, i: usize, k: usize) -> Option<usize> {
        let t = (i + self.pad_left).checked_sub(k)?;
        (t % self.stride == 0 && t / self.stride < self.out_w).then_some(t / self.stride)
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match x.shape() {
        &[n, h, w, c] => Ok([n, h, w, c]),
        other => Err(Error::Shape(format!("{what} must be rank 4 (NHWC), got {other:?}"))),
    }
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<([usize; 4], [usize; 4])> {
    let xd = dims4(x, "conv input")?;
    let wd = match w.shape() {
        &[kh, kw, ci, co] => [kh, kw, ci, co],
        other => return Err(Error::Shape(format!("conv kernel must be rank 4, got {other:?}"))),
    };
    if xd[3] != wd[2] {
        return Err(Error::Shape(format!(
            "conv input has {} channels but kernel expects {}",
            xd[3], wd[2]
        )));
    }
    if let Some(b) = b {
        if b.len() != wd[3] {
            return Err(Error::Shape(format!(
                "conv bias has {} entries, kernel has {} outputs",
                b.len(),
                wd[3]
            )));
        }
    }
    Ok((xd, wd))
}

/// Rows of the unrolled patch matrix for example `n`: `[out_h * out_w, kh * kw * c]`.
fn im2col<T: Scalar>(x: &[T], g: &WindowGeometry, c: usize, cols: &mut [T]) {
    let k = g.k_h * g.k_w * c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let dst = &mut row[(ky * g.k_w + kx) * c..(ky * g.k_w + kx + 1) * c];
                    match (g.in_row(oy, ky), g.in_col(ox, kx)) {
                        (Some(iy), Some(ix)) => {
                            let src = (iy * g.in_w + ix) * c;
                            dst.copy_from_slice(&x[src..src + c]);
                        }
                        _ => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &WindowGeometry, c: usize, dx: &mut [T]) {
    let k = g.k_h * g.k_w * c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
            for ky in 0..g.k_h {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let src = &row[(ky * g.k_w + kx) * c..(ky * g.k_w + kx + 1) * c];
                    let dst = &mut dx[(iy * g.in_w + ix) * c..(iy * g.in_w + ix + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

fn is_pointwise(wd: &[usize; 4], stride: usize) -> bool {
    wd[0] == 1 && wd[1] == 1 && stride == 1
}

fn add_bias_rows<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
    }
}

fn sum_rows<T: Scalar>(dy: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for row in dy.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

/// Cross-correlation of `x` `[n, h, w, c_in]` with `w` `[kh, kw, c_in, c_out]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ([n, h, wd_in, c], wd) = conv_dims(x, w, b)?;
    let g = WindowGeometry::new(h, wd_in, wd[0], wd[1], stride, padding)?;
    let c_out = wd[3];
    let mut y = vec![T::zero(); n * g.out_h * g.out_w * c_out];
    if is_pointwise(&wd, stride) {
        gemm(n * h * wd_in, c, c_out, x.data(), false, w.data(), false, &mut y, false);
    } else {
        let k = wd[0] * wd[1] * c;
        let rows = g.out_h * g.out_w;
        let mut cols = vec![T::zero(); rows * k];
        let in_len = h * wd_in * c;
        for i in 0..n {
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, c, &mut cols);
            let out = &mut y[i * rows * c_out..(i + 1) * rows * c_out];
            gemm(rows, k, c_out, &cols, false, w.data(), false, out, false);
        }
    }
    if let Some(b) = b {
        add_bias_rows(&mut y, b.data());
    }
    Tensor::new(&[n, g.out_h, g.out_w, c_out], y)
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`. `dx` is skipped when not requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let ([n, h, wd_in, c], wd) = conv_dims(x, w, None)?;
    let g = WindowGeometry::new(h, wd_in, wd[0], wd[1], stride, padding)?;
    let c_out = wd[3];
    if dy.shape() != [n, g.out_h, g.out_w, c_out] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            [n, g.out_h, g.out_w, c_out]
        )));
    }
    let db = Tensor::new(&[c_out], sum_rows(dy.data(), c_out))?;
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    if is_pointwise(&wd, stride) {
        let rows = n * h * wd_in;
        gemm(c, rows, c_out, x.data(), true, dy.data(), false, &mut dw, false);
        if let Some(dx) = dx.as_mut() {
            gemm(rows, c_out, c, dy.data(), false, w.data(), true, dx, false);
        }
    } else {
        let k = wd[0] * wd[1] * c;
        let rows = g.out_h * g.out_w;
        let in_len = h * wd_in * c;
        let mut cols = vec![T::zero(); rows * k];
        for i in 0..n {
            let dy_i = &dy.data()[i * rows * c_out..(i + 1) * rows * c_out];
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &g, c, &mut cols);
            gemm(k, rows, c_out, &cols, true, dy_i, false, &mut dw, true);
            if let Some(dx) = dx.as_mut() {
                gemm(rows, c_out, k, dy_i, false, w.data(), true, &mut cols, false);
                col2im_add(&cols, &g, c, &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    Ok((dx, Tensor::new(w.shape(), dw)?, db))
}

/// Batch of NHWC inputs stored as their nonzero entries.
///
/// Co-occurrence tensors are mostly zero, so the first convolution scatters only the
/// populated bins instead of unrolling the whole 256x256 plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBatch<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Per example, `(flat index into the h*w*c example, value)`.
    pub entries: Vec<Vec<(u32, T)>>,
}

impl<T: Scalar> SparseBatch<T> {
    pub fn from_dense(x: &Tensor<T>) -> Result<Self> {
        let [n, h, w, c] = dims4(x, "sparse input")?;
        let len = h * w * c;
        let entries = (0..n)
            .map(|i| {
                x.data()[i * len..(i + 1) * len]
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| !v.is_zero())
                    .map(|(j, &v)| (j as u32, v))
                    .collect()
            })
            .collect();
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            entries,
        })
    }

    pub fn batch(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let len = self.height * self.width * self.channels;
        let mut data = vec![T::zero(); self.batch() * len];
        for (i, ex) in self.entries.iter().enumerate() {
            for &(j, v) in ex {
                data[i * len + j as usize] = v;
            }
        }
        Tensor::new(&[self.batch(), self.height, self.width, self.channels], data)
            .expect("consistent dims")
    }
}

fn sparse_geometry<T: Scalar>(
    x: &SparseBatch<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(WindowGeometry, usize)> {
    let wd = match w.shape() {
        &[kh, kw, ci, co] => [kh, kw, ci, co],
        other => return Err(Error::Shape(format!("conv kernel must be rank 4, got {other:?}"))),
    };
    if wd[2] != x.channels {
        return Err(Error::Shape(format!(
            "conv input has {} channels but kernel expects {}",
            x.channels, wd[2]
        )));
    }
    let g = WindowGeometry::new(x.height, x.width, wd[0], wd[1], stride, padding)?;
    Ok((g, wd[3]))
}

/// Same result as [`conv2d_forward`] on `x.to_dense()`, visiting only nonzero inputs.
pub fn sparse_conv2d_forward<T: Scalar>(
    x: &SparseBatch<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (g, c_out) = sparse_geometry(x, w, stride, padding)?;
    let c_in = x.channels;
    let out_len = g.out_h * g.out_w * c_out;
    let mut y = vec![T::zero(); x.batch() * out_len];
    for (i, ex) in x.entries.iter().enumerate() {
        let out = &mut y[i * out_len..(i + 1) * out_len];
        for &(j, v) in ex {
            let j = j as usize;
            let (pos, ch) = (j / c_in, j % c_in);
            let (iy, ix) = (pos / g.in_w, pos % g.in_w);
            for ky in 0..g.k_h {
                let Some(oy) = g.out_row(iy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ox) = g.out_col(ix, kx) else { continue };
                    let wrow = &w.data()[((ky * g.k_w + kx) * c_in + ch) * c_out..][..c_out];
                    let orow = &mut out[(oy * g.out_w + ox) * c_out..][..c_out];
                    orow.iter_mut().zip(wrow).for_each(|(o, &ww)| *o += v * ww);
                }
            }
        }
    }
    if let Some(b) = b {
        if b.len() != c_out {
            return Err(Error::Shape("conv bias length mismatch".into()));
        }
        add_bias_rows(&mut y, b.data());
    }
    Tensor::new(&[x.batch(), g.out_h, g.out_w, c_out], y)
}

/// Kernel and bias gradients for [`sparse_conv2d_forward`]; inputs get no gradient.
pub fn sparse_conv2d_backward<T: Scalar>(
    x: &SparseBatch<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (g, c_out) = sparse_geometry(x, w, stride, padding)?;
    if dy.shape() != [x.batch(), g.out_h, g.out_w, c_out] {
        return Err(Error::Shape("sparse conv upstream gradient mismatch".into()));
    }
    let c_in = x.channels;
    let out_len = g.out_h * g.out_w * c_out;
    let mut dw = vec![T::zero(); w.len()];
    for (i, ex) in x.entries.iter().enumerate() {
        let dy_i = &dy.data()[i * out_len..(i + 1) * out_len];
        for &(j, v) in ex {
            let j = j as usize;
            let (pos, ch) = (j / c_in, j % c_in);
            let (iy, ix) = (pos / g.in_w, pos % g.in_w);
            for ky in 0..g.k_h {
                let Some(oy) = g.out_row(iy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ox) = g.out_col(ix, kx) else { continue };
                    let grow = &dy_i[(oy * g.out_w + ox) * c_out..][..c_out];
                    let wrow = &mut dw[((ky * g.k_w + kx) * c_in + ch) * c_out..][..c_out];
                    wrow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += v * gv);
                }
            }
        }
    }
    let db = Tensor::new(&[c_out], sum_rows(dy.data(), c_out))?;
    Ok((Tensor::new(w.shape(), dw)?, db))
}

fn depthwise_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<([usize; 4], [usize; 3])> {
    let xd = dims4(x, "depthwise input")?;
    let wd = match w.shape() {
        &[kh, kw, c] => [kh, kw, c],
        other => {
            return Err(Error::Shape(format!(
                "depthwise kernel must be rank 3, got {other:?}"
            )))
        }
    };
    if wd[2] != xd[3] {
        return Err(Error::Shape(format!(
            "depthwise input has {} channels but kernel has {}",
            xd[3], wd[2]
        )));
    }
    Ok((xd, wd))
}

/// Per-channel spatial convolution, `w` is `[kh, kw, c]`.
pub fn depthwise_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ([n, h, wi, c], wd) = depthwise_dims(x, w)?;
    let g = WindowGeometry::new(h, wi, wd[0], wd[1], stride, padding)?;
    let in_len = h * wi * c;
    let out_len = g.out_h * g.out_w * c;
    let mut y = vec![T::zero(); n * out_len];
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let yi = &mut y[i * out_len..(i + 1) * out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let out = &mut yi[(oy * g.out_w + ox) * c..][..c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let src = &xi[(iy * wi + ix) * c..][..c];
                        let k = &w.data()[(ky * g.k_w + kx) * c..][..c];
                        for ((o, &s), &kk) in out.iter_mut().zip(src).zip(k) {
                            *o += s * kk;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, g.out_h, g.out_w, c], y)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([n, h, wi, c], wd) = depthwise_dims(x, w)?;
    let g = WindowGeometry::new(h, wi, wd[0], wd[1], stride, padding)?;
    if dy.shape() != [n, g.out_h, g.out_w, c] {
        return Err(Error::Shape("depthwise upstream gradient mismatch".into()));
    }
    let in_len = h * wi * c;
    let out_len = g.out_h * g.out_w * c;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let dxi = &mut dx[i * in_len..(i + 1) * in_len];
        let dyi = &dy.data()[i * out_len..(i + 1) * out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let gout = &dyi[(oy * g.out_w + ox) * c..][..c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let base = (iy * wi + ix) * c;
                        let tap = (ky * g.k_w + kx) * c;
                        for ch in 0..c {
                            dxi[base + ch] += gout[ch] * w.data()[tap + ch];
                            dw[tap + ch] += gout[ch] * xi[base + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(w.shape(), dw)?))
}

/// Depthwise convolution followed by a 1x1 cross-channel convolution with bias.
pub fn separable_conv2d<T: Scalar>(
    x: &Tensor<T>,
    depthwise_w: &Tensor<T>,
    pointwise_w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let mid = depthwise_conv2d_forward(x, depthwise_w, stride, padding)?;
    conv2d_forward(&mid, pointwise_w, b, 1, Padding::Same)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape("relu gradient shape mismatch".into()));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape(), data)
}

/// Max pooling; also returns, per output element, the flat input index that won.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, h, w, c] = dims4(x, "maxpool input")?;
    let g = WindowGeometry::new(h, w, k, k, stride, padding)?;
    let in_len = h * w * c;
    let mut y = Vec::with_capacity(n * g.out_h * g.out_w * c);
    let mut argmax = Vec::with_capacity(y.capacity());
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        for kx in 0..k {
                            let Some(ix) = g.in_col(ox, kx) else { continue };
                            let idx = (iy * w + ix) * c + ch;
                            if best_idx == usize::MAX || xi[idx] > best {
                                best = xi[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push((i * in_len + best_idx) as u32);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, g.out_h, g.out_w, c], y)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::Shape("maxpool gradient does not match recorded argmax".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx as usize] += g;
    }
    Ok(dx)
}

/// `[n, h, w, c] -> [n, c]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(x, "global pool input")?;
    let inv = T::one() / T::from_f64_lossy((h * w) as f64);
    let mut y = vec![T::zero(); n * c];
    for i in 0..n {
        let out = &mut y[i * c..(i + 1) * c];
        for px in x.data()[i * h * w * c..(i + 1) * h * w * c].chunks_exact(c) {
            out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(&[n, c], y)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, h, w, c] = input_shape else {
        return Err(Error::Shape("global pool input must be rank 4".into()));
    };
    if dy.shape() != [n, c] {
        return Err(Error::Shape("global pool gradient mismatch".into()));
    }
    let inv = T::one() / T::from_f64_lossy((h * w) as f64);
    let mut dx = Vec::with_capacity(n * h * w * c);
    for i in 0..n {
        let g = &dy.data()[i * c..(i + 1) * c];
        for _ in 0..h * w {
            dx.extend(g.iter().map(|&v| v * inv));
        }
    }
    Tensor::new(input_shape, dx)
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        (&[n, i], &[wi, o]) if i == wi => Ok((n, i, o)),
        (xs, ws) => Err(Error::Shape(format!("dense input {xs:?} vs weights {ws:?}"))),
    }
}

/// `x [n, in] * w [in, out] + b`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, i, o) = dense_dims(x, w)?;
    let mut y = vec![T::zero(); n * o];
    gemm(n, i, o, x.data(), false, w.data(), false, &mut y, false);
    if let Some(b) = b {
        if b.len() != o {
            return Err(Error::Shape("dense bias length mismatch".into()));
        }
        add_bias_rows(&mut y, b.data());
    }
    Tensor::new(&[n, o], y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, i, o) = dense_dims(x, w)?;
    if dy.shape() != [n, o] {
        return Err(Error::Shape("dense gradient mismatch".into()));
    }
    let mut dx = vec![T::zero(); n * i];
    let mut dw = vec![T::zero(); i * o];
    gemm(n, o, i, dy.data(), false, w.data(), true, &mut dx, false);
    gemm(i, n, o, x.data(), true, dy.data(), false, &mut dw, false);
    Ok((
        Tensor::new(&[n, i], dx)?,
        Tensor::new(&[i, o], dw)?,
        Tensor::new(&[o], sum_rows(dy.data(), o))?,
    ))
}

pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
