//! Dense row-major `f64` tensors and the handful of kernels the graph needs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!("expected a 2-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor { shape, data: self.data[start * inner..end * inner].to_vec() }
    }

    /// Concatenates `[N, C_k, H, W]` maps along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!("channel concat mismatch {:?} vs {:?}", p.shape, first.shape)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(n * total * h * w);
        for s in 0..n {
            for p in parts {
                let block = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[s * block..(s + 1) * block]);
            }
        }
        Ok(Tensor { shape: vec![n, total, h, w], data })
    }

    pub fn concat_outer(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "concat mismatch {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

/// `c = a · b + beta · c` with explicit row/column strides.
///
/// `a` is m×k, `b` is k×n, `c` is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: callers pass slices sized for the given dimensions and strides;
    // the extents are checked below in debug builds.
    debug_assert!(extent(m, k, rsa, csa) <= a.len());
    debug_assert!(extent(k, n, rsb, csb) <= b.len());
    debug_assert!(extent(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}

/// Geometry of a 2-d convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// Unfolds `x` [N,C,H,W] into columns [C·k·k, N·Ho·Wo].
pub(crate) fn im2col(x: &Tensor, win: Window) -> (Vec<f64>, usize, usize) {
    let (n, c, h, w) = x.dims4().expect("im2col input is 4-d");
    let (ho, wo) = (win.out_size(h), win.out_size(w));
    let k = win.kernel;
    let cols_n = n * ho * wo;
    let rows = c * k * k;
    let mut cols = vec![0.0; rows * cols_n];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * win.stride + ki) as isize - win.pad as isize;
                        let base = (b * ho + oh) * wo;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                        for ow in 0..wo {
                            let iw = (ow * win.stride + kj) as isize - win.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters columns back into an [N,C,H,W] buffer.
pub(crate) fn col2im(cols: &[f64], shape: (usize, usize, usize, usize), win: Window) -> Tensor {
    let (n, c, h, w) = shape;
    let (ho, wo) = (win.out_size(h), win.out_size(w));
    let k = win.kernel;
    let cols_n = n * ho * wo;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &mut od[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * win.stride + ki) as isize - win.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (b * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * win.stride + kj) as isize - win.pad as isize;
                            if iw >= 0 && iw < w as isize {
                                plane[ih as usize * w + iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Linear-interpolation taps for resizing an axis of length `src` to `dst`
/// with half-pixel centres (`align_corners = false`).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Tensor::from_vec(&[2, 2, 5, 5], (0..100).map(|v| (v as f64 * 0.37).sin()).collect())
            .unwrap();
        let win = Window { kernel: 3, stride: 2, pad: 1 };
        let (cols, _, _) = im2col(&x, win);
        let y: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, (2, 2, 5, 5), win);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn window_sizes() {
        let w = Window { kernel: 3, stride: 2, pad: 1 };
        assert_eq!(w.out_size(32), 16);
        assert_eq!(w.out_size(2), 1);
        assert_eq!(w.out_size(1), 1);
    }

    #[test]
    fn bilinear_taps_identity_at_same_size() {
        for (o, (i0, _, f)) in bilinear_taps(5, 5).into_iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(f, 0.0);
        }
    }
}
