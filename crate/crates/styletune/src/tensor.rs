//! Dense row-major tensors over `f32`/`f64` plus the convolution, resampling
//! and matrix kernels the autodiff graph is built from.
//!
//! Kernels are deterministic regardless of thread count: parallel sections
//! only ever write disjoint output slices, and reductions over the batch axis
//! are summed serially in index order.

use rand::RngCore;
use rayon::prelude::*;

/// Float element of a tensor. Implemented for `f32` (training, checkpoints)
/// and `f64` (finite-difference gradient checks).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// General matrix multiply C = alpha*A*B + beta*C on raw pointers with
    /// explicit strides (delegates to `matrixmultiply`).
    ///
    /// # Safety
    /// Pointers must cover the implied m*k / k*n / m*n extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal samples via Box-Muller; deterministic for a given RNG
    /// state and portable across platforms.
    pub fn randn<R: RngCore>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // u1 in (0,1], u2 in [0,1)
            let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / 9007199254740993.0;
            let u2 = (rng.next_u64() >> 11) as f64 / 9007199254740992.0;
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * theta.cos()));
            if data.len() < n {
                data.push(T::from_f64(r * theta.sin()));
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += scale * other (optimizer and EMA updates).
    pub fn axpy(&mut self, scale: T, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact value equality (`==` per element; -0.0 equals 0.0).
    pub fn value_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a == b)
    }

    /// Bit-level equality of the raw element representation.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-d tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

/// Lay out conv patches: col[(i*k+p)*k+q][u*w + v] = x[i, u+p-pad, v+q-pad].
fn im2col<T: Scalar>(x: &[T], in_ch: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), in_ch * k * k * hw);
    for i in 0..in_ch {
        let xi = &x[i * hw..(i + 1) * hw];
        for p in 0..k {
            for q in 0..k {
                let base = ((i * k + p) * k + q) * hw;
                let row = &mut col[base..base + hw];
                for u in 0..h {
                    let sy = u as isize + p as isize - pad as isize;
                    let dst = &mut row[u * w..(u + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &xi[sy as usize * w..(sy as usize + 1) * w];
                    let dq = q as isize - pad as isize;
                    for (v, d) in dst.iter_mut().enumerate() {
                        let sx = v as isize + dq;
                        *d = if sx < 0 || sx >= w as isize {
                            T::ZERO
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// y_one[O,HW] = wmat[O, I*k*k] x col(x_one).
fn conv_one<T: Scalar>(
    x: &[T],
    wmat: &[T],
    out: &mut [T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    col: &mut [T],
) {
    im2col(x, in_ch, h, w, k, col);
    let hw = h * w;
    let kk = in_ch * k * k;
    unsafe {
        T::gemm(
            out_ch,
            kk,
            hw,
            T::ONE,
            wmat.as_ptr(),
            kk as isize,
            1,
            col.as_ptr(),
            hw as isize,
            1,
            T::ZERO,
            out.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
}

/// dw_one[O, I*k*k] += g_one[O,HW] x col(x_one)^T.
fn conv_wgrad_one<T: Scalar>(
    x: &[T],
    g: &[T],
    dw: &mut [T],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    col: &mut [T],
    accumulate: bool,
) {
    im2col(x, in_ch, h, w, k, col);
    let hw = h * w;
    let kk = in_ch * k * k;
    let beta = if accumulate { T::ONE } else { T::ZERO };
    unsafe {
        T::gemm(
            out_ch,
            hw,
            kk,
            T::ONE,
            g.as_ptr(),
            hw as isize,
            1,
            col.as_ptr(),
            1,
            hw as isize,
            beta,
            dw.as_mut_ptr(),
            kk as isize,
            1,
        );
    }
}

/// Stride-1, zero same-padded 2-d convolution (odd k), weight shared over the
/// batch: y[b,o] = sum_i w[o,i] * x[b,i].
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (b, in_ch, h, wd) = dims4(x.shape());
    let (out_ch, wi, k, k2) = dims4(w.shape());
    assert_eq!(in_ch, wi, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv kernel must be square");
    assert_eq!(k % 2, 1, "conv kernel must be odd");
    let hw = h * wd;
    let mut y = Tensor::zeros(&[b, out_ch, h, wd]);
    let xs = x.data();
    let ws = w.data();
    y.data_mut()
        .par_chunks_mut(out_ch * hw)
        .enumerate()
        .for_each(|(bi, out)| {
            let mut col = vec![T::ZERO; in_ch * k * k * hw];
            conv_one(
                &xs[bi * in_ch * hw..(bi + 1) * in_ch * hw],
                ws,
                out,
                in_ch,
                out_ch,
                h,
                wd,
                k,
                &mut col,
            );
        });
    y
}

/// As [`conv2d`] but with a per-sample weight tensor `[B,O,I,k,k]`.
pub fn conv2d_batched<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (b, in_ch, h, wd) = dims4(x.shape());
    assert_eq!(w.shape().len(), 5, "batched conv weight must be 5-d");
    let (wb, out_ch, wi, k) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(w.shape()[4], k, "conv kernel must be square");
    assert_eq!(b, wb, "batched conv batch mismatch");
    assert_eq!(in_ch, wi, "conv2d channel mismatch");
    assert_eq!(k % 2, 1, "conv kernel must be odd");
    let hw = h * wd;
    let wstride = out_ch * in_ch * k * k;
    let mut y = Tensor::zeros(&[b, out_ch, h, wd]);
    let xs = x.data();
    let ws = w.data();
    y.data_mut()
        .par_chunks_mut(out_ch * hw)
        .enumerate()
        .for_each(|(bi, out)| {
            let mut col = vec![T::ZERO; in_ch * k * k * hw];
            conv_one(
                &xs[bi * in_ch * hw..(bi + 1) * in_ch * hw],
                &ws[bi * wstride..(bi + 1) * wstride],
                out,
                in_ch,
                out_ch,
                h,
                wd,
                k,
                &mut col,
            );
        });
    y
}

/// Weight gradient of [`conv2d`]: dw[o,i,p,q] = sum_{b,u,v} g[b,o,u,v] * x[b,i,u+p-pad,v+q-pad].
/// Per-sample partials are computed in parallel and reduced in batch order.
pub fn conv2d_wgrad<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (b, in_ch, h, wd) = dims4(x.shape());
    let (gb, out_ch, gh, gw) = dims4(g.shape());
    assert_eq!((b, h, wd), (gb, gh, gw), "conv2d_wgrad shape mismatch");
    let hw = h * wd;
    let wsize = out_ch * in_ch * k * k;
    let xs = x.data();
    let gs = g.data();
    let partials: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut dw = vec![T::ZERO; wsize];
            let mut col = vec![T::ZERO; in_ch * k * k * hw];
            conv_wgrad_one(
                &xs[bi * in_ch * hw..(bi + 1) * in_ch * hw],
                &gs[bi * out_ch * hw..(bi + 1) * out_ch * hw],
                &mut dw,
                in_ch,
                out_ch,
                h,
                wd,
                k,
                &mut col,
                false,
            );
            dw
        })
        .collect();
    let mut acc = vec![T::ZERO; wsize];
    for part in &partials {
        for (a, &p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    Tensor::new(&[out_ch, in_ch, k, k], acc)
}

/// Weight gradient of [`conv2d_batched`]: per-sample, no batch reduction.
pub fn conv2d_wgrad_batched<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (b, in_ch, h, wd) = dims4(x.shape());
    let (gb, out_ch, gh, gw) = dims4(g.shape());
    assert_eq!((b, h, wd), (gb, gh, gw), "conv2d_wgrad shape mismatch");
    let hw = h * wd;
    let wsize = out_ch * in_ch * k * k;
    let xs = x.data();
    let gs = g.data();
    let mut dw = Tensor::zeros(&[b, out_ch, in_ch, k, k]);
    dw.data_mut()
        .par_chunks_mut(wsize)
        .enumerate()
        .for_each(|(bi, out)| {
            let mut col = vec![T::ZERO; in_ch * k * k * hw];
            conv_wgrad_one(
                &xs[bi * in_ch * hw..(bi + 1) * in_ch * hw],
                &gs[bi * out_ch * hw..(bi + 1) * out_ch * hw],
                out,
                in_ch,
                out_ch,
                h,
                wd,
                k,
                &mut col,
                false,
            );
        });
    dw
}

/// Transpose a conv kernel for the input-gradient pass:
/// wt[i,o,p,q] = w[o,i,k-1-p,k-1-q].
pub fn kernel_transpose<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let (out_ch, in_ch, k, _) = dims4(w.shape());
    let mut out = Tensor::zeros(&[in_ch, out_ch, k, k]);
    let src = w.data();
    let dst = out.data_mut();
    for o in 0..out_ch {
        for i in 0..in_ch {
            for p in 0..k {
                for q in 0..k {
                    dst[((i * out_ch + o) * k + p) * k + q] =
                        src[((o * in_ch + i) * k + (k - 1 - p)) * k + (k - 1 - q)];
                }
            }
        }
    }
    out
}

/// Per-sample variant of [`kernel_transpose`] for `[B,O,I,k,k]` weights.
pub fn kernel_transpose_batched<T: Scalar>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.shape();
    assert_eq!(s.len(), 5);
    let (b, out_ch, in_ch, k) = (s[0], s[1], s[2], s[3]);
    let stride = out_ch * in_ch * k * k;
    let mut out = Tensor::zeros(&[b, in_ch, out_ch, k, k]);
    let src = w.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let sb = &src[bi * stride..(bi + 1) * stride];
        let db = &mut dst[bi * stride..(bi + 1) * stride];
        for o in 0..out_ch {
            for i in 0..in_ch {
                for p in 0..k {
                    for q in 0..k {
                        db[((i * out_ch + o) * k + p) * k + q] =
                            sb[((o * in_ch + i) * k + (k - 1 - p)) * k + (k - 1 - q)];
                    }
                }
            }
        }
    }
    out
}

fn upsample_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let n = src.len();
    let quarter = T::from_f64(0.25);
    let three_quarter = T::from_f64(0.75);
    for m in 0..n {
        let lo = if m == 0 { 0 } else { m - 1 };
        dst[2 * m] = src[lo] * quarter + src[m] * three_quarter;
        let hi = if m + 1 < n { m + 1 } else { m };
        dst[2 * m + 1] = src[m] * three_quarter + src[hi] * quarter;
    }
}

fn upsample_row_t<T: Scalar>(g: &[T], dst: &mut [T]) {
    let n = dst.len();
    let quarter = T::from_f64(0.25);
    let three_quarter = T::from_f64(0.75);
    for m in 0..n {
        let lo = if m == 0 { 0 } else { m - 1 };
        dst[lo] += g[2 * m] * quarter;
        dst[m] += g[2 * m] * three_quarter;
        let hi = if m + 1 < n { m + 1 } else { m };
        dst[m] += g[2 * m + 1] * three_quarter;
        dst[hi] += g[2 * m + 1] * quarter;
    }
}

/// Fixed bilinear 2x upsampling (half-pixel centers, replicated borders),
/// applied separably per row then per column. Constants are fixed points.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x.shape());
    let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(4 * h * w)
        .enumerate()
        .for_each(|(plane, out)| {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            // rows: h x w -> h x 2w
            let mut tmp = vec![T::ZERO; h * 2 * w];
            for u in 0..h {
                upsample_row(&src[u * w..(u + 1) * w], &mut tmp[u * 2 * w..(u + 1) * 2 * w]);
            }
            // cols: h x 2w -> 2h x 2w
            let mut colsrc = vec![T::ZERO; h];
            let mut coldst = vec![T::ZERO; 2 * h];
            for v in 0..2 * w {
                for u in 0..h {
                    colsrc[u] = tmp[u * 2 * w + v];
                }
                upsample_row(&colsrc, &mut coldst);
                for u in 0..2 * h {
                    out[u * 2 * w + v] = coldst[u];
                }
            }
        });
    y
}

/// Adjoint of [`upsample2x`] (used as its gradient).
pub fn upsample2x_t<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h2, w2) = dims4(g.shape());
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "odd upsample2x_t input");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut y = Tensor::zeros(&[b, c, h, w]);
    let gs = g.data();
    y.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, out)| {
            let src = &gs[plane * h2 * w2..(plane + 1) * h2 * w2];
            // adjoint of column pass: 2h x 2w -> h x 2w
            let mut tmp = vec![T::ZERO; h * w2];
            let mut colsrc = vec![T::ZERO; h2];
            let mut coldst = vec![T::ZERO; h];
            for v in 0..w2 {
                for u in 0..h2 {
                    colsrc[u] = src[u * w2 + v];
                }
                coldst.fill(T::ZERO);
                upsample_row_t(&colsrc, &mut coldst);
                for u in 0..h {
                    tmp[u * w2 + v] = coldst[u];
                }
            }
            // adjoint of row pass: h x 2w -> h x w
            for u in 0..h {
                upsample_row_t(&tmp[u * w2..(u + 1) * w2], &mut out[u * w..(u + 1) * w]);
            }
        });
    y
}

/// 2x2 average pooling.
pub fn avgpool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even extents");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let xs = x.data();
    let ys = y.data_mut();
    for plane in 0..b * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut ys[plane * oh * ow..(plane + 1) * ow * oh];
        for u in 0..oh {
            for v in 0..ow {
                dst[u * ow + v] = (src[2 * u * w + 2 * v]
                    + src[2 * u * w + 2 * v + 1]
                    + src[(2 * u + 1) * w + 2 * v]
                    + src[(2 * u + 1) * w + 2 * v + 1])
                    * quarter;
            }
        }
    }
    y
}

/// Adjoint of [`avgpool2`]: spread each gradient cell over its 2x2 source.
pub fn avgpool2_t<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c, oh, ow) = dims4(g.shape());
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor::zeros(&[b, c, h, w]);
    let gs = g.data();
    let ys = y.data_mut();
    for plane in 0..b * c {
        let src = &gs[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut ys[plane * h * w..(plane + 1) * h * w];
        for u in 0..oh {
            for v in 0..ow {
                let val = src[u * ow + v] * quarter;
                dst[2 * u * w + 2 * v] = val;
                dst[2 * u * w + 2 * v + 1] = val;
                dst[(2 * u + 1) * w + 2 * v] = val;
                dst[(2 * u + 1) * w + 2 * v + 1] = val;
            }
        }
    }
    y
}

/// x[M,K] * w[N,K]^T -> [M,N].
pub fn matmul_nt<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (x.shape()[0], x.shape()[1]);
    let (n, k2) = (w.shape()[0], w.shape()[1]);
    assert_eq!(k, k2, "matmul_nt inner dim mismatch");
    let mut y = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            x.data().as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            1,
            k as isize,
            T::ZERO,
            y.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    y
}

/// a[M,K] * b[K,N] -> [M,N].
pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_nn inner dim mismatch");
    let mut y = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            T::ZERO,
            y.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    y
}

/// a[K,M]^T * b[K,N] -> [M,N].
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_tn inner dim mismatch");
    let mut y = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            T::ZERO,
            y.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Naive O(B*O*I*k^2*HW) reference convolution.
    fn conv2d_ref(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (b, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros(&[b, oc, h, wd]);
        for bi in 0..b {
            for o in 0..oc {
                for u in 0..h {
                    for v in 0..wd {
                        let mut acc = 0.0;
                        for i in 0..ic {
                            for p in 0..k {
                                for q in 0..k {
                                    let sy = u as isize + p as isize - pad;
                                    let sx = v as isize + q as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * ic + i) * h + sy as usize) * wd
                                        + sx as usize]
                                        * w.data()[((o * ic + i) * k + p) * k + q];
                                }
                            }
                        }
                        y.data_mut()[((bi * oc + o) * h + u) * wd + v] = acc;
                    }
                }
            }
        }
        y
    }

    /// Scalar reference for the fixed bilinear 2x filter (independent loop).
    fn upsample2x_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        let sample = |plane: &[f64], u: isize, v: isize| -> f64 {
            let uu = u.clamp(0, h as isize - 1) as usize;
            let vv = v.clamp(0, w as isize - 1) as usize;
            plane[uu * w + vv]
        };
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for ou in 0..2 * h {
                for ov in 0..2 * w {
                    let su = 0.5 * (ou as f64 + 0.5) - 0.5;
                    let sv = 0.5 * (ov as f64 + 0.5) - 0.5;
                    let (fu, fv) = (su.floor(), sv.floor());
                    let (du, dv) = (su - fu, sv - fv);
                    let (iu, iv) = (fu as isize, fv as isize);
                    let val = sample(src, iu, iv) * (1.0 - du) * (1.0 - dv)
                        + sample(src, iu, iv + 1) * (1.0 - du) * dv
                        + sample(src, iu + 1, iv) * du * (1.0 - dv)
                        + sample(src, iu + 1, iv + 1) * du * dv;
                    y.data_mut()[plane * 4 * h * w + ou * 2 * w + ov] = val;
                }
            }
        }
        y
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = (x.abs() + y.abs()).max(1.0);
            assert!(
                ((x - y) / denom).abs() < tol,
                "mismatch {} vs {}",
                x,
                y
            );
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 4], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        assert_close(&conv2d(&x, &w), &conv2d_ref(&x, &w), 1e-12);
    }

    #[test]
    fn conv_1x1_matches_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[1, 4, 4, 4], &mut rng);
        let w = Tensor::randn(&[2, 4, 1, 1], &mut rng);
        assert_close(&conv2d(&x, &w), &conv2d_ref(&x, &w), 1e-12);
    }

    #[test]
    fn batched_conv_matches_per_sample_conv() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[3, 2, 4, 4], &mut rng);
        let w = Tensor::randn(&[3, 2, 2, 3, 3], &mut rng);
        let y = conv2d_batched(&x, &w);
        for bi in 0..3 {
            let xb = Tensor::new(&[1, 2, 4, 4], x.data()[bi * 32..(bi + 1) * 32].to_vec());
            let wb = Tensor::new(&[2, 2, 3, 3], w.data()[bi * 36..(bi + 1) * 36].to_vec());
            let yb = conv2d(&xb, &wb);
            assert_eq!(&y.data()[bi * 32..(bi + 1) * 32], yb.data());
        }
    }

    #[test]
    fn wgrad_matches_finite_difference_of_conv() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng);
        let mut w = Tensor::randn(&[2, 2, 3, 3], &mut rng);
        let g = Tensor::randn(&[2, 2, 4, 4], &mut rng);
        let dw = conv2d_wgrad(&x, &g, 3);
        let eps = 1e-6;
        for idx in 0..w.numel() {
            let orig = w.data()[idx];
            w.data_mut()[idx] = orig + eps;
            let up = conv2d(&x, &w).zip_map(&g, |a, b| a * b).sum();
            w.data_mut()[idx] = orig - eps;
            let dn = conv2d(&x, &w).zip_map(&g, |a, b| a * b).sum();
            w.data_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - dw.data()[idx]).abs() < 1e-6, "{} vs {}", fd, dw.data()[idx]);
        }
    }

    #[test]
    fn kernel_transpose_gives_input_gradient() {
        // <g, conv(x,w)> must equal <conv(g, wT), x> (adjoint identity).
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[1, 3, 5, 5], &mut rng);
        let w = Tensor::randn(&[2, 3, 3, 3], &mut rng);
        let g = Tensor::randn(&[1, 2, 5, 5], &mut rng);
        let lhs = conv2d(&x, &w).zip_map(&g, |a, b| a * b).sum();
        let rhs = conv2d(&g, &kernel_transpose(&w))
            .zip_map(&x, |a, b| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn upsample_constant_is_fixed_point() {
        let x = Tensor::full(&[1, 1, 3, 3], 2.5f64);
        let y = upsample2x(&x);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_1x1_replicates() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![5.0f64]);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_matches_scalar_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
        assert_close(&upsample2x(&x), &upsample2x_ref(&x), 1e-12);
    }

    #[test]
    fn upsample_transpose_is_adjoint() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 5], &mut rng);
        let g = Tensor::randn(&[1, 2, 6, 10], &mut rng);
        let lhs = upsample2x(&x).zip_map(&g, |a, b| a * b).sum();
        let rhs = upsample2x_t(&g).zip_map(&x, |a, b| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn avgpool_and_adjoint() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 6.0]);
        let y = avgpool2(&x);
        assert_eq!(y.data(), &[3.0]);
        let g = Tensor::new(&[1, 1, 1, 1], vec![4.0f64]);
        assert_eq!(avgpool2_t(&g).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let x = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let w = Tensor::randn(&[5, 4], &mut rng);
        let y = matmul_nt(&x, &w);
        for m in 0..3 {
            for n in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.data()[m * 4 + k] * w.data()[n * 4 + k];
                }
                assert!((y.data()[m * 5 + n] - acc).abs() < 1e-12);
            }
        }
        // adjoint identities tie the three variants together
        let g = Tensor::randn(&[3, 5], &mut rng);
        let lhs = y.zip_map(&g, |a, b| a * b).sum();
        let via_nn = matmul_nn(&g, &w).zip_map(&x, |a, b| a * b).sum();
        let via_tn = matmul_tn(&g, &x).zip_map(&w, |a, b| a * b).sum();
        assert!((lhs - via_nn).abs() < 1e-12);
        assert!((lhs - via_tn).abs() < 1e-12);
    }

    #[test]
    fn randn_is_deterministic() {
        let mut a = ChaCha12Rng::seed_from_u64(42);
        let mut b = ChaCha12Rng::seed_from_u64(42);
        let ta = Tensor::<f32>::randn(&[16], &mut a);
        let tb = Tensor::<f32>::randn(&[16], &mut b);
        assert!(ta.bit_eq(&tb));
    }
}
