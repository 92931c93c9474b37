//! Dense row-major tensors and the numeric kernels the rest of the crate is
//! built on.
//!
//! Activations use the `N, C, H, W` layout throughout. Convolution is lowered
//! to a patch matrix (im2col) followed by a GEMM; samples are processed
//! independently so results do not depend on the number of worker threads.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
                assert!(a.len() >= extent(m, k, rsa, csa));
                assert!(b.len() >= extent(k, n, rsb, csb));
                assert!(c.len() >= extent(m, n, rsc, csc));
                // SAFETY: every index touched lies within the extents asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!(
                    "shape {shape:?} holds {expected} elements but {} were given",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Element at a multi-dimensional index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// `[M, K] · [K, P] -> [M, P]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, p]);
        T::gemm(
            m,
            k,
            p,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            p as isize,
            1,
            T::zero(),
            &mut out.data,
            p as isize,
            1,
        );
        Ok(out)
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let [n, c, h, w] = dims4("global_avg_pool", &self.shape)?;
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = self
            .data
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Tensor::new(&[n, c], data)
    }

    /// 2-D convolution of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`, zero padded.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let geom = ConvGeometry::new(&self.shape, &kernel.shape, stride, padding)?;
        let mut out = Tensor::zeros(&geom.output_shape());
        conv2d_forward(&geom, &self.data, &kernel.data, &mut out.data);
        Ok(out)
    }
}

pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            reason: format!("expected a rank-4 N,C,H,W tensor, got {shape:?}"),
        }),
    }
}

/// Sizes of a convolution. Output size uses floor division.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = dims4("conv2d", input)?;
        let [cout, kcin, kh, kw] = dims4("conv2d", kernel)?;
        if kcin != cin {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let invalid = |reason: String| Error::InvalidShape {
            op: "conv2d",
            reason,
        };
        if stride == 0 {
            return Err(invalid("stride must be at least 1".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid(format!("kernel size {kh}x{kw} must be odd")));
        }
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
            return Err(invalid(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        };
        if n == 0 || cout == 0 || cin == 0 {
            return Err(invalid("zero-sized dimension".into()));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_height: span_h / stride + 1,
            out_width: span_w / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height,
            self.out_width,
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// Input coordinate read by output position `o` at kernel offset `k`.
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < limit)
    }
}

/// Lowers one sample `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeometry, sample: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_channels {
        let channel = &sample[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for dy in 0..g.kernel_h {
            for dx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + dy) * g.kernel_w + dx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    match g.source(oy, dy, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &channel[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.source(ox, dx, g.width).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto a `[Cin, H, W]` sample.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], sample: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_channels {
        let channel = &mut sample[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for dy in 0..g.kernel_h {
            for dx in 0..g.kernel_w {
                let row = (ci * g.kernel_h + dy) * g.kernel_w + dx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let Some(iy) = g.source(oy, dy, g.height) else {
                        continue;
                    };
                    for ox in 0..g.out_width {
                        if let Some(ix) = g.source(ox, dx, g.width) {
                            channel[iy * g.width + ix] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    out: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.out_plane());
    out.par_chunks_mut(g.out_sample())
        .zip(input.par_chunks(g.in_sample()))
        .for_each_init(
            || vec![T::zero(); k * p],
            |col, (dst, sample)| {
                im2col(g, sample, col);
                T::gemm(
                    g.out_channels,
                    k,
                    p,
                    T::one(),
                    kernel,
                    k as isize,
                    1,
                    col,
                    p as isize,
                    1,
                    T::zero(),
                    dst,
                    p as isize,
                    1,
                );
            },
        );
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_grad_input<T: Scalar>(
    g: &ConvGeometry,
    kernel: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let mut grad_in = vec![T::zero(); g.batch * g.in_sample()];
    grad_in
        .par_chunks_mut(g.in_sample())
        .zip(grad_out.par_chunks(g.out_sample()))
        .for_each_init(
            || vec![T::zero(); k * p],
            |col, (dst, dout)| {
                // col = kernelᵀ · dout
                T::gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    kernel,
                    1,
                    k as isize,
                    dout,
                    p as isize,
                    1,
                    T::zero(),
                    col,
                    p as isize,
                    1,
                );
                col2im(g, col, dst);
            },
        );
    grad_in
}

/// Samples per partial sum in the kernel gradient. Fixed so that the
/// summation order does not depend on the thread count.
const KERNEL_GRAD_CHUNK: usize = 8;

/// Gradient with respect to the convolution kernel.
pub(crate) fn conv2d_grad_kernel<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    grad_out: &[T],
) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_plane());
    let kernel_len = g.out_channels * k;
    let partials: Vec<Vec<T>> = input
        .par_chunks(g.in_sample() * KERNEL_GRAD_CHUNK)
        .zip(grad_out.par_chunks(g.out_sample() * KERNEL_GRAD_CHUNK))
        .map(|(samples, douts)| {
            let mut acc = vec![T::zero(); kernel_len];
            let mut col = vec![T::zero(); k * p];
            for (sample, dout) in samples
                .chunks(g.in_sample())
                .zip(douts.chunks(g.out_sample()))
            {
                im2col(g, sample, &mut col);
                // acc += dout · colᵀ
                T::gemm(
                    g.out_channels,
                    p,
                    k,
                    T::one(),
                    dout,
                    p as isize,
                    1,
                    &col,
                    1,
                    p as isize,
                    T::one(),
                    &mut acc,
                    k as isize,
                    1,
                );
            }
            acc
        })
        .collect();
    let mut parts = partials.into_iter();
    let mut total = parts.next().unwrap_or_else(|| vec![T::zero(); kernel_len]);
    for part in parts {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    total
}
