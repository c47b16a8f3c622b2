//! Scalar trait and the low-level kernels shared by the layers.
//!
//! Feature maps are stored channel-major as `(C, N, H, W)`. With that layout
//! the GEMM output of an im2col convolution is already in place and every
//! channel occupies one contiguous slice, which is what batch normalization
//! reduces over.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, NdFloat};
use num_traits::FromPrimitive;
use std::iter::Sum;

/// Floating point type the networks are generic over. Training runs in
/// `f32`; gradient verification runs in `f64`.
pub trait Real: NdFloat + FromPrimitive + Default + Sum + 'static {
    const DTYPE: u8;
    const NAME: &'static str;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f32";

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const NAME: &'static str = "f64";

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Size in bytes of one serialized element for a dtype tag.
pub fn dtype_size(dtype: u8) -> Option<usize> {
    match dtype {
        1 => Some(4),
        2 => Some(8),
        _ => None,
    }
}

/// Square kernel geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output extent of a forward convolution, `None` if the input is too small.
    pub fn out_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution with this geometry.
    pub fn transposed_out_size(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds `(C, N, H, W)` patches into a `(C*k*k, N*OH*OW)` matrix.
pub fn im2col<T: Real>(x: ArrayView4<T>, g: ConvGeom, oh: usize, ow: usize) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let k = g.kernel;
    let cols_per_row = n * oh * ow;
    let mut out = Array2::<T>::zeros((c * k * k, cols_per_row));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let drow = &mut dst[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &src[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for i in 0..oh {
                        let y = (i * g.stride + ki) as isize - g.padding as isize;
                        let base = (ni * oh + i) * ow;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let srow = &plane[y as usize * w..(y as usize + 1) * w];
                        for j in 0..ow {
                            let xcol = (j * g.stride + kj) as isize - g.padding as isize;
                            if xcol >= 0 && xcol < w as isize {
                                drow[base + j] = srow[xcol as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `(C, N, H, W)`.
pub fn col2im<T: Real>(
    cols: ArrayView2<T>,
    dims: (usize, usize, usize, usize),
    g: ConvGeom,
    oh: usize,
    ow: usize,
) -> Array4<T> {
    let (c, n, h, w) = dims;
    let k = g.kernel;
    let cols_per_row = n * oh * ow;
    debug_assert_eq!(cols.dim(), (c * k * k, cols_per_row));
    let mut out = Array4::<T>::zeros(dims);
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let srow = &src[row * cols_per_row..(row + 1) * cols_per_row];
                for ni in 0..n {
                    let plane = &mut dst[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for i in 0..oh {
                        let y = (i * g.stride + ki) as isize - g.padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = (ni * oh + i) * ow;
                        let drow = &mut plane[y as usize * w..(y as usize + 1) * w];
                        for j in 0..ow {
                            let xcol = (j * g.stride + kj) as isize - g.padding as isize;
                            if xcol >= 0 && xcol < w as isize {
                                drow[xcol as usize] += srow[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(C, N, H, W)` feature map to `(N, C*H*W)` rows.
pub fn flatten<T: Real>(x: ArrayView4<T>) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let permuted = x.permuted_axes([1, 0, 2, 3]);
    let owned = permuted.as_standard_layout().into_owned();
    owned.into_shape_with_order((n, c * h * w)).expect("contiguous")
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Real>(x: ArrayView2<T>, c: usize, h: usize, w: usize) -> Array4<T> {
    let n = x.nrows();
    let nchw = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h, w))
        .expect("feature count matches");
    nchw.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// Images `(N, C, H, W)` to the internal channel-major layout.
pub fn from_nchw<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    x.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// Internal layout back to `(N, C, H, W)`.
pub fn to_nchw<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    x.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// Selects samples along the batch axis of a channel-major map.
pub fn select_batch<T: Real>(x: ArrayView4<T>, idx: &[usize]) -> Array4<T> {
    x.select(Axis(1), idx)
}

/// Concatenates row blocks `[a | b | ...]` along the feature axis.
pub fn hconcat<T: Real>(parts: &[ArrayView2<T>]) -> Array2<T> {
    ndarray::concatenate(Axis(1), parts).expect("equal row counts")
}
