//! Sparse 3D convolution networks with a small reverse-mode tape, batch
//! normalization, the light U-Net transition kernel, AdamW and a binary model
//! format.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

mod kernel_map;
mod ops;
mod optim;
mod serial;
mod tape;
mod unet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use kernel_map::{ConvKind, KernelMap};
pub use optim::{AdamW, AdamWConfig};
pub use serial::{deserialize_model, serialize_model, MODEL_MAGIC, MODEL_VERSION};
pub use tape::{NodeId, Tape, TapeGrads};
pub use unet::{BnMode, ForwardPass, NetInput, NetworkConfig, Param, TransitionKernelModel};

use crate::coord::Coord;
use crate::{Error, Result};

pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m x k` by `k x n` product with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn of(v: f64) -> Self {
                v as $t
            }

            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
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
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Values on a sparse coordinate set, row-major `coords.len() x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<S> {
    pub coords: Vec<Coord>,
    pub values: Vec<S>,
    pub channels: usize,
    /// Coordinate granularity relative to the finest level.
    pub stride: u32,
}

impl<S: Scalar> SparseTensor<S> {
    pub fn new(coords: Vec<Coord>, values: Vec<S>, channels: usize) -> Result<Self> {
        if values.len() != coords.len() * channels {
            return Err(Error::Shape(format!(
                "{} values for {} cells x {} channels",
                values.len(),
                coords.len(),
                channels
            )));
        }
        let mut sorted = coords.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Shape("duplicate coordinates".into()));
        }
        Ok(Self { coords, values, channels, stride: 1 })
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Convolution weights `[offset][cin][cout]` over an explicit offset list.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<S> {
    pub offsets: Vec<Coord>,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<S>,
}

/// Output at each `out_coords` cell gathers the active input cells at the kernel
/// offsets; absent inputs contribute zero.
pub fn sparse_conv<S: Scalar>(
    input: &SparseTensor<S>,
    kernel: &ConvKernel<S>,
    out_coords: &[Coord],
) -> Result<SparseTensor<S>> {
    if input.channels != kernel.cin {
        return Err(Error::Shape(format!("input has {} channels, kernel expects {}", input.channels, kernel.cin)));
    }
    if kernel.weights.len() != kernel.offsets.len() * kernel.cin * kernel.cout {
        return Err(Error::Shape("kernel weight count does not match its shape".into()));
    }
    let map = KernelMap::with_offsets(&input.coords, out_coords, &kernel.offsets);
    let bias = vec![S::zero(); kernel.cout];
    let values = ops::conv_forward(&input.values, kernel.cin, &map, &kernel.weights, &bias, kernel.cout);
    Ok(SparseTensor { coords: out_coords.to_vec(), values, channels: kernel.cout, stride: input.stride })
}
