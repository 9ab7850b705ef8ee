//! Forward model of the blocked GEMM loop nest.
//!
//! A first-layer convolution is lowered to an `m x k` by `k x n` product
//! (im2col). The library splits `k` into L1 chunks of `q`, `m` into L2 chunks
//! of `p` and `n` into L3 chunks of `3 * unroll`. Inside one L1 iteration the
//! first `m` block is packed (`itcopy`) and multiplied against every packed
//! `n` panel (`oncopy`, `kernel`); each remaining `m` block is then packed and
//! multiplied against the already packed panels (`itcopy`, `kernel`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_io::Func;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("degenerate convolution: input {id} with kernel {kernel}, stride {stride}, padding {padding} has no output")]
    DegenerateConvolution {
        id: u64,
        kernel: u32,
        stride: u32,
        padding: u32,
    },
}

/// First-layer convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: u32,
    pub stride: u32,
    pub padding: u32,
    pub in_channels: u32,
    pub out_channels: u32,
}

impl ConvGeometry {
    pub fn new(
        kernel: u32,
        stride: u32,
        padding: u32,
        in_channels: u32,
        out_channels: u32,
    ) -> Result<Self, ModelError> {
        let geom = Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kernel == 0 {
            return Err(ModelError::InvalidParameter("kernel must be >= 1"));
        }
        if self.stride == 0 {
            return Err(ModelError::InvalidParameter("stride must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(ModelError::InvalidParameter("in_channels must be >= 1"));
        }
        if self.out_channels == 0 {
            return Err(ModelError::InvalidParameter("out_channels must be >= 1"));
        }
        Ok(())
    }

    /// Spatial side of the convolution output for a square input of side `id`.
    pub fn output_side(&self, id: u64) -> Result<u64, ModelError> {
        self.validate()?;
        let span = id + 2 * self.padding as u64;
        if id == 0 || span < self.kernel as u64 {
            return Err(ModelError::DegenerateConvolution {
                id,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            });
        }
        Ok((span - self.kernel as u64) / self.stride as u64 + 1)
    }
}

/// Matrix dimensions of the lowered product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmDims {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl GemmDims {
    pub fn new(m: u64, k: u64, n: u64) -> Result<Self, ModelError> {
        if m == 0 || k == 0 || n == 0 {
            return Err(ModelError::InvalidParameter("GEMM dimensions must be >= 1"));
        }
        Ok(Self { m, k, n })
    }
}

/// Library blocking constants. The L3 chunk is `3 * unroll`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingConstants {
    pub p: u64,
    pub q: u64,
    pub unroll: u64,
}

impl Default for BlockingConstants {
    fn default() -> Self {
        Self {
            p: 320,
            q: 320,
            unroll: 4,
        }
    }
}

impl BlockingConstants {
    pub fn new(p: u64, q: u64, unroll: u64) -> Result<Self, ModelError> {
        if p == 0 || q == 0 || unroll == 0 {
            return Err(ModelError::InvalidParameter(
                "blocking constants must be >= 1",
            ));
        }
        Ok(Self { p, q, unroll })
    }

    pub fn l3_chunk(&self) -> u64 {
        3 * self.unroll
    }
}

/// Chunk sizes processed by each iteration of the three loops.
///
/// L1 and L2 chunks may be half-integers: the remainder is split evenly over
/// the last two iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSchedule {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub l3: Vec<u64>,
}

impl LoopSchedule {
    /// Marker calls in execution order for the whole product.
    pub fn markers(&self) -> Vec<Func> {
        let per_l1 = 1 + 2 * self.l3.len() + 2 * (self.l2.len() - 1);
        let mut out = Vec::with_capacity(per_l1 * self.l1.len());
        for _ in &self.l1 {
            out.push(Func::Itcopy);
            for _ in &self.l3 {
                out.push(Func::Oncopy);
                out.push(Func::Kernel);
            }
            for _ in 1..self.l2.len() {
                out.push(Func::Itcopy);
                out.push(Func::Kernel);
            }
        }
        out
    }
}

/// im2col mapping: `m` output positions, `k = kernel^2 * C_in`, `n = C_out`.
pub fn conv_to_gemm(geom: &ConvGeometry, id: u64) -> Result<GemmDims, ModelError> {
    let out = geom.output_side(id)?;
    let kernel = geom.kernel as u64;
    GemmDims::new(
        out * out,
        kernel * kernel * geom.in_channels as u64,
        geom.out_channels as u64,
    )
}

/// Splits `total` into blocks of `block`, with the last two iterations
/// sharing `block + total % block` evenly. Totals up to `2 * block` become two
/// equal halves.
fn split_with_halved_tail(total: u64, block: u64) -> Vec<f64> {
    if total > 2 * block {
        let full = (total / block - 1) as usize;
        let half = (block + total % block) as f64 / 2.0;
        let mut chunks = vec![block as f64; full];
        chunks.push(half);
        chunks.push(half);
        chunks
    } else {
        vec![total as f64 / 2.0; 2]
    }
}

pub fn schedule(dims: &GemmDims, consts: &BlockingConstants) -> LoopSchedule {
    let l1 = if dims.k <= consts.q {
        vec![dims.k as f64]
    } else {
        split_with_halved_tail(dims.k, consts.q)
    };
    let l2 = split_with_halved_tail(dims.m, consts.p);

    let width = consts.l3_chunk();
    let count = dims.n.div_ceil(width);
    let mut l3 = vec![width; count as usize];
    if let Some(last) = l3.last_mut() {
        *last = dims.n - (count - 1) * width;
    }

    LoopSchedule { l1, l2, l3 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(kernel: u32, stride: u32, padding: u32, cin: u32, cout: u32) -> ConvGeometry {
        ConvGeometry::new(kernel, stride, padding, cin, cout).unwrap()
    }

    #[test]
    fn conv_to_gemm_examples() {
        let d = conv_to_gemm(&geom(3, 2, 1, 3, 64), 128).unwrap();
        assert_eq!((d.m, d.k, d.n), (4096, 27, 64));
        let d = conv_to_gemm(&geom(7, 2, 3, 3, 64), 224).unwrap();
        assert_eq!((d.m, d.k, d.n), (12544, 147, 64));
        let d = conv_to_gemm(&geom(1, 1, 0, 1, 1), 1).unwrap();
        assert_eq!((d.m, d.k, d.n), (1, 1, 1));
        // 4x4 stride 1 pad 1 on 64 gives 63x63
        let d = conv_to_gemm(&geom(4, 1, 1, 3, 64), 64).unwrap();
        assert_eq!((d.m, d.k), (3969, 48));
    }

    #[test]
    fn degenerate_convolution_is_rejected() {
        let err = conv_to_gemm(&geom(7, 1, 0, 3, 8), 5).unwrap_err();
        assert!(matches!(err, ModelError::DegenerateConvolution { .. }));
        assert!(err.to_string().contains("degenerate convolution"));
        assert!(ConvGeometry::new(0, 1, 0, 3, 8).is_err());
        assert!(ConvGeometry::new(3, 0, 0, 3, 8).is_err());
    }

    #[test]
    fn schedule_examples() {
        let c = BlockingConstants::default();
        let s = schedule(&GemmDims::new(4096, 27, 64).unwrap(), &c);
        let mut want = vec![320.0; 11];
        want.extend([288.0, 288.0]);
        assert_eq!(s.l2, want);
        assert_eq!(s.l3, vec![12, 12, 12, 12, 12, 4]);
        assert_eq!(s.l1, vec![27.0]);
    }

    #[test]
    fn schedule_edge_rules() {
        let c = BlockingConstants::default();
        // exact multiple: last two are p/2
        let s = schedule(&GemmDims::new(960, 640, 12).unwrap(), &c);
        assert_eq!(s.l2, vec![320.0, 320.0, 160.0, 160.0]);
        // q < k <= 2q: two halves
        assert_eq!(s.l1, vec![320.0, 320.0]);
        assert_eq!(s.l3, vec![12]);
        // m <= 2p: two halves, possibly fractional
        let s = schedule(&GemmDims::new(101, 1, 1).unwrap(), &c);
        assert_eq!(s.l2, vec![50.5, 50.5]);
        assert_eq!(s.l3, vec![1]);
        // odd remainder
        let s = schedule(&GemmDims::new(4097, 27, 24).unwrap(), &c);
        assert_eq!(&s.l2[11..], &[288.5, 288.5][..]);
        assert_eq!(s.l3, vec![12, 12]);
    }

    #[test]
    fn marker_sequence_shape() {
        let c = BlockingConstants::default();
        let s = schedule(&GemmDims::new(1000, 27, 16).unwrap(), &c);
        use Func::*;
        let expected = vec![
            Itcopy, Oncopy, Kernel, Oncopy, Kernel, Itcopy, Kernel, Itcopy, Kernel, Itcopy, Kernel,
        ];
        assert_eq!(s.l2.len(), 4);
        assert_eq!(s.markers(), expected);
    }
}
