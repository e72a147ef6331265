//! Convolution as a matrix product over image patches.
//!
//! Forward lowers the batched input to a patch matrix (`im2col`): one row
//! per output position holding the receptive field in `(dy, dx, channel)`
//! order, matching the rows of the layer's weight matrix.  The convolution
//! is then a single `patches · weights + bias` product, and the backward
//! pass reuses the patch matrix for the weight gradient and scatters the
//! patch gradient back to image positions (`col2im`).

use super::{LayerParams, LayerSpec, NnError};
use crate::tensor::{Shape, Tensor};

/// Resolved geometry of one conv application.
pub(super) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn for_layer(spec: &LayerSpec, x: &Tensor, out_shape: &Shape) -> ConvGeom {
        let LayerSpec::Conv { kh, kw, out_channels, stride, pad } = *spec else {
            unreachable!("conv geometry of a non-conv layer")
        };
        let &[batch, h, w, c] = x.dims() else {
            unreachable!("conv input is [B, H, W, C] by construction")
        };
        let &[oh, ow, _] = out_shape.dims() else {
            unreachable!("conv output is [H, W, C] by construction")
        };
        ConvGeom { batch, h, w, c, kh, kw, out_channels, stride, pad, oh, ow }
    }
}

/// Lowers `[B, H, W, C]` to the patch matrix `[B·oh·ow, kh·kw·C]`.
/// Positions outside the padded border contribute zeros.
fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let xd = x.data();
    let row_len = g.kh * g.kw * g.c;
    let mut cols = vec![0.0; g.batch * g.oh * g.ow * row_len];
    let mut row = 0;
    for b in 0..g.batch {
        let xb = &xd[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * row_len..(row + 1) * row_len];
                row += 1;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let at = (dy * g.kw + dx) * g.c;
                        dst[at..at + g.c].copy_from_slice(&xb[src..src + g.c]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(
        Shape::new(&[g.batch * g.oh * g.ow, row_len]).expect("non-zero dims"),
        cols,
    )
}

/// Scatters a patch-matrix gradient back to `[B, H, W, C]`; each image
/// position accumulates its contributions in ascending patch-row order.
fn col2im(dcols: &Tensor, g: &ConvGeom) -> Result<Tensor, NnError> {
    let dd = dcols.data();
    let row_len = g.kh * g.kw * g.c;
    let mut dx = vec![0.0; g.batch * g.h * g.w * g.c];
    let mut row = 0;
    for b in 0..g.batch {
        let xb = &mut dx[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &dd[row * row_len..(row + 1) * row_len];
                row += 1;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx_k in 0..g.kw {
                        let ix = (ox * g.stride + dx_k) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.c;
                        let at = (dy * g.kw + dx_k) * g.c;
                        for ch in 0..g.c {
                            xb[dst + ch] += src[at + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(Shape::new(&[g.batch, g.h, g.w, g.c])?, dx).map_err(NnError::from)
}

/// Batched conv forward: returns `[B, oh, ow, K]` and the patch matrix kept
/// for backward.
pub(super) fn forward(
    x: &Tensor,
    params: &LayerParams,
    g: &ConvGeom,
) -> Result<(Tensor, Tensor), NnError> {
    let cols = im2col(x, g);
    let y2d = cols.matmul_bias(&params.weight, Some(&params.bias))?;
    let y = y2d.reshape(&[g.batch, g.oh, g.ow, g.out_channels])?;
    Ok((y, cols))
}

/// Batched conv backward from `d_out` `[B, oh, ow, K]`: weight gradient
/// `patchesᵀ · d_out`, bias gradient as column sums, and the input gradient
/// via `col2im`.
pub(super) fn backward(
    d_out: &Tensor,
    cols: &Tensor,
    params: &LayerParams,
    g: &ConvGeom,
) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let rows = g.batch * g.oh * g.ow;
    let d2d = d_out.clone().reshape(&[rows, g.out_channels])?;
    let dw = cols.matmul_at_b(&d2d)?;
    let db = d2d.sum_axis(0)?;
    let dcols = d2d.matmul_a_bt(&params.weight)?;
    let dx = col2im(&dcols, g)?;
    Ok((dw, db, dx))
}
