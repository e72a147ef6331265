//! Max pooling with recorded winner positions.
//!
//! Forward scans each window in ascending `(dy, dx)` order and keeps the
//! first strict maximum, so ties resolve to the earliest position; the flat
//! input index of every winner is recorded and backward routes gradients
//! straight to those positions.

use super::NnError;
use crate::tensor::{Shape, Tensor};

/// Batched pool forward over `[B, H, W, C]`: returns `[B, oh, ow, C]` and
/// the winner index (into the input's flat data) per output element.
pub(super) fn forward(
    x: &Tensor,
    window: usize,
    stride: usize,
    out_shape: &Shape,
) -> Result<(Tensor, Vec<usize>), NnError> {
    let &[batch, h, w, c] = x.dims() else {
        unreachable!("pool input is [B, H, W, C] by construction")
    };
    let &[oh, ow, _] = out_shape.dims() else {
        unreachable!("pool output is [H, W, C] by construction")
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut routes = Vec::with_capacity(batch * oh * ow * c);
    for b in 0..batch {
        let base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..window {
                        let iy = oy * stride + dy;
                        for dx in 0..window {
                            let ix = ox * stride + dx;
                            let idx = base + (iy * w + ix) * c + ch;
                            // Strict > keeps the earliest window position.
                            if xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    routes.push(at);
                }
            }
        }
    }
    let y = Tensor::from_parts(Shape::new(&[batch, oh, ow, c]).expect("non-zero dims"), out);
    Ok((y, routes))
}

/// Routes `d_out` back to each window's recorded winner, accumulating in
/// ascending output order (windows may overlap when stride < window).
pub(super) fn backward(
    d_out: &Tensor,
    routes: &[usize],
    in_shape: &Shape,
) -> Result<Tensor, NnError> {
    let mut dx = vec![0.0; in_shape.elem_count()];
    for (&route, &g) in routes.iter().zip(d_out.data()) {
        dx[route] += g;
    }
    Tensor::new(in_shape.clone(), dx).map_err(NnError::from)
}
