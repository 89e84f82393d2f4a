//! Forward and backward kernels. Everything here works on raw slices; the
//! graph in `graph.rs` owns bookkeeping and shape validation.

use super::gemm::{gemm, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// For every flat index of `a_shape`, the flat index of the broadcast
/// operand of shape `b_shape` (same rank, size-1 axes repeated).
pub(super) fn broadcast_index_map(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        b_strides[axis] = if b_shape[axis] == 1 { 0 } else { stride };
        stride *= b_shape[axis];
    }
    let total: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < a_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    map
}

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

pub(super) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_plane();
    let mut cols = vec![0.0f32; g.patch_len() * n];
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(super) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_plane();
    let mut out = vec![0.0f32; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv_forward(cols: &[f32], weight: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_plane();
    let mut out = vec![0.0f32; g.c_out * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        MatRef::new(weight, g.c_out, g.patch_len()),
        MatRef::new(cols, g.patch_len(), n),
        1.0,
        &mut out,
    );
    out
}

pub(super) fn conv_weight_grad(grad_out: &[f32], cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_plane();
    let mut gw = vec![0.0f32; g.c_out * g.patch_len()];
    gemm(
        MatRef::new(grad_out, g.c_out, n),
        MatRef::new(cols, g.patch_len(), n).t(),
        0.0,
        &mut gw,
    );
    gw
}

pub(super) fn conv_input_grad(grad_out: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.out_plane();
    let mut gcols = vec![0.0f32; g.patch_len() * n];
    gemm(
        MatRef::new(weight, g.c_out, g.patch_len()).t(),
        MatRef::new(grad_out, g.c_out, n),
        0.0,
        &mut gcols,
    );
    col2im(&gcols, g)
}

pub(super) fn conv_bias_grad(grad_out: &[f32], g: &ConvGeom) -> Vec<f32> {
    grad_out
        .chunks(g.out_plane())
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

/// One interpolation tap pair along an axis.
#[derive(Clone, Copy, Debug)]
pub(super) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f32,
    pub w1: f32,
}

/// Half-pixel-centre (align-corners-false) sample positions, clamped at
/// the low edge and replicated at the high edge.
pub(super) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = (src - i0 as f64) as f32;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

pub(super) fn resize_forward(x: &[f32], c: usize, h: usize, w: usize, ys: &[Tap], xs: &[Tap]) -> Vec<f32> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ty in ys {
            let r0 = &plane[ty.i0 * w..(ty.i0 + 1) * w];
            let r1 = &plane[ty.i1 * w..(ty.i1 + 1) * w];
            for tx in xs {
                let top = tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1];
                let bottom = tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1];
                out.push(ty.w0 * top + ty.w1 * bottom);
            }
        }
    }
    out
}

pub(super) fn resize_backward(g: &[f32], c: usize, h: usize, w: usize, ys: &[Tap], xs: &[Tap]) -> Vec<f32> {
    let (oh, ow) = (ys.len(), xs.len());
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let v = gplane[oy * ow + ox];
                plane[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * v;
                plane[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * v;
                plane[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * v;
                plane[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * v;
            }
        }
    }
    out
}

/// Two-class cross-entropy averaged over pixels. Returns the loss and the
/// per-pixel softmax probabilities laid out like the logits.
pub(super) fn softmax_ce_forward(logits: &[f32], target: &[f32], plane: usize) -> (f32, Vec<f32>) {
    let mut probs = vec![0.0f32; 2 * plane];
    let mut total = 0.0f64;
    for p in 0..plane {
        let (l0, l1) = (logits[p], logits[plane + p]);
        let m = l0.max(l1);
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        let denom = e0 + e1;
        probs[p] = e0 / denom;
        probs[plane + p] = e1 / denom;
        let lse = m as f64 + (denom as f64).ln();
        let picked = if target[p] == 1.0 { l1 } else { l0 };
        total += lse - picked as f64;
    }
    ((total / plane as f64) as f32, probs)
}

pub(super) fn softmax_ce_backward(g: f32, probs: &[f32], target: &[f32], plane: usize) -> Vec<f32> {
    let scale = g / plane as f32;
    let mut out = vec![0.0f32; 2 * plane];
    for p in 0..plane {
        let fg = target[p];
        out[p] = scale * (probs[p] - (1.0 - fg));
        out[plane + p] = scale * (probs[plane + p] - fg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_repeats_singleton_axes() {
        assert_eq!(broadcast_index_map(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_index_map(&[2, 2], &[1, 1]), vec![0; 4]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 1,
            k: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f32> = (0..40).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.out_plane())
            .map(|i| ((i * 5) % 13) as f32 - 6.0)
            .collect();
        let lhs: f32 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn upsampling_two_to_four_uses_half_pixel_centres() {
        let out = resize_forward(&[0.0, 2.0], 1, 1, 2, &bilinear_taps(1, 1), &bilinear_taps(2, 4));
        assert_eq!(out, vec![0.0, 0.5, 1.5, 2.0]);
    }
}
