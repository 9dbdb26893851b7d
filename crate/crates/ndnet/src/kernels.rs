//! Forward and backward kernels on raw slices. The tape wires these together.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `cin×h×w` image into `(cin·k·k) × (h·w)` columns with zero padding.
fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x as isize + shift;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    for c in 0..g.cin {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for x in 0..w {
                        let ix = x as isize + shift;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let hw = g.hw();
    let mut out = vec![T::zero(); g.batch * g.cout * hw];
    let mut col = vec![T::zero(); g.col_rows() * hw];
    for b in 0..g.batch {
        let x = &input[b * g.cin * hw..(b + 1) * g.cin * hw];
        let y = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (o, row) in y.chunks_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        im2col(g, x, &mut col);
        gemm(false, false, g.cout, hw, g.col_rows(), T::one(), weight, &col, T::one(), y);
    }
    out
}

/// Accumulates gradients for whichever of input/weight/bias are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let hw = g.hw();
    let rows = g.col_rows();
    let mut col = vec![T::zero(); rows * hw];
    for b in 0..g.batch {
        let dy = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (o, row) in dy.chunks(hw).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grad_weight.as_deref_mut() {
            let x = &input[b * g.cin * hw..(b + 1) * g.cin * hw];
            im2col(g, x, &mut col);
            gemm(false, true, g.cout, rows, hw, T::one(), dy, &col, T::one(), dw);
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            gemm(true, false, rows, hw, g.cout, T::one(), weight, dy, T::zero(), &mut col);
            col2im_add(g, &col, &mut dx[b * g.cin * hw..(b + 1) * g.cin * hw]);
        }
    }
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-sample normalization over (C,H,W) followed by a per-channel affine map.
pub(crate) fn layer_norm_forward<T: Scalar>(
    dims: (usize, usize, usize),
    input: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LayerNormSaved<T>) {
    let (batch, c, hw) = dims;
    let per = c * hw;
    let n = T::of(per as f64);
    let mut out = vec![T::zero(); input.len()];
    let mut xhat = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(batch);
    for b in 0..batch {
        let x = &input[b * per..(b + 1) * per];
        let rough = x.iter().copied().sum::<T>() / n;
        let mean = rough + x.iter().map(|&v| v - rough).sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let xh = &mut xhat[b * per..(b + 1) * per];
        let y = &mut out[b * per..(b + 1) * per];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                let v = (x[i] - mean) * istd;
                xh[i] = v;
                y[i] = gain[ch] * v + bias[ch];
            }
        }
    }
    (out, LayerNormSaved { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    dims: (usize, usize, usize),
    saved: &LayerNormSaved<T>,
    gain: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    mut grad_gain: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let (batch, c, hw) = dims;
    let per = c * hw;
    let n = T::of(per as f64);
    for b in 0..batch {
        let dy = &grad_out[b * per..(b + 1) * per];
        let xh = &saved.xhat[b * per..(b + 1) * per];
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            if let Some(dg) = grad_gain.as_deref_mut() {
                dg[ch] += dy[r.clone()].iter().zip(&xh[r.clone()]).map(|(&d, &x)| d * x).sum::<T>();
            }
            if let Some(db) = grad_bias.as_deref_mut() {
                db[ch] += dy[r].iter().copied().sum::<T>();
            }
        }
    }
    let Some(dx) = grad_input else { return };
    for b in 0..batch {
        let dy = &grad_out[b * per..(b + 1) * per];
        let xh = &saved.xhat[b * per..(b + 1) * per];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                let d = dy[i] * gain[ch];
                sum_d += d;
                sum_dx += d * xh[i];
            }
        }
        let scale = saved.inv_std[b] / n;
        let dxb = &mut dx[b * per..(b + 1) * per];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                let d = dy[i] * gain[ch];
                dxb[i] += scale * (n * d - sum_d - xh[i] * sum_dx);
            }
        }
    }
}

/// 2×2 non-overlapping mean over each `h×w` plane.
pub(crate) fn avg_pool2_forward<T: Scalar>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let x = &input[p * h * w..(p + 1) * h * w];
        let y = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (2 * oy, 2 * ox);
                y[oy * ow + ox] = quarter
                    * (x[iy * w + ix] + x[iy * w + ix + 1] + x[(iy + 1) * w + ix] + x[(iy + 1) * w + ix + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(planes: usize, h: usize, w: usize, grad_out: &[T], grad_input: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for p in 0..planes {
        let dy = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dx = &mut grad_input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dx[y * w + x] += quarter * dy[(y / 2) * ow + x / 2];
            }
        }
    }
}

/// Nearest-neighbour 2× replication of each `h×w` plane.
pub(crate) fn upsample2_forward<T: Scalar>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let x = &input[p * h * w..(p + 1) * h * w];
        let y = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                y[oy * ow + ox] = x[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(planes: usize, h: usize, w: usize, grad_out: &[T], grad_input: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let dy = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dx = &mut grad_input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(oy / 2) * w + ox / 2] += dy[oy * ow + ox];
            }
        }
    }
}
