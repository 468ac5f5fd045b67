//! Dense numeric kernels behind the tape ops.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Kernel/stride/padding of a 3D convolution or pooling window.
///
/// 2D operations use the same geometry with a trailing unit axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn cube(k: usize, s: usize, p: usize) -> Self {
        Self::new([k; 3], [s; 3], [p; 3])
    }

    pub fn square(k: usize, s: usize, p: usize) -> Self {
        Self::new([k, k, 1], [s, s, 1], [p, p, 0])
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Output extents; every axis must divide exactly.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let k = self.kernel[a];
            let s = self.stride[a];
            let padded = input[a] + 2 * self.pad[a];
            if k == 0 || s == 0 || padded < k || (padded - k) % s != 0 {
                return Err(Error::shape(format!(
                    "axis {a}: extent {} with kernel {k}, stride {s}, pad {} does not tile exactly",
                    input[a], self.pad[a]
                )));
            }
            out[a] = (padded - k) / s + 1;
        }
        Ok(out)
    }
}

/// For one axis: output index range whose input index `o*s + k - p` lands in `[0, n)`.
#[inline]
fn valid_range(out_len: usize, n: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k - p < n
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let limit = n + p; // o*s + k < n + p
    let hi = if limit > k { ((limit - k - 1) / s + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `input` (`[ci, in_dims]`) into a `[ci * taps, prod(out_dims)]` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], ci: usize, in_dims: [usize; 3], geom: &ConvGeom, out_dims: [usize; 3]) -> Vec<T> {
    let n_out: usize = out_dims.iter().product();
    let in_vox: usize = in_dims.iter().product();
    let [kx_n, ky_n, kz_n] = geom.kernel;
    let mut cols = vec![T::zero(); ci * geom.taps() * n_out];
    let mut r = 0;
    for c in 0..ci {
        let src = &input[c * in_vox..(c + 1) * in_vox];
        for kx in 0..kx_n {
            let (x_lo, x_hi) = valid_range(out_dims[0], in_dims[0], geom.stride[0], kx, geom.pad[0]);
            for ky in 0..ky_n {
                let (y_lo, y_hi) = valid_range(out_dims[1], in_dims[1], geom.stride[1], ky, geom.pad[1]);
                for kz in 0..kz_n {
                    let (z_lo, z_hi) = valid_range(out_dims[2], in_dims[2], geom.stride[2], kz, geom.pad[2]);
                    let row = &mut cols[r * n_out..(r + 1) * n_out];
                    r += 1;
                    if z_lo >= z_hi {
                        continue;
                    }
                    for ox in x_lo..x_hi {
                        let ix = ox * geom.stride[0] + kx - geom.pad[0];
                        for oy in y_lo..y_hi {
                            let iy = oy * geom.stride[1] + ky - geom.pad[1];
                            let in_base = (ix * in_dims[1] + iy) * in_dims[2];
                            let out_base = (ox * out_dims[1] + oy) * out_dims[2];
                            if geom.stride[2] == 1 {
                                let iz0 = z_lo + kz - geom.pad[2];
                                let len = z_hi - z_lo;
                                row[out_base + z_lo..out_base + z_hi]
                                    .copy_from_slice(&src[in_base + iz0..in_base + iz0 + len]);
                            } else {
                                for oz in z_lo..z_hi {
                                    let iz = oz * geom.stride[2] + kz - geom.pad[2];
                                    row[out_base + oz] = src[in_base + iz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into an input-shaped buffer.
pub(crate) fn col2im<T: Real>(cols: &[T], ci: usize, in_dims: [usize; 3], geom: &ConvGeom, out_dims: [usize; 3], grad_in: &mut [T]) {
    let n_out: usize = out_dims.iter().product();
    let in_vox: usize = in_dims.iter().product();
    let [kx_n, ky_n, kz_n] = geom.kernel;
    let mut r = 0;
    for c in 0..ci {
        let dst = &mut grad_in[c * in_vox..(c + 1) * in_vox];
        for kx in 0..kx_n {
            let (x_lo, x_hi) = valid_range(out_dims[0], in_dims[0], geom.stride[0], kx, geom.pad[0]);
            for ky in 0..ky_n {
                let (y_lo, y_hi) = valid_range(out_dims[1], in_dims[1], geom.stride[1], ky, geom.pad[1]);
                for kz in 0..kz_n {
                    let (z_lo, z_hi) = valid_range(out_dims[2], in_dims[2], geom.stride[2], kz, geom.pad[2]);
                    let row = &cols[r * n_out..(r + 1) * n_out];
                    r += 1;
                    if z_lo >= z_hi {
                        continue;
                    }
                    for ox in x_lo..x_hi {
                        let ix = ox * geom.stride[0] + kx - geom.pad[0];
                        for oy in y_lo..y_hi {
                            let iy = oy * geom.stride[1] + ky - geom.pad[1];
                            let in_base = (ix * in_dims[1] + iy) * in_dims[2];
                            let out_base = (ox * out_dims[1] + oy) * out_dims[2];
                            if geom.stride[2] == 1 {
                                let iz0 = z_lo + kz - geom.pad[2];
                                let len = z_hi - z_lo;
                                let d = &mut dst[in_base + iz0..in_base + iz0 + len];
                                for (d, &s) in d.iter_mut().zip(&row[out_base + z_lo..out_base + z_hi]) {
                                    *d += s;
                                }
                            } else {
                                for oz in z_lo..z_hi {
                                    let iz = oz * geom.stride[2] + kz - geom.pad[2];
                                    dst[in_base + iz] += row[out_base + oz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m, :] += Σ_k a[m, k] * b[k, :]` with `a: M×K`, `b: K×N`.
pub(crate) fn gemm_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for j in 0..k {
            let w = a[i * k + j];
            if w != T::zero() {
                axpy(row, w, &b[j * n..(j + 1) * n]);
            }
        }
    }
}

/// `out[k, :] += Σ_m a[m, k] * b[m, :]` with `a: M×K`, `b: M×N` (i.e. `aᵀ b`).
pub(crate) fn gemm_at_b_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for j in 0..k {
        let row = &mut out[j * n..(j + 1) * n];
        for i in 0..m {
            let w = a[i * k + j];
            if w != T::zero() {
                axpy(row, w, &b[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `out[m, k] += dot(a[m, :], b[k, :])` with `a: M×N`, `b: K×N` (i.e. `a bᵀ`).
pub(crate) fn gemm_a_bt_acc<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] += dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
}

/// Max-pool argmax map: for every output element, the flat input index of the
/// window maximum (first in scan order on ties). Padding never wins.
pub(crate) fn maxpool_argmax<T: Real>(input: &[T], channels: usize, in_dims: [usize; 3], geom: &ConvGeom, out_dims: [usize; 3]) -> Vec<u32> {
    let in_vox: usize = in_dims.iter().product();
    let out_vox: usize = out_dims.iter().product();
    let mut arg = Vec::with_capacity(channels * out_vox);
    for c in 0..channels {
        let base = c * in_vox;
        for ox in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for oz in 0..out_dims[2] {
                    let mut best: Option<(T, usize)> = None;
                    for kx in 0..geom.kernel[0] {
                        let ix = (ox * geom.stride[0] + kx) as isize - geom.pad[0] as isize;
                        if ix < 0 || ix >= in_dims[0] as isize {
                            continue;
                        }
                        for ky in 0..geom.kernel[1] {
                            let iy = (oy * geom.stride[1] + ky) as isize - geom.pad[1] as isize;
                            if iy < 0 || iy >= in_dims[1] as isize {
                                continue;
                            }
                            for kz in 0..geom.kernel[2] {
                                let iz = (oz * geom.stride[2] + kz) as isize - geom.pad[2] as isize;
                                if iz < 0 || iz >= in_dims[2] as isize {
                                    continue;
                                }
                                let idx = base + ((ix as usize * in_dims[1] + iy as usize) * in_dims[2] + iz as usize);
                                let v = input[idx];
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                    }
                    // A window always overlaps the input when pad < kernel.
                    arg.push(best.map(|(_, i)| i as u32).unwrap_or(super::NO_SOURCE));
                }
            }
        }
    }
    arg
}
