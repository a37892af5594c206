//! Raw slice kernels behind the differentiable operations.
//!
//! Convolutions share one geometry walker; the forward pass, the adjoint
//! (scatter) pass and the kernel gradient differ only in the inner update.

/// Geometry of a 3-D cross-correlation `x (N,Ci,D0,D1,D2) * k (Co,Ci,K0,K1,K2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn input_len(&self) -> usize {
        self.batch * self.c_in * self.input.iter().product::<usize>()
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.c_out * self.output.iter().product::<usize>()
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel.iter().product::<usize>()
    }

    /// Visit every contiguous row of the innermost axis.
    ///
    /// The callback receives `(kernel_index, x_row, out_row, lo, hi, offset)`:
    /// output positions `lo..hi` of that row read input position
    /// `o * stride[2] + offset` (offset may be negative, but the range keeps
    /// the input index in bounds).
    #[inline]
    fn walk(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let [i0, i1, i2] = self.input;
        let [k0, k1, k2] = self.kernel;
        let [o0, o1, o2] = self.output;
        let [s0, s1, _] = self.stride;
        let in_plane = i0 * i1 * i2;
        let out_plane = o0 * o1 * o2;
        let r0: Vec<(usize, usize)> = (0..k0).map(|d| valid(o0, s0, d, self.pad[0], i0)).collect();
        let r1: Vec<(usize, usize)> = (0..k1).map(|d| valid(o1, s1, d, self.pad[1], i1)).collect();
        let r2: Vec<(usize, usize)> = (0..k2)
            .map(|d| valid(o2, self.stride[2], d, self.pad[2], i2))
            .collect();
        for n in 0..self.batch {
            for co in 0..self.c_out {
                let out_base = (n * self.c_out + co) * out_plane;
                for ci in 0..self.c_in {
                    let in_base = (n * self.c_in + ci) * in_plane;
                    for d0 in 0..k0 {
                        for d1 in 0..k1 {
                            for d2 in 0..k2 {
                                let kidx = (((co * self.c_in + ci) * k0 + d0) * k1 + d1) * k2 + d2;
                                let (lo2, hi2) = r2[d2];
                                if lo2 >= hi2 {
                                    continue;
                                }
                                let off2 = d2 as isize - self.pad[2] as isize;
                                for a in r0[d0].0..r0[d0].1 {
                                    let ia = a * s0 + d0 - self.pad[0];
                                    for b in r1[d1].0..r1[d1].1 {
                                        let ib = b * s1 + d1 - self.pad[1];
                                        let x_row = in_base + (ia * i1 + ib) * i2;
                                        let out_row = out_base + (a * o1 + b) * o2;
                                        f(kidx, x_row, out_row, lo2, hi2, off2);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        let s2 = self.stride[2];
        self.walk(|kidx, x_row, out_row, lo, hi, off| {
            let w = k[kidx];
            if w == 0.0 {
                return;
            }
            for o in lo..hi {
                let i = (o * s2) as isize + off;
                out[out_row + o] += w * x[x_row + i as usize];
            }
        });
        out
    }

    /// Adjoint of `forward` with respect to `x`: maps an output-shaped buffer
    /// back onto the input shape.
    pub fn scatter(&self, gy: &[f64], k: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.input_len()];
        let s2 = self.stride[2];
        self.walk(|kidx, x_row, out_row, lo, hi, off| {
            let w = k[kidx];
            if w == 0.0 {
                return;
            }
            for o in lo..hi {
                let i = (o * s2) as isize + off;
                gx[x_row + i as usize] += w * gy[out_row + o];
            }
        });
        gx
    }

    /// Gradient of `<forward(x, k), gy>` with respect to `k`.
    pub fn kernel_grad(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let mut gk = vec![0.0; self.kernel_len()];
        let s2 = self.stride[2];
        self.walk(|kidx, x_row, out_row, lo, hi, off| {
            let mut acc = 0.0;
            for o in lo..hi {
                let i = (o * s2) as isize + off;
                acc += gy[out_row + o] * x[x_row + i as usize];
            }
            gk[kidx] += acc;
        });
        gk
    }
}

/// Output positions `o` in `0..out` whose input index `o*stride + d - pad`
/// lies in `0..inn`, as a half-open range.
fn valid(out: usize, stride: usize, d: usize, pad: usize, inn: usize) -> (usize, usize) {
    let lo = if pad > d { (pad - d).div_ceil(stride) } else { 0 };
    let hi = if inn + pad > d {
        ((inn + pad - d - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// `y = x W^T + b` for `x (n, d_in)`, `W (d_out, d_in)`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    for i in 0..n {
        let xr = &x[i * d_in..(i + 1) * d_in];
        for o in 0..d_out {
            let wr = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            y[i * d_out + o] = acc;
        }
    }
    y
}

/// Per-(sample, group) statistics cached by the group-norm forward pass.
pub(crate) struct GroupNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    batch: usize,
    channels: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, GroupNormCache) {
    let spatial = x.len() / (batch * channels);
    let cpg = channels / groups;
    let block = cpg * spatial;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; batch * groups];
    for n in 0..batch {
        for g in 0..groups {
            let start = (n * channels + g * cpg) * spatial;
            let seg = &x[start..start + block];
            let mean = seg.iter().sum::<f64>() / block as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[n * groups + g] = r;
            for (j, v) in seg.iter().enumerate() {
                let c = g * cpg + j / spatial;
                let h = (v - mean) * r;
                xhat[start + j] = h;
                y[start + j] = h * gamma[c] + beta[c];
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns `(gx, ggamma, gbeta)`.
pub(crate) fn group_norm_backward(
    gy: &[f64],
    gamma: &[f64],
    cache: &GroupNormCache,
    batch: usize,
    channels: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let spatial = gy.len() / (batch * channels);
    let cpg = channels / groups;
    let block = cpg * spatial;
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; channels];
    let mut gbeta = vec![0.0; channels];
    for n in 0..batch {
        for g in 0..groups {
            let start = (n * channels + g * cpg) * spatial;
            let r = cache.rstd[n * groups + g];
            let mut mean_gh = 0.0;
            let mut mean_ghx = 0.0;
            for j in 0..block {
                let c = g * cpg + j / spatial;
                let gh = gy[start + j] * gamma[c];
                mean_gh += gh;
                mean_ghx += gh * cache.xhat[start + j];
                ggamma[c] += gy[start + j] * cache.xhat[start + j];
                gbeta[c] += gy[start + j];
            }
            mean_gh /= block as f64;
            mean_ghx /= block as f64;
            for j in 0..block {
                let c = g * cpg + j / spatial;
                let gh = gy[start + j] * gamma[c];
                gx[start + j] = r * (gh - mean_gh - cache.xhat[start + j] * mean_ghx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for out in 1..6 {
            for stride in 1..4 {
                for d in 0..4 {
                    for pad in 0..3 {
                        for inn in 1..8 {
                            let (lo, hi) = valid(out, stride, d, pad, inn);
                            for o in 0..out {
                                let i = (o * stride + d) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < inn;
                                assert_eq!(inside, o >= lo && o < hi, "{out} {stride} {d} {pad} {inn} {o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
