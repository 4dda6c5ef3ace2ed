//! Direct convolution kernels shared by the forward pass and backprop.
//!
//! Loops are arranged so the innermost dimension walks output columns with a
//! fixed scalar weight — an `out += w * in` pattern the compiler vectorizes
//! without reordering any reduction, keeping results bit-stable.

use crate::scalar::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct Geom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    /// Output-row range for which `iy = oy*stride + ky - pad` stays in bounds.
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky).div_ceil(self.stride);
        let hi_num = self.h + self.pad;
        let hi = if hi_num > ky {
            (((hi_num - ky - 1) / self.stride) + 1).min(self.ho)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi_num = self.w + self.pad;
        let hi = if hi_num > kx {
            (((hi_num - kx - 1) / self.stride) + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn forward<S: Scalar>(x: &[S], w: &[S], b: &[S], g: Geom) -> Vec<S> {
    let mut out = vec![S::zero(); g.cout * g.ho * g.wo];
    for co in 0..g.cout {
        out[co * g.ho * g.wo..(co + 1) * g.ho * g.wo].fill(b[co]);
    }
    for co in 0..g.cout {
        let ob = co * g.ho * g.wo;
        for ci in 0..g.cin {
            let xb = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let orow = &mut out[ob + oy * g.wo + ox0..ob + oy * g.wo + ox1];
                        let xrow = &x[xb + iy * g.w + ix0..];
                        if g.stride == 1 {
                            for (o, xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + wv * *xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                *o = *o + wv * xrow[i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input image.
pub(crate) fn backward_input<S: Scalar>(dout: &[S], w: &[S], g: Geom) -> Vec<S> {
    let mut dx = vec![S::zero(); g.cin * g.h * g.w];
    for co in 0..g.cout {
        let ob = co * g.ho * g.wo;
        for ci in 0..g.cin {
            let xb = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let orow = &dout[ob + oy * g.wo + ox0..ob + oy * g.wo + ox1];
                        let xrow = &mut dx[xb + iy * g.w + ix0..];
                        if g.stride == 1 {
                            for (xv, o) in xrow.iter_mut().zip(orow) {
                                *xv = *xv + wv * *o;
                            }
                        } else {
                            for (i, o) in orow.iter().enumerate() {
                                xrow[i * g.stride] = xrow[i * g.stride] + wv * *o;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the kernel.
pub(crate) fn backward_kernel<S: Scalar>(dout: &[S], x: &[S], g: Geom) -> Vec<S> {
    let mut dw = vec![S::zero(); g.cout * g.cin * g.k * g.k];
    for co in 0..g.cout {
        let ob = co * g.ho * g.wo;
        for ci in 0..g.cin {
            let xb = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.ox_range(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = S::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let orow = &dout[ob + oy * g.wo + ox0..ob + oy * g.wo + ox1];
                        let xrow = &x[xb + iy * g.w + ix0..];
                        if g.stride == 1 {
                            for (o, xv) in orow.iter().zip(xrow) {
                                acc = acc + *o * *xv;
                            }
                        } else {
                            for (i, o) in orow.iter().enumerate() {
                                acc = acc + *o * xrow[i * g.stride];
                            }
                        }
                    }
                    dw[((co * g.cin + ci) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    dw
}

/// Gradient w.r.t. the bias: one sum per output channel.
pub(crate) fn backward_bias<S: Scalar>(dout: &[S], g: Geom) -> Vec<S> {
    let mut db = vec![S::zero(); g.cout];
    for co in 0..g.cout {
        let mut acc = S::zero();
        for &v in &dout[co * g.ho * g.wo..(co + 1) * g.ho * g.wo] {
            acc = acc + v;
        }
        db[co] = acc;
    }
    db
}
