//! Forward and adjoint loops for the heavier operators. Parallel loops split
//! over independent output planes, so every element is reduced in a fixed
//! order regardless of thread count.

use rayon::prelude::*;

use super::tape::Axis;
use super::{Scalar, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.stride > 0 && padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

/// Output positions `o` in `[0, out_len)` whose input index
/// `o * stride + k - pad` lands inside `[0, in_len)`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o * stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o * stride + k - pad <= in_len - 1
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (s, p) = (g.spec.stride, g.spec.padding);
    let mut out = vec![T::zero(); g.n * g.cout * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, o)| {
        let (n, oc) = (idx / g.cout, idx % g.cout);
        let bias = b.map_or(T::zero(), |b| b[oc]);
        o.fill(bias);
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            let xin = &x[(n * g.cin + ic) * plane_in..][..plane_in];
            let wk = &w[(oc * cin_g + icl) * g.kh * g.kw..][..g.kh * g.kw];
            if g.kh == 1 && g.kw == 1 && s == 1 && p == 0 {
                let wv = wk[0];
                for (ov, &xv) in o.iter_mut().zip(xin) {
                    *ov = *ov + wv * xv;
                }
                continue;
            }
            for ki in 0..g.kh {
                let (r0, r1) = valid_range(ki, p, s, g.h, g.oh);
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    let (c0, c1) = valid_range(kj, p, s, g.w, g.ow);
                    for orow in r0..r1 {
                        let irow = orow * s + ki - p;
                        let orow_s = &mut o[orow * g.ow..(orow + 1) * g.ow];
                        let xrow = &xin[irow * g.w..(irow + 1) * g.w];
                        for ocol in c0..c1 {
                            orow_s[ocol] = orow_s[ocol] + wv * xrow[ocol * s + kj - p];
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (s, p) = (g.spec.stride, g.spec.padding);
    let mut gx = vec![T::zero(); g.n * g.cin * plane_in];
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(idx, gxp)| {
        let (n, ic) = (idx / g.cin, idx % g.cin);
        let grp = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..cout_g {
            let oc = grp * cout_g + ocl;
            let gyp = &gy[(n * g.cout + oc) * plane_out..][..plane_out];
            let wk = &w[(oc * cin_g + icl) * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (r0, r1) = valid_range(ki, p, s, g.h, g.oh);
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    let (c0, c1) = valid_range(kj, p, s, g.w, g.ow);
                    for orow in r0..r1 {
                        let irow = orow * s + ki - p;
                        for ocol in c0..c1 {
                            let i = irow * g.w + ocol * s + kj - p;
                            gxp[i] = gxp[i] + wv * gyp[orow * g.ow + ocol];
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv2d_grad_weight<T: Scalar>(g: &ConvGeom, gy: &[T], x: &[T]) -> Vec<T> {
    let (plane_in, plane_out) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (s, p) = (g.spec.stride, g.spec.padding);
    let per_oc = cin_g * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * per_oc];
    gw.par_chunks_mut(per_oc).enumerate().for_each(|(oc, gwo)| {
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            for ki in 0..g.kh {
                let (r0, r1) = valid_range(ki, p, s, g.h, g.oh);
                for kj in 0..g.kw {
                    let (c0, c1) = valid_range(kj, p, s, g.w, g.ow);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let gyp = &gy[(n * g.cout + oc) * plane_out..][..plane_out];
                        let xp = &x[(n * g.cin + ic) * plane_in..][..plane_in];
                        for orow in r0..r1 {
                            let irow = orow * s + ki - p;
                            for ocol in c0..c1 {
                                acc = acc + gyp[orow * g.ow + ocol] * xp[irow * g.w + ocol * s + kj - p];
                            }
                        }
                    }
                    gwo[(icl * g.kh + ki) * g.kw + kj] = acc;
                }
            }
        }
    });
    gw
}

pub(crate) fn shift_into<T: Copy>(src: &[T], dst: &mut [T], shape: Shape, axis: Axis, d: isize) {
    let [n, c, h, w] = shape;
    let planes = n * c;
    match axis {
        Axis::H => {
            let dd = d.rem_euclid(h.max(1) as isize) as usize;
            for pl in 0..planes {
                let base = pl * h * w;
                for r in 0..h {
                    let sr = (r + dd) % h;
                    dst[base + r * w..base + (r + 1) * w]
                        .copy_from_slice(&src[base + sr * w..base + (sr + 1) * w]);
                }
            }
        }
        Axis::W => {
            let dd = d.rem_euclid(w.max(1) as isize) as usize;
            for row in 0..planes * h {
                let base = row * w;
                for col in 0..w {
                    dst[base + col] = src[base + (col + dd) % w];
                }
            }
        }
    }
}

/// Half-pixel-center source index pair and weight of the upper neighbor.
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
