//! Slice-level forward and backward kernels behind the tape ops.
//!
//! Every kernel writes each output element from exactly one task, so results
//! are bit-identical regardless of the rayon thread count.

use rayon::prelude::*;

use crate::scalar::Real;

/// Stride, zero padding and group count of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cfg: Conv2dCfg,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c / self.cfg.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.cfg.groups
    }

    /// Input coordinate for output `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let (cpg, opg) = (g.cin_per_group(), g.cout_per_group());
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        let group = co / opg;
        for ci in 0..cpg {
            let cin = group * cpg + ci;
            let xp = &x[(n * g.c + cin) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * cpg + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.ho {
                        let Some(iy) = ConvGeom::src(oy, ky, g.cfg.stride.0, g.cfg.padding.0, g.h) else {
                            continue;
                        };
                        let row = &xp[iy * g.w..][..g.w];
                        let orow = &mut o[oy * g.wo..][..g.wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.cfg.stride.1, g.cfg.padding.1, g.w) {
                                *ov = *ov + wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(gout: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let (cpg, opg) = (g.cin_per_group(), g.cout_per_group());
    let plane = g.h * g.w;
    let mut gx = vec![T::zero(); g.n * g.c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, gp)| {
        let (n, cin) = (idx / g.c, idx % g.c);
        let group = cin / cpg;
        let ci = cin % cpg;
        for co in group * opg..(group + 1) * opg {
            let go = &gout[(n * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((co * cpg + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.ho {
                        let Some(iy) = ConvGeom::src(oy, ky, g.cfg.stride.0, g.cfg.padding.0, g.h) else {
                            continue;
                        };
                        for ox in 0..g.wo {
                            if let Some(ix) = ConvGeom::src(ox, kx, g.cfg.stride.1, g.cfg.padding.1, g.w) {
                                gp[iy * g.w + ix] = gp[iy * g.w + ix] + wv * go[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv2d_backward_kernel<T: Real>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (cpg, opg) = (g.cin_per_group(), g.cout_per_group());
    let per_out = cpg * g.kh * g.kw;
    let mut gk = vec![T::zero(); g.cout * per_out];
    gk.par_chunks_mut(per_out).enumerate().for_each(|(co, gkc)| {
        let group = co / opg;
        for n in 0..g.n {
            let go = &gout[(n * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
            for ci in 0..cpg {
                let cin = group * cpg + ci;
                let xp = &x[(n * g.c + cin) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = T::zero();
                        for oy in 0..g.ho {
                            let Some(iy) = ConvGeom::src(oy, ky, g.cfg.stride.0, g.cfg.padding.0, g.h) else {
                                continue;
                            };
                            for ox in 0..g.wo {
                                if let Some(ix) = ConvGeom::src(ox, kx, g.cfg.stride.1, g.cfg.padding.1, g.w) {
                                    acc = acc + go[oy * g.wo + ox] * xp[iy * g.w + ix];
                                }
                            }
                        }
                        let slot = &mut gkc[(ci * g.kh + ky) * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
    gk
}

/// Per-pixel channel map: out[n,o,p] = Σ_c w[o,c]·x[n,c,p] + b[o].
pub(crate) fn pointwise_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    c: usize,
    cout: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (ni, co) = (idx / cout, idx % cout);
        if let Some(b) = b {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        let wrow = &w[co * c..][..c];
        for (ci, &wv) in wrow.iter().enumerate() {
            let xp = &x[(ni * c + ci) * plane..][..plane];
            for (ov, &xv) in o.iter_mut().zip(xp) {
                *ov = *ov + wv * xv;
            }
        }
    });
    out
}

pub(crate) fn pointwise_backward_input<T: Real>(
    gout: &[T],
    w: &[T],
    n: usize,
    c: usize,
    cout: usize,
    plane: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); n * c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, gp)| {
        let (ni, ci) = (idx / c, idx % c);
        for co in 0..cout {
            let wv = w[co * c + ci];
            let go = &gout[(ni * cout + co) * plane..][..plane];
            for (gv, &g) in gp.iter_mut().zip(go) {
                *gv = *gv + wv * g;
            }
        }
    });
    gx
}

pub(crate) fn pointwise_backward_weight<T: Real>(
    gout: &[T],
    x: &[T],
    n: usize,
    c: usize,
    cout: usize,
    plane: usize,
) -> Vec<T> {
    let mut gw = vec![T::zero(); cout * c];
    gw.par_chunks_mut(c).enumerate().for_each(|(co, row)| {
        for ni in 0..n {
            let go = &gout[(ni * cout + co) * plane..][..plane];
            for (ci, slot) in row.iter_mut().enumerate() {
                let xp = &x[(ni * c + ci) * plane..][..plane];
                let dot = go.iter().zip(xp).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                *slot = *slot + dot;
            }
        }
    });
    gw
}

/// Sum over every axis except the channel axis (axis 1).
pub(crate) fn channel_sum<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, slot) in out.iter_mut().enumerate() {
            let gp = &g[(ni * c + ci) * plane..][..plane];
            *slot = *slot + gp.iter().copied().sum::<T>();
        }
    }
    out
}

/// Axis along which a 1-D wavelet filter slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterAxis {
    Width,
    Height,
}

/// Half-sample symmetric extension: ... x1 x0 | x0 x1 ... x_{L-1} | x_{L-1} ...
#[inline]
pub(crate) fn mirror(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= len {
        period as usize - 1 - m
    } else {
        m
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct WaveGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub axis: FilterAxis,
    pub stride: usize,
}

impl WaveGeom {
    pub fn new(planes: usize, h: usize, w: usize, axis: FilterAxis, stride: usize) -> Self {
        let shrink = |l: usize| (l - 1) / stride + 1;
        let (ho, wo) = match axis {
            FilterAxis::Width => (h, shrink(w)),
            FilterAxis::Height => (shrink(h), w),
        };
        Self { planes, h, w, ho, wo, axis, stride }
    }

    /// Source index (within the plane) for output (oy, ox) and tap t.
    #[inline]
    fn src(&self, oy: usize, ox: usize, t: usize, pad: usize) -> usize {
        match self.axis {
            FilterAxis::Width => {
                let ix = mirror((ox * self.stride + t) as isize - pad as isize, self.w);
                oy * self.w + ix
            }
            FilterAxis::Height => {
                let iy = mirror((oy * self.stride + t) as isize - pad as isize, self.h);
                iy * self.w + ox
            }
        }
    }
}

/// Depthwise 1-D correlation with taps shared by every plane and
/// symmetric same-padding of `taps.len() / 2`.
pub(crate) fn wave_forward<T: Real>(x: &[T], taps: &[T], g: &WaveGeom) -> Vec<T> {
    let pad = taps.len() / 2;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.planes * op];
    out.par_chunks_mut(op).enumerate().for_each(|(p, o)| {
        let xp = &x[p * ip..][..ip];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for (t, &tv) in taps.iter().enumerate() {
                    acc = acc + tv * xp[g.src(oy, ox, t, pad)];
                }
                o[oy * g.wo + ox] = acc;
            }
        }
    });
    out
}

pub(crate) fn wave_backward_input<T: Real>(gout: &[T], taps: &[T], g: &WaveGeom) -> Vec<T> {
    let pad = taps.len() / 2;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let mut gx = vec![T::zero(); g.planes * ip];
    gx.par_chunks_mut(ip).enumerate().for_each(|(p, gp)| {
        let go = &gout[p * op..][..op];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = go[oy * g.wo + ox];
                for (t, &tv) in taps.iter().enumerate() {
                    let s = g.src(oy, ox, t, pad);
                    gp[s] = gp[s] + tv * gv;
                }
            }
        }
    });
    gx
}

pub(crate) fn wave_backward_taps<T: Real>(gout: &[T], x: &[T], k: usize, g: &WaveGeom) -> Vec<T> {
    let pad = k / 2;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    (0..k)
        .into_par_iter()
        .map(|t| {
            let mut acc = T::zero();
            for p in 0..g.planes {
                let xp = &x[p * ip..][..ip];
                let go = &gout[p * op..][..op];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        acc = acc + go[oy * g.wo + ox] * xp[g.src(oy, ox, t, pad)];
                    }
                }
            }
            acc
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub const NORM_EPS: f64 = 1e-5;

/// Channel normalization at every (n, spatial) location. Returns output,
/// normalized input and per-location reciprocal std.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    shift: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * plane];
    let eps = T::of(NORM_EPS);
    let inv_c = T::one() / T::of(c as f64);
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut mean = T::zero();
            for ci in 0..c {
                mean = mean + x[base + ci * plane + p];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for ci in 0..c {
                let d = x[base + ci * plane + p] - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[ni * plane + p] = r;
            for ci in 0..c {
                let i = base + ci * plane + p;
                let xh = (x[i] - mean) * r;
                xhat[i] = xh;
                y[i] = xh * gain[ci] + shift[ci];
            }
        }
    }
    (y, xhat, rstd)
}

/// Returns (dx, dgain, dshift).
pub(crate) fn layer_norm_backward<T: Real>(
    gout: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); gout.len()];
    let mut ggain = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    let inv_c = T::one() / T::of(c as f64);
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ci in 0..c {
                let i = base + ci * plane + p;
                let gh = gout[i] * gain[ci];
                mean_g = mean_g + gh;
                mean_gx = mean_gx + gh * xhat[i];
                ggain[ci] = ggain[ci] + gout[i] * xhat[i];
                gshift[ci] = gshift[ci] + gout[i];
            }
            mean_g = mean_g * inv_c;
            mean_gx = mean_gx * inv_c;
            let r = rstd[ni * plane + p];
            for ci in 0..c {
                let i = base + ci * plane + p;
                let gh = gout[i] * gain[ci];
                gx[i] = r * (gh - mean_g - xhat[i] * mean_gx);
            }
        }
    }
    (gx, ggain, gshift)
}

/// Softmax over the middle axis of an (outer, len, inner) view.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                y[at(k)] = y[at(k)] / sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(
    gout: &[T],
    y: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot = dot + gout[at(k)] * y[at(k)];
            }
            for k in 0..len {
                gx[at(k)] = y[at(k)] * (gout[at(k)] - dot);
            }
        }
    }
    gx
}

/// Row-major (m×k)·(k×n).
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        for (kk, &av) in a[r * k..][..k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..][..n]) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Row-major transpose of an (m×n) matrix.
pub(crate) fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_reflects_at_both_edges() {
        let got: Vec<usize> = (-3..7).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert!((-5..5).all(|i| mirror(i, 1) == 0));
    }

    #[test]
    fn gelu_fixed_point_and_slope() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
