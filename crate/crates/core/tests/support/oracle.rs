//! Independent reference implementations written as plain loops over
//! `f64` slices. Nothing here calls into the library.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Direct nested-loop grouped cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [co, cig, kh, kw]: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let opg = co / groups;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let g = o / opg;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cig {
                        let cin = g * cig + ci;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride.0 + i) as isize - pad.0 as isize;
                                let ix = (xo * stride.1 + j) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + cin) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((o * cig + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

/// Reflects an out-of-range index back into 0..len, repeating the edge
/// sample (… x1 x0 | x0 x1 …).
pub fn reflect(mut i: isize, len: usize) -> usize {
    let l = len as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= l {
            i = 2 * l - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Centered 1-D filter over a sequence, sampled every `stride` positions.
pub fn filter1d(seq: &[f64], taps: &[f64], stride: usize) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    (0..seq.len())
        .step_by(stride)
        .map(|o| {
            taps.iter()
                .enumerate()
                .map(|(t, &tv)| tv * seq[reflect(o as isize + t as isize - half, seq.len())])
                .sum()
        })
        .collect()
}

/// Filters every row of an h×w plane.
pub fn filter_rows(plane: &[f64], h: usize, w: usize, taps: &[f64], stride: usize) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    for r in 0..h {
        out.extend(filter1d(&plane[r * w..][..w], taps, stride));
    }
    let wo = out.len() / h;
    (out, wo)
}

/// Filters every column of an h×w plane.
pub fn filter_cols(plane: &[f64], h: usize, w: usize, taps: &[f64], stride: usize) -> (Vec<f64>, usize) {
    let cols: Vec<Vec<f64>> = (0..w)
        .map(|c| filter1d(&(0..h).map(|r| plane[r * w + c]).collect::<Vec<_>>(), taps, stride))
        .collect();
    let ho = cols[0].len();
    let mut out = vec![0.0; ho * w];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * w + c] = *v;
        }
    }
    (out, ho)
}

/// Four bands of one plane, ordered LL, LH, HL, HH where the first letter
/// is the filter along the width and the second along the height.
pub fn bands(plane: &[f64], h: usize, w: usize, low: &[f64], high: &[f64], stride: usize) -> [Vec<f64>; 4] {
    let (fl, wo) = filter_rows(plane, h, w, low, stride);
    let (fh, _) = filter_rows(plane, h, w, high, stride);
    [
        filter_cols(&fl, h, wo, low, stride).0,
        filter_cols(&fl, h, wo, high, stride).0,
        filter_cols(&fh, h, wo, low, stride).0,
        filter_cols(&fh, h, wo, high, stride).0,
    ]
}

/// Complex 2-D inverse DFT of a real h×w array, including the 1/(hw) factor.
pub fn idft2_real(m: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re[y * w + x] += m[u * w + v] * ang.cos();
                    im[y * w + x] += m[u * w + v] * ang.sin();
                }
            }
            re[y * w + x] /= (h * w) as f64;
            im[y * w + x] /= (h * w) as f64;
        }
    }
    (re, im)
}

/// Real part of the circular convolution of a real plane with the spatial
/// kernel whose spectrum is the real mask `m`.
pub fn circular_modulation(f: &[f64], m: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (kr, _) = idft2_real(m, h, w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    acc += f[u * w + v] * kr[((y + h - u) % h) * w + (x + w - v) % w];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Normwise relative error max|a − b| / max|b|. Elementwise ratios are
/// meaningless for entries that cancel to near zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}
