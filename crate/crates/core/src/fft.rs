//! 2-D discrete Fourier transforms.
//!
//! Power-of-two axes use an iterative radix-2 Cooley-Tukey transform. The
//! spectral layers also run on maps such as 28×28 and 14×14, so a plan can
//! fall back to a direct O(n²) DFT on other lengths; the public [`fft2`] and
//! [`ifft2`] stay radix-2 only.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::scalar::Real;
use crate::tensor::{ComplexTensor, Tensor};

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

#[derive(Debug, Clone)]
enum Kind {
    Radix2 { bitrev: Vec<usize> },
    Direct,
}

/// Precomputed 1-D transform of a fixed length.
#[derive(Debug, Clone)]
pub struct Plan1d<T> {
    n: usize,
    kind: Kind,
    // exp(-2πik/n) for k in 0..n
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> Plan1d<T> {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let cos = (0..n).map(|k| T::of((2.0 * PI * k as f64 / n as f64).cos())).collect();
        let sin = (0..n).map(|k| T::of(-(2.0 * PI * k as f64 / n as f64).sin())).collect();
        let kind = if is_power_of_two(n) {
            let bits = n.trailing_zeros();
            let bitrev = (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect();
            Kind::Radix2 { bitrev }
        } else {
            Kind::Direct
        };
        Self { n, kind, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized transform in place. `inverse` flips the twiddle sign only.
    pub fn run(&self, re: &mut [T], im: &mut [T], inverse: bool, scratch: &mut Vec<T>) {
        debug_assert_eq!(re.len(), self.n);
        match &self.kind {
            Kind::Radix2 { bitrev } => self.radix2(re, im, bitrev, inverse),
            Kind::Direct => self.direct(re, im, inverse, scratch),
        }
    }

    fn radix2(&self, re: &mut [T], im: &mut [T], bitrev: &[usize], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = if inverse { -self.sin[k * step] } else { self.sin[k * step] };
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] = re[a] + tr;
                    im[a] = im[a] + ti;
                }
            }
            len <<= 1;
        }
    }

    fn direct(&self, re: &mut [T], im: &mut [T], inverse: bool, scratch: &mut Vec<T>) {
        let n = self.n;
        scratch.clear();
        scratch.extend_from_slice(re);
        scratch.extend_from_slice(im);
        let (xr, xi) = scratch.split_at(n);
        for k in 0..n {
            let mut sr = T::zero();
            let mut si = T::zero();
            for x in 0..n {
                let idx = (k * x) % n;
                let wr = self.cos[idx];
                let wi = if inverse { -self.sin[idx] } else { self.sin[idx] };
                sr = sr + xr[x] * wr - xi[x] * wi;
                si = si + xr[x] * wi + xi[x] * wr;
            }
            re[k] = sr;
            im[k] = si;
        }
    }
}

/// Row/column separable 2-D transform over one H×W plane.
#[derive(Debug, Clone)]
pub struct Plan2d<T> {
    rows: Plan1d<T>,
    cols: Plan1d<T>,
}

impl<T: Real> Plan2d<T> {
    /// Plan for any extents; non-power-of-two axes use the direct DFT.
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            rows: Plan1d::new(width),
            cols: Plan1d::new(height),
        }
    }

    /// Radix-2 only; rejects other extents naming the axis.
    pub fn radix2(height: usize, width: usize) -> Result<Self> {
        if !is_power_of_two(height) {
            return Err(TensorError::NonPowerOfTwo {
                axis: "height",
                extent: height,
            });
        }
        if !is_power_of_two(width) {
            return Err(TensorError::NonPowerOfTwo {
                axis: "width",
                extent: width,
            });
        }
        Ok(Self::new(height, width))
    }

    pub fn height(&self) -> usize {
        self.cols.len()
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }

    /// Unnormalized forward transform of one plane.
    pub fn forward(&self, re: &mut [T], im: &mut [T]) {
        self.run(re, im, false);
    }

    /// Inverse transform of one plane, including the 1/(HW) factor.
    pub fn inverse(&self, re: &mut [T], im: &mut [T]) {
        self.run(re, im, true);
        let scale = T::one() / T::of((re.len()) as f64);
        re.iter_mut().for_each(|v| *v = *v * scale);
        im.iter_mut().for_each(|v| *v = *v * scale);
    }

    fn run(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let (h, w) = (self.height(), self.width());
        let mut scratch = Vec::new();
        for r in 0..h {
            let span = r * w..(r + 1) * w;
            self.rows
                .run(&mut re[span.clone()], &mut im[span], inverse, &mut scratch);
        }
        let mut cr = vec![T::zero(); h];
        let mut ci = vec![T::zero(); h];
        for c in 0..w {
            for r in 0..h {
                cr[r] = re[r * w + c];
                ci[r] = im[r * w + c];
            }
            self.cols.run(&mut cr, &mut ci, inverse, &mut scratch);
            for r in 0..h {
                re[r * w + c] = cr[r];
                im[r * w + c] = ci[r];
            }
        }
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(TensorError::Rank {
            op: "fft2",
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

/// Unnormalized 2-D FFT over the last two axes. Radix-2 only.
pub fn fft2<T: Real>(input: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w) = plane_dims(input.shape())?;
    let plan = Plan2d::radix2(h, w)?;
    let mut re = input.data().to_vec();
    let mut im = vec![T::zero(); re.len()];
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        plan.forward(pr, pi);
    }
    ComplexTensor::new(input.shape(), re, im)
}

/// Inverse 2-D FFT with the 1/(HW) factor; returns the real part.
pub fn ifft2<T: Real>(input: &ComplexTensor<T>) -> Result<Tensor<T>> {
    let (h, w) = plane_dims(input.shape())?;
    let plan = Plan2d::radix2(h, w)?;
    let mut re = input.real().to_vec();
    let mut im = input.imag().to_vec();
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        plan.inverse(pr, pi);
    }
    Tensor::new(input.shape(), re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut out_r = vec![0.0; h * w];
        let mut out_i = vec![0.0; h * w];
        for ky in 0..h {
            for kx in 0..w {
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                        let (s, c) = ang.sin_cos();
                        let (a, b) = (re[y * w + x], im[y * w + x]);
                        out_r[ky * w + kx] += a * c - b * s;
                        out_i[ky * w + kx] += a * s + b * c;
                    }
                }
            }
        }
        (out_r, out_i)
    }

    #[test]
    fn radix2_and_direct_match_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(4, 8), (7, 6), (14, 14), (1, 5), (16, 2)] {
            let x = Tensor::<f64>::randn(&[h, w], 1.0, &mut rng);
            let mut re = x.data().to_vec();
            let mut im = vec![0.0; h * w];
            Plan2d::new(h, w).forward(&mut re, &mut im);
            let (nr, ni) = naive_dft(x.data(), &vec![0.0; h * w], h, w);
            for i in 0..h * w {
                assert!((re[i] - nr[i]).abs() < 1e-9, "{h}x{w} re[{i}]");
                assert!((im[i] - ni[i]).abs() < 1e-9, "{h}x{w} im[{i}]");
            }
        }
    }

    #[test]
    fn constant_map_has_only_dc() {
        let c = 2.5;
        let x = Tensor::<f64>::full(&[8, 4], c);
        let spec = fft2(&x).unwrap();
        assert!((spec.real()[0] - c * 32.0).abs() < 1e-12);
        for k in 1..32 {
            assert!(spec.real()[k].abs() < 1e-12 && spec.imag()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Tensor::<f64>::zeros(&[8, 8]);
        x.data_mut()[19] = 1.0;
        let mag = fft2(&x).unwrap().magnitude();
        assert!(mag.iter().all(|m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn round_trip_on_batched_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn non_power_of_two_names_axis() {
        let x = Tensor::<f32>::zeros(&[8, 12]);
        assert_eq!(
            fft2(&x).unwrap_err(),
            TensorError::NonPowerOfTwo { axis: "width", extent: 12 }
        );
        let x = Tensor::<f32>::zeros(&[6, 8]);
        assert_eq!(
            fft2(&x).unwrap_err(),
            TensorError::NonPowerOfTwo { axis: "height", extent: 6 }
        );
    }
}
