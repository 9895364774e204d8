//! Tape ops against the loop oracles in `support/oracle.rs`.

#[path = "support/oracle.rs"]
mod oracle;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavray::fft::{fft2, ifft2};
use wavray::params::{init_rng, ParamBuilder, ParamStore};
use wavray::wavelet::{pair_fuse, wave_decompose, WavePool, HIGH_TAPS, LOW_TAPS};
use wavray::{Conv2dCfg, Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    groups: usize,
    cig: usize,
    opg: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    extent: (usize, usize),
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (
        (1usize..3, 1usize..4, 1usize..4, 1usize..4),
        (1usize..5, 1usize..5, 1usize..4, 1usize..4, 0usize..3, 0usize..3),
        (0usize..7, 0usize..7, any::<u64>()),
    )
        .prop_map(|((n, groups, cig, opg), (kh, kw, sh, sw, ph, pw), (eh, ew, seed))| ConvCase {
            n,
            groups,
            cig,
            opg,
            k: (kh, kw),
            stride: (sh, sw),
            pad: (ph, pw),
            extent: (kh + eh, kw + ew),
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv2d_matches_nested_loops(case in conv_case()) {
        let c = case.groups * case.cig;
        let co = case.groups * case.opg;
        let xs = [case.n, c, case.extent.0, case.extent.1];
        let ks = [co, case.cig, case.k.0, case.k.1];
        let x = randn(&xs, case.seed);
        let k = randn(&ks, case.seed ^ 1);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let cfg = Conv2dCfg { stride: case.stride, padding: case.pad, groups: case.groups };
        let y = tape.conv2d(xv, kv, cfg).unwrap();
        let (want, shape) = oracle::conv2d(x.data(), xs, k.data(), ks, case.stride, case.pad, case.groups);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        prop_assert!(oracle::rel_err(tape.value(y).data(), &want) < 1e-6);
    }

    #[test]
    fn wave_decompose_matches_separable_filters(
        half_h in 2usize..6,
        half_w in 2usize..6,
        stride in 1usize..3,
        low_len in prop::sample::select(vec![1usize, 3, 5]),
        high_len in prop::sample::select(vec![1usize, 3, 5, 7]),
        seed in any::<u64>(),
    ) {
        let (h, w) = (2 * half_h, 2 * half_w);
        let x = randn(&[1, 2, h, w], seed);
        let low = randn(&[low_len], seed ^ 2);
        let high = randn(&[high_len], seed ^ 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (lv, hv) = (tape.constant(low.clone()), tape.constant(high.clone()));
        let got = wave_decompose(&mut tape, xv, lv, hv, stride).unwrap();
        let plane = h * w;
        for (b, var) in got.as_array().into_iter().enumerate() {
            let out = tape.value(var).data();
            let per = out.len() / 2;
            for ch in 0..2 {
                let want = oracle::bands(&x.data()[ch * plane..][..plane], h, w, low.data(), high.data(), stride);
                prop_assert!(oracle::rel_err(&out[ch * per..][..per], &want[b]) < 1e-6, "band {}", b);
            }
        }
    }

    #[test]
    fn pair_fusion_matches_band_sums(half in 2usize..6, stride in 1usize..3, seed in any::<u64>()) {
        let e = 2 * half;
        let x = randn(&[2, 3, e, e], seed);
        let mut store = ParamStore::<f64>::new();
        let mut rng = init_rng(0);
        let pool = WavePool::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 4, stride);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let fused = pool.fuse(&mut tape, &p, xv).unwrap();
        let out = tape.value(fused).data();
        let eo = e / stride;
        let plane = eo * eo;
        for n in 0..2 {
            for c in 0..3 {
                let b = oracle::bands(&x.data()[(n * 3 + c) * e * e..][..e * e], e, e, &LOW_TAPS, &HIGH_TAPS, stride);
                let first: Vec<f64> = b[0].iter().zip(&b[3]).map(|(a, d)| a + d).collect();
                let second: Vec<f64> = b[1].iter().zip(&b[2]).map(|(a, d)| a + d).collect();
                prop_assert!(oracle::rel_err(&out[(n * 6 + c) * plane..][..plane], &first) < 1e-6);
                prop_assert!(oracle::rel_err(&out[(n * 6 + 3 + c) * plane..][..plane], &second) < 1e-6);
            }
        }
    }

    #[test]
    fn spectral_modulation_is_circular_convolution(
        extent in prop::sample::select(vec![(8usize, 8usize), (6, 10), (4, 8)]),
        positive in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (h, w) = extent;
        let x = randn(&[1, 2, h, w], seed);
        let mut mask = randn(&[h * w], seed ^ 5);
        if positive {
            mask.data_mut().iter_mut().for_each(|m| *m = m.abs() + 0.1);
        }
        let mut tape = Tape::new();
        let (xv, mv) = (tape.constant(x.clone()), tape.constant(mask.clone()));
        let y = tape.spectral_modulate(xv, mv).unwrap();
        for ch in 0..2 {
            let plane = &x.data()[ch * h * w..][..h * w];
            let want = oracle::circular_modulation(plane, mask.data(), h, w);
            prop_assert!(oracle::rel_err(&tape.value(y).data()[ch * h * w..][..h * w], &want) < 1e-5);
        }
    }

    #[test]
    fn fft_is_linear_and_preserves_energy(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let x = randn(&[8, 16], seed);
        let y = randn(&[8, 16], seed ^ 7);
        let mix = Tensor::from_fn(&[8, 16], |i| a * x.data()[i] + b * y.data()[i]);
        let (fx, fy, fm) = (fft2(&x).unwrap(), fft2(&y).unwrap(), fft2(&mix).unwrap());
        for k in 0..128 {
            prop_assert!((fm.real()[k] - a * fx.real()[k] - b * fy.real()[k]).abs() < 1e-10);
            prop_assert!((fm.imag()[k] - a * fx.imag()[k] - b * fy.imag()[k]).abs() < 1e-10);
        }
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral: f64 = fx.magnitude().iter().map(|m| m * m).sum::<f64>() / 128.0;
        prop_assert!((energy - spectral).abs() < 1e-10 * energy);
        let back = ifft2(&fx).unwrap();
        prop_assert!(oracle::rel_err(back.data(), x.data()) < 1e-12);
    }
}

#[test]
fn pair_fuse_of_stride_one_bands_keeps_extent() {
    let x = randn(&[1, 2, 6, 6], 1);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let lo = tape.constant(Tensor::from_f64(&[3], &LOW_TAPS).unwrap());
    let hi = tape.constant(Tensor::from_f64(&[5], &HIGH_TAPS).unwrap());
    let bands = wave_decompose(&mut tape, xv, lo, hi, 1).unwrap();
    let fused = pair_fuse(&mut tape, &bands).unwrap();
    assert_eq!(tape.shape(fused), &[1, 4, 6, 6]);
}
