//! Catalog of gradient probes grouped by scope: single tape ops, composite
//! blocks, and the end-to-end desk classifier.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::gradcheck::{
    away_from_zero, finite_diff_check, input, randn, CheckOptions, GradReport, Probe,
};
use crate::kernels::{Conv2dCfg, FilterAxis};
use crate::model::{Classifier, ModelConfig};
use crate::params::{init_rng, Bindings, ParamBuilder, ParamStore};
use crate::ray::{attenuation_from, PixelGrid, RayEncoder, RayEncoderConfig, RayLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::wavelet::{
    pair_fuse, wave_decompose, ExtractStage, ModulationBlock, Stem, WaveFilterPair, WavePool,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl FromStr for Scope {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Self::Op),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            _ => Err(TensorError::Config(format!(
                "unknown gradcheck scope {s:?} (expected op, block or model)"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Op => "op",
            Self::Block => "block",
            Self::Model => "model",
        })
    }
}

impl Scope {
    pub fn probes(self) -> Result<Vec<Probe>> {
        match self {
            Self::Op => Ok(op_probes()),
            Self::Block => block_probes(),
            Self::Model => Ok(vec![model_probe(&ModelConfig::desk(3, 3), 1)?]),
        }
    }

    /// The model probe has hundreds of parameter tensors, so it samples
    /// fewer coordinates from each.
    pub fn options(self) -> CheckOptions {
        match self {
            Self::Model => CheckOptions {
                max_coords: Some(3),
                ..CheckOptions::default()
            },
            _ => CheckOptions::default(),
        }
    }

    /// Checks every probe in the scope.
    pub fn run(self, seed: u64) -> Result<Vec<GradReport>> {
        let opts = self.options();
        self.probes()?
            .iter()
            .map(|p| finite_diff_check(p, seed, &opts))
            .collect()
    }
}

fn grid(h: usize, w: usize) -> Vec<[f64; 2]> {
    PixelGrid::new(h, w).cast::<f64>()
}

/// Origins drawn off the pixel lattice so no distance is near zero.
fn origins(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 2], |_| rng.random_range(-0.9..0.9) + 0.013)
}

fn conv_probe(name: &str, x: [usize; 4], k: [usize; 4], cfg: Conv2dCfg) -> Probe {
    Probe::new(
        name,
        move |r| vec![input("x", randn(r, &x)), input("kernel", randn(r, &k))],
        move |t, v| t.conv2d(v[0], v[1], cfg),
    )
}

fn wave_probe(name: &str, axis: FilterAxis, stride: usize, taps: usize) -> Probe {
    Probe::new(
        name,
        move |r| vec![input("x", randn(r, &[2, 2, 6, 8])), input("taps", randn(r, &[taps]))],
        move |t, v| t.wave_conv(v[0], v[1], axis, stride),
    )
}

pub fn op_probes() -> Vec<Probe> {
    let pad1 = Conv2dCfg {
        padding: (1, 1),
        ..Conv2dCfg::default()
    };
    let strided = Conv2dCfg {
        stride: (2, 1),
        padding: (1, 2),
        groups: 2,
    };
    vec![
        Probe::new(
            "add",
            |r| vec![input("a", randn(r, &[2, 3, 4])), input("b", randn(r, &[2, 3, 4]))],
            |t, v| t.add(v[0], v[1]),
        ),
        Probe::new(
            "add_channel",
            |r| vec![input("a", randn(r, &[2, 3, 4, 5])), input("b", randn(r, &[3]))],
            |t, v| t.add(v[0], v[1]),
        ),
        Probe::new(
            "mul",
            |r| vec![input("a", randn(r, &[3, 5])), input("b", randn(r, &[3, 5]))],
            |t, v| t.mul(v[0], v[1]),
        ),
        Probe::new(
            "mul_channel",
            |r| vec![input("a", randn(r, &[2, 3, 4, 5])), input("b", randn(r, &[3]))],
            |t, v| t.mul(v[0], v[1]),
        ),
        Probe::new(
            "scale",
            |r| vec![input("a", randn(r, &[4, 3]))],
            |t, v| Ok(t.scale(v[0], -1.7)),
        ),
        Probe::new("sum", |r| vec![input("a", randn(r, &[3, 4]))], |t, v| Ok(t.sum(v[0]))),
        Probe::new("mean", |r| vec![input("a", randn(r, &[3, 4]))], |t, v| Ok(t.mean(v[0]))),
        Probe::new(
            "gelu",
            |r| vec![input("a", Tensor::randn(&[40], 2.0, r))],
            |t, v| Ok(t.gelu(v[0])),
        ),
        conv_probe("conv2d", [1, 2, 6, 6], [3, 2, 3, 3], pad1),
        conv_probe("conv2d_strided_grouped", [2, 4, 7, 6], [4, 2, 3, 3], strided),
        Probe::new(
            "pointwise_conv",
            |r| {
                vec![
                    input("x", randn(r, &[2, 3, 4, 4])),
                    input("weight", randn(r, &[5, 3, 1, 1])),
                    input("bias", randn(r, &[5])),
                ]
            },
            |t, v| t.pointwise_conv(v[0], v[1], Some(v[2])),
        ),
        wave_probe("wave_conv_width", FilterAxis::Width, 1, 3),
        wave_probe("wave_conv_height", FilterAxis::Height, 1, 5),
        wave_probe("wave_conv_width_stride2", FilterAxis::Width, 2, 5),
        wave_probe("wave_conv_height_stride2", FilterAxis::Height, 2, 3),
        Probe::new(
            "layer_norm",
            |r| {
                vec![
                    input("x", randn(r, &[2, 5, 3, 3])),
                    input("gain", randn(r, &[5])),
                    input("shift", randn(r, &[5])),
                ]
            },
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        Probe::new(
            "global_avg_pool",
            |r| vec![input("x", randn(r, &[2, 3, 4, 5]))],
            |t, v| t.global_avg_pool(v[0]),
        ),
        Probe::new(
            "matmul",
            |r| vec![input("a", randn(r, &[3, 4])), input("b", randn(r, &[4, 5]))],
            |t, v| t.matmul(v[0], v[1]),
        ),
        Probe::new(
            "softmax",
            |r| vec![input("x", randn(r, &[3, 7]))],
            |t, v| t.softmax(v[0], 1),
        ),
        Probe::new(
            "softmax_axis0",
            |r| vec![input("x", randn(r, &[7, 2]))],
            |t, v| t.softmax(v[0], 0),
        ),
        Probe::new(
            "cross_entropy",
            |r| vec![input("logits", randn(r, &[4, 5]))],
            |t, v| t.cross_entropy(v[0], &[0, 3, 4, 3]),
        ),
        Probe::new(
            "concat",
            |r| {
                vec![
                    input("a", randn(r, &[2, 1, 3, 3])),
                    input("b", randn(r, &[2, 3, 3, 3])),
                ]
            },
            |t, v| t.concat(&[v[0], v[1]]),
        ),
        Probe::new(
            "to_tokens",
            |r| vec![input("x", randn(r, &[2, 3, 2, 4]))],
            |t, v| t.to_tokens(v[0]),
        ),
        Probe::new(
            "distance",
            |r| vec![input("origins", origins(r, 4))],
            |t, v| t.distance(v[0], &grid(5, 6)),
        )
        .kinked(),
        Probe::new(
            "psf",
            |r| {
                let d = Tensor::uniform(&[3, 10], 0.05, 2.5, r);
                vec![input("dist", d), input("log_sigma", Tensor::uniform(&[3], -0.5, 0.5, r))]
            },
            |t, v| t.psf(v[0], v[1]),
        ),
        Probe::new(
            "decay",
            |r| {
                let d = Tensor::uniform(&[3, 10], 0.05, 2.5, r);
                vec![
                    input("dist", d),
                    input("log_alpha", Tensor::uniform(&[3], -0.5, 0.5, r)),
                    input("beta", away_from_zero(r, &[1])),
                ]
            },
            |t, v| t.decay(v[0], v[1], v[2]),
        ),
        Probe::new(
            "mean_rows",
            |r| vec![input("x", randn(r, &[4, 6]))],
            |t, v| t.mean_rows(v[0]),
        ),
        Probe::new(
            "spectral_modulate",
            |r| vec![input("x", randn(r, &[2, 2, 8, 8])), input("mask", randn(r, &[64]))],
            |t, v| t.spectral_modulate(v[0], v[1]),
        ),
        Probe::new(
            "spectral_modulate_direct_dft",
            |r| vec![input("x", randn(r, &[1, 2, 6, 5])), input("mask", randn(r, &[6, 5]))],
            |t, v| t.spectral_modulate(v[0], v[1]),
        ),
        Probe::new(
            "attenuation_chain",
            |r| {
                vec![
                    input("origins", origins(r, 5)),
                    input("log_sigma", Tensor::uniform(&[5], -0.5, 0.5, r)),
                    input("log_alpha", Tensor::uniform(&[5], -0.5, 0.5, r)),
                    input("beta", away_from_zero(r, &[1])),
                ]
            },
            |t, v| Ok(attenuation_from(t, v[0], v[1], v[2], v[3], &grid(6, 6))?.combined),
        )
        .kinked(),
    ]
}

/// Probe over a parameterized layer: the input map and every parameter
/// (jittered away from its initial value) are checked.
fn layer_probe<L: Send + Sync + 'static>(
    name: &str,
    shape: Vec<usize>,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<L>,
    forward: impl Fn(&L, &mut Tape<f64>, &Bindings, Var) -> Result<Var> + Send + Sync + 'static,
) -> Result<Probe> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = init_rng(11);
    let layer = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    Ok(Probe::new(
        name,
        move |r| {
            let mut inputs = vec![input("x", randn(r, &shape))];
            inputs.extend(store.iter().map(|(n, t)| input(n, jitter(n, t, r))));
            inputs
        },
        move |t, v| forward(&layer, t, &Bindings::new(v[1..].to_vec()), v[0]),
    )
    .kinked())
}

/// Perturbs a parameter off its initial value. Ray-field widths are drawn
/// narrower than at initialization: with σ = 1 on a [−1, 1] grid the maps are
/// nearly uniform and the field gradients sit at the rounding floor of a
/// 1e-5 central difference.
fn jitter(name: &str, t: &Tensor<f64>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    if name.ends_with("log_sigma") {
        return Tensor::uniform(t.shape(), -1.2, -0.6, r);
    }
    let noise = Tensor::<f64>::randn(t.shape(), 0.1, r);
    Tensor::from_fn(t.shape(), |i| t.data()[i] + noise.data()[i])
}

pub fn block_probes() -> Result<Vec<Probe>> {
    Ok(vec![
        layer_probe(
            "stem",
            vec![1, 3, 14, 14],
            |b| Ok(Stem::new(b, 3, 4)),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "wave_decompose",
            vec![1, 2, 6, 6],
            |b| Ok(WaveFilterPair::new(b)),
            |l, t, p, x| {
                let (lo, hi) = l.bind(p);
                let bands = wave_decompose(t, x, lo, hi, 2)?;
                t.concat(&bands.as_array())
            },
        )?,
        layer_probe(
            "pair_fuse",
            vec![1, 2, 6, 6],
            |b| Ok(WaveFilterPair::new(b)),
            |l, t, p, x| {
                let (lo, hi) = l.bind(p);
                let bands = wave_decompose(t, x, lo, hi, 1)?;
                pair_fuse(t, &bands)
            },
        )?,
        layer_probe(
            "extract_stage",
            vec![1, 2, 8, 8],
            |b| Ok(ExtractStage::new(b, 2, 3)),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "modulation_block",
            vec![1, 8, 8, 8],
            |b| ModulationBlock::new(b, 8, 4),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "wave_pool",
            vec![1, 3, 8, 8],
            |b| Ok(WavePool::new(b, 3, 5, 2)),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "wave_pool_stride1",
            vec![1, 3, 6, 6],
            |b| Ok(WavePool::new(b, 3, 4, 1)),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "ray_layer",
            vec![1, 4, 8, 8],
            |b| RayLayer::new(b, 4, 12),
            |l, t, p, x| l.forward(t, p, x),
        )?,
        layer_probe(
            "ray_encoder",
            vec![1, 6, 4, 4],
            |b| {
                let cfg = RayEncoderConfig {
                    d_model: 4,
                    layers: 2,
                    origins: 3,
                    shared_field: false,
                };
                RayEncoder::new(b, 6, &cfg)
            },
            |l, t, p, x| Ok(l.forward_map(t, p, x)?.0),
        )?,
    ])
}

/// End-to-end classifier probe: logits with respect to the image and every
/// parameter. The zero-initialized head is jittered like the rest, so
/// gradients reach the backbone.
pub fn model_probe(config: &ModelConfig, batch: usize) -> Result<Probe> {
    let (model, store) = Classifier::new::<f64>(config, 5)?;
    let e = config.image_extent;
    let shape = vec![batch, config.in_channels, e, e];
    Ok(Probe::new(
        format!("classifier_rays{}", config.rays),
        move |r| {
            let image = Tensor::uniform(&shape, 0.0, 1.0, r);
            let mut inputs = vec![input("image", image)];
            inputs.extend(store.iter().map(|(n, t)| input(n, jitter(n, t, r))));
            inputs
        },
        move |t, v| Ok(model.forward(t, &Bindings::new(v[1..].to_vec()), v[0])?.logits),
    )
    .kinked())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fixed;

    #[test]
    fn scope_parses() {
        assert_eq!("block".parse::<Scope>().unwrap(), Scope::Block);
        assert!("all".parse::<Scope>().is_err());
    }

    #[test]
    fn fixed_inputs_are_not_reported() {
        let probe = Probe::new(
            "constant_companion",
            |r| vec![input("a", randn(r, &[3])), fixed("b", randn(r, &[3]))],
            |t, v| t.mul(v[0], v[1]),
        );
        let r = finite_diff_check(&probe, 0, &CheckOptions::default()).unwrap();
        assert_eq!(r.inputs.len(), 1);
        assert!(r.passed(1e-4));
    }
}
