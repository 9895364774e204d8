//! Ray attenuation: learnable origins, the origin-to-pixel distance field,
//! PSF × exponential decay scores, per-origin softmax maps, and layers that
//! use the combined map as a frequency-domain mask.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::nn::{ChannelNorm, Pointwise};
use crate::params::{Bindings, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{dims4, Tensor};
use crate::wavelet::FeaturePyramid;

/// `n` points evenly spaced on the unit circle, origin k at angle 2πk/n.
pub fn init_origins(n: usize) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(TensorError::Config("ray field needs at least one origin".into()));
    }
    Ok((0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect())
}

/// Unit-circle origins with a uniform angular jitter of up to `scale`
/// radians each, drawn from `seed`.
pub fn init_origins_jittered(n: usize, scale: f64, seed: u64) -> Result<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_origins(n)?;
    Ok(base
        .iter()
        .map(|o| {
            let t = o[1].atan2(o[0]) + rng.random_range(-scale..=scale);
            [t.cos(), t.sin()]
        })
        .collect())
}

/// Normalized pixel coordinates: x = −1 + 2j/(W−1), y = −1 + 2i/(H−1),
/// row-major. A unit extent maps to coordinate 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<[f64; 2]>,
}

fn axis_coord(i: usize, len: usize) -> f64 {
    if len == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    }
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                coords.push([axis_coord(j, width), axis_coord(i, height)]);
            }
        }
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn cast<T: Real>(&self) -> Vec<[T; 2]> {
        self.coords.iter().map(|c| [T::of(c[0]), T::of(c[1])]).collect()
    }
}

/// Learnable origins O [n,2], log-widths [n], log-decays [n] and gain β [1].
#[derive(Debug, Clone, Copy)]
pub struct RayField {
    pub origins: ParamId,
    pub log_sigma: ParamId,
    pub log_alpha: ParamId,
    pub beta: ParamId,
    pub n: usize,
}

/// Tape handles of every stage of the attenuation computation.
#[derive(Debug, Clone, Copy)]
pub struct AttenuationVars {
    pub distance: Var,
    pub psf: Var,
    pub decay: Var,
    pub logits: Var,
    /// [n, HW], each row a softmax over pixels.
    pub per_origin: Var,
    /// [HW], mean of the rows.
    pub combined: Var,
}

impl RayField {
    /// Origins on the unit circle, σ = α = β = 1.
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, n: usize) -> Result<Self> {
        let flat: Vec<f64> = init_origins(n)?.into_iter().flatten().collect();
        Ok(Self {
            origins: b.tensor("origins", Tensor::from_f64(&[n, 2], &flat)?),
            log_sigma: b.zeros("log_sigma", &[n]),
            log_alpha: b.zeros("log_alpha", &[n]),
            beta: b.ones("beta", &[1]),
            n,
        })
    }

    /// Learnable scalars: 2n + n + n + 1.
    pub fn scalar_count(n: usize) -> usize {
        4 * n + 1
    }

    pub fn attenuation<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        height: usize,
        width: usize,
    ) -> Result<AttenuationVars> {
        let grid = PixelGrid::new(height, width).cast::<T>();
        attenuation_from(tape, p[self.origins], p[self.log_sigma], p[self.log_alpha], p[self.beta], &grid)
    }

    /// Origins as stored, for export.
    pub fn origin_values<T: Real>(&self, store: &ParamStore<T>) -> Vec<[f64; 2]> {
        store
            .get(self.origins)
            .data()
            .chunks(2)
            .map(|c| [c[0].f64(), c[1].f64()])
            .collect()
    }

    /// Evaluates the maps for the field's current values.
    pub fn map<T: Real>(&self, store: &ParamStore<T>, height: usize, width: usize) -> Result<AttenuationMap> {
        let get = |id: ParamId| store.get(id).cast::<f64>();
        let mut tape = Tape::new();
        let o = tape.constant(get(self.origins));
        let s = tape.constant(get(self.log_sigma));
        let a = tape.constant(get(self.log_alpha));
        let b = tape.constant(get(self.beta));
        let grid = PixelGrid::new(height, width).cast::<f64>();
        let vars = attenuation_from(&mut tape, o, s, a, b, &grid)?;
        Ok(AttenuationMap {
            per_origin: tape.value(vars.per_origin).data().to_vec(),
            combined: tape.value(vars.combined).data().to_vec(),
            origins: self.n,
            height,
            width,
        })
    }
}

/// distance → PSF and decay → product → softmax over pixels → mean.
pub fn attenuation_from<T: Real>(
    tape: &mut Tape<T>,
    origins: Var,
    log_sigma: Var,
    log_alpha: Var,
    beta: Var,
    grid: &[[T; 2]],
) -> Result<AttenuationVars> {
    let distance = tape.distance(origins, grid)?;
    let psf = tape.psf(distance, log_sigma)?;
    let decay = tape.decay(distance, log_alpha, beta)?;
    let logits = tape.mul(psf, decay)?;
    let per_origin = tape.softmax(logits, 1)?;
    let combined = tape.mean_rows(per_origin)?;
    Ok(AttenuationVars {
        distance,
        psf,
        decay,
        logits,
        per_origin,
        combined,
    })
}

/// Materialized per-origin and combined maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationMap {
    /// n × HW, row-major per origin.
    pub per_origin: Vec<f64>,
    pub combined: Vec<f64>,
    pub origins: usize,
    pub height: usize,
    pub width: usize,
}

impl AttenuationMap {
    pub fn row(&self, k: usize) -> &[f64] {
        let m = self.height * self.width;
        &self.per_origin[k * m..][..m]
    }
}

/// Pure evaluation of the maps from explicit values.
pub fn attenuation_map(
    origins: &[[f64; 2]],
    sigma: &[f64],
    alpha: &[f64],
    beta: f64,
    height: usize,
    width: usize,
) -> Result<AttenuationMap> {
    let n = origins.len();
    let flat: Vec<f64> = origins.iter().flatten().copied().collect();
    let mut tape = Tape::<f64>::new();
    let o = tape.constant(Tensor::new(&[n, 2], flat)?);
    let s = tape.constant(Tensor::new(&[n], sigma.iter().map(|v| v.ln()).collect())?);
    let a = tape.constant(Tensor::new(&[n], alpha.iter().map(|v| v.ln()).collect())?);
    let b = tape.constant(Tensor::scalar(beta));
    let grid = PixelGrid::new(height, width).cast::<f64>();
    let vars = attenuation_from(&mut tape, o, s, a, b, &grid)?;
    Ok(AttenuationMap {
        per_origin: tape.value(vars.per_origin).data().to_vec(),
        combined: tape.value(vars.combined).data().to_vec(),
        origins: n,
        height,
        width,
    })
}

/// Pre-norm residual spectral modulation followed by a residual 4× channel MLP.
#[derive(Debug, Clone)]
pub struct RayLayer {
    pub channels: usize,
    pub field: RayField,
    pub norm1: ChannelNorm,
    pub norm2: ChannelNorm,
    pub expand: Pointwise,
    pub contract: Pointwise,
}

/// Intermediates of one ray layer.
#[derive(Debug, Clone, Copy)]
pub struct RayTrace {
    pub maps: AttenuationVars,
    pub modulated: Var,
    pub output: Var,
}

impl RayLayer {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, origins: usize) -> Result<Self> {
        let field = RayField::new(&mut b.scope("field"), origins)?;
        Ok(Self::with_field(b, channels, field))
    }

    /// Layer reading an existing (possibly shared) field.
    pub fn with_field<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, field: RayField) -> Self {
        Self {
            channels,
            field,
            norm1: ChannelNorm::new(&mut b.scope("norm1"), channels),
            norm2: ChannelNorm::new(&mut b.scope("norm2"), channels),
            expand: Pointwise::new(&mut b.scope("expand"), channels, 4 * channels),
            contract: Pointwise::new(&mut b.scope("contract"), 4 * channels, channels),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, f)?.output)
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<RayTrace> {
        let [_, c, h, w] = dims4(tape.shape(f), "ray_layer")?;
        if c != self.channels {
            return Err(TensorError::ChannelMismatch {
                op: "ray_layer",
                expected: self.channels,
                got: c,
            });
        }
        let maps = self.field.attenuation(tape, p, h, w)?;
        let n1 = self.norm1.forward(tape, p, f)?;
        let modulated = tape.spectral_modulate(n1, maps.combined)?;
        let f1 = tape.add(f, modulated)?;
        let n2 = self.norm2.forward(tape, p, f1)?;
        let e = self.expand.forward(tape, p, n2)?;
        let e = tape.gelu(e);
        let y = self.contract.forward(tape, p, e)?;
        let output = tape.add(f1, y)?;
        Ok(RayTrace {
            maps,
            modulated,
            output,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RayEncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub origins: usize,
    /// All layers read a single field.
    pub shared_field: bool,
}

impl Default for RayEncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 3,
            origins: 12,
            shared_field: false,
        }
    }
}

/// Pointwise projection to `d_model` followed by ray layers.
#[derive(Debug, Clone)]
pub struct RayEncoder {
    pub config: RayEncoderConfig,
    pub proj: Pointwise,
    pub layers: Vec<RayLayer>,
}

/// Encoder result: the final map, its tokens, and each layer's combined map.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: Var,
    /// [N, HW, d_model]
    pub tokens: Var,
    pub maps: Vec<Var>,
}

impl RayEncoder {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, in_channels: usize, config: &RayEncoderConfig) -> Result<Self> {
        let proj = Pointwise::new(&mut b.scope("proj"), in_channels, config.d_model);
        let shared = if config.shared_field && config.layers > 0 {
            Some(RayField::new(&mut b.scope("field"), config.origins)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let mut lb = b.scope(&format!("layer.{k}"));
            layers.push(match shared {
                Some(field) => RayLayer::with_field(&mut lb, config.d_model, field),
                None => RayLayer::new(&mut lb, config.d_model, config.origins)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            proj,
            layers,
        })
    }

    pub fn forward_map<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut f = self.proj.forward(tape, p, x)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let t = layer.forward_traced(tape, p, f)?;
            maps.push(t.maps.combined);
            f = t.output;
        }
        Ok((f, maps))
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, pyramid: &FeaturePyramid) -> Result<Encoded> {
        let (features, maps) = self.forward_map(tape, p, pyramid.deepest())?;
        let tokens = tape.to_tokens(features)?;
        Ok(Encoded {
            features,
            tokens,
            maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_on_unit_circle() {
        let o = init_origins(12).unwrap();
        assert!((o[0][0] - 1.0).abs() < 1e-15 && o[0][1].abs() < 1e-15);
        assert!(o[3][0].abs() < 1e-15 && (o[3][1] - 1.0).abs() < 1e-15);
        let four = init_origins(4).unwrap();
        let expect = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (a, b) in four.iter().zip(expect) {
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
        assert!(init_origins(0).is_err());
    }

    #[test]
    fn jitter_stays_on_circle() {
        let o = init_origins_jittered(12, 0.1, 5).unwrap();
        assert!(o.iter().all(|p| (p[0].hypot(p[1]) - 1.0).abs() < 1e-12));
        assert_eq!(o, init_origins_jittered(12, 0.1, 5).unwrap());
    }

    #[test]
    fn grid_layout() {
        let g = PixelGrid::new(3, 5);
        assert_eq!(g.coords[0], [-1.0, -1.0]);
        assert_eq!(g.coords[7], [0.0, 0.0]);
        assert_eq!(g.coords[14], [1.0, 1.0]);
        assert_eq!(PixelGrid::new(1, 1).coords, vec![[0.0, 0.0]]);
    }

    #[test]
    fn psf_closed_form_and_tail() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 40.0]).unwrap());
        let s = tape.constant(Tensor::zeros(&[1]));
        let k = tape.psf(d, s).unwrap();
        let v = tape.value(k).data();
        assert!((v[0] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(v[1] < v[0] && v[2] < 1e-300);
    }

    #[test]
    fn centered_origin_peaks_at_center() {
        let m = attenuation_map(&[[0.0, 0.0]], &[1.0], &[1.0], 1.0, 9, 9).unwrap();
        let row = m.row(0);
        let argmax = (0..81).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, 40);
    }

    #[test]
    fn vanishing_decay_with_flat_psf_is_uniform() {
        // A huge σ flattens the PSF; a tiny α flattens the decay.
        let m = attenuation_map(&[[0.3, -0.2]], &[1e6], &[1e-12], 1.0, 4, 4).unwrap();
        assert!(m.row(0).iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-9));
    }

    #[test]
    fn ray_field_has_49_scalars_for_12_origins() {
        assert_eq!(RayField::scalar_count(12), 49);
    }
}
