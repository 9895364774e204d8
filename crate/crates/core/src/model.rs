//! Classifier assembly, configuration presets and parameter accounting.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::nn::Linear;
use crate::params::{init_rng, Bindings, ParamBuilder, ParamStore};
use crate::ray::{RayEncoder, RayEncoderConfig, RayField};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::dims4;
use crate::wavelet::{Backbone, BackboneConfig};

pub const MAX_RAYS: usize = 3;

/// Architecture hyperparameters of a classifier.
///
/// `rays` enables ray layers in order: after the blocks of each refinement
/// stage, then inside a one-layer encoder on the deepest map. With `rays`
/// not exceeding the stage count there is no encoder and the head reads the
/// backbone directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub extraction: Vec<usize>,
    pub refinement: Vec<usize>,
    pub blocks_per_stage: usize,
    pub reduction: usize,
    pub rays: usize,
    pub origins: usize,
    pub encoder_dim: usize,
    pub classes: usize,
    pub image_extent: usize,
}

impl ModelConfig {
    /// 32×32 inputs, 8→12→16 extraction, 16→32→64 refinement, 2 blocks.
    pub fn desk(rays: usize, classes: usize) -> Self {
        let b = BackboneConfig::desk();
        Self {
            in_channels: b.in_channels,
            extraction: b.extraction,
            refinement: b.refinement,
            blocks_per_stage: b.blocks_per_stage,
            reduction: b.reduction,
            rays,
            origins: 12,
            encoder_dim: 32,
            classes,
            image_extent: 32,
        }
    }

    /// Full-size 224×224 classifier with 1000 classes.
    pub fn full(rays: usize) -> Self {
        let b = BackboneConfig::full();
        Self {
            in_channels: b.in_channels,
            extraction: b.extraction,
            refinement: b.refinement,
            blocks_per_stage: b.blocks_per_stage,
            reduction: b.reduction,
            rays,
            origins: 12,
            encoder_dim: 320,
            classes: 1000,
            image_extent: 224,
        }
    }

    pub fn stages(&self) -> usize {
        self.refinement.len().saturating_sub(1)
    }

    pub fn encoder_layers(&self) -> usize {
        self.rays.saturating_sub(self.stages())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: self.in_channels,
            extraction: self.extraction.clone(),
            refinement: self.refinement.clone(),
            blocks_per_stage: self.blocks_per_stage,
            stage_rays: (0..self.stages()).map(|s| usize::from(self.rays > s)).collect(),
            reduction: self.reduction,
            ray_origins: self.origins,
        }
    }

    pub fn encoder(&self) -> Option<RayEncoderConfig> {
        (self.encoder_layers() > 0).then(|| RayEncoderConfig {
            d_model: self.encoder_dim,
            layers: self.encoder_layers(),
            origins: self.origins,
            shared_field: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays > MAX_RAYS {
            return Err(TensorError::Config(format!(
                "rays must be between 0 and {MAX_RAYS}, got {}",
                self.rays
            )));
        }
        if self.classes == 0 {
            return Err(TensorError::Config("classes must be positive".into()));
        }
        if self.encoder_layers() > 0 && self.encoder_dim == 0 {
            return Err(TensorError::Config("encoder_dim must be positive".into()));
        }
        let backbone = self.backbone();
        backbone.validate()?;
        let d = backbone.downsampling();
        if self.image_extent < crate::wavelet::MIN_EXTENT || !self.image_extent.is_multiple_of(d) {
            return Err(TensorError::Config(format!(
                "image_extent {} must be at least {} and divisible by {d}",
                self.image_extent,
                crate::wavelet::MIN_EXTENT
            )));
        }
        Ok(())
    }

    /// Flat `key = value` view, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("extraction", list(&self.extraction)),
            ("refinement", list(&self.refinement)),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("reduction", self.reduction.to_string()),
            ("rays", self.rays.to_string()),
            ("origins", self.origins.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("classes", self.classes.to_string()),
            ("image_extent", self.image_extent.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 10] = [
        "in_channels",
        "extraction",
        "refinement",
        "blocks_per_stage",
        "reduction",
        "rays",
        "origins",
        "encoder_dim",
        "classes",
        "image_extent",
    ];

    /// Sets one field from its text form; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || TensorError::Config(format!("invalid value for {key}: {value:?}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>>>();
        match key {
            "in_channels" => self.in_channels = num(value)?,
            "extraction" => self.extraction = list(value)?,
            "refinement" => self.refinement = list(value)?,
            "blocks_per_stage" => self.blocks_per_stage = num(value)?,
            "reduction" => self.reduction = num(value)?,
            "rays" => self.rays = num(value)?,
            "origins" => self.origins = num(value)?,
            "encoder_dim" => self.encoder_dim = num(value)?,
            "classes" => self.classes = num(value)?,
            "image_extent" => self.image_extent = num(value)?,
            _ => return Err(TensorError::Config(format!("unknown model key {key}"))),
        }
        Ok(())
    }

    /// Human-readable list of fields whose values differ.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} vs {}", a.0, a.1, b.1))
            .collect()
    }
}

/// Backbone, optional ray encoder, global average pool and a linear head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Option<RayEncoder>,
    pub head: Linear,
}

/// Logits plus the combined attenuation map of every ray layer.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub logits: Var,
    pub maps: Vec<Var>,
}

impl Classifier {
    /// Builds the layout and its initialized parameters from `seed`.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut b.scope("backbone"), &config.backbone())?;
        let encoder = match config.encoder() {
            Some(ec) => Some(RayEncoder::new(&mut b.scope("encoder"), config.refinement[config.stages()], &ec)?),
            None => None,
        };
        let width = encoder
            .as_ref()
            .map_or(backbone.config.final_channels(), |e| e.config.d_model);
        let head = Linear::zeros(&mut b.scope("head"), width, config.classes);
        let model = Self {
            config: config.clone(),
            backbone,
            encoder,
            head,
        };
        Ok((model, store))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, images: Var) -> Result<ClassifierOutput> {
        let [_, c, h, w] = dims4(tape.shape(images), "classifier")?;
        let e = self.config.image_extent;
        if c != self.config.in_channels || h != e || w != e {
            return Err(TensorError::Config(format!(
                "classifier: batch of {c}x{h}x{w} images does not match configured {}x{e}x{e}",
                self.config.in_channels
            )));
        }
        let mut maps = Vec::new();
        let mut f = self.backbone.extract(tape, p, images)?;
        for stage in &self.backbone.stages {
            for block in &stage.blocks {
                f = block.forward(tape, p, f)?;
            }
            for ray in &stage.rays {
                let t = ray.forward_traced(tape, p, f)?;
                maps.push(t.maps.combined);
                f = t.output;
            }
            f = stage.pool.forward(tape, p, f)?;
        }
        if let Some(enc) = &self.encoder {
            let (g, m) = enc.forward_map(tape, p, f)?;
            maps.extend(m);
            f = g;
        }
        let pooled = tape.global_avg_pool(f)?;
        let logits = self.head.forward(tape, p, pooled)?;
        Ok(ClassifierOutput { logits, maps })
    }

    /// Every ray field in forward order (stage layers, then encoder layers).
    pub fn ray_fields(&self) -> Vec<RayField> {
        let mut out: Vec<RayField> = self.backbone.ray_layers().map(|l| l.field).collect();
        if let Some(enc) = &self.encoder {
            out.extend(enc.layers.iter().map(|l| l.field));
        }
        out
    }

    /// Spatial extent of the map each ray field modulates, in forward order.
    pub fn ray_extents(&self) -> Vec<usize> {
        let mut extent = self.config.image_extent / (1 << self.config.extraction.len());
        let mut out = Vec::new();
        let last = self.backbone.stages.len() - 1;
        for (s, stage) in self.backbone.stages.iter().enumerate() {
            out.extend(std::iter::repeat_n(extent, stage.rays.len()));
            if s != last {
                extent /= 2;
            }
        }
        if let Some(enc) = &self.encoder {
            out.extend(std::iter::repeat_n(extent, enc.layers.len()));
        }
        out
    }
}

/// Learnable scalar counts by module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub modules: Vec<(String, usize)>,
    /// Ray-field scalars (origins, widths, decays, gains), a subset of
    /// the ray-layer module.
    pub ray_fields: usize,
    pub total: usize,
}

fn module_of(name: &str) -> &'static str {
    if name.contains(".ray.") || name.starts_with("encoder.layer") || name.starts_with("encoder.field") {
        "ray layers"
    } else if name.starts_with("backbone.stem") {
        "stem"
    } else if name.starts_with("backbone.extract") {
        "extraction"
    } else if name.contains(".block.") {
        "modulation blocks"
    } else if name.contains(".pool.") {
        "pooling"
    } else if name.starts_with("encoder.proj") {
        "encoder projection"
    } else if name.starts_with("head") {
        "head"
    } else {
        "other"
    }
}

pub fn count_params<T: Real>(store: &ParamStore<T>) -> ParamCount {
    const ORDER: [&str; 8] = [
        "stem",
        "extraction",
        "modulation blocks",
        "ray layers",
        "pooling",
        "encoder projection",
        "head",
        "other",
    ];
    let mut by: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ray_fields = 0;
    for (name, t) in store.iter() {
        *by.entry(module_of(name)).or_default() += t.numel();
        if name.contains("field.") {
            ray_fields += t.numel();
        }
    }
    let modules: Vec<(String, usize)> = ORDER
        .iter()
        .filter_map(|m| by.get(m).map(|&c| (m.to_string(), c)))
        .collect();
    let total = modules.iter().map(|m| m.1).sum();
    ParamCount {
        modules,
        ray_fields,
        total,
    }
}

/// Counts parameters of the model `config` describes.
pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    let (_, store) = Classifier::new::<f32>(config, 0)?;
    Ok(count_params(&store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ray_placement() {
        let c = ModelConfig::desk(3, 3);
        assert_eq!(c.backbone().stage_rays, vec![1, 1]);
        assert_eq!(c.encoder_layers(), 1);
        let c = ModelConfig::desk(1, 3);
        assert_eq!(c.backbone().stage_rays, vec![1, 0]);
        assert!(c.encoder().is_none());
        assert!(ModelConfig::desk(4, 3).validate().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = ModelConfig::desk(3, 10);
        let (model, store) = Classifier::new::<f32>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let mut rng = init_rng(2);
        let x = tape.constant(Tensor::uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng));
        let out = model.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[4, 10]);
        let probs = tape.softmax(out.logits, 1).unwrap();
        assert!(tape.value(probs).data().iter().all(|v| (v - 0.1).abs() < 1e-7));
        assert_eq!(out.maps.len(), 3);
        assert_eq!(model.ray_extents(), vec![4, 2, 2]);
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let (model, store) = Classifier::new::<f32>(&ModelConfig::desk(0, 3), 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(matches!(model.forward(&mut tape, &p, x), Err(TensorError::Config(_))));
    }

    #[test]
    fn pairs_round_trip_and_diff() {
        let a = ModelConfig::desk(3, 3);
        let mut b = ModelConfig::desk(0, 5);
        for (k, v) in a.to_pairs() {
            b.set(k, &v).unwrap();
        }
        assert_eq!(a, b);
        b.rays = 1;
        b.classes = 7;
        let d = a.diff(&b);
        assert_eq!(d, vec!["rays: 3 vs 1".to_string(), "classes: 3 vs 7".to_string()]);
        assert!(b.set("colour", "red").is_err());
    }

    #[test]
    fn desk_counts_are_small_and_stable() {
        let a = param_count(&ModelConfig::desk(3, 3)).unwrap();
        let b = param_count(&ModelConfig::desk(3, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.total < 1_000_000);
        assert_eq!(a.ray_fields, 3 * 49);
        assert_eq!(a.total, a.modules.iter().map(|m| m.1).sum::<usize>());
    }
}
