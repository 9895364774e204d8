//! Deterministic synthetic shape datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::{self, Image};
use crate::error::{Result, TensorError};

/// Shape drawn for each class, in class order.
pub const SHAPES: [&str; 8] = [
    "disk", "square", "cross", "triangle", "ring", "x", "hbars", "vbars",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Gaussian around the image center, std = extent/6, truncated so the
    /// object stays inside the image.
    CenterBiased,
    /// Uniform over the positions that keep the object inside.
    Uniform,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::CenterBiased => "center",
            Placement::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center" | "center-biased" => Some(Placement::CenterBiased),
            "uniform" => Some(Placement::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub extent: usize,
    pub placement: Placement,
    /// Half-width of the uniform pixel noise, in [0, 1] intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 64,
            extent: 32,
            placement: Placement::CenterBiased,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPES.len() {
            return Err(TensorError::Config(format!(
                "synthetic data supports 1 to {} classes, got {}",
                SHAPES.len(),
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(TensorError::Config("per_class must be positive".into()));
        }
        if self.extent < 8 {
            return Err(TensorError::Config("extent must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(TensorError::Config("noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Half side of the square each object is drawn in.
    pub fn object_radius(&self) -> f64 {
        self.extent as f64 / 4.0
    }
}

/// Whether normalized point (u, v) ∈ [−1, 1]² lies inside `shape`.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    let r2 = u * u + v * v;
    match shape {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => u.abs() <= 0.3 || v.abs() <= 0.3,
        3 => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6,
        4 => (0.3..=1.0).contains(&r2),
        5 => (u - v).abs() <= 0.4 || (u + v).abs() <= 0.4,
        6 => ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        _ => ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
    }
}

/// One grayscale sample of `shape` centered at `(cx, cy)` pixels.
pub fn render(spec: &SyntheticSpec, shape: usize, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let r = spec.object_radius();
    let e = spec.extent;
    let mut out = Vec::with_capacity(e * e);
    for i in 0..e {
        for j in 0..e {
            let (u, v) = ((j as f64 + 0.5 - cx) / r, (i as f64 + 0.5 - cy) / r);
            let base = if inside(shape, u, v) { 1.0 } else { 0.0 };
            let noise = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            out.push(((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Object center in pixel units along one axis.
pub fn place(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> f64 {
    let e = spec.extent as f64;
    let (lo, hi) = (spec.object_radius(), e - spec.object_radius());
    match spec.placement {
        Placement::Uniform => rng.random_range(lo..=hi),
        Placement::CenterBiased => {
            let normal = Normal::new(e / 2.0, e / 6.0).expect("positive std");
            loop {
                let c = normal.sample(rng);
                if (lo..=hi).contains(&c) {
                    return c;
                }
            }
        }
    }
}

/// A generated sample before encoding.
#[derive(Debug, Clone)]
pub struct Sample {
    pub label: usize,
    pub center: (f64, f64),
    pub pixels: Vec<u8>,
}

/// Every sample in class-major order, fully determined by `spec.seed`.
pub fn samples(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        for _ in 0..spec.per_class {
            let cx = place(spec, &mut rng);
            let cy = place(spec, &mut rng);
            let pixels = render(spec, label, cx, cy, &mut rng);
            out.push(Sample {
                label,
                center: (cx, cy),
                pixels,
            });
        }
    }
    Ok(out)
}

/// The samples decoded exactly as [`super::load_dataset`] would read them
/// back from disk.
pub fn dataset(spec: &SyntheticSpec) -> Result<super::Dataset> {
    let all = samples(spec)?;
    let mut pixels = Vec::with_capacity(all.len() * 3 * spec.extent * spec.extent);
    let mut labels = Vec::with_capacity(all.len());
    for s in &all {
        let img = Image {
            width: spec.extent,
            height: spec.extent,
            channels: 1,
            data: s.pixels.clone(),
        };
        pixels.extend(pnm::to_chw(&img));
        labels.push(s.label);
    }
    super::Dataset::new(pixels, labels, spec.classes, 3, spec.extent, spec.extent)
}

pub fn file_name(label: usize, index: usize) -> String {
    format!("{}_{index:04}.pgm", SHAPES[label])
}

/// Writes PGM files and `manifest.csv` into `out`; returns the manifest path.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let all = samples(spec)?;
    std::fs::create_dir_all(out).map_err(|e| TensorError::io(out, e))?;
    let mut manifest = String::from("path,label\n");
    for (k, s) in all.into_iter().enumerate() {
        let name = file_name(s.label, k % spec.per_class);
        let img = Image {
            width: spec.extent,
            height: spec.extent,
            channels: 1,
            data: s.pixels,
        };
        pnm::write(&out.join(&name), &img)?;
        manifest.push_str(&format!("{name},{}\n", s.label));
    }
    let path = out.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| TensorError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_many_classes() {
        let spec = SyntheticSpec {
            classes: 50,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.validate(), Err(TensorError::Config(_))));
    }

    #[test]
    fn shapes_are_distinct() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = spec.extent as f64 / 2.0;
        let imgs: Vec<Vec<u8>> = (0..SHAPES.len()).map(|s| render(&spec, s, c, c, &mut rng)).collect();
        for a in 0..imgs.len() {
            assert!(imgs[a].contains(&255), "{} is empty", SHAPES[a]);
            for b in a + 1..imgs.len() {
                assert_ne!(imgs[a], imgs[b], "{} vs {}", SHAPES[a], SHAPES[b]);
            }
        }
    }
}
