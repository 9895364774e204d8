//! Wavelet backbone: stem, separable four-band decomposition, extraction
//! stages, convolutional modulation blocks and pair-fusion pooling.

use crate::error::{Result, TensorError};
use crate::kernels::{Conv2dCfg, FilterAxis};
use crate::nn::{ChannelNorm, Conv, Pointwise};
use crate::params::{Bindings, ParamBuilder, ParamId};
use crate::ray::RayLayer;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOW_TAPS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const HIGH_TAPS: [f64; 5] = [-0.25, -0.5, 1.5, -0.5, -0.25];

/// Smallest image side the backbone accepts.
pub const MIN_EXTENT: usize = 16;

/// Learnable low (3 taps) / high (5 taps) filters shared by every channel
/// of one block.
#[derive(Debug, Clone, Copy)]
pub struct WaveFilterPair {
    pub low: ParamId,
    pub high: ParamId,
}

impl WaveFilterPair {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>) -> Self {
        Self {
            low: b.tensor("low", Tensor::from_f64(&[3], &LOW_TAPS).unwrap()),
            high: b.tensor("high", Tensor::from_f64(&[5], &HIGH_TAPS).unwrap()),
        }
    }

    pub fn bind(&self, p: &Bindings) -> (Var, Var) {
        (p[self.low], p[self.high])
    }
}

/// The four separable bands. The first letter names the horizontal filter,
/// the second the vertical one.
#[derive(Debug, Clone, Copy)]
pub struct Bands {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

impl Bands {
    pub fn as_array(&self) -> [Var; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }
}

/// Horizontal low/high pass, then vertical low/high pass on each result.
pub fn wave_decompose<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    low: Var,
    high: Var,
    stride: usize,
) -> Result<Bands> {
    let fl = tape.wave_conv(f, low, FilterAxis::Width, stride)?;
    let fh = tape.wave_conv(f, high, FilterAxis::Width, stride)?;
    Ok(Bands {
        ll: tape.wave_conv(fl, low, FilterAxis::Height, stride)?,
        lh: tape.wave_conv(fl, high, FilterAxis::Height, stride)?,
        hl: tape.wave_conv(fh, low, FilterAxis::Height, stride)?,
        hh: tape.wave_conv(fh, high, FilterAxis::Height, stride)?,
    })
}

/// Pair-fused bands: [LL + HH ; LH + HL] along channels.
pub fn pair_fuse<T: Real>(tape: &mut Tape<T>, bands: &Bands) -> Result<Var> {
    let a = tape.add(bands.ll, bands.hh)?;
    let b = tape.add(bands.lh, bands.hl)?;
    tape.concat(&[a, b])
}

fn check_even<T: Real>(tape: &Tape<T>, f: Var, op: &'static str) -> Result<()> {
    let s = tape.shape(f);
    let [_, _, h, w] = crate::tensor::dims4(s, op)?;
    for (axis, extent) in [("height", h), ("width", w)] {
        if extent % 2 != 0 {
            return Err(TensorError::OddExtent { op, axis, extent });
        }
    }
    Ok(())
}

/// 7×7 stride-2 convolution, norm, GELU.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: Conv,
    pub norm: ChannelNorm,
}

impl Stem {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        let cfg = Conv2dCfg {
            stride: (2, 2),
            padding: (3, 3),
            groups: 1,
        };
        Self {
            conv: Conv::new(&mut b.scope("conv"), cin, cout, 7, cfg),
            norm: ChannelNorm::new(&mut b.scope("norm"), cout),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let [_, _, h, w] = crate::tensor::dims4(tape.shape(x), "stem")?;
        if h < 14 || w < 14 {
            return Err(TensorError::Undersized {
                op: "stem",
                height: h,
                width: w,
                min: 14,
            });
        }
        check_even(tape, x, "stem")?;
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.gelu(y))
    }
}

/// Stride-2 decomposition, band concatenation, pointwise mix, norm, GELU.
#[derive(Debug, Clone)]
pub struct ExtractStage {
    pub filters: WaveFilterPair,
    pub mix: Pointwise,
    pub norm: ChannelNorm,
}

impl ExtractStage {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        Self {
            filters: WaveFilterPair::new(&mut b.scope("filters")),
            mix: Pointwise::new(&mut b.scope("mix"), 4 * cin, cout),
            norm: ChannelNorm::new(&mut b.scope("norm"), cout),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<Var> {
        check_even(tape, f, "extract_stage")?;
        let (low, high) = self.filters.bind(p);
        let bands = wave_decompose(tape, f, low, high, 2)?;
        let cat = tape.concat(&bands.as_array())?;
        let y = self.mix.forward(tape, p, cat)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.gelu(y))
    }
}

/// Intermediate values of one modulation block.
#[derive(Debug, Clone, Copy)]
pub struct ModulationTrace {
    /// Attention branch after the first decomposition round.
    pub round1: Var,
    /// Attention branch after the second round (the modulating map).
    pub round2: Var,
    pub value: Var,
    pub output: Var,
}

/// Pre-norm residual block f + W_out((A) ⊙ (W_v·norm f)) where A comes from
/// two stride-1 decomposition rounds sharing one filter pair.
#[derive(Debug, Clone)]
pub struct ModulationBlock {
    pub channels: usize,
    pub norm: ChannelNorm,
    pub reduce: Pointwise,
    pub mid: Pointwise,
    pub filters: WaveFilterPair,
    pub value: Pointwise,
    pub out: Pointwise,
}

impl ModulationBlock {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || (channels / reduction) * 4 != channels {
            return Err(TensorError::IndivisibleChannels {
                op: "modulation_block",
                channels,
                divisor: 4,
            });
        }
        let inner = channels / reduction;
        Ok(Self {
            channels,
            norm: ChannelNorm::new(&mut b.scope("norm"), channels),
            reduce: Pointwise::new(&mut b.scope("reduce"), channels, inner),
            mid: Pointwise::new(&mut b.scope("mid"), channels, inner),
            filters: WaveFilterPair::new(&mut b.scope("filters")),
            value: Pointwise::new(&mut b.scope("value"), channels, channels),
            out: Pointwise::new(&mut b.scope("out"), channels, channels),
        })
    }

    fn round<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, a: Var) -> Result<Var> {
        let (low, high) = self.filters.bind(p);
        let bands = wave_decompose(tape, a, low, high, 1)?;
        tape.concat(&bands.as_array())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, f, None)?.output)
    }

    /// Full forward with intermediates. `attention` replaces the computed
    /// A-branch when given (it must be shaped like `f`).
    pub fn forward_traced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        f: Var,
        attention: Option<Var>,
    ) -> Result<ModulationTrace> {
        let c = tape.shape(f).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(TensorError::ChannelMismatch {
                op: "modulation_block",
                expected: self.channels,
                got: c,
            });
        }
        let n = self.norm.forward(tape, p, f)?;
        let a = self.reduce.forward(tape, p, n)?;
        let a = tape.gelu(a);
        let round1 = self.round(tape, p, a)?;
        let a = self.mid.forward(tape, p, round1)?;
        let a = tape.gelu(a);
        let round2 = self.round(tape, p, a)?;
        let value = self.value.forward(tape, p, n)?;
        let gate = attention.unwrap_or(round2);
        let mixed = tape.mul(gate, value)?;
        let y = self.out.forward(tape, p, mixed)?;
        let output = tape.add(f, y)?;
        Ok(ModulationTrace {
            round1,
            round2,
            value,
            output,
        })
    }
}

/// Decomposition, pair fusion, pointwise transition to the next width, norm.
#[derive(Debug, Clone)]
pub struct WavePool {
    pub filters: WaveFilterPair,
    pub transition: Pointwise,
    pub norm: ChannelNorm,
    pub stride: usize,
}

impl WavePool {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            filters: WaveFilterPair::new(&mut b.scope("filters")),
            transition: Pointwise::new(&mut b.scope("transition"), 2 * cin, cout),
            norm: ChannelNorm::new(&mut b.scope("norm"), cout),
            stride,
        }
    }

    /// Pair-fused map before the transition.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<Var> {
        if self.stride == 2 {
            check_even(tape, f, "wave_pool")?;
        }
        let (low, high) = self.filters.bind(p);
        let bands = wave_decompose(tape, f, low, high, self.stride)?;
        pair_fuse(tape, &bands)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, f: Var) -> Result<Var> {
        let fused = self.fuse(tape, p, f)?;
        let y = self.transition.forward(tape, p, fused)?;
        self.norm.forward(tape, p, y)
    }
}

/// Channel schedules and depth of the backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stem width followed by each extraction stage's output width.
    pub extraction: Vec<usize>,
    /// Refinement input width followed by each stage's pooled width.
    pub refinement: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Ray layers after the blocks of each refinement stage.
    pub stage_rays: Vec<usize>,
    pub reduction: usize,
    /// Origins per ray field.
    pub ray_origins: usize,
}

impl BackboneConfig {
    /// Full-size configuration: 32→48→64 extraction, 64→512→4096 refinement,
    /// 6 blocks per stage, one ray layer per stage.
    pub fn full() -> Self {
        Self {
            in_channels: 3,
            extraction: vec![32, 48, 64],
            refinement: vec![64, 512, 4096],
            blocks_per_stage: 6,
            stage_rays: vec![1, 1],
            reduction: 4,
            ray_origins: 12,
        }
    }

    /// Desk-scale configuration for 32×32 images.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            extraction: vec![8, 12, 16],
            refinement: vec![16, 32, 64],
            blocks_per_stage: 2,
            stage_rays: vec![1, 1],
            reduction: 4,
            ray_origins: 12,
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.extraction[0]
    }

    pub fn refinement_stages(&self) -> usize {
        self.refinement.len() - 1
    }

    pub fn final_channels(&self) -> usize {
        *self.refinement.last().unwrap()
    }

    /// Total spatial reduction of the deepest map.
    pub fn downsampling(&self) -> usize {
        // stem, extraction stages, then every pool except the last halves
        1 << (1 + (self.extraction.len() - 1) + self.refinement_stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::Config(m.to_string()));
        if self.extraction.len() < 2 || self.refinement.len() < 2 {
            return bad("extraction and refinement schedules need at least two entries");
        }
        if self.extraction.iter().chain(&self.refinement).any(|&c| c == 0) {
            return bad("channel counts must be positive");
        }
        if self.extraction.last() != self.refinement.first() {
            return bad("refinement must start at the last extraction width");
        }
        if self.stage_rays.len() != self.refinement_stages() {
            return bad("stage_rays needs one entry per refinement stage");
        }
        if self.reduction != 4 {
            return bad("bottleneck reduction must be 4");
        }
        for &c in &self.refinement[..self.refinement.len() - 1] {
            if c % 4 != 0 {
                return Err(TensorError::IndivisibleChannels {
                    op: "backbone",
                    channels: c,
                    divisor: 4,
                });
            }
        }
        if self.stage_rays.iter().any(|&r| r > 0) && self.ray_origins == 0 {
            return bad("ray layers need at least one origin");
        }
        Ok(())
    }
}

/// One refinement stage: modulation blocks, optional ray layers, pooling.
#[derive(Debug, Clone)]
pub struct RefineStage {
    pub blocks: Vec<ModulationBlock>,
    pub rays: Vec<RayLayer>,
    pub pool: WavePool,
}

/// Per-stage outputs, shallow to deep. Every stage but the last contributes
/// its map before pooling; the last contributes its pooled output.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Var)>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        self.levels.last().expect("pyramid has levels").1
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Stem,
    pub extract: Vec<ExtractStage>,
    pub stages: Vec<RefineStage>,
}

impl Backbone {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(&mut b.scope("stem"), config.in_channels, config.stem_channels());
        let extract = config
            .extraction
            .windows(2)
            .enumerate()
            .map(|(i, w)| ExtractStage::new(&mut b.scope(&format!("extract.{i}")), w[0], w[1]))
            .collect();
        let last = config.refinement_stages() - 1;
        let mut stages = Vec::new();
        for (s, w) in config.refinement.windows(2).enumerate() {
            let mut sb = b.scope(&format!("stage.{s}"));
            let blocks = (0..config.blocks_per_stage)
                .map(|k| ModulationBlock::new(&mut sb.scope(&format!("block.{k}")), w[0], config.reduction))
                .collect::<Result<Vec<_>>>()?;
            let rays = (0..config.stage_rays[s])
                .map(|k| RayLayer::new(&mut sb.scope(&format!("ray.{k}")), w[0], config.ray_origins))
                .collect::<Result<Vec<_>>>()?;
            let stride = if s == last { 1 } else { 2 };
            let pool = WavePool::new(&mut sb.scope("pool"), w[0], w[1], stride);
            stages.push(RefineStage { blocks, rays, pool });
        }
        Ok(Self {
            config: config.clone(),
            stem,
            extract,
            stages,
        })
    }

    /// Checks that an image of `h`×`w` survives every halving.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.downsampling();
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(TensorError::Undersized {
                op: "backbone",
                height: h,
                width: w,
                min: MIN_EXTENT,
            });
        }
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent % d != 0 {
                return Err(TensorError::Config(format!(
                    "backbone: {axis} {extent} is not divisible by {d}"
                )));
            }
        }
        Ok(())
    }

    /// Stem and extraction stages only.
    pub fn extract<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<Var> {
        let [_, _, h, w] = crate::tensor::dims4(tape.shape(image), "backbone")?;
        self.check_extent(h, w)?;
        let mut f = self.stem.forward(tape, p, image)?;
        for stage in &self.extract {
            f = stage.forward(tape, p, f)?;
        }
        Ok(f)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, image: Var) -> Result<FeaturePyramid> {
        let mut f = self.extract(tape, p, image)?;
        let mut levels = Vec::new();
        let last = self.stages.len() - 1;
        for (s, stage) in self.stages.iter().enumerate() {
            for block in &stage.blocks {
                f = block.forward(tape, p, f)?;
            }
            for ray in &stage.rays {
                f = ray.forward(tape, p, f)?;
            }
            if s != last {
                levels.push((s, f));
            }
            f = stage.pool.forward(tape, p, f)?;
        }
        levels.push((last, f));
        Ok(FeaturePyramid { levels })
    }

    /// All ray layers inside the refinement stages, in order.
    pub fn ray_layers(&self) -> impl Iterator<Item = &RayLayer> {
        self.stages.iter().flat_map(|s| s.rays.iter())
    }
}
