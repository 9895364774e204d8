//! Small reusable layers: channel norm, pointwise and full convolutions,
//! and a dense head.

use crate::error::Result;
use crate::kernels::Conv2dCfg;
use crate::params::{Bindings, ParamBuilder, ParamId};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Per-location normalization over channels with learnable gain and shift.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            gain: b.ones("gain", &[channels]),
            shift: b.zeros("shift", &[channels]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.shift])
    }
}

/// 1×1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        Self {
            weight: b.fan_in("weight", &[cout, cin, 1, 1], cin),
            bias: b.zeros("bias", &[cout]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        tape.pointwise_conv(x, p[self.weight], Some(p[self.bias]))
    }
}

/// Dense 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cfg: Conv2dCfg,
}

impl Conv {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        cfg: Conv2dCfg,
    ) -> Self {
        Self {
            weight: b.fan_in("weight", &[cout, cin, kernel, kernel], cin * kernel * kernel),
            bias: b.zeros("bias", &[cout]),
            cfg,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.cfg)?;
        tape.add(y, p[self.bias])
    }
}

/// x·W + b with W stored as [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Zero-initialized: every input maps to zero logits at step 0.
    pub fn zeros<T: Real>(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        Self {
            weight: b.zeros("weight", &[cin, cout]),
            bias: b.zeros("bias", &[cout]),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}
