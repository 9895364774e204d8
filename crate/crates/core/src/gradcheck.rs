//! Central finite-difference verification of tape gradients.
//!
//! A probe builds a graph from a set of named double-precision inputs. The
//! output is contracted with a fixed random weight tensor to a scalar, the
//! analytic gradient comes from one backward pass, and each sampled input
//! coordinate is re-evaluated at ±h.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type InputFn = dyn Fn(&mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> + Send + Sync;
type ForwardFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync;

/// One differentiable function under test.
pub struct Probe {
    pub name: String,
    inputs: Box<InputFn>,
    forward: Box<ForwardFn>,
    /// Resample inputs on failure; for ops with non-differentiable points.
    pub kinked: bool,
}

impl Probe {
    /// `inputs` draws named tensors; those with `requires_grad` are checked.
    pub fn new(
        name: impl Into<String>,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> + Send + Sync + 'static,
        forward: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs: Box::new(inputs),
            forward: Box::new(forward),
            kinked: false,
        }
    }

    pub fn kinked(mut self) -> Self {
        self.kinked = true;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub resamples: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_coords: Some(24),
            resamples: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub probe: String,
    pub inputs: Vec<InputError>,
    /// Number of input draws used (1 unless a kinked probe was resampled).
    pub attempts: usize,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// |a − n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_loss(
    probe: &Probe,
    tape: &mut Tape<f64>,
    inputs: &[(String, Tensor<f64>)],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let y = (probe.forward)(tape, &vars)?;
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
            Tensor::uniform(tape.shape(y), -1.0, 1.0, &mut rng)
        })
        .clone();
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv)?;
    Ok((tape.sum(prod), vars))
}

fn evaluate(
    probe: &Probe,
    inputs: &[(String, Tensor<f64>)],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = scalar_loss(probe, &mut tape, inputs, weights, seed)?;
    Ok(tape.value(loss).data()[0])
}

fn check_once(probe: &Probe, seed: u64, opts: &CheckOptions) -> Result<Vec<InputError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = (probe.inputs)(&mut rng);
    let mut weights = None;
    let mut tape = Tape::new();
    let (loss, vars) = scalar_loss(probe, &mut tape, &inputs, &mut weights, seed)?;
    tape.backward(loss)?;

    let mut report = Vec::new();
    for k in 0..inputs.len() {
        if !inputs[k].1.requires_grad() {
            continue;
        }
        let n = inputs[k].1.numel();
        let analytic: Vec<f64> = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = inputs[k].1.data()[i];
            inputs[k].1.data_mut()[i] = orig + opts.step;
            let up = evaluate(probe, &inputs, &mut weights, seed)?;
            inputs[k].1.data_mut()[i] = orig - opts.step;
            let down = evaluate(probe, &inputs, &mut weights, seed)?;
            inputs[k].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.push(InputError {
            name: inputs[k].0.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Runs the probe and reports per-input maximum relative error. Kinked
/// probes are redrawn (new seed) up to `opts.resamples` times on failure.
pub fn finite_diff_check(probe: &Probe, seed: u64, opts: &CheckOptions) -> Result<GradReport> {
    let tries = if probe.kinked { 1 + opts.resamples } else { 1 };
    let mut last = None;
    for attempt in 0..tries {
        let s = seed.wrapping_add(attempt as u64 * 0x9e37_79b9);
        let inputs = check_once(probe, s, opts)?;
        let report = GradReport {
            probe: probe.name.clone(),
            inputs,
            attempts: attempt + 1,
        };
        if report.passed(opts.tolerance) {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}

/// Named input that receives gradients.
pub fn input(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t.with_grad())
}

/// Named input held constant.
pub fn fixed(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    let mut t = t;
    t.set_requires_grad(false);
    (name.to_string(), t)
}

/// Standard-normal draw helper for probe builders.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Uniform draw bounded away from zero in magnitude, for divisors.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.5..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-12) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // forward x², but pretend the op is x·c with c fixed: correct check.
        let ok = Probe::new(
            "square",
            |rng| vec![input("x", randn(rng, &[5]))],
            |t, v| t.mul(v[0], v[0]),
        );
        let r = finite_diff_check(&ok, 1, &CheckOptions::default()).unwrap();
        assert!(r.passed(1e-6), "{r:?}");

        // Detaching one factor through a constant copy breaks the gradient.
        let broken = Probe::new(
            "detached-square",
            |rng| vec![input("x", randn(rng, &[5]))],
            |t, v| {
                let copy = t.constant(t.value(v[0]).clone());
                t.mul(v[0], copy)
            },
        );
        let r = finite_diff_check(&broken, 1, &CheckOptions::default()).unwrap();
        assert!(r.max_rel_error() > 0.3, "{r:?}");
    }
}
