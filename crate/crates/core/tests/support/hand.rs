//! Hand-derived optimizer and schedule references.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Three parameters, their gradients and the update settings.
pub const P0: [f64; 3] = [1.0, -2.0, 0.5];
pub const G0: [f64; 3] = [0.1, -0.3, 0.0];
pub const LR: f64 = 0.01;
pub const WD: f64 = 0.05;

/// First AdamW step from zero moments, worked by hand.
///
/// With t = 1 the corrected moments are m̂ = g and v̂ = g², so the adaptive
/// step is g / (|g| + 1e-8); a zero gradient contributes nothing.
///   p0:  1.0·(1 − 5e-4) − 0.01·0.1/(0.1 + 1e-8)  = 0.9995 − 0.01/(1 + 1e-7)
///   p1: −2.0·(1 − 5e-4) + 0.01·0.3/(0.3 + 1e-8)  = −1.999 + 0.01/(1 + 1e-8/0.3)
///   p2:  0.5·(1 − 5e-4)                           = 0.49975
pub fn first_step() -> [f64; 3] {
    [
        0.9995 - 0.01 / (1.0 + 1e-7),
        -1.999 + 0.01 / (1.0 + 1e-8 / 0.3),
        0.49975,
    ]
}

/// Second step with gradients `g1`, continuing from [`first_step`].
pub fn second_step(g1: [f64; 3]) -> [f64; 3] {
    let p1 = first_step();
    let mut out = [0.0; 3];
    for i in 0..3 {
        let m = 0.9 * (0.1 * G0[i]) + 0.1 * g1[i];
        let v = 0.999 * (0.001 * G0[i] * G0[i]) + 0.001 * g1[i] * g1[i];
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.998001);
        out[i] = p1[i] * (1.0 - LR * WD) - LR * m_hat / (v_hat.sqrt() + 1e-8);
    }
    out
}

/// Closed form of the warmup-then-cosine schedule.
pub fn schedule(step: f64, total: f64, peak: f64, warmup: f64) -> f64 {
    let knot = warmup * total;
    if step < knot {
        peak / 25.0 + (peak - peak / 25.0) * step / knot
    } else {
        let floor = peak / 1e4;
        floor + 0.5 * (peak - floor) * (1.0 + (PI * (step - knot) / (total - knot)).cos())
    }
}

/// (step, expected lr) at the schedule knots for 1000 steps, peak 1e-3 and
/// 10% warmup: start, warmup midpoint, warmup end, decay midpoint, end.
pub fn knots() -> [(usize, f64); 5] {
    [
        (0, 1e-3 / 25.0),
        (50, (1e-3 / 25.0 + 1e-3) / 2.0),
        (100, 1e-3),
        (550, 1e-7 + (1e-3 - 1e-7) / 2.0),
        (1000, 1e-7),
    ]
}
