//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op method validates its inputs, computes the forward value eagerly
//! and appends one node. Nodes only ever reference earlier nodes, so the tape
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep.

use crate::error::{Result, TensorError};
use crate::fft::Plan2d;
use crate::kernels::{self, Conv2dCfg, ConvGeom, FilterAxis, WaveGeom};
use crate::scalar::Real;
use crate::tensor::{dims4, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddChannel(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Pointwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Wave {
        input: Var,
        taps: Var,
        geom: WaveGeom,
    },
    Gelu(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalAvgPool(Var),
    Matmul(Var, Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Concat(Vec<Var>),
    ToTokens(Var),
    Distance {
        origins: Var,
        grid: Vec<T>,
    },
    Psf {
        dist: Var,
        sigma: Var,
    },
    Decay {
        dist: Var,
        alpha: Var,
        beta: Var,
    },
    MeanRows(Var),
    Spectral {
        input: Var,
        mask: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// (batch, channels, trailing plane) view of a rank ≥ 2 shape.
fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], numel(&shape[2..]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients
    /// flow back to it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|&v| self.rg(v));
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        value.set_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    /// Per-channel broadcast check: `b` is rank 1 and matches axis 1 of `a`.
    fn channel_broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        if sb.len() == 1 && sa.len() >= 2 && sa[1] == sb[0] {
            return Ok(true);
        }
        Err(TensorError::Broadcast {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    /// `a + b` for equal shapes, or `b` of shape [C] added per channel.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let per_channel = self.channel_broadcast(a, b, "add")?;
        let shape = self.shape(a).to_vec();
        let (_, c, plane) = if per_channel { channel_view(&shape) } else { (0, 1, 1) };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if per_channel {
            va.iter()
                .enumerate()
                .map(|(i, &x)| x + vb[(i / plane) % c])
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| x + y).collect()
        };
        let op = if per_channel { Op::AddChannel(a, b) } else { Op::Add(a, b) };
        Ok(self.push(&shape, data, op, &[a, b]))
    }

    /// `a ⊙ b` for equal shapes, or `b` of shape [C] scaling each channel.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let per_channel = self.channel_broadcast(a, b, "mul")?;
        let shape = self.shape(a).to_vec();
        let (_, c, plane) = if per_channel { channel_view(&shape) } else { (0, 1, 1) };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if per_channel {
            va.iter()
                .enumerate()
                .map(|(i, &x)| x * vb[(i / plane) % c])
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| x * y).collect()
        };
        let op = if per_channel { Op::MulChannel(a, b) } else { Op::Mul(a, b) };
        Ok(self.push(&shape, data, op, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        self.push(&shape, data, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(&[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(&[1], vec![s], Op::Mean(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        self.push(&shape, data, Op::Gelu(a), &[a])
    }

    // ---- convolution -------------------------------------------------

    /// Grouped 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, cfg: Conv2dCfg) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let [n, c, h, w] = dims4(&xs, "conv2d")?;
        let [cout, cig, kh, kw] = dims4(&ks, "conv2d")?;
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ks.clone(),
        };
        let g = cfg.groups;
        if g == 0 || c % g != 0 || cout % g != 0 || cig * g != c {
            return Err(mismatch());
        }
        if cfg.stride.0 == 0 || cfg.stride.1 == 0 {
            return Err(TensorError::Config("conv2d: stride must be positive".into()));
        }
        let (hp, wp) = (h + 2 * cfg.padding.0, w + 2 * cfg.padding.1);
        if kh > hp || kw > wp {
            return Err(TensorError::ZeroSizedOutput {
                op: "conv2d",
                input: xs,
                kernel: ks,
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (hp - kh) / cfg.stride.0 + 1,
            wo: (wp - kw) / cfg.stride.1 + 1,
            cfg,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        Ok(self.push(
            &[n, cout, geom.ho, geom.wo],
            out,
            Op::Conv2d { input, kernel, geom },
            &[input, kernel],
        ))
    }

    /// 1×1 convolution: weight [Cout, C, 1, 1], optional bias [Cout].
    pub fn pointwise_conv(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let [n, c, h, w] = dims4(&xs, "pointwise_conv")?;
        let [cout, cin, kh, kw] = dims4(&ws, "pointwise_conv")?;
        if kh != 1 || kw != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "pointwise_conv",
                lhs: xs,
                rhs: ws,
            });
        }
        if cin != c {
            return Err(TensorError::ChannelMismatch {
                op: "pointwise_conv",
                expected: cin,
                got: c,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "pointwise_conv",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = kernels::pointwise_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            c,
            cout,
            h * w,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(&[n, cout, h, w], out, Op::Pointwise { input, weight, bias }, &inputs))
    }

    /// Depthwise 1-D filter along one spatial axis. The same `taps` (odd
    /// length) serve every channel; borders use symmetric same-padding.
    pub fn wave_conv(&mut self, input: Var, taps: Var, axis: FilterAxis, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [n, c, h, w] = dims4(&xs, "wave_conv")?;
        let ts = self.shape(taps).to_vec();
        if ts.len() != 1 || ts[0].is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "wave_conv",
                lhs: xs,
                rhs: ts,
            });
        }
        if stride == 0 || stride > 2 {
            return Err(TensorError::Config(format!("wave_conv: unsupported stride {stride}")));
        }
        if stride == 2 {
            let (name, extent) = match axis {
                FilterAxis::Width => ("width", w),
                FilterAxis::Height => ("height", h),
            };
            if extent % 2 != 0 {
                return Err(TensorError::OddExtent {
                    op: "wave_conv",
                    axis: name,
                    extent,
                });
            }
        }
        let geom = WaveGeom::new(n * c, h, w, axis, stride);
        let out = kernels::wave_forward(self.value(input).data(), self.value(taps).data(), &geom);
        Ok(self.push(
            &[n, c, geom.ho, geom.wo],
            out,
            Op::Wave { input, taps, geom },
            &[input, taps],
        ))
    }

    // ---- normalization and pooling ----------------------------------

    /// Normalizes over axis 1 at every other position, then applies per-channel
    /// gain and shift.
    pub fn layer_norm(&mut self, input: Var, gain: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Rank {
                op: "layer_norm",
                expected: 2,
                shape: xs,
            });
        }
        let (n, c, plane) = channel_view(&xs);
        for p in [gain, shift] {
            if self.shape(p) != [c] {
                return Err(TensorError::Broadcast {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(input).data(),
            self.value(gain).data(),
            self.value(shift).data(),
            n,
            c,
            plane,
        );
        Ok(self.push(
            &xs,
            y,
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                rstd,
            },
            &[input, gain, shift],
        ))
    }

    /// [N,C,...] → [N,C] mean over trailing axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 4,
                shape: xs,
            });
        }
        let (n, c, plane) = channel_view(&xs);
        let inv = T::one() / T::of(plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(&[n, c], data, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
                Ok(self.push(&[m, n], out, Op::Matmul(a, b), &[a, b]))
            }
            _ => Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            }),
        }
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let y = kernels::softmax_forward(self.value(input).data(), outer, len, inner);
        Ok(self.push(&xs, y, Op::Softmax { input, axis }, &[input]))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`),
    /// logits shaped [N, classes].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let [n, k] = ls[..] else {
            return Err(TensorError::Rank {
                op: "cross_entropy",
                expected: 2,
                shape: ls,
            });
        };
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                op: "cross_entropy",
                label,
                classes: k,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..][..k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[label];
            for (p, &v) in probs[r * k..][..k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(TensorError::Rank {
                op: "concat",
                expected: 2,
                shape: first,
            });
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            channels += s[1];
        }
        let (n, _, plane) = channel_view(&first);
        let mut data = Vec::with_capacity(n * channels * plane);
        for ni in 0..n {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[1] * plane;
                data.extend_from_slice(&v.data()[ni * chunk..][..chunk]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        Ok(self.push(&shape, data, Op::Concat(parts.to_vec()), parts))
    }

    /// [N,C,H,W] → [N, H·W, C] row-major token sequence.
    pub fn to_tokens(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input), "to_tokens")?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(x.len());
        for ni in 0..n {
            data.extend(kernels::transpose(&x[ni * c * plane..][..c * plane], c, plane));
        }
        Ok(self.push(&[n, plane, c], data, Op::ToTokens(input), &[input]))
    }

    // ---- ray mechanism ----------------------------------------------

    /// D[i,j] = ‖O_i − C_j‖ for origins [n,2] against a fixed grid [HW,2].
    pub fn distance(&mut self, origins: Var, grid: &[[T; 2]]) -> Result<Var> {
        let os = self.shape(origins).to_vec();
        let [n, 2] = os[..] else {
            return Err(TensorError::Rank {
                op: "distance",
                expected: 2,
                shape: os,
            });
        };
        let o = self.value(origins).data();
        let m = grid.len();
        let mut d = Vec::with_capacity(n * m);
        for i in 0..n {
            for c in grid {
                let (dx, dy) = (o[2 * i] - c[0], o[2 * i + 1] - c[1]);
                d.push((dx * dx + dy * dy).sqrt());
            }
        }
        let flat = grid.iter().flat_map(|c| [c[0], c[1]]).collect();
        Ok(self.push(&[n, m], d, Op::Distance { origins, grid: flat }, &[origins]))
    }

    fn per_row(&self, rows: Var, vector: Var, op: &'static str) -> Result<(usize, usize)> {
        let rs = self.shape(rows);
        let vs = self.shape(vector);
        match (rs, vs) {
            ([n, m], [k]) if n == k => Ok((*n, *m)),
            _ => Err(TensorError::Broadcast {
                op,
                lhs: rs.to_vec(),
                rhs: vs.to_vec(),
            }),
        }
    }

    /// Normalized 2-D Gaussian PSF of radial distance with per-row width
    /// σ_i = exp(log_sigma_i): K = exp(−D²/(2σ²)) / (2πσ²).
    pub fn psf(&mut self, dist: Var, log_sigma: Var) -> Result<Var> {
        let (n, m) = self.per_row(dist, log_sigma, "psf")?;
        let d = self.value(dist).data();
        let s = self.value(log_sigma).data();
        let two_pi = T::of(2.0 * std::f64::consts::PI);
        let mut k = Vec::with_capacity(n * m);
        for i in 0..n {
            let var = (s[i] + s[i]).exp();
            let norm = T::one() / (two_pi * var);
            for &dv in &d[i * m..][..m] {
                k.push(norm * (-(dv * dv) / (var + var)).exp());
            }
        }
        Ok(self.push(&[n, m], k, Op::Psf { dist, sigma: log_sigma }, &[dist, log_sigma]))
    }

    /// Attenuated gain β·exp(−α_i·D) with α_i = exp(log_alpha_i), β shape [1].
    pub fn decay(&mut self, dist: Var, log_alpha: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.per_row(dist, log_alpha, "decay")?;
        if self.shape(beta) != [1] {
            return Err(TensorError::Broadcast {
                op: "decay",
                lhs: vec![1],
                rhs: self.shape(beta).to_vec(),
            });
        }
        let d = self.value(dist).data();
        let a = self.value(log_alpha).data();
        let b = self.value(beta).data()[0];
        let mut q = Vec::with_capacity(n * m);
        for i in 0..n {
            let alpha = a[i].exp();
            for &dv in &d[i * m..][..m] {
                q.push(b * (-alpha * dv).exp());
            }
        }
        Ok(self.push(
            &[n, m],
            q,
            Op::Decay { dist, alpha: log_alpha, beta },
            &[dist, log_alpha, beta],
        ))
    }

    /// [n, M] → [M], arithmetic mean over rows.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [n, m] = xs[..] else {
            return Err(TensorError::Rank {
                op: "mean_rows",
                expected: 2,
                shape: xs,
            });
        };
        let x = self.value(input).data();
        let inv = T::one() / T::of(n as f64);
        let data = (0..m)
            .map(|j| (0..n).map(|i| x[i * m + j]).sum::<T>() * inv)
            .collect();
        Ok(self.push(&[m], data, Op::MeanRows(input), &[input]))
    }

    /// Real part of ifft2(fft2(x) ⊙ M) per (n, c) plane, where the real mask
    /// `mask` holds H·W entries in row-major frequency order.
    pub fn spectral_modulate(&mut self, input: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [_, _, h, w] = dims4(&xs, "spectral_modulate")?;
        let ms = self.shape(mask).to_vec();
        if numel(&ms) != h * w || ms.len() > 2 || (ms.len() == 2 && ms != [h, w]) {
            return Err(TensorError::ShapeMismatch {
                op: "spectral_modulate",
                lhs: xs,
                rhs: ms,
            });
        }
        let out = spectral_apply(self.value(input).data(), self.value(mask).data(), h, w);
        Ok(self.push(&xs, out, Op::Spectral { input, mask }, &[input, mask]))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
    /// Calling it again without [`Tape::zero_grads`] adds to the buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Err(TensorError::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g)?;
            } else {
                self.backward_node(id, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[id].value;
        let val = |v: Var| self.value(v).data();
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::AddChannel(a, b) => {
                self.send(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let (n, c, plane) = channel_view(out.shape());
                    self.send(grads, *b, kernels::channel_sum(g, n, c, plane));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.send(grads, *b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::MulChannel(a, b) => {
                let (n, c, plane) = channel_view(out.shape());
                let (xa, xb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * xb[(i / plane) % c])
                        .collect();
                    self.send(grads, *a, ga);
                }
                if self.rg(*b) {
                    let prod: Vec<T> = g.iter().zip(xa).map(|(&gv, &x)| gv * x).collect();
                    self.send(grads, *b, kernels::channel_sum(&prod, n, c, plane));
                }
            }
            Op::Scale(a, f) => self.send(grads, *a, g.iter().map(|&v| v * *f).collect()),
            Op::Sum(a) => self.send(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Gelu(a) => {
                let d = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * kernels::gelu_grad(x)).collect();
                self.send(grads, *a, d);
            }
            Op::Conv2d { input, kernel, geom } => {
                if self.rg(*input) {
                    self.send(grads, *input, kernels::conv2d_backward_input(g, val(*kernel), geom));
                }
                if self.rg(*kernel) {
                    self.send(grads, *kernel, kernels::conv2d_backward_kernel(g, val(*input), geom));
                }
            }
            Op::Pointwise { input, weight, bias } => {
                let [n, c, h, w] = dims4(self.shape(*input), "pointwise_conv").unwrap();
                let cout = out.shape()[1];
                let plane = h * w;
                if self.rg(*input) {
                    let d = kernels::pointwise_backward_input(g, val(*weight), n, c, cout, plane);
                    self.send(grads, *input, d);
                }
                if self.rg(*weight) {
                    let d = kernels::pointwise_backward_weight(g, val(*input), n, c, cout, plane);
                    self.send(grads, *weight, d);
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        self.send(grads, *b, kernels::channel_sum(g, n, cout, plane));
                    }
                }
            }
            Op::Wave { input, taps, geom } => {
                if self.rg(*input) {
                    self.send(grads, *input, kernels::wave_backward_input(g, val(*taps), geom));
                }
                if self.rg(*taps) {
                    let k = self.value(*taps).numel();
                    self.send(grads, *taps, kernels::wave_backward_taps(g, val(*input), k, geom));
                }
            }
            Op::LayerNorm {
                input,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let (n, c, plane) = channel_view(out.shape());
                let (gx, ggain, gshift) =
                    kernels::layer_norm_backward(g, xhat, rstd, val(*gain), n, c, plane);
                self.send(grads, *input, gx);
                self.send(grads, *gain, ggain);
                self.send(grads, *shift, gshift);
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, plane) = channel_view(self.shape(*a));
                let inv = T::one() / T::of(plane as f64);
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                    .collect();
                self.send(grads, *a, d);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    self.send(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    self.send(grads, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let d = kernels::softmax_backward(g, out.data(), outer, len, inner);
                self.send(grads, *input, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::of(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - scale;
                }
                self.send(grads, *logits, d);
            }
            Op::Concat(parts) => {
                let (n, _, plane) = channel_view(out.shape());
                let total = out.shape()[1] * plane;
                let mut pieces: Vec<Vec<T>> = parts
                    .iter()
                    .map(|&p| Vec::with_capacity(self.value(p).numel()))
                    .collect();
                for ni in 0..n {
                    let row = &g[ni * total..][..total];
                    let mut at = 0;
                    for (piece, &p) in pieces.iter_mut().zip(parts) {
                        let chunk = self.shape(p)[1] * plane;
                        piece.extend_from_slice(&row[at..at + chunk]);
                        at += chunk;
                    }
                }
                for (piece, &p) in pieces.into_iter().zip(parts) {
                    self.send(grads, p, piece);
                }
            }
            Op::ToTokens(a) => {
                let [n, c, h, w] = dims4(self.shape(*a), "to_tokens").unwrap();
                let plane = h * w;
                let mut d = Vec::with_capacity(g.len());
                for ni in 0..n {
                    d.extend(kernels::transpose(&g[ni * plane * c..][..plane * c], plane, c));
                }
                self.send(grads, *a, d);
            }
            Op::Distance { origins, grid } => {
                let o = val(*origins);
                let dist = out.data();
                let m = grid.len() / 2;
                let n = o.len() / 2;
                let mut d = vec![T::zero(); 2 * n];
                for i in 0..n {
                    for j in 0..m {
                        let dv = dist[i * m + j];
                        // subgradient 0 at coincidence
                        if dv > T::zero() {
                            let s = g[i * m + j] / dv;
                            d[2 * i] = d[2 * i] + s * (o[2 * i] - grid[2 * j]);
                            d[2 * i + 1] = d[2 * i + 1] + s * (o[2 * i + 1] - grid[2 * j + 1]);
                        }
                    }
                }
                self.send(grads, *origins, d);
            }
            Op::Psf { dist, sigma } => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let (k, d, s) = (out.data(), val(*dist), val(*sigma));
                let mut gd = vec![T::zero(); n * m];
                let mut gs = vec![T::zero(); n];
                let two = T::of(2.0);
                for i in 0..n {
                    let inv_var = (-(s[i] + s[i])).exp();
                    for j in 0..m {
                        let idx = i * m + j;
                        let gk = g[idx] * k[idx];
                        gd[idx] = -gk * d[idx] * inv_var;
                        gs[i] = gs[i] + gk * (d[idx] * d[idx] * inv_var - two);
                    }
                }
                self.send(grads, *dist, gd);
                self.send(grads, *sigma, gs);
            }
            Op::Decay { dist, alpha, beta } => {
                let (n, m) = (out.shape()[0], out.shape()[1]);
                let (q, d, a) = (out.data(), val(*dist), val(*alpha));
                let mut gd = vec![T::zero(); n * m];
                let mut ga = vec![T::zero(); n];
                let mut gb = T::zero();
                for i in 0..n {
                    let alpha_i = a[i].exp();
                    for j in 0..m {
                        let idx = i * m + j;
                        let gq = g[idx] * q[idx];
                        gd[idx] = -gq * alpha_i;
                        ga[i] = ga[i] - gq * alpha_i * d[idx];
                        gb = gb + g[idx] * (-alpha_i * d[idx]).exp();
                    }
                }
                self.send(grads, *dist, gd);
                self.send(grads, *alpha, ga);
                self.send(grads, *beta, vec![gb]);
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a)[0];
                let inv = T::one() / T::of(n as f64);
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                self.send(grads, *a, row.repeat(n));
            }
            Op::Spectral { input, mask } => {
                let [_, _, h, w] = dims4(out.shape(), "spectral_modulate").unwrap();
                if self.rg(*input) {
                    // The map is self-adjoint: a circulant with an even real kernel.
                    self.send(grads, *input, spectral_apply(g, val(*mask), h, w));
                }
                if self.rg(*mask) {
                    self.send(grads, *mask, spectral_mask_grad(val(*input), g, h, w));
                }
            }
        }
    }
}

pub(crate) fn spectral_apply<T: Real>(x: &[T], mask: &[T], h: usize, w: usize) -> Vec<T> {
    use rayon::prelude::*;
    let plan = Plan2d::<T>::new(h, w);
    let plane = h * w;
    let mut out = x.to_vec();
    out.par_chunks_mut(plane).for_each(|re| {
        let mut im = vec![T::zero(); plane];
        plan.forward(re, &mut im);
        for ((r, i), &m) in re.iter_mut().zip(im.iter_mut()).zip(mask) {
            *r = *r * m;
            *i = *i * m;
        }
        plan.inverse(re, &mut im);
    });
    out
}

/// dL/dM[k] = Σ_planes Re(X[k]·conj(G[k])) / (HW).
fn spectral_mask_grad<T: Real>(x: &[T], g: &[T], h: usize, w: usize) -> Vec<T> {
    use rayon::prelude::*;
    let plan = Plan2d::<T>::new(h, w);
    let plane = h * w;
    let per_plane: Vec<Vec<T>> = x
        .par_chunks(plane)
        .zip(g.par_chunks(plane))
        .map(|(xp, gp)| {
            let (mut xr, mut xi) = (xp.to_vec(), vec![T::zero(); plane]);
            let (mut gr, mut gi) = (gp.to_vec(), vec![T::zero(); plane]);
            plan.forward(&mut xr, &mut xi);
            plan.forward(&mut gr, &mut gi);
            (0..plane).map(|k| xr[k] * gr[k] + xi[k] * gi[k]).collect()
        })
        .collect();
    let inv = T::one() / T::of(plane as f64);
    let mut d = vec![T::zero(); plane];
    for p in &per_plane {
        for (a, &b) in d.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    d.iter_mut().for_each(|v| *v = *v * inv);
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x_and_accumulates() {
        let mut t = Tape::<f64>::new();
        let data = [1.0, -2.0, 0.25];
        let x = t.param(Tensor::from_f64(&[3], &data).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 0.5]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0, 1.0]);
        t.zero_grads();
        assert_eq!(t.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::ones(&[3]));
        assert_eq!(t.backward(x), Err(TensorError::NonScalarLoss(vec![3])));
        let c = t.constant(Tensor::ones(&[3]));
        let s = t.sum(c);
        assert_eq!(t.backward(s), Err(TensorError::DetachedGraph));
    }

    #[test]
    fn conv_all_ones_is_nine() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = t.conv2d(x, k, Conv2dCfg::default()).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[1, 3, 4, 4]));
        let k = t.constant(Tensor::ones(&[2, 2, 3, 3]));
        let err = t.conv2d(x, k, Conv2dCfg::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
        let k = t.constant(Tensor::ones(&[2, 3, 5, 5]));
        assert!(matches!(
            t.conv2d(x, k, Conv2dCfg::default()),
            Err(TensorError::ZeroSizedOutput { .. })
        ));
    }

    #[test]
    fn identity_convs_pass_through() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = t.constant(Tensor::from_f64(&[2, 2, 3, 3], &data).unwrap());
        let k = t.constant(Tensor::ones(&[2, 1, 1, 1]));
        let depthwise = Conv2dCfg { groups: 2, ..Conv2dCfg::default() };
        let y = t.conv2d(x, k, depthwise).unwrap();
        assert_eq!(t.value(y).data(), &data[..]);
        let eye = t.constant(Tensor::from_f64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.pointwise_conv(x, eye, None).unwrap();
        assert_eq!(t.value(y).data(), &data[..]);
    }

    #[test]
    fn pointwise_sum_and_difference() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[1, 2, 2, 2]));
        let w = t.constant(Tensor::from_f64(&[2, 2, 1, 1], &[1.0, 1.0, 1.0, -1.0]).unwrap());
        let y = t.pointwise_conv(x, w, None).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let bad = t.constant(Tensor::ones(&[2, 3, 1, 1]));
        assert!(matches!(
            t.pointwise_conv(x, bad, None),
            Err(TensorError::ChannelMismatch { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        let c = t.constant(Tensor::full(&[5], 3.7));
        let y = t.softmax(c, 0).unwrap();
        assert!(t.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-12));
        assert!(matches!(t.softmax(c, 1), Err(TensorError::InvalidAxis { axis: 1, rank: 1, .. })));
    }

    #[test]
    fn layer_norm_of_constant_channels_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 4, 2, 2], 3.0));
        let gain = t.constant(Tensor::ones(&[4]));
        let shift = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, gain, shift).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }

    #[test]
    fn pooling_and_gelu_trivia() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::ones(&[1, 1, 4, 4]));
        let p = t.global_avg_pool(x).unwrap();
        assert_eq!(t.value(p).data(), &[1.0]);
        let z = t.constant(Tensor::zeros(&[3]));
        let g = t.gelu(z);
        assert_eq!(t.value(g).data(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_is_exact_or_per_channel() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::ones(&[2, 3, 2, 2]));
        let b = t.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let y = t.add(a, b).unwrap();
        assert_eq!(t.value(y).data()[4], 3.0);
        let bad = t.constant(Tensor::ones(&[2]));
        assert!(matches!(t.add(a, bad), Err(TensorError::Broadcast { .. })));
        assert!(matches!(t.mul(a, bad), Err(TensorError::Broadcast { .. })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::zeros(&[3, 7]));
        let l = t.cross_entropy(logits, &[0, 3, 6]).unwrap();
        assert!((t.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            t.cross_entropy(logits, &[0, 7, 1]),
            Err(TensorError::LabelOutOfRange { label: 7, classes: 7, .. })
        ));
        let sure = t.constant(Tensor::from_f64(&[1, 2], &[200.0, -200.0]).unwrap());
        let l = t.cross_entropy(sure, &[0]).unwrap();
        assert!(t.value(l).data()[0] < 1e-12);
    }

    #[test]
    fn distance_closed_forms() {
        let mut t = Tape::<f64>::new();
        let o = t.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 0.0]).unwrap());
        let d = t.distance(o, &[[0.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_and_tokens_layout() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::from_f64(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[1, 3, 1, 2]);
        let tok = t.to_tokens(c).unwrap();
        assert_eq!(t.shape(tok), &[1, 2, 3]);
        assert_eq!(t.value(tok).data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }
}
