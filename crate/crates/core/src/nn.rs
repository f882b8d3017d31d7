//! Network building blocks: linear layers, layer/batch normalization,
//! residual MLPs (tanh blocks) and the parameter-inference encoder stack.
//!
//! Structs own plain tensors; `bind` loads them into an [`Engine`] (as
//! trainable parameters or frozen constants) and returns a value-handle
//! mirror used by `forward`. The optimizer walks `params_mut()` in the
//! same order `bind` registers them.

use crate::engine_prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Xavier/Glorot uniform: U(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

// ── linear ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

pub struct LinearVals<V> {
    pub w: V,
    pub b: V,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Linear {
            w: xavier_uniform(rng, fan_in, fan_out, gain),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![fan_in, fan_out]),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> LinearVals<E::Val> {
        let load = |e: &mut E, t: &Tensor| {
            if trainable {
                e.param(t.clone())
            } else {
                e.constant(t.clone())
            }
        };
        LinearVals {
            w: load(e, &self.w),
            b: load(e, &self.b),
        }
    }
}

impl<V> LinearVals<V> {
    pub fn forward<E: Engine<Val = V>>(&self, e: &mut E, x: &V) -> V {
        let y = e.matmul(x, &self.w);
        e.add_bias(&y, &self.b)
    }
}

// ── layer norm ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct LayerNormVals<V> {
    pub gamma: V,
    pub beta: V,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> LayerNormVals<E::Val> {
        let load = |e: &mut E, t: &Tensor| {
            if trainable {
                e.param(t.clone())
            } else {
                e.constant(t.clone())
            }
        };
        LayerNormVals {
            gamma: load(e, &self.gamma),
            beta: load(e, &self.beta),
        }
    }
}

impl<V> LayerNormVals<V> {
    pub fn forward<E: Engine<Val = V>>(&self, e: &mut E, x: &V) -> V {
        e.layer_norm(x, &self.gamma, &self.beta)
    }
}

// ── batch norm ──────────────────────────────────────────────────────

/// Running-statistics momentum: `running = (1 - M) * running + M * batch`.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

pub struct BatchNormVals<V> {
    pub gamma: V,
    pub beta: V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; callers apply the returned stats to the running
    /// buffers via [`BatchNorm::update_running`].
    Train,
    /// Running statistics.
    Infer,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::full(vec![dim], 1.0),
        }
    }

    pub fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> BatchNormVals<E::Val> {
        let load = |e: &mut E, t: &Tensor| {
            if trainable {
                e.param(t.clone())
            } else {
                e.constant(t.clone())
            }
        };
        BatchNormVals {
            gamma: load(e, &self.gamma),
            beta: load(e, &self.beta),
        }
    }

    pub fn update_running(&mut self, batch_mean: &Tensor, batch_var: &Tensor) {
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(batch_mean.data())
        {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
        }
        for (r, &b) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(batch_var.data())
        {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
        }
    }
}

impl<V> BatchNormVals<V> {
    /// Returns the output plus batch statistics in train mode.
    pub fn forward<E: Engine<Val = V>>(
        &self,
        e: &mut E,
        layer: &BatchNorm,
        x: &V,
        mode: BnMode,
    ) -> (V, Option<(Tensor, Tensor)>) {
        match mode {
            BnMode::Train => {
                let (out, mean, var) = e.batch_norm_train(x, &self.gamma, &self.beta);
                (out, Some((mean, var)))
            }
            BnMode::Infer => {
                let out = e.batch_norm_infer(
                    x,
                    &self.gamma,
                    &self.beta,
                    &layer.running_mean,
                    &layer.running_var,
                );
                (out, None)
            }
        }
    }
}

// ── residual MLP ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub output_dim: usize,
    pub init_gain: f64,
}

/// One pre-norm residual block: `x + tanh(W2 tanh(W1 LN(x) + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub norm: LayerNorm,
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct ResidualBlockVals<V> {
    norm: LayerNormVals<V>,
    lin1: LinearVals<V>,
    lin2: LinearVals<V>,
}

impl<V> ResidualBlockVals<V> {
    fn forward<E: Engine<Val = V>>(&self, e: &mut E, x: &V) -> V {
        let h = self.norm.forward(e, x);
        let h = self.lin1.forward(e, &h);
        let h = e.tanh(&h);
        let h = self.lin2.forward(e, &h);
        let h = e.tanh(&h);
        e.add(x, &h)
    }
}

/// MLP with a linear input projection, `num_blocks` residual blocks, a final
/// layer norm, and a linear output projection.
#[derive(Debug, Clone)]
pub struct ResidualMlp {
    pub config: MlpConfig,
    pub input_proj: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub final_norm: LayerNorm,
    pub output_proj: Linear,
}

pub struct ResidualMlpVals<V> {
    input_proj: LinearVals<V>,
    blocks: Vec<ResidualBlockVals<V>>,
    final_norm: LayerNormVals<V>,
    output_proj: LinearVals<V>,
}

impl ResidualMlp {
    pub fn new(config: MlpConfig, rng: &mut impl Rng) -> Self {
        let g = config.init_gain;
        let h = config.hidden_dim;
        let input_proj = Linear::new(rng, config.input_dim, h, g);
        let blocks = (0..config.num_blocks)
            .map(|_| ResidualBlock {
                norm: LayerNorm::new(h),
                lin1: Linear::new(rng, h, h, g),
                lin2: Linear::new(rng, h, h, g),
            })
            .collect();
        let final_norm = LayerNorm::new(h);
        let output_proj = Linear::new(rng, h, config.output_dim, g);
        ResidualMlp {
            config,
            input_proj,
            blocks,
            final_norm,
            output_proj,
        }
    }

    /// All linear weights and biases zero (normalization scales remain 1).
    pub fn zero_weights(&mut self) {
        let zero = |l: &mut Linear| {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        };
        zero(&mut self.input_proj);
        for b in &mut self.blocks {
            zero(&mut b.lin1);
            zero(&mut b.lin2);
        }
        zero(&mut self.output_proj);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_proj.w, &self.input_proj.b];
        for b in &self.blocks {
            out.push(&b.norm.gamma);
            out.push(&b.norm.beta);
            out.push(&b.lin1.w);
            out.push(&b.lin1.b);
            out.push(&b.lin2.w);
            out.push(&b.lin2.b);
        }
        out.push(&self.final_norm.gamma);
        out.push(&self.final_norm.beta);
        out.push(&self.output_proj.w);
        out.push(&self.output_proj.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input_proj.w, &mut self.input_proj.b];
        for b in &mut self.blocks {
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
            out.push(&mut b.lin1.w);
            out.push(&mut b.lin1.b);
            out.push(&mut b.lin2.w);
            out.push(&mut b.lin2.b);
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out.push(&mut self.output_proj.w);
        out.push(&mut self.output_proj.b);
        out
    }

    /// Registration order matches `params()`.
    pub fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> ResidualMlpVals<E::Val> {
        let input_proj = self.input_proj.bind(e, trainable);
        let blocks = self
            .blocks
            .iter()
            .map(|b| ResidualBlockVals {
                norm: b.norm.bind(e, trainable),
                lin1: b.lin1.bind(e, trainable),
                lin2: b.lin2.bind(e, trainable),
            })
            .collect();
        let final_norm = self.final_norm.bind(e, trainable);
        let output_proj = self.output_proj.bind(e, trainable);
        ResidualMlpVals {
            input_proj,
            blocks,
            final_norm,
            output_proj,
        }
    }

    /// Convenience forward through a fresh evaluation engine.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut e = EvalEngine::new();
        let vals = self.bind(&mut e, false);
        let xv = e.constant(x.clone());
        vals.forward(&mut e, &xv)
    }
}

impl<V> ResidualMlpVals<V> {
    pub fn forward<E: Engine<Val = V>>(&self, e: &mut E, x: &V) -> V {
        let mut h = self.input_proj.forward(e, x);
        for b in &self.blocks {
            h = b.forward(e, &h);
        }
        let h = self.final_norm.forward(e, &h);
        self.output_proj.forward(e, &h)
    }
}

// ── encoder ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Window length in grid points consumed by the encoder.
    pub window_len: usize,
    /// Per-step feature count (state channels + intervention channels).
    pub feat_dim: usize,
    pub hidden_dim: usize,
    /// Number of inferred parameters.
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.window_len * self.feat_dim
    }
}

/// Fully connected stack with batch normalization and ReLU:
/// BN → (in→H, BN, ReLU) → 2×(H→H, BN, ReLU) → (H→H/2, BN, ReLU) → (H/2→out).
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub config: EncoderConfig,
    pub input_norm: BatchNorm,
    pub hidden: Vec<(Linear, BatchNorm)>,
    pub output: Linear,
}

pub struct EncoderVals<V> {
    input_norm: BatchNormVals<V>,
    hidden: Vec<(LinearVals<V>, BatchNormVals<V>)>,
    output: LinearVals<V>,
}

impl EncoderNet {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.input_dim();
        let h = config.hidden_dim;
        let dims = [(d, h), (h, h), (h, h), (h, h / 2)];
        let hidden = dims
            .iter()
            .map(|&(i, o)| (Linear::new(rng, i, o, 1.0), BatchNorm::new(o)))
            .collect();
        let output = Linear::new(rng, h / 2, config.output_dim, 1.0);
        EncoderNet {
            input_norm: BatchNorm::new(d),
            config,
            hidden,
            output,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_norm.gamma, &self.input_norm.beta];
        for (l, bn) in &self.hidden {
            out.push(&l.w);
            out.push(&l.b);
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.push(&self.output.w);
        out.push(&self.output.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.input_norm.gamma, &mut self.input_norm.beta];
        for (l, bn) in &mut self.hidden {
            out.push(&mut l.w);
            out.push(&mut l.b);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out
    }

    pub fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> EncoderVals<E::Val> {
        EncoderVals {
            input_norm: self.input_norm.bind(e, trainable),
            hidden: self
                .hidden
                .iter()
                .map(|(l, bn)| (l.bind(e, trainable), bn.bind(e, trainable)))
                .collect(),
            output: self.output.bind(e, trainable),
        }
    }

    /// Apply recorded batch statistics (one pair per BN layer, input first)
    /// to the running buffers.
    pub fn update_running(&mut self, stats: &[(Tensor, Tensor)]) {
        assert_eq!(stats.len(), 1 + self.hidden.len());
        self.input_norm.update_running(&stats[0].0, &stats[0].1);
        for ((_, bn), s) in self.hidden.iter_mut().zip(&stats[1..]) {
            bn.update_running(&s.0, &s.1);
        }
    }

    /// Inference on a batch of flattened windows `[B, window_len*feat_dim]`,
    /// using running statistics.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut e = EvalEngine::new();
        let vals = self.bind(&mut e, false);
        let xv = e.constant(x.clone());
        let (out, _) = vals.forward(&mut e, self, &xv, BnMode::Infer);
        out
    }
}

impl<V> EncoderVals<V> {
    pub fn forward<E: Engine<Val = V>>(
        &self,
        e: &mut E,
        layer: &EncoderNet,
        x: &V,
        mode: BnMode,
    ) -> (V, Vec<(Tensor, Tensor)>) {
        let mut stats = Vec::new();
        let (mut h, s) = self.input_norm.forward(e, &layer.input_norm, x, mode);
        if let Some(s) = s {
            stats.push(s);
        }
        for ((lin, bn), (_, bn_layer)) in self.hidden.iter().zip(layer.hidden.iter()) {
            let z = lin.forward(e, &h);
            let (z, s) = bn.forward(e, bn_layer, &z, mode);
            if let Some(s) = s {
                stats.push(s);
            }
            h = e.relu(&z);
        }
        (self.output.forward(e, &h), stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_cfg() -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden_dim: 8,
            num_blocks: 2,
            output_dim: 3,
            init_gain: 0.5,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut net = ResidualMlp::new(small_cfg(), &mut rng);
        net.zero_weights();
        let x = Tensor::matrix(4, 2, vec![0.3; 8]);
        let y = net.forward_eval(&x);
        assert_eq!(y.shape(), &[4, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_blocks_are_exact_identities() {
        // A net with r zero-weight blocks equals the same net with the blocks
        // removed: skip connections pass the hidden state through untouched.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut net = ResidualMlp::new(small_cfg(), &mut rng);
        for b in &mut net.blocks {
            b.lin1.w.data_mut().fill(0.0);
            b.lin1.b.data_mut().fill(0.0);
            b.lin2.w.data_mut().fill(0.0);
            b.lin2.b.data_mut().fill(0.0);
        }
        let mut stripped = net.clone();
        stripped.blocks.clear();
        stripped.config.num_blocks = 0;

        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 1.2, 0.0, -2.0, 0.7]);
        assert_eq!(net.forward_eval(&x).data(), stripped.forward_eval(&x).data());
    }

    #[test]
    fn one_block_forward_matches_hand_rolled_algebra() {
        // Independent re-implementation of the layer algebra for a fixed-seed
        // 1-block net on x = [1, 0].
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dim: 4,
            num_blocks: 1,
            output_dim: 1,
            init_gain: 1.0,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let net = ResidualMlp::new(cfg, &mut rng);
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let got = net.forward_eval(&x).item();

        let matvec = |l: &Linear, v: &[f64]| -> Vec<f64> {
            let (fi, fo) = (l.in_dim(), l.out_dim());
            (0..fo)
                .map(|j| {
                    (0..fi).map(|i| v[i] * l.w.data()[i * fo + j]).sum::<f64>() + l.b.data()[j]
                })
                .collect()
        };
        let layernorm = |ln: &LayerNorm, v: &[f64]| -> Vec<f64> {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + crate::tape::LAYER_NORM_EPS).sqrt();
            v.iter()
                .enumerate()
                .map(|(i, a)| (a - mean) * inv * ln.gamma.data()[i] + ln.beta.data()[i])
                .collect()
        };

        let h0 = matvec(&net.input_proj, &[1.0, 0.0]);
        let b = &net.blocks[0];
        let z = layernorm(&b.norm, &h0);
        let z: Vec<f64> = matvec(&b.lin1, &z).iter().map(|v| v.tanh()).collect();
        let z: Vec<f64> = matvec(&b.lin2, &z).iter().map(|v| v.tanh()).collect();
        let h1: Vec<f64> = h0.iter().zip(&z).map(|(a, b)| a + b).collect();
        let hf = layernorm(&net.final_norm, &h1);
        let expect = matvec(&net.output_proj, &hf)[0];

        assert!(
            (got - expect).abs() <= 1e-14 * expect.abs().max(1.0),
            "got {got}, expect {expect}"
        );
    }

    #[test]
    fn encoder_zero_weights_output_is_bias() {
        let cfg = EncoderConfig {
            window_len: 5,
            feat_dim: 3,
            hidden_dim: 8,
            output_dim: 2,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut net = EncoderNet::new(cfg, &mut rng);
        for (l, _) in &mut net.hidden {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        net.output.w.data_mut().fill(0.0);
        net.output.b.data_mut().fill(0.0);
        net.output.b.data_mut()[0] = 1.5;
        net.output.b.data_mut()[1] = -0.5;

        let x = Tensor::matrix(2, 15, (0..30).map(|i| i as f64).collect());
        let y = net.infer(&x);
        assert_eq!(y.data(), &[1.5, -0.5, 1.5, -0.5]);
    }

    #[test]
    fn encoder_rows_are_independent_in_inference() {
        // Two identical windows in one batch produce identical outputs.
        let cfg = EncoderConfig {
            window_len: 4,
            feat_dim: 3,
            hidden_dim: 8,
            output_dim: 2,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let net = EncoderNet::new(cfg, &mut rng);
        let row: Vec<f64> = (0..12).map(|i| (i as f64) * 0.2 - 1.0).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let y = net.infer(&Tensor::matrix(2, 12, data));
        assert_eq!(&y.data()[0..2], &y.data()[2..4]);
    }

    #[test]
    fn params_and_bind_order_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let net = ResidualMlp::new(small_cfg(), &mut rng);
        let mut tape = Tape::new();
        let _ = net.bind(&mut tape, true);
        assert_eq!(tape.num_params(), net.params().len());

        let enc = EncoderNet::new(
            EncoderConfig {
                window_len: 4,
                feat_dim: 3,
                hidden_dim: 8,
                output_dim: 2,
            },
            &mut rng,
        );
        let mut tape = Tape::new();
        let _ = enc.bind(&mut tape, true);
        assert_eq!(tape.num_params(), enc.params().len());
    }
}
