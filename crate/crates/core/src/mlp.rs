//! Dense feed-forward network: forward pass, reverse-mode gradients,
//! inverted dropout, and the MSE/MAE losses.
//!
//! Generic over the scalar so training runs in f32 while the gradient
//! checker exercises an f64 shadow path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type for network math.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Fixed-order dot product with eight independent accumulators; the
/// reduction order never depends on data or thread count.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// Samples packed per panel column.
const TILE_B: usize = 8;
/// Weight rows consumed per micro-kernel pass.
const TILE_O: usize = 4;

/// Interleaves `rows` consecutive input rows starting at `b0` into
/// panel[i * TILE_B + t] = input[(b0 + t) * in_dim + i]; unused lanes
/// are zeroed so the kernels never branch on the batch tail.
fn pack_panel<S: Scalar>(input: &[S], b0: usize, rows: usize, in_dim: usize, panel: &mut [S]) {
    debug_assert_eq!(panel.len(), in_dim * TILE_B);
    for i in 0..in_dim {
        let base = i * TILE_B;
        for t in 0..TILE_B {
            panel[base + t] =
                if t < rows { input[(b0 + t) * in_dim + i] } else { S::zero() };
        }
    }
}

/// Four weight rows against one packed panel: sixteen independent
/// accumulator lanes keep the multiply pipeline full.
#[inline]
fn micro_4x8<S: Scalar>(w: &[S], in_dim: usize, panel: &[S], acc: &mut [[S; TILE_B]; TILE_O]) {
    let (w0, rest) = w.split_at(in_dim);
    let (w1, rest) = rest.split_at(in_dim);
    let (w2, w3) = rest.split_at(in_dim);
    for (i, p) in panel.chunks_exact(TILE_B).enumerate() {
        let p: &[S; TILE_B] = p.try_into().unwrap();
        let c = [w0[i], w1[i], w2[i], w3[i]];
        for r in 0..TILE_O {
            for t in 0..TILE_B {
                acc[r][t] = acc[r][t] + c[r] * p[t];
            }
        }
    }
}

#[inline]
fn micro_1x8<S: Scalar>(w: &[S], panel: &[S], acc: &mut [S; TILE_B]) {
    for (&c, p) in w.iter().zip(panel.chunks_exact(TILE_B)) {
        let p: &[S; TILE_B] = p.try_into().unwrap();
        for t in 0..TILE_B {
            acc[t] = acc[t] + c * p[t];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => z.max(S::zero()),
            Activation::Sigmoid => S::one() / (S::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    fn derivative_from_output<S: Scalar>(self, a: S) -> S {
        match self {
            Activation::Relu => {
                if a > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Sigmoid => a * (S::one() - a),
            Activation::Tanh => S::one() - a * a,
            Activation::Linear => S::one(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
}

#[derive(Debug, Clone)]
pub struct Layer<S: Scalar> {
    /// out_dim x in_dim, row-major.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MlpNet<S: Scalar> {
    pub layers: Vec<Layer<S>>,
    /// Applied to the input of the final layer during training.
    pub dropout_rate: f64,
}

/// Per-layer parameter gradients, mirroring the layer layout.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    pub dw: Vec<Vec<S>>,
    pub db: Vec<Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &MlpNet<S>) -> Self {
        Gradients {
            dw: net.layers.iter().map(|l| vec![S::zero(); l.weights.len()]).collect(),
            db: net.layers.iter().map(|l| vec![S::zero(); l.bias.len()]).collect(),
        }
    }
}

/// Bernoulli keep-mask over the final layer's input, one entry per
/// (batch row, feature), with inverted scaling baked in at apply time.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, entries: usize, rate: f64) -> Self {
        let keep = (0..entries).map(|_| rng.gen::<f64>() >= rate).collect();
        DropoutMask { keep, rate }
    }

    pub fn keep_all(entries: usize) -> Self {
        DropoutMask { keep: vec![true; entries], rate: 0.0 }
    }

    fn scale<S: Scalar>(&self) -> S {
        S::from_f64(1.0 / (1.0 - self.rate))
    }
}

/// Forward-pass cache consumed by the backward pass.
pub struct ForwardCache<S: Scalar> {
    /// activations[0] is the input batch; activations[l] the output of
    /// layer l-1.
    activations: Vec<Vec<S>>,
    /// Final-layer input after the dropout mask, if one was applied.
    dropped: Option<Vec<S>>,
    batch: usize,
}

impl<S: Scalar> MlpNet<S> {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Same weights at another precision.
    pub fn convert<T: Scalar>(&self) -> MlpNet<T> {
        MlpNet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: l.weights.iter().map(|&w| T::from_f64(w.to_f64())).collect(),
                    bias: l.bias.iter().map(|&b| T::from_f64(b.to_f64())).collect(),
                    activation: l.activation,
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                })
                .collect(),
            dropout_rate: self.dropout_rate,
        }
    }

    fn check_batch(&self, input: &[S]) -> Result<usize> {
        let in_dim = self.input_dim();
        if in_dim == 0 || input.len() % in_dim != 0 {
            return Err(Error::Train(format!(
                "batch of {} values is not a multiple of input dim {in_dim}",
                input.len()
            )));
        }
        Ok(input.len() / in_dim)
    }

    /// Blocked matrix product: samples are packed eight at a time into
    /// an interleaved panel and weight rows are consumed four at a
    /// time, keeping the weight row in registers while the panel sits
    /// in close cache. Accumulation order is fixed, so results do not
    /// depend on batch splitting beyond ordinary per-call rounding.
    fn layer_forward(layer: &Layer<S>, input: &[S], batch: usize, out: &mut Vec<S>) {
        let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
        out.clear();
        out.resize(batch * out_dim, S::zero());
        let mut panel = vec![S::zero(); in_dim * TILE_B];
        let mut b0 = 0;
        while b0 < batch {
            let rows = (batch - b0).min(TILE_B);
            pack_panel(input, b0, rows, in_dim, &mut panel);
            let mut o0 = 0;
            while o0 < out_dim {
                let cols = (out_dim - o0).min(TILE_O);
                let mut acc = [[S::zero(); TILE_B]; TILE_O];
                if cols == TILE_O {
                    micro_4x8(&layer.weights[o0 * in_dim..(o0 + TILE_O) * in_dim], in_dim, &panel, &mut acc);
                } else {
                    for r in 0..cols {
                        micro_1x8(
                            &layer.weights[(o0 + r) * in_dim..(o0 + r + 1) * in_dim],
                            &panel,
                            &mut acc[r],
                        );
                    }
                }
                for r in 0..cols {
                    let bias = layer.bias[o0 + r];
                    for t in 0..rows {
                        out[(b0 + t) * out_dim + o0 + r] = layer.activation.apply(acc[r][t] + bias);
                    }
                }
                o0 += cols;
            }
            b0 += TILE_B;
        }
    }

    /// Inference forward pass; dropout inactive.
    pub fn forward_inference(&self, input: &[S]) -> Result<Vec<S>> {
        let batch = self.check_batch(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            Self::layer_forward(layer, &cur, batch, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Training forward pass with an explicit dropout mask so callers
    /// (and the gradient checker) control the randomness.
    pub fn forward_train(&self, input: &[S], mask: &DropoutMask) -> Result<(Vec<S>, ForwardCache<S>)> {
        let batch = self.check_batch(input)?;
        let last = self.layers.len() - 1;
        let penultimate_dim = self.layers[last].in_dim;
        if mask.keep.len() != batch * penultimate_dim {
            return Err(Error::Train(format!(
                "dropout mask has {} entries, expected {} x {penultimate_dim}",
                mask.keep.len(),
                batch
            )));
        }

        let mut activations: Vec<Vec<S>> = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut dropped = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let src: &[S] = if l == last {
                let scale: S = mask.scale();
                let pre = activations.last().unwrap();
                let d: Vec<S> = pre
                    .iter()
                    .zip(&mask.keep)
                    .map(|(&a, &k)| if k { a * scale } else { S::zero() })
                    .collect();
                dropped = Some(d);
                dropped.as_ref().unwrap()
            } else {
                activations.last().unwrap()
            };
            let mut out = Vec::new();
            Self::layer_forward(layer, src, batch, &mut out);
            activations.push(out);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations, dropped, batch }))
    }

    /// Loss and parameter gradients for one batch, reusing the cache
    /// from the paired training forward pass.
    pub fn loss_and_grad(
        &self,
        cache: &ForwardCache<S>,
        targets: &[S],
        loss: LossKind,
        mask: &DropoutMask,
    ) -> Result<(f64, Gradients<S>)> {
        let batch = cache.batch;
        let out_dim = self.output_dim();
        if targets.len() != batch * out_dim {
            return Err(Error::Train(format!(
                "targets hold {} values, expected {batch} x {out_dim}",
                targets.len()
            )));
        }
        let output = cache.activations.last().unwrap();
        let denom = S::from_f64((batch * out_dim) as f64);

        let mut loss_acc = 0.0f64;
        let mut delta: Vec<S> = Vec::with_capacity(batch * out_dim);
        for (&y, &t) in output.iter().zip(targets) {
            let e = y - t;
            match loss {
                LossKind::Mse => {
                    loss_acc += e.to_f64() * e.to_f64();
                    delta.push(S::from_f64(2.0) * e / denom);
                }
                LossKind::Mae => {
                    loss_acc += e.to_f64().abs();
                    let sign = if e > S::zero() {
                        S::one()
                    } else if e < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    };
                    delta.push(sign / denom);
                }
            }
        }
        let loss_value = loss_acc / (batch * out_dim) as f64;

        let mut grads = Gradients::zeros_like(self);
        let last = self.layers.len() - 1;

        // delta currently holds dL/dy at the output; walk layers in
        // reverse, converting to dL/dz, accumulating dw/db, and pushing
        // dL/da to the previous layer.
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_out = &cache.activations[l + 1];
            for (d, &a) in delta.iter_mut().zip(a_out) {
                *d = *d * layer.activation.derivative_from_output(a);
            }

            let input: &[S] = if l == last {
                cache.dropped.as_ref().expect("training cache holds the dropped input")
            } else {
                &cache.activations[l]
            };

            // Loop order keeps the written row cache-resident across
            // the whole batch; per-element accumulation still runs in
            // ascending sample order.
            let dw = &mut grads.dw[l];
            let db = &mut grads.db[l];
            for o in 0..layer.out_dim {
                let dw_row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for b in 0..batch {
                    let d = delta[b * layer.out_dim + o];
                    axpy(d, &input[b * layer.in_dim..(b + 1) * layer.in_dim], dw_row);
                    db[o] += d;
                }
            }

            if l > 0 {
                // Samples in tiles of TILE_B so each weight row loads
                // once per tile instead of once per sample.
                let mut prev = vec![S::zero(); batch * layer.in_dim];
                for b0 in (0..batch).step_by(TILE_B) {
                    let rows = (batch - b0).min(TILE_B);
                    for o in 0..layer.out_dim {
                        let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for t in 0..rows {
                            let b = b0 + t;
                            axpy(
                                delta[b * layer.out_dim + o],
                                w,
                                &mut prev[b * layer.in_dim..(b + 1) * layer.in_dim],
                            );
                        }
                    }
                }
                if l == last {
                    let scale: S = mask.scale();
                    for (p, &k) in prev.iter_mut().zip(&mask.keep) {
                        *p = if k { *p * scale } else { S::zero() };
                    }
                }
                delta = prev;
            }
        }

        Ok((loss_value, grads))
    }

    /// Mean loss without gradients; dropout inactive.
    pub fn evaluate_loss(&self, input: &[S], targets: &[S], loss: LossKind) -> Result<f64> {
        let output = self.forward_inference(input)?;
        if targets.len() != output.len() {
            return Err(Error::Train(format!(
                "targets hold {} values, outputs hold {}",
                targets.len(),
                output.len()
            )));
        }
        let mut acc = 0.0f64;
        for (&y, &t) in output.iter().zip(targets) {
            let e = y.to_f64() - t.to_f64();
            acc += match loss {
                LossKind::Mse => e * e,
                LossKind::Mae => e.abs(),
            };
        }
        Ok(acc / output.len() as f64)
    }
}

/// Hidden layer widths of the single-voxel architecture.
pub fn voxel_preset_dims(n: usize, m: usize) -> Vec<usize> {
    vec![n, 512, 512, 512, 256, 256, m]
}

/// Hidden layer widths of the 27-voxel neighborhood architecture.
pub fn neighborhood_preset_dims(n: usize, m: usize) -> Vec<usize> {
    vec![27 * n, 2048, 1024, 1024, 512, 512, m]
}

/// Uniform init with bound sqrt(6 / fan_in), zero biases; weights are
/// drawn in f64 so models at different precisions share values.
pub fn init_model<S: Scalar, R: Rng + ?Sized>(
    layer_dims: &[usize],
    hidden_activation: Activation,
    output_activation: Activation,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<MlpNet<S>> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!("need at least 2 layer dims, got {}", layer_dims.len())));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("zero layer width in {layer_dims:?}")));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let count = layer_dims.len() - 1;
    let mut layers = Vec::with_capacity(count);
    for l in 0..count {
        let in_dim = layer_dims[l];
        let out_dim = layer_dims[l + 1];
        let bound = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| S::from_f64(bound * (2.0 * rng.gen::<f64>() - 1.0)))
            .collect();
        layers.push(Layer {
            weights,
            bias: vec![S::zero(); out_dim],
            activation: if l == count - 1 { output_activation } else { hidden_activation },
            in_dim,
            out_dim,
        });
    }
    Ok(MlpNet { layers, dropout_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, output: Activation) -> MlpNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_model(&[5, 7, 6, 4], Activation::Relu, output, 0.2, &mut rng).unwrap()
    }

    #[test]
    fn blocked_forward_matches_per_sample_reference() {
        // Dims force panel and weight-row tails (batch 11 over tiles
        // of 8, widths not multiples of 4).
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net: MlpNet<f64> =
            init_model(&[13, 29, 17], Activation::Tanh, Activation::Linear, 0.0, &mut rng).unwrap();
        let batch = 11;
        let input: Vec<f64> = (0..batch * 13).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let fast = net.forward_inference(&input).unwrap();

        let mut cur = input.clone();
        for layer in &net.layers {
            let mut next = Vec::with_capacity(batch * layer.out_dim);
            for b in 0..batch {
                let x = &cur[b * layer.in_dim..(b + 1) * layer.in_dim];
                for o in 0..layer.out_dim {
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    next.push(layer.activation.apply(dot(w, x) + layer.bias[o]));
                }
            }
            cur = next;
        }
        assert_eq!(fast.len(), cur.len());
        for (a, b) in fast.iter().zip(&cur) {
            assert_relative_eq!(a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a: MlpNet<f32> =
            init_model(&[10, 8, 3], Activation::Relu, Activation::Sigmoid, 0.2, &mut r1).unwrap();
        let b: MlpNet<f32> =
            init_model(&[10, 8, 3], Activation::Relu, Activation::Sigmoid, 0.2, &mut r2).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weights, lb.weights);
            assert!(la.bias.iter().all(|&v| v == 0.0));
            let bound = (6.0 / la.in_dim as f64).sqrt() as f32;
            assert!(la.weights.iter().all(|w| w.abs() <= bound));
        }
        assert_eq!(a.layer_dims(), vec![10, 8, 3]);
    }

    #[test]
    fn preset_dims_match_architecture() {
        assert_eq!(voxel_preset_dims(150, 362), vec![150, 512, 512, 512, 256, 256, 362]);
        assert_eq!(
            neighborhood_preset_dims(150, 362),
            vec![4050, 2048, 1024, 1024, 512, 512, 362]
        );
    }

    #[test]
    fn zero_weights_sigmoid_outputs_half() {
        let mut net = small_net(2, Activation::Sigmoid);
        for l in &mut net.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let out = net.forward_inference(&[0.3; 10]).unwrap();
        assert_eq!(out.len(), 8);
        for v in out {
            assert_relative_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn output_ranges_follow_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let sig = small_net(4, Activation::Sigmoid);
        for v in sig.forward_inference(&input).unwrap() {
            assert!(v > 0.0 && v < 1.0);
        }
        let tanh = small_net(4, Activation::Tanh);
        for v in tanh.forward_inference(&input).unwrap() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn rows_independent_of_batch_packing() {
        let net = small_net(5, Activation::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<f64> = (0..20).map(|_| rng.gen()).collect();
        let whole = net.forward_inference(&batch).unwrap();
        for b in 0..4 {
            let row = net.forward_inference(&batch[b * 5..(b + 1) * 5]).unwrap();
            assert_eq!(row, whole[b * 4..(b + 1) * 4].to_vec());
        }
    }

    #[test]
    fn zero_dropout_train_equals_inference() {
        let mut net = small_net(7, Activation::Sigmoid);
        net.dropout_rate = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input: Vec<f64> = (0..15).map(|_| rng.gen()).collect();
        let mask = DropoutMask::keep_all(3 * net.layers.last().unwrap().in_dim);
        let (train_out, _) = net.forward_train(&input, &mask).unwrap();
        let infer_out = net.forward_inference(&input).unwrap();
        assert_eq!(train_out, infer_out);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Inverted dropout preserves the expectation of the final
        // layer's pre-activation, so the contract is exact only for a
        // linear output; a nonlinearity would add a Jensen gap.
        let net = small_net(9, Activation::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let dim = net.layers.last().unwrap().in_dim;
        let reference = net.forward_inference(&input).unwrap();
        let mut mean = vec![0.0f64; reference.len()];
        let passes = 10_000;
        for _ in 0..passes {
            let mask = DropoutMask::sample(&mut rng, dim, net.dropout_rate);
            let (out, _) = net.forward_train(&input, &mask).unwrap();
            for (m, o) in mean.iter_mut().zip(out) {
                *m += o / passes as f64;
            }
        }
        for (m, r) in mean.iter().zip(&reference) {
            assert!((m - r).abs() / r.abs().max(1e-6) < 0.02, "mean {m} vs reference {r}");
        }
    }

    #[test]
    fn perfect_targets_give_zero_mse_gradients() {
        let net = small_net(11, Activation::Sigmoid);
        let input = vec![0.25; 10];
        let mask = DropoutMask::keep_all(2 * net.layers.last().unwrap().in_dim);
        let (out, cache) = net.forward_train(&input, &mask).unwrap();
        let (loss, grads) = net.loss_and_grad(&cache, &out, LossKind::Mse, &mask).unwrap();
        assert_eq!(loss, 0.0);
        for layer in &grads.dw {
            assert!(layer.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn single_linear_layer_matches_closed_form() {
        // One linear layer, one sample: dL/dw = 2 (w.x - y) x / out.
        let net = MlpNet {
            layers: vec![Layer {
                weights: vec![0.5, -1.0, 2.0],
                bias: vec![0.1],
                activation: Activation::Linear,
                in_dim: 3,
                out_dim: 1,
            }],
            dropout_rate: 0.0,
        };
        let x = [1.5, -0.5, 0.25];
        let y = 0.7;
        let mask = DropoutMask::keep_all(3);
        let (out, cache) = net.forward_train(&x, &mask).unwrap();
        let pred = 0.5 * 1.5 + 1.0 * 0.5 + 2.0 * 0.25 + 0.1;
        assert_relative_eq!(out[0], pred, epsilon = 1e-12);
        let (_, grads) = net.loss_and_grad(&cache, &[y], LossKind::Mse, &mask).unwrap();
        let err = pred - y;
        for (i, &xi) in x.iter().enumerate() {
            assert_relative_eq!(grads.dw[0][i], 2.0 * err * xi, epsilon = 1e-12);
        }
        assert_relative_eq!(grads.db[0][0], 2.0 * err, epsilon = 1e-12);
    }

    /// Central finite differences over every parameter, double
    /// precision, fixed dropout mask.
    fn finite_difference_check(output: Activation, loss: LossKind, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net: MlpNet<f64> =
            init_model(&[4, 6, 5, 3], Activation::Relu, output, 0.2, &mut rng).unwrap();
        let batch = 3;
        let input: Vec<f64> = (0..batch * 4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let targets: Vec<f64> = (0..batch * 3).map(|_| rng.gen()).collect();
        let mask = DropoutMask::sample(&mut rng, batch * net.layers.last().unwrap().in_dim, 0.2);

        let (_, cache) = net.forward_train(&input, &mask).unwrap();
        let (_, grads) = net.loss_and_grad(&cache, &targets, loss, &mask).unwrap();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let layer_count = net.layers.len();
        for l in 0..layer_count {
            for slot in 0..net.layers[l].weights.len() + net.layers[l].bias.len() {
                let orig = if slot < net.layers[l].weights.len() {
                    net.layers[l].weights[slot]
                } else {
                    net.layers[l].bias[slot - net.layers[l].weights.len()]
                };
                let eval = |value: f64, net: &mut MlpNet<f64>| -> f64 {
                    if slot < net.layers[l].weights.len() {
                        net.layers[l].weights[slot] = value;
                    } else {
                        let s = slot - net.layers[l].weights.len();
                        net.layers[l].bias[s] = value;
                    }
                    let (out, _) = net.forward_train(&input, &mask).unwrap();
                    let denom = out.len() as f64;
                    out.iter()
                        .zip(&targets)
                        .map(|(&y, &t)| match loss {
                            LossKind::Mse => (y - t) * (y - t),
                            LossKind::Mae => (y - t).abs(),
                        })
                        .sum::<f64>()
                        / denom
                };
                let plus = eval(orig + h, &mut net);
                let minus = eval(orig - h, &mut net);
                eval(orig, &mut net);
                let fd = (plus - minus) / (2.0 * h);
                let analytic = if slot < grads.dw[l].len() {
                    grads.dw[l][slot]
                } else {
                    grads.db[l][slot - grads.dw[l].len()]
                };
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, &output) in [Activation::Sigmoid, Activation::Tanh].iter().enumerate() {
            for (j, &loss) in [LossKind::Mse, LossKind::Mae].iter().enumerate() {
                let worst = finite_difference_check(output, loss, 100 + (i * 2 + j) as u64);
                assert!(worst < 1e-5, "max relative error {worst} for {output:?}/{loss:?}");
            }
        }
    }

    #[test]
    fn shape_mismatches_error() {
        let net = small_net(12, Activation::Sigmoid);
        assert!(net.forward_inference(&[0.0; 7]).is_err());
        let mask = DropoutMask::keep_all(1);
        assert!(net.forward_train(&[0.0; 5], &mask).is_err(), "undersized mask");
    }
}
