//! Convolutional artist classifier used as a feature extractor.
//!
//! Architecture: five blocks of {3x3 same-padding conv, ReLU, 2x2 max-pool},
//! global average pooling over the remaining spatial map, a fully-connected
//! hidden layer of width 256 with ReLU (the deep audio feature), and a
//! linear output layer. Training is mini-batch SGD with momentum 0.9 on the
//! mean cross-entropy; everything runs in f64 with hand-written
//! backpropagation, verified against central finite differences.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::dsp::{log_mel_spectrogram, AudioClip, DspConfig, MelSpectrogram, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tvspace::{length_normalize, EmbeddingKind, EmbeddingVector};

/// Width of the fully-connected hidden layer; its post-ReLU activation is
/// the deep audio feature.
pub const HIDDEN_WIDTH: usize = 256;

/// Number of conv/pool blocks.
pub const N_CONV_LAYERS: usize = 5;

const MOMENTUM: f64 = 0.9;

/// Seconds per analysis segment and hop when embedding whole clips.
pub const SEGMENT_SECONDS: f64 = 3.0;
pub const SEGMENT_HOP_SECONDS: f64 = 1.5;

/// Network and training options.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Input height (mel bins) and width (frames); both divisible by 32.
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of the five conv blocks.
    pub channels: [usize; N_CONV_LAYERS],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Standardize each input to zero mean / unit variance before the first
    /// conv layer; keeps training stable regardless of the log-power scale.
    pub standardize_input: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_h: 128,
            input_w: 128,
            channels: [16, 32, 64, 128, 256],
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            standardize_input: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_h % 32 != 0 || self.input_w == 0 || self.input_w % 32 != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by 2^5",
                self.input_h, self.input_w
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// 3x3 convolution parameters; weights are `[out][in][3][3]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Dense layer; weights are `[out][in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The classifier network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub conv: Vec<ConvLayer>,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
    pub n_classes: usize,
    pub config: NetConfig,
}

/// Per-epoch training loss and segment-classification accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl ConvNet {
    pub fn validate(&self) -> Result<()> {
        if self.conv.len() != N_CONV_LAYERS {
            return Err(Error::Config(format!(
                "expected {N_CONV_LAYERS} conv layers, got {}",
                self.conv.len()
            )));
        }
        if self.hidden.out_dim != HIDDEN_WIDTH {
            return Err(Error::Config(format!(
                "hidden width must be {HIDDEN_WIDTH}, got {}",
                self.hidden.out_dim
            )));
        }
        let finite = self
            .conv
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .chain(self.hidden.weights.iter())
            .chain(self.hidden.bias.iter())
            .chain(self.output.weights.iter())
            .chain(self.output.bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        self.config.validate()
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.conv
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.hidden.weights.len()
            + self.hidden.bias.len()
            + self.output.weights.len()
            + self.output.bias.len()
    }
}

/// He-initialized network with seeded parameters.
pub fn build_network(n_classes: usize, config: &NetConfig, seed: u64) -> Result<ConvNet> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut sample = |n: usize, fan_in: usize| -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n)
            .map(|_| {
                let z: f64 = normal.sample(&mut rng);
                std * z
            })
            .collect()
    };
    let mut conv = Vec::with_capacity(N_CONV_LAYERS);
    let mut in_ch = 1;
    for &out_ch in &config.channels {
        let fan_in = in_ch * 9;
        conv.push(ConvLayer {
            in_ch,
            out_ch,
            weights: sample(out_ch * in_ch * 9, fan_in),
            bias: vec![0.0; out_ch],
        });
        in_ch = out_ch;
    }
    let gap_dim = config.channels[N_CONV_LAYERS - 1];
    let hidden = DenseLayer {
        in_dim: gap_dim,
        out_dim: HIDDEN_WIDTH,
        weights: sample(HIDDEN_WIDTH * gap_dim, gap_dim),
        bias: vec![0.0; HIDDEN_WIDTH],
    };
    let output = DenseLayer {
        in_dim: HIDDEN_WIDTH,
        out_dim: n_classes,
        weights: sample(n_classes * HIDDEN_WIDTH, HIDDEN_WIDTH),
        bias: vec![0.0; n_classes],
    };
    Ok(ConvNet {
        conv,
        hidden,
        output,
        n_classes,
        config: config.clone(),
    })
}

/// Everything the backward pass needs from a forward pass.
struct Activations {
    /// Zero-padded input of each conv layer, `(in_ch, h+2, w+2)` flattened.
    padded_in: Vec<Vec<f64>>,
    /// Pre-activation maps, `(out_ch, h, w)`.
    pre: Vec<Vec<f64>>,
    /// Post-pool maps, `(out_ch, h/2, w/2)`.
    pooled: Vec<Vec<f64>>,
    /// Flat argmax index (into the unpooled map) per pooled cell.
    pool_idx: Vec<Vec<u32>>,
    gap: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_post: Vec<f64>,
    logits: Vec<f64>,
}

fn pad_channels(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; ch * ph * pw];
    for c in 0..ch {
        for y in 0..h {
            let src = (c * h + y) * w;
            let dst = (c * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&input[src..src + w]);
        }
    }
    out
}

fn conv_forward(layer: &ConvLayer, padded: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let pw = w + 2;
    let ph = h + 2;
    for oc in 0..layer.out_ch {
        let wbase = oc * layer.in_ch * 9;
        for y in 0..h {
            for x in 0..w {
                let mut acc = layer.bias[oc];
                for ic in 0..layer.in_ch {
                    let kbase = wbase + ic * 9;
                    let pbase = ic * ph * pw + y * pw + x;
                    for ky in 0..3 {
                        let row = pbase + ky * pw;
                        acc += layer.weights[kbase + ky * 3] * padded[row]
                            + layer.weights[kbase + ky * 3 + 1] * padded[row + 1]
                            + layer.weights[kbase + ky * 3 + 2] * padded[row + 2];
                    }
                }
                out[(oc * h + y) * w + x] = acc;
            }
        }
    }
}

/// 2x2 max-pool with stride 2; ties resolve to the first cell in scan order.
fn maxpool_forward(
    post: &[f64],
    ch: usize,
    h: usize,
    w: usize,
    pooled: &mut [f64],
    idx: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (c * h + 2 * y + dy) * w + 2 * x + dx;
                        if post[i] > best {
                            best = post[i];
                            best_i = i as u32;
                        }
                    }
                }
                pooled[(c * oh + y) * ow + x] = best;
                idx[(c * oh + y) * ow + x] = best_i;
            }
        }
    }
}

fn dense_forward(layer: &DenseLayer, input: &[f64], out: &mut [f64]) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let mut acc = layer.bias[o];
        for (wv, xv) in row.iter().zip(input) {
            acc += wv * xv;
        }
        *slot = acc;
    }
}

fn forward_internal(net: &ConvNet, input: &[f64]) -> Activations {
    let cfg = &net.config;
    let mut acts = Activations {
        padded_in: Vec::with_capacity(N_CONV_LAYERS),
        pre: Vec::with_capacity(N_CONV_LAYERS),
        pooled: Vec::with_capacity(N_CONV_LAYERS),
        pool_idx: Vec::with_capacity(N_CONV_LAYERS),
        gap: Vec::new(),
        hidden_pre: vec![0.0; HIDDEN_WIDTH],
        hidden_post: vec![0.0; HIDDEN_WIDTH],
        logits: vec![0.0; net.n_classes],
    };
    let (mut h, mut w) = (cfg.input_h, cfg.input_w);
    let mut current: Vec<f64> = input.to_vec();
    let mut in_ch = 1;
    for layer in &net.conv {
        let padded = pad_channels(&current, in_ch, h, w);
        let mut pre = vec![0.0; layer.out_ch * h * w];
        conv_forward(layer, &padded, h, w, &mut pre);
        let post: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let (oh, ow) = (h / 2, w / 2);
        let mut pooled = vec![0.0; layer.out_ch * oh * ow];
        let mut idx = vec![0u32; layer.out_ch * oh * ow];
        maxpool_forward(&post, layer.out_ch, h, w, &mut pooled, &mut idx);
        acts.padded_in.push(padded);
        acts.pre.push(pre);
        acts.pool_idx.push(idx);
        acts.pooled.push(pooled.clone());
        current = pooled;
        in_ch = layer.out_ch;
        h = oh;
        w = ow;
    }
    // Global average pool over the remaining spatial map.
    let spatial = h * w;
    let gap_dim = net.conv[N_CONV_LAYERS - 1].out_ch;
    let mut gap = vec![0.0; gap_dim];
    for (c, slot) in gap.iter_mut().enumerate() {
        *slot = current[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
    }
    dense_forward(&net.hidden, &gap, &mut acts.hidden_pre);
    for (post, &pre) in acts.hidden_post.iter_mut().zip(&acts.hidden_pre) {
        *post = pre.max(0.0);
    }
    dense_forward(&net.output, &acts.hidden_post, &mut acts.logits);
    acts.gap = gap;
    acts
}

fn check_input(net: &ConvNet, mel: &MelSpectrogram) -> Result<Vec<f64>> {
    let cfg = &net.config;
    if mel.n_mels() != cfg.input_h || mel.n_frames() != cfg.input_w {
        return Err(Error::Shape(format!(
            "input '{}' is {}x{}, network expects {}x{}",
            mel.clip_id,
            mel.n_mels(),
            mel.n_frames(),
            cfg.input_h,
            cfg.input_w
        )));
    }
    // Row-major (bin, frame) layout as one channel.
    let mut flat = Vec::with_capacity(cfg.input_h * cfg.input_w);
    for b in 0..cfg.input_h {
        for t in 0..cfg.input_w {
            let v = mel.values[(b, t)];
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite spectrogram value in '{}'",
                    mel.clip_id
                )));
            }
            flat.push(v);
        }
    }
    if cfg.standardize_input {
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var < 1e-12 { 1.0 } else { 1.0 / var.sqrt() };
        for v in flat.iter_mut() {
            *v = (*v - mean) * scale;
        }
    }
    Ok(flat)
}

/// Run the classifier on one spectrogram.
///
/// Returns the class logits and the post-ReLU hidden activation, which is
/// the deep audio feature (elementwise nonnegative).
pub fn forward(net: &ConvNet, input: &MelSpectrogram) -> Result<(Vec<f64>, EmbeddingVector)> {
    let flat = check_input(net, input)?;
    let acts = forward_internal(net, &flat);
    Ok((
        acts.logits,
        EmbeddingVector {
            values: DVector::from_vec(acts.hidden_post),
            kind: EmbeddingKind::Deep,
            track_id: input.clip_id.clone(),
        },
    ))
}

/// Stable softmax cross-entropy; returns (loss, probabilities).
fn softmax_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let probs = exps.iter().map(|&e| e / sum).collect();
    (loss, probs)
}

/// Parameter gradients in the same tensor order as [`param_slices`].
#[derive(Clone)]
struct Grads {
    tensors: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(net: &ConvNet) -> Self {
        let mut tensors = Vec::new();
        for l in &net.conv {
            tensors.push(vec![0.0; l.weights.len()]);
            tensors.push(vec![0.0; l.bias.len()]);
        }
        tensors.push(vec![0.0; net.hidden.weights.len()]);
        tensors.push(vec![0.0; net.hidden.bias.len()]);
        tensors.push(vec![0.0; net.output.weights.len()]);
        tensors.push(vec![0.0; net.output.bias.len()]);
        Self { tensors }
    }

    fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Mutable views over all parameter tensors: conv0.w, conv0.b, ...,
/// hidden.w, hidden.b, output.w, output.b.
fn param_slices_mut(net: &mut ConvNet) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = Vec::new();
    for l in &mut net.conv {
        out.push(&mut l.weights);
        out.push(&mut l.bias);
    }
    out.push(&mut net.hidden.weights);
    out.push(&mut net.hidden.bias);
    out.push(&mut net.output.weights);
    out.push(&mut net.output.bias);
    out
}

fn param_slices(net: &ConvNet) -> Vec<&Vec<f64>> {
    let mut out: Vec<&Vec<f64>> = Vec::new();
    for l in &net.conv {
        out.push(&l.weights);
        out.push(&l.bias);
    }
    out.push(&net.hidden.weights);
    out.push(&net.hidden.bias);
    out.push(&net.output.weights);
    out.push(&net.output.bias);
    out
}

/// Cross-entropy loss and full parameter gradient for one labeled input.
fn backward(net: &ConvNet, flat: &[f64], label: usize) -> (f64, Vec<f64>, Grads) {
    let cfg = &net.config;
    let acts = forward_internal(net, flat);
    let (loss, probs) = softmax_loss(&acts.logits, label);
    let mut grads = Grads::zeros_like(net);

    // Output layer: dlogits = softmax - onehot.
    let mut dlogits = probs.clone();
    dlogits[label] -= 1.0;
    let n_out = net.n_classes;
    {
        let gw = &mut grads.tensors[2 * N_CONV_LAYERS + 2];
        for o in 0..n_out {
            for i in 0..HIDDEN_WIDTH {
                gw[o * HIDDEN_WIDTH + i] = dlogits[o] * acts.hidden_post[i];
            }
        }
        grads.tensors[2 * N_CONV_LAYERS + 3].copy_from_slice(&dlogits);
    }
    let mut dhidden = vec![0.0; HIDDEN_WIDTH];
    for (o, &dl) in dlogits.iter().enumerate() {
        let row = &net.output.weights[o * HIDDEN_WIDTH..(o + 1) * HIDDEN_WIDTH];
        for (dh, wv) in dhidden.iter_mut().zip(row) {
            *dh += dl * wv;
        }
    }
    // Hidden ReLU.
    for (dh, &pre) in dhidden.iter_mut().zip(&acts.hidden_pre) {
        if pre <= 0.0 {
            *dh = 0.0;
        }
    }
    let gap_dim = net.hidden.in_dim;
    {
        let gw = &mut grads.tensors[2 * N_CONV_LAYERS];
        for o in 0..HIDDEN_WIDTH {
            for i in 0..gap_dim {
                gw[o * gap_dim + i] = dhidden[o] * acts.gap[i];
            }
        }
        grads.tensors[2 * N_CONV_LAYERS + 1].copy_from_slice(&dhidden);
    }
    let mut dgap = vec![0.0; gap_dim];
    for (o, &dh) in dhidden.iter().enumerate() {
        if dh == 0.0 {
            continue;
        }
        let row = &net.hidden.weights[o * gap_dim..(o + 1) * gap_dim];
        for (dg, wv) in dgap.iter_mut().zip(row) {
            *dg += dh * wv;
        }
    }

    // Spatial dims entering each conv layer.
    let mut dims = Vec::with_capacity(N_CONV_LAYERS);
    let (mut h, mut w) = (cfg.input_h, cfg.input_w);
    for _ in 0..N_CONV_LAYERS {
        dims.push((h, w));
        h /= 2;
        w /= 2;
    }
    // Gradient w.r.t. the last pooled map comes from the average pool.
    let (fh, fw) = (cfg.input_h >> N_CONV_LAYERS, cfg.input_w >> N_CONV_LAYERS);
    let spatial = fh * fw;
    let mut dpooled = vec![0.0; gap_dim * spatial];
    for c in 0..gap_dim {
        let g = dgap[c] / spatial as f64;
        for s in 0..spatial {
            dpooled[c * spatial + s] = g;
        }
    }

    for li in (0..N_CONV_LAYERS).rev() {
        let layer = &net.conv[li];
        let (h, w) = dims[li];
        let (ph, pw) = (h + 2, w + 2);
        // Unpool: route each pooled gradient to its argmax cell, then gate
        // by the ReLU mask.
        let mut dpre = vec![0.0; layer.out_ch * h * w];
        for (gi, &src) in acts.pool_idx[li].iter().enumerate() {
            dpre[src as usize] += dpooled[gi];
        }
        for (dz, &z) in dpre.iter_mut().zip(&acts.pre[li]) {
            if z <= 0.0 {
                *dz = 0.0;
            }
        }

        let padded = &acts.padded_in[li];
        let (head, tail) = grads.tensors.split_at_mut(2 * li + 1);
        let gw = &mut head[2 * li];
        let gb = &mut tail[0];
        let mut dpadded = vec![0.0; layer.in_ch * ph * pw];
        for oc in 0..layer.out_ch {
            let wbase = oc * layer.in_ch * 9;
            for y in 0..h {
                for x in 0..w {
                    let dz = dpre[(oc * h + y) * w + x];
                    if dz == 0.0 {
                        continue;
                    }
                    gb[oc] += dz;
                    for ic in 0..layer.in_ch {
                        let kbase = wbase + ic * 9;
                        let pbase = ic * ph * pw + y * pw + x;
                        for ky in 0..3 {
                            let row = pbase + ky * pw;
                            let kk = kbase + ky * 3;
                            gw[kk] += dz * padded[row];
                            gw[kk + 1] += dz * padded[row + 1];
                            gw[kk + 2] += dz * padded[row + 2];
                            dpadded[row] += dz * layer.weights[kk];
                            dpadded[row + 1] += dz * layer.weights[kk + 1];
                            dpadded[row + 2] += dz * layer.weights[kk + 2];
                        }
                    }
                }
            }
        }
        if li > 0 {
            // Crop the padding border; what remains is the gradient w.r.t.
            // the previous layer's pooled output.
            let mut cropped = vec![0.0; layer.in_ch * h * w];
            for ic in 0..layer.in_ch {
                for y in 0..h {
                    let src = (ic * ph + y + 1) * pw + 1;
                    let dst = (ic * h + y) * w;
                    cropped[dst..dst + w].copy_from_slice(&dpadded[src..src + w]);
                }
            }
            dpooled = cropped;
        }
    }

    (loss, probs, grads)
}

/// Train the classifier on labeled spectrogram segments.
///
/// Mini-batch SGD with momentum 0.9 on the mean cross-entropy; shuffling is
/// seeded by `config.seed`. History records the running training loss and
/// segment accuracy of each epoch.
pub fn train_network(
    net: &ConvNet,
    segments: &[(MelSpectrogram, usize)],
    config: &NetConfig,
) -> Result<(ConvNet, TrainHistory)> {
    config.validate()?;
    net.validate()?;
    if segments.is_empty() {
        return Err(Error::InsufficientData("no training segments".into()));
    }
    let mut class_seen = vec![false; net.n_classes];
    for (mel, label) in segments {
        if *label >= net.n_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                net.n_classes
            )));
        }
        class_seen[*label] = true;
        check_input(net, mel)?;
    }
    if let Some(missing) = class_seen.iter().position(|&seen| !seen) {
        return Err(Error::Data(format!("class {missing} has no segments")));
    }

    let flats: Vec<Vec<f64>> = segments
        .iter()
        .map(|(mel, _)| check_input(net, mel))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = segments.iter().map(|(_, l)| *l).collect();

    let mut trained = net.clone();
    let mut velocity = Grads::zeros_like(net);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut history = TrainHistory {
        loss: Vec::with_capacity(config.epochs),
        accuracy: Vec::with_capacity(config.epochs),
    };

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>, Grads)> = batch
                .par_iter()
                .map(|&i| backward(&trained, &flats[i], labels[i]))
                .collect();
            let mut mean_grad = Grads::zeros_like(&trained);
            let scale = 1.0 / batch.len() as f64;
            for (bi, (loss, probs, g)) in results.iter().enumerate() {
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "training loss diverged (loss = {loss})"
                    )));
                }
                epoch_loss += loss;
                let pred = (0..trained.n_classes)
                    .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
                    .unwrap();
                if pred == labels[batch[bi]] {
                    correct += 1;
                }
                mean_grad.add_scaled(g, scale);
            }
            // v := momentum * v - lr * g; theta += v
            for (vt, gt) in velocity.tensors.iter_mut().zip(&mean_grad.tensors) {
                for (v, g) in vt.iter_mut().zip(gt) {
                    *v = MOMENTUM * *v - config.learning_rate * g;
                }
            }
            for (param, vt) in param_slices_mut(&mut trained)
                .into_iter()
                .zip(&velocity.tensors)
            {
                for (p, v) in param.iter_mut().zip(vt) {
                    *p += v;
                }
            }
        }
        history.loss.push(epoch_loss / segments.len() as f64);
        history
            .accuracy
            .push(correct as f64 / segments.len() as f64);
    }
    Ok((trained, history))
}

/// Nonlinearity decisions made during a forward pass: ReLU activity masks
/// and pooling argmax choices. Two evaluations with different signatures
/// straddle a kink, where finite differences are invalid.
#[derive(PartialEq)]
struct ActivitySignature {
    relu: Vec<bool>,
    pool: Vec<u32>,
}

fn loss_and_signature(net: &ConvNet, flat: &[f64], label: usize) -> (f64, ActivitySignature) {
    let acts = forward_internal(net, flat);
    let (loss, _) = softmax_loss(&acts.logits, label);
    let mut relu = Vec::new();
    for pre in &acts.pre {
        relu.extend(pre.iter().map(|&z| z > 0.0));
    }
    relu.extend(acts.hidden_pre.iter().map(|&z| z > 0.0));
    let mut pool = Vec::new();
    for idx in &acts.pool_idx {
        pool.extend_from_slice(idx);
    }
    (loss, ActivitySignature { relu, pool })
}

/// Compare analytic gradients against central finite differences on a
/// seeded sample of at least `min_params` parameters (if the net has that
/// many), covering every tensor. Parameters whose perturbation flips a ReLU
/// or pooling decision are skipped; the finite difference is invalid across
/// those kinks. Returns the maximum relative error
/// `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn gradient_check(
    net: &ConvNet,
    sample: &MelSpectrogram,
    label: usize,
    epsilon: f64,
    min_params: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [1e-5, 1e-2]"
        )));
    }
    if label >= net.n_classes {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            net.n_classes
        )));
    }
    let flat = check_input(net, sample)?;
    let (_, _, grads) = backward(net, &flat, label);

    // Stratified parameter sample: a fixed quota from every tensor, then
    // top-up from the whole net.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = param_slices(net).iter().map(|t| t.len()).collect();
    let quota = (min_params / sizes.len()).max(4);
    let mut seen: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for (ti, &len) in sizes.iter().enumerate() {
        let take = quota.min(len);
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < take {
            chosen.insert(rng.gen_range(0..len));
        }
        seen.extend(chosen.into_iter().map(|i| (ti, i)));
    }
    let total: usize = sizes.iter().sum();
    let want = min_params.min(total);
    while seen.len() < want {
        let ti = rng.gen_range(0..sizes.len());
        if sizes[ti] == 0 {
            continue;
        }
        seen.insert((ti, rng.gen_range(0..sizes[ti])));
    }
    let picks: Vec<(usize, usize)> = seen.into_iter().collect();

    let mut probe = net.clone();
    let mut max_rel: f64 = 0.0;
    for (ti, pi) in picks {
        let original = param_slices(&probe)[ti][pi];
        param_slices_mut(&mut probe)[ti][pi] = original + epsilon;
        let (loss_plus, sig_plus) = loss_and_signature(&probe, &flat, label);
        param_slices_mut(&mut probe)[ti][pi] = original - epsilon;
        let (loss_minus, sig_minus) = loss_and_signature(&probe, &flat, label);
        param_slices_mut(&mut probe)[ti][pi] = original;
        if sig_plus != sig_minus {
            continue; // kink crossed
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        let analytic = grads.tensors[ti][pi];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Mean of per-segment hidden vectors, length-normalized.
pub fn embed_segments(
    net: &ConvNet,
    mels: &[MelSpectrogram],
    track_id: &str,
) -> Result<EmbeddingVector> {
    if mels.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no segments to embed for '{track_id}'"
        )));
    }
    let mut mean = DVector::zeros(HIDDEN_WIDTH);
    for mel in mels {
        let (_, hidden) = forward(net, mel)?;
        mean += hidden.values;
    }
    mean /= mels.len() as f64;
    length_normalize(&EmbeddingVector {
        values: mean,
        kind: EmbeddingKind::Deep,
        track_id: track_id.to_string(),
    })
}

/// Cut a clip into 3-second segments with a 1.5-second hop; clips shorter
/// than one segment are right-padded with silence.
pub fn segment_clip(clip: &AudioClip, dsp: &DspConfig) -> Result<Vec<MelSpectrogram>> {
    if clip.samples.is_empty() {
        return Err(Error::EmptyInput(format!("clip '{}' is empty", clip.id)));
    }
    let seg_len = (SEGMENT_SECONDS * f64::from(SAMPLE_RATE)) as usize;
    let hop = (SEGMENT_HOP_SECONDS * f64::from(SAMPLE_RATE)) as usize;
    let mut samples = clip.samples.clone();
    if samples.len() < seg_len {
        samples.resize(seg_len, 0.0);
    }
    let mut mels = Vec::new();
    let mut start = 0;
    while start + seg_len <= samples.len() {
        let segment = AudioClip {
            samples: samples[start..start + seg_len].to_vec(),
            sample_rate: clip.sample_rate,
            id: format!("{}#{}", clip.id, mels.len()),
        };
        mels.push(log_mel_spectrogram(&segment, dsp)?);
        start += hop;
    }
    Ok(mels)
}

/// Track-level deep embedding: segment the clip, average the hidden vectors,
/// length-normalize.
pub fn track_embedding(
    net: &ConvNet,
    clip: &AudioClip,
    dsp: &DspConfig,
) -> Result<EmbeddingVector> {
    let mels = segment_clip(clip, dsp)?;
    let mut v = embed_segments(net, &mels, &clip.id)?;
    v.track_id = clip.id.clone();
    Ok(v)
}
