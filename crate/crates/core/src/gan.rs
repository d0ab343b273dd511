//! Conditional GAN sinogram denoiser: encoder-decoder generator with
//! concatenation skip connections, a convolutional discriminator over
//! (condition, candidate) pairs, the combined adversarial + L1 loss, the
//! alternating training loop, and inference.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::projector::Sinogram;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Full-width channel counts; `channel_scale` shrinks them for desk-scale
/// runs while preserving the topology.
const ENC_CHANNELS: [usize; 4] = [128, 256, 512, 512];
const DEC_CHANNELS: [usize; 4] = [512, 256, 128, 64];
const DISC_CHANNELS: [usize; 3] = [64, 128, 256];

pub const CHECKPOINT_VERSION: u32 = 1;

fn scaled(c: usize, scale: f64) -> usize {
    let v = libm::round(c as f64 * scale) as usize;
    v.max(1)
}

/// One 3x3 convolution layer: weight [co, ci, 3, 3] and bias [co].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    /// He-uniform weights (limit sqrt(6 / fan_in)), zero bias.
    fn init(ci: usize, co: usize, rng: &mut Rng) -> Self {
        let fan_in = (ci * 9) as f64;
        let limit = libm::sqrt(6.0 / fan_in);
        let data: Vec<f64> =
            (0..co * ci * 9).map(|_| rng.uniform_range(-limit, limit)).collect();
        Conv {
            weight: Tensor::new(vec![co, ci, 3, 3], data).expect("conv init"),
            bias: Tensor::zeros(vec![co]),
        }
    }


    fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Encoder convs E1..E4, decoder convs D1..D4, and the linear output conv.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub encoder: Vec<Conv>,
    pub decoder: Vec<Conv>,
    pub output: Conv,
    pub channel_scale: f64,
}

/// Encoder/decoder channel wiring for a given scale. Decoder inputs D2..D4
/// concatenate the up-sampled previous decoder output with the matching
/// pre-pool encoder activation.
fn generator_wiring(scale: f64) -> ([usize; 4], [usize; 4], [usize; 4], [usize; 4]) {
    let enc_out = [
        scaled(ENC_CHANNELS[0], scale),
        scaled(ENC_CHANNELS[1], scale),
        scaled(ENC_CHANNELS[2], scale),
        scaled(ENC_CHANNELS[3], scale),
    ];
    let enc_in = [1, enc_out[0], enc_out[1], enc_out[2]];
    let dec_out = [
        scaled(DEC_CHANNELS[0], scale),
        scaled(DEC_CHANNELS[1], scale),
        scaled(DEC_CHANNELS[2], scale),
        scaled(DEC_CHANNELS[3], scale),
    ];
    let dec_in = [
        enc_out[3],
        dec_out[0] + enc_out[2],
        dec_out[1] + enc_out[1],
        dec_out[2] + enc_out[0],
    ];
    (enc_in, enc_out, dec_in, dec_out)
}

impl GeneratorParams {
    pub fn init(channel_scale: f64, rng: &mut Rng) -> Result<Self> {
        if !(channel_scale > 0.0 && channel_scale <= 1.0) {
            return Err(Error::Config(format!(
                "channel_scale must be in (0, 1], got {channel_scale}"
            )));
        }
        let (enc_in, enc_out, dec_in, dec_out) = generator_wiring(channel_scale);
        let encoder =
            (0..4).map(|i| Conv::init(enc_in[i], enc_out[i], rng)).collect::<Vec<_>>();
        let decoder =
            (0..4).map(|i| Conv::init(dec_in[i], dec_out[i], rng)).collect::<Vec<_>>();
        let output = Conv::init(dec_out[3], 1, rng);
        Ok(GeneratorParams { encoder, decoder, output, channel_scale })
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.iter().map(Conv::parameter_count).sum::<usize>()
            + self.decoder.iter().map(Conv::parameter_count).sum::<usize>()
            + self.output.parameter_count()
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("gen.enc{i}.weight"), &c.weight));
            out.push((format!("gen.enc{i}.bias"), &c.bias));
        }
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("gen.dec{i}.weight"), &c.weight));
            out.push((format!("gen.dec{i}.bias"), &c.bias));
        }
        out.push(("gen.out.weight".to_string(), &self.output.weight));
        out.push(("gen.out.bias".to_string(), &self.output.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

/// Analytic parameter count sum(9 * c_in * c_out + c_out) over the wiring
/// table; the layer-count oracle for tests.
pub fn generator_parameter_count(channel_scale: f64) -> usize {
    let (enc_in, enc_out, dec_in, dec_out) = generator_wiring(channel_scale);
    let mut total = 0;
    for i in 0..4 {
        total += 9 * enc_in[i] * enc_out[i] + enc_out[i];
        total += 9 * dec_in[i] * dec_out[i] + dec_out[i];
    }
    total + 9 * dec_out[3] + 1
}

/// Three conv+ReLU+max-pool blocks over the 2-channel (condition, candidate)
/// stack, then one dense unit with sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub convs: Vec<Conv>,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
    pub channel_scale: f64,
}

impl DiscriminatorParams {
    pub fn init(channel_scale: f64, views: usize, bins: usize, rng: &mut Rng) -> Result<Self> {
        if !views.is_multiple_of(8) || !bins.is_multiple_of(8) {
            return Err(Error::Dimension(format!(
                "discriminator input {views}x{bins} must be divisible by 8"
            )));
        }
        let c = [
            scaled(DISC_CHANNELS[0], channel_scale),
            scaled(DISC_CHANNELS[1], channel_scale),
            scaled(DISC_CHANNELS[2], channel_scale),
        ];
        let convs = vec![
            Conv::init(2, c[0], rng),
            Conv::init(c[0], c[1], rng),
            Conv::init(c[1], c[2], rng),
        ];
        let features = c[2] * (views / 8) * (bins / 8);
        let limit = libm::sqrt(6.0 / features as f64);
        let wdata: Vec<f64> = (0..features).map(|_| rng.uniform_range(-limit, limit)).collect();
        Ok(DiscriminatorParams {
            convs,
            dense_weight: Tensor::new(vec![1, features], wdata)?,
            dense_bias: Tensor::zeros(vec![1]),
            channel_scale,
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("disc.conv{i}.weight"), &c.weight));
            out.push((format!("disc.conv{i}.bias"), &c.bias));
        }
        out.push(("disc.dense.weight".to_string(), &self.dense_weight));
        out.push(("disc.dense.bias".to_string(), &self.dense_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.dense_weight);
        out.push(&mut self.dense_bias);
        out
    }
}

/// Graph node ids of generator parameters inserted as leaves.
pub struct GeneratorNodes {
    enc: Vec<(NodeId, NodeId)>,
    dec: Vec<(NodeId, NodeId)>,
    out: (NodeId, NodeId),
}

impl GeneratorParams {
    pub fn insert(&self, g: &mut Graph, requires_grad: bool) -> GeneratorNodes {
        let mut ins =
            |c: &Conv| (g.leaf(c.weight.clone(), requires_grad), g.leaf(c.bias.clone(), requires_grad));
        GeneratorNodes {
            enc: self.encoder.iter().map(&mut ins).collect(),
            dec: self.decoder.iter().map(&mut ins).collect(),
            out: ins(&self.output),
        }
    }
}

pub struct DiscriminatorNodes {
    convs: Vec<(NodeId, NodeId)>,
    dense: (NodeId, NodeId),
}

impl DiscriminatorParams {
    pub fn insert(&self, g: &mut Graph, requires_grad: bool) -> DiscriminatorNodes {
        let mut ins =
            |c: &Conv| (g.leaf(c.weight.clone(), requires_grad), g.leaf(c.bias.clone(), requires_grad));
        DiscriminatorNodes {
            convs: self.convs.iter().map(&mut ins).collect(),
            dense: (
                g.leaf(self.dense_weight.clone(), requires_grad),
                g.leaf(self.dense_bias.clone(), requires_grad),
            ),
        }
    }
}

/// Encoder-decoder forward pass; output shape equals input shape.
pub fn generator_forward(g: &mut Graph, p: &GeneratorNodes, input: NodeId) -> Result<NodeId> {
    let (_, _, h, w) = g.value(input).dims4()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Dimension(format!(
            "generator input {h}x{w} must be divisible by 8 (three 2x2 pools)"
        )));
    }
    let c = g.conv2d(input, p.enc[0].0, p.enc[0].1)?;
    let e1 = g.relu(c);
    let p1 = g.maxpool2(e1)?;
    let c = g.conv2d(p1, p.enc[1].0, p.enc[1].1)?;
    let e2 = g.relu(c);
    let p2 = g.maxpool2(e2)?;
    let c = g.conv2d(p2, p.enc[2].0, p.enc[2].1)?;
    let e3 = g.relu(c);
    let p3 = g.maxpool2(e3)?;
    let c = g.conv2d(p3, p.enc[3].0, p.enc[3].1)?;
    let e4 = g.relu(c);

    let c = g.conv2d(e4, p.dec[0].0, p.dec[0].1)?;
    let d1 = g.relu(c);
    let u = g.upsample2(d1)?;
    let cat = g.concat_channels(u, e3)?;
    let c = g.conv2d(cat, p.dec[1].0, p.dec[1].1)?;
    let d2 = g.relu(c);
    let u = g.upsample2(d2)?;
    let cat = g.concat_channels(u, e2)?;
    let c = g.conv2d(cat, p.dec[2].0, p.dec[2].1)?;
    let d3 = g.relu(c);
    let u = g.upsample2(d3)?;
    let cat = g.concat_channels(u, e1)?;
    let c = g.conv2d(cat, p.dec[3].0, p.dec[3].1)?;
    let d4 = g.relu(c);

    let out = g.conv2d(d4, p.out.0, p.out.1)?;
    Ok(g.linear(out))
}

/// Discriminator over the 2-channel (condition, candidate) stack; returns
/// one probability per batch element, shape [batch, 1].
pub fn discriminator_forward(
    g: &mut Graph,
    p: &DiscriminatorNodes,
    condition: NodeId,
    candidate: NodeId,
) -> Result<NodeId> {
    let mut x = g.concat_channels(condition, candidate)?;
    for (w, b) in &p.convs {
        let c = g.conv2d(x, *w, *b)?;
        let r = g.relu(c);
        x = g.maxpool2(r)?;
    }
    let (bsz, c, h, w) = g.value(x).dims4()?;
    let flat = g.reshape(x, vec![bsz, c * h * w])?;
    let z = g.dense(flat, p.dense.0, p.dense.1)?;
    Ok(g.sigmoid(z))
}

/// Builds both cGAN losses:
/// loss_D = bce(disc_real, 1) + bce(disc_fake, 0)
/// loss_G = bce(disc_fake, 1) + lambda_l1 * l1(denoised, clean)
pub fn gan_losses(
    g: &mut Graph,
    disc_real: NodeId,
    disc_fake: NodeId,
    denoised: NodeId,
    clean: NodeId,
    lambda_l1: f64,
) -> Result<(NodeId, NodeId)> {
    let ones = g.constant(Tensor::full(g.value(disc_real).shape().to_vec(), 1.0));
    let zeros = g.constant(Tensor::full(g.value(disc_fake).shape().to_vec(), 0.0));
    let bce_real = g.bce_loss(disc_real, ones)?;
    let bce_fake0 = g.bce_loss(disc_fake, zeros)?;
    let loss_d = g.add(bce_real, bce_fake0)?;
    let bce_fake1 = g.bce_loss(disc_fake, ones)?;
    let l1 = g.l1_loss(denoised, clean)?;
    let l1_scaled = g.scale(l1, lambda_l1);
    let loss_g = g.add(bce_fake1, l1_scaled)?;
    Ok((loss_g, loss_d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_l1: f64,
    pub channel_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::gan_defaults();
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            lambda_l1: 100.0,
            channel_scale: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }
}

/// One row of the loss trace CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g_adv: f64,
    pub loss_g_l1: f64,
}

/// Named tensors for both networks and the optimizer, plus text metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelCheckpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<Tensor> {
        self.tensor(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("checkpoint missing tensor {name}")))
    }

    fn meta_parse<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Contract(format!("checkpoint missing/invalid meta {key}")))
    }
}

/// Live training state: both networks and both optimizers.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    adam_g: AdamState,
    adam_d: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn init(config: &TrainConfig, views: usize, bins: usize) -> Result<Self> {
        let mut rng = Rng::derive(config.seed, 0x696e6974); // "init" stream
        let generator = GeneratorParams::init(config.channel_scale, &mut rng)?;
        let discriminator =
            DiscriminatorParams::init(config.channel_scale, views, bins, &mut rng)?;
        let g_sizes: Vec<usize> =
            generator.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        let d_sizes: Vec<usize> =
            discriminator.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Ok(TrainState {
            generator,
            discriminator,
            adam_g: AdamState::new(config.hyper(), &g_sizes),
            adam_d: AdamState::new(config.hyper(), &d_sizes),
            epochs_done: 0,
        })
    }

    /// Serializes networks, optimizer moments, and run metadata.
    pub fn to_checkpoint(&self, config: &TrainConfig, views: usize, bins: usize) -> ModelCheckpoint {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in
            self.generator.named_tensors().into_iter().chain(self.discriminator.named_tensors())
        {
            tensors.push((name, t.clone()));
        }
        for (prefix, adam, params) in [
            ("adam_g", &self.adam_g, self.generator.named_tensors()),
            ("adam_d", &self.adam_d, self.discriminator.named_tensors()),
        ] {
            let (m, v) = adam.moments();
            for (i, (name, t)) in params.iter().enumerate() {
                let shape = t.shape().to_vec();
                tensors.push((
                    format!("{prefix}.m.{name}"),
                    Tensor::new(shape.clone(), m[i].clone()).expect("moment shape"),
                ));
                tensors.push((
                    format!("{prefix}.v.{name}"),
                    Tensor::new(shape, v[i].clone()).expect("moment shape"),
                ));
            }
        }
        let meta = vec![
            ("epochs_done".to_string(), self.epochs_done.to_string()),
            ("seed".to_string(), config.seed.to_string()),
            ("epochs".to_string(), config.epochs.to_string()),
            ("batch_size".to_string(), config.batch_size.to_string()),
            ("learning_rate".to_string(), format!("{:e}", config.learning_rate)),
            ("beta1".to_string(), format!("{}", config.beta1)),
            ("beta2".to_string(), format!("{}", config.beta2)),
            ("lambda_l1".to_string(), format!("{}", config.lambda_l1)),
            ("channel_scale".to_string(), format!("{}", config.channel_scale)),
            ("views".to_string(), views.to_string()),
            ("bins".to_string(), bins.to_string()),
            ("adam_g_steps".to_string(), self.adam_g.step_count().to_string()),
            ("adam_d_steps".to_string(), self.adam_d.step_count().to_string()),
        ];
        ModelCheckpoint { version: CHECKPOINT_VERSION, meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint, config: &TrainConfig) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        let channel_scale: f64 = ckpt.meta_parse("channel_scale")?;
        let generator = generator_from_checkpoint(ckpt, channel_scale)?;
        let discriminator = discriminator_from_checkpoint(ckpt, channel_scale)?;
        let restore_adam = |prefix: &str,
                            params: &[(String, &Tensor)],
                            steps: u64|
         -> Result<AdamState> {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, t) in params {
                let mt = ckpt.require(&format!("{prefix}.m.{name}"))?;
                let vt = ckpt.require(&format!("{prefix}.v.{name}"))?;
                if mt.shape() != t.shape() || vt.shape() != t.shape() {
                    return Err(Error::Dimension(format!("optimizer state for {name} mismatched")));
                }
                m.push(mt.data().to_vec());
                v.push(vt.data().to_vec());
            }
            AdamState::restore(config.hyper(), m, v, steps)
        };
        let adam_g = restore_adam(
            "adam_g",
            &generator.named_tensors(),
            ckpt.meta_parse("adam_g_steps")?,
        )?;
        let adam_d = restore_adam(
            "adam_d",
            &discriminator.named_tensors(),
            ckpt.meta_parse("adam_d_steps")?,
        )?;
        Ok(TrainState {
            generator,
            discriminator,
            adam_g,
            adam_d,
            epochs_done: ckpt.meta_parse("epochs_done")?,
        })
    }
}

fn generator_from_checkpoint(ckpt: &ModelCheckpoint, channel_scale: f64) -> Result<GeneratorParams> {
    let conv = |prefix: &str| -> Result<Conv> {
        Ok(Conv {
            weight: ckpt.require(&format!("{prefix}.weight"))?,
            bias: ckpt.require(&format!("{prefix}.bias"))?,
        })
    };
    Ok(GeneratorParams {
        encoder: (0..4).map(|i| conv(&format!("gen.enc{i}"))).collect::<Result<_>>()?,
        decoder: (0..4).map(|i| conv(&format!("gen.dec{i}"))).collect::<Result<_>>()?,
        output: conv("gen.out")?,
        channel_scale,
    })
}

fn discriminator_from_checkpoint(
    ckpt: &ModelCheckpoint,
    channel_scale: f64,
) -> Result<DiscriminatorParams> {
    let conv = |prefix: &str| -> Result<Conv> {
        Ok(Conv {
            weight: ckpt.require(&format!("{prefix}.weight"))?,
            bias: ckpt.require(&format!("{prefix}.bias"))?,
        })
    };
    Ok(DiscriminatorParams {
        convs: (0..3).map(|i| conv(&format!("disc.conv{i}"))).collect::<Result<_>>()?,
        dense_weight: ckpt.require("disc.dense.weight")?,
        dense_bias: ckpt.require("disc.dense.bias")?,
        channel_scale,
    })
}

/// A noisy/clean training pair, normalized before batching by the clean
/// sinogram's maximum.
fn batch_tensors(
    pairs: &[(Sinogram, Sinogram)],
    indices: &[usize],
) -> Result<(Tensor, Tensor)> {
    let (views, bins) = (pairs[0].0.num_views(), pairs[0].0.num_bins());
    let plane = views * bins;
    let mut noisy = Vec::with_capacity(indices.len() * plane);
    let mut clean = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        let (n, c) = &pairs[i];
        let max = c.max_value();
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        noisy.extend(n.data().iter().map(|v| v * scale));
        clean.extend(c.data().iter().map(|v| v * scale));
    }
    Ok((
        Tensor::new(vec![indices.len(), 1, views, bins], noisy)?,
        Tensor::new(vec![indices.len(), 1, views, bins], clean)?,
    ))
}

fn validate_dataset(pairs: &[(Sinogram, Sinogram)]) -> Result<(usize, usize)> {
    if pairs.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let (views, bins) = (pairs[0].0.num_views(), pairs[0].0.num_bins());
    if views % 8 != 0 || bins % 8 != 0 {
        return Err(Error::Dimension(format!(
            "sinogram {views}x{bins} must be divisible by 8"
        )));
    }
    for (i, (n, c)) in pairs.iter().enumerate() {
        if n.num_views() != views
            || n.num_bins() != bins
            || c.num_views() != views
            || c.num_bins() != bins
        {
            return Err(Error::Dimension(format!("pair {i} shape inconsistent")));
        }
    }
    Ok((views, bins))
}

/// Alternating cGAN training: one discriminator step, then one generator
/// step per batch. Deterministic given the config seed. Pass a `resume`
/// state (from a checkpoint) to continue an interrupted run; epochs already
/// done are skipped from the same shuffle stream, so the result matches an
/// uninterrupted run.
pub fn train(
    config: &TrainConfig,
    pairs: &[(Sinogram, Sinogram)],
    resume: Option<TrainState>,
) -> Result<(TrainState, Vec<LossRecord>)> {
    let (views, bins) = validate_dataset(pairs)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(config, views, bins)?,
    };
    let mut trace = Vec::new();
    let mut step = state.adam_g.step_count();

    for epoch in state.epochs_done..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        Rng::derive(config.seed, 1 + epoch as u64).shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let (noisy, clean) = batch_tensors(pairs, batch)?;

            // discriminator step
            {
                let mut g = Graph::new();
                let gen_nodes = state.generator.insert(&mut g, false);
                let disc_nodes = state.discriminator.insert(&mut g, true);
                let noisy_id = g.leaf(noisy.clone(), false);
                let clean_id = g.leaf(clean.clone(), false);
                let fake = generator_forward(&mut g, &gen_nodes, noisy_id)?;
                let d_real = discriminator_forward(&mut g, &disc_nodes, noisy_id, clean_id)?;
                let d_fake = discriminator_forward(&mut g, &disc_nodes, noisy_id, fake)?;
                let (_, loss_d) =
                    gan_losses(&mut g, d_real, d_fake, fake, clean_id, config.lambda_l1)?;
                let loss_val = g.value(loss_d).item();
                if !loss_val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "discriminator loss diverged at step {step} (epoch {epoch})"
                    )));
                }
                g.backward(loss_d)?;
                let grads = collect_grads(&g, disc_param_ids(&disc_nodes))?;
                let mut params = state.discriminator.tensors_mut();
                state.adam_d.update(&mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(), &grads)?;
                trace.push(LossRecord {
                    step,
                    loss_d: loss_val,
                    loss_g_adv: f64::NAN,
                    loss_g_l1: f64::NAN,
                });
            }

            // generator step
            {
                let mut g = Graph::new();
                let gen_nodes = state.generator.insert(&mut g, true);
                let disc_nodes = state.discriminator.insert(&mut g, false);
                let noisy_id = g.leaf(noisy, false);
                let clean_id = g.leaf(clean, false);
                let fake = generator_forward(&mut g, &gen_nodes, noisy_id)?;
                let d_fake = discriminator_forward(&mut g, &disc_nodes, noisy_id, fake)?;
                let ones = g.constant(Tensor::full(g.value(d_fake).shape().to_vec(), 1.0));
                let adv = g.bce_loss(d_fake, ones)?;
                let l1 = g.l1_loss(fake, clean_id)?;
                let l1_scaled = g.scale(l1, config.lambda_l1);
                let loss_g = g.add(adv, l1_scaled)?;
                let (adv_val, l1_val) = (g.value(adv).item(), g.value(l1).item());
                if !g.value(loss_g).item().is_finite() {
                    return Err(Error::NonFinite(format!(
                        "generator loss diverged at step {step} (epoch {epoch})"
                    )));
                }
                g.backward(loss_g)?;
                let grads = collect_grads(&g, gen_param_ids(&gen_nodes))?;
                let mut params = state.generator.tensors_mut();
                state.adam_g.update(&mut params.iter_mut().map(|p| &mut **p).collect::<Vec<_>>(), &grads)?;
                let last = trace.last_mut().expect("paired records");
                last.loss_g_adv = adv_val;
                last.loss_g_l1 = l1_val;
            }

            debug_assert!(
                state
                    .generator
                    .named_tensors()
                    .iter()
                    .chain(state.discriminator.named_tensors().iter())
                    .all(|(_, t)| t.all_finite()),
                "non-finite parameter after step {step}"
            );
            step += 1;
        }
        state.epochs_done = epoch + 1;
    }
    Ok((state, trace))
}

fn gen_param_ids(nodes: &GeneratorNodes) -> Vec<NodeId> {
    let mut ids = Vec::new();
    for (w, b) in nodes.enc.iter().chain(nodes.dec.iter()) {
        ids.push(*w);
        ids.push(*b);
    }
    ids.push(nodes.out.0);
    ids.push(nodes.out.1);
    ids
}

fn disc_param_ids(nodes: &DiscriminatorNodes) -> Vec<NodeId> {
    let mut ids = Vec::new();
    for (w, b) in &nodes.convs {
        ids.push(*w);
        ids.push(*b);
    }
    ids.push(nodes.dense.0);
    ids.push(nodes.dense.1);
    ids
}

fn collect_grads(g: &Graph, ids: Vec<NodeId>) -> Result<Vec<Tensor>> {
    ids.into_iter()
        .map(|id| {
            g.grad_tensor(id)
                .ok_or_else(|| Error::Contract("parameter received no gradient".into()))
        })
        .collect()
}

/// Generator inference on one sinogram. The input is normalized by its own
/// maximum, the output rescaled back, clamped at zero, and the counts_scale
/// metadata copied from the input.
pub fn denoise(generator: &GeneratorParams, noisy: &Sinogram) -> Result<Sinogram> {
    let (views, bins) = (noisy.num_views(), noisy.num_bins());
    let max = noisy.max_value();
    let scale = if max > 0.0 { max } else { 1.0 };
    let input = Tensor::new(
        vec![1, 1, views, bins],
        noisy.data().iter().map(|v| v / scale).collect(),
    )?;
    let mut g = Graph::new();
    let nodes = generator.insert(&mut g, false);
    let input_id = g.leaf(input, false);
    let out = generator_forward(&mut g, &nodes, input_id)?;
    let data: Vec<f64> = g.value(out).data().iter().map(|v| (v * scale).max(0.0)).collect();
    Sinogram::new(views, bins, noisy.counts_scale(), data)
}

/// Inference straight from a checkpoint.
pub fn denoise_from_checkpoint(ckpt: &ModelCheckpoint, noisy: &Sinogram) -> Result<Sinogram> {
    let channel_scale: f64 = ckpt
        .meta_get("channel_scale")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Contract("checkpoint missing channel_scale".into()))?;
    let generator = generator_from_checkpoint(ckpt, channel_scale)?;
    denoise(&generator, noisy)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEST_SCALE: f64 = 0.02; // tiny channels for fast tests

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            channel_scale: TEST_SCALE,
            seed: 7,
            ..Default::default()
        }
    }

    fn rand_sinogram(rng: &mut Rng, views: usize, bins: usize) -> Sinogram {
        let data: Vec<f64> = (0..views * bins).map(|_| rng.uniform()).collect();
        Sinogram::new(views, bins, 0.0, data).unwrap()
    }

    fn tiny_pairs(n: usize, views: usize, bins: usize) -> Vec<(Sinogram, Sinogram)> {
        let mut rng = Rng::new(3);
        (0..n)
            .map(|_| (rand_sinogram(&mut rng, views, bins), rand_sinogram(&mut rng, views, bins)))
            .collect()
    }

    #[test]
    fn generator_preserves_shape_and_bottleneck() {
        let mut rng = Rng::new(1);
        let p = GeneratorParams::init(TEST_SCALE, &mut rng).unwrap();
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let input = g.leaf(Tensor::zeros(vec![1, 1, 32, 128]), false);
        let out = generator_forward(&mut g, &nodes, input).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 1, 32, 128]);
    }

    #[test]
    fn generator_rejects_indivisible_dims() {
        let mut rng = Rng::new(1);
        let p = GeneratorParams::init(TEST_SCALE, &mut rng).unwrap();
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let input = g.leaf(Tensor::zeros(vec![1, 1, 12, 16]), false);
        assert!(matches!(
            generator_forward(&mut g, &nodes, input),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn generator_zero_weights_outputs_bias() {
        let mut rng = Rng::new(2);
        let mut p = GeneratorParams::init(TEST_SCALE, &mut rng).unwrap();
        for conv in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            conv.weight = Tensor::zeros(conv.weight.shape().to_vec());
            conv.bias = Tensor::zeros(conv.bias.shape().to_vec());
        }
        p.output.weight = Tensor::zeros(p.output.weight.shape().to_vec());
        p.output.bias = Tensor::new(vec![1], vec![0.37]).unwrap();
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let mut rng = Rng::new(4);
        let input = g.leaf(rand_tensor4(&mut rng, 1, 1, 16, 16), false);
        let out = generator_forward(&mut g, &nodes, input).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    fn rand_tensor4(rng: &mut Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.uniform()).collect();
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    #[test]
    fn e1_parameter_count_at_full_scale() {
        // E1 at channel_scale 1: 3*3*1*128 + 128 = 1280
        let (enc_in, enc_out, _, _) = generator_wiring(1.0);
        assert_eq!(9 * enc_in[0] * enc_out[0] + enc_out[0], 1280);
    }

    #[test]
    fn parameter_count_matches_analytic_formula() {
        for scale in [1.0, 0.25, 0.125, TEST_SCALE] {
            let mut rng = Rng::new(5);
            let p = GeneratorParams::init(scale, &mut rng).unwrap();
            assert_eq!(p.parameter_count(), generator_parameter_count(scale), "scale {scale}");
        }
    }

    #[test]
    fn he_uniform_init_within_bounds() {
        let mut rng = Rng::new(6);
        let p = GeneratorParams::init(0.25, &mut rng).unwrap();
        for conv in p.encoder.iter().chain(p.decoder.iter()) {
            let ci = conv.weight.shape()[1];
            let limit = libm::sqrt(6.0 / (ci * 9) as f64);
            assert!(conv.weight.data().iter().all(|v| v.abs() <= limit));
            // and not degenerate: spread should reach past half the limit
            assert!(conv.weight.data().iter().any(|v| v.abs() > 0.5 * limit));
            assert!(conv.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn discriminator_zero_weights_gives_half() {
        let mut rng = Rng::new(7);
        let mut p = DiscriminatorParams::init(TEST_SCALE, 16, 16, &mut rng).unwrap();
        for conv in p.convs.iter_mut() {
            conv.weight = Tensor::zeros(conv.weight.shape().to_vec());
        }
        p.dense_weight = Tensor::zeros(p.dense_weight.shape().to_vec());
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let mut rng = Rng::new(8);
        let cond = g.leaf(rand_tensor4(&mut rng, 2, 1, 16, 16), false);
        let cand = g.leaf(rand_tensor4(&mut rng, 2, 1, 16, 16), false);
        let out = discriminator_forward(&mut g, &nodes, cond, cand).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert!(g.value(out).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn discriminator_outputs_in_open_unit_interval() {
        let mut rng = Rng::new(9);
        let p = DiscriminatorParams::init(TEST_SCALE, 16, 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let cond = g.leaf(rand_tensor4(&mut rng, 3, 1, 16, 16), false);
        let cand = g.leaf(rand_tensor4(&mut rng, 3, 1, 16, 16), false);
        let out = discriminator_forward(&mut g, &nodes, cond, cand).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn discriminator_batch_elements_independent() {
        let mut rng = Rng::new(10);
        let p = DiscriminatorParams::init(TEST_SCALE, 16, 16, &mut rng).unwrap();
        let cond_a = rand_tensor4(&mut rng, 1, 1, 16, 16);
        let cand_a = rand_tensor4(&mut rng, 1, 1, 16, 16);
        let cond_b = rand_tensor4(&mut rng, 1, 1, 16, 16);
        let cand_b = rand_tensor4(&mut rng, 1, 1, 16, 16);
        let single = |cond: &Tensor, cand: &Tensor| {
            let mut g = Graph::new();
            let nodes = p.insert(&mut g, false);
            let c1 = g.leaf(cond.clone(), false);
            let c2 = g.leaf(cand.clone(), false);
            let out = discriminator_forward(&mut g, &nodes, c1, c2).unwrap();
            g.value(out).item()
        };
        let (pa, pb) = (single(&cond_a, &cand_a), single(&cond_b, &cand_b));
        // same pairs in one batch give the same probabilities
        let mut cond = cond_a.data().to_vec();
        cond.extend_from_slice(cond_b.data());
        let mut cand = cand_a.data().to_vec();
        cand.extend_from_slice(cand_b.data());
        let mut g = Graph::new();
        let nodes = p.insert(&mut g, false);
        let c1 = g.leaf(Tensor::new(vec![2, 1, 16, 16], cond).unwrap(), false);
        let c2 = g.leaf(Tensor::new(vec![2, 1, 16, 16], cand).unwrap(), false);
        let out = discriminator_forward(&mut g, &nodes, c1, c2).unwrap();
        assert!((g.value(out).data()[0] - pa).abs() < 1e-12);
        assert!((g.value(out).data()[1] - pb).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_closed_forms() {
        let mut g = Graph::new();
        let eps = 1e-6;
        // perfect discriminator: loss_D is order-eps small
        let d_real = g.constant(Tensor::scalar(1.0 - eps));
        let d_fake = g.constant(Tensor::scalar(eps));
        let x = g.constant(Tensor::full(vec![1, 1, 8, 8], 0.3));
        let (_, loss_d) = gan_losses(&mut g, d_real, d_fake, x, x, 100.0).unwrap();
        assert!(g.value(loss_d).item() < 3.0 * eps);

        // denoised == clean and d_fake = 0.5 -> loss_G = ln 2
        let d_half = g.constant(Tensor::scalar(0.5));
        let (loss_g, _) = gan_losses(&mut g, d_real, d_half, x, x, 100.0).unwrap();
        assert!((g.value(loss_g).item() - core::f64::consts::LN_2).abs() < 1e-12);

        // lambda 0 reduces loss_G to the adversarial term
        let y = g.constant(Tensor::full(vec![1, 1, 8, 8], 0.9));
        let (loss_g, _) = gan_losses(&mut g, d_real, d_half, x, y, 0.0).unwrap();
        assert!((g.value(loss_g).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn train_empty_dataset_rejected() {
        assert!(matches!(
            train(&tiny_config(), &[], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_zero_epochs_keeps_initialization() {
        let pairs = tiny_pairs(2, 16, 16);
        let config = TrainConfig { epochs: 0, ..tiny_config() };
        let (state, trace) = train(&config, &pairs, None).unwrap();
        assert!(trace.is_empty());
        let fresh = TrainState::init(&config, 16, 16).unwrap();
        assert_eq!(state.generator, fresh.generator);
        assert_eq!(state.discriminator, fresh.discriminator);
    }

    #[test]
    fn train_deterministic_per_seed() {
        let pairs = tiny_pairs(4, 16, 16);
        let config = tiny_config();
        let (s1, t1) = train(&config, &pairs, None).unwrap();
        let (s2, t2) = train(&config, &pairs, None).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1.generator, s2.generator);
        assert_eq!(s1.discriminator, s2.discriminator);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let pairs = tiny_pairs(4, 16, 16);
        let full_cfg = TrainConfig { epochs: 3, ..tiny_config() };
        let (full, _) = train(&full_cfg, &pairs, None).unwrap();

        let partial_cfg = TrainConfig { epochs: 2, ..tiny_config() };
        let (partial, _) = train(&partial_cfg, &pairs, None).unwrap();
        let ckpt = partial.to_checkpoint(&partial_cfg, 16, 16);
        let restored = TrainState::from_checkpoint(&ckpt, &full_cfg).unwrap();
        let (resumed, _) = train(&full_cfg, &pairs, Some(restored)).unwrap();
        assert_eq!(full.generator, resumed.generator);
        assert_eq!(full.discriminator, resumed.discriminator);
    }

    #[test]
    fn gradient_reaches_every_layer() {
        let pairs = tiny_pairs(2, 16, 16);
        let (noisy, clean) = batch_tensors(&pairs, &[0, 1]).unwrap();
        let mut rng = Rng::new(11);
        let gen = GeneratorParams::init(TEST_SCALE, &mut rng).unwrap();
        let disc = DiscriminatorParams::init(TEST_SCALE, 16, 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let gen_nodes = gen.insert(&mut g, true);
        let disc_nodes = disc.insert(&mut g, true);
        let noisy_id = g.leaf(noisy, false);
        let clean_id = g.leaf(clean, false);
        let fake = generator_forward(&mut g, &gen_nodes, noisy_id).unwrap();
        let d_real = discriminator_forward(&mut g, &disc_nodes, noisy_id, clean_id).unwrap();
        let d_fake = discriminator_forward(&mut g, &disc_nodes, noisy_id, fake).unwrap();
        let (loss_g, _) = gan_losses(&mut g, d_real, d_fake, fake, clean_id, 100.0).unwrap();
        g.backward(loss_g).unwrap();
        for (i, id) in gen_param_ids(&gen_nodes).into_iter().enumerate() {
            let grad = g.grad(id).expect("gradient present");
            assert!(grad.iter().any(|&v| v != 0.0), "generator parameter {i} has zero gradient");
        }
    }

    #[test]
    fn checkpoint_roundtrip_identical_forward() {
        let pairs = tiny_pairs(2, 16, 16);
        let config = tiny_config();
        let (state, _) = train(&config, &pairs, None).unwrap();
        let ckpt = state.to_checkpoint(&config, 16, 16);
        let restored = TrainState::from_checkpoint(&ckpt, &config).unwrap();
        assert_eq!(state.generator, restored.generator);
        assert_eq!(state.discriminator, restored.discriminator);
        let out_a = denoise(&state.generator, &pairs[0].0).unwrap();
        let out_b = denoise(&restored.generator, &pairs[0].0).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn denoise_shape_and_clamp() {
        let mut rng = Rng::new(12);
        let gen = GeneratorParams::init(TEST_SCALE, &mut rng).unwrap();
        let mut sino = rand_sinogram(&mut rng, 16, 24);
        sino.set_counts_scale(50.0);
        let out = denoise(&gen, &sino).unwrap();
        assert_eq!(out.num_views(), 16);
        assert_eq!(out.num_bins(), 24);
        assert_eq!(out.counts_scale(), 50.0);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        // applying twice also succeeds (no shape drift)
        let again = denoise(&gen, &out).unwrap();
        assert_eq!(again.num_views(), 16);
    }
}
