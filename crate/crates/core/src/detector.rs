//! Multi-task encoder–decoder landmark detector.
//!
//! The network maps a normalized image to `3K` channels: `K` heatmap logits
//! (sigmoid applied at the output) followed by `K` x-offset and `K` y-offset
//! maps. The per-landmark loss is
//!
//! ```text
//! L_i = α · BCE(target_heat_i, pred_heat_i)
//!     + Σ_{o ∈ {x,y}} mean_{p : target_heat_i(p) > 0} |target_o_i(p) − pred_o_i(p)|
//! ```
//!
//! with BCE averaged over all pixels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecConfig, LandmarkSet, MapStack};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvGrads, Real, Tensor};

/// Normalized input image, values in `[-1, 1]`.
pub type Image = Tensor<f32>;

/// Shape and width layout of the U-Net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub landmarks: usize,
    /// Channel width per encoder level; the last entry is the bottleneck.
    pub widths: Vec<usize>,
}

impl Architecture {
    /// Number of pooling levels.
    pub fn levels(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid("architecture needs at least one level and non-zero widths"));
        }
        if self.in_channels == 0 || self.landmarks == 0 {
            return Err(Error::invalid("architecture needs input channels and landmarks"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Preset families for the whole pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelScale {
    /// 640×800 inputs, σ = 40.
    Full,
    /// 128×128 inputs, σ = 8, three pooling levels.
    #[default]
    Desk,
}

impl ModelScale {
    pub fn input(&self, channels: usize) -> InputSpec {
        match self {
            ModelScale::Full => InputSpec {
                channels,
                height: 800,
                width: 640,
            },
            ModelScale::Desk => InputSpec {
                channels,
                height: 128,
                width: 128,
            },
        }
    }

    pub fn architecture(&self, in_channels: usize, landmarks: usize) -> Architecture {
        let widths = match self {
            ModelScale::Full => vec![16, 32, 64, 128, 256],
            ModelScale::Desk => vec![8, 16, 32, 32],
        };
        Architecture {
            in_channels,
            landmarks,
            widths,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            ModelScale::Full => 40.0,
            ModelScale::Desk => 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Heatmap loss weight.
    pub alpha: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma: f64,
    pub scale: ModelScale,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            alpha: 1.0,
            learning_rate: 1e-3,
            decay: 0.1,
            decay_every: 100,
            epochs: 230,
            batch_size: 8,
            sigma: 40.0,
            scale: ModelScale::Full,
        }
    }

    /// Heat maps cover about 1% of a 128x128 image, so the heat term is weighted up
    /// against the mask-averaged offset term.
    pub fn desk() -> Self {
        Self {
            alpha: 100.0,
            learning_rate: 2e-3,
            decay: 0.1,
            decay_every: 15,
            epochs: 20,
            batch_size: 8,
            sigma: 8.0,
            scale: ModelScale::Desk,
        }
    }

    pub fn for_scale(scale: ModelScale) -> Self {
        match scale {
            ModelScale::Full => Self::full(),
            ModelScale::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::invalid("batch size and decay interval must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Per-landmark decomposition of the detector loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_landmark: Vec<f64>,
    pub heatmap: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LossBreakdown {
    fn from_parts(alpha: f64, heatmap: Vec<f64>, offset: Vec<f64>) -> Self {
        let per_landmark: Vec<f64> = heatmap
            .iter()
            .zip(&offset)
            .map(|(h, o)| alpha * h + o)
            .collect();
        Self {
            total: per_landmark.iter().sum(),
            per_landmark,
            heatmap,
            offset,
        }
    }

    pub fn weighted_total(&self, weights: &[f64]) -> f64 {
        self.per_landmark.iter().zip(weights).map(|(l, w)| l * w).sum()
    }
}

fn check_target<T: Real>(raw: &Tensor<T>, target: &MapStack) -> Result<usize> {
    let k = target.landmarks();
    if raw.channels != 3 * k || raw.height != target.height() || raw.width != target.width() {
        return Err(Error::shape(
            format!("{}x{}x{}", 3 * k, target.height(), target.width()),
            format!("{}x{}x{}", raw.channels, raw.height, raw.width),
        ));
    }
    Ok(k)
}

/// `softplus(z) − y·z`, the binary cross-entropy of `sigmoid(z)` against `y`.
fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn masked_l1(pred: impl Iterator<Item = f64>, target: &[f32], mask: &[f32]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, &t), &m) in pred.zip(target).zip(mask) {
        if m > 0.0 {
            sum += (p - t as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Loss of raw network output (heatmap logits + offsets) against `target`.
pub fn loss_from_logits<T: Real>(raw: &Tensor<T>, target: &MapStack, alpha: f64) -> Result<LossBreakdown> {
    let k = check_target(raw, target)?;
    let n = raw.plane() as f64;
    let mut heat = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k);
    for i in 0..k {
        let th = target.heatmap(i);
        let h: f64 = raw
            .channel(i)
            .iter()
            .zip(th)
            .map(|(&z, &y)| bce_logit(z.to_f64().unwrap(), y as f64))
            .sum::<f64>()
            / n;
        let to_f64 = |v: &T| v.to_f64().unwrap();
        let ox = masked_l1(raw.channel(k + i).iter().map(to_f64), target.offset_x(i), th);
        let oy = masked_l1(raw.channel(2 * k + i).iter().map(to_f64), target.offset_y(i), th);
        heat.push(h);
        off.push(ox + oy);
    }
    Ok(LossBreakdown::from_parts(alpha, heat, off))
}

/// Gradient of `Σ_i weights[i]·L_i` with respect to the raw network output.
pub fn loss_gradient<T: Real>(
    raw: &Tensor<T>,
    target: &MapStack,
    alpha: f64,
    weights: &[f64],
) -> Result<Tensor<T>> {
    let k = check_target(raw, target)?;
    if weights.len() != k {
        return Err(Error::shape(format!("{k} weights"), weights.len()));
    }
    let n = raw.plane();
    let mut grad = Tensor::zeros(raw.channels, raw.height, raw.width);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let th = target.heatmap(i);
        let scale = alpha * w / n as f64;
        for ((g, &z), &y) in grad.channel_mut(i).iter_mut().zip(raw.channel(i)).zip(th) {
            *g = T::from_f64(scale * (sigmoid(z.to_f64().unwrap()) - y as f64));
        }
        let count = th.iter().filter(|&&m| m > 0.0).count();
        if count == 0 {
            continue;
        }
        let step = w / count as f64;
        for (c, tgt) in [(k + i, target.offset_x(i)), (2 * k + i, target.offset_y(i))] {
            let pred: Vec<T> = raw.channel(c).to_vec();
            for (j, g) in grad.channel_mut(c).iter_mut().enumerate() {
                if th[j] > 0.0 {
                    let d = pred[j].to_f64().unwrap() - tgt[j] as f64;
                    *g = T::from_f64(if d > 0.0 {
                        step
                    } else if d < 0.0 {
                        -step
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Ok(grad)
}

/// Loss between two map stacks whose heatmaps are probabilities.
pub fn loss(pred: &MapStack, target: &MapStack, alpha: f64) -> Result<LossBreakdown> {
    pred.check_same_shape(target)?;
    let k = pred.landmarks();
    let eps = 1e-7;
    let n = (pred.height() * pred.width()) as f64;
    let mut heat = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k);
    for i in 0..k {
        let th = target.heatmap(i);
        let h: f64 = pred
            .heatmap(i)
            .iter()
            .zip(th)
            .map(|(&p, &y)| {
                let p = (p as f64).clamp(eps, 1.0 - eps);
                let y = y as f64;
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ox = masked_l1(pred.offset_x(i).iter().map(|&v| v as f64), target.offset_x(i), th);
        let oy = masked_l1(pred.offset_y(i).iter().map(|&v| v as f64), target.offset_y(i), th);
        heat.push(h);
        off.push(ox + oy);
    }
    Ok(LossBreakdown::from_parts(alpha, heat, off))
}

/// Cached activations of one forward pass, needed for backpropagation.
struct Activations<T> {
    enc_in: Vec<Tensor<T>>,
    enc_a: Vec<Tensor<T>>,
    enc_b: Vec<Tensor<T>>,
    pool_idx: Vec<Vec<u32>>,
    mid_in: Tensor<T>,
    mid_a: Tensor<T>,
    mid_b: Tensor<T>,
    dec_in: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    output: Tensor<T>,
}

/// The encoder–decoder network itself, generic over its scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub arch: Architecture,
    pub encoder: Vec<[Conv2d<T>; 2]>,
    pub bottleneck: [Conv2d<T>; 2],
    /// `decoder[l]` fuses the upsampled deeper features with encoder level `l`.
    pub decoder: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

/// Initial heat logit; sigmoid(-4) is close to the fraction of pixels inside a landmark mask.
pub const HEAT_PRIOR_LOGIT: f64 = -4.0;

impl<T: Real> UNet<T> {
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let l = arch.levels();
        let w = &arch.widths;
        let mut encoder = Vec::with_capacity(l);
        let mut cin = arch.in_channels;
        for &width in &w[..l] {
            encoder.push([Conv2d::init(cin, width, 3, rng), Conv2d::init(width, width, 3, rng)]);
            cin = width;
        }
        let bottleneck = [Conv2d::init(cin, w[l], 3, rng), Conv2d::init(w[l], w[l], 3, rng)];
        let decoder = (0..l)
            .map(|lvl| Conv2d::init(w[lvl + 1] + w[lvl], w[lvl], 3, rng))
            .collect();
        let mut head = Conv2d::init(w[0], 3 * arch.landmarks, 1, rng);
        for b in &mut head.bias[..arch.landmarks] {
            *b = T::from(HEAT_PRIOR_LOGIT).expect("representable");
        }
        Ok(Self {
            arch,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    /// All layers in a fixed order: encoder pairs, bottleneck pair, decoder, head.
    pub fn layers(&self) -> Vec<&Conv2d<T>> {
        let mut v: Vec<&Conv2d<T>> = self.encoder.iter().flatten().collect();
        v.extend(self.bottleneck.iter());
        v.extend(self.decoder.iter());
        v.push(&self.head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v: Vec<&mut Conv2d<T>> = self.encoder.iter_mut().flatten().collect();
        v.extend(self.bottleneck.iter_mut());
        v.extend(self.decoder.iter_mut());
        v.push(&mut self.head);
        v
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|c| c.num_params()).sum()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let m = 1 << self.arch.levels();
        if x.channels != self.arch.in_channels || x.height % m != 0 || x.width % m != 0 || x.height == 0 {
            return Err(Error::shape(
                format!("{} channels, sides divisible by {m}", self.arch.in_channels),
                format!("{}x{}x{}", x.channels, x.height, x.width),
            ));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>) -> Activations<T> {
        let l = self.arch.levels();
        let mut enc_in = Vec::with_capacity(l);
        let mut enc_a = Vec::with_capacity(l);
        let mut enc_b = Vec::with_capacity(l);
        let mut pool_idx = Vec::with_capacity(l);
        let mut cur = x.clone();
        for [ca, cb] in &self.encoder {
            let mut a = ca.forward(&cur);
            nn::relu_inplace(&mut a);
            let mut b = cb.forward(&a);
            nn::relu_inplace(&mut b);
            let (p, idx) = nn::max_pool2(&b);
            enc_in.push(std::mem::replace(&mut cur, p));
            enc_a.push(a);
            enc_b.push(b);
            pool_idx.push(idx);
        }
        let mut mid_a = self.bottleneck[0].forward(&cur);
        nn::relu_inplace(&mut mid_a);
        let mut mid_b = self.bottleneck[1].forward(&mid_a);
        nn::relu_inplace(&mut mid_b);

        let mut dec_in: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut dec_out: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut deeper = mid_b.clone();
        for lvl in (0..l).rev() {
            let c = nn::upsample2(&deeper).concat(&enc_b[lvl]);
            let mut y = self.decoder[lvl].forward(&c);
            nn::relu_inplace(&mut y);
            deeper = y.clone();
            dec_in.push(c);
            dec_out.push(y);
        }
        // Stored deepest-first above; index by level instead.
        dec_in.reverse();
        dec_out.reverse();
        let output = self.head.forward(&dec_out[0]);
        Activations {
            enc_in,
            enc_a,
            enc_b,
            pool_idx,
            mid_in: cur,
            mid_a,
            mid_b,
            dec_in,
            dec_out,
            output,
        }
    }

    /// Raw output: heatmap logits followed by offsets.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.run(x).output)
    }

    fn backward(
        &self,
        acts: &Activations<T>,
        grad_out: &Tensor<T>,
        mut grads: Option<&mut [ConvGrads<T>]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let l = self.arch.levels();
        macro_rules! slot {
            ($i:expr) => {
                grads.as_deref_mut().map(|g| &mut g[$i])
            };
        }
        let mut dy = self
            .head
            .backward(&acts.dec_out[0], grad_out, slot!(3 * l + 2), true)
            .expect("input gradient requested");

        let mut dskip: Vec<Tensor<T>> = Vec::with_capacity(l);
        for lvl in 0..l {
            nn::relu_backward_inplace(&acts.dec_out[lvl], &mut dy);
            let dc = self.decoder[lvl]
                .backward(&acts.dec_in[lvl], &dy, slot!(2 * l + 2 + lvl), true)
                .expect("input gradient requested");
            let deeper_channels = self.arch.widths[lvl + 1];
            let (du, ds) = dc.split(deeper_channels);
            dskip.push(ds);
            dy = nn::upsample2_backward(&du);
        }

        nn::relu_backward_inplace(&acts.mid_b, &mut dy);
        let mut da = self.bottleneck[1]
            .backward(&acts.mid_a, &dy, slot!(2 * l + 1), true)
            .expect("input gradient requested");
        nn::relu_backward_inplace(&acts.mid_a, &mut da);
        let mut dx = self.bottleneck[0].backward(&acts.mid_in, &da, slot!(2 * l), true);

        for lvl in (0..l).rev() {
            let b = &acts.enc_b[lvl];
            let mut db = nn::max_pool2_backward(
                dx.as_ref().expect("input gradient requested"),
                &acts.pool_idx[lvl],
                (b.channels, b.height, b.width),
            );
            for (g, s) in db.data.iter_mut().zip(&dskip[lvl].data) {
                *g = *g + *s;
            }
            nn::relu_backward_inplace(b, &mut db);
            let mut da = self.encoder[lvl][1]
                .backward(&acts.enc_a[lvl], &db, slot!(2 * lvl + 1), true)
                .expect("input gradient requested");
            nn::relu_backward_inplace(&acts.enc_a[lvl], &mut da);
            let need = lvl > 0 || need_input;
            dx = self.encoder[lvl][0].backward(&acts.enc_in[lvl], &da, slot!(2 * lvl), need);
        }
        dx
    }

    /// Weighted loss against `target` and its exact gradient with respect to the input.
    pub fn input_gradient(
        &self,
        x: &Tensor<T>,
        target: &MapStack,
        alpha: f64,
        weights: &[f64],
    ) -> Result<(LossBreakdown, Tensor<T>)> {
        let step = self.input_gradient_with(x, target, alpha, |_| weights.to_vec())?;
        Ok((step.losses, step.gradient))
    }

    /// Like [`UNet::input_gradient`], with weights chosen from the losses of the
    /// same forward pass. The weights are constants for the backward pass.
    pub fn input_gradient_with(
        &self,
        x: &Tensor<T>,
        target: &MapStack,
        alpha: f64,
        weigh: impl FnOnce(&LossBreakdown) -> Vec<f64>,
    ) -> Result<InputGradient<T>> {
        self.check_input(x)?;
        let mut acts = self.run(x);
        let losses = loss_from_logits(&acts.output, target, alpha)?;
        let weights = weigh(&losses);
        if weights.len() != losses.per_landmark.len() {
            return Err(Error::shape(losses.per_landmark.len(), weights.len()));
        }
        let g = loss_gradient(&acts.output, target, alpha, &weights)?;
        let gradient = self.backward(&acts, &g, None, true).expect("input gradient requested");
        let output = std::mem::replace(&mut acts.output, Tensor::zeros(0, 0, 0));
        Ok(InputGradient {
            losses,
            weights,
            gradient,
            output,
        })
    }

    /// Loss of one sample and the accumulated parameter gradients (scaled by `scale`).
    fn sample_gradients(
        &self,
        x: &Tensor<T>,
        target: &MapStack,
        alpha: f64,
        scale: f64,
    ) -> Result<(LossBreakdown, Vec<ConvGrads<T>>)> {
        let acts = self.run(x);
        let losses = loss_from_logits(&acts.output, target, alpha)?;
        let weights = vec![scale; self.arch.landmarks];
        let g = loss_gradient(&acts.output, target, alpha, &weights)?;
        let mut grads: Vec<ConvGrads<T>> = self.layers().into_iter().map(ConvGrads::zeros_like).collect();
        self.backward(&acts, &g, Some(&mut grads), false);
        Ok((losses, grads))
    }
}

/// Everything one forward/backward pass yields for an input-gradient query.
#[derive(Debug, Clone)]
pub struct InputGradient<T> {
    pub losses: LossBreakdown,
    pub weights: Vec<f64>,
    pub gradient: Tensor<T>,
    /// Raw network output of the same pass.
    pub output: Tensor<T>,
}

/// Turn raw network output into a map stack (sigmoid on heatmap channels).
pub fn raw_to_maps<T: Real>(raw: &Tensor<T>, landmarks: usize) -> MapStack {
    let k_plane = landmarks * raw.plane();
    let data = raw
        .data
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let v = v.to_f64().unwrap();
            (if j < k_plane { sigmoid(v) } else { v }) as f32
        })
        .collect();
    MapStack::from_vec(landmarks, raw.height, raw.width, data).expect("raw output has 3K channels")
}

/// A trained (or freshly initialized) detector with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub net: UNet<f32>,
    pub input: InputSpec,
    pub codec: CodecConfig,
    pub alpha: f64,
    pub train_config: Option<TrainConfig>,
}

impl DetectorModel {
    pub fn init<R: Rng + ?Sized>(
        arch: Architecture,
        input: InputSpec,
        codec: CodecConfig,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        codec.validate()?;
        if arch.in_channels != input.channels {
            return Err(Error::invalid("architecture and input channel counts differ"));
        }
        let net = UNet::init(arch, rng)?;
        let probe = Tensor::<f32>::zeros(input.channels, input.height, input.width);
        net.check_input(&probe)?;
        Ok(Self {
            net,
            input,
            codec,
            alpha,
            train_config: None,
        })
    }

    pub fn landmarks(&self) -> usize {
        self.net.arch.landmarks
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.input;
        if (image.channels, image.height, image.width) != (s.channels, s.height, s.width) {
            return Err(Error::shape(
                format!("{}x{}x{}", s.channels, s.height, s.width),
                format!("{}x{}x{}", image.channels, image.height, image.width),
            ));
        }
        Ok(())
    }

    pub fn forward_raw(&self, image: &Image) -> Result<Tensor<f32>> {
        self.check_image(image)?;
        self.net.forward(image)
    }

    pub fn forward(&self, image: &Image) -> Result<MapStack> {
        Ok(raw_to_maps(&self.forward_raw(image)?, self.landmarks()))
    }

    pub fn predict_landmarks(&self, image: &Image) -> Result<LandmarkSet> {
        Ok(codec::decode(&self.forward(image)?, &self.codec))
    }

    /// Exact gradient of `Σ_j weights[j]·L_j` with respect to every input pixel.
    pub fn input_gradient(
        &self,
        image: &Image,
        target: &MapStack,
        weights: &[f64],
    ) -> Result<(LossBreakdown, Image)> {
        self.check_image(image)?;
        self.net.input_gradient(image, target, self.alpha, weights)
    }

    pub fn input_gradient_with(
        &self,
        image: &Image,
        target: &MapStack,
        weigh: impl FnOnce(&LossBreakdown) -> Vec<f64>,
    ) -> Result<InputGradient<f32>> {
        self.check_image(image)?;
        self.net.input_gradient_with(image, target, self.alpha, weigh)
    }

    pub fn loss(&self, image: &Image, target: &MapStack) -> Result<LossBreakdown> {
        let raw = self.forward_raw(image)?;
        loss_from_logits(&raw, target, self.alpha)
    }

    /// Order-sensitive FNV-1a digest of all parameter bits.
    pub fn parameter_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in self.net.layers() {
            for v in layer.weight.iter().chain(&layer.bias) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Checkpoint::from_model(self);
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Checkpoint = serde_json::from_str(&text)?;
        file.into_model()
    }
}

const CHECKPOINT_FORMAT: &str = "landmark-attack/detector";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture: Architecture,
    input: InputSpec,
    codec: CodecConfig,
    alpha: f64,
    train_config: Option<TrainConfig>,
    layers: Vec<LayerRecord>,
}

impl Checkpoint {
    fn from_model(m: &DetectorModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: m.net.arch.clone(),
            input: m.input,
            codec: m.codec,
            alpha: m.alpha,
            train_config: m.train_config.clone(),
            layers: m
                .net
                .layers()
                .into_iter()
                .map(|c| LayerRecord {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    weight: c.weight.clone(),
                    bias: c.bias.clone(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<DetectorModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a detector checkpoint: {}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        // Build the skeleton deterministically, then overwrite every layer.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = UNet::<f32>::init(self.architecture, &mut rng)?;
        let mut layers = net.layers_mut();
        if layers.len() != self.layers.len() {
            return Err(Error::shape(format!("{} layers", layers.len()), self.layers.len()));
        }
        for (dst, src) in layers.iter_mut().zip(self.layers) {
            if (dst.in_channels, dst.out_channels, dst.kernel) != (src.in_channels, src.out_channels, src.kernel)
                || dst.weight.len() != src.weight.len()
                || dst.bias.len() != src.bias.len()
            {
                return Err(Error::invalid("checkpoint layer does not match its architecture"));
            }
            dst.weight = src.weight;
            dst.bias = src.bias;
        }
        self.codec.validate()?;
        Ok(DetectorModel {
            net,
            input: self.input,
            codec: self.codec,
            alpha: self.alpha,
            train_config: self.train_config,
        })
    }
}

/// One training example: a normalized image and its resized-frame landmarks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &UNet<f32>) -> Self {
        let sizes: Vec<usize> = net
            .layers()
            .iter()
            .flat_map(|c| [c.weight.len(), c.bias.len()])
            .collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut UNet<f32>, grads: &[ConvGrads<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (Self::BETA1 as f32, Self::BETA2 as f32, Self::EPS as f32);
        let params = net
            .layers_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias]);
        let gs = grads.iter().flat_map(|g| [&g.weight, &g.bias]);
        for (((p, g), m), v) in params.zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Train `model` in place with Adam on `samples`.
///
/// `on_epoch` observes each finished epoch. A non-finite loss aborts training.
pub fn train<R: Rng + ?Sized>(
    model: &mut DetectorModel,
    samples: &[Sample],
    config: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in samples {
        model.check_image(&s.image)?;
        if s.landmarks.len() != model.landmarks() {
            return Err(Error::shape(format!("{} landmarks", model.landmarks()), s.landmarks.len()));
        }
    }
    let codec = CodecConfig {
        sigma: config.sigma,
        ..model.codec
    };
    codec.validate()?;
    model.codec = codec;
    model.alpha = config.alpha;

    let mut adam = Adam::new(&model.net);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let net = &model.net;
            let results: Vec<Result<(LossBreakdown, Vec<ConvGrads<f32>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let target = codec::encode(&s.landmarks, s.image.height, s.image.width, &codec)?;
                    net.sample_gradients(&s.image, &target, config.alpha, scale)
                })
                .collect();
            let mut total: Option<Vec<ConvGrads<f32>>> = None;
            for r in results {
                let (losses, grads) = r?;
                if !losses.total.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("training epoch {epoch}"),
                        detail: format!("per-landmark losses {:?}", losses.per_landmark),
                    });
                }
                loss_sum += losses.total;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.weight.iter_mut().zip(&g.weight) {
                                *x += y;
                            }
                            for (x, y) in a.bias.iter_mut().zip(&g.bias) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            adam.step(&mut model.net, &total.expect("non-empty batch"), lr);
        }
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / samples.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    model.train_config = Some(config.clone());
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Frame, Point};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 1,
            landmarks: 2,
            widths: vec![2, 3, 3],
        }
    }

    fn tiny_model(seed: u64) -> DetectorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = InputSpec {
            channels: 1,
            height: 16,
            width: 16,
        };
        DetectorModel::init(tiny_arch(), input, CodecConfig::new(3.0, 0.6).unwrap(), 1.0, &mut rng).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn target(model: &DetectorModel) -> MapStack {
        let set = LandmarkSet::new(
            vec![Point::new(5.0, 6.0), Point::new(11.0, 9.0)],
            Frame::resized(16, 16),
        )
        .unwrap();
        codec::encode(&set, 16, 16, &model.codec).unwrap()
    }

    #[test]
    fn single_pixel_loss_matches_hand_computation() {
        let pred = MapStack::from_vec(1, 1, 1, vec![0.5, 0.0, 0.0]).unwrap();
        let target = MapStack::from_vec(1, 1, 1, vec![1.0, 0.2, -0.1]).unwrap();
        let l = loss(&pred, &target, 1.0).unwrap();
        // -ln(0.5) + 0.2 + 0.1
        assert!((l.total - 0.993_147_180_559_945_2).abs() < 1e-6);
        assert!((l.heatmap[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn identical_maps_have_zero_offset_loss_and_entropy_bce() {
        let model = tiny_model(1);
        let t = target(&model);
        let l = loss(&t, &t, 1.0).unwrap();
        assert!(l.offset.iter().all(|&o| o == 0.0));
        for i in 0..2 {
            let entropy: f64 = t
                .heatmap(i)
                .iter()
                .map(|&y| {
                    let y = y as f64;
                    if y <= 0.0 || y >= 1.0 {
                        0.0
                    } else {
                        -(y * y.ln() + (1.0 - y) * (1.0 - y).ln())
                    }
                })
                .sum::<f64>()
                / 256.0;
            assert!((l.heatmap[i] - entropy).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_target_mask_kills_offset_term() {
        let mut t = MapStack::zeros(1, 4, 4);
        t.offset_x_mut(0)[3] = 0.7;
        let mut p = MapStack::zeros(1, 4, 4);
        p.heatmap_mut(0).fill(0.3);
        p.offset_x_mut(0).fill(5.0);
        p.offset_y_mut(0).fill(-2.0);
        let l = loss(&p, &t, 1.0).unwrap();
        assert_eq!(l.offset[0], 0.0);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        assert!(loss(&MapStack::zeros(1, 4, 4), &MapStack::zeros(2, 4, 4), 1.0).is_err());
        let model = tiny_model(1);
        assert!(model.forward(&random_image(1, 8, 8)).is_err());
    }

    #[test]
    fn logit_and_probability_routes_agree() {
        let model = tiny_model(2);
        let img = random_image(3, 16, 16);
        let t = target(&model);
        let raw = model.forward_raw(&img).unwrap();
        let a = loss_from_logits(&raw, &t, 1.0).unwrap();
        let b = loss(&raw_to_maps(&raw, 2), &t, 1.0).unwrap();
        for (x, y) in a.per_landmark.iter().zip(&b.per_landmark) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        let sum: f64 = a.per_landmark.iter().sum();
        assert!((a.total - sum).abs() <= 1e-6 * sum.abs());
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let model = tiny_model(4);
        let img = random_image(5, 16, 16);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a, b);
        for i in 0..2 {
            assert!(a.heatmap(i).iter().all(|&h| h > 0.0 && h < 1.0));
        }
        assert_eq!(model.predict_landmarks(&img).unwrap(), codec::decode(&a, &model.codec));
    }

    #[test]
    fn input_gradient_is_linear_in_weights() {
        let model = tiny_model(6);
        let img = random_image(7, 16, 16);
        let t = target(&model);
        let (_, g0) = model.input_gradient(&img, &t, &[0.0, 0.0]).unwrap();
        assert!(g0.data.iter().all(|&v| v == 0.0));
        let (_, g1) = model.input_gradient(&img, &t, &[0.7, 1.3]).unwrap();
        let (_, g2) = model.input_gradient(&img, &t, &[1.4, 2.6]).unwrap();
        for (a, b) in g1.data.iter().zip(&g2.data) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} {b}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = UNet::<f64>::init(tiny_arch(), &mut rng).unwrap();
        let x: Tensor<f64> = Tensor::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let model = tiny_model(1);
        let t = target(&model);
        let w = [0.8, 1.2];
        let (_, g) = net.input_gradient(&x, &t, 1.0, &w).unwrap();
        let f = |x: &Tensor<f64>| loss_from_logits(&net.forward(x).unwrap(), &t, 1.0).unwrap().weighted_total(&w);
        let h = 1e-6;
        let mut checked = 0;
        for j in (0..256).step_by(7) {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(g.data[j].abs()).max(1e-8);
            assert!((fd - g.data[j]).abs() / denom < 1e-3, "pixel {j}: fd {fd} vs {}", g.data[j]);
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn parameter_gradients_match_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = UNet::<f64>::init(tiny_arch(), &mut rng).unwrap();
        for layer in net.layers_mut() {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        let x: Tensor<f64> = Tensor::from_vec(1, 16, 16, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = target(&tiny_model(1));
        let (_, grads) = net.sample_gradients(&x, &t, 1.0, 1.0).unwrap();
        let h = 1e-6;
        let n_layers = net.layers().len();
        let mut checked = 0;
        for l in 0..n_layers {
            let n = net.layers()[l].weight.len();
            for j in [0, n / 3, n - 1] {
                let f = |net: &UNet<f64>| loss_from_logits(&net.forward(&x).unwrap(), &t, 1.0).unwrap().total;
                let orig = net.layers()[l].weight[j];
                net.layers_mut()[l].weight[j] = orig + h;
                let fp = f(&net);
                net.layers_mut()[l].weight[j] = orig - h;
                let fm = f(&net);
                net.layers_mut()[l].weight[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let g = grads[l].weight[j];
                let denom = fd.abs().max(g.abs()).max(1e-7);
                assert!((fd - g).abs() / denom < 1e-3, "layer {l} weight {j}: fd {fd} vs {g}");
                checked += 1;
            }
            let f = |net: &UNet<f64>| loss_from_logits(&net.forward(&x).unwrap(), &t, 1.0).unwrap().total;
            let orig = net.layers()[l].bias[0];
            net.layers_mut()[l].bias[0] = orig + h;
            let fp = f(&net);
            net.layers_mut()[l].bias[0] = orig - h;
            let fm = f(&net);
            net.layers_mut()[l].bias[0] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[l].bias[0];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-7) < 1e-3, "layer {l} bias: fd {fd} vs {g}");
        }
        assert!(checked >= 3 * n_layers);
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut model = tiny_model(9);
        let before = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TrainConfig {
            epochs: 0,
            sigma: 3.0,
            ..TrainConfig::desk()
        };
        let hist = train(&mut model, &[], &cfg, &mut rng, |_| {}).unwrap();
        assert!(hist.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn training_reduces_loss() {
        let arch = Architecture {
            widths: vec![6, 8, 8],
            ..tiny_arch()
        };
        let input = InputSpec {
            channels: 1,
            height: 16,
            width: 16,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = DetectorModel::init(arch, input, CodecConfig::new(3.0, 0.6).unwrap(), 1.0, &mut init_rng).unwrap();
        let img = random_image(11, 16, 16);
        let lm = LandmarkSet::new(vec![Point::new(5.0, 6.0), Point::new(11.0, 9.0)], Frame::resized(16, 16)).unwrap();
        let samples = vec![Sample { image: img, landmarks: lm }];
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 1,
            sigma: 3.0,
            learning_rate: 1e-2,
            alpha: 1.0,
            decay_every: 1000,
            ..TrainConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hist = train(&mut model, &samples, &cfg, &mut rng, |_| {}).unwrap();
        assert!(hist.last().unwrap().mean_loss < 0.5 * hist[0].mean_loss, "{:?}", hist.iter().map(|h| h.mean_loss).collect::<Vec<_>>());
        assert_eq!(model.train_config.as_ref().unwrap().epochs, 150);
    }

    #[test]
    fn full_preset_hyperparameters() {
        let c = TrainConfig::full();
        assert_eq!((c.epochs, c.batch_size, c.decay_every), (230, 8, 100));
        assert_eq!((c.alpha, c.learning_rate, c.decay, c.sigma), (1.0, 1e-3, 0.1, 40.0));
        assert!((c.learning_rate_at(100) - 1e-4).abs() < 1e-12);
        assert!((c.learning_rate_at(229) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = tiny_model(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = DetectorModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.parameter_digest(), model.parameter_digest());
    }
}
