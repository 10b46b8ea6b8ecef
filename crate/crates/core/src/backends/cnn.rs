//! Batch-norm CNN used by the followers.
//!
//! The input is average-pooled by `stride`, then passed through a chain of
//! sparse 1x1 convolutions (each output channel mixes `fan_in` input
//! channels), each followed by batch norm and ReLU. A dense 1x1 head produces
//! class probabilities, which are upsampled back to the input size.
//!
//! The default layout has 60 BN layers holding 17872 channels in total.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::weights::{read_arrays_into, write_arrays, Linear};
use super::SegPrediction;
use crate::error::{Error, Result};
use crate::numerics::{image_dims, softmax_in_place, Tensor};
use crate::seed::rng_for;
use crate::tta::{channel_moments, check_set_layout, NormStats, StatSet};

pub const DEFAULT_BN_LAYERS: usize = 60;
pub const DEFAULT_BN_CHANNELS: usize = 17872;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub num_classes: usize,
    /// Channel count of every BN layer, input to output.
    pub layer_channels: Vec<usize>,
    pub fan_in: usize,
    /// Input downsampling factor; input dims must be multiples of it.
    pub stride: usize,
}

impl CnnConfig {
    /// Default 60-layer, 17872-channel layout.
    pub fn new(num_classes: usize) -> Self {
        Self::uniform(num_classes, DEFAULT_BN_LAYERS, DEFAULT_BN_CHANNELS, 4, 8)
            .expect("default layout is valid")
    }

    /// Spreads `total_channels` over `layers` as evenly as possible, giving
    /// the remainder to the earliest layers.
    pub fn uniform(num_classes: usize, layers: usize, total_channels: usize, fan_in: usize, stride: usize) -> Result<Self> {
        if layers == 0 || total_channels < layers {
            return Err(Error::Config(format!(
                "{total_channels} channels cannot fill {layers} BN layers"
            )));
        }
        let base = total_channels / layers;
        let extra = total_channels % layers;
        let cfg = Self {
            num_classes,
            layer_channels: (0..layers).map(|l| base + usize::from(l < extra)).collect(),
            fan_in,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_channels(&self) -> usize {
        self.layer_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.layer_channels.is_empty() || self.layer_channels.contains(&0) {
            return Err(Error::Config("every BN layer needs at least one channel".into()));
        }
        if self.fan_in == 0 || self.stride == 0 {
            return Err(Error::Config("fan_in and stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the stored (or adapted) statistics only.
    Frozen,
    /// Additionally report each BN layer's batch statistics for this input.
    Collecting,
}

#[derive(Clone, Debug, PartialEq)]
struct BnLayer {
    /// Input channel index of each tap, `[out_channels, fan_in]`.
    sources: Vec<u32>,
    weight: Vec<f32>,
    bias: Vec<f32>,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    fan_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnBackend {
    config: CnnConfig,
    seed: u64,
    layers: Vec<BnLayer>,
    running: StatSet,
    head: Linear,
}

pub struct CnnOutput {
    pub prediction: SegPrediction,
    /// Batch statistics of every BN layer (collecting mode only).
    pub batch_stats: Option<StatSet>,
    pub macs: u64,
}

enum Normalize<'a> {
    Stored(&'a [NormStats]),
    Batch,
}

impl CnnBackend {
    /// Seeded weights with running statistics at `(0, 1)` until calibrated.
    pub fn new(config: CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x63_6e6e]);
        let mut layers = Vec::with_capacity(config.layer_channels.len());
        let mut c_in = 3usize;
        for &c_out in &config.layer_channels {
            let fan_in = config.fan_in.min(c_in);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let sources = (0..c_out * fan_in).map(|_| rng.gen_range(0..c_in as u32)).collect();
            let weight = (0..c_out * fan_in).map(|_| rng.gen_range(-bound..=bound)).collect();
            let bias = (0..c_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            layers.push(BnLayer {
                sources,
                weight,
                bias,
                gamma: vec![1.0; c_out],
                beta: vec![0.0; c_out],
                fan_in,
            });
            c_in = c_out;
        }
        let head = Linear::init(&mut rng, c_in, config.num_classes);
        let running = config.layer_channels.iter().map(|&c| NormStats::standard(c)).collect();
        Ok(Self { config, seed, layers, running, head })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Training-time (running) statistics of every BN layer.
    pub fn running_stats(&self) -> &[NormStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: StatSet) -> Result<()> {
        check_set_layout(&self.running, &stats)?;
        self.running = stats;
        Ok(())
    }

    /// Sets the running statistics to the mean of per-image batch statistics
    /// over `images`, normalizing each forward pass with its own batch.
    pub fn calibrate(&mut self, images: &[Tensor]) -> Result<&[NormStats]> {
        if images.is_empty() {
            return Err(Error::Parameter("calibration needs at least one image".into()));
        }
        let mut acc: Vec<NormStats> = self
            .config
            .layer_channels
            .iter()
            .map(|&c| NormStats { mean: vec![0.0; c], var: vec![0.0; c], t: 0 })
            .collect();
        for img in images {
            let (_, stats, _) = self.run(img, Normalize::Batch, true)?;
            for (a, s) in acc.iter_mut().zip(stats.expect("collected")) {
                for c in 0..a.channels() {
                    a.mean[c] += s.mean[c];
                    a.var[c] += s.var[c];
                }
            }
        }
        let n = images.len() as f64;
        for a in acc.iter_mut() {
            a.mean.iter_mut().for_each(|v| *v /= n);
            a.var.iter_mut().for_each(|v| *v /= n);
        }
        self.running = acc;
        Ok(&self.running)
    }

    pub fn forward(&self, image: &Tensor, mode: BnMode, adapted_bn: Option<&[NormStats]>) -> Result<CnnOutput> {
        let stats = match adapted_bn {
            Some(s) => {
                check_set_layout(&self.running, s)?;
                s
            }
            None => &self.running,
        };
        let (prediction, batch_stats, macs) =
            self.run(image, Normalize::Stored(stats), mode == BnMode::Collecting)?;
        Ok(CnnOutput { prediction, batch_stats, macs })
    }

    fn run(&self, image: &Tensor, norm: Normalize<'_>, collect: bool) -> Result<(SegPrediction, Option<StatSet>, u64)> {
        let (h, w, ch) = image_dims(image)?;
        let s = self.config.stride;
        if ch != 3 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "CNN input {h}x{w}x{ch} must be RGB with dims divisible by stride {s}"
            )));
        }
        let (fh, fw) = (h / s, w / s);
        let plane = fh * fw;
        let mut x = stem(image.data(), w, s, fh, fw);
        let mut collected = collect.then(|| Vec::with_capacity(self.layers.len()));
        let mut macs = 0u64;

        for (l, layer) in self.layers.iter().enumerate() {
            let c_out = layer.bias.len();
            let mut z = vec![0.0f32; c_out * plane];
            for o in 0..c_out {
                let out = &mut z[o * plane..(o + 1) * plane];
                out.fill(layer.bias[o]);
                for j in 0..layer.fan_in {
                    let src = layer.sources[o * layer.fan_in + j] as usize;
                    let wt = layer.weight[o * layer.fan_in + j];
                    for (v, &xi) in out.iter_mut().zip(&x[src * plane..(src + 1) * plane]) {
                        *v += wt * xi;
                    }
                }
            }
            macs += (c_out * layer.fan_in * plane) as u64;

            let batch = match (&norm, collect) {
                (Normalize::Batch, _) | (_, true) => Some(channel_moments(&z, c_out, plane)),
                _ => None,
            };
            let used = match &norm {
                Normalize::Stored(stats) => &stats[l],
                Normalize::Batch => batch.as_ref().expect("batch stats computed"),
            };
            for o in 0..c_out {
                let inv = 1.0 / (used.var[o] + BN_EPS).sqrt();
                let (mu, g, b) = (used.mean[o], layer.gamma[o] as f64, layer.beta[o] as f64);
                for v in &mut z[o * plane..(o + 1) * plane] {
                    *v = ((*v as f64 - mu) * inv * g + b).max(0.0) as f32;
                }
            }
            if let (Some(c), Some(b)) = (collected.as_mut(), batch) {
                c.push(b);
            }
            x = z;
        }

        // channel-major -> pixel-major for the dense head
        let c_last = self.head.fan_in;
        let mut feats = vec![0.0f32; plane * c_last];
        for c in 0..c_last {
            for p in 0..plane {
                feats[p * c_last + c] = x[c * plane + p];
            }
        }
        let k = self.config.num_classes;
        let mut logits = self.head.forward(&feats, plane);
        macs += self.head.macs(plane);
        for row in logits.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let mut probs = Vec::with_capacity(h * w * k);
        for r in 0..h {
            for c in 0..w {
                let src = ((r / s) * fw + c / s) * k;
                probs.extend_from_slice(&logits[src..src + k]);
            }
        }
        let prediction = SegPrediction::from_class_probs(Tensor::new(vec![h, w, k], probs)?)?;
        Ok((prediction, collected, macs))
    }

    fn arrays(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        for (layer, st) in self.layers.iter().zip(&self.running) {
            out.push(layer.sources.iter().map(|&s| s as f32).collect());
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
            out.push(layer.gamma.clone());
            out.push(layer.beta.clone());
            out.push(st.mean.iter().map(|&v| v as f32).collect());
            out.push(st.var.iter().map(|&v| v as f32).collect());
        }
        out.push(self.head.weight.clone());
        out.push(self.head.bias.clone());
        out
    }

    /// Writes weights and running statistics (as `f32`) in layer order.
    pub fn save_weights<W: Write>(&self, out: W) -> Result<()> {
        let arrays = self.arrays();
        let refs: Vec<&[f32]> = arrays.iter().map(Vec::as_slice).collect();
        write_arrays(&refs, out)
    }

    pub fn load_weights<R: Read>(config: CnnConfig, input: R) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut arrays = model.arrays();
        {
            let mut targets: Vec<&mut Vec<f32>> = arrays.iter_mut().collect();
            read_arrays_into(input, &mut targets)?;
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("array count checked");
        let mut c_in = 3u32;
        for (layer, st) in model.layers.iter_mut().zip(model.running.iter_mut()) {
            let sources = next();
            if sources.iter().any(|&s| s < 0.0 || s.fract() != 0.0 || s as u32 >= c_in) {
                return Err(Error::Config("weight file has invalid channel taps".into()));
            }
            layer.sources = sources.iter().map(|&s| s as u32).collect();
            layer.weight = next();
            layer.bias = next();
            layer.gamma = next();
            layer.beta = next();
            let mean: Vec<f64> = next().iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = next().iter().map(|&v| v as f64).collect();
            *st = NormStats::new(mean, var)?;
            c_in = layer.bias.len() as u32;
        }
        model.head.weight = next();
        model.head.bias = next();
        Ok(model)
    }
}

/// Average-pools the RGB input by `s` into a channel-major `[3, fh*fw]` map.
fn stem(img: &[f32], w: usize, s: usize, fh: usize, fw: usize) -> Vec<f32> {
    let plane = fh * fw;
    let mut out = vec![0.0f32; 3 * plane];
    let inv = 1.0 / (s * s) as f32;
    for r in 0..fh * s {
        for c in 0..fw * s {
            let p = (r / s) * fw + c / s;
            let base = (r * w + c) * 3;
            for k in 0..3 {
                out[k * plane + p] += img[base + k] * inv;
            }
        }
    }
    out
}
