//! Four-stage hierarchical attention segmenter used by the leader.
//!
//! A 512x512 RGB input is cut into 4x4 patches (128x128 tokens); each later
//! stage merges 2x2 tokens, giving token grids of 128, 64, 32 and 16. Every
//! stage has two pre-norm blocks of single-head attention plus an MLP. Keys
//! and values are average-pooled by the stage's reduction ratio.
//!
//! Normalization layers use one scalar mean/variance over the whole feature
//! map (all tokens and channels). Those scalars are what leader-side
//! adaptation replaces.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::weights::{read_arrays_into, write_arrays, Linear};
use super::{attention_scores, AttentionStack, SegPrediction, StageAttention};
use crate::error::{Error, Result};
use crate::numerics::{image_dims, softmax_in_place, upsample_nearest, Grid, Tensor};
use crate::seed::rng_for;
use crate::tta::{check_set_layout, moments, NormStats, StatSet};

pub const INPUT_SIZE: usize = 512;
pub const STAGE_SIZES: [usize; 4] = [128, 64, 32, 16];
const PATCH: usize = 4;
const BLOCKS_PER_STAGE: usize = 2;
const LN_EPS: f64 = 1e-6;
const FULL_EMBED_DIMS: [usize; 4] = [64, 128, 160, 256];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_classes: usize,
    pub embed_dims: [usize; 4],
    /// Spatial reduction applied to keys/values per stage.
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub head_dim: usize,
}

impl TransformerConfig {
    /// Stage widths `64/128/160/256` divided by `divisor`.
    pub fn scaled(num_classes: usize, divisor: usize) -> Result<Self> {
        if divisor == 0 || FULL_EMBED_DIMS.iter().any(|d| d % divisor != 0) {
            return Err(Error::Config(format!("embed divisor {divisor} must divide 64/128/160/256")));
        }
        let cfg = Self {
            num_classes,
            embed_dims: FULL_EMBED_DIMS.map(|d| d / divisor),
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            head_dim: 32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.embed_dims.contains(&0) || self.mlp_ratio == 0 || self.head_dim == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        for (k, (&size, &sr)) in STAGE_SIZES.iter().zip(&self.sr_ratios).enumerate() {
            if sr == 0 || size % sr != 0 {
                return Err(Error::Config(format!(
                    "stage {} reduction ratio {sr} must divide {size}",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn ln_layers(&self) -> usize {
        STAGE_SIZES.len() * (2 * BLOCKS_PER_STAGE + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self { gamma: vec![1.0; dim], beta: vec![0.0; dim] }
    }

    fn apply(&self, x: &[f32], mean: f64, var: f64) -> Vec<f32> {
        let d = self.gamma.len();
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.chunks_exact(d)
            .flat_map(|tok| {
                tok.iter()
                    .zip(self.gamma.iter().zip(&self.beta))
                    .map(move |(&v, (&g, &b))| g * ((v as f64 - mean) * inv) as f32 + b)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Seeded, untrained leader model.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBackend {
    config: TransformerConfig,
    seed: u64,
    stages: Vec<Stage>,
    head_proj: Vec<Linear>,
    head_cls: Linear,
    training_ln: Option<StatSet>,
}

pub struct TransformerOutput {
    pub prediction: SegPrediction,
    pub attention: AttentionStack,
    /// Per-sample statistics of every LN input, in layer order.
    pub ln_stats: StatSet,
    pub macs: u64,
}

/// Tracks LN layer order and which statistics normalize each one.
struct NormCtx<'a> {
    adapted: Option<&'a [NormStats]>,
    index: usize,
    collected: StatSet,
}

impl NormCtx<'_> {
    fn apply(&mut self, ln: &LayerNorm, x: &[f32]) -> Vec<f32> {
        let (m, v) = moments(x);
        self.collected.push(NormStats { mean: vec![m], var: vec![v], t: 0 });
        let (m, v) = match self.adapted {
            Some(stats) => (stats[self.index].mean[0], stats[self.index].var[0]),
            None => (m, v),
        };
        self.index += 1;
        ln.apply(x, m, v)
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

impl TransformerBackend {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x7472_616e]);
        let mut stages = Vec::with_capacity(4);
        let mut prev_dim = 3;
        for (k, &dim) in config.embed_dims.iter().enumerate() {
            let fan_in = if k == 0 { PATCH * PATCH * 3 } else { 4 * prev_dim };
            let embed = Linear::init(&mut rng, fan_in, dim);
            let hidden = dim * config.mlp_ratio;
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|_| Block {
                    norm1: LayerNorm::new(dim),
                    q: Linear::init(&mut rng, dim, dim),
                    k: Linear::init(&mut rng, dim, dim),
                    v: Linear::init(&mut rng, dim, dim),
                    proj: Linear::init(&mut rng, dim, dim),
                    norm2: LayerNorm::new(dim),
                    fc1: Linear::init(&mut rng, dim, hidden),
                    fc2: Linear::init(&mut rng, hidden, dim),
                })
                .collect();
            stages.push(Stage { embed, blocks, norm: LayerNorm::new(dim) });
            prev_dim = dim;
        }
        let head_proj = config
            .embed_dims
            .iter()
            .map(|&d| Linear::init(&mut rng, d, config.head_dim))
            .collect();
        let head_cls = Linear::init(&mut rng, config.head_dim, config.num_classes);
        Ok(Self { config, seed, stages, head_proj, head_cls, training_ln: None })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ln_layers(&self) -> usize {
        self.config.ln_layers()
    }

    /// LN statistics gathered from training images, if calibrated.
    pub fn training_ln(&self) -> Option<&[NormStats]> {
        self.training_ln.as_deref()
    }

    /// Averages per-sample LN statistics over `images` and stores them as
    /// the model's training-time statistics.
    pub fn calibrate(&mut self, images: &[Tensor]) -> Result<&[NormStats]> {
        if images.is_empty() {
            return Err(Error::Parameter("calibration needs at least one image".into()));
        }
        let mut acc: Option<StatSet> = None;
        for img in images {
            let stats = self.forward(img, None)?.ln_stats;
            acc = Some(match acc {
                None => stats,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(&stats) {
                        x.mean[0] += y.mean[0];
                        x.var[0] += y.var[0];
                    }
                    a
                }
            });
        }
        let n = images.len() as f64;
        let mut stats = acc.expect("non-empty");
        for s in stats.iter_mut() {
            s.mean[0] /= n;
            s.var[0] /= n;
        }
        Ok(self.training_ln.insert(stats))
    }

    pub fn forward(&self, image: &Tensor, adapted_ln: Option<&[NormStats]>) -> Result<TransformerOutput> {
        let (h, w, c) = image_dims(image)?;
        if (h, w, c) != (INPUT_SIZE, INPUT_SIZE, 3) {
            return Err(Error::Shape(format!(
                "transformer expects {INPUT_SIZE}x{INPUT_SIZE}x3 input, got {h}x{w}x{c}"
            )));
        }
        if let Some(stats) = adapted_ln {
            let expected: StatSet = (0..self.ln_layers()).map(|_| NormStats::standard(1)).collect();
            check_set_layout(&expected, stats)?;
        }
        let mut ctx = NormCtx {
            adapted: adapted_ln,
            index: 0,
            collected: Vec::with_capacity(self.ln_layers()),
        };
        let mut macs = 0u64;
        let mut stage_maps = Vec::with_capacity(4);
        let mut stage_feats: Vec<Vec<f32>> = Vec::with_capacity(4);

        let mut tokens = patchify(image.data());
        let mut prev_dim = PATCH * PATCH * 3;
        for (k, stage) in self.stages.iter().enumerate() {
            let size = STAGE_SIZES[k];
            let n = size * size;
            let dim = self.config.embed_dims[k];
            if k > 0 {
                tokens = merge_2x2(&tokens, STAGE_SIZES[k - 1], prev_dim);
            }
            macs += stage.embed.macs(n);
            let mut x = stage.embed.forward(&tokens, n);
            let mut maps = Vec::with_capacity(BLOCKS_PER_STAGE);
            for block in &stage.blocks {
                let h1 = ctx.apply(&block.norm1, &x);
                let (attn_out, map, attn_macs) =
                    self.attention(block, &h1, size, dim, self.config.sr_ratios[k])?;
                macs += attn_macs;
                add_in_place(&mut x, &attn_out);
                maps.push(map);

                let h2 = ctx.apply(&block.norm2, &x);
                let mut hidden = block.fc1.forward(&h2, n);
                hidden.iter_mut().for_each(|v| *v = gelu(*v));
                let out = block.fc2.forward(&hidden, n);
                macs += block.fc1.macs(n) + block.fc2.macs(n);
                add_in_place(&mut x, &out);
            }
            let x = ctx.apply(&stage.norm, &x);
            let [a, b]: [Tensor; 2] = maps.try_into().expect("two blocks per stage");
            stage_maps.push(StageAttention { size, blocks: [a, b] });
            tokens = x.clone();
            stage_feats.push(x);
            prev_dim = dim;
        }

        let (class_probs, head_macs) = self.decode_head(&stage_feats)?;
        macs += head_macs;
        Ok(TransformerOutput {
            prediction: SegPrediction::from_class_probs(class_probs)?,
            attention: AttentionStack::new(stage_maps)?,
            ln_stats: ctx.collected,
            macs,
        })
    }

    /// Returns the block output, the block's spatial attention map at the
    /// stage's token resolution, and the MAC count.
    fn attention(&self, block: &Block, x: &[f32], size: usize, dim: usize, sr: usize) -> Result<(Vec<f32>, Tensor, u64)> {
        let n = size * size;
        let kv_size = size / sr;
        let m = kv_size * kv_size;
        let reduced = pool_tokens(x, size, dim, sr);
        let q = Tensor::new(vec![n, dim], block.q.forward(x, n))?;
        let k = Tensor::new(vec![m, dim], block.k.forward(&reduced, m))?;
        let v = block.v.forward(&reduced, m);
        let scores = attention_scores(&q, &k, dim)?;
        let probs = scores.data();

        // mean over query rows, scaled by the key count so uniform attention
        // reads as 1.0 at every stage
        let mut key_mass = vec![0.0f64; m];
        for row in probs.chunks_exact(m) {
            for (acc, &p) in key_mass.iter_mut().zip(row) {
                *acc += p as f64;
            }
        }
        let key_map = Grid::new(
            kv_size,
            kv_size,
            key_mass.iter().map(|&s| (s * m as f64 / n as f64) as f32).collect(),
        )?;
        let map = upsample_nearest(&key_map, size, size)?.to_tensor()?;

        let mixed = crate::numerics::gemm(probs, &v, n, m, dim);
        let out = block.proj.forward(&mixed, n);
        let macs = block.q.macs(n)
            + block.k.macs(m)
            + block.v.macs(m)
            + 2 * (n * m * dim) as u64
            + block.proj.macs(n);
        Ok((out, map, macs))
    }

    fn decode_head(&self, feats: &[Vec<f32>]) -> Result<(Tensor, u64)> {
        let base = STAGE_SIZES[0];
        let hd = self.config.head_dim;
        let mut fused = vec![0.0f32; base * base * hd];
        let mut macs = 0;
        for (k, f) in feats.iter().enumerate() {
            let size = STAGE_SIZES[k];
            let proj = self.head_proj[k].forward(f, size * size);
            macs += self.head_proj[k].macs(size * size);
            let factor = base / size;
            for r in 0..base {
                for c in 0..base {
                    let src = ((r / factor) * size + c / factor) * hd;
                    let dst = (r * base + c) * hd;
                    add_in_place(&mut fused[dst..dst + hd], &proj[src..src + hd]);
                }
            }
        }
        let k = self.config.num_classes;
        let mut logits = self.head_cls.forward(&fused, base * base);
        macs += self.head_cls.macs(base * base);
        for row in logits.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let factor = INPUT_SIZE / base;
        let mut out = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE * k);
        for r in 0..INPUT_SIZE {
            for c in 0..INPUT_SIZE {
                let src = ((r / factor) * base + c / factor) * k;
                out.extend_from_slice(&logits[src..src + k]);
            }
        }
        Ok((Tensor::new(vec![INPUT_SIZE, INPUT_SIZE, k], out)?, macs))
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        let mut p = Vec::new();
        for st in &self.stages {
            p.extend([&st.embed.weight, &st.embed.bias]);
            for b in &st.blocks {
                p.extend([&b.norm1.gamma, &b.norm1.beta]);
                for l in [&b.q, &b.k, &b.v, &b.proj] {
                    p.extend([&l.weight, &l.bias]);
                }
                p.extend([&b.norm2.gamma, &b.norm2.beta]);
                for l in [&b.fc1, &b.fc2] {
                    p.extend([&l.weight, &l.bias]);
                }
            }
            p.extend([&st.norm.gamma, &st.norm.beta]);
        }
        for l in self.head_proj.iter().chain(std::iter::once(&self.head_cls)) {
            p.extend([&l.weight, &l.bias]);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut p = Vec::new();
        for st in &mut self.stages {
            p.extend([&mut st.embed.weight, &mut st.embed.bias]);
            for b in &mut st.blocks {
                p.extend([&mut b.norm1.gamma, &mut b.norm1.beta]);
                for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.proj] {
                    p.extend([&mut l.weight, &mut l.bias]);
                }
                p.extend([&mut b.norm2.gamma, &mut b.norm2.beta]);
                for l in [&mut b.fc1, &mut b.fc2] {
                    p.extend([&mut l.weight, &mut l.bias]);
                }
            }
            p.extend([&mut st.norm.gamma, &mut st.norm.beta]);
        }
        for l in self.head_proj.iter_mut().chain(std::iter::once(&mut self.head_cls)) {
            p.extend([&mut l.weight, &mut l.bias]);
        }
        p
    }

    pub fn save_weights<W: Write>(&self, out: W) -> Result<()> {
        let params = self.params();
        let arrays: Vec<&[f32]> = params.iter().map(|v| v.as_slice()).collect();
        write_arrays(&arrays, out)
    }

    /// Loads weights saved by [`save_weights`](Self::save_weights) into a
    /// model of the given shape. Training statistics are not part of the
    /// container.
    pub fn load_weights<R: Read>(config: TransformerConfig, input: R) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        read_arrays_into(input, &mut model.params_mut())?;
        Ok(model)
    }
}

fn add_in_place(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// 512x512x3 image -> 128x128 tokens of 4x4x3 patch values.
fn patchify(img: &[f32]) -> Vec<f32> {
    let grid = INPUT_SIZE / PATCH;
    let mut out = Vec::with_capacity(grid * grid * PATCH * PATCH * 3);
    for i in 0..grid {
        for j in 0..grid {
            for dy in 0..PATCH {
                let row = (i * PATCH + dy) * INPUT_SIZE;
                let start = (row + j * PATCH) * 3;
                out.extend_from_slice(&img[start..start + PATCH * 3]);
            }
        }
    }
    out
}

/// Concatenates each 2x2 neighbourhood of a `size x size` token grid.
fn merge_2x2(x: &[f32], size: usize, dim: usize) -> Vec<f32> {
    let half = size / 2;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..half {
        for j in 0..half {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let t = ((2 * i + dy) * size + 2 * j + dx) * dim;
                out.extend_from_slice(&x[t..t + dim]);
            }
        }
    }
    out
}

/// Average-pools a token grid by `sr` in each spatial direction.
fn pool_tokens(x: &[f32], size: usize, dim: usize, sr: usize) -> Vec<f32> {
    if sr == 1 {
        return x.to_vec();
    }
    let out_size = size / sr;
    let mut out = vec![0.0f32; out_size * out_size * dim];
    for r in 0..size {
        for c in 0..size {
            let dst = ((r / sr) * out_size + c / sr) * dim;
            add_in_place(&mut out[dst..dst + dim], &x[(r * size + c) * dim..(r * size + c + 1) * dim]);
        }
    }
    let inv = 1.0 / (sr * sr) as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}
