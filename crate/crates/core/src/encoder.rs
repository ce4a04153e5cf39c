//! Frozen patch-transformer image encoder. Produces final semantic tokens and
//! the detail tokens emitted by the first block.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Adam, Binder, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::scenes::{Image, SceneSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub patch: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub mask_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            patch: 8,
            heads: 4,
            mlp_ratio: 4,
            pretrain_steps: 500,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            mask_ratio: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.dim % 4 != 0 {
            return Err(Error::Config("encoder patch must be > 0 and dim a multiple of 4".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Encoder output tokens (N×D) on a `grid.0 × grid.1` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tokens: Array2<f64>,
    pub grid: (usize, usize),
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Tokens taken right after the first transformer block.
pub type DetailFeature = FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub frozen: bool,
}

impl EncoderParams {
    pub fn hash(&self) -> String {
        self.store.hash()
    }
}

pub fn init_encoder(seed: u64, config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = seeded(derive_seed(seed, 0xE1C));
    let d = config.dim;
    let mut store = ParamStore::new();
    store.init_linear(&mut rng, "enc.patch", config.patch_len(), d);
    for i in 0..config.depth {
        let p = format!("enc.block{i}");
        store.init_layer_norm(&format!("{p}.ln1"), d);
        nn::init_attention(&mut store, &mut rng, &format!("{p}.attn"), d);
        store.init_layer_norm(&format!("{p}.ln2"), d);
        nn::init_mlp(&mut store, &mut rng, &format!("{p}.mlp"), &[d, d * config.mlp_ratio, d]);
    }
    store.init_normal(&mut rng, "enc.mask_token", (1, d), 0.02);
    store.init_linear(&mut rng, "enc.head", d, config.patch_len());
    Ok(EncoderParams {
        config: config.clone(),
        store,
        frozen: false,
    })
}

/// Image to N×(P·P·3) patch rows, grid-row-major; inside a patch the order is
/// (row, column, channel).
pub fn patchify(image: &Image, patch: usize) -> Result<Array2<f64>> {
    let (h, w, ch) = image.dim();
    if ch != 3 || patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w}x{ch} is not divisible into {patch}x{patch} RGB patches"
        )));
    }
    let (gr, gc) = (h / patch, w / patch);
    let mut out = Array2::zeros((gr * gc, patch * patch * 3));
    for r in 0..h {
        for c in 0..w {
            let n = (r / patch) * gc + c / patch;
            let off = ((r % patch) * patch + c % patch) * 3;
            for k in 0..3 {
                out[[n, off + k]] = image[[r, c, k]] - 0.5;
            }
        }
    }
    Ok(out)
}

fn block(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, heads: usize) -> Var {
    let h = nn::layer_norm(g, b, x, &format!("{prefix}.ln1"));
    let a = nn::attention(g, b, h, h, h, &format!("{prefix}.attn"), heads);
    let x = g.add(x, a);
    let h = nn::layer_norm(g, b, x, &format!("{prefix}.ln2"));
    let m = nn::mlp(g, b, h, &format!("{prefix}.mlp"), 2, Activation::Gelu);
    g.add(x, m)
}

/// Patch embedding (optionally with masked rows replaced by the mask token)
/// plus positional encoding, then the blocks. Returns (final, after block 1).
fn forward(
    g: &mut Graph,
    b: &mut Binder,
    config: &EncoderConfig,
    patches: &Array2<f64>,
    grid: (usize, usize),
    masked: Option<&[bool]>,
) -> (Var, Var) {
    let x = g.constant(patches.clone());
    let mut e = nn::linear(g, b, x, "enc.patch");
    if let Some(masked) = masked {
        let tok = b.p(g, "enc.mask_token");
        let keep: Array2<f64> = Array2::from_shape_fn((masked.len(), 1), |(i, _)| if masked[i] { 0.0 } else { 1.0 });
        let drop = keep.mapv(|v| 1.0 - v);
        let keep = g.constant(keep);
        let drop = g.constant(drop);
        let kept = g.mul_col(e, keep);
        let ones = g.constant(Array2::ones((masked.len(), 1)));
        let tok_rows = g.matmul(ones, tok);
        let filled = g.mul_col(tok_rows, drop);
        e = g.add(kept, filled);
    }
    let pe = g.constant(nn::sinusoidal_grid(grid.0, grid.1, config.dim));
    let mut h = g.add(e, pe);
    let mut detail = h;
    for i in 0..config.depth {
        h = block(g, b, h, &format!("enc.block{i}"), config.heads);
        if i == 0 {
            detail = h;
        }
    }
    (h, detail)
}

pub fn encode(params: &EncoderParams, image: &Image) -> Result<(FeatureMap, DetailFeature)> {
    let cfg = &params.config;
    let patches = patchify(image, cfg.patch)?;
    let (h, w, _) = image.dim();
    let grid = (h / cfg.patch, w / cfg.patch);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.store);
    let (z, d) = forward(&mut g, &mut b, cfg, &patches, grid, None);
    Ok((
        FeatureMap {
            tokens: g.value(z).clone(),
            grid,
        },
        FeatureMap {
            tokens: g.value(d).clone(),
            grid,
        },
    ))
}

/// Masked-patch reconstruction loss (mean squared pixel error over masked
/// patches) on one image; returns the graph, its loss node, and the binder's
/// gradients when `train` is set.
fn masked_loss(
    params: &EncoderParams,
    image: &Image,
    seed: u64,
    train: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Array2<f64>>>)> {
    let cfg = &params.config;
    let patches = patchify(image, cfg.patch)?;
    let (h, w, _) = image.dim();
    let grid = (h / cfg.patch, w / cfg.patch);
    let n = patches.nrows();
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_mask = ((n as f64) * cfg.mask_ratio).round().max(1.0) as usize;
    let mut masked = vec![false; n];
    for &i in order.iter().take(n_mask) {
        masked[i] = true;
    }
    let mut g = Graph::new();
    let mut b = if train {
        Binder::new(&params.store, |_| true)
    } else {
        Binder::frozen(&params.store)
    };
    let (z, _) = forward(&mut g, &mut b, cfg, &patches, grid, Some(&masked));
    let pred = nn::linear(&mut g, &mut b, z, "enc.head");
    let rows: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    let width = cfg.patch_len();
    let idx: Vec<Option<usize>> = rows
        .iter()
        .flat_map(|&r| (0..width).map(move |c| Some(r * width + c)))
        .collect();
    let pred_m = g.gather(pred, (rows.len(), width), idx);
    let target = Array2::from_shape_fn((rows.len(), width), |(i, c)| patches[[rows[i], c]]);
    let t = g.constant(target);
    let diff = g.sub(pred_m, t);
    let sq = g.square(diff);
    let loss = g.mean(sq);
    let value = g.scalar(loss);
    if !train {
        return Ok((value, None));
    }
    let grads = g.backward(loss);
    Ok((value, Some(b.grads(&g, &grads))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Mean masked-reconstruction objective over `images` with fixed masking seeds.
pub fn pretrain_objective(params: &EncoderParams, images: &[Image], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        total += masked_loss(params, img, derive_seed(seed, i as u64), false)?.0;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Optimise the masked-patch objective for `steps` batches drawn cyclically from
/// `corpus`, then freeze. `probe` is a fixed evaluation set for the objective
/// reported at the start and end.
pub fn pretrain_encoder(
    mut params: EncoderParams,
    corpus: &[SceneSample],
    probe: &[SceneSample],
    steps: usize,
    seed: u64,
) -> Result<(EncoderParams, PretrainLog)> {
    if params.frozen {
        return Err(Error::Frozen);
    }
    let probe_images: Vec<Image> = probe.iter().map(|s| s.image.clone()).collect();
    let initial = pretrain_objective(&params, &probe_images, seed)?;
    let mut opt = Adam::new(params.config.pretrain_lr);
    let batch = params.config.pretrain_batch.max(1);
    let mut losses = Vec::with_capacity(steps);
    let mut cursor = 0usize;
    for step in 0..steps {
        if corpus.is_empty() {
            return Err(Error::Precondition("empty pretraining corpus".into()));
        }
        let mut acc = std::collections::BTreeMap::new();
        let mut total = 0.0;
        for j in 0..batch {
            let sample = &corpus[cursor % corpus.len()];
            cursor += 1;
            let mseed = derive_seed(seed ^ 0xFACE, (step * batch + j) as u64);
            let (l, grads) = masked_loss(&params, &sample.image, mseed, true)?;
            total += l;
            crate::params::accumulate(&mut acc, grads.expect("train mode"));
        }
        for v in acc.values_mut() {
            v.mapv_inplace(|x| x / batch as f64);
        }
        let loss = total / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("encoder pretraining loss {loss} at step {step}")));
        }
        losses.push(loss);
        opt.update(&mut params.store, &acc);
    }
    let final_loss = pretrain_objective(&params, &probe_images, seed)?;
    params.frozen = true;
    Ok((
        params,
        PretrainLog {
            initial_loss: initial,
            final_loss,
            losses,
        },
    ))
}
