//! Prompt encoder, token-attention mask decoder, Object Token construction,
//! detail-feature fusion, and the Object-Centric Mask head.
//!
//! Parameter groups:
//! * `prompt.*`: prompt encoder (`prompt.pe_gauss` is a fixed buffer)
//! * `mdec.*`: mask decoder (output tokens, two-way layers, upscaler, hypernetwork)
//! * `obj.*`: slots → Object Token MLP
//! * `fuse.*`: transposed-convolution upsamplers for semantic and detail features

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Binder, ParamStore};
use crate::scenes::{Prompt, PromptData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub output_tokens: usize,
    pub ffn_hidden: usize,
    pub object_hidden: usize,
    pub mask_conv_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            depth: 2,
            output_tokens: 1,
            ffn_hidden: 128,
            object_hidden: 128,
            mask_conv_channels: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, feature_dim: usize, slot_dim: usize) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if slot_dim != self.dim {
            return Err(Error::Config(format!(
                "slot width {slot_dim} must equal decoder token width {}",
                self.dim
            )));
        }
        if feature_dim != self.dim {
            return Err(Error::Config(format!(
                "encoder width {feature_dim} must equal decoder token width {}",
                self.dim
            )));
        }
        if self.output_tokens < 1 || self.dim % 2 != 0 {
            return Err(Error::Config("need >= 1 output token and an even decoder width".into()));
        }
        Ok(())
    }
}

/// Which role produced a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Anchor,
    Student,
    Teacher,
    ObjectCentric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub logits: Array2<f64>,
    pub role: MaskRole,
}

impl MaskLogits {
    pub fn binary(&self) -> Array2<bool> {
        self.logits.mapv(|x| x >= 0.0)
    }
}

pub fn init_prompt_encoder(store: &mut ParamStore, rng: &mut impl Rng, cfg: &DecoderConfig) {
    let d = cfg.dim;
    store.init_normal(rng, "prompt.pe_gauss", (2, d / 2), 1.0);
    store.init_normal(rng, "prompt.corner", (2, d), 0.5);
    store.init_normal(rng, "prompt.point_pos", (1, d), 0.5);
    store.init_normal(rng, "prompt.no_mask", (1, d), 0.02);
    store.init_linear(rng, "prompt.mask_conv1", 9, cfg.mask_conv_channels);
    store.init_linear(rng, "prompt.mask_conv2", cfg.mask_conv_channels, d);
}

pub fn init_mask_decoder(store: &mut ParamStore, rng: &mut impl Rng, cfg: &DecoderConfig) {
    let d = cfg.dim;
    store.init_normal(rng, "mdec.output_tokens", (cfg.output_tokens, d), 0.5);
    for l in 0..cfg.depth {
        let p = format!("mdec.layer{l}");
        nn::init_attention(store, rng, &format!("{p}.self_attn"), d);
        nn::init_attention(store, rng, &format!("{p}.cross_t2i"), d);
        nn::init_attention(store, rng, &format!("{p}.cross_i2t"), d);
        nn::init_mlp(store, rng, &format!("{p}.ffn"), &[d, cfg.ffn_hidden, d]);
        for n in 1..=4 {
            store.init_layer_norm(&format!("{p}.norm{n}"), d);
        }
    }
    init_upsampler(store, rng, "mdec.up", d, d);
    nn::init_mlp(store, rng, "mdec.hyper", &[d, d, d]);
}

pub fn init_injection(store: &mut ParamStore, rng: &mut impl Rng, cfg: &DecoderConfig, num_slots: usize, feature_dim: usize) {
    let d = cfg.dim;
    nn::init_mlp(store, rng, "obj.mlp", &[num_slots * d, cfg.object_hidden, d]);
    init_upsampler(store, rng, "fuse.sem", feature_dim, d);
    init_upsampler(store, rng, "fuse.det", feature_dim, d);
}

/// Stride-2, kernel-2 transposed convolution: weight `in × 4·out` with
/// sub-pixel order `(di, dj, channel)`, bias per output channel.
fn init_upsampler(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cin: usize, cout: usize) {
    let bound = 1.0 / (cin as f64).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Array2::from_shape_fn((cin, 4 * cout), |_| rng.gen_range(-bound..bound)),
    );
    store.insert(format!("{prefix}.b"), Array2::zeros((1, cout)));
}

fn upsample2x(g: &mut Graph, b: &mut Binder, x: Var, grid: (usize, usize), prefix: &str) -> Var {
    let w = b.p(g, &format!("{prefix}.w"));
    let bias = b.p(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    let cout = g.shape(y).1 / 4;
    let (gr, gc) = grid;
    let (orows, ocols) = (2 * gr, 2 * gc);
    let mut idx = Vec::with_capacity(orows * ocols * cout);
    for r in 0..orows {
        for c in 0..ocols {
            let token = (r / 2) * gc + c / 2;
            let sub = (r % 2) * 2 + c % 2;
            for ch in 0..cout {
                idx.push(Some(token * 4 * cout + sub * cout + ch));
            }
        }
    }
    let shuffled = g.gather(y, (orows * ocols, cout), idx);
    g.add_row(shuffled, bias)
}

/// Random Fourier positional encoding of normalised `(y, x)` ∈ [0,1]².
pub fn fourier_pe(gauss: &Array2<f64>, points: &[(f64, f64)]) -> Array2<f64> {
    let half = gauss.ncols();
    let mut out = Array2::zeros((points.len(), 2 * half));
    for (i, &(y, x)) in points.iter().enumerate() {
        let (x, y) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        for j in 0..half {
            let proj = std::f64::consts::TAU * (x * gauss[[0, j]] + y * gauss[[1, j]]);
            out[[i, j]] = proj.sin();
            out[[i, half + j]] = proj.cos();
        }
    }
    out
}

pub fn image_pe(gauss: &Array2<f64>, grid: (usize, usize)) -> Array2<f64> {
    let pts: Vec<(f64, f64)> = (0..grid.0)
        .flat_map(|r| (0..grid.1).map(move |c| ((r as f64 + 0.5) / grid.0 as f64, (c as f64 + 0.5) / grid.1 as f64)))
        .collect();
    fourier_pe(gauss, &pts)
}

/// Prompt encoding on the graph: sparse tokens and/or a dense additive term.
pub struct PromptEmbedding {
    pub tokens: Option<Var>,
    pub dense: Var,
}

/// Sizes shared by the whole decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub image: (usize, usize),
    pub grid: (usize, usize),
}

impl Geometry {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn mask_grid(&self) -> (usize, usize) {
        (2 * self.grid.0, 2 * self.grid.1)
    }
}

/// Average-pool a full-resolution mask onto the token grid.
fn pool_mask(mask: &Array2<bool>, grid: (usize, usize)) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (ph, pw) = (h / grid.0, w / grid.1);
    Array2::from_shape_fn(grid, |(r, c)| {
        let mut s = 0usize;
        for i in 0..ph {
            for j in 0..pw {
                s += mask[[r * ph + i, c * pw + j]] as usize;
            }
        }
        s as f64 / (ph * pw) as f64
    })
}

/// 3×3 same-padding im2col of a single-channel grid: N×9.
fn im2col3(grid: &Array2<f64>) -> Array2<f64> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h * w, 9), |(n, k)| {
        let (r, c) = ((n / w) as i64, (n % w) as i64);
        let (dr, dc) = ((k / 3) as i64 - 1, (k % 3) as i64 - 1);
        let (rr, cc) = (r + dr, c + dc);
        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
            0.0
        } else {
            grid[[rr as usize, cc as usize]]
        }
    })
}

pub fn encode_prompt_graph(g: &mut Graph, b: &mut Binder, prompt: &Prompt, geo: Geometry) -> Result<PromptEmbedding> {
    let gauss = b
        .store()
        .get("prompt.pe_gauss")
        .ok_or_else(|| Error::Shape("prompt encoder missing".into()))?
        .clone();
    let (h, w) = geo.image;
    let norm = |r: usize, c: usize| ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
    let n = geo.tokens();
    match &prompt.data {
        PromptData::Box([r0, c0, r1, c1]) => {
            let pe = g.constant(fourier_pe(&gauss, &[norm(*r0, *c0), norm(*r1, *c1)]));
            let corner = b.p(g, "prompt.corner");
            let tokens = g.add(pe, corner);
            Ok(PromptEmbedding {
                tokens: Some(tokens),
                dense: no_mask(g, b, n),
            })
        }
        PromptData::Points(points) => {
            if points.is_empty() {
                return Err(Error::Precondition("point prompt without points".into()));
            }
            let pts: Vec<_> = points.iter().map(|&(r, c)| norm(r, c)).collect();
            let pe = g.constant(fourier_pe(&gauss, &pts));
            let label = b.p(g, "prompt.point_pos");
            let tokens = g.add_row(pe, label);
            Ok(PromptEmbedding {
                tokens: Some(tokens),
                dense: no_mask(g, b, n),
            })
        }
        PromptData::Poly(mask) => {
            if mask.dim() != geo.image {
                return Err(Error::Shape(format!("coarse mask {:?} vs image {:?}", mask.dim(), geo.image)));
            }
            let pooled = pool_mask(mask, geo.grid);
            let cols = g.constant(im2col3(&pooled));
            let hdn = nn::linear(g, b, cols, "prompt.mask_conv1");
            let hdn = g.gelu(hdn);
            let dense = nn::linear(g, b, hdn, "prompt.mask_conv2");
            Ok(PromptEmbedding { tokens: None, dense })
        }
    }
}

fn no_mask(g: &mut Graph, b: &mut Binder, n: usize) -> Var {
    let e = b.p(g, "prompt.no_mask");
    let ones = g.constant(Array2::ones((n, 1)));
    g.matmul(ones, e)
}

/// Flatten K×D_s slots and map them through the 2-layer MLP to one 1×D_s token.
pub fn object_token_graph(g: &mut Graph, b: &mut Binder, slots: Var) -> Result<Var> {
    let (k, d) = g.shape(slots);
    let expected = b.store().get("obj.mlp.0.w").map(|w| w.nrows()).unwrap_or(0);
    if k * d != expected {
        return Err(Error::Shape(format!("{k}x{d} slots do not flatten to the {expected}-wide object MLP input")));
    }
    let flat = g.reshape(slots, (1, k * d));
    Ok(nn::mlp(g, b, flat, "obj.mlp", 2, Activation::Gelu))
}

/// `z_obj = up_sem(z) + up_det(d)` on the 2× grid.
pub fn fuse_graph(g: &mut Graph, b: &mut Binder, z: Var, detail: Var, grid: (usize, usize)) -> Result<Var> {
    if g.shape(z) != g.shape(detail) || g.shape(z).0 != grid.0 * grid.1 {
        return Err(Error::Shape("semantic and detail features must share the token grid".into()));
    }
    let a = upsample2x(g, b, z, grid, "fuse.sem");
    let c = upsample2x(g, b, detail, grid, "fuse.det");
    Ok(g.add(a, c))
}

/// Bilinear (half-pixel centres) interpolation weights `out × in` for one axis.
pub fn bilinear_matrix(out: usize, inp: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        m[[o, i1]] += t;
    }
    m
}

/// Per-pixel dot products on the mask grid (G×D · D) upsampled to the image.
fn mask_from_token(g: &mut Graph, features: Var, token: Var, geo: Geometry) -> Var {
    let low = g.matmul_nt(features, token);
    let (mr, mc) = geo.mask_grid();
    let grid = g.reshape(low, (mr, mc));
    let rows = g.constant(bilinear_matrix(geo.image.0, mr));
    let cols = g.constant(bilinear_matrix(geo.image.1, mc).t().to_owned());
    let up = g.matmul(rows, grid);
    g.matmul(up, cols)
}

/// Decoder inputs for one view.
pub struct DecodeInput<'a> {
    pub z: Var,
    pub detail: Var,
    pub prompt: &'a Prompt,
    /// Slots feeding the Object Token; `None` runs the plain decoder.
    pub slots: Option<Var>,
    pub geometry: Geometry,
}

pub struct DecodeOutput {
    /// Output-token mask logits, image resolution.
    pub mask: Var,
    /// Object-Centric Mask logits when slots were supplied.
    pub object_mask: Option<Var>,
    /// Token set after the last layer.
    pub tokens: Var,
    pub object_token: Option<Var>,
}

fn two_way_layer(g: &mut Graph, b: &mut Binder, tokens: Var, tok_pe: Var, img: Var, img_pe: Var, prefix: &str, heads: usize) -> (Var, Var) {
    let q = g.add(tokens, tok_pe);
    let a = nn::attention(g, b, q, q, tokens, &format!("{prefix}.self_attn"), heads);
    let t = g.add(tokens, a);
    let tokens = nn::layer_norm(g, b, t, &format!("{prefix}.norm1"));

    let q = g.add(tokens, tok_pe);
    let k = g.add(img, img_pe);
    let a = nn::attention(g, b, q, k, img, &format!("{prefix}.cross_t2i"), heads);
    let t = g.add(tokens, a);
    let tokens = nn::layer_norm(g, b, t, &format!("{prefix}.norm2"));

    let m = nn::mlp(g, b, tokens, &format!("{prefix}.ffn"), 2, Activation::Relu);
    let t = g.add(tokens, m);
    let tokens = nn::layer_norm(g, b, t, &format!("{prefix}.norm3"));

    let q = g.add(img, img_pe);
    let k = g.add(tokens, tok_pe);
    let a = nn::attention(g, b, q, k, tokens, &format!("{prefix}.cross_i2t"), heads);
    let i = g.add(img, a);
    let img = nn::layer_norm(g, b, i, &format!("{prefix}.norm4"));
    (tokens, img)
}

pub fn decode_graph(g: &mut Graph, b: &mut Binder, cfg: &DecoderConfig, input: DecodeInput) -> Result<DecodeOutput> {
    let geo = input.geometry;
    if g.shape(input.z) != (geo.tokens(), cfg.dim) {
        return Err(Error::Shape(format!("features {:?} vs expected {:?}", g.shape(input.z), (geo.tokens(), cfg.dim))));
    }
    let prompt = encode_prompt_graph(g, b, input.prompt, geo)?;
    let out_tokens = b.p(g, "mdec.output_tokens");
    let mut parts = vec![out_tokens];
    if let Some(t) = prompt.tokens {
        parts.push(t);
    }
    let object_token = match input.slots {
        Some(s) => {
            let t = object_token_graph(g, b, s)?;
            parts.push(t);
            Some(t)
        }
        None => None,
    };
    let tok_pe = g.concat_rows(&parts);
    let mut tokens = tok_pe;
    let mut img = g.add(input.z, prompt.dense);
    let gauss = b.store().get("prompt.pe_gauss").expect("checked in encode_prompt_graph").clone();
    let img_pe = g.constant(image_pe(&gauss, geo.grid));
    for l in 0..cfg.depth {
        (tokens, img) = two_way_layer(g, b, tokens, tok_pe, img, img_pe, &format!("mdec.layer{l}"), cfg.heads);
    }
    let up = upsample2x(g, b, img, geo.grid, "mdec.up");
    let up = g.gelu(up);
    let first = g.slice_rows(tokens, 0, 1);
    let hyper = nn::mlp(g, b, first, "mdec.hyper", 2, Activation::Relu);
    let mask = mask_from_token(g, up, hyper, geo);
    let object_mask = match object_token {
        Some(_) => {
            let n_tok = g.shape(tokens).0;
            let t_obj = g.slice_rows(tokens, n_tok - 1, 1);
            let z_obj = fuse_graph(g, b, input.z, input.detail, geo.grid)?;
            Some(mask_from_token(g, z_obj, t_obj, geo))
        }
        None => None,
    };
    Ok(DecodeOutput {
        mask,
        object_mask,
        tokens,
        object_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::scenes::Prompt;
    use ndarray::array;

    fn store(k: usize) -> (ParamStore, DecoderConfig) {
        let cfg = DecoderConfig {
            dim: 8,
            heads: 2,
            depth: 2,
            output_tokens: 1,
            ffn_hidden: 16,
            object_hidden: 12,
            mask_conv_channels: 4,
        };
        let mut s = ParamStore::new();
        let mut rng = seeded(1);
        init_prompt_encoder(&mut s, &mut rng, &cfg);
        init_mask_decoder(&mut s, &mut rng, &cfg);
        init_injection(&mut s, &mut rng, &cfg, k, 8);
        (s, cfg)
    }

    const GEO: Geometry = Geometry {
        image: (16, 16),
        grid: (4, 4),
    };

    fn rand(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn degenerate_box_tokens_share_position() {
        let (s, _) = store(3);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let p = Prompt {
            data: PromptData::Box([0, 0, 0, 0]),
            target_index: 0,
        };
        let e = encode_prompt_graph(&mut g, &mut b, &p, GEO).unwrap();
        let t = g.value(e.tokens.unwrap()).clone();
        let corner = s.get("prompt.corner").unwrap();
        let pos0 = &t.row(0) - &corner.row(0);
        let pos1 = &t.row(1) - &corner.row(1);
        for (a, c) in pos0.iter().zip(pos1.iter()) {
            assert!((a - c).abs() < 1e-12);
        }
        assert_ne!(corner.row(0), corner.row(1));
    }

    #[test]
    fn point_prompt_token_count() {
        let (s, _) = store(3);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let p = Prompt {
            data: PromptData::Points(vec![(1, 1), (5, 7), (9, 2)]),
            target_index: 0,
        };
        let e = encode_prompt_graph(&mut g, &mut b, &p, GEO).unwrap();
        assert_eq!(g.shape(e.tokens.unwrap()), (3, 8));
    }

    #[test]
    fn empty_poly_with_zero_embedder_adds_nothing() {
        let (mut s, _) = store(3);
        for n in ["prompt.mask_conv1.w", "prompt.mask_conv1.b", "prompt.mask_conv2.w", "prompt.mask_conv2.b"] {
            let dim = s.get(n).unwrap().dim();
            s.insert(n, Array2::zeros(dim));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let p = Prompt {
            data: PromptData::Poly(Array2::from_elem((16, 16), false)),
            target_index: 0,
        };
        let e = encode_prompt_graph(&mut g, &mut b, &p, GEO).unwrap();
        assert!(e.tokens.is_none());
        assert!(g.value(e.dense).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn object_token_shapes_and_order_sensitivity() {
        for k in 1..=8 {
            let (s, _) = store(k);
            let mut g = Graph::new();
            let mut b = Binder::frozen(&s);
            let sl = g.constant(rand(k as u64, k, 8));
            let t = object_token_graph(&mut g, &mut b, sl).unwrap();
            assert_eq!(g.shape(t), (1, 8));
        }
        let (s, _) = store(3);
        let slots = rand(5, 3, 8);
        let mut permuted = slots.clone();
        permuted.row_mut(0).assign(&slots.row(2));
        permuted.row_mut(2).assign(&slots.row(0));
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let a = g.constant(slots);
        let c = g.constant(permuted);
        let ta = object_token_graph(&mut g, &mut b, a).unwrap();
        let tc = object_token_graph(&mut g, &mut b, c).unwrap();
        assert_ne!(g.value(ta), g.value(tc));
        let wrong = g.constant(rand(1, 4, 8));
        assert!(object_token_graph(&mut g, &mut b, wrong).is_err());
    }

    #[test]
    fn zero_object_mlp_returns_bias() {
        let (mut s, _) = store(3);
        for n in ["obj.mlp.0.w", "obj.mlp.1.w"] {
            let dim = s.get(n).unwrap().dim();
            s.insert(n, Array2::zeros(dim));
        }
        let bias = rand(9, 1, 8);
        s.insert("obj.mlp.1.b", bias.clone());
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let sl = g.constant(rand(2, 3, 8));
        let t = object_token_graph(&mut g, &mut b, sl).unwrap();
        assert_eq!(g.value(t), &bias);
    }

    #[test]
    fn fusion_doubles_grid_and_is_linear_without_bias() {
        let (mut s, _) = store(3);
        let z = rand(1, 16, 8);
        let d = rand(2, 16, 8);
        let zero = Array2::zeros((16, 8));
        let run = |s: &ParamStore, z: &Array2<f64>, d: &Array2<f64>| {
            let mut g = Graph::new();
            let mut b = Binder::frozen(s);
            let zv = g.constant(z.clone());
            let dv = g.constant(d.clone());
            let f = fuse_graph(&mut g, &mut b, zv, dv, (4, 4)).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(&s, &z, &d).dim(), (64, 8));
        // with d ≡ 0 only the semantic branch (plus biases) remains
        let sem_only = run(&s, &z, &zero);
        {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&s);
            let zv = g.constant(z.clone());
            let up = upsample2x(&mut g, &mut b, zv, (4, 4), "fuse.sem");
            let dz = g.constant(zero.clone());
            let upd = upsample2x(&mut g, &mut b, dz, (4, 4), "fuse.det");
            let expect = g.value(up) + g.value(upd);
            assert!((&sem_only - &expect).iter().all(|v| v.abs() < 1e-12));
        }
        s.insert("fuse.sem.b", Array2::zeros((1, 8)));
        s.insert("fuse.det.b", Array2::zeros((1, 8)));
        let both = run(&s, &z, &d);
        let sum = run(&s, &z, &zero) + run(&s, &zero, &d);
        assert!((&both - &sum).iter().all(|v| v.abs() < 1e-6));
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let zv = g.constant(z);
        let bad = g.constant(Array2::zeros((9, 8)));
        assert!(fuse_graph(&mut g, &mut b, zv, bad, (4, 4)).is_err());
    }

    #[test]
    fn upsampler_places_subpixels() {
        let mut s = ParamStore::new();
        // 1 input channel, 1 output channel, sub-pixel weights 1,2,3,4
        s.insert("u.w", array![[1.0, 2.0, 3.0, 4.0]]);
        s.insert("u.b", array![[0.0]]);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let x = g.constant(array![[1.0], [10.0]]);
        let y = upsample2x(&mut g, &mut b, x, (1, 2), "u");
        let v = g.value(y);
        // output grid 2×4, row-major
        let expect = [1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0];
        assert_eq!(v.iter().copied().collect::<Vec<_>>(), expect);
    }

    fn decode(s: &ParamStore, cfg: &DecoderConfig, slots: Option<&Array2<f64>>, z: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>, Array2<f64>) {
        let mut g = Graph::new();
        let mut b = Binder::frozen(s);
        let zv = g.constant(z.clone());
        let dv = g.constant(rand(8, 16, 8));
        let sv = slots.map(|sl| g.constant(sl.clone()));
        let p = Prompt {
            data: PromptData::Box([2, 3, 9, 12]),
            target_index: 0,
        };
        let out = decode_graph(
            &mut g,
            &mut b,
            cfg,
            DecodeInput {
                z: zv,
                detail: dv,
                prompt: &p,
                slots: sv,
                geometry: GEO,
            },
        )
        .unwrap();
        (
            g.value(out.mask).clone(),
            out.object_mask.map(|m| g.value(m).clone()),
            g.value(out.tokens).clone(),
        )
    }

    #[test]
    fn object_token_changes_mask_and_ablation_is_plain_decoder() {
        let (s, cfg) = store(3);
        let z = rand(7, 16, 8);
        let slots = rand(11, 3, 8);
        let (plain, none, plain_tokens) = decode(&s, &cfg, None, &z);
        let (again, _, _) = decode(&s, &cfg, None, &z);
        assert_eq!(plain, again);
        assert!(none.is_none());
        assert_eq!(plain_tokens.nrows(), 1 + 2);
        let (with_obj, obj, tokens) = decode(&s, &cfg, Some(&slots), &z);
        assert_eq!(tokens.nrows(), 1 + 2 + 1);
        assert_eq!(with_obj.dim(), (16, 16));
        assert_eq!(obj.unwrap().dim(), (16, 16));
        let diff = (&plain - &with_obj).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff > 0.0);
    }

    #[test]
    fn zero_fused_features_give_half_probability() {
        let (mut s, cfg) = store(3);
        for n in ["fuse.sem.w", "fuse.sem.b", "fuse.det.w", "fuse.det.b"] {
            let dim = s.get(n).unwrap().dim();
            s.insert(n, Array2::zeros(dim));
        }
        let (_, obj, _) = decode(&s, &cfg, Some(&rand(1, 3, 8)), &rand(2, 16, 8));
        assert!(obj.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_is_shared_by_every_token() {
        let (s, cfg) = store(3);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&s);
        let zv = g.constant(rand(7, 16, 8));
        let dv = g.constant(rand(8, 16, 8));
        let sv = g.constant(rand(9, 3, 8));
        let p = Prompt {
            data: PromptData::Points(vec![(3, 3)]),
            target_index: 0,
        };
        decode_graph(&mut g, &mut b, &cfg, DecodeInput { z: zv, detail: dv, prompt: &p, slots: Some(sv), geometry: GEO }).unwrap();
        // one storage entry per FFN weight and layer, bound exactly once
        let ffn: Vec<_> = b.vars().keys().filter(|k| k.contains(".ffn.")).collect();
        assert_eq!(ffn.len(), cfg.depth * 4);
        assert!(!b.vars().keys().any(|k| k.starts_with("obj.") && k.contains("ffn")));
    }

    #[test]
    fn bilinear_rows_are_partitions_of_unity() {
        let m = bilinear_matrix(64, 16);
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let id = bilinear_matrix(8, 8);
        assert_eq!(id, Array2::<f64>::eye(8));
    }

    #[test]
    fn config_enforces_token_width() {
        let cfg = DecoderConfig::default();
        assert!(cfg.validate(64, 64).is_ok());
        assert!(cfg.validate(64, 32).is_err());
    }
}
