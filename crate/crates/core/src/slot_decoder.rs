//! Spatial-broadcast decoder: every slot is copied to all N token positions,
//! offset by a learned positional encoding, and mapped by a shared MLP to
//! D_z feature channels plus one alpha channel. Alphas compete across slots.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Binder, ParamStore};
use crate::slot_attention::SlotSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotDecoderConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for SlotDecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            hidden_layers: 3,
        }
    }
}

/// Per-slot reconstructions and their mixing masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotReconstruction {
    /// K entries of N×D_z.
    pub per_slot: Vec<Array2<f64>>,
    /// K×N alpha logits.
    pub alpha: Array2<f64>,
    /// K×N, softmax of `alpha` over slots; empty until [`combine`].
    pub masks: Array2<f64>,
    /// N×D_z; empty until [`combine`].
    pub combined: Array2<f64>,
}

pub fn init_slot_decoder(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &SlotDecoderConfig,
    slot_dim: usize,
    feature_dim: usize,
    grid: (usize, usize),
) {
    store.insert("sdec.pos", nn::sinusoidal_grid(grid.0, grid.1, slot_dim));
    let mut widths = vec![slot_dim];
    widths.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
    widths.push(feature_dim + 1);
    nn::init_mlp(store, rng, "sdec.mlp", &widths);
}

fn mlp_depth(store: &ParamStore) -> usize {
    (0..).take_while(|i| store.contains(&format!("sdec.mlp.{i}.w"))).count()
}

/// Graph nodes of one decode.
pub struct DecodeVars {
    /// (K·N)×D_z, slot-major.
    pub features: Var,
    /// N×K
    pub alpha: Var,
    /// N×K, rows sum to one.
    pub masks: Var,
    /// N×D_z
    pub combined: Var,
}

/// Broadcast, decode, and mix on the graph.
pub fn decode_graph(g: &mut Graph, b: &mut Binder, slots: Var) -> Result<DecodeVars> {
    let pos = b.p(g, "sdec.pos");
    let (n, d) = g.shape(pos);
    let (k, ds) = g.shape(slots);
    if ds != d {
        return Err(Error::Shape(format!("slot width {ds} but decoder expects {d}")));
    }
    let slot_idx: Vec<Option<usize>> = (0..k)
        .flat_map(|kk| (0..n).flat_map(move |_| (0..d).map(move |j| Some(kk * d + j))))
        .collect();
    let pos_idx: Vec<Option<usize>> = (0..k)
        .flat_map(|_| (0..n).flat_map(move |nn| (0..d).map(move |j| Some(nn * d + j))))
        .collect();
    let broadcast = g.gather(slots, (k * n, d), slot_idx);
    let tiled = g.gather(pos, (k * n, d), pos_idx);
    let x = g.add(broadcast, tiled);
    let depth = mlp_depth(b.store());
    let out = nn::mlp(g, b, x, "sdec.mlp", depth, Activation::Relu);
    let dz = g.shape(out).1 - 1;
    let features = g.slice_cols(out, 0, dz);
    let alpha_col = g.slice_cols(out, dz, 1);
    // (K·N)×1 slot-major → N×K
    let alpha_idx: Vec<Option<usize>> = (0..n).flat_map(|nn| (0..k).map(move |kk| Some(kk * n + nn))).collect();
    let alpha = g.gather(alpha_col, (n, k), alpha_idx);
    let (masks, combined) = combine_graph(g, features, alpha, k, n);
    Ok(DecodeVars {
        features,
        alpha,
        masks,
        combined,
    })
}

/// `m = softmax_k(α)`, `ẑ = Σ_k ẑ_k ⊙ m_k`.
pub fn combine_graph(g: &mut Graph, features: Var, alpha: Var, k: usize, n: usize) -> (Var, Var) {
    let masks = g.softmax_rows(alpha);
    let mut acc: Option<Var> = None;
    for kk in 0..k {
        let zk = g.slice_rows(features, kk * n, n);
        let mk = g.slice_cols(masks, kk, 1);
        let term = g.mul_col(zk, mk);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    (masks, acc.expect("at least one slot"))
}

/// Mean squared error over all entries.
pub fn reconstruction_loss_graph(g: &mut Graph, recon: Var, target: Var) -> Var {
    let diff = g.sub(recon, target);
    let sq = g.square(diff);
    g.mean(sq)
}

/// Per-slot parts only (masks and combined left empty).
pub fn broadcast_decode(store: &ParamStore, slots: &SlotSet) -> Result<SlotReconstruction> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let s = g.constant(slots.slots.clone());
    let vars = decode_graph(&mut g, &mut b, s)?;
    let k = slots.num_slots();
    let all = g.value(vars.features);
    let n = all.nrows() / k;
    let per_slot = (0..k)
        .map(|kk| all.slice(ndarray::s![kk * n..(kk + 1) * n, ..]).to_owned())
        .collect();
    Ok(SlotReconstruction {
        per_slot,
        alpha: g.value(vars.alpha).t().to_owned(),
        masks: Array2::zeros((0, 0)),
        combined: Array2::zeros((0, 0)),
    })
}

pub fn combine(mut parts: SlotReconstruction) -> SlotReconstruction {
    let k = parts.per_slot.len();
    let n = parts.alpha.ncols();
    let mut g = Graph::new();
    let views: Vec<_> = parts.per_slot.iter().map(|a| a.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("per-slot shapes agree");
    let f = g.constant(stacked);
    let a = g.constant(parts.alpha.t().to_owned());
    let (m, z) = combine_graph(&mut g, f, a, k, n);
    parts.masks = g.value(m).t().to_owned();
    parts.combined = g.value(z).clone();
    parts
}

pub fn reconstruction_loss(recon: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if recon.dim() != target.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", recon.dim(), target.dim())));
    }
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let t = g.constant(target.clone());
    let l = reconstruction_loss_graph(&mut g, r, t);
    Ok(g.scalar(l))
}
