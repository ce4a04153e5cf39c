//! Slot attention: K slots compete for encoder feature tokens through a
//! softmax over the slot axis, aggregate a per-slot weighted mean of values,
//! and are refined by a GRU.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParamStore};
use crate::rng::{seeded, standard_normal};

/// Added to attention weights before the per-slot normalisation.
pub const ATTN_EPS: f64 = 1e-8;
pub const MIN_SIGMA: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotConfig {
    pub num_slots: usize,
    pub iters: usize,
    pub dim: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            num_slots: 6,
            iters: 3,
            dim: 64,
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 1 {
            return Err(Error::Config("num_slots must be >= 1".into()));
        }
        if self.iters < 1 {
            return Err(Error::Config("slot iterations must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("slot dim must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    /// K×D_s
    pub slots: Array2<f64>,
    pub iteration_index: usize,
}

impl SlotSet {
    pub fn num_slots(&self) -> usize {
        self.slots.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// N×K, softmax over slots: rows sum to one.
    pub attn: Array2<f64>,
    /// N×K, `attn` renormalised per slot over inputs: columns sum to one.
    pub weights: Array2<f64>,
}

/// Slot module parameters live under `slot.*`.
pub fn init_slot_module(store: &mut ParamStore, rng: &mut impl Rng, cfg: &SlotConfig, feature_dim: usize) {
    let d = cfg.dim;
    store.insert("slot.mu", Array2::zeros((1, d)));
    store.insert("slot.log_sigma", Array2::zeros((1, d)));
    store.init_layer_norm("slot.ln_in", feature_dim);
    store.init_layer_norm("slot.ln_slots", d);
    for (name, fan_in) in [("slot.k.w", feature_dim), ("slot.q.w", d), ("slot.v.w", feature_dim)] {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(name, Array2::from_shape_fn((fan_in, d), |_| rng.gen_range(-bound..bound)));
    }
    nn::init_gru(store, rng, "slot.gru", d, d);
}

/// The ε draws behind [`init_slots`]: K×D standard normals, row-major, two
/// uniforms per draw.
pub fn slot_noise(k: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut out = Array2::zeros((k, dim));
    for v in out.iter_mut() {
        *v = standard_normal(&mut rng);
    }
    out
}

/// `slots[i] = μ + σ ⊙ ε_i` on the graph.
pub fn init_slots_graph(g: &mut Graph, b: &mut Binder, k: usize, seed: u64) -> Result<Var> {
    if k < 1 {
        return Err(Error::Precondition("need at least one slot".into()));
    }
    let mu = b.p(g, "slot.mu");
    let log_sigma = b.p(g, "slot.log_sigma");
    let d = g.shape(mu).1;
    let sigma = g.exp(log_sigma);
    let sigma = g.clamp(sigma, MIN_SIGMA, f64::INFINITY);
    let eps = g.constant(slot_noise(k, d, seed));
    let ones = g.constant(Array2::ones((k, 1)));
    let mu_rows = g.matmul(ones, mu);
    let spread = g.mul_row(eps, sigma);
    Ok(g.add(mu_rows, spread))
}

pub fn init_slots(store: &ParamStore, k: usize, seed: u64) -> Result<SlotSet> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let s = init_slots_graph(&mut g, &mut b, k, seed)?;
    Ok(SlotSet {
        slots: g.value(s).clone(),
        iteration_index: 0,
    })
}

/// Keys and values from layer-normalised features (computed once per run).
pub fn project_inputs(g: &mut Graph, b: &mut Binder, features: Var) -> (Var, Var) {
    let x = nn::layer_norm(g, b, features, "slot.ln_in");
    let k = nn::project(g, b, x, "slot.k.w");
    let v = nn::project(g, b, x, "slot.v.w");
    (k, v)
}

/// One competition + GRU refinement. Returns (new slots, attn, weights).
pub fn step_graph(g: &mut Graph, b: &mut Binder, slots: Var, keys: Var, values: Var) -> (Var, Var, Var) {
    let d = g.shape(slots).1;
    let s = nn::layer_norm(g, b, slots, "slot.ln_slots");
    let q = nn::project(g, b, s, "slot.q.w");
    let logits = g.matmul_nt(keys, q);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(logits);
    let shifted = g.offset(attn, ATTN_EPS);
    let col = g.sum_rows(shifted);
    let weights = g.div_row(shifted, col);
    let updates = g.matmul_tn(weights, values);
    let new = nn::gru(g, b, updates, slots, "slot.gru");
    (new, attn, weights)
}

fn check_dims(store: &ParamStore, features: &Array2<f64>, slots: Option<&Array2<f64>>) -> Result<()> {
    let kw = store.get("slot.k.w").ok_or_else(|| Error::Shape("slot module missing".into()))?;
    if kw.nrows() != features.ncols() {
        return Err(Error::Shape(format!(
            "features have {} channels, slot module expects {}",
            features.ncols(),
            kw.nrows()
        )));
    }
    if let Some(s) = slots {
        if s.ncols() != kw.ncols() {
            return Err(Error::Shape(format!("slots have width {}, expected {}", s.ncols(), kw.ncols())));
        }
    }
    Ok(())
}

pub fn attention_step(store: &ParamStore, slots: &SlotSet, features: &FeatureMap) -> Result<(SlotSet, AttentionMap)> {
    check_dims(store, &features.tokens, Some(&slots.slots))?;
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let z = g.constant(features.tokens.clone());
    let s = g.constant(slots.slots.clone());
    let (k, v) = project_inputs(&mut g, &mut b, z);
    let (new, attn, weights) = step_graph(&mut g, &mut b, s, k, v);
    Ok((
        SlotSet {
            slots: g.value(new).clone(),
            iteration_index: slots.iteration_index + 1,
        },
        AttentionMap {
            attn: g.value(attn).clone(),
            weights: g.value(weights).clone(),
        },
    ))
}

/// Output of [`run_graph`]: final slots and last-iteration attention.
pub struct SlotRun {
    pub slots: Var,
    pub attn: Var,
    pub weights: Var,
}

pub fn run_graph(g: &mut Graph, b: &mut Binder, features: Var, k: usize, iters: usize, seed: u64) -> Result<SlotRun> {
    if iters < 1 {
        return Err(Error::Precondition("need at least one iteration".into()));
    }
    let mut slots = init_slots_graph(g, b, k, seed)?;
    let (keys, values) = project_inputs(g, b, features);
    let mut attn = slots;
    let mut weights = slots;
    for _ in 0..iters {
        let (s, a, w) = step_graph(g, b, slots, keys, values);
        slots = s;
        attn = a;
        weights = w;
    }
    Ok(SlotRun { slots, attn, weights })
}

pub fn run_slot_attention(
    store: &ParamStore,
    features: &FeatureMap,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(SlotSet, AttentionMap)> {
    check_dims(store, &features.tokens, None)?;
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let z = g.constant(features.tokens.clone());
    let run = run_graph(&mut g, &mut b, z, k, iters, seed)?;
    Ok((
        SlotSet {
            slots: g.value(run.slots).clone(),
            iteration_index: iters,
        },
        AttentionMap {
            attn: g.value(run.attn).clone(),
            weights: g.value(run.weights).clone(),
        },
    ))
}
