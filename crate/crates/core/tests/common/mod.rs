//! Finite-difference gradient checks shared by the gradient and acceptance suites.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotsam::autograd::{numerical_gradient, relative_error, Graph, Var};
use slotsam::encoder::EncoderConfig;
use slotsam::injection::DecoderConfig;
use slotsam::losses::{base_loss_graph, bce_graph, dice_graph, focal_graph, object_loss_graph, DEFAULT_GAMMA};
use slotsam::model::{forward_graph, init_model, ModelConfig, ViewFeatures};
use slotsam::params::{Binder, ParamStore};
use slotsam::scenes::{derive_prompt, PromptConfig, PromptKind};
use slotsam::slot_attention::{init_slot_module, init_slots_graph, project_inputs, step_graph, SlotConfig};
use slotsam::slot_decoder::{decode_graph, init_slot_decoder, reconstruction_loss_graph, SlotDecoderConfig};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor for entries whose true gradient is ~0.
pub const FLOOR: f64 = 1e-6;

pub fn rand_mat(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

/// Max relative error between d f(x)/dx from the tape and finite differences;
/// infinite when the analytic gradient vanishes.
pub fn check_input(x: &Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = build(&mut g, xv);
    let analytic = g.backward(out).get(xv).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
    let numeric = numerical_gradient(x, H, |p| {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let out = build(&mut g, pv);
        g.scalar(out)
    });
    if analytic.iter().all(|v| v.abs() <= 1e-8) {
        return f64::INFINITY;
    }
    relative_error(&analytic, &numeric, FLOOR)
}

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// dice, focal and bce w.r.t. probabilities on 4×4 grids.
pub fn pointwise_losses(trials: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = [("dice", 0.0), ("focal", 0.0), ("bce", 0.0)];
    for _ in 0..trials {
        let p = rand_mat(&mut rng, (4, 4), 0.05, 0.95);
        let y = binary(&mut rng, (4, 4));
        let errs = [
            check_input(&p, |g, p| {
                let y = g.constant(y.clone());
                dice_graph(g, p, y)
            }),
            check_input(&p, |g, p| {
                let y = g.constant(y.clone());
                focal_graph(g, p, y, DEFAULT_GAMMA)
            }),
            check_input(&p, |g, p| {
                let y = g.constant(y.clone());
                bce_graph(g, p, y)
            }),
        ];
        for (o, e) in out.iter_mut().zip(errs) {
            o.1 = worst([o.1, e]);
        }
    }
    out.to_vec()
}

/// base_loss w.r.t. student logits and object_loss w.r.t. object logits.
pub fn composite_losses(trials: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut base, mut object) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let student = rand_mat(&mut rng, (4, 4), -3.0, 3.0);
        let teacher = rand_mat(&mut rng, (4, 4), -3.0, 3.0);
        let anchor = rand_mat(&mut rng, (4, 4), -3.0, 3.0);
        base = base.max(check_input(&student, |g, s| {
            let t = g.constant(teacher.clone());
            let a = g.constant(anchor.clone());
            base_loss_graph(g, s, t, a, DEFAULT_GAMMA).total
        }));
        object = object.max(check_input(&student, |g, o| {
            let a = g.constant(anchor.clone());
            object_loss_graph(g, o, a)
        }));
    }
    vec![("base_loss", base), ("object_loss", object)]
}

/// L_rec through broadcast decode and combine, w.r.t. the slots.
pub fn reconstruction_chain() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, ds, dz, grid) = (3, 4, 3, (2, 2));
    let mut store = ParamStore::new();
    let cfg = SlotDecoderConfig {
        hidden: 6,
        hidden_layers: 2,
    };
    init_slot_decoder(&mut store, &mut rng, &cfg, ds, dz, grid);
    let target = rand_mat(&mut rng, (4, dz), -1.0, 1.0);
    let slots = rand_mat(&mut rng, (k, ds), -1.0, 1.0);
    check_input(&slots, |g, s| {
        let mut b = Binder::frozen(&store);
        let dec = decode_graph(g, &mut b, s).expect("decode");
        let t = g.constant(target.clone());
        reconstruction_loss_graph(g, dec.combined, t)
    })
}

const SLOT_SEED: u64 = 17;

/// ‖slots after one step‖², with the initial slots drawn from μ, σ.
fn step_energy(g: &mut Graph, b: &mut Binder, feats: &Array2<f64>) -> Var {
    let z = g.constant(feats.clone());
    let s = init_slots_graph(g, b, 2, SLOT_SEED).expect("init");
    let (kv, vv) = project_inputs(g, b, z);
    let (new, _, _) = step_graph(g, b, s, kv, vv);
    let sq = g.square(new);
    g.sum(sq)
}

/// One attention step on 4 tokens and 2 slots: worst relative error over every
/// slot-module parameter tensor, tensors checked, tensors in the module.
pub fn attention_step_params() -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SlotConfig {
        num_slots: 2,
        iters: 1,
        dim: 3,
    };
    let mut store = ParamStore::new();
    init_slot_module(&mut store, &mut rng, &cfg, 5);
    // move layer-norm and σ parameters off their identity initial values
    for (_, v) in store.iter_mut() {
        v.mapv_inplace(|x| x + rng.gen_range(-0.3..0.3));
    }
    let feats = rand_mat(&mut rng, (4, 5), -1.0, 1.0);

    let mut g = Graph::new();
    let grads = {
        let mut b = Binder::new(&store, |_| true);
        let e = step_energy(&mut g, &mut b, &feats);
        let tape = g.backward(e);
        b.grads(&g, &tape)
    };
    let mut err = 0.0f64;
    let mut checked = 0;
    for (name, base) in store.iter() {
        let numeric = numerical_gradient(base, H, |p| {
            let mut s = store.clone();
            s.insert(name.clone(), p.clone());
            let mut g = Graph::new();
            let mut b = Binder::frozen(&s);
            let e = step_energy(&mut g, &mut b, &feats);
            g.scalar(e)
        });
        let analytic = match grads.get(name) {
            Some(a) => a,
            None => return (f64::INFINITY, checked, store.len()),
        };
        err = err.max(relative_error(analytic, &numeric, FLOOR));
        checked += 1;
    }
    (err, checked, store.len())
}

/// Norm of ∂ object_loss / ∂ slot-module parameters on a random instance.
pub fn object_loss_slot_gradient_norm() -> f64 {
    let cfg = ModelConfig {
        image: (32, 32),
        encoder: EncoderConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        },
        slots: SlotConfig {
            num_slots: 3,
            iters: 2,
            dim: 16,
        },
        slot_decoder: SlotDecoderConfig {
            hidden: 16,
            hidden_layers: 1,
        },
        decoder: DecoderConfig {
            dim: 16,
            heads: 2,
            ffn_hidden: 32,
            object_hidden: 32,
            ..DecoderConfig::default()
        },
    };
    let params = init_model(&cfg, 5).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = cfg.grid().0 * cfg.grid().1;
    let feats = ViewFeatures {
        z: rand_mat(&mut rng, (n, 16), -1.0, 1.0),
        detail: rand_mat(&mut rng, (n, 16), -1.0, 1.0),
    };
    let mask = Array2::from_shape_fn((32, 32), |(r, c)| (8..20).contains(&r) && (10..24).contains(&c));
    let prompt = derive_prompt(&mask, PromptKind::Box, 1, &PromptConfig::default()).expect("prompt");
    let anchor = mask.mapv(|b| if b { 4.0 } else { -4.0 });

    let mut g = Graph::new();
    let mut b = Binder::new(&params.store, |n| n.starts_with("slot."));
    let out = forward_graph(&mut g, &mut b, &cfg, true, &feats, &prompt, 9, false).expect("forward");
    let a = g.constant(anchor);
    let loss = object_loss_graph(&mut g, out.object_mask.expect("object head"), a);
    let grads = b.grads(&g, &g.backward(loss));
    grads.values().flat_map(|v| v.iter()).map(|v| v * v).sum::<f64>().sqrt()
}
