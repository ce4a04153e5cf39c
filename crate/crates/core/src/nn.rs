//! Layer building blocks shared by every network in the crate.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{Binder, ParamStore};

pub const LN_EPS: f64 = 1e-5;

pub fn linear(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let w = b.p(g, &format!("{prefix}.w"));
    let bias = b.p(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

/// Linear map without bias.
pub fn project(g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Var {
    let w = b.p(g, name);
    g.matmul(x, w)
}

pub fn layer_norm(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let gain = b.p(g, &format!("{prefix}.g"));
    let bias = b.p(g, &format!("{prefix}.b"));
    let n = g.layer_norm_rows(x, LN_EPS);
    let s = g.mul_row(n, gain);
    g.add_row(s, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// `prefix.0 … prefix.{n-1}` linears with activations between them.
pub fn mlp(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str, layers: usize, act: Activation) -> Var {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, b, h, &format!("{prefix}.{i}"));
        if i + 1 < layers {
            h = activate(g, h, act);
        }
    }
    h
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, widths: &[usize]) {
    for (i, w) in widths.windows(2).enumerate() {
        store.init_linear(rng, &format!("{prefix}.{i}"), w[0], w[1]);
    }
}

/// Multi-head scaled dot-product attention with `q/k/v/o` linear maps.
pub fn attention(
    g: &mut Graph,
    b: &mut Binder,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    prefix: &str,
    heads: usize,
) -> Var {
    let q = linear(g, b, q_in, &format!("{prefix}.q"));
    let k = linear(g, b, k_in, &format!("{prefix}.k"));
    let v = linear(g, b, v_in, &format!("{prefix}.v"));
    let dim = g.shape(q).1;
    assert_eq!(dim % heads, 0, "attention width not divisible by heads");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh),
                g.slice_cols(k, h * dh, dh),
                g.slice_cols(v, h * dh, dh),
            )
        };
        let logits = g.matmul_nt(qh, kh);
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits);
        outs.push(g.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, b, cat, &format!("{prefix}.o"))
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(rng, &format!("{prefix}.{p}"), dim, dim);
    }
}

/// Gated recurrent unit cell, rows are independent sequences.
///
/// `r = σ(x·Wir + h·Whr)`, `u = σ(x·Wiz + h·Whz)`,
/// `n = tanh(x·Win + r ⊙ (h·Whn))`, `h' = (1 − u) ⊙ n + u ⊙ h`.
pub fn gru(g: &mut Graph, b: &mut Binder, input: Var, hidden: Var, prefix: &str) -> Var {
    let d = g.shape(hidden).1;
    let xi = linear(g, b, input, &format!("{prefix}.ih"));
    let hh = linear(g, b, hidden, &format!("{prefix}.hh"));
    let xr = g.slice_cols(xi, 0, d);
    let xz = g.slice_cols(xi, d, d);
    let xn = g.slice_cols(xi, 2 * d, d);
    let hr = g.slice_cols(hh, 0, d);
    let hz = g.slice_cols(hh, d, d);
    let hn = g.slice_cols(hh, 2 * d, d);
    let r = g.add(xr, hr);
    let r = g.sigmoid(r);
    let u = g.add(xz, hz);
    let u = g.sigmoid(u);
    let rh = g.mul(r, hn);
    let n = g.add(xn, rh);
    let n = g.tanh(n);
    let one_minus_u = g.rsub(1.0, u);
    let a = g.mul(one_minus_u, n);
    let c = g.mul(u, hidden);
    g.add(a, c)
}

pub fn init_gru(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, input: usize, hidden: usize) {
    let bound = 1.0 / (hidden as f64).sqrt();
    for (name, fan_in) in [("ih", input), ("hh", hidden)] {
        let w = ndarray::Array2::from_shape_fn((fan_in, 3 * hidden), |_| rng.gen_range(-bound..bound));
        let bias = ndarray::Array2::from_shape_fn((1, 3 * hidden), |_| rng.gen_range(-bound..bound));
        store.insert(format!("{prefix}.{name}.w"), w);
        store.insert(format!("{prefix}.{name}.b"), bias);
    }
}

/// Fixed 2-D sinusoidal encoding for an `rows×cols` grid: the first half of
/// the channels encode the row, the second half the column.
pub fn sinusoidal_grid(rows: usize, cols: usize, dim: usize) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::zeros((rows * cols, dim));
    let half = dim / 2;
    for r in 0..rows {
        for c in 0..cols {
            let n = r * cols + c;
            for (offset, pos) in [(0, r as f64), (half, c as f64)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / half as f64);
                    out[[n, offset + 2 * i]] = (pos * freq).sin();
                    out[[n, offset + 2 * i + 1]] = (pos * freq).cos();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{numerical_gradient, relative_error};
    use crate::rng::seeded;
    use ndarray::Array2;

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let mut store = ParamStore::new();
        init_gru(&mut store, &mut rng, "gru", 3, 2);
        let x = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut b = Binder::new(store, |_| true);
            let xv = g.constant(x.clone());
            let hv = g.constant(h.clone());
            let out = gru(&mut g, &mut b, xv, hv, "gru");
            let sq = g.square(out);
            let s = g.sum(sq);
            let grads = g.backward(s);
            (g.scalar(s), b.grads(&g, &grads))
        };
        let (_, grads) = eval(&store);
        for name in ["gru.ih.w", "gru.hh.w", "gru.hh.b"] {
            let base = store.get(name).unwrap().clone();
            let numeric = numerical_gradient(&base, 1e-5, |p| {
                let mut s = store.clone();
                s.insert(name, p.clone());
                eval(&s).0
            });
            assert!(relative_error(&grads[name], &numeric, 1e-8) < 1e-5, "{name}");
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = seeded(5);
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "att", 8);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let x = g.constant(Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0)));
        let y = attention(&mut g, &mut b, x, x, x, "att", 2);
        assert_eq!(g.shape(y), (5, 8));
    }

    #[test]
    fn sinusoidal_grid_is_bounded_and_distinct() {
        let pe = sinusoidal_grid(4, 4, 16);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(0), pe.row(5));
    }
}
