//! Segmentation losses on probability grids and the composite self-training
//! objectives built from them.

use ndarray::Array2;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1.0;
pub const PROB_CLIP: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 2.0;

/// `1 − (2Σpy + ε) / (Σp + Σy + ε)`
pub fn dice_graph(g: &mut Graph, p: Var, y: Var) -> Var {
    let py = g.mul(p, y);
    let inter = g.sum(py);
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, DICE_EPS);
    let sp = g.sum(p);
    let sy = g.sum(y);
    let den = g.add(sp, sy);
    let den = g.offset(den, DICE_EPS);
    let ratio = g.div_row(num, den);
    g.rsub(1.0, ratio)
}

/// Mean of `−[y(1−p)^γ log p + (1−y) p^γ log(1−p)]` with `p` clipped.
pub fn focal_graph(g: &mut Graph, p: Var, y: Var, gamma: f64) -> Var {
    let p = g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP);
    let q = g.rsub(1.0, p);
    let not_y = g.rsub(1.0, y);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let wq = g.powf(q, gamma);
    let wp = g.powf(p, gamma);
    let a = g.mul(wq, log_p);
    let a = g.mul(y, a);
    let c = g.mul(wp, log_q);
    let c = g.mul(not_y, c);
    let s = g.add(a, c);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

/// Mean binary cross-entropy with the same clipping as [`focal_graph`].
pub fn bce_graph(g: &mut Graph, p: Var, y: Var) -> Var {
    let p = g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP);
    let q = g.rsub(1.0, p);
    let not_y = g.rsub(1.0, y);
    let log_p = g.log(p);
    let log_q = g.log(q);
    let a = g.mul(y, log_p);
    let c = g.mul(not_y, log_q);
    let s = g.add(a, c);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

/// Hard pseudo-label: 1 where `sigmoid(logit) >= 0.5`.
pub fn binarize_logits(logits: &Array2<f64>) -> Array2<f64> {
    logits.mapv(|x| if x >= 0.0 { 1.0 } else { 0.0 })
}

/// Stop-gradient pseudo-label node from a logits node.
pub fn pseudo_label(g: &mut Graph, logits: Var) -> Var {
    let y = binarize_logits(g.value(logits));
    g.constant(y)
}

/// Terms of the teacher-student objective.
pub struct BaseLossVars {
    pub total: Var,
    pub dice_student: Var,
    pub dice_teacher: Var,
    pub focal: Var,
}

/// `½[dice(σ(Mˢ), bin(Mᵃ)) + dice(σ(Mᵗ), bin(Mᵃ))] + focal(σ(Mˢ), bin(Mᵗ))`.
/// Teacher and anchor logits are detached; only `student` can carry gradient.
pub fn base_loss_graph(g: &mut Graph, student: Var, teacher: Var, anchor: Var, gamma: f64) -> BaseLossVars {
    let ya = pseudo_label(g, anchor);
    let yt = pseudo_label(g, teacher);
    let teacher = g.detach(teacher);
    let ps = g.sigmoid(student);
    let pt = g.sigmoid(teacher);
    let dice_student = dice_graph(g, ps, ya);
    let dice_teacher = dice_graph(g, pt, ya);
    let focal = focal_graph(g, ps, yt, gamma);
    let d = g.add(dice_student, dice_teacher);
    let d = g.scale(d, 0.5);
    let total = g.add(d, focal);
    BaseLossVars {
        total,
        dice_student,
        dice_teacher,
        focal,
    }
}

/// `dice(σ(M°), bin(Mᵃ)) + bce(σ(M°), bin(Mᵃ))`, anchor detached.
pub fn object_loss_graph(g: &mut Graph, object: Var, anchor: Var) -> Var {
    let ya = pseudo_label(g, anchor);
    let p = g.sigmoid(object);
    let d = dice_graph(g, p, ya);
    let b = bce_graph(g, p, ya);
    g.add(d, b)
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_probabilities(p: &Array2<f64>) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

fn eval2(p: &Array2<f64>, y: &Array2<f64>, f: impl FnOnce(&mut Graph, Var, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let yv = g.constant(y.clone());
    let out = f(&mut g, pv, yv);
    g.scalar(out)
}

pub fn dice_loss(p: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    same_shape(p, y)?;
    check_probabilities(p)?;
    Ok(eval2(p, y, dice_graph))
}

pub fn focal_loss(p: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> Result<f64> {
    same_shape(p, y)?;
    if gamma < 0.0 {
        return Err(Error::Precondition("focal gamma must be >= 0".into()));
    }
    Ok(eval2(p, y, |g, p, y| focal_graph(g, p, y, gamma)))
}

pub fn bce_loss(p: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    same_shape(p, y)?;
    Ok(eval2(p, y, bce_graph))
}

pub fn base_loss(student: &Array2<f64>, teacher: &Array2<f64>, anchor: &Array2<f64>) -> Result<f64> {
    same_shape(student, teacher)?;
    same_shape(student, anchor)?;
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let t = g.constant(teacher.clone());
    let a = g.constant(anchor.clone());
    let out = base_loss_graph(&mut g, s, t, a, DEFAULT_GAMMA);
    Ok(g.scalar(out.total))
}

pub fn object_loss(object: &Array2<f64>, anchor: &Array2<f64>) -> Result<f64> {
    same_shape(object, anchor)?;
    let mut g = Graph::new();
    let o = g.constant(object.clone());
    let a = g.constant(anchor.clone());
    let out = object_loss_graph(&mut g, o, a);
    Ok(g.scalar(out))
}
