//! Anchor / student / teacher self-training.
//!
//! Pipeline: masked-patch encoder pretraining and supervised decoder training
//! on the labelled source split (the "source model"), stage 1 slot learning on
//! unlabelled target images, then stage 2 self-training on the target split.
//! Stage 2 starts with a warm phase that only fits the object MLP and fusion
//! upsamplers; the remaining epochs train the student decoder, slot module and
//! injection heads against anchor and teacher pseudo-labels. The anchor is
//! replaced by the student whenever validation mIoU strictly improves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::encoder::{init_encoder, pretrain_encoder, EncoderParams, PretrainLog};
use crate::error::{Error, Result};
use crate::losses::{base_loss_graph, dice_graph, focal_graph, object_loss_graph};
use crate::metrics::{iou, MaskPredictor, KahanSum, ModelPredictor};
use crate::model::{forward_graph, init_model, view_features, ModelConfig, ModelParams, ViewFeatures};
use crate::params::{accumulate, Adam, Binder, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::scenes::{augment, derive_prompt, AugmentMode, GeometricTransform, PromptKind, SceneSample};
use crate::slot_attention;
use crate::slot_decoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Supervised decoder training on source labels.
    Source,
    Stage1,
    Stage2Warm,
    Stage2Boot,
}

impl Stage {
    pub fn trainable(self, name: &str) -> bool {
        let has = |p: &[&str]| p.iter().any(|x| name.starts_with(x));
        match self {
            Stage::Source => (name.starts_with("prompt.") && name != "prompt.pe_gauss") || name.starts_with("mdec."),
            Stage::Stage1 => has(&["slot.", "sdec."]),
            Stage::Stage2Warm => has(&["obj.", "fuse."]),
            Stage::Stage2Boot => has(&["mdec.", "slot.", "sdec.", "obj.", "fuse."]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTriad {
    pub anchor: ModelParams,
    pub student: ModelParams,
    pub teacher: ModelParams,
}

/// `θᵗ ← m·θᵗ + (1−m)·θˢ`.
pub fn update_teacher(student: &ModelParams, teacher: &mut ModelParams, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Precondition(format!("momentum {momentum} outside [0, 1]")));
    }
    if student.store.descriptor() != teacher.store.descriptor() {
        return Err(Error::Shape("student and teacher architectures differ".into()));
    }
    for (name, t) in teacher.store.iter_mut() {
        let s = student.store.get(name).expect("descriptor checked");
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = momentum * *t + (1.0 - momentum) * s);
    }
    Ok(())
}

/// Anchor ← student, bit for bit.
pub fn bootstrap_copy(triad: &mut ModelTriad) {
    triad.anchor = triad.student.clone();
}

/// Shared read-only inputs of a step.
pub struct StepContext<'a> {
    pub config: &'a RunConfig,
    pub model: ModelConfig,
    pub encoder: &'a EncoderParams,
}

impl<'a> StepContext<'a> {
    pub fn new(config: &'a RunConfig, encoder: &'a EncoderParams) -> Self {
        Self {
            config,
            model: config.model(),
            encoder,
        }
    }
}

/// One training example; every random choice derives from `seed`.
pub struct StepItem<'a> {
    pub sample: &'a SceneSample,
    pub seed: u64,
    /// Precomputed features of the unaugmented image (stage 1 only).
    pub features: Option<&'a ViewFeatures>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub base: f64,
    pub object: f64,
    pub rec: f64,
    /// Largest |∂loss/∂θ| over anchor parameters bound in the step graph.
    pub anchor_grad_max: f64,
    pub teacher_grad_max: f64,
}

type Grads = BTreeMap<String, Array2<f64>>;

fn grad_max(g: &Grads) -> f64 {
    g.values().flat_map(|a| a.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
}

fn pick_kind(rng: &mut impl Rng, kinds: &[PromptKind]) -> PromptKind {
    if kinds.is_empty() {
        PromptKind::Box
    } else {
        kinds[rng.gen_range(0..kinds.len())]
    }
}

/// Row-major gather index that moves a weak-view grid into the strong view.
fn transport_index(from: &GeometricTransform, to: &GeometricTransform, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (or, oc) = to.inverse_point(r, c, h, w);
            let (fr, fc) = from.forward_point(or, oc, h, w);
            idx.push(Some(fr * w + fc));
        }
    }
    idx
}

fn stage1_sample(ctx: &StepContext, student: &ModelParams, item: &StepItem) -> Result<(StepMetrics, Grads)> {
    let owned;
    let feats = match item.features {
        Some(f) => f,
        None => {
            owned = view_features(ctx.encoder, &item.sample.image)?;
            &owned
        }
    };
    let mut g = Graph::new();
    let mut b = Binder::new(&student.store, |n| Stage::Stage1.trainable(n));
    let z = g.constant(feats.z.clone());
    let s = &ctx.model.slots;
    let run = slot_attention::run_graph(&mut g, &mut b, z, s.num_slots, s.iters, item.seed)?;
    let dec = slot_decoder::decode_graph(&mut g, &mut b, run.slots)?;
    let loss = slot_decoder::reconstruction_loss_graph(&mut g, dec.combined, z);
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    Ok((
        StepMetrics {
            loss: value,
            rec: value,
            ..StepMetrics::default()
        },
        b.grads(&g, &grads),
    ))
}

fn source_sample(ctx: &StepContext, student: &ModelParams, item: &StepItem) -> Result<(StepMetrics, Grads)> {
    let cfg = ctx.config;
    let mut rng = seeded(derive_seed(item.seed, 0));
    let view = augment(item.sample, AugmentMode::Weak, derive_seed(item.seed, 1));
    let masks = view.masks(item.sample);
    let idx = rng.gen_range(0..masks.len());
    let kind = pick_kind(&mut rng, &cfg.eval.prompt_kinds);
    let prompt = derive_prompt(&masks[idx], kind, derive_seed(item.seed, 2), &cfg.prompt)?;
    let feats = view_features(ctx.encoder, &view.image)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&student.store, |n| Stage::Source.trainable(n));
    let out = forward_graph(&mut g, &mut b, &ctx.model, false, &feats, &prompt, derive_seed(item.seed, 3), false)?;
    let y = g.constant(masks[idx].mapv(|v| v as u8 as f64));
    let p = g.sigmoid(out.mask);
    let d = dice_graph(&mut g, p, y);
    let f = focal_graph(&mut g, p, y, cfg.train.focal_gamma);
    let loss = g.add(d, f);
    let value = g.scalar(loss);
    let grads = g.backward(loss);
    Ok((
        StepMetrics {
            loss: value,
            base: value,
            ..StepMetrics::default()
        },
        b.grads(&g, &grads),
    ))
}

fn stage2_sample(ctx: &StepContext, triad: &ModelTriad, item: &StepItem, stage: Stage) -> Result<(StepMetrics, Grads)> {
    let cfg = ctx.config;
    if !triad.student.use_object_token {
        return Err(Error::Precondition("stage 2 needs a student with the object token enabled".into()));
    }
    let sample = item.sample;
    let (h, w) = (sample.height(), sample.width());
    let mut rng = seeded(derive_seed(item.seed, 0));
    let weak = augment(sample, AugmentMode::Weak, derive_seed(item.seed, 1));
    let strong = augment(sample, AugmentMode::Strong, derive_seed(item.seed, 2));
    let idx = rng.gen_range(0..sample.instance_masks.len());
    let kind = pick_kind(&mut rng, &cfg.eval.prompt_kinds);
    let prompt = derive_prompt(&sample.instance_masks[idx], kind, derive_seed(item.seed, 3), &cfg.prompt)?;
    let pw = prompt.transformed(&weak.geometric, h, w);
    let ps = prompt.transformed(&strong.geometric, h, w);
    let fw = view_features(ctx.encoder, &weak.image)?;
    let fs = view_features(ctx.encoder, &strong.image)?;
    let sseed = derive_seed(item.seed, 4);
    let boot = stage == Stage::Stage2Boot;

    let mut g = Graph::new();
    // anchor and teacher parameters are bound as gradient leaves so the step
    // can measure that nothing reaches them
    let mut ba = Binder::new(&triad.anchor.store, |_| true);
    let mut bt = Binder::new(&triad.teacher.store, |_| true);
    let mut bs = Binder::new(&triad.student.store, |n| stage.trainable(n));
    let oa = forward_graph(&mut g, &mut ba, &ctx.model, triad.anchor.use_object_token, &fw, &pw, sseed, false)?;
    let student_rec = boot && cfg.train.rec_weight > 0.0;
    let os = forward_graph(&mut g, &mut bs, &ctx.model, true, &fs, &ps, sseed, student_rec)?;
    let perm = transport_index(&weak.geometric, &strong.geometric, h, w);
    let ma = g.gather(oa.mask, (h, w), perm.clone());
    let object_mask = os.object_mask.expect("object token enabled");
    let object = object_loss_graph(&mut g, object_mask, ma);
    let mut m = StepMetrics {
        object: g.scalar(object),
        ..StepMetrics::default()
    };
    let loss: Var = if boot {
        let ot = forward_graph(&mut g, &mut bt, &ctx.model, triad.teacher.use_object_token, &fw, &pw, sseed, false)?;
        let mt = g.gather(ot.mask, (h, w), perm);
        let base = base_loss_graph(&mut g, os.mask, mt, ma, cfg.train.focal_gamma);
        m.base = g.scalar(base.total);
        let weighted = g.scale(object, cfg.train.object_weight);
        let mut total = g.add(base.total, weighted);
        if let Some(rec) = os.rec_loss {
            m.rec = g.scalar(rec);
            let r = g.scale(rec, cfg.train.rec_weight);
            total = g.add(total, r);
        }
        total
    } else {
        object
    };
    m.loss = g.scalar(loss);
    if !m.loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite {stage:?} loss on sample seed {}", sample.seed)));
    }
    let grads = g.backward(loss);
    m.anchor_grad_max = grad_max(&ba.grads(&g, &grads));
    m.teacher_grad_max = grad_max(&bt.grads(&g, &grads));
    Ok((m, bs.grads(&g, &grads)))
}

/// One optimiser update of the student on `batch` (gradients averaged), then an
/// EMA teacher update in stage 2.
pub fn train_step(
    ctx: &StepContext,
    triad: &mut ModelTriad,
    optimizer: &mut Adam,
    batch: &[StepItem],
    stage: Stage,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut acc: Grads = BTreeMap::new();
    let mut mean = StepMetrics::default();
    for item in batch {
        let (m, g) = match stage {
            Stage::Source => source_sample(ctx, &triad.student, item)?,
            Stage::Stage1 => stage1_sample(ctx, &triad.student, item)?,
            Stage::Stage2Warm | Stage::Stage2Boot => stage2_sample(ctx, triad, item, stage)?,
        };
        if !m.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite {stage:?} loss on sample seed {}", item.sample.seed)));
        }
        mean.loss += m.loss;
        mean.base += m.base;
        mean.object += m.object;
        mean.rec += m.rec;
        mean.anchor_grad_max = mean.anchor_grad_max.max(m.anchor_grad_max);
        mean.teacher_grad_max = mean.teacher_grad_max.max(m.teacher_grad_max);
        accumulate(&mut acc, g);
    }
    let n = batch.len() as f64;
    for v in acc.values_mut() {
        v.mapv_inplace(|x| x / n);
    }
    mean.loss /= n;
    mean.base /= n;
    mean.object /= n;
    mean.rec /= n;
    optimizer.update(&mut triad.student.store, &acc);
    if !triad.student.store.all_finite() {
        return Err(Error::Numerical(format!("non-finite student parameters after a {stage:?} step")));
    }
    if matches!(stage, Stage::Stage2Warm | Stage::Stage2Boot) {
        update_teacher(&triad.student, &mut triad.teacher, ctx.config.train.ema_momentum)?;
    }
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub steps: usize,
    pub loss: f64,
    pub base_loss: f64,
    pub object_loss: f64,
    pub rec_loss: f64,
    pub val_miou: f64,
    pub bootstrapped: bool,
    pub anchor_grad_max: f64,
    pub teacher_grad_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEvent {
    pub epoch: usize,
    pub val_miou: f64,
    pub anchor_hash: String,
    pub student_hash: String,
    /// Largest |Mᵃ − Mˢ| over the validation batch right after the copy.
    pub max_output_diff: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub config_hash: String,
    pub encoder_pretrain: Option<PretrainLog>,
    pub source_losses: Vec<f64>,
    pub stage1_losses: Vec<f64>,
    /// Reconstruction loss on a fixed probe set before and after stage 1.
    pub stage1_rec_initial: Option<f64>,
    pub stage1_rec_final: Option<f64>,
    /// Validation mIoU of the source model (the initial anchor).
    pub source_val_miou: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub bootstrap_events: Vec<BootstrapEvent>,
    pub wall_time_secs: f64,
}

impl TrainingReport {
    /// The report with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }

    /// One JSON record per epoch, then a summary record.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for e in &self.epochs {
            let mut v = serde_json::to_value(e)?;
            v["record"] = "epoch".into();
            writeln!(out, "{}", serde_json::to_string(&v)?)?;
        }
        let mut summary = serde_json::to_value(self)?;
        if let Some(o) = summary.as_object_mut() {
            o.remove("epochs");
        }
        summary["record"] = "summary".into();
        summary["bootstrap_epochs"] = self.bootstrap_events.iter().map(|e| e.epoch).collect::<Vec<_>>().into();
        writeln!(out, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase")]
pub enum Phase {
    Initialized,
    Stage1Done,
    Stage2 { next_epoch: usize },
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoder: EncoderParams,
    /// Snapshot of the source model, kept for comparison.
    pub source: ModelParams,
    pub triad: ModelTriad,
    pub phase: Phase,
    pub optimizer: Option<Adam>,
    pub best_val: Option<f64>,
    pub report: TrainingReport,
}

impl TrainState {
    pub fn stage_tag(&self) -> &'static str {
        match self.phase {
            Phase::Initialized => "init",
            Phase::Stage1Done => "stage1",
            Phase::Stage2 { .. } => "stage2",
        }
    }
}

pub fn init_state(config: &RunConfig) -> Result<TrainState> {
    config.validate()?;
    let encoder = init_encoder(derive_seed(config.seed, 0xE1C), &config.encoder)?;
    let model = init_model(&config.model(), derive_seed(config.seed, 0x30D))?;
    Ok(TrainState {
        encoder,
        source: model.clone(),
        triad: ModelTriad {
            anchor: model.clone(),
            student: model.clone(),
            teacher: model,
        },
        phase: Phase::Initialized,
        optimizer: None,
        best_val: None,
        report: TrainingReport {
            seed: config.seed,
            config_hash: config.hash(),
            ..TrainingReport::default()
        },
    })
}

/// Mean reconstruction loss of `params` on `features` with fixed slot seeds.
pub fn probe_rec_loss(model: &ModelConfig, params: &ModelParams, features: &[ViewFeatures], seed: u64) -> Result<f64> {
    let mut acc = KahanSum::default();
    for (i, f) in features.iter().enumerate() {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&params.store);
        let z = g.constant(f.z.clone());
        let run = slot_attention::run_graph(&mut g, &mut b, z, model.slots.num_slots, model.slots.iters, derive_seed(seed, i as u64))?;
        let dec = slot_decoder::decode_graph(&mut g, &mut b, run.slots)?;
        let l = slot_decoder::reconstruction_loss_graph(&mut g, dec.combined, z);
        acc.add(g.scalar(l));
    }
    Ok(acc.value() / features.len().max(1) as f64)
}

const PROBE: usize = 32;

/// Encoder pretraining, source decoder training and stage-1 slot learning.
pub fn run_stage1(state: &mut TrainState, config: &RunConfig, data: &Dataset) -> Result<()> {
    if state.phase != Phase::Initialized {
        return Err(Error::Precondition(format!("stage 1 cannot run from {:?}", state.phase)));
    }
    if data.source_train.is_empty() || data.target_train.is_empty() {
        return Err(Error::Precondition("stage 1 needs source and target training scenes".into()));
    }
    let seed = config.seed;
    if !state.encoder.frozen {
        let corpus: Vec<SceneSample> = data.source_train.iter().chain(&data.target_train).cloned().collect();
        let probe: Vec<SceneSample> = data.target_val.iter().take(8).cloned().collect();
        let enc = state.encoder.clone();
        let (enc, log) = pretrain_encoder(enc, &corpus, &probe, config.encoder.pretrain_steps, derive_seed(seed, 0xE2C))?;
        state.encoder = enc;
        state.report.encoder_pretrain = Some(log);
    }
    let encoder = state.encoder.clone();
    let ctx = StepContext::new(config, &encoder);
    let t = &config.train;

    let mut opt = Adam::new(t.source_lr);
    let src = &data.source_train;
    for step in 0..t.source_steps {
        let items: Vec<StepItem> = (0..t.source_batch)
            .map(|j| {
                let k = step * t.source_batch + j;
                StepItem {
                    sample: &src[k % src.len()],
                    seed: derive_seed(derive_seed(seed, 0x50C), k as u64),
                    features: None,
                }
            })
            .collect();
        let m = train_step(&ctx, &mut state.triad, &mut opt, &items, Stage::Source)?;
        state.report.source_losses.push(m.loss);
    }

    let tgt = &data.target_train;
    let feats = tgt
        .iter()
        .map(|s| view_features(&encoder, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let probe = &feats[..feats.len().min(PROBE)];
    let probe_seed = derive_seed(seed, 0x960B);
    state.report.stage1_rec_initial = Some(probe_rec_loss(&ctx.model, &state.triad.student, probe, probe_seed)?);
    let mut opt = Adam::new(t.stage1_lr);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    for step in 0..t.stage1_steps {
        let mut items = Vec::with_capacity(t.stage1_batch);
        for j in 0..t.stage1_batch {
            if cursor == order.len() {
                order = (0..tgt.len()).collect();
                order.shuffle(&mut seeded(derive_seed(seed ^ 0x5A61, pass)));
                pass += 1;
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            items.push(StepItem {
                sample: &tgt[i],
                seed: derive_seed(derive_seed(seed, 0x51A), (step * t.stage1_batch + j) as u64),
                features: Some(&feats[i]),
            });
        }
        let m = train_step(&ctx, &mut state.triad, &mut opt, &items, Stage::Stage1)?;
        state.report.stage1_losses.push(m.loss);
    }
    state.report.stage1_rec_final = Some(probe_rec_loss(&ctx.model, &state.triad.student, probe, probe_seed)?);

    let source = ModelParams {
        store: state.triad.student.store.clone(),
        use_object_token: false,
    };
    let student = ModelParams {
        store: source.store.clone(),
        use_object_token: true,
    };
    state.source = source.clone();
    state.triad = ModelTriad {
        anchor: source,
        teacher: student.clone(),
        student,
    };
    state.phase = Phase::Stage1Done;
    Ok(())
}

/// Box-prompt validation mIoU and the logits it was computed from.
pub fn validation(ctx: &StepContext, params: &ModelParams, val: &[SceneSample]) -> Result<(f64, Vec<Array2<f64>>)> {
    let predictor = ModelPredictor {
        config: &ctx.model,
        encoder: ctx.encoder,
        params,
    };
    let mut all = Vec::new();
    let mut acc = KahanSum::default();
    for s in val {
        let prompts = (0..s.instance_masks.len())
            .map(|i| crate::metrics::eval_prompt(s, i, PromptKind::Box, &ctx.config.prompt))
            .collect::<Result<Vec<_>>>()?;
        let logits = predictor.predict(s, &prompts)?;
        let mut per = KahanSum::default();
        for (p, l) in prompts.iter().zip(&logits) {
            per.add(iou(&l.mapv(|x| x >= 0.0), &s.instance_masks[p.target_index])?);
        }
        acc.add(per.value() / prompts.len().max(1) as f64);
        all.extend(logits);
    }
    Ok((acc.value() / val.len().max(1) as f64, all))
}

fn max_abs_diff(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Stage 2 from the current phase to the configured number of epochs. The
/// observer sees the state after every epoch (checkpointing, rendering).
pub fn run_stage2(
    state: &mut TrainState,
    config: &RunConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<()> {
    let start = match state.phase {
        Phase::Stage1Done => 0,
        Phase::Stage2 { next_epoch } => next_epoch,
        Phase::Initialized => return Err(Error::Precondition("stage 2 needs a stage-1 state".into())),
    };
    let encoder = state.encoder.clone();
    let ctx = StepContext::new(config, &encoder);
    let t = &config.train;
    if state.best_val.is_none() {
        let (v, _) = validation(&ctx, &state.triad.anchor, &data.target_val)?;
        state.best_val = Some(v);
        state.report.source_val_miou = Some(v);
    }
    let mut opt = state.optimizer.take().unwrap_or_else(|| Adam::new(t.stage2_lr));
    let tgt = &data.target_train;
    if tgt.is_empty() && start < t.stage2_epochs {
        return Err(Error::Precondition("stage 2 needs target training scenes".into()));
    }
    let warm = t.warm_epochs();
    for epoch in start..t.stage2_epochs {
        let stage = if epoch < warm { Stage::Stage2Warm } else { Stage::Stage2Boot };
        let anchor_hash = state.triad.anchor.hash();
        let mut order: Vec<usize> = (0..tgt.len()).collect();
        order.shuffle(&mut seeded(derive_seed(derive_seed(config.seed, 0x52E), epoch as u64)));
        let mut sums = [KahanSum::default(); 4];
        let (mut ag, mut tg) = (0.0f64, 0.0f64);
        let mut steps = 0;
        for (bi, chunk) in order.chunks(t.stage2_batch).enumerate() {
            let items: Vec<StepItem> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| StepItem {
                    sample: &tgt[i],
                    seed: derive_seed(derive_seed(config.seed, 0x52F + epoch as u64), (bi * t.stage2_batch + j) as u64),
                    features: None,
                })
                .collect();
            let m = train_step(&ctx, &mut state.triad, &mut opt, &items, stage)?;
            for (s, v) in sums.iter_mut().zip([m.loss, m.base, m.object, m.rec]) {
                s.add(v);
            }
            ag = ag.max(m.anchor_grad_max);
            tg = tg.max(m.teacher_grad_max);
            steps += 1;
        }
        if state.triad.anchor.hash() != anchor_hash {
            return Err(Error::Precondition("anchor changed within an epoch".into()));
        }
        let (val, student_logits) = validation(&ctx, &state.triad.student, &data.target_val)?;
        let improved = state.best_val.map_or(true, |b| val > b);
        if improved {
            bootstrap_copy(&mut state.triad);
            state.best_val = Some(val);
            let (_, anchor_logits) = validation(&ctx, &state.triad.anchor, &data.target_val)?;
            state.report.bootstrap_events.push(BootstrapEvent {
                epoch,
                val_miou: val,
                anchor_hash: state.triad.anchor.hash(),
                student_hash: state.triad.student.hash(),
                max_output_diff: max_abs_diff(&anchor_logits, &student_logits),
            });
        }
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            stage,
            steps,
            loss: sums[0].value() / n,
            base_loss: sums[1].value() / n,
            object_loss: sums[2].value() / n,
            rec_loss: sums[3].value() / n,
            val_miou: val,
            bootstrapped: improved,
            anchor_grad_max: ag,
            teacher_grad_max: tg,
        };
        state.report.epochs.push(record.clone());
        state.phase = Phase::Stage2 { next_epoch: epoch + 1 };
        state.optimizer = Some(opt.clone());
        observer(state, &record)?;
    }
    state.optimizer = Some(opt);
    if let Phase::Stage1Done = state.phase {
        state.phase = Phase::Stage2 { next_epoch: t.stage2_epochs.min(start) };
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    Stage1,
    Stage2,
    All,
}

impl std::str::FromStr for StageSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Self::Stage1),
            "stage2" => Ok(Self::Stage2),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Run the selected stages, starting from `state` when given.
pub fn fit(
    config: &RunConfig,
    data: &Dataset,
    selection: StageSelection,
    state: Option<TrainState>,
    observer: &mut dyn FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<TrainState> {
    let started = std::time::Instant::now();
    let mut state = match state {
        Some(s) => s,
        None => init_state(config)?,
    };
    let before = state.report.wall_time_secs;
    if matches!(selection, StageSelection::Stage1 | StageSelection::All) && state.phase == Phase::Initialized {
        run_stage1(&mut state, config, data)?;
    }
    if matches!(selection, StageSelection::Stage2 | StageSelection::All) {
        run_stage2(&mut state, config, data, observer)?;
    }
    state.report.wall_time_secs = before + started.elapsed().as_secs_f64();
    Ok(state)
}

/// Parameter hash helper over one stage's trainable set.
pub fn trainable_hash(store: &ParamStore, stage: Stage) -> String {
    store.hash_filtered(|n| stage.trainable(n))
}
