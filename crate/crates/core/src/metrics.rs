//! IoU / ARI metrics, the evaluation fold, and visualisation panels.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::model::{predict, slot_assignment, slot_masks, slot_seed, upsample_slot_masks, view_features, ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::scenes::{derive_prompt, Mask, Prompt, PromptConfig, PromptKind, SceneSample};

/// `|a∧b| / |a∨b|`, 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    ndarray::Zip::from(pred).and(gt).for_each(|&a, &b| {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index from pair counts; 1 when neither labelling has any
/// disagreeing pair.
pub fn ari_labels(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} vs {} labels", pred.len(), truth.len())));
    }
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *cells.entry((t, p)).or_default() += 1;
        *rows.entry(t).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let both: f64 = cells.values().map(|&n| choose2(n)).sum();
    let same_t: f64 = rows.values().map(|&n| choose2(n)).sum();
    let same_p: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(pred.len() as u64);
    let tp = both;
    let fn_ = same_t - both;
    let fp = same_p - both;
    let tn = total - same_t - same_p + both;
    if fn_ == 0.0 && fp == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * (tp * tn - fn_ * fp) / ((tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn)))
}

/// ARI between per-pixel slot indices and instance labels (0 = background).
/// With `ignore_background` only pixels with a nonzero label count; `None`
/// when no pixel remains.
pub fn ari(slot_assignment: &Array2<usize>, gt_assignment: &Array2<usize>, ignore_background: bool) -> Result<Option<f64>> {
    if slot_assignment.dim() != gt_assignment.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", slot_assignment.dim(), gt_assignment.dim())));
    }
    let (p, t): (Vec<usize>, Vec<usize>) = slot_assignment
        .iter()
        .zip(gt_assignment.iter())
        .filter(|(_, &t)| !ignore_background || t != 0)
        .map(|(&p, &t)| (p, t))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    ari_labels(&p, &t).map(Some)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// The deterministic evaluation prompt for one instance.
pub fn eval_prompt(sample: &SceneSample, instance: usize, kind: PromptKind, cfg: &PromptConfig) -> Result<Prompt> {
    let mask = sample
        .instance_masks
        .get(instance)
        .ok_or_else(|| Error::Precondition(format!("sample has no instance {instance}")))?;
    let mut p = derive_prompt(mask, kind, derive_seed(sample.seed, 0xE7A1 + instance as u64), cfg)?;
    p.target_index = instance;
    Ok(p)
}

/// Anything that maps a sample and its prompts to mask logits.
pub trait MaskPredictor {
    fn predict(&self, sample: &SceneSample, prompts: &[Prompt]) -> Result<Vec<Array2<f64>>>;
}

/// A model role over the frozen encoder.
pub struct ModelPredictor<'a> {
    pub config: &'a ModelConfig,
    pub encoder: &'a EncoderParams,
    pub params: &'a ModelParams,
}

impl MaskPredictor for ModelPredictor<'_> {
    fn predict(&self, sample: &SceneSample, prompts: &[Prompt]) -> Result<Vec<Array2<f64>>> {
        let f = view_features(self.encoder, &sample.image)?;
        prompts
            .iter()
            .map(|p| Ok(predict(self.config, self.params, &f, p, slot_seed(sample))?.mask))
            .collect()
    }
}

/// Returns ground truth as saturated logits.
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn predict(&self, sample: &SceneSample, prompts: &[Prompt]) -> Result<Vec<Array2<f64>>> {
        Ok(prompts
            .iter()
            .map(|p| sample.instance_masks[p.target_index].mapv(|b| if b { 20.0 } else { -20.0 }))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub seed: u64,
    pub kind: PromptKind,
    /// Mean IoU over the sample's instances.
    pub iou: f64,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AriSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub miou: BTreeMap<PromptKind, f64>,
    pub ari: Option<AriSummary>,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    /// One row per (sample, prompt kind).
    pub fn table(&self) -> String {
        let mut out = String::from("id\tseed\tkind\tinstances\tiou\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{:.9}\n", r.id, r.seed, r.kind.name(), r.instances, r.iou));
        }
        out
    }
}

/// Per-sample IoU (averaged over instances) for one prompt kind.
pub fn sample_iou(predictor: &dyn MaskPredictor, sample: &SceneSample, kind: PromptKind, cfg: &PromptConfig) -> Result<f64> {
    let prompts = (0..sample.instance_masks.len())
        .map(|i| eval_prompt(sample, i, kind, cfg))
        .collect::<Result<Vec<_>>>()?;
    let logits = predictor.predict(sample, &prompts)?;
    let mut acc = KahanSum::default();
    for (p, l) in prompts.iter().zip(&logits) {
        acc.add(iou(&l.mapv(|x| x >= 0.0), &sample.instance_masks[p.target_index])?);
    }
    Ok(acc.value() / prompts.len().max(1) as f64)
}

/// mIoU over `samples` for one prompt kind.
pub fn miou(predictor: &dyn MaskPredictor, samples: &[SceneSample], kind: PromptKind, cfg: &PromptConfig) -> Result<f64> {
    let mut acc = KahanSum::default();
    for s in samples {
        acc.add(sample_iou(predictor, s, kind, cfg)?);
    }
    Ok(acc.value() / samples.len().max(1) as f64)
}

/// Per-image foreground ARI of the slot assignment.
pub fn slot_ari(
    config: &ModelConfig,
    encoder: &EncoderParams,
    params: &ModelParams,
    samples: &[SceneSample],
    ignore_background: bool,
) -> Result<AriSummary> {
    let mut values = Vec::new();
    let mut missing = 0;
    for s in samples {
        let f = view_features(encoder, &s.image)?;
        let m = slot_masks(config, params, &f, slot_seed(s))?;
        let assign = slot_assignment(&m, config.grid(), config.image);
        match ari(&assign, &s.label_map(), ignore_background)? {
            Some(v) => values.push(v),
            None => missing += 1,
        }
    }
    let n = values.len().max(1) as f64;
    let mut acc = KahanSum::default();
    values.iter().for_each(|&v| acc.add(v));
    let mean = acc.value() / n;
    let mut var = KahanSum::default();
    values.iter().for_each(|&v| var.add((v - mean) * (v - mean)));
    Ok(AriSummary {
        mean,
        std: (var.value() / n).sqrt(),
        count: values.len(),
        missing,
    })
}

/// Evaluate `predictor` on every sample for every kind. Samples are identified
/// by their position in `samples`.
pub fn evaluate(
    predictor: &dyn MaskPredictor,
    samples: &[SceneSample],
    kinds: &[PromptKind],
    prompt_cfg: &PromptConfig,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len() * kinds.len());
    let mut sums: BTreeMap<PromptKind, KahanSum> = BTreeMap::new();
    for (id, s) in samples.iter().enumerate() {
        for &kind in kinds {
            let v = sample_iou(predictor, s, kind, prompt_cfg)?;
            sums.entry(kind).or_default().add(v);
            records.push(SampleRecord {
                id,
                seed: s.seed,
                kind,
                iou: v,
                instances: s.instance_masks.len(),
            });
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        seed,
        miou: sums.into_iter().map(|(k, s)| (k, s.value() / n)).collect(),
        ari: None,
        records,
    })
}

/// Panel for one sample: slot heatmaps plus the box-prompt prediction of the
/// first instance.
pub fn sample_panel(
    config: &ModelConfig,
    encoder: &EncoderParams,
    params: &ModelParams,
    sample: &SceneSample,
    prompt_cfg: &PromptConfig,
) -> Result<RgbImage> {
    if sample.instance_masks.is_empty() {
        return Err(Error::Precondition(format!("sample {} has no instances", sample.seed)));
    }
    let f = view_features(encoder, &sample.image)?;
    let m = slot_masks(config, params, &f, slot_seed(sample))?;
    let heat = upsample_slot_masks(&m, config.grid(), config.image);
    let prompt = eval_prompt(sample, 0, PromptKind::Box, prompt_cfg)?;
    let logits = predict(config, params, &f, &prompt, slot_seed(sample))?.mask;
    render_panel(sample, &heat, &logits.mapv(|x| x >= 0.0), &sample.instance_masks[0])
}

const SEP: u32 = 2;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blit(panel: &mut RgbImage, x0: u32, tile: impl Fn(usize, usize) -> [u8; 3], h: usize, w: usize) {
    for r in 0..h {
        for c in 0..w {
            panel.put_pixel(x0 + c as u32, r as u32, Rgb(tile(r, c)));
        }
    }
}

fn overlay<'a>(img: &'a crate::scenes::Image, mask: &'a Mask, color: [f64; 3]) -> impl Fn(usize, usize) -> [u8; 3] + 'a {
    move |r, c| {
        let mut o = [0u8; 3];
        for ch in 0..3 {
            let v = img[[r, c, ch]];
            o[ch] = to_u8(if mask[[r, c]] { 0.45 * v + 0.55 * color[ch] } else { v });
        }
        o
    }
}

/// Input | K slot heatmaps | prediction overlay (red) | ground truth overlay (green).
/// Heatmaps are scaled linearly (m_k = 1 → white) so the K tiles of a pixel
/// still sum to one.
pub fn render_panel(sample: &SceneSample, slot_masks: &[Array2<f64>], pred: &Mask, gt: &Mask) -> Result<RgbImage> {
    let (h, w) = (sample.height(), sample.width());
    if pred.dim() != (h, w) || gt.dim() != (h, w) || slot_masks.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::Shape("panel inputs must share the image size".into()));
    }
    let tiles = 3 + slot_masks.len() as u32;
    let width = tiles * w as u32 + (tiles - 1) * SEP;
    let mut panel = RgbImage::from_pixel(width, h as u32, Rgb([255, 255, 255]));
    let img = &sample.image;
    let pix = |r: usize, c: usize| [to_u8(img[[r, c, 0]]), to_u8(img[[r, c, 1]]), to_u8(img[[r, c, 2]])];
    let step = w as u32 + SEP;
    blit(&mut panel, 0, pix, h, w);
    for (k, m) in slot_masks.iter().enumerate() {
        blit(&mut panel, (k as u32 + 1) * step, |r, c| [to_u8(m[[r, c]]); 3], h, w);
    }
    let k = slot_masks.len() as u32;
    blit(&mut panel, (k + 1) * step, overlay(img, pred, [1.0, 0.1, 0.1]), h, w);
    blit(&mut panel, (k + 2) * step, overlay(img, gt, [0.1, 1.0, 0.1]), h, w);
    Ok(panel)
}

pub fn render_visualization(sample: &SceneSample, slot_masks: &[Array2<f64>], pred: &Mask, gt: &Mask, out_path: &Path) -> Result<()> {
    let panel = render_panel(sample, slot_masks, pred, gt)?;
    panel
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", out_path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Count agreeing/disagreeing pairs directly.
    fn brute_ari(p: &[usize], t: &[usize]) -> f64 {
        let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                match (t[i] == t[j], p[i] == p[j]) {
                    (true, true) => a += 1.0,
                    (true, false) => b += 1.0,
                    (false, true) => c += 1.0,
                    (false, false) => d += 1.0,
                }
            }
        }
        if b == 0.0 && c == 0.0 {
            return 1.0;
        }
        2.0 * (a * d - b * c) / ((a + b) * (b + d) + (a + c) * (c + d))
    }

    #[test]
    fn iou_examples() {
        let a = array![[true, true, false]];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &array![[false, false, true]]).unwrap(), 0.0);
        assert_eq!(iou(&a, &array![[false, true, true]]).unwrap(), 1.0 / 3.0);
        let e = array![[false, false]];
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&a, &e).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari_labels(&[0, 0, 1, 1], &[3, 3, 5, 5]).unwrap(), 1.0);
        assert_eq!(ari_labels(&[0, 0, 0, 0], &[1, 1, 2, 2]).unwrap(), 0.0);
        let p = [0, 0, 1, 1, 2, 2];
        let t = [0, 0, 0, 1, 1, 1];
        // contingency [[2,1,0],[0,1,2]]: tp=2, fn=4, fp=1, tn=8
        let v = ari_labels(&p, &t).unwrap();
        assert_eq!(v, brute_ari(&p, &t));
        assert!((v - 2.0 * (2.0 * 8.0 - 4.0) / (6.0 * 12.0 + 3.0 * 9.0)).abs() < 1e-15);
    }

    #[test]
    fn ari_all_three_pixel_assignments() {
        for code in 0..729 {
            let digits: Vec<usize> = (0..6).map(|i| (code / 3usize.pow(i)) % 3).collect();
            let (p, t) = digits.split_at(3);
            assert_eq!(ari_labels(p, t).unwrap(), brute_ari(p, t), "{p:?} {t:?}");
        }
    }

    #[test]
    fn ari_foreground_only() {
        let slots = array![[0, 0], [1, 1]];
        let gt = array![[0, 0], [0, 0]];
        assert_eq!(ari(&slots, &gt, true).unwrap(), None);
        assert_eq!(ari(&slots, &gt, false).unwrap(), Some(0.0));
    }

    #[test]
    fn compensated_sum_is_order_free() {
        let xs = [1e16, 1.0, -1e16, 3.0, 1e-3];
        let mut a = KahanSum::default();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = KahanSum::default();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert!((a.value() - 4.001).abs() < 1e-12);
        assert!((b.value() - 4.001).abs() < 1e-12);
    }
}
