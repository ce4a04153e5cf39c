//! Browser demo over the core crate: render a synthetic scene, derive a weak
//! prompt for one object, and split the scene into slots.

use ndarray::Array2;
use slotsam::encoder::FeatureMap;
use slotsam::metrics::ari;
use slotsam::params::ParamStore;
use slotsam::rng::{derive_seed, seeded};
use slotsam::scenes::{
    apply_shift, derive_prompt, generate_scene, mask_iou, quantize, DomainTag, Mask, PromptConfig, PromptData, PromptKind,
    SceneConfig, SceneSample, ShiftConfig,
};
use slotsam::slot_attention::{init_slot_module, run_slot_attention, SlotConfig};
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

const PATCH: usize = 4;

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Scene as drawn by the training pipeline, target scenes with the domain shift.
pub fn scene(seed: u64, target: bool) -> slotsam::error::Result<SceneSample> {
    let domain = if target { DomainTag::Target } else { DomainTag::Source };
    let cfg = SceneConfig::default().with_domain(domain);
    let mut s = generate_scene(seed, &cfg)?;
    if target {
        s = apply_shift(&s, &ShiftConfig::default());
    }
    quantize(&mut s.image);
    Ok(s)
}

fn rgba(sample: &SceneSample) -> Vec<u8> {
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out.push((sample.image[[r, c, ch]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

fn tint(buf: &mut [u8], w: usize, r: usize, c: usize, color: [u8; 3], alpha: f64) {
    let i = (r * w + c) * 4;
    for ch in 0..3 {
        buf[i + ch] = ((1.0 - alpha) * buf[i + ch] as f64 + alpha * color[ch] as f64).round() as u8;
    }
}

fn prompt_mask(data: &PromptData, h: usize, w: usize) -> Mask {
    match data {
        PromptData::Box([r0, c0, r1, c1]) => Array2::from_shape_fn((h, w), |(r, c)| r >= *r0 && r <= *r1 && c >= *c0 && c <= *c1),
        PromptData::Points(pts) => Array2::from_shape_fn((h, w), |(r, c)| pts.contains(&(r, c))),
        PromptData::Poly(m) => m.clone(),
    }
}

/// Patch-mean colour plus normalised position: a hand-made feature map that
/// lets slot attention run without a trained encoder.
pub fn pixel_features(sample: &SceneSample) -> FeatureMap {
    let (gh, gw) = (sample.height() / PATCH, sample.width() / PATCH);
    let mut tokens = Array2::zeros((gh * gw, 5));
    for gr in 0..gh {
        for gc in 0..gw {
            let n = gr * gw + gc;
            for r in gr * PATCH..(gr + 1) * PATCH {
                for c in gc * PATCH..(gc + 1) * PATCH {
                    for ch in 0..3 {
                        tokens[[n, ch]] += 4.0 * sample.image[[r, c, ch]] / (PATCH * PATCH) as f64;
                    }
                }
            }
            tokens[[n, 3]] = gr as f64 / gh as f64;
            tokens[[n, 4]] = gc as f64 / gw as f64;
        }
    }
    FeatureMap { tokens, grid: (gh, gw) }
}

/// Hard slot label per pixel and the foreground ARI against ground truth.
pub fn decompose(sample: &SceneSample, k: usize, iters: usize, seed: u64) -> slotsam::error::Result<(Array2<usize>, Option<f64>)> {
    let feats = pixel_features(sample);
    let cfg = SlotConfig { num_slots: k, iters, dim: 16 };
    let mut store = ParamStore::new();
    init_slot_module(&mut store, &mut seeded(derive_seed(seed, 1)), &cfg, feats.dim());
    let (_, attn) = run_slot_attention(&store, &feats, k, iters, derive_seed(seed, 2))?;
    let gw = feats.grid.1;
    let labels = Array2::from_shape_fn((sample.height(), sample.width()), |(r, c)| {
        let row = attn.attn.row((r / PATCH) * gw + c / PATCH);
        (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    });
    let score = ari(&labels, &sample.label_map(), true)?;
    Ok((labels, score))
}

#[wasm_bindgen]
pub struct Demo {
    sample: SceneSample,
    prompt_iou: f64,
    ari: f64,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, target: bool) -> Result<Demo, JsValue> {
        Ok(Demo {
            sample: scene(seed as u64, target).map_err(err)?,
            prompt_iou: f64::NAN,
            ari: f64::NAN,
        })
    }

    pub fn width(&self) -> u32 {
        self.sample.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.sample.height() as u32
    }

    pub fn objects(&self) -> u32 {
        self.sample.instance_masks.len() as u32
    }

    /// Instance under pixel (x, y), or -1 for background.
    pub fn object_at(&self, x: u32, y: u32) -> i32 {
        let (r, c) = (y as usize, x as usize);
        for (i, m) in self.sample.instance_masks.iter().enumerate().rev() {
            if m.get((r, c)).copied().unwrap_or(false) {
                return i as i32;
            }
        }
        -1
    }

    pub fn image(&self) -> Vec<u8> {
        rgba(&self.sample)
    }

    /// Scene with object `index` shaded and its weak prompt drawn on top.
    pub fn prompt(&mut self, index: u32, kind: &str, seed: u32) -> Result<Vec<u8>, JsValue> {
        let kind: PromptKind = kind.parse().map_err(err)?;
        let gt = self
            .sample
            .instance_masks
            .get(index as usize)
            .ok_or_else(|| err(format!("no object {index}")))?;
        let p = derive_prompt(gt, kind, seed as u64, &PromptConfig::default()).map_err(err)?;
        let (h, w) = gt.dim();
        let pm = prompt_mask(&p.data, h, w);
        self.prompt_iou = mask_iou(&pm, gt);
        let mut buf = rgba(&self.sample);
        for ((r, c), &g) in gt.indexed_iter() {
            if g {
                tint(&mut buf, w, r, c, [60, 220, 60], 0.35);
            }
        }
        match &p.data {
            PromptData::Box([r0, c0, r1, c1]) => {
                for ((r, c), &v) in pm.indexed_iter() {
                    if v && (r == *r0 || r == *r1 || c == *c0 || c == *c1) {
                        tint(&mut buf, w, r, c, [255, 40, 40], 1.0);
                    }
                }
            }
            PromptData::Points(pts) => {
                for &(r, c) in pts {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                tint(&mut buf, w, rr as usize, cc as usize, [255, 40, 40], 1.0);
                            }
                        }
                    }
                }
            }
            PromptData::Poly(m) => {
                for ((r, c), &v) in m.indexed_iter() {
                    if v {
                        tint(&mut buf, w, r, c, [255, 40, 40], 0.45);
                    }
                }
            }
        }
        Ok(buf)
    }

    /// IoU between the last prompt (as a region) and its object.
    pub fn prompt_iou(&self) -> f64 {
        self.prompt_iou
    }

    /// Slot partition from an untrained slot module over colour and position.
    pub fn slots(&mut self, k: u32, iters: u32, seed: u32) -> Result<Vec<u8>, JsValue> {
        if !(1..=8).contains(&k) {
            return Err(err("slots must lie in 1..=8"));
        }
        let (labels, score) = decompose(&self.sample, k as usize, iters as usize, seed as u64).map_err(err)?;
        self.ari = score.unwrap_or(f64::NAN);
        let w = self.sample.width();
        let mut buf = rgba(&self.sample);
        for ((r, c), &l) in labels.indexed_iter() {
            tint(&mut buf, w, r, c, PALETTE[l % PALETTE.len()], 0.6);
        }
        Ok(buf)
    }

    pub fn ari(&self) -> f64 {
        self.ari
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_operations_produce_full_frames() {
        let mut d = Demo::new(3, true).unwrap();
        let n = (d.width() * d.height() * 4) as usize;
        assert_eq!(d.image().len(), n);
        assert!(d.objects() >= 1);
        for kind in ["box", "point", "poly"] {
            assert_eq!(d.prompt(0, kind, 1).unwrap().len(), n);
            assert!((0.0..=1.0).contains(&d.prompt_iou()));
        }
        assert_eq!(d.slots(4, 3, 0).unwrap().len(), n);
        assert!(d.ari().is_nan() || d.ari() <= 1.0);
    }

    #[test]
    fn object_lookup_matches_masks() {
        let d = Demo::new(11, false).unwrap();
        let m = &d.sample.instance_masks[0];
        let ((r, c), _) = m.indexed_iter().find(|(_, &v)| v).unwrap();
        assert!(d.object_at(c as u32, r as u32) >= 0);
    }
}
