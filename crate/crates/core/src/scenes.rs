//! Procedural multi-object sprite scenes with instance masks, weak/strong
//! augmentation, synthetic covariate shift, and weak prompts derived from masks.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, standard_normal};

pub type Mask = Array2<bool>;
pub type Image = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub domain_tag: DomainTag,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 4,
            min_radius: 7.0,
            max_radius: 12.0,
            domain_tag: DomainTag::Source,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects < 1 {
            return Err(Error::Config("max_objects must be >= 1".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("need 1 <= min_radius <= max_radius".into()));
        }
        Ok(())
    }

    pub fn with_domain(&self, domain_tag: DomainTag) -> Self {
        Self {
            domain_tag,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// H×W×3, values in [0, 1].
    pub image: Image,
    pub instance_masks: Vec<Mask>,
    pub object_count: usize,
    pub seed: u64,
    pub domain_tag: DomainTag,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Per-pixel instance label, 0 for background and `i + 1` for mask `i`.
    pub fn label_map(&self) -> Array2<usize> {
        let mut out = Array2::zeros((self.height(), self.width()));
        for (i, m) in self.instance_masks.iter().enumerate() {
            ndarray::Zip::from(&mut out).and(m).for_each(|o, &b| {
                if b {
                    *o = i + 1
                }
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Blob,
}

struct Sprite {
    shape: Shape,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
    wobble: (f64, f64),
}

/// Bounding radius as a multiple of the nominal radius.
const BOUND: f64 = 1.2;
/// Object pixels stay this far from the border so weak translations never
/// wrap an object across the image edge.
const MARGIN: f64 = 4.0;

impl Sprite {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dy = r - self.cy;
        let dx = c - self.cx;
        let (s, co) = self.angle.sin_cos();
        let u = co * dx + s * dy;
        let v = -s * dx + co * dy;
        let rad = self.radius;
        match self.shape {
            Shape::Circle => u * u + v * v <= rad * rad,
            Shape::Square => u.abs() <= 0.8 * rad && v.abs() <= 0.8 * rad,
            Shape::Triangle => (0..3).all(|k| {
                let t = std::f64::consts::TAU * k as f64 / 3.0;
                u * t.cos() + v * t.sin() <= 0.55 * rad
            }),
            Shape::Blob => {
                let phi = v.atan2(u);
                let rr = rad * (0.9 + 0.18 * (3.0 * phi + self.wobble.0).sin() + 0.08 * (5.0 * phi + self.wobble.1).cos());
                u * u + v * v <= rr * rr
            }
        }
    }
}

const SOURCE_PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.90],
];

const TARGET_PALETTE: [[f64; 3]; 6] = [
    [0.62, 0.45, 0.30],
    [0.45, 0.55, 0.30],
    [0.35, 0.45, 0.60],
    [0.70, 0.62, 0.40],
    [0.55, 0.40, 0.55],
    [0.40, 0.60, 0.58],
];

fn stripes(r: f64, c: f64, angle: f64, freq: f64) -> f64 {
    (freq * (r * angle.sin() + c * angle.cos())).sin()
}

/// Generate one scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = seeded(derive_seed(seed, 0x5CE4E));
    let (h, w) = (config.height, config.width);
    let target = config.domain_tag == DomainTag::Target;
    let wanted = rng.gen_range(config.min_objects..=config.max_objects);

    let mut sprites: Vec<Sprite> = Vec::new();
    let mut attempts = 0;
    while sprites.len() < wanted && attempts < 200 {
        attempts += 1;
        let radius = if sprites.is_empty() {
            // the first sprite always fits
            rng.gen_range(config.min_radius..=config.max_radius)
                .min((h.min(w) as f64 / 2.0 - MARGIN - 1.0) / BOUND)
        } else {
            rng.gen_range(config.min_radius..=config.max_radius)
        };
        let reach = BOUND * radius + MARGIN;
        if 2.0 * reach >= h as f64 || 2.0 * reach >= w as f64 {
            continue;
        }
        let cy = rng.gen_range(reach..h as f64 - reach);
        let cx = rng.gen_range(reach..w as f64 - reach);
        let clear = sprites.iter().all(|s| {
            let d = ((s.cy - cy).powi(2) + (s.cx - cx).powi(2)).sqrt();
            d > BOUND * (s.radius + radius) + 2.0
        });
        if !clear {
            continue;
        }
        let shape = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Blob][rng.gen_range(0..4)];
        sprites.push(Sprite {
            shape,
            cy,
            cx,
            radius,
            angle: rng.gen_range(0.0..std::f64::consts::TAU),
            wobble: (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)),
        });
    }

    // background
    let mut image = Array3::zeros((h, w, 3));
    let base: [f64; 3] = if target {
        let b = rng.gen_range(0.35..0.5);
        [b + rng.gen_range(-0.05..0.05), b + rng.gen_range(-0.05..0.05), b + rng.gen_range(-0.05..0.05)]
    } else {
        let b = rng.gen_range(0.12..0.28);
        [b, b, b]
    };
    let grad_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let tex_freq = rng.gen_range(0.25..0.6);
    for r in 0..h {
        for c in 0..w {
            let t = ((r as f64 / h as f64 - 0.5) * grad_dir.sin() + (c as f64 / w as f64 - 0.5) * grad_dir.cos()) * 0.1;
            let tex = if target { 0.08 * stripes(r as f64, c as f64, tex_angle, tex_freq) } else { 0.0 };
            for ch in 0..3 {
                image[[r, c, ch]] = base[ch] + t + tex;
            }
        }
    }

    let palette = if target { &TARGET_PALETTE } else { &SOURCE_PALETTE };
    let mut masks = Vec::with_capacity(sprites.len());
    for s in &sprites {
        let mut color = palette[rng.gen_range(0..palette.len())];
        for ch in color.iter_mut() {
            *ch += rng.gen_range(-0.06..0.06);
        }
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let freq = rng.gen_range(0.6..1.2);
        let mut mask = Array2::from_elem((h, w), false);
        for r in 0..h {
            for c in 0..w {
                let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
                if !s.contains(pr, pc) {
                    continue;
                }
                mask[[r, c]] = true;
                let d2 = ((pr - s.cy).powi(2) + (pc - s.cx).powi(2)) / (s.radius * s.radius);
                let shade = 1.0 - 0.2 * d2.min(1.5);
                let tex = if target { 0.12 * stripes(pr, pc, angle, freq) } else { 0.0 };
                for ch in 0..3 {
                    image[[r, c, ch]] = color[ch] * shade + tex;
                }
            }
        }
        masks.push(mask);
    }
    // tiny sprites could rasterise to nothing; drop them
    let keep: Vec<bool> = masks.iter().map(|m| m.iter().any(|&b| b)).collect();
    let masks: Vec<Mask> = masks.into_iter().zip(keep).filter(|(_, k)| *k).map(|(m, _)| m).collect();
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));

    Ok(SceneSample {
        object_count: masks.len(),
        image,
        instance_masks: masks,
        seed,
        domain_tag: config.domain_tag,
    })
}

/// Round to the nearest 8-bit level so on-disk PNGs reproduce the sample exactly.
pub fn quantize(image: &mut Image) {
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

// ---------------------------------------------------------------------------
// Geometry and augmentation
// ---------------------------------------------------------------------------

/// Horizontal flip followed by a circular translation. Exactly invertible on
/// the pixel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub flip: bool,
    pub dr: i64,
    pub dc: i64,
}

impl GeometricTransform {
    pub const IDENTITY: Self = Self {
        flip: false,
        dr: 0,
        dc: 0,
    };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.dr == 0 && self.dc == 0
    }

    /// Where source pixel `(r, c)` lands.
    pub fn forward_point(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let c = if self.flip { w - 1 - c } else { c };
        (
            (r as i64 + self.dr).rem_euclid(h as i64) as usize,
            (c as i64 + self.dc).rem_euclid(w as i64) as usize,
        )
    }

    /// Which source pixel lands on `(r, c)`.
    pub fn inverse_point(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let r = (r as i64 - self.dr).rem_euclid(h as i64) as usize;
        let c = (c as i64 - self.dc).rem_euclid(w as i64) as usize;
        (r, if self.flip { w - 1 - c } else { c })
    }

    pub fn apply<T: Clone>(&self, grid: &Array2<T>) -> Array2<T> {
        let (h, w) = grid.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (sr, sc) = self.inverse_point(r, c, h, w);
            grid[[sr, sc]].clone()
        })
    }

    pub fn invert<T: Clone>(&self, grid: &Array2<T>) -> Array2<T> {
        let (h, w) = grid.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (tr, tc) = self.forward_point(r, c, h, w);
            grid[[tr, tc]].clone()
        })
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let (h, w, ch) = image.dim();
        Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
            let (sr, sc) = self.inverse_point(r, c, h, w);
            image[[sr, sc, k]]
        })
    }

    /// Transport a grid from the view of `self` into the view of `other`.
    pub fn transport<T: Clone>(&self, other: &GeometricTransform, grid: &Array2<T>) -> Array2<T> {
        other.apply(&self.invert(grid))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Explicit augmentation parameters; [`augment`] samples one from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub geometric: GeometricTransform,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub channel_order: [usize; 3],
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            geometric: GeometricTransform::IDENTITY,
            brightness: 0.0,
            contrast: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
            channel_order: [0, 1, 2],
        }
    }

    pub fn sample(mode: AugmentMode, seed: u64, height: usize, width: usize) -> Self {
        let mut rng = seeded(derive_seed(seed, 0xA06));
        let max_r = (0.05 * height as f64).floor() as i64;
        let max_c = (0.05 * width as f64).floor() as i64;
        let geometric = GeometricTransform {
            flip: rng.gen_bool(0.5),
            dr: rng.gen_range(-max_r..=max_r),
            dc: rng.gen_range(-max_c..=max_c),
        };
        let mut draw = Self {
            geometric,
            ..Self::identity()
        };
        if mode == AugmentMode::Strong {
            draw.brightness = rng.gen_range(-0.3..=0.3);
            draw.contrast = 1.0 + rng.gen_range(-0.3..=0.3);
            draw.noise_std = rng.gen_range(0.0..=0.05);
            draw.noise_seed = rng.gen();
            if rng.gen_bool(0.2) {
                let mut order = [0, 1, 2];
                order.shuffle(&mut rng);
                draw.channel_order = order;
            }
        }
        draw
    }

    pub fn is_photometric_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0 && self.noise_std == 0.0 && self.channel_order == [0, 1, 2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub image: Image,
    pub mode: AugmentMode,
    pub geometric: GeometricTransform,
}

impl AugmentedView {
    /// Instance masks of `sample` in this view's coordinates.
    pub fn masks(&self, sample: &SceneSample) -> Vec<Mask> {
        sample.instance_masks.iter().map(|m| self.geometric.apply(m)).collect()
    }
}

pub fn augment(sample: &SceneSample, mode: AugmentMode, seed: u64) -> AugmentedView {
    let draw = AugmentDraw::sample(mode, seed, sample.height(), sample.width());
    augment_with(sample, mode, &draw)
}

pub fn augment_with(sample: &SceneSample, mode: AugmentMode, draw: &AugmentDraw) -> AugmentedView {
    let mut image = draw.geometric.apply_image(&sample.image);
    if !draw.is_photometric_identity() {
        let mean = image.mean().unwrap_or(0.0);
        let mut rng = seeded(draw.noise_seed);
        let (h, w, _) = image.dim();
        let src = image.clone();
        for r in 0..h {
            for c in 0..w {
                for k in 0..3 {
                    let v = src[[r, c, draw.channel_order[k]]];
                    let v = (v - mean) * draw.contrast + mean + draw.brightness;
                    let n = if draw.noise_std > 0.0 { draw.noise_std * standard_normal(&mut rng) } else { 0.0 };
                    image[[r, c, k]] = (v + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    AugmentedView {
        image,
        mode,
        geometric: draw.geometric,
    }
}

// ---------------------------------------------------------------------------
// Distribution shift
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub texture_swap: bool,
    /// Row-major 3×3 colour matrix applied as `out = M · rgb + bias`.
    pub color_matrix: [[f64; 3]; 3],
    pub color_bias: [f64; 3],
    pub noise_std: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            texture_swap: false,
            color_matrix: [[0.70, 0.20, 0.10], [0.15, 0.65, 0.20], [0.10, 0.25, 0.65]],
            color_bias: [0.06, 0.06, 0.06],
            noise_std: 0.04,
        }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        Self {
            texture_swap: false,
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_bias: [0.0; 3],
            noise_std: 0.0,
        }
    }
}

/// Move the image statistics per `shift`; geometry and masks are untouched.
pub fn apply_shift(sample: &SceneSample, shift: &ShiftConfig) -> SceneSample {
    let mut out = sample.clone();
    out.domain_tag = DomainTag::Target;
    let (h, w, _) = out.image.dim();
    let mut rng = seeded(derive_seed(sample.seed, 0x5A1F7));
    if shift.texture_swap {
        let labels = sample.label_map();
        let k = sample.instance_masks.len() + 1;
        let mut means = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for r in 0..h {
            for c in 0..w {
                let l = labels[[r, c]];
                counts[l] += 1;
                for ch in 0..3 {
                    means[l][ch] += sample.image[[r, c, ch]];
                }
            }
        }
        for (m, n) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= (*n).max(1) as f64;
            }
        }
        let params: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(0.0..3.14), rng.gen_range(0.5..1.2))).collect();
        for r in 0..h {
            for c in 0..w {
                let l = labels[[r, c]];
                let (a, f) = params[l];
                let t = if l == 0 {
                    // checkerboard background
                    if ((r / 4) + (c / 4)) % 2 == 0 { 0.08 } else { -0.08 }
                } else {
                    0.12 * stripes(r as f64, c as f64, a, f)
                };
                for ch in 0..3 {
                    out.image[[r, c, ch]] = means[l][ch] + t;
                }
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let rgb = [out.image[[r, c, 0]], out.image[[r, c, 1]], out.image[[r, c, 2]]];
            for ch in 0..3 {
                let m = &shift.color_matrix[ch];
                let mut v = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2] + shift.color_bias[ch];
                if shift.noise_std > 0.0 {
                    v += shift.noise_std * standard_normal(&mut rng);
                }
                out.image[[r, c, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Point,
    Poly,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Box, PromptKind::Point, PromptKind::Poly];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Box => "box",
            PromptKind::Point => "point",
            PromptKind::Poly => "poly",
        }
    }
}

impl std::str::FromStr for PromptKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(PromptKind::Box),
            "point" => Ok(PromptKind::Point),
            "poly" => Ok(PromptKind::Poly),
            other => Err(Error::Config(format!("unknown prompt kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptData {
    /// Inclusive corners `(r0, c0, r1, c1)`.
    Box([usize; 4]),
    /// Positive clicks `(r, c)`.
    Points(Vec<(usize, usize)>),
    /// Coarse mask on the image grid.
    Poly(Mask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub data: PromptData,
    pub target_index: usize,
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self.data {
            PromptData::Box(_) => PromptKind::Box,
            PromptData::Points(_) => PromptKind::Point,
            PromptData::Poly(_) => PromptKind::Poly,
        }
    }

    /// Express the prompt in the coordinates of an augmented view.
    pub fn transformed(&self, t: &GeometricTransform, h: usize, w: usize) -> Prompt {
        let data = match &self.data {
            PromptData::Box([r0, c0, r1, c1]) => {
                let (c0, c1) = if t.flip { (w - 1 - c1, w - 1 - c0) } else { (*c0, *c1) };
                let shift = |v: usize, d: i64, n: usize| (v as i64 + d).clamp(0, n as i64 - 1) as usize;
                PromptData::Box([shift(*r0, t.dr, h), shift(c0, t.dc, w), shift(*r1, t.dr, h), shift(c1, t.dc, w)])
            }
            PromptData::Points(pts) => {
                PromptData::Points(pts.iter().map(|&(r, c)| t.forward_point(r, c, h, w)).collect())
            }
            PromptData::Poly(m) => PromptData::Poly(t.apply(m)),
        };
        Prompt {
            data,
            target_index: self.target_index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub jitter: f64,
    pub n_points: usize,
    pub poly_vertices: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            jitter: 0.1,
            n_points: 1,
            poly_vertices: 8,
        }
    }
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    });
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn bounding_box(mask: &Mask) -> Option<[usize; 4]> {
    let mut bb: Option<[usize; 4]> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        bb = Some(match bb {
            None => [r, c, r, c],
            Some([r0, c0, r1, c1]) => [r0.min(r), c0.min(c), r1.max(r), c1.max(c)],
        });
    }
    bb
}

/// Derive a weak prompt of `kind` from an instance mask.
pub fn derive_prompt(mask: &Mask, kind: PromptKind, seed: u64, config: &PromptConfig) -> Result<Prompt> {
    if config.jitter < 0.0 {
        return Err(Error::Precondition("jitter must be >= 0".into()));
    }
    let [r0, c0, r1, c1] = bounding_box(mask).ok_or(Error::EmptyMask)?;
    let (h, w) = mask.dim();
    let mut rng = seeded(derive_seed(seed, kind as u64 + 0x9017));
    let data = match kind {
        PromptKind::Box => {
            let bh = (r1 - r0 + 1) as f64;
            let bw = (c1 - c0 + 1) as f64;
            let mut jit = |v: usize, extent: f64, n: usize| -> usize {
                let d = if config.jitter > 0.0 {
                    rng.gen_range(-config.jitter..=config.jitter) * extent
                } else {
                    0.0
                };
                (v as f64 + d).round().clamp(0.0, n as f64 - 1.0) as usize
            };
            let a = jit(r0, bh, h);
            let b = jit(c0, bw, w);
            let c = jit(r1, bh, h);
            let d = jit(c1, bw, w);
            PromptData::Box([a.min(c), b.min(d), a.max(c), b.max(d)])
        }
        PromptKind::Point => {
            let fg: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
            let n = config.n_points.max(1);
            let pts = if n <= fg.len() {
                fg.choose_multiple(&mut rng, n).copied().collect()
            } else {
                (0..n).map(|_| fg[rng.gen_range(0..fg.len())]).collect()
            };
            PromptData::Points(pts)
        }
        PromptKind::Poly => PromptData::Poly(coarse_polygon_mask(mask, config.poly_vertices.max(3), config.jitter, &mut rng)),
    };
    Ok(Prompt { data, target_index: 0 })
}

fn point_in_polygon(py: f64, px: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (yi, xi) = poly[i];
        let (yj, xj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn rasterize(poly: &[(f64, f64)], h: usize, w: usize) -> Mask {
    Array2::from_shape_fn((h, w), |(r, c)| point_in_polygon(r as f64 + 0.5, c as f64 + 0.5, poly))
}

const POLY_MIN_IOU: f64 = 0.3;
const POLY_MAX_IOU: f64 = 0.95;

/// Boundary polygon with `vertices` corners found by ray casting from the
/// centroid, radially perturbed, rasterised; IoU with the truth is forced into
/// [0.3, 0.95] by growing or shrinking along the boundary when needed.
fn coarse_polygon_mask(mask: &Mask, vertices: usize, jitter: f64, rng: &mut impl Rng) -> Mask {
    let (h, w) = mask.dim();
    let fg: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    let n = fg.len() as f64;
    let cy = fg.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
    let cx = fg.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let perturb = 0.1 + jitter;
    let mut poly = Vec::with_capacity(vertices);
    for k in 0..vertices {
        let t = phase + std::f64::consts::TAU * k as f64 / vertices as f64;
        let (s, c) = t.sin_cos();
        let mut rad: f64 = 0.0;
        let mut d = 0.0;
        while d < (h + w) as f64 {
            let (py, px) = (cy + d * s, cx + d * c);
            if py < 0.0 || px < 0.0 || py >= h as f64 || px >= w as f64 {
                break;
            }
            if mask[[py as usize, px as usize]] {
                rad = d;
            }
            d += 0.25;
        }
        let rad = (rad + 0.5) * (1.0 + rng.gen_range(-perturb..=perturb));
        poly.push((cy + rad * s, cx + rad * c));
    }
    let mut coarse = rasterize(&poly, h, w);
    let iou = mask_iou(&coarse, mask);
    if (POLY_MIN_IOU..=POLY_MAX_IOU).contains(&iou) {
        return coarse;
    }
    // fallback: start from the truth and move boundary pixels until IoU ≈ 0.85
    coarse = mask.clone();
    let count = fg.len();
    let grow_target = ((count as f64) * (1.0 / 0.85 - 1.0)).ceil() as usize;
    let mut added = 0;
    let mut frontier = mask.clone();
    while added < grow_target.max(1) {
        let mut ring = Vec::new();
        for ((r, c), &v) in frontier.indexed_iter() {
            if v {
                continue;
            }
            let near = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|(dr, dc)| {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && frontier[[rr as usize, cc as usize]]
            });
            if near {
                ring.push((r, c));
            }
        }
        if ring.is_empty() {
            break;
        }
        for p in ring {
            if added >= grow_target.max(1) {
                break;
            }
            coarse[p] = true;
            added += 1;
        }
        frontier = coarse.clone();
    }
    if added == 0 {
        // mask fills the grid: shrink instead
        let remove = ((count as f64) * 0.15).ceil() as usize;
        for p in fg.iter().take(remove) {
            coarse[*p] = false;
        }
    }
    coarse
}
