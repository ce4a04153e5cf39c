//! One promptable segmentation model: slot module, slot decoder, prompt
//! encoder, mask decoder and injection heads over a shared frozen encoder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::injection::{self, bilinear_matrix, DecodeInput, DecoderConfig, Geometry};
use crate::params::{Binder, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::scenes::{Image, Prompt, SceneSample};
use crate::slot_attention::{self, SlotConfig};
use crate::slot_decoder::{self, SlotDecoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: (usize, usize),
    pub encoder: EncoderConfig,
    pub slots: SlotConfig,
    pub slot_decoder: SlotDecoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.encoder.patch, self.image.1 / self.encoder.patch)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            image: self.image,
            grid: self.grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.slots.validate()?;
        self.decoder.validate(self.encoder.dim, self.slots.dim)?;
        if self.image.0 % self.encoder.patch != 0 || self.image.1 % self.encoder.patch != 0 {
            return Err(Error::Config(format!(
                "image {:?} is not a multiple of patch {}",
                self.image, self.encoder.patch
            )));
        }
        Ok(())
    }
}

/// Parameters of one role plus whether its decoder uses the Object Token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub store: ParamStore,
    pub use_object_token: bool,
}

impl ModelParams {
    pub fn hash(&self) -> String {
        let mut h = self.store.hash();
        if self.use_object_token {
            h.push_str("+obj");
        }
        h
    }
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.encoder.dim;
    slot_attention::init_slot_module(&mut store, &mut seeded(derive_seed(seed, 1)), &cfg.slots, d);
    slot_decoder::init_slot_decoder(
        &mut store,
        &mut seeded(derive_seed(seed, 2)),
        &cfg.slot_decoder,
        cfg.slots.dim,
        d,
        cfg.grid(),
    );
    injection::init_prompt_encoder(&mut store, &mut seeded(derive_seed(seed, 3)), &cfg.decoder);
    injection::init_mask_decoder(&mut store, &mut seeded(derive_seed(seed, 4)), &cfg.decoder);
    injection::init_injection(&mut store, &mut seeded(derive_seed(seed, 5)), &cfg.decoder, cfg.slots.num_slots, d);
    Ok(ModelParams {
        store,
        use_object_token: false,
    })
}

/// Frozen-encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub z: Array2<f64>,
    pub detail: Array2<f64>,
}

pub fn view_features(encoder: &EncoderParams, image: &Image) -> Result<ViewFeatures> {
    let (z, d) = encode(encoder, image)?;
    Ok(ViewFeatures {
        z: z.tokens,
        detail: d.tokens,
    })
}

/// Slot-noise seed used whenever a sample is decoded outside training.
pub fn slot_seed(sample: &SceneSample) -> u64 {
    derive_seed(sample.seed, 0x510D)
}

pub struct ForwardVars {
    pub mask: Var,
    pub object_mask: Option<Var>,
    pub slots: Option<Var>,
    /// Slot-decoder reconstruction loss when requested.
    pub rec_loss: Option<Var>,
}

/// Build one role's forward pass on `g`.
pub fn forward_graph(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &ModelConfig,
    use_object_token: bool,
    feats: &ViewFeatures,
    prompt: &Prompt,
    slot_seed: u64,
    with_recon: bool,
) -> Result<ForwardVars> {
    let z = g.constant(feats.z.clone());
    let detail = g.constant(feats.detail.clone());
    let (slots, rec_loss) = if use_object_token || with_recon {
        let run = slot_attention::run_graph(g, b, z, cfg.slots.num_slots, cfg.slots.iters, slot_seed)?;
        let rec = if with_recon {
            let dec = slot_decoder::decode_graph(g, b, run.slots)?;
            Some(slot_decoder::reconstruction_loss_graph(g, dec.combined, z))
        } else {
            None
        };
        (Some(run.slots), rec)
    } else {
        (None, None)
    };
    let out = injection::decode_graph(
        g,
        b,
        &cfg.decoder,
        DecodeInput {
            z,
            detail,
            prompt,
            slots: if use_object_token { slots } else { None },
            geometry: cfg.geometry(),
        },
    )?;
    Ok(ForwardVars {
        mask: out.mask,
        object_mask: out.object_mask,
        slots,
        rec_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Array2<f64>,
    pub object_mask: Option<Array2<f64>>,
}

pub fn predict(cfg: &ModelConfig, params: &ModelParams, feats: &ViewFeatures, prompt: &Prompt, slot_seed: u64) -> Result<Prediction> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.store);
    let out = forward_graph(&mut g, &mut b, cfg, params.use_object_token, feats, prompt, slot_seed, false)?;
    Ok(Prediction {
        mask: g.value(out.mask).clone(),
        object_mask: out.object_mask.map(|m| g.value(m).clone()),
    })
}

/// Slot-decoder masks `m_k` (K×N on the token grid) for one image.
pub fn slot_masks(cfg: &ModelConfig, params: &ModelParams, feats: &ViewFeatures, slot_seed: u64) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.store);
    let z = g.constant(feats.z.clone());
    let run = slot_attention::run_graph(&mut g, &mut b, z, cfg.slots.num_slots, cfg.slots.iters, slot_seed)?;
    let dec = slot_decoder::decode_graph(&mut g, &mut b, run.slots)?;
    Ok(g.value(dec.masks).t().to_owned())
}

/// Bilinearly upsample K token-grid masks to the image: K arrays of H×W.
pub fn upsample_slot_masks(masks: &Array2<f64>, grid: (usize, usize), image: (usize, usize)) -> Vec<Array2<f64>> {
    let rows = bilinear_matrix(image.0, grid.0);
    let cols = bilinear_matrix(image.1, grid.1);
    masks
        .rows()
        .into_iter()
        .map(|m| {
            let small = m.to_owned().into_shape_with_order(grid).expect("mask length matches grid");
            rows.dot(&small).dot(&cols.t())
        })
        .collect()
}

/// Per-pixel argmax over upsampled slot masks.
pub fn slot_assignment(masks: &Array2<f64>, grid: (usize, usize), image: (usize, usize)) -> Array2<usize> {
    let up = upsample_slot_masks(masks, grid, image);
    Array2::from_shape_fn(image, |(r, c)| {
        let mut best = 0;
        for k in 1..up.len() {
            if up[k][[r, c]] > up[best][[r, c]] {
                best = k;
            }
        }
        best
    })
}
