//! Full classifier: shared (or split) encoder, frame aggregation, fusion head.

use crate::aggregation::{
    aggregate_variant_graph, average_image_tokens, AggregationVars, AttnVariant, ImageAverageMode,
    ScaleMode, StudyTokens,
};
use crate::autograd::{Graph, Var};
use crate::encoder::{encode, init_params, patchify_batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse, head_logits, init_head, FeatureMode};
use crate::params::{Bound, ParamStore};
use crate::tensor::Scalar;

pub const SHARED_PREFIX: &str = "encoder.";
pub const IMAGE_PREFIX: &str = "image_encoder.";
pub const VIDEO_PREFIX: &str = "video_encoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature_mode: FeatureMode,
    pub attn_variant: AttnVariant,
    pub scale_mode: ScaleMode,
    pub image_average_mode: ImageAverageMode,
    /// One encoder for images and frames (default) or one each.
    pub share_encoder: bool,
    /// Width of an optional GELU hidden layer in the head; 0 disables it.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            feature_mode: FeatureMode::Multi,
            attn_variant: AttnVariant::AttnToken,
            scale_mode: ScaleMode::Literal,
            image_average_mode: ImageAverageMode::Tokens,
            share_encoder: true,
            head_hidden: 0,
        }
    }
}

impl ModelConfig {
    /// Static images feed either the head or the attention query.
    pub fn needs_images(&self) -> bool {
        self.feature_mode != FeatureMode::VideoOnly || self.attn_variant != AttnVariant::Uniform
    }

    pub fn needs_frames(&self) -> bool {
        self.feature_mode != FeatureMode::ImageOnly
    }

    fn prefixes(&self) -> (&'static str, &'static str) {
        if self.share_encoder {
            (SHARED_PREFIX, SHARED_PREFIX)
        } else {
            (IMAGE_PREFIX, VIDEO_PREFIX)
        }
    }
}

/// Fresh model parameters; fully determined by `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    if cfg.share_encoder {
        store.extend_prefixed(SHARED_PREFIX, init_params(&cfg.encoder, seed)?)?;
    } else {
        store.extend_prefixed(IMAGE_PREFIX, init_params(&cfg.encoder, seed)?)?;
        store.extend_prefixed(
            VIDEO_PREFIX,
            init_params(&cfg.encoder, seed.wrapping_add(1))?,
        )?;
    }
    let head = init_head(
        cfg.feature_mode.head_input(cfg.encoder.d_out),
        cfg.head_hidden,
        seed ^ 0x68ea_d5ee_d000_0001,
    )?;
    store.extend_prefixed("", head)?;
    Ok(store)
}

/// Model-visible content of one study: static images and the sampled,
/// possibly augmented frames. Nothing else about a study reaches the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyInput {
    pub images: Vec<Vec<f32>>,
    pub frames: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `[B, 1]`
    pub logits: Var,
    /// Frame aggregation per study; `None` in image-only mode.
    pub aggregations: Vec<Option<AggregationVars>>,
}

/// Encoder rows for a group of inputs: `(z_cls, z_attn, first row)`.
#[derive(Clone, Copy)]
struct Rows {
    z_cls: Var,
    z_attn: Var,
    offset: usize,
}

impl Rows {
    fn gather<S: Scalar>(&self, g: &mut Graph<S>, start: usize, len: usize) -> Result<(Var, Var)> {
        let idx: Vec<usize> = (self.offset + start..self.offset + start + len).collect();
        Ok((
            g.gather_rows(self.z_cls, &idx)?,
            g.gather_rows(self.z_attn, &idx)?,
        ))
    }
}

fn encode_group<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    prefix: &str,
    inputs: &[&[f32]],
    cfg: &EncoderConfig,
) -> Result<Option<(Var, Var)>> {
    if inputs.is_empty() {
        return Ok(None);
    }
    let patches = g.input(patchify_batch(inputs, cfg)?);
    let out = encode(g, p, prefix, patches, cfg)?;
    Ok(Some((out.z_cls, out.z_attn)))
}

/// Forward pass for a batch of studies, producing one logit per study.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    cfg: &ModelConfig,
    studies: &[StudyInput],
) -> Result<BatchForward> {
    let (use_images, use_frames) = (cfg.needs_images(), cfg.needs_frames());
    for s in studies {
        if use_images && s.images.is_empty() {
            return Err(Error::EmptyStudy);
        }
        if use_frames && s.frames.is_empty() {
            return Err(Error::EmptyVideo);
        }
    }
    let images: Vec<&[f32]> = if use_images {
        studies
            .iter()
            .flat_map(|s| s.images.iter().map(Vec::as_slice))
            .collect()
    } else {
        Vec::new()
    };
    let frames: Vec<&[f32]> = if use_frames {
        studies
            .iter()
            .flat_map(|s| s.frames.iter().map(Vec::as_slice))
            .collect()
    } else {
        Vec::new()
    };

    let (img_prefix, vid_prefix) = cfg.prefixes();
    let (img_rows, frame_rows) = if cfg.share_encoder {
        let all: Vec<&[f32]> = images.iter().chain(&frames).copied().collect();
        let (c, a) = encode_group(g, p, img_prefix, &all, &cfg.encoder)?
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        (
            Rows {
                z_cls: c,
                z_attn: a,
                offset: 0,
            },
            Rows {
                z_cls: c,
                z_attn: a,
                offset: images.len(),
            },
        )
    } else {
        let i = encode_group(g, p, img_prefix, &images, &cfg.encoder)?;
        let f = encode_group(g, p, vid_prefix, &frames, &cfg.encoder)?;
        let any = i.or(f).ok_or_else(|| Error::Data("empty batch".into()))?;
        let (ic, ia) = i.unwrap_or(any);
        let (fc, fa) = f.unwrap_or(any);
        (
            Rows {
                z_cls: ic,
                z_attn: ia,
                offset: 0,
            },
            Rows {
                z_cls: fc,
                z_attn: fa,
                offset: 0,
            },
        )
    };

    let mut features = Vec::with_capacity(studies.len());
    let mut aggregations = Vec::with_capacity(studies.len());
    let (mut img_at, mut frame_at) = (0, 0);
    for s in studies {
        let image_tokens = if use_images {
            let t = img_rows.gather(g, img_at, s.images.len())?;
            img_at += s.images.len();
            Some(t)
        } else {
            None
        };
        let agg = if use_frames {
            let (frame_cls, frame_attn) = frame_rows.gather(g, frame_at, s.frames.len())?;
            frame_at += s.frames.len();
            let (image_cls, image_attn) = image_tokens.unwrap_or((frame_cls, frame_attn));
            let tokens = StudyTokens {
                image_cls,
                image_attn,
                frame_cls,
                frame_attn,
            };
            Some(aggregate_variant_graph(
                g,
                cfg.attn_variant,
                &tokens,
                cfg.scale_mode,
                cfg.image_average_mode,
            )?)
        } else {
            None
        };
        let image_mean = match (cfg.feature_mode, image_tokens) {
            (FeatureMode::VideoOnly, _) | (_, None) => None,
            (_, Some((cls, _))) => Some(average_image_tokens(g, cls)?),
        };
        features.push(fuse(
            g,
            cfg.feature_mode,
            agg.map(|a| a.z_video),
            image_mean,
        )?);
        aggregations.push(agg);
    }
    let features = g.concat_rows(&features)?;
    let logits = head_logits(g, p, features)?;
    Ok(BatchForward {
        logits,
        aggregations,
    })
}

/// Forward plus mean binary cross-entropy against `labels`.
pub fn loss<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    cfg: &ModelConfig,
    studies: &[StudyInput],
    labels: &[u8],
) -> Result<(Var, BatchForward)> {
    let out = forward(g, p, cfg, studies)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let l = g.bce_with_logits(out.logits, &y)?;
    Ok((l, out))
}

/// Per-study evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyScore {
    pub logit: f64,
    pub weights: Vec<f64>,
    pub frame_logits: Vec<f64>,
}

/// Inference without gradient tracking.
pub fn predict<S: Scalar>(
    params: &ParamStore<S>,
    cfg: &ModelConfig,
    studies: &[StudyInput],
) -> Result<Vec<StudyScore>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let out = forward(&mut g, &p, cfg, studies)?;
    let logits = g.value(out.logits).to_f64_vec();
    Ok(logits
        .into_iter()
        .zip(&out.aggregations)
        .map(|(logit, agg)| {
            let (weights, frame_logits) = agg.map_or((Vec::new(), Vec::new()), |a| {
                (
                    g.value(a.weights).to_f64_vec(),
                    g.value(a.logits).to_f64_vec(),
                )
            });
            StudyScore {
                logit,
                weights,
                frame_logits,
            }
        })
        .collect())
}
