//! Image-guided frame aggregation.
//!
//! The averaged image `[Attn]` embedding is the query, per-frame `[Attn]`
//! embeddings are the keys and per-frame `[cls]` embeddings are the values:
//!
//! ```text
//! z_video = softmax(q · Kᵀ) · V
//! ```
//!
//! The aggregation is a weighted mean over frames, so it ignores frame order:
//! permuting keys and values together permutes the weights and leaves
//! `z_video` unchanged.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether frame logits are divided by `√d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// Raw dot products.
    #[default]
    Literal,
    /// Dot products divided by `√d_out`.
    Scaled,
}

/// How several static images form the query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageAverageMode {
    /// Average the image tokens, then attend once.
    #[default]
    Tokens,
    /// Attend once per image, then average the frame distributions.
    Distributions,
}

/// Which tokens drive the frame weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttnVariant {
    /// Query: mean image `z_Attn`; keys: frame `z_Attn`; values: frame `z_Cls`.
    #[default]
    AttnToken,
    /// Query: mean image `z_Cls`; keys and values: frame `z_Cls`.
    ClsToken,
    /// Equal weights `1/T`.
    Uniform,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(ScaleMode { Literal => "literal", Scaled => "scaled" });
text_enum!(ImageAverageMode { Tokens => "tokens", Distributions => "avg_distributions" });
text_enum!(AttnVariant { AttnToken => "attn_token", ClsToken => "cls_token", Uniform => "uniform" });

/// Output of one aggregation: the clip summary plus per-frame attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult<S> {
    pub z_video: Vec<S>,
    pub weights: Vec<S>,
    pub logits: Vec<S>,
}

/// Graph handles of an aggregation inside a larger model.
#[derive(Clone, Copy, Debug)]
pub struct AggregationVars {
    /// `[1, d]`
    pub z_video: Var,
    /// `[1, T]`
    pub weights: Var,
    /// `[1, T]`
    pub logits: Var,
}

/// Row mean of `[n_img, d]` image embeddings, as `[1, d]`.
pub fn average_image_tokens<S: Scalar>(g: &mut Graph<S>, rows: Var) -> Result<Var> {
    if g.shape(rows).first() == Some(&0) {
        return Err(Error::EmptyStudy);
    }
    g.mean_rows(rows)
}

/// Frame logits of one or more queries `[n, d]` against keys `[T, d]`: `[n, T]`.
fn query_logits<S: Scalar>(
    g: &mut Graph<S>,
    queries: Var,
    keys: Var,
    scale: ScaleMode,
) -> Result<Var> {
    let (sq, sk) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Dimension(format!(
            "aggregate: query {sq:?} incompatible with keys {sk:?}"
        )));
    }
    let (n, t, d) = (sq[0], sk[0], sk[1]);
    let q3 = g.reshape(queries, &[1, n, d])?;
    let k3 = g.reshape(keys, &[1, t, d])?;
    let logits = g.bmm(q3, k3, true)?;
    let logits = g.reshape(logits, &[n, t])?;
    match scale {
        ScaleMode::Literal => Ok(logits),
        ScaleMode::Scaled => g.scale(logits, 1.0 / (d as f64).sqrt()),
    }
}

fn check_frames<S: Scalar>(g: &Graph<S>, keys: Var, values: Var) -> Result<usize> {
    let (sk, sv) = (g.shape(keys), g.shape(values));
    if sk.len() != 2 || sv.len() != 2 || sk[0] != sv[0] {
        return Err(Error::Dimension(format!(
            "aggregate: keys {sk:?} and values {sv:?} must have equal frame counts"
        )));
    }
    Ok(sk[0])
}

/// Single-query cross-attention: `softmax(q·Kᵀ)·V` with `q: [1,d]`.
pub fn aggregate_graph<S: Scalar>(
    g: &mut Graph<S>,
    query: Var,
    keys: Var,
    values: Var,
    scale: ScaleMode,
) -> Result<AggregationVars> {
    check_frames(g, keys, values)?;
    if g.shape(query)[0] != 1 {
        return Err(Error::Dimension(format!(
            "aggregate expects one query row, got {:?}",
            g.shape(query)
        )));
    }
    let logits = query_logits(g, query, keys, scale)?;
    let weights = g.softmax(logits, 1)?;
    let z_video = g.matmul(weights, values)?;
    Ok(AggregationVars {
        z_video,
        weights,
        logits,
    })
}

/// One attention distribution per image query `[n_img, d]`, then the mean
/// distribution weights the values. Reported logits are the per-frame mean.
pub fn aggregate_avg_distributions<S: Scalar>(
    g: &mut Graph<S>,
    queries: Var,
    keys: Var,
    values: Var,
    scale: ScaleMode,
) -> Result<AggregationVars> {
    check_frames(g, keys, values)?;
    let logits = query_logits(g, queries, keys, scale)?;
    let per_image = g.softmax(logits, 1)?;
    let weights = g.mean_rows(per_image)?;
    let mean_logits = g.mean_rows(logits)?;
    let z_video = g.matmul(weights, values)?;
    Ok(AggregationVars {
        z_video,
        weights,
        logits: mean_logits,
    })
}

/// Equal weights over frames; `z_video` is the mean value row.
pub fn aggregate_uniform<S: Scalar>(g: &mut Graph<S>, values: Var) -> Result<AggregationVars> {
    let t = g.shape(values)[0];
    let z_video = g.mean_rows(values)?;
    let weights = g.input(Tensor::full(&[1, t], S::from_f64(1.0 / t as f64)));
    let logits = g.input(Tensor::zeros(&[1, t]));
    Ok(AggregationVars {
        z_video,
        weights,
        logits,
    })
}

/// Per-study encoder rows handed to [`aggregate_variant_graph`].
#[derive(Clone, Copy, Debug)]
pub struct StudyTokens {
    /// `[n_img, d]`
    pub image_cls: Var,
    /// `[n_img, d]`
    pub image_attn: Var,
    /// `[T, d]`
    pub frame_cls: Var,
    /// `[T, d]`
    pub frame_attn: Var,
}

/// Dispatch on the token variant and the multi-image averaging mode.
pub fn aggregate_variant_graph<S: Scalar>(
    g: &mut Graph<S>,
    variant: AttnVariant,
    tokens: &StudyTokens,
    scale: ScaleMode,
    averaging: ImageAverageMode,
) -> Result<AggregationVars> {
    let (img, keys) = match variant {
        AttnVariant::Uniform => return aggregate_uniform(g, tokens.frame_cls),
        AttnVariant::AttnToken => (tokens.image_attn, tokens.frame_attn),
        AttnVariant::ClsToken => (tokens.image_cls, tokens.frame_cls),
    };
    match averaging {
        ImageAverageMode::Tokens => {
            let q = average_image_tokens(g, img)?;
            aggregate_graph(g, q, keys, tokens.frame_cls, scale)
        }
        ImageAverageMode::Distributions => {
            aggregate_avg_distributions(g, img, keys, tokens.frame_cls, scale)
        }
    }
}

fn frames_tensor<S: Scalar>(rows: &[Vec<S>]) -> Result<Tensor<S>> {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<S> = rows.iter().flatten().copied().collect();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged rows".into()));
    }
    Tensor::new(vec![rows.len(), d], data)
}

fn collect<S: Scalar>(g: &Graph<S>, v: AggregationVars) -> AggregationResult<S> {
    AggregationResult {
        z_video: g.value(v.z_video).data().to_vec(),
        weights: g.value(v.weights).data().to_vec(),
        logits: g.value(v.logits).data().to_vec(),
    }
}

/// Cross-attention of one query vector over `T` key/value rows.
pub fn aggregate<S: Scalar>(
    query: &[S],
    keys: &[Vec<S>],
    values: &[Vec<S>],
    scale: ScaleMode,
) -> Result<AggregationResult<S>> {
    if keys.is_empty() || values.is_empty() {
        return Err(Error::EmptyVideo);
    }
    let mut g = Graph::new();
    let q = g.input(Tensor::new(vec![1, query.len()], query.to_vec())?);
    let k = g.input(frames_tensor(keys)?);
    let v = g.input(frames_tensor(values)?);
    let out = aggregate_graph(&mut g, q, k, v, scale)?;
    Ok(collect(&g, out))
}

/// Per-input embeddings of one study, as plain rows.
#[derive(Clone, Debug)]
pub struct StudyOutputs<S> {
    pub image_cls: Vec<Vec<S>>,
    pub image_attn: Vec<Vec<S>>,
    pub frame_cls: Vec<Vec<S>>,
    pub frame_attn: Vec<Vec<S>>,
}

/// [`aggregate_variant_graph`] over concrete embeddings.
pub fn aggregate_variant<S: Scalar>(
    variant: AttnVariant,
    study: &StudyOutputs<S>,
    scale: ScaleMode,
    averaging: ImageAverageMode,
) -> Result<AggregationResult<S>> {
    if study.frame_cls.is_empty() || study.frame_attn.is_empty() {
        return Err(Error::EmptyVideo);
    }
    if variant != AttnVariant::Uniform && study.image_cls.is_empty() {
        return Err(Error::EmptyStudy);
    }
    let mut g = Graph::new();
    let frame_cls = g.input(frames_tensor(&study.frame_cls)?);
    let frame_attn = g.input(frames_tensor(&study.frame_attn)?);
    let (image_cls, image_attn) = if study.image_cls.is_empty() {
        (frame_cls, frame_attn)
    } else {
        (
            g.input(frames_tensor(&study.image_cls)?),
            g.input(frames_tensor(&study.image_attn)?),
        )
    };
    let tokens = StudyTokens {
        image_cls,
        image_attn,
        frame_cls,
        frame_attn,
    };
    let out = aggregate_variant_graph(&mut g, variant, &tokens, scale, averaging)?;
    Ok(collect(&g, out))
}

/// Arithmetic mean of `n_img` rows.
pub fn average_rows<S: Scalar>(rows: &[Vec<S>]) -> Result<Vec<S>> {
    if rows.is_empty() {
        return Err(Error::EmptyStudy);
    }
    let mut g = Graph::new();
    let x = g.input(frames_tensor(rows)?);
    let m = average_image_tokens(&mut g, x)?;
    Ok(g.value(m).data().to_vec())
}
