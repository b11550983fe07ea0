//! Feature fusion, the classification head and the binary cross-entropy
//! objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::text_enum;
use crate::autograd::{bce_term, Graph, Var};
use crate::encoder::{insert_linear, linear};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Which features reach the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// `concat(z_video, mean image z_Cls)`, width `2·d_out`.
    #[default]
    Multi,
    /// `z_video` only.
    VideoOnly,
    /// Mean image `z_Cls` only.
    ImageOnly,
}

text_enum!(FeatureMode { Multi => "multi", VideoOnly => "video_only", ImageOnly => "image_only" });

impl FeatureMode {
    pub fn head_input(self, d_out: usize) -> usize {
        match self {
            FeatureMode::Multi => 2 * d_out,
            FeatureMode::VideoOnly | FeatureMode::ImageOnly => d_out,
        }
    }
}

/// Head parameters: `head.weight [F,1]`, `head.bias [1]`, plus
/// `head.hidden.*` when `hidden > 0`.
pub fn init_head(input: usize, hidden: usize, seed: u64) -> Result<ParamStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    if hidden > 0 {
        insert_linear(&mut store, &mut rng, "head.hidden", input, hidden)?;
        insert_linear(&mut store, &mut rng, "head", hidden, 1)?;
    } else {
        insert_linear(&mut store, &mut rng, "head", input, 1)?;
    }
    Ok(store)
}

/// Assemble the head input for one study: `[1, F]`.
pub fn fuse<S: Scalar>(
    g: &mut Graph<S>,
    mode: FeatureMode,
    z_video: Option<Var>,
    image_cls_mean: Option<Var>,
) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::Config(format!("feature mode {mode} needs {what}")))
    };
    match mode {
        FeatureMode::Multi => {
            let (v, i) = (
                need(z_video, "z_video")?,
                need(image_cls_mean, "image features")?,
            );
            g.concat_cols(v, i)
        }
        FeatureMode::VideoOnly => need(z_video, "z_video"),
        FeatureMode::ImageOnly => need(image_cls_mean, "image features"),
    }
}

/// Head logits `[B, 1]` for fused features `[B, F]`.
pub fn head_logits<S: Scalar>(g: &mut Graph<S>, p: &Bound<'_, S>, features: Var) -> Result<Var> {
    let w = p.var("head.weight")?;
    let x = match p.var("head.hidden.weight") {
        Ok(_) => {
            let h = linear(g, p, "head.hidden", features)?;
            g.gelu(h)?
        }
        Err(_) => features,
    };
    let width = *g.shape(x).last().unwrap();
    if g.shape(w)[0] != width {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, features have {width}",
            g.shape(w)[0]
        )));
    }
    linear(g, p, "head", x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
    pub label: u8,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        let probability = sigmoid(logit);
        Prediction {
            logit,
            probability,
            label: u8::from(probability >= 0.5),
        }
    }
}

/// Single-study affine head applied to concrete vectors.
pub fn fuse_and_classify<S: Scalar>(
    z_video: &[S],
    image_cls_mean: &[S],
    head: &ParamStore<S>,
    mode: FeatureMode,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = head.bind(&mut g);
    let v = g.input(Tensor::new(vec![1, z_video.len()], z_video.to_vec())?);
    let i = g.input(Tensor::new(
        vec![1, image_cls_mean.len()],
        image_cls_mean.to_vec(),
    )?);
    let f = fuse(&mut g, mode, Some(v), Some(i))?;
    let z = head_logits(&mut g, &p, f)?;
    Ok(Prediction::from_logit(g.value(z).data()[0].as_f64()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<f64>,
}

/// Mean binary cross-entropy evaluated from logits.
pub fn bce_loss(logits: &[f64], labels: &[u8]) -> Result<LossValue> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let components = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| match y {
            0 | 1 => Ok(bce_term(z, y as f64)),
            other => Err(Error::Data(format!("label {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let value = components.iter().sum::<f64>() / components.len().max(1) as f64;
    Ok(LossValue { value, components })
}
