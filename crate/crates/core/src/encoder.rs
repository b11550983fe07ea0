//! Vision transformer with two learned readout tokens.
//!
//! Each input (a static image or a video frame) is cut into `N_p = H·W/P²`
//! patches and embedded linearly. The sequence `[cls, attn, patch_1..patch_Np]`
//! gets learned positional embeddings and runs through `n_layers` pre-norm
//! blocks (multi-head self-attention, then a GELU MLP, each with a residual).
//! After a final layernorm, the `cls` and `attn` positions are read out
//! through two separate `d_model → d_out` projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;
/// Sequence positions of the two readout tokens.
pub const CLS_POS: usize = 0;
pub const ATTN_POS: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_out: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.height,
                self.width,
                p = self.patch
            )));
        }
        if self.channels == 0 || self.d_model == 0 || self.d_out == 0 || self.n_heads == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `N_p = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        self.height * self.width / (self.patch * self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Cut a `C×H×W` image into `N_p` patches of `P²·C` values.
///
/// Patches are ordered row-major over the patch grid; inside a patch values
/// are flattened in (channel, row, col) order.
pub fn patchify<S: Copy>(image: &[S], cfg: &EncoderConfig) -> Result<Vec<S>> {
    cfg.validate()?;
    if image.len() != cfg.pixels() {
        return Err(Error::Dimension(format!(
            "image has {} values, expected {}x{}x{}",
            image.len(),
            cfg.channels,
            cfg.height,
            cfg.width
        )));
    }
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    let mut out = Vec::with_capacity(image.len());
    for py in 0..h / p {
        for px in 0..w / p {
            for c in 0..cfg.channels {
                for r in 0..p {
                    let row = (c * h + py * p + r) * w + px * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Fixed input normalization for `[0, 1]` pixels. Without centering, the
/// shared DC component dominates every patch embedding.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Batched, normalized patch tensor `[N, N_p, P²·C]` for a list of images.
pub fn patchify_batch<S: Scalar>(images: &[&[f32]], cfg: &EncoderConfig) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(images.len() * cfg.pixels());
    for img in images {
        data.extend(
            patchify(img, cfg)?
                .into_iter()
                .map(|v| S::from_f64((v as f64 - INPUT_MEAN) / INPUT_STD)),
        );
    }
    Tensor::new(vec![images.len(), cfg.num_patches(), cfg.patch_dim()], data)
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("normal shape")
}

/// Insert `name.weight` (Xavier uniform) and `name.bias` (zeros).
pub(crate) fn insert_linear(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
}

fn insert_layernorm(store: &mut ParamStore<f32>, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))
}

/// Fresh encoder parameters, fully determined by `seed`.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    insert_linear(&mut store, &mut rng, "patch_embed", cfg.patch_dim(), d)?;
    store.insert("cls_token", normal(&mut rng, &[d], 0.02))?;
    store.insert("attn_token", normal(&mut rng, &[d], 0.02))?;
    store.insert("pos_embed", normal(&mut rng, &[cfg.seq_len(), d], 0.02))?;
    for l in 0..cfg.n_layers {
        let b = format!("blocks.{l}");
        insert_layernorm(&mut store, &format!("{b}.ln1"), d)?;
        for proj in ["q", "k", "v", "proj"] {
            insert_linear(&mut store, &mut rng, &format!("{b}.attn.{proj}"), d, d)?;
        }
        insert_layernorm(&mut store, &format!("{b}.ln2"), d)?;
        insert_linear(
            &mut store,
            &mut rng,
            &format!("{b}.mlp.fc1"),
            d,
            MLP_RATIO * d,
        )?;
        insert_linear(
            &mut store,
            &mut rng,
            &format!("{b}.mlp.fc2"),
            MLP_RATIO * d,
            d,
        )?;
    }
    insert_layernorm(&mut store, "ln_final", d)?;
    insert_linear(&mut store, &mut rng, "head_cls", d, cfg.d_out)?;
    insert_linear(&mut store, &mut rng, "head_attn", d, cfg.d_out)?;
    Ok(store)
}

/// Graph handles for one encoder pass over `N` inputs.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// `[N, d_out]`
    pub z_cls: Var,
    /// `[N, d_out]`
    pub z_attn: Var,
    /// Self-attention probabilities per layer, `[N·n_heads, L, L]`.
    pub attention: Vec<Var>,
}

pub(crate) fn linear<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{name}.weight"))?)?;
    g.add(y, p.var(&format!("{name}.bias"))?)
}

fn layernorm<S: Scalar>(g: &mut Graph<S>, p: &Bound<'_, S>, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.gain"))?;
    let bias = p.var(&format!("{name}.bias"))?;
    g.layernorm(x, gain, bias, LAYERNORM_EPS)
}

/// `[N, L, d] → [N·H, L, d/H]`
fn split_heads<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    n: usize,
    l: usize,
    h: usize,
    dh: usize,
) -> Result<Var> {
    let x = g.reshape(x, &[n, l, h, dh])?;
    let x = g.permute_0213(x)?;
    g.reshape(x, &[n * h, l, dh])
}

fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    prefix: &str,
    x: Var,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let (n, l) = (s[0], s[1]);
    let h = cfg.n_heads;
    let dh = cfg.d_model / h;
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let q = split_heads(g, q, n, l, h, dh)?;
    let k = split_heads(g, k, n, l, h, dh)?;
    let v = split_heads(g, v, n, l, h, dh)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = g.softmax(scores, 2)?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.reshape(ctx, &[n, h, l, dh])?;
    let ctx = g.permute_0213(ctx)?;
    let ctx = g.reshape(ctx, &[n, l, cfg.d_model])?;
    let out = linear(g, p, &format!("{prefix}.proj"), ctx)?;
    Ok((out, probs))
}

/// Run the encoder on a `[N, N_p, P²·C]` patch tensor already in the graph.
/// Parameter names are looked up under `prefix` (e.g. `"encoder."`).
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound<'_, S>,
    prefix: &str,
    patches: Var,
    cfg: &EncoderConfig,
) -> Result<EncoderVars> {
    let s = g.shape(patches).to_vec();
    if s.len() != 3 || s[1] != cfg.num_patches() || s[2] != cfg.patch_dim() {
        return Err(Error::Dimension(format!(
            "encoder expects [N, {}, {}] patches, got {s:?}",
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let name = |n: &str| format!("{prefix}{n}");
    let d = cfg.d_model;
    let x = linear(g, p, &name("patch_embed"), patches)?;
    let cls = g.reshape(p.var(&name("cls_token"))?, &[1, d])?;
    let attn = g.reshape(p.var(&name("attn_token"))?, &[1, d])?;
    let tokens = g.concat_rows(&[cls, attn])?;
    let x = g.prepend_tokens(x, tokens)?;
    let mut x = g.add(x, p.var(&name("pos_embed"))?)?;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let b = name(&format!("blocks.{l}"));
        let h = layernorm(g, p, &format!("{b}.ln1"), x)?;
        let (a, probs) = self_attention(g, p, &format!("{b}.attn"), h, cfg)?;
        attention.push(probs);
        x = g.add(x, a)?;
        let h = layernorm(g, p, &format!("{b}.ln2"), x)?;
        let h = linear(g, p, &format!("{b}.mlp.fc1"), h)?;
        let h = g.gelu(h)?;
        let h = linear(g, p, &format!("{b}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    let x = layernorm(g, p, &name("ln_final"), x)?;
    let cls = g.select_token(x, CLS_POS)?;
    let attn = g.select_token(x, ATTN_POS)?;
    let z_cls = linear(g, p, &name("head_cls"), cls)?;
    let z_attn = linear(g, p, &name("head_attn"), attn)?;
    Ok(EncoderVars {
        z_cls,
        z_attn,
        attention,
    })
}

/// Concrete `(z_Cls, z_Attn)` rows for a batch of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<S> {
    pub z_cls: Tensor<S>,
    pub z_attn: Tensor<S>,
}

/// Forward-only encoding of raw images, outside any training graph.
pub fn encode_images<S: Scalar>(
    params: &ParamStore<S>,
    prefix: &str,
    images: &[&[f32]],
    cfg: &EncoderConfig,
) -> Result<EncoderOutput<S>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let patches = g.input(patchify_batch(images, cfg)?);
    let out = encode(&mut g, &bound, prefix, patches, cfg)?;
    Ok(EncoderOutput {
        z_cls: g.value(out.z_cls).clone(),
        z_attn: g.value(out.z_attn).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_out: 6,
        }
    }

    #[test]
    fn patch_counts() {
        let full_scale = EncoderConfig {
            height: 224,
            width: 224,
            channels: 3,
            patch: 16,
            ..EncoderConfig::default()
        };
        assert_eq!(full_scale.num_patches(), 196);
        assert_eq!(EncoderConfig::default().num_patches(), 16);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let cfg = EncoderConfig {
            height: 8,
            width: 8,
            patch: 8,
            ..EncoderConfig::default()
        };
        let img: Vec<f32> = (0..64).map(|v| v as f32).collect();
        assert_eq!(patchify(&img, &cfg).unwrap(), img);
    }

    #[test]
    fn patch_order_is_row_major_over_grid() {
        let cfg = EncoderConfig {
            height: 4,
            width: 4,
            patch: 2,
            ..EncoderConfig::default()
        };
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(&p[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn multichannel_patch_flattening() {
        let cfg = EncoderConfig {
            height: 2,
            width: 2,
            channels: 2,
            patch: 2,
            ..EncoderConfig::default()
        };
        let img: Vec<f32> = (0..8).map(|v| v as f32).collect();
        assert_eq!(patchify(&img, &cfg).unwrap(), img);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let cfg = EncoderConfig {
            height: 30,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn biases_zero_and_init_deterministic() {
        let a = init_params(&tiny(), 3).unwrap();
        let b = init_params(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&tiny(), 4).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let w = a.get("blocks.0.mlp.fc1.weight").unwrap();
        let bound = (6.0f32 / (8.0 + 32.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn rejects_wrong_patch_shape() {
        let cfg = tiny();
        let params = init_params(&cfg, 0).unwrap().cast::<f64>();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.input(Tensor::zeros(&[2, 3, 16]));
        assert!(matches!(
            encode(&mut g, &b, "", x, &cfg),
            Err(Error::Dimension(_))
        ));
    }
}
