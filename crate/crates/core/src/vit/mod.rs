//! Small Vision Transformer encoder with CLS pooling.

mod checkpoint;

use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var, NORM_EPS};

pub use checkpoint::{read_checkpoint, read_params, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// Laptop-scale encoder.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            in_channels: 3,
        }
    }

    fn full_scale(embed_dim: usize, depth: usize, heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            in_channels: 3,
        }
    }

    /// ViT-S/14 geometry (384-d).
    pub fn small() -> Self {
        Self::full_scale(384, 12, 6)
    }

    /// ViT-B/14 geometry (768-d).
    pub fn base() -> Self {
        Self::full_scale(768, 12, 12)
    }

    /// ViT-L/14 geometry (1024-d).
    pub fn large() -> Self {
        Self::full_scale(1024, 24, 16)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.in_channels == 0 || !(self.mlp_ratio > 0.0) {
            return bad("in_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let patch_in = self.patch_size * self.patch_size * self.in_channels;
        let stem = patch_in * d + d + d + (self.num_patches() + 1) * d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        stem + self.depth * block + 2 * d
    }
}

/// Encoder parameters plus their geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder<F: Scalar = f32> {
    pub config: VitConfig,
    pub params: ParamSet<F>,
}

/// Encoder outputs for one batch.
pub struct EncoderOutput {
    /// `[B, D]` CLS embedding after the final layernorm.
    pub cls: Var,
    /// `[B, 1 + N, D]` all tokens after the final layernorm.
    pub tokens: Var,
}

impl<F: Scalar> VitEncoder<F> {
    pub fn init(config: VitConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.mlp_hidden();
        let patch_in = config.patch_size * config.patch_size * config.in_channels;
        let mut p = ParamSet::new();
        p.insert("patch_embed.weight", trunc_normal(&[patch_in, d], INIT_STD, rng));
        p.insert("patch_embed.bias", Tensor::zeros(vec![d]));
        p.insert("cls_token", crate::params::normal(&[1, d], INIT_STD, rng));
        p.insert("pos_embed", trunc_normal(&[config.num_patches() + 1, d], INIT_STD, rng));
        for b in 0..config.depth {
            let pre = format!("blocks.{b}");
            p.insert(format!("{pre}.norm1.weight"), Tensor::full(vec![d], F::one()));
            p.insert(format!("{pre}.norm1.bias"), Tensor::zeros(vec![d]));
            p.insert(
                format!("{pre}.attn.qkv.weight"),
                trunc_normal(&[d, 3 * d], INIT_STD, rng),
            );
            p.insert(format!("{pre}.attn.qkv.bias"), Tensor::zeros(vec![3 * d]));
            p.insert(format!("{pre}.attn.proj.weight"), trunc_normal(&[d, d], INIT_STD, rng));
            p.insert(format!("{pre}.attn.proj.bias"), Tensor::zeros(vec![d]));
            p.insert(format!("{pre}.norm2.weight"), Tensor::full(vec![d], F::one()));
            p.insert(format!("{pre}.norm2.bias"), Tensor::zeros(vec![d]));
            p.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&[d, h], INIT_STD, rng));
            p.insert(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(vec![h]));
            p.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&[h, d], INIT_STD, rng));
            p.insert(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
        }
        p.insert("norm.weight", Tensor::full(vec![d], F::one()));
        p.insert("norm.bias", Tensor::zeros(vec![d]));
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: VitConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let reference = VitEncoder::<F>::init(config.clone(), &mut crate::rng::stream(0, &[]))?;
        if !reference.params.same_layout(&params) {
            return Err(Error::Shape(
                "parameter layout does not match the encoder configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    /// Embeds a batch of `[B, H, W, C]` images (values in `[0, 1]`).
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound<'_, F>, images: &Tensor<F>) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let tokens = patch_embed(tape, bound, images, cfg)?;
        let b = images.shape()[0];
        let d = cfg.embed_dim;
        let cls = tape.expand(bound.var("cls_token")?, &[b])?;
        let mut x = tape.concat(&[cls, tokens], 1)?;
        x = tape.add(x, bound.var("pos_embed")?)?;
        let eps = F::c(NORM_EPS);
        for blk in 0..cfg.depth {
            let pre = format!("blocks.{blk}");
            let v = |n: &str| bound.var(&format!("{pre}.{n}"));
            let h = tape.layernorm(x, v("norm1.weight")?, v("norm1.bias")?, eps)?;
            let att = multi_head_attention(
                tape,
                h,
                v("attn.qkv.weight")?,
                v("attn.qkv.bias")?,
                v("attn.proj.weight")?,
                v("attn.proj.bias")?,
                cfg.heads,
            )?;
            x = tape.add(x, att.out)?;
            let h = tape.layernorm(x, v("norm2.weight")?, v("norm2.bias")?, eps)?;
            let h = linear(tape, h, v("mlp.fc1.weight")?, Some(v("mlp.fc1.bias")?))?;
            let h = tape.gelu(h);
            let h = linear(tape, h, v("mlp.fc2.weight")?, Some(v("mlp.fc2.bias")?))?;
            x = tape.add(x, h)?;
            tape.check_finite(x, &format!("encoder block {blk}"))?;
        }
        let x = tape.layernorm(x, bound.var("norm.weight")?, bound.var("norm.bias")?, eps)?;
        tape.check_finite(x, "encoder final norm")?;
        let cls = tape.narrow(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[b, d])?;
        Ok(EncoderOutput { cls, tokens: x })
    }

    /// Convenience forward without gradients; returns `[B, D]` CLS rows.
    pub fn embed(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, images)?;
        Ok(tape.value(out.cls).clone())
    }

    /// Patch-token outputs `[N, D]` for a single image (CLS excluded).
    pub fn patch_tokens(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let batch = image.clone().reshape(prepend(1, image.shape()))?;
        let out = self.forward(&mut tape, &bound, &batch)?;
        let n = self.config.num_patches();
        let t = tape.narrow(out.tokens, 1, 1, n)?;
        tape.value(t).clone().reshape(vec![n, self.config.embed_dim])
    }
}

fn prepend(v: usize, s: &[usize]) -> Vec<usize> {
    let mut o = vec![v];
    o.extend_from_slice(s);
    o
}

/// `x · w (+ b)` on the last axis.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Rearranges `[B, H, W, C]` images into `[B, N, p·p·C]` patch vectors,
/// patches in row-major grid order.
pub fn image_patches<F: Scalar>(images: &Tensor<F>, cfg: &VitConfig) -> Result<Tensor<F>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "expected [B, {0}, {0}, {1}] images, got {s:?}",
            cfg.image_size, cfg.in_channels
        )));
    }
    let (b, size, c, p, g) = (s[0], cfg.image_size, cfg.in_channels, cfg.patch_size, cfg.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let row = ((bi * size + gy * p + py) * size + gx * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, p * p * c], out)
}

/// Linear patch projection: `[B, H, W, C]` → `[B, N, D]`.
pub fn patch_embed<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound<'_, F>,
    images: &Tensor<F>,
    cfg: &VitConfig,
) -> Result<Var> {
    let patches = tape.constant(image_patches(images, cfg)?);
    linear(
        tape,
        patches,
        bound.var("patch_embed.weight")?,
        Some(bound.var("patch_embed.bias")?),
    )
}

pub struct AttentionOutput {
    /// `[B, T, D]` projected output.
    pub out: Var,
    /// `[B, heads, T, T]` attention weights.
    pub weights: Var,
}

/// Multi-head self-attention over `[B, T, D]` tokens:
/// `softmax(QKᵀ/√d_head)·V` per head, heads concatenated, then projected.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("attention expects [B, T, D], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("embed_dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qkv = linear(tape, x, qkv_w, Some(qkv_b))?;
    let qkv = tape.reshape(qkv, &[b, t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut split = Vec::with_capacity(3);
    for i in 0..3 {
        let part = tape.narrow(qkv, 0, i, 1)?;
        split.push(tape.reshape(part, &[b, heads, t, dh])?);
    }
    let (q, k, v) = (split[0], split[1], split[2]);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, F::one() / F::c(dh as f64).sqrt());
    let weights = tape.softmax(scores, 3, F::one())?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let out = linear(tape, ctx, proj_w, Some(proj_b))?;
    Ok(AttentionOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn token_counts() {
        let mut c = VitConfig::desk();
        c.image_size = 32;
        assert_eq!(c.num_patches(), 16);
        assert_eq!(VitConfig::small().num_patches(), 256);
    }

    #[test]
    fn config_validation() {
        let mut c = VitConfig::desk();
        c.image_size = 30;
        assert!(c.validate().is_err());
        let mut c = VitConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_embed_zero_image_gives_zero_tokens() {
        let mut cfg = VitConfig::desk();
        cfg.image_size = 32;
        let enc = VitEncoder::<f64>::init(cfg.clone(), &mut stream(1, &[])).unwrap();
        let mut tape = Tape::new();
        let bound = enc.params.bind(&mut tape, false);
        let img = Tensor::zeros(vec![1, 32, 32, 3]);
        let tok = patch_embed(&mut tape, &bound, &img, &cfg).unwrap();
        assert_eq!(tape.shape(tok), &[1, 16, 64]);
        assert!(tape.value(tok).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_rejected() {
        let enc = VitEncoder::<f32>::init(VitConfig::desk(), &mut stream(1, &[])).unwrap();
        let img = Tensor::zeros(vec![1, 32, 32, 3]);
        assert!(matches!(enc.embed(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn nonfinite_input_names_block() {
        let enc = VitEncoder::<f32>::init(VitConfig::desk(), &mut stream(1, &[])).unwrap();
        let mut img = Tensor::zeros(vec![1, 64, 64, 3]);
        img.data_mut()[0] = f32::INFINITY;
        match enc.embed(&img) {
            Err(Error::NonFinite(w)) => assert!(w.contains("block 0"), "{w}"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut rng = stream(3, &[]);
        let d = 4;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(trunc_normal(&[1, 1, d], 1.0, &mut rng));
        let qkv_w = tape.constant(trunc_normal(&[d, 3 * d], 1.0, &mut rng));
        let qkv_b = tape.constant(trunc_normal(&[3 * d], 1.0, &mut rng));
        let pw = tape.constant(trunc_normal(&[d, d], 1.0, &mut rng));
        let pb = tape.constant(trunc_normal(&[d], 1.0, &mut rng));
        let att = multi_head_attention(&mut tape, x, qkv_w, qkv_b, pw, pb, 2).unwrap();
        assert!(tape.value(att.weights).data().iter().all(|&w| w == 1.0));
        // expected: (x·Wv + bv)·Wp + bp
        let xv = tape.value(x).data().to_vec();
        let (w, bq) = (tape.value(qkv_w).data().to_vec(), tape.value(qkv_b).data().to_vec());
        let vals: Vec<f64> = (0..d)
            .map(|j| bq[2 * d + j] + (0..d).map(|i| xv[i] * w[i * 3 * d + 2 * d + j]).sum::<f64>())
            .collect();
        let (p, pbv) = (tape.value(pw).data().to_vec(), tape.value(pb).data().to_vec());
        for j in 0..d {
            let e = pbv[j] + (0..d).map(|i| vals[i] * p[i * d + j]).sum::<f64>();
            assert!((tape.value(att.out).data()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = stream(4, &[]);
        let d = 8;
        let row = trunc_normal::<f64>(&[d], 1.0, &mut rng);
        let mut data = row.data().to_vec();
        data.extend_from_slice(row.data());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 2, d], data).unwrap());
        let qkv_w = tape.constant(trunc_normal(&[d, 3 * d], 1.0, &mut rng));
        let qkv_b = tape.constant(Tensor::zeros(vec![3 * d]));
        let pw = tape.constant(trunc_normal(&[d, d], 1.0, &mut rng));
        let pb = tape.constant(Tensor::zeros(vec![d]));
        let att = multi_head_attention(&mut tape, x, qkv_w, qkv_b, pw, pb, 2).unwrap();
        let o = tape.value(att.out).data();
        assert_eq!(&o[..d], &o[d..]);
        let w = tape.value(att.weights);
        for r in w.data().chunks(2) {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        }
    }
}
