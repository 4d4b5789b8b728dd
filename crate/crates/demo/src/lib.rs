//! Browser demo: synthetic smear fields, a teacher-centering explorer and PCA
//! feature maps from a seeded encoder. Every exported function is a thin
//! wrapper over a plain Rust function so the logic is testable natively.

use dino_rbc::data::synthetic::CLASS_NAMES;
use dino_rbc::data::{render_field, RgbImage, SynthConfig};
use dino_rbc::eval::pca_map;
use dino_rbc::rng::stream;
use dino_rbc::ssl::{
    marginals, mean_assignment_entropy, teacher_targets_ema, teacher_targets_plain, teacher_targets_sinkhorn,
    CenteringMode, CenteringState,
};
use dino_rbc::tensor::Tensor;
use dino_rbc::vit::{VitConfig, VitEncoder};
use rand::Rng as _;
use wasm_bindgen::prelude::*;

pub const FIELD_SIZE: usize = 160;
pub const CLASSES: usize = 4;
pub const SOURCES: usize = 2;
pub const MAP_SIZE: usize = 64;

fn to_js(e: dino_rbc::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_images: CLASSES * SOURCES,
        sources: SOURCES,
        classes: CLASSES,
        seed,
        field_size: FIELD_SIZE,
        cell_radius: 14.0,
        ..SynthConfig::default()
    }
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// A synthetic field as RGBA bytes (`FIELD_SIZE²·4`). With `show_overlay`,
/// parasite-overlay pixels are painted magenta.
pub fn field_rgba(seed: u64, class: usize, source: usize, show_overlay: bool) -> dino_rbc::Result<Vec<u8>> {
    let s = render_field(&synth(seed), class % CLASSES + CLASSES * (source % SOURCES))?;
    let mut out = rgba(&s.image.image);
    if show_overlay {
        for (i, _) in s.overlay.iter().enumerate().filter(|(_, &o)| o) {
            out[i * 4..i * 4 + 3].copy_from_slice(&[230, 0, 200]);
        }
    }
    Ok(out)
}

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES[class % CLASSES]
}

/// Outcome of centering one batch of teacher logits.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct CenteringView {
    marginals: Vec<f64>,
    argmax_counts: Vec<u32>,
    mean_entropy: f64,
    row_entropy: f64,
    deviation: f64,
}

#[wasm_bindgen]
impl CenteringView {
    /// Batch-mean probability of every prototype.
    pub fn marginals(&self) -> Vec<f64> {
        self.marginals.clone()
    }
    /// How many rows pick each prototype as their top choice.
    pub fn argmax_counts(&self) -> Vec<u32> {
        self.argmax_counts.clone()
    }
    /// Entropy of the batch-mean assignment; `ln K` when balanced, 0 when collapsed.
    pub fn mean_entropy(&self) -> f64 {
        self.mean_entropy
    }
    /// Average per-row entropy (how confident each target is).
    pub fn row_entropy(&self) -> f64 {
        self.row_entropy
    }
    /// Largest `|marginal − 1/K|`.
    pub fn deviation(&self) -> f64 {
        self.deviation
    }
}

/// Cosine logits of `batch` unit features against `k` unit prototypes in
/// `dim` dimensions. `alignment` in `[0, 1]` pulls every feature toward one
/// shared direction: 0 gives diverse rows, 1 gives identical rows. The shared
/// direction and prototypes depend on `seed` only; `round` redraws the rows.
pub fn teacher_logits(
    seed: u64,
    round: u64,
    batch: usize,
    k: usize,
    dim: usize,
    alignment: f64,
) -> dino_rbc::Result<Tensor<f64>> {
    fn unit(rng: &mut dino_rbc::rng::Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }
    let mut fixed = stream(seed, &[0xDE70]);
    let shared = unit(&mut fixed, dim);
    let protos: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut fixed, dim)).collect();
    let mut rows = stream(seed, &[0xDE71, round]);
    let a = alignment.clamp(0.0, 1.0);
    let mut data = Vec::with_capacity(batch * k);
    for _ in 0..batch {
        let own = unit(&mut rows, dim);
        let v: Vec<f64> = own.iter().zip(&shared).map(|(o, s)| (1.0 - a) * o + a * s).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(
            protos
                .iter()
                .map(|p| v.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() / n),
        );
    }
    Tensor::new(vec![batch, k], data)
}

/// Centers a batch of synthetic teacher logits with `mode` (`none`, `ema` or
/// `sinkhorn`). EMA runs `rounds` updates of its center on fresh batches
/// drawn with the same alignment before the reported one.
#[allow(clippy::too_many_arguments)]
pub fn center_batch(
    seed: u64,
    mode: &str,
    batch: usize,
    k: usize,
    alignment: f64,
    tau: f64,
    sinkhorn_iters: usize,
    rounds: usize,
) -> dino_rbc::Result<CenteringView> {
    let mode: CenteringMode = mode.parse().map_err(dino_rbc::Error::Param)?;
    if batch < 1 || k < 1 {
        return Err(dino_rbc::Error::Param(
            "batch and prototype count must be positive".into(),
        ));
    }
    let dim = 32;
    let logits = teacher_logits(seed, 0, batch, k, dim, alignment)?;
    let probs = match mode {
        CenteringMode::None => teacher_targets_plain(&logits, tau)?,
        CenteringMode::Sinkhorn => teacher_targets_sinkhorn(&logits, tau, sinkhorn_iters)?,
        CenteringMode::Ema => {
            let mut state = CenteringState::new(mode, k);
            for r in 1..=rounds as u64 {
                let warm = teacher_logits(seed, r, batch, k, dim, alignment)?;
                state = teacher_targets_ema(&warm, &state, tau, 0.9)?.1;
            }
            teacher_targets_ema(&logits, &state, tau, 0.9)?.0
        }
    };
    let m = marginals(&probs);
    let mut argmax_counts = vec![0u32; k];
    let mut row_entropy = 0.0;
    for row in probs.data().chunks_exact(k) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        argmax_counts[best.0] += 1;
        row_entropy += row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>();
    }
    Ok(CenteringView {
        deviation: m.iter().map(|v| (v - 1.0 / k as f64).abs()).fold(0.0, f64::max),
        mean_entropy: mean_assignment_entropy(&probs),
        row_entropy: row_entropy / batch as f64,
        marginals: m,
        argmax_counts,
    })
}

/// Encoder used for the PCA map: 64-pixel input, 4-pixel patches (256 tokens).
pub fn demo_encoder(seed: u64) -> dino_rbc::Result<VitEncoder<f32>> {
    VitEncoder::init(
        VitConfig {
            image_size: MAP_SIZE,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            in_channels: 3,
        },
        &mut stream(seed, &[0x9CA]),
    )
}

/// RGBA PCA map (`MAP_SIZE²·4`) of a synthetic field under a seeded encoder,
/// and the three component variances.
pub fn pca_rgba(
    field_seed: u64,
    class: usize,
    source: usize,
    encoder_seed: u64,
) -> dino_rbc::Result<(Vec<u8>, [f64; 3])> {
    let s = render_field(&synth(field_seed), class % CLASSES + CLASSES * (source % SOURCES))?;
    let img = s.image.image.to_float().resize(MAP_SIZE, MAP_SIZE);
    let (map, res) = pca_map(&demo_encoder(encoder_seed)?, &img)?;
    Ok((rgba(&map), [res.variances[0], res.variances[1], res.variances[2]]))
}

// --- browser bindings ------------------------------------------------------

#[wasm_bindgen(js_name = fieldSize)]
pub fn js_field_size() -> usize {
    FIELD_SIZE
}

#[wasm_bindgen(js_name = mapSize)]
pub fn js_map_size() -> usize {
    MAP_SIZE
}

#[wasm_bindgen(js_name = className)]
pub fn js_class_name(class: usize) -> String {
    class_name(class).to_string()
}

#[wasm_bindgen(js_name = renderField)]
pub fn js_render_field(seed: u32, class: usize, source: usize, show_overlay: bool) -> Result<Vec<u8>, JsError> {
    field_rgba(seed as u64, class, source, show_overlay).map_err(to_js)
}

#[wasm_bindgen(js_name = centerBatch)]
#[allow(clippy::too_many_arguments)]
pub fn js_center_batch(
    seed: u32,
    mode: &str,
    batch: usize,
    k: usize,
    alignment: f64,
    tau: f64,
    sinkhorn_iters: usize,
    rounds: usize,
) -> Result<CenteringView, JsError> {
    center_batch(seed as u64, mode, batch, k, alignment, tau, sinkhorn_iters, rounds).map_err(to_js)
}

#[wasm_bindgen(js_name = pcaMap)]
pub fn js_pca_map(field_seed: u32, class: usize, source: usize, encoder_seed: u32) -> Result<Vec<u8>, JsError> {
    pca_rgba(field_seed as u64, class, source, encoder_seed as u64)
        .map(|(px, _)| px)
        .map_err(to_js)
}
