//! Line-based run configuration: `section.key = value`, `#` comments.
//!
//! Every key has a default in [`SCHEMA`]; unknown keys and unparsable values
//! are rejected with the offending key. [`RunConfig::dump`] writes the
//! fully resolved settings, which reproduce the run when read back.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::augment::{Augmentation, CropSpec};
use crate::data::cells::CellCropConfig;
use crate::data::synthetic::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{ClassifierSpec, Distance, ProbeConfig};
use crate::ssl::{CenteringMode, SslConfig};
use crate::train::{TrainConfig, TrainRun};
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Count,
    Seed,
    Float,
    Flag,
    Path,
    Centering,
    Distance,
    Classifier,
    Range,
    AugList,
}

/// `(key, default, kind, help)`.
pub const SCHEMA: &[(&str, &str, Kind, &str)] = &[
    ("seed", "0", Kind::Seed, "base seed for every random draw"),
    ("model.image_size", "64", Kind::Count, "encoder input side in pixels"),
    ("model.patch_size", "8", Kind::Count, "encoder patch side in pixels"),
    ("model.embed_dim", "64", Kind::Count, "token width"),
    ("model.depth", "2", Kind::Count, "transformer blocks"),
    ("model.heads", "4", Kind::Count, "attention heads"),
    ("model.mlp_ratio", "4", Kind::Float, "MLP hidden width / embed_dim"),
    ("model.in_channels", "3", Kind::Count, "input channels"),
    ("ssl.prototypes", "256", Kind::Count, "prototype count K"),
    (
        "ssl.head_hidden_dim",
        "2048",
        Kind::Count,
        "projection head hidden width",
    ),
    (
        "ssl.head_bottleneck_dim",
        "256",
        Kind::Count,
        "projection head bottleneck width",
    ),
    ("ssl.student_temp", "0.1", Kind::Float, "student softmax temperature"),
    ("ssl.teacher_temp", "0.04", Kind::Float, "teacher softmax temperature"),
    (
        "ssl.centering",
        "sinkhorn",
        Kind::Centering,
        "teacher centering: sinkhorn|ema|none",
    ),
    ("ssl.center_momentum", "0.9", Kind::Float, "EMA center momentum"),
    ("ssl.sinkhorn_iters", "3", Kind::Count, "Sinkhorn-Knopp iterations"),
    ("ssl.koleo", "false", Kind::Flag, "enable the KoLeo term"),
    ("ssl.koleo_weight", "0.1", Kind::Float, "KoLeo weight"),
    ("ssl.koleo_eps", "1e-8", Kind::Float, "KoLeo distance floor"),
    ("train.iterations", "300", Kind::Count, "optimizer steps"),
    ("train.batch_size", "32", Kind::Count, "images per step"),
    (
        "train.base_lr",
        "0.001",
        Kind::Float,
        "peak learning rate at batch 32 (scaled linearly)",
    ),
    ("train.final_lr", "1e-6", Kind::Float, "learning rate at the last step"),
    (
        "train.warmup_iters",
        "auto",
        Kind::Count,
        "linear warmup steps (auto = iterations / 10)",
    ),
    ("train.weight_decay", "0.04", Kind::Float, "decoupled weight decay"),
    (
        "train.momentum_start",
        "0.992",
        Kind::Float,
        "teacher EMA momentum at step 0",
    ),
    (
        "train.momentum_end",
        "1",
        Kind::Float,
        "teacher EMA momentum at the last step",
    ),
    (
        "train.deterministic",
        "true",
        Kind::Flag,
        "build batches inline instead of on a worker thread",
    ),
    (
        "train.checkpoint_every",
        "0",
        Kind::Count,
        "write a resumable state every N steps (0 = off)",
    ),
    ("crop.global_crops", "2", Kind::Count, "global views per image"),
    (
        "crop.global_size",
        "64",
        Kind::Count,
        "global view side (must equal model.image_size)",
    ),
    (
        "crop.global_scale",
        "0.4,1",
        Kind::Range,
        "global crop area fraction range",
    ),
    ("crop.local_crops", "0", Kind::Count, "local views per image"),
    ("crop.local_size", "32", Kind::Count, "local view side"),
    (
        "crop.local_scale",
        "0.05,0.4",
        Kind::Range,
        "local crop area fraction range",
    ),
    (
        "crop.augmentations",
        "hflip,vflip,jitter,gray,blur,solarize",
        Kind::AugList,
        "ordered augmentation chain",
    ),
    ("aug.hflip.p", "0.5", Kind::Float, ""),
    ("aug.vflip.p", "0.5", Kind::Float, ""),
    ("aug.jitter.p", "0.8", Kind::Float, ""),
    ("aug.jitter.brightness", "0.3", Kind::Float, ""),
    ("aug.jitter.contrast", "0.3", Kind::Float, ""),
    ("aug.jitter.saturation", "0.2", Kind::Float, ""),
    ("aug.jitter.channel_shift", "0.1", Kind::Float, ""),
    ("aug.gray.p", "0.2", Kind::Float, ""),
    ("aug.blur.p", "0.3", Kind::Float, ""),
    ("aug.blur.sigma_min", "0.1", Kind::Float, ""),
    ("aug.blur.sigma_max", "1.5", Kind::Float, ""),
    ("aug.solarize.p", "0.1", Kind::Float, ""),
    ("aug.solarize.threshold", "0.5", Kind::Float, ""),
    ("synth.n_images", "24", Kind::Count, "synthetic fields"),
    ("synth.sources", "2", Kind::Count, "synthetic acquisition sources"),
    ("synth.classes", "3", Kind::Count, "synthetic morphology classes (≤ 8)"),
    ("synth.field_size", "224", Kind::Count, "synthetic field side in pixels"),
    ("synth.cells_per_field", "10", Kind::Count, "cells placed per field"),
    ("synth.cell_radius", "16", Kind::Float, "mean cell radius in pixels"),
    ("synth.tint_delta", "0.08", Kind::Float, "per-source tint magnitude"),
    ("synth.noise", "0.02", Kind::Float, "pixel noise standard deviation"),
    ("patch.size", "224", Kind::Count, "smear patch side in pixels"),
    ("cells.margin", "0.12", Kind::Float, "bounding-box margin per side"),
    ("cells.out_size", "224", Kind::Count, "cell crop side in pixels"),
    ("cells.min_pixels", "16", Kind::Count, "smallest cell kept"),
    (
        "eval.classifier",
        "linear",
        Kind::Classifier,
        "classifier for eval-loso / eval-kfold: linear|knn",
    ),
    ("eval.k", "20", Kind::Count, "neighbors for k-NN"),
    (
        "eval.distance",
        "cosine",
        Kind::Distance,
        "k-NN distance: cosine|euclidean",
    ),
    ("eval.lambda", "1e-4", Kind::Float, "linear probe L2 penalty"),
    ("eval.max_epochs", "1000", Kind::Count, "linear probe iterations"),
    ("eval.tol", "1e-6", Kind::Float, "linear probe gradient-norm tolerance"),
    ("eval.folds", "5", Kind::Count, "folds for eval-kfold"),
    ("io.out", "", Kind::Path, "output file or directory"),
    ("io.manifest", "", Kind::Path, "sample manifest CSV"),
    (
        "io.fields",
        "",
        Kind::Path,
        "field list CSV (path,mask_path,source_id,label)",
    ),
    ("io.checkpoint", "", Kind::Path, "encoder checkpoint"),
    (
        "io.embeddings",
        "",
        Kind::Path,
        "embedding file (train set for eval-linear / eval-knn)",
    ),
    (
        "io.test_embeddings",
        "",
        Kind::Path,
        "test embedding file for eval-linear / eval-knn",
    ),
    ("io.image", "", Kind::Path, "input image (PPM)"),
    ("io.resume", "", Kind::Path, "training state to resume from"),
];

fn schema(key: &str) -> Option<&'static (&'static str, &'static str, Kind, &'static str)> {
    SCHEMA.iter().find(|e| e.0 == key)
}

fn check(kind: Kind, v: &str) -> std::result::Result<(), String> {
    match kind {
        Kind::Count if v == "auto" => Ok(()),
        Kind::Count => v.parse::<usize>().map(|_| ()).map_err(|e| e.to_string()),
        Kind::Seed => v.parse::<u64>().map(|_| ()).map_err(|e| e.to_string()),
        Kind::Float => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            Ok(_) => Err("must be finite".into()),
            Err(e) => Err(e.to_string()),
        },
        Kind::Flag => parse_flag(v).map(|_| ()),
        Kind::Path => Ok(()),
        Kind::Centering => CenteringMode::from_str(v).map(|_| ()).map_err(|e| e.to_string()),
        Kind::Distance => Distance::from_str(v).map(|_| ()),
        Kind::Classifier => match v {
            "linear" | "knn" => Ok(()),
            _ => Err(format!("unknown classifier `{v}` (linear|knn)")),
        },
        Kind::Range => parse_range(v).map(|_| ()),
        Kind::AugList => {
            for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if !AUG_NAMES.contains(&name) {
                    return Err(format!("unknown augmentation `{name}` ({})", AUG_NAMES.join("|")));
                }
            }
            Ok(())
        }
    }
}

const AUG_NAMES: [&str; 6] = ["hflip", "vflip", "jitter", "gray", "blur", "solarize"];

fn parse_flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true|false, got `{v}`")),
    }
}

fn parse_range(v: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|e| format!("{e}"))?,
            b.parse().map_err(|e| format!("{e}"))?,
        )),
        _ => Err(format!("expected `lo,hi`, got `{v}`")),
    }
}

/// Merged key-value settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA
                .iter()
                .map(|(k, d, _, _)| (k.to_string(), d.to_string()))
                .collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let entry = schema(key).ok_or_else(|| Error::Config {
            key: key.into(),
            msg: "unknown key".into(),
        })?;
        let value = value.trim();
        if value == "auto" && key != "train.warmup_iters" {
            return Err(Self::err(key, "`auto` is only accepted for train.warmup_iters"));
        }
        check(entry.2, value).map_err(|msg| Error::Config { key: key.into(), msg })?;
        self.values.insert(key.into(), value.into());
        self.explicit.insert(key.into());
        Ok(())
    }

    /// Applies `key = value` lines; later lines win.
    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("{origin}:{}", i + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_str(&text, &path.display().to_string())
    }

    pub fn from_str_checked(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_str(text, "<config>")?;
        Ok(c)
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn err(key: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        if key == "train.warmup_iters" && self.raw(key) == "auto" {
            return Ok(self.usize("train.iterations")? / 10);
        }
        self.raw(key).parse().map_err(|e| Self::err(key, format!("{e}")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.raw(key).parse().map_err(|e| Self::err(key, format!("{e}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.raw(key).parse().map_err(|e| Self::err(key, format!("{e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        parse_flag(self.raw(key)).map_err(|m| Self::err(key, m))
    }

    pub fn range(&self, key: &str) -> Result<(f64, f64)> {
        parse_range(self.raw(key)).map_err(|m| Self::err(key, m))
    }

    /// `None` when the path key is empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Self::err(key, "required but not set"))
    }

    pub fn vit(&self) -> Result<VitConfig> {
        let c = VitConfig {
            image_size: self.usize("model.image_size")?,
            patch_size: self.usize("model.patch_size")?,
            embed_dim: self.usize("model.embed_dim")?,
            depth: self.usize("model.depth")?,
            heads: self.usize("model.heads")?,
            mlp_ratio: self.f64("model.mlp_ratio")?,
            in_channels: self.usize("model.in_channels")?,
        };
        c.validate().map_err(|e| Self::err("model", e.to_string()))?;
        Ok(c)
    }

    pub fn ssl(&self) -> Result<SslConfig> {
        let c = SslConfig {
            prototypes: self.usize("ssl.prototypes")?,
            head_hidden_dim: self.usize("ssl.head_hidden_dim")?,
            head_bottleneck_dim: self.usize("ssl.head_bottleneck_dim")?,
            student_temp: self.f64("ssl.student_temp")?,
            teacher_temp: self.f64("ssl.teacher_temp")?,
            centering: CenteringMode::from_str(self.raw("ssl.centering"))
                .map_err(|e| Self::err("ssl.centering", e.to_string()))?,
            center_momentum: self.f64("ssl.center_momentum")?,
            sinkhorn_iters: self.usize("ssl.sinkhorn_iters")?,
            koleo_enabled: self.flag("ssl.koleo")?,
            koleo_weight: self.f64("ssl.koleo_weight")?,
            koleo_eps: self.f64("ssl.koleo_eps")?,
        };
        c.validate().map_err(|e| Self::err("ssl", e.to_string()))?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            iterations: self.usize("train.iterations")?,
            batch_size: self.usize("train.batch_size")?,
            base_lr: self.f64("train.base_lr")?,
            final_lr: self.f64("train.final_lr")?,
            warmup_iters: self.usize("train.warmup_iters")?,
            weight_decay: self.f64("train.weight_decay")?,
            momentum_start: self.f64("train.momentum_start")?,
            momentum_end: self.f64("train.momentum_end")?,
            seed: self.u64("seed")?,
            deterministic: self.flag("train.deterministic")?,
            checkpoint_every: self.usize("train.checkpoint_every")?,
        };
        c.validate().map_err(|e| Self::err("train", e.to_string()))?;
        Ok(c)
    }

    pub fn augmentations(&self) -> Result<Vec<Augmentation>> {
        let f = |k: &str| self.f64(&format!("aug.{k}"));
        self.raw("crop.augmentations")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|name| {
                Ok(match name {
                    "hflip" => Augmentation::HorizontalFlip { p: f("hflip.p")? },
                    "vflip" => Augmentation::VerticalFlip { p: f("vflip.p")? },
                    "jitter" => Augmentation::ColorJitter {
                        p: f("jitter.p")?,
                        brightness: f("jitter.brightness")?,
                        contrast: f("jitter.contrast")?,
                        saturation: f("jitter.saturation")?,
                        channel_shift: f("jitter.channel_shift")?,
                    },
                    "gray" => Augmentation::Grayscale { p: f("gray.p")? },
                    "blur" => Augmentation::GaussianBlur {
                        p: f("blur.p")?,
                        sigma_min: f("blur.sigma_min")?,
                        sigma_max: f("blur.sigma_max")?,
                    },
                    "solarize" => Augmentation::Solarize {
                        p: f("solarize.p")?,
                        threshold: f("solarize.threshold")?,
                    },
                    other => {
                        return Err(Self::err(
                            "crop.augmentations",
                            format!("unknown augmentation `{other}`"),
                        ))
                    }
                })
            })
            .collect()
    }

    pub fn crop(&self) -> Result<CropSpec> {
        let c = CropSpec {
            global_crops: self.usize("crop.global_crops")?,
            global_size: self.usize("crop.global_size")?,
            global_scale: self.range("crop.global_scale")?,
            local_crops: self.usize("crop.local_crops")?,
            local_size: self.usize("crop.local_size")?,
            local_scale: self.range("crop.local_scale")?,
            augmentations: self.augmentations()?,
        };
        c.validate().map_err(|e| Self::err("crop", e.to_string()))?;
        Ok(c)
    }

    pub fn train_run(&self) -> Result<TrainRun> {
        let run = TrainRun {
            vit: self.vit()?,
            ssl: self.ssl()?,
            train: self.train()?,
            crop: self.crop()?,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let c = SynthConfig {
            n_images: self.usize("synth.n_images")?,
            sources: self.usize("synth.sources")?,
            classes: self.usize("synth.classes")?,
            seed: self.u64("seed")?,
            field_size: self.usize("synth.field_size")?,
            cells_per_field: self.usize("synth.cells_per_field")?,
            cell_radius: self.f64("synth.cell_radius")?,
            tint_delta: self.f64("synth.tint_delta")?,
            noise: self.f64("synth.noise")?,
        };
        c.validate().map_err(|e| Self::err("synth", e.to_string()))?;
        Ok(c)
    }

    pub fn cells(&self) -> Result<CellCropConfig> {
        let c = CellCropConfig {
            margin: self.f64("cells.margin")?,
            out_size: self.usize("cells.out_size")?,
            min_pixels: self.usize("cells.min_pixels")?,
        };
        if !(c.margin >= 0.0) || c.out_size == 0 {
            return Err(Self::err("cells", "margin must be ≥ 0 and out_size positive"));
        }
        Ok(c)
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        let c = ProbeConfig {
            lambda: self.f64("eval.lambda")?,
            max_epochs: self.usize("eval.max_epochs")?,
            tol: self.f64("eval.tol")?,
        };
        c.validate().map_err(|e| Self::err("eval", e.to_string()))?;
        Ok(c)
    }

    pub fn knn_spec(&self) -> Result<ClassifierSpec> {
        Ok(ClassifierSpec::Knn {
            k: self.usize("eval.k")?,
            distance: Distance::from_str(self.raw("eval.distance")).map_err(|m| Self::err("eval.distance", m))?,
        })
    }

    /// Classifier selected by `eval.classifier`.
    pub fn classifier(&self) -> Result<ClassifierSpec> {
        match self.raw("eval.classifier") {
            "knn" => self.knn_spec(),
            _ => Ok(ClassifierSpec::Linear(self.probe()?)),
        }
    }

    /// Copy with derived defaults (`auto`) replaced by their values.
    pub fn resolved(&self) -> Result<RunConfig> {
        let mut c = self.clone();
        let w = self.usize("train.warmup_iters")?;
        c.values.insert("train.warmup_iters".into(), w.to_string());
        Ok(c)
    }

    /// Every key, grouped by section, in schema order.
    pub fn dump(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        let mut section = "";
        for (k, _, _, _) in SCHEMA {
            let s = k.split('.').next().unwrap_or("");
            if s != section && k.contains('.') {
                out.push('\n');
                section = s;
            }
            out.push_str(&format!("{k} = {}\n", self.raw(k)));
        }
        out
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let text = self.resolved()?.dump();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
