//! Command implementations: parse settings from a [`RunConfig`], call the
//! module operation, write artifacts. The binary is a thin shell over these.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::image::{LabelMap, RgbImage};
use crate::data::manifest::{read_fields, write_fields, FieldRecord, Manifest, ManifestRecord, SampleKind};
use crate::data::{extract_cells, gen_synthetic, patchify};
use crate::error::{Error, Result};
use crate::eval::{
    embed, evaluate_split, kfold, leave_one_source_out, pca_map, Aggregate, ClassifierSpec, EmbeddingSet, EvalReport,
    PcaResult, SplitRecord,
};
use crate::train::{train_loop, write_loss_log, StepStats, TrainState};
use crate::vit::{read_checkpoint, write_checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.rdck";
pub const STATE_FILE: &str = "train_state.rdck";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FIELDS_FILE: &str = "fields.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Resolved config written next to a file output: `<out>.config.txt`.
fn config_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.txt");
    PathBuf::from(s)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Renders fields, label masks and parasite-overlay masks into `io.out`, plus
/// `fields.csv`.
pub fn gen_synthetic_cmd(cfg: &RunConfig) -> Result<Vec<FieldRecord>> {
    let synth = cfg.synth()?;
    let out = cfg.require_path("io.out")?;
    for d in ["fields", "masks", "overlays"] {
        mkdir(&out.join(d))?;
    }
    let mut records = Vec::new();
    for s in gen_synthetic(&synth)? {
        let id = &s.image.image_id;
        let img = out.join("fields").join(format!("{id}.ppm"));
        let mask = out.join("masks").join(format!("{id}.pgm"));
        s.image.image.write_ppm(&img)?;
        s.mask.write_pgm(&mask)?;
        let overlay = LabelMap::new(
            s.mask.width,
            s.mask.height,
            s.overlay.iter().map(|&o| o as u16).collect(),
        )?;
        overlay.write_pgm(&out.join("overlays").join(format!("{id}.pgm")))?;
        records.push(FieldRecord {
            path: img,
            mask_path: Some(mask),
            source_id: s.image.source_id.clone(),
            label: Some(s.label.clone()),
        });
    }
    write_fields(&out.join(FIELDS_FILE), &records)?;
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    log::info!("wrote {} synthetic fields to {}", records.len(), out.display());
    Ok(records)
}

/// Tiles every field into `patch.size` patches: `io.out/patches/*.ppm` and a
/// patch manifest.
pub fn patchify_cmd(cfg: &RunConfig) -> Result<Manifest> {
    let fields = read_fields(&cfg.require_path("io.fields")?)?;
    let size = cfg.usize("patch.size")?;
    let out = cfg.require_path("io.out")?;
    mkdir(&out.join("patches"))?;
    let mut manifest = Manifest::default();
    for f in &fields {
        let img = RgbImage::read_ppm(&f.path)?;
        let patches = patchify(&img, size)?;
        let stem = file_stem(&f.path);
        for (i, p) in patches.iter().enumerate() {
            let path = out.join("patches").join(format!("{stem}_p{i:03}.ppm"));
            p.write_ppm(&path)?;
            manifest.records.push(ManifestRecord {
                path,
                kind: SampleKind::Patch,
                source_id: f.source_id.clone(),
                label: f.label.clone(),
            });
        }
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    log::info!("wrote {} patches from {} fields", manifest.records.len(), fields.len());
    Ok(manifest)
}

/// Crops every labeled cell of every field with a mask: `io.out/cells/*.ppm`
/// and a cell manifest.
pub fn extract_cells_cmd(cfg: &RunConfig) -> Result<Manifest> {
    let fields_path = cfg.require_path("io.fields")?;
    let fields = read_fields(&fields_path)?;
    let cells_cfg = cfg.cells()?;
    let out = cfg.require_path("io.out")?;
    mkdir(&out.join("cells"))?;
    let mut manifest = Manifest::default();
    let mut skipped = 0;
    for f in &fields {
        let mask_path = f.mask_path.as_ref().ok_or_else(|| Error::Config {
            key: "io.fields".into(),
            msg: format!("{} has no mask_path", f.path.display()),
        })?;
        let img = RgbImage::read_ppm(&f.path)?;
        let mask = LabelMap::read_pgm(mask_path)?;
        let crops = extract_cells(&img, &mask, &cells_cfg)?;
        skipped += crops.skipped;
        let stem = file_stem(&f.path);
        for c in &crops.crops {
            let path = out.join("cells").join(format!("{stem}_c{:05}.ppm", c.label));
            c.image.write_ppm(&path)?;
            manifest.records.push(ManifestRecord {
                path,
                kind: SampleKind::Cell,
                source_id: f.source_id.clone(),
                label: f.label.clone(),
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} labels below {} pixels", cells_cfg.min_pixels);
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    log::info!("wrote {} cell crops", manifest.records.len());
    Ok(manifest)
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Diagnostics of the final step run in this invocation.
    pub last: Option<StepStats>,
}

/// Trains on the manifest's images and writes `checkpoint.rdck` (teacher
/// encoder), `train_state.rdck`, `loss.csv` and `config.txt` into `io.out`.
pub fn train_cmd(cfg: &RunConfig) -> Result<TrainOutcome> {
    let run = cfg.train_run()?;
    let manifest = Manifest::read(&cfg.require_path("io.manifest")?)?;
    let out = cfg.require_path("io.out")?;
    mkdir(&out)?;
    cfg.write_resolved(&out.join(CONFIG_FILE))?;
    let data = manifest
        .records
        .iter()
        .map(|r| Ok(RgbImage::read_ppm(&r.path)?.to_float()))
        .collect::<Result<Vec<_>>>()?;
    let mut state = match cfg.path("io.resume") {
        Some(p) => {
            let s = TrainState::load(&p, &run)?;
            log::info!("resuming from iteration {}", s.iteration);
            s
        }
        None => TrainState::init(&run.vit, &run.ssl, run.train.seed)?,
    };
    let mut last = None;
    let every = run.train.checkpoint_every;
    let total = run.train.iterations;
    train_loop(&mut state, &data, &run, |st, stats| {
        last = Some(*stats);
        let it = st.iteration;
        if it % 10 == 0 || it == total {
            log::info!(
                "iter {}/{} loss {:.5} lr {:.3e} m {:.5} teacher entropy {:.4}",
                stats.record.iter,
                total,
                stats.record.loss,
                stats.record.lr,
                stats.record.teacher_momentum,
                stats.teacher_entropy
            );
        }
        if every > 0 && it % every == 0 && it < total {
            st.save(&out.join(format!("train_state_{it:06}.rdck")))?;
        }
        Ok(())
    })?;
    write_checkpoint(&out.join(CHECKPOINT_FILE), &state.teacher.config, &state.teacher.params)?;
    state.save(&out.join(STATE_FILE))?;
    write_loss_log(&out.join(LOSS_LOG_FILE), &state.history)?;
    Ok(TrainOutcome { state, last })
}

/// Teacher-encoder CLS embeddings of every manifest record.
pub fn embed_cmd(cfg: &RunConfig) -> Result<EmbeddingSet> {
    let encoder = read_checkpoint(&cfg.require_path("io.checkpoint")?)?;
    let manifest = Manifest::read(&cfg.require_path("io.manifest")?)?;
    let set = embed(&encoder, &manifest)?;
    let out = cfg.require_path("io.out")?;
    set.write(&out)?;
    cfg.write_resolved(&config_beside(&out))?;
    log::info!("embedded {} samples (dimension {})", set.len(), set.dim());
    Ok(set)
}

fn single_split(cfg: &RunConfig, spec: &ClassifierSpec, protocol: &str) -> Result<EvalReport> {
    let train = EmbeddingSet::read(&cfg.require_path("io.embeddings")?)?;
    let test = EmbeddingSet::read(&cfg.require_path("io.test_embeddings")?)?;
    let p = evaluate_split(spec, &train, &test)?;
    let report = EvalReport {
        protocol: protocol.into(),
        classifier: spec.name(),
        splits: vec![SplitRecord {
            name: "test".into(),
            train_sources: train.sources(),
            test_sources: test.sources(),
            n_train: train.len(),
            n_test: test.len(),
            metrics: p.metrics,
        }],
        aggregates: vec![Aggregate::of("splits", &[p.metrics])?],
    };
    finish_report(cfg, report)
}

fn finish_report(cfg: &RunConfig, report: EvalReport) -> Result<EvalReport> {
    let out = cfg.require_path("io.out")?;
    report.write(&out)?;
    cfg.write_resolved(&config_beside(&out))?;
    eprint!("{}", report.to_text());
    Ok(report)
}

pub fn eval_linear_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    single_split(cfg, &ClassifierSpec::Linear(cfg.probe()?), "train-test")
}

pub fn eval_knn_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    single_split(cfg, &cfg.knn_spec()?, "train-test")
}

pub fn eval_loso_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    let set = EmbeddingSet::read(&cfg.require_path("io.embeddings")?)?;
    let report = leave_one_source_out(&set, &cfg.classifier()?)?;
    finish_report(cfg, report)
}

pub fn eval_kfold_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    let set = EmbeddingSet::read(&cfg.require_path("io.embeddings")?)?;
    let report = kfold(&set, cfg.usize("eval.folds")?, cfg.u64("seed")?, &cfg.classifier()?)?;
    finish_report(cfg, report)
}

/// Writes the 3-component PCA map of `io.image` as a PPM to `io.out`.
pub fn pca_map_cmd(cfg: &RunConfig) -> Result<PcaResult> {
    let encoder = read_checkpoint(&cfg.require_path("io.checkpoint")?)?;
    let image = RgbImage::read_ppm(&cfg.require_path("io.image")?)?;
    let (map, res) = pca_map(&encoder, &image.to_float())?;
    let out = cfg.require_path("io.out")?;
    map.write_ppm(&out)?;
    cfg.write_resolved(&config_beside(&out))?;
    log::info!(
        "component variances {:.4e} {:.4e} {:.4e}",
        res.variances[0],
        res.variances[1],
        res.variances[2]
    );
    Ok(res)
}
