use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dino_rbc::app;
use dino_rbc::config::RunConfig;
use dino_rbc::{Error, Result};

/// Self-distillation pretraining and evaluation for blood-smear images.
///
/// Settings come from `--config` (lines of `section.key = value`), then
/// `--set key=value`, then the named flags; later sources win. Every command
/// writes the fully resolved settings next to its outputs.
#[derive(Parser, Debug)]
#[command(name = "dino-rbc", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file with `section.key = value` lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed for every random draw [key: seed]
    #[arg(long, global = true)]
    seed: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic smear dataset (fields, label masks, overlay masks)
    GenSynthetic {
        /// Output directory [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Number of fields [key: synth.n_images]
        #[arg(long)]
        n_images: Option<String>,
        /// Number of acquisition sources [key: synth.sources]
        #[arg(long)]
        sources: Option<String>,
        /// Number of morphology classes, at most 8 [key: synth.classes]
        #[arg(long)]
        classes: Option<String>,
        /// Field side in pixels [key: synth.field_size]
        #[arg(long)]
        field_size: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Tile fields into non-overlapping square patches
    Patchify {
        /// Field list CSV [key: io.fields]
        #[arg(long)]
        fields: Option<String>,
        /// Output directory [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Patch side in pixels [key: patch.size]
        #[arg(long)]
        patch_size: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Crop single cells from fields using their label masks
    ExtractCells {
        /// Field list CSV with mask paths [key: io.fields]
        #[arg(long)]
        fields: Option<String>,
        /// Output directory [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Bounding-box margin per side [key: cells.margin]
        #[arg(long)]
        margin: Option<String>,
        /// Crop side in pixels [key: cells.out_size]
        #[arg(long)]
        out_size: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train student and teacher; the teacher encoder is exported
    Train {
        /// Sample manifest CSV [key: io.manifest]
        #[arg(long)]
        manifest: Option<String>,
        /// Output directory [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Training state file to resume from [key: io.resume]
        #[arg(long)]
        resume: Option<String>,
        /// Optimizer steps [key: train.iterations]
        #[arg(long)]
        iterations: Option<String>,
        /// Images per step [key: train.batch_size]
        #[arg(long)]
        batch_size: Option<String>,
        /// Peak learning rate at batch 32 [key: train.base_lr]
        #[arg(long)]
        base_lr: Option<String>,
        /// Teacher centering: sinkhorn, ema or none [key: ssl.centering]
        #[arg(long)]
        centering: Option<String>,
        /// Enable the KoLeo term: true or false [key: ssl.koleo]
        #[arg(long)]
        koleo: Option<String>,
        /// Write a resumable state every N steps [key: train.checkpoint_every]
        #[arg(long)]
        checkpoint_every: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Embed every manifest sample with a checkpoint's encoder
    Embed {
        /// Encoder checkpoint [key: io.checkpoint]
        #[arg(long)]
        checkpoint: Option<String>,
        /// Sample manifest CSV [key: io.manifest]
        #[arg(long)]
        manifest: Option<String>,
        /// Output embedding file [key: io.out]
        #[arg(long)]
        out: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Linear probe: fit on one embedding file, score another
    EvalLinear {
        /// Train embeddings [key: io.embeddings]
        #[arg(long)]
        train: Option<String>,
        /// Test embeddings [key: io.test_embeddings]
        #[arg(long)]
        test: Option<String>,
        /// Report CSV (a .txt summary is written beside it) [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// L2 penalty on weights [key: eval.lambda]
        #[arg(long)]
        lambda: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// k-NN classifier: train on one embedding file, score another
    EvalKnn {
        /// Train embeddings [key: io.embeddings]
        #[arg(long)]
        train: Option<String>,
        /// Test embeddings [key: io.test_embeddings]
        #[arg(long)]
        test: Option<String>,
        /// Report CSV [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Neighbors [key: eval.k]
        #[arg(long)]
        k: Option<String>,
        /// cosine or euclidean [key: eval.distance]
        #[arg(long)]
        distance: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-source-out: train on each source, test on each other
    EvalLoso {
        /// Embeddings [key: io.embeddings]
        #[arg(long)]
        embeddings: Option<String>,
        /// Report CSV [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// linear or knn [key: eval.classifier]
        #[arg(long)]
        classifier: Option<String>,
        /// Neighbors for knn [key: eval.k]
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Stratified k-fold cross-validation
    EvalKfold {
        /// Embeddings [key: io.embeddings]
        #[arg(long)]
        embeddings: Option<String>,
        /// Report CSV [key: io.out]
        #[arg(long)]
        out: Option<String>,
        /// Number of folds [key: eval.folds]
        #[arg(long)]
        folds: Option<String>,
        /// linear or knn [key: eval.classifier]
        #[arg(long)]
        classifier: Option<String>,
        /// Neighbors for knn [key: eval.k]
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Render the top-3 PCA components of an image's patch tokens
    PcaMap {
        /// Encoder checkpoint [key: io.checkpoint]
        #[arg(long)]
        checkpoint: Option<String>,
        /// Input image, square PPM [key: io.image]
        #[arg(long)]
        image: Option<String>,
        /// Output PPM [key: io.out]
        #[arg(long)]
        out: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

type Flags = Vec<(&'static str, Option<String>)>;
type Handler = fn(&RunConfig) -> Result<()>;

impl Command {
    fn split(self) -> (Common, Flags, Handler) {
        use Command::*;
        match self {
            GenSynthetic {
                out,
                n_images,
                sources,
                classes,
                field_size,
                common,
            } => (
                common,
                vec![
                    ("io.out", out),
                    ("synth.n_images", n_images),
                    ("synth.sources", sources),
                    ("synth.classes", classes),
                    ("synth.field_size", field_size),
                ],
                |c| app::gen_synthetic_cmd(c).map(drop),
            ),
            Patchify {
                fields,
                out,
                patch_size,
                common,
            } => (
                common,
                vec![("io.fields", fields), ("io.out", out), ("patch.size", patch_size)],
                |c| app::patchify_cmd(c).map(drop),
            ),
            ExtractCells {
                fields,
                out,
                margin,
                out_size,
                common,
            } => (
                common,
                vec![
                    ("io.fields", fields),
                    ("io.out", out),
                    ("cells.margin", margin),
                    ("cells.out_size", out_size),
                ],
                |c| app::extract_cells_cmd(c).map(drop),
            ),
            Train {
                manifest,
                out,
                resume,
                iterations,
                batch_size,
                base_lr,
                centering,
                koleo,
                checkpoint_every,
                common,
            } => (
                common,
                vec![
                    ("io.manifest", manifest),
                    ("io.out", out),
                    ("io.resume", resume),
                    ("train.iterations", iterations),
                    ("train.batch_size", batch_size),
                    ("train.base_lr", base_lr),
                    ("ssl.centering", centering),
                    ("ssl.koleo", koleo),
                    ("train.checkpoint_every", checkpoint_every),
                ],
                |c| app::train_cmd(c).map(drop),
            ),
            Embed {
                checkpoint,
                manifest,
                out,
                common,
            } => (
                common,
                vec![
                    ("io.checkpoint", checkpoint),
                    ("io.manifest", manifest),
                    ("io.out", out),
                ],
                |c| app::embed_cmd(c).map(drop),
            ),
            EvalLinear {
                train,
                test,
                out,
                lambda,
                common,
            } => (
                common,
                vec![
                    ("io.embeddings", train),
                    ("io.test_embeddings", test),
                    ("io.out", out),
                    ("eval.lambda", lambda),
                ],
                |c| app::eval_linear_cmd(c).map(drop),
            ),
            EvalKnn {
                train,
                test,
                out,
                k,
                distance,
                common,
            } => (
                common,
                vec![
                    ("io.embeddings", train),
                    ("io.test_embeddings", test),
                    ("io.out", out),
                    ("eval.k", k),
                    ("eval.distance", distance),
                ],
                |c| app::eval_knn_cmd(c).map(drop),
            ),
            EvalLoso {
                embeddings,
                out,
                classifier,
                k,
                common,
            } => (
                common,
                vec![
                    ("io.embeddings", embeddings),
                    ("io.out", out),
                    ("eval.classifier", classifier),
                    ("eval.k", k),
                ],
                |c| app::eval_loso_cmd(c).map(drop),
            ),
            EvalKfold {
                embeddings,
                out,
                folds,
                classifier,
                k,
                common,
            } => (
                common,
                vec![
                    ("io.embeddings", embeddings),
                    ("io.out", out),
                    ("eval.folds", folds),
                    ("eval.classifier", classifier),
                    ("eval.k", k),
                ],
                |c| app::eval_kfold_cmd(c).map(drop),
            ),
            PcaMap {
                checkpoint,
                image,
                out,
                common,
            } => (
                common,
                vec![("io.checkpoint", checkpoint), ("io.image", image), ("io.out", out)],
                |c| app::pca_map_cmd(c).map(drop),
            ),
        }
    }
}

fn build_config(common: &Common, flags: Flags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.merge_file(p)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = &common.seed {
        cfg.set("seed", s)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, flags, handler) = cli.command.split();
    let cfg = build_config(&common, flags)?;
    handler(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
