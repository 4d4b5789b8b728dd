use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dino_rbc::config::RunConfig;
use dino_rbc::eval::{evaluate_split, Aggregate, ClassifierSpec, Distance, EmbeddingSet, EvalReport, SplitRecord};
use dino_rbc::train::TrainState;
use dino_rbc::vit::read_checkpoint;

const BIN: &str = env!("CARGO_BIN_EXE_dino-rbc");
const SUBCOMMANDS: &[&str] = &[
    "gen-synthetic",
    "patchify",
    "extract-cells",
    "train",
    "embed",
    "eval-linear",
    "eval-knn",
    "eval-loso",
    "eval-kfold",
    "pca-map",
];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_matches_golden_file() {
    let mut text = String::new();
    for sub in std::iter::once(None).chain(SUBCOMMANDS.iter().map(Some)) {
        let args: Vec<&str> = sub.into_iter().copied().chain(["--help"]).collect();
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0));
        text.push_str(&format!("=== dino-rbc {}\n", args.join(" ")));
        text.push_str(&String::from_utf8(o.stdout).unwrap());
    }
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("DINO_RBC_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn help_lists_every_flag_with_its_key() {
    let o = run(&["train", "--help"]);
    let s = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--manifest",
        "--out",
        "--resume",
        "--iterations",
        "--centering",
        "--config",
        "--set",
        "--seed",
    ] {
        assert!(s.contains(flag), "{flag}");
    }
}

fn knn_report_via_module(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> EvalReport {
    let spec = ClassifierSpec::Knn {
        k,
        distance: Distance::Cosine,
    };
    let p = evaluate_split(&spec, train, test).unwrap();
    EvalReport {
        protocol: "train-test".into(),
        classifier: spec.name(),
        splits: vec![SplitRecord {
            name: "test".into(),
            train_sources: train.sources(),
            test_sources: test.sources(),
            n_train: train.len(),
            n_test: test.len(),
            metrics: p.metrics,
        }],
        aggregates: vec![Aggregate::of("splits", &[p.metrics]).unwrap()],
    }
}

#[test]
fn eval_knn_on_fixture_matches_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("knn.csv");
    let (train, test) = (fixture("toy_train.emb"), fixture("toy_test.emb"));
    let o = run(&[
        "eval-knn",
        "--train",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--k",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let expected = knn_report_via_module(
        &EmbeddingSet::read(&train).unwrap(),
        &EmbeddingSet::read(&test).unwrap(),
        20,
    );
    assert_eq!(std::fs::read_to_string(&out).unwrap(), expected.to_csv());
    assert!(out.with_extension("txt").exists());
    // the resolved settings are written back and parse again
    let resolved = std::fs::read_to_string(dir.path().join("knn.csv.config.txt")).unwrap();
    let cfg = RunConfig::from_str_checked(&resolved).unwrap();
    assert_eq!(cfg.usize("eval.k").unwrap(), 20);
}

#[test]
fn eval_loso_single_source_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("loso.csv");
    let o = run(&[
        "eval-loso",
        "--embeddings",
        fixture("single_source.emb").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("protocol error"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn eval_loso_on_fixture_has_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("loso.csv");
    let o = run(&[
        "eval-loso",
        "--embeddings",
        fixture("toy_train.emb").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--classifier",
        "linear",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        csv.lines()
            .filter(|l| l.contains("source0->source1") || l.contains("source1->source0"))
            .count(),
        2
    );
}

#[test]
fn validation_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let out = out.to_str().unwrap();
    let train = fixture("toy_train.emb");
    let train = train.to_str().unwrap();
    // unknown key, bad value, bad flag: validation
    assert_eq!(run(&["eval-knn", "--set", "eval.nope=1"]).status.code(), Some(1));
    assert_eq!(
        run(&["eval-knn", "--train", train, "--test", train, "--out", out, "--k", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["eval-knn", "--bogus"]).status.code(), Some(1));
    // missing input file: runtime
    let o = run(&["eval-knn", "--train", "/nonexistent.emb", "--test", train, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_with_zero_iterations_exports_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let cfg = d("run.cfg");
    std::fs::write(
        &cfg,
        "# small run\nmodel.image_size = 32\ncrop.global_size = 32\ncells.out_size = 32\nsynth.field_size = 96\n",
    )
    .unwrap();
    let steps: [&[&str]; 2] = [
        &["gen-synthetic", "--out", &d("syn"), "--n-images", "3"],
        &["extract-cells", "--fields", &d("syn/fields.csv"), "--out", &d("cells")],
    ];
    for args in steps {
        let mut a = args.to_vec();
        a.extend(["--config", &cfg]);
        let o = run(&a);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--manifest",
        &d("cells/manifest.csv"),
        "--out",
        &d("run"),
        "--iterations",
        "0",
        "--seed",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = RunConfig::from_str_checked(&std::fs::read_to_string(d("run/config.txt")).unwrap()).unwrap();
    let run_cfg = resolved.train_run().unwrap();
    let init = TrainState::init(&run_cfg.vit, &run_cfg.ssl, 9).unwrap();
    let ckpt = read_checkpoint(Path::new(&d("run/checkpoint.rdck"))).unwrap();
    assert_eq!(ckpt, init.teacher);
    assert_eq!(ckpt, init.student);
    assert_eq!(
        std::fs::read_to_string(d("run/loss.csv")).unwrap(),
        "iter,loss,lr,teacher_momentum\n"
    );
}
