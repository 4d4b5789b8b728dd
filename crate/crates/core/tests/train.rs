use dino_rbc::data::{CropSpec, FloatImage, RgbImage};
use dino_rbc::rng::stream;
use dino_rbc::ssl::{CenteringMode, SslConfig};
use dino_rbc::tensor::Tensor;
use dino_rbc::train::*;
use dino_rbc::vit::VitConfig;
use rand::Rng as _;

fn run(iterations: usize) -> TrainRun {
    TrainRun {
        vit: VitConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        },
        ssl: SslConfig {
            prototypes: 8,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            ..SslConfig::default()
        },
        train: TrainConfig {
            iterations,
            batch_size: 4,
            warmup_iters: iterations / 5,
            ..TrainConfig::default()
        },
        crop: CropSpec {
            global_size: 16,
            ..CropSpec::default()
        },
    }
}

fn data(n: usize) -> Vec<FloatImage> {
    let mut rng = stream(77, &[]);
    (0..n)
        .map(|_| {
            let px = (0..20 * 20 * 3).map(|_| rng.random_range(0..=255u8)).collect();
            RgbImage::new(20, 20, px).unwrap().to_float()
        })
        .collect()
}

fn train(run: &TrainRun, data: &[FloatImage]) -> TrainState {
    let mut st = TrainState::init(&run.vit, &run.ssl, run.train.seed).unwrap();
    train_loop(&mut st, data, run, |_, _| Ok(())).unwrap();
    st
}

fn loss_bits(st: &TrainState) -> Vec<u32> {
    st.history.iter().map(|r| r.loss.to_bits()).collect()
}

#[test]
fn same_seed_same_history() {
    let (r, d) = (run(10), data(6));
    let a = train(&r, &d);
    let b = train(&r, &d);
    assert_eq!(a.history.len(), 10);
    assert_eq!(loss_bits(&a), loss_bits(&b));
    assert_eq!(a, b);
    let other = TrainRun {
        train: TrainConfig {
            seed: 1,
            ..r.train.clone()
        },
        ..r.clone()
    };
    assert_ne!(loss_bits(&train(&other, &d)), loss_bits(&a));
}

#[test]
fn prefetch_thread_gives_identical_results() {
    let (mut r, d) = (run(6), data(6));
    let a = train(&r, &d);
    r.train.deterministic = false;
    assert_eq!(train(&r, &d), a);
}

#[test]
fn every_centering_mode_trains() {
    for mode in [CenteringMode::Sinkhorn, CenteringMode::Ema, CenteringMode::None] {
        let mut r = run(4);
        r.ssl.centering = mode;
        let st = train(&r, &data(5));
        assert_eq!(st.centering.center.is_some(), mode == CenteringMode::Ema);
        assert!(st.history.iter().all(|h| h.loss.is_finite()));
    }
}

#[test]
fn frozen_teacher_when_momentum_is_one() {
    let mut r = run(5);
    r.train.momentum_start = 1.0;
    r.train.momentum_end = 1.0;
    let d = data(6);
    let probe = Tensor::new(vec![1, 16, 16, 3], d[0].resize(16, 16).data.clone()).unwrap();
    let mut st = TrainState::init(&r.vit, &r.ssl, 0).unwrap();
    let first = st.teacher.embed(&probe).unwrap();
    let init_head = st.teacher_head.clone();
    train_loop(&mut st, &d, &r, |s, _| {
        assert_eq!(s.teacher.embed(&probe).unwrap(), first);
        Ok(())
    })
    .unwrap();
    assert_eq!(st.teacher_head, init_head);
    assert_ne!(st.student.params, st.teacher.params);
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let mut r = run(0);
    r.train.warmup_iters = 0;
    let st = train(&r, &data(3));
    assert_eq!(st, TrainState::init(&r.vit, &r.ssl, 0).unwrap());
    assert!(st.history.is_empty());
}

#[test]
fn resume_matches_straight_run() {
    let (r, d) = (run(12), data(6));
    let dir = tempfile::tempdir().unwrap();
    let mid = dir.path().join("mid.rdck");
    let mut straight = TrainState::init(&r.vit, &r.ssl, 0).unwrap();
    let mut snapshot = None;
    train_loop(&mut straight, &d, &r, |s, _| {
        if s.iteration == 5 {
            s.save(&mid)?;
            snapshot = Some(s.clone());
        }
        Ok(())
    })
    .unwrap();
    let mut resumed = TrainState::load(&mid, &r).unwrap();
    assert_eq!(Some(&resumed), snapshot.as_ref());
    train_loop(&mut resumed, &d, &r, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);

    // same with teacher centering state carried in the file
    let mut ema = r.clone();
    ema.ssl.centering = CenteringMode::Ema;
    let mut straight = TrainState::init(&ema.vit, &ema.ssl, 0).unwrap();
    train_loop(&mut straight, &d, &ema, |s, _| {
        if s.iteration == 7 {
            s.save(&mid)?;
        }
        Ok(())
    })
    .unwrap();
    let mut resumed = TrainState::load(&mid, &ema).unwrap();
    train_loop(&mut resumed, &d, &ema, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn loss_goes_down_on_a_short_run() {
    // smaller sibling of the desk-scale check in the acceptance suite
    let (r, d) = (run(120), data(12));
    let st = train(&r, &d);
    let mean = |s: &[LossRecord]| s.iter().map(|x| x.loss as f64).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&st.history[..20]), mean(&st.history[100..]));
    assert!(last < first, "first {first} last {last}");
}
