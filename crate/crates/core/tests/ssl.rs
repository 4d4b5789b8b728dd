use dino_rbc::params::ParamSet;
use dino_rbc::ssl::{self, teacher_targets_ema, teacher_targets_sinkhorn, CenteringMode, CenteringState};
use dino_rbc::tensor::{Tape, Tensor};
use dino_rbc::train::ema_update;
use proptest::prelude::*;

fn matrix(b: usize, k: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-1.0f64..1.0, b * k).prop_map(move |d| Tensor::new(vec![b, k], d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor<f64>> {
    (2usize..24, 2usize..24).prop_flat_map(|(b, k)| matrix(b, k))
}

fn col_sums(q: &Tensor<f64>) -> Vec<f64> {
    let k = q.shape()[1];
    let mut s = vec![0.0; k];
    for row in q.data().chunks(k) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

fn rotate(rows: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
    // rotation in the plane of the first two coordinates
    let (s, c) = angle.sin_cos();
    rows.iter()
        .map(|r| {
            let mut o = r.clone();
            o[0] = c * r[0] - s * r[1];
            o[1] = s * r[0] + c * r[1];
            o
        })
        .collect()
}

fn koleo_value(rows: &[Vec<f64>]) -> f64 {
    let d = rows[0].len();
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
    let v = ssl::koleo(&mut tape, z, 1e-8).unwrap();
    tape.value(v).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_rows_are_distributions(logits in sized_matrix(), iters in 1usize..12, tau in prop_oneof![Just(0.04), 0.05f64..2.0]) {
        let q = teacher_targets_sinkhorn(&logits, tau, iters).unwrap();
        let k = q.shape()[1];
        for row in q.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sinkhorn_columns_balance_with_iterations(logits in sized_matrix(), tau in 0.25f64..2.0) {
        // |logit / tau| <= 4; far sharper inputs need more than 50 rounds
        let (b, k) = (logits.shape()[0] as f64, logits.shape()[1] as f64);
        let q = teacher_targets_sinkhorn(&logits, tau, 50).unwrap();
        for s in col_sums(&q) {
            prop_assert!((s - b / k).abs() < 1e-3, "column sum {} vs {}", s, b / k);
        }
        let dev = |it| {
            col_sums(&teacher_targets_sinkhorn(&logits, tau, it).unwrap())
                .iter()
                .map(|s| (s - b / k).abs())
                .fold(0.0, f64::max)
        };
        prop_assert!(dev(50) <= dev(1) + 1e-12);
    }

    #[test]
    fn sinkhorn_is_shift_invariant(logits in sized_matrix(), c in -50.0f64..50.0, iters in 1usize..6) {
        let shifted = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|v| v + c).collect()).unwrap();
        let a = teacher_targets_sinkhorn(&logits, 0.04, iters).unwrap();
        let b = teacher_targets_sinkhorn(&shifted, 0.04, iters).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn sinkhorn_uniform_logits_are_a_fixed_point(b in 1usize..20, k in 1usize..20, v in -5.0f64..5.0, iters in 1usize..60) {
        let q = teacher_targets_sinkhorn(&Tensor::<f32>::full(vec![b, k], v as f32), 0.04, iters).unwrap();
        prop_assert!(q.data().iter().all(|&p| p == 1.0 / k as f32));
        let q = teacher_targets_sinkhorn(&Tensor::<f64>::full(vec![b, k], v), 0.04, iters).unwrap();
        prop_assert!(q.data().iter().all(|&p| p == 1.0 / k as f64));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in sized_matrix(), c in -20.0f64..20.0) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(logits.clone());
        let shifted = tape.add_scalar(a, c);
        let p = tape.softmax(a, 1, 1.0).unwrap();
        let q = tape.softmax(shifted, 1, 1.0).unwrap();
        for (x, y) in tape.value(p).data().iter().zip(tape.value(q).data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn koleo_invariant_to_scale_and_rotation(
        rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 3..10),
        s in 0.01f64..100.0,
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let base = koleo_value(&rows);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        prop_assert!((koleo_value(&scaled) - base).abs() <= 1e-9 * base.abs().max(1.0));
        prop_assert!((koleo_value(&rotate(&rows, angle)) - base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn teacher_update_is_a_convex_combination(
        pairs in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..40),
        m in 0.0f64..=1.0,
    ) {
        let mut teacher = ParamSet::new();
        let mut student = ParamSet::new();
        let n = pairs.len();
        teacher.insert("w", Tensor::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap());
        student.insert("w", Tensor::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap());
        ema_update(&mut teacher, &student, m).unwrap();
        for (v, &(t, s)) in teacher.get("w").unwrap().data().iter().zip(&pairs) {
            prop_assert!(*v >= t.min(s) && *v <= t.max(s));
            let exact = m * t as f64 + (1.0 - m) * s as f64;
            prop_assert!((*v as f64 - exact).abs() <= 1e-5 * exact.abs().max(1.0));
        }
    }
}

#[test]
fn sinkhorn_three_round_example() {
    let logits = Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
    let q = teacher_targets_sinkhorn(&logits, 1.0, 3).unwrap();
    // naive replay of three column/row rounds
    let e = (-10.0f64).exp();
    let mut m = [[1.0, e], [e, 1.0]];
    for _ in 0..3 {
        let [r0, r1] = &mut m;
        for (a, b) in r0.iter_mut().zip(r1.iter_mut()) {
            let s = *a + *b;
            *a /= s;
            *b /= s;
        }
        for row in &mut m {
            let s = row[0] + row[1];
            row[0] /= s;
            row[1] /= s;
        }
    }
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((q.get(&[r, c]) - v).abs() < 1e-12);
        }
    }
    assert!((q.get(&[0, 0]) - 1.0).abs() < 1e-4 && q.get(&[0, 1]) < 1e-4);
    let cs = col_sums(&q);
    assert!((cs[0] - 1.0).abs() < 1e-4 && (cs[1] - 1.0).abs() < 1e-4);
}

#[test]
fn ema_center_examples() {
    let logits = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
    let state = CenteringState::<f64>::new(CenteringMode::Ema, 3);
    let (_, next) = teacher_targets_ema(&logits, &state, 0.04, 0.9).unwrap();
    let c = next.center.unwrap();
    for v in c.data() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let flat = Tensor::full(vec![4, 5], 0.3);
    let (p, _) = teacher_targets_ema(&flat, &state_for(5), 0.04, 0.9).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

fn state_for(k: usize) -> CenteringState<f64> {
    CenteringState::new(CenteringMode::Ema, k)
}

#[test]
fn koleo_antipodal_and_duplicates() {
    assert!((koleo_value(&[vec![1.0, 0.0], vec![-1.0, 0.0]]) + 2f64.ln()).abs() < 1e-6);
    let dup = koleo_value(&[vec![0.3, 0.4], vec![0.3, 0.4]]);
    assert!(dup.is_finite() && (dup + 1e-8f64.ln()).abs() < 1e-3);
}
