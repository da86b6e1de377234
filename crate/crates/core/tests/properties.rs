use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::autodiff::{Tape, Var};
use tta_core::tta::{pcl_perturb, PclConfig};
use tta_core::Tensor;

fn simplex_rows(rows: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        // exponentials of a wide uniform give both peaked and flat rows
        let w: Vec<f64> = (0..c)
            .map(|_| rng.random_range(-6.0f64..6.0).exp())
            .collect();
        let s: f64 = w.iter().sum();
        data.extend(w.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, c], data).unwrap()
}

fn rows_of(tape: &mut Tape, f: impl FnOnce(&mut Tape) -> Var) -> Vec<f64> {
    let v = f(tape);
    tape.value(v).unwrap().data().to_vec()
}

#[test]
fn kl_equals_cross_entropy_minus_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for c in [2, 10, 50] {
        let n = 1000;
        let pp = simplex_rows(n, c, &mut rng);
        let p = simplex_rows(n, c, &mut rng);
        let mut tape = Tape::new();
        let ppv = tape.constant(pp);
        let pv = tape.constant(p);
        let kl = rows_of(&mut tape, |t| t.kl_div(ppv, pv).unwrap());
        let ce = rows_of(&mut tape, |t| t.cross_entropy(ppv, pv).unwrap());
        let h = rows_of(&mut tape, |t| t.entropy(ppv).unwrap());
        for i in 0..n {
            let gap = (kl[i] - (ce[i] - h[i])).abs();
            assert!(gap < 1e-10, "C={c} row {i}: {gap:e}");
        }
    }
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[n], 1.0));
    let y = tape.dropout(x, 0.3, &mut rng, true).unwrap();
    let mean = tape.value(y).unwrap().data().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn noise_only_perturbation_is_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::new(
        vec![1000, 100],
        (0..100_000).map(|i| (i % 17) as f64 - 8.0).collect(),
    )
    .unwrap();
    let cfg = PclConfig {
        use_dropout: false,
        ..PclConfig::default()
    };
    let out = pcl_perturb(&h, &cfg, &mut rng).unwrap();
    let d: Vec<f64> = out
        .data()
        .iter()
        .zip(h.data())
        .map(|(a, b)| a - b)
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn dropout_only_perturbation_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let cfg = PclConfig {
        use_noise: false,
        ..PclConfig::default()
    };
    let draws = 100_000;
    let mut acc = [0.0; 4];
    for _ in 0..draws {
        let out = pcl_perturb(&h, &cfg, &mut rng).unwrap();
        for (a, v) in acc.iter_mut().zip(out.data()) {
            *a += v;
        }
    }
    for (a, want) in acc.iter().zip(h.data()) {
        let mean = a / draws as f64;
        // std of one draw is |h|·sqrt(p/(1−p)); allow five standard errors
        let se = want.abs() * (0.3f64 / 0.7).sqrt() / (draws as f64).sqrt();
        assert!((mean - want).abs() < 5.0 * se, "mean {mean} vs {want}");
    }
}

fn logits_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..12).prop_flat_map(|(rows, c)| {
        (
            Just(rows),
            Just(c),
            proptest::collection::vec(-30.0f64..30.0, rows * c),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((rows, c, z) in logits_strategy()) {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![rows, c], z).unwrap());
        let p = tape.softmax(zv).unwrap();
        for r in tape.value(p).unwrap().data().chunks(c) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_c((rows, c, z) in logits_strategy()) {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![rows, c], z).unwrap());
        let p = tape.softmax(zv).unwrap();
        let h = tape.entropy(p).unwrap();
        for &v in tape.value(h).unwrap().data() {
            prop_assert!(v >= -1e-12 && v <= (c as f64).ln() + 1e-12, "H = {v}");
        }
    }

    #[test]
    fn kl_is_non_negative(
        (rows, c, a) in logits_strategy(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..rows * c).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(vec![rows, c], a).unwrap());
        let bv = tape.constant(Tensor::new(vec![rows, c], b).unwrap());
        let pa = tape.softmax(av).unwrap();
        let pb = tape.softmax(bv).unwrap();
        let kl = tape.kl_div(pa, pb).unwrap();
        for &v in tape.value(kl).unwrap().data() {
            prop_assert!(v >= -1e-12, "KL = {v}");
        }
    }
}
