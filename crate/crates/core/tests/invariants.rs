use proptest::prelude::*;

use sassl_core::adversary::{loss_d, loss_g_adv, relation_matrix};
use sassl_core::nn::{standardize_columns, ParamSet};
use sassl_core::rng::Rng;
use sassl_core::ssl::{
    cosine_regression_loss, info_nce_loss, momentum_update, simsiam_loss, NegativeQueue,
};
use sassl_core::synth::{augment_view, make_slide, render_patch, AugmentConfig, RenderConfig};
use sassl_core::{Tape, Tensor};

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / norm));
    }
    Tensor::new(&[n, d], data).unwrap()
}

fn vector(rng: &mut Rng, d: usize) -> Tensor {
    Tensor::new(&[d], (0..d).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #[test]
    fn info_nce_is_non_negative(seed in any::<u64>(), k in 1usize..16, tau in 0.05f64..2.0) {
        let mut rng = Rng::new(seed);
        let mut tape = Tape::new();
        let a = tape.variable(unit_rows(&mut rng, 1, 6)).unwrap();
        let p = tape.variable(unit_rows(&mut rng, 1, 6)).unwrap();
        let negs = unit_rows(&mut rng, k, 6);
        let l = info_nce_loss(&mut tape, a, p, &negs, tau).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn info_nce_equal_similarities(seed in any::<u64>(), k in 1usize..64) {
        // every negative equals the positive, so all logits coincide
        let mut rng = Rng::new(seed);
        let p = unit_rows(&mut rng, 1, 5);
        let negs = Tensor::from_rows(&vec![p.data().to_vec(); k]).unwrap();
        let mut tape = Tape::new();
        let a = tape.variable(unit_rows(&mut rng, 1, 5)).unwrap();
        let pv = tape.constant(p).unwrap();
        let l = info_nce_loss(&mut tape, a, pv, &negs, 0.2).unwrap();
        prop_assert!((tape.value(l).item() - ((k + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_range_and_scale(seed in any::<u64>(), c1 in 0.01f64..100.0, c2 in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let x = vector(&mut rng, 7);
        let y = vector(&mut rng, 7);
        let mut tape = Tape::new();
        let xv = tape.variable(x.clone()).unwrap();
        let yv = tape.variable(y.clone()).unwrap();
        let l = cosine_regression_loss(&mut tape, xv, yv).unwrap();
        let base = tape.value(l).item();
        prop_assert!((0.0..=2.0).contains(&base));
        let xs = tape.scale(xv, c1).unwrap();
        let ys = tape.scale(yv, c2).unwrap();
        let l2 = cosine_regression_loss(&mut tape, xs, ys).unwrap();
        prop_assert!((tape.value(l2).item() - base).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_blocks_the_target_slot(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut tape = Tape::new();
        let z1 = tape.variable(unit_rows(&mut rng, 3, 4)).unwrap();
        let z2 = tape.variable(unit_rows(&mut rng, 3, 4)).unwrap();
        let p1 = tape.variable(unit_rows(&mut rng, 3, 4)).unwrap();
        let p2 = tape.variable(unit_rows(&mut rng, 3, 4)).unwrap();
        // z1 and z2 only appear in the detached slots
        let l = simsiam_loss(&mut tape, z1, z2, p1, p2).unwrap();
        let g = tape.backward(l).unwrap();
        prop_assert!(g.get(z1).data().iter().all(|&v| v == 0.0));
        prop_assert!(g.get(z2).data().iter().all(|&v| v == 0.0));
        prop_assert!(g.reached(p1) && g.reached(p2));
    }

    #[test]
    fn momentum_contracts_geometrically(seed in any::<u64>(), m in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let mut online = ParamSet::new();
        online.push("w", vector(&mut rng, 5));
        let mut target = ParamSet::new();
        target.push("w", vector(&mut rng, 5));
        let gap = |t: &ParamSet| -> Vec<f64> {
            t.get(0).value.data().iter().zip(online.get(0).value.data()).map(|(a, b)| a - b).collect()
        };
        for _ in 0..5 {
            let before = gap(&target);
            momentum_update(&online, &mut target, m).unwrap();
            for (after, b) in gap(&target).iter().zip(&before) {
                prop_assert!((after - m * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn queue_stays_bounded_and_normalized(seed in any::<u64>(), cap in 1usize..10, pushes in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut q = NegativeQueue::new(cap, 3).unwrap();
        for _ in 0..pushes {
            let n = 1 + rng.below(4);
            q.push(&unit_rows(&mut rng, n, 3)).unwrap();
            prop_assert!(q.len() <= cap);
        }
        let snap = q.snapshot().unwrap();
        for row in snap.data().chunks(3) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_matrix_is_symmetric(ids in prop::collection::vec(0u32..4, 2..12)) {
        let r = relation_matrix(&ids).unwrap();
        let n = ids.len();
        for i in 0..n {
            prop_assert_eq!(r.data()[i * n + i], 1.0);
            for j in 0..n {
                prop_assert_eq!(r.data()[i * n + j], r.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn adversarial_losses_are_bounded(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = Rng::new(seed);
        let mut ids: Vec<u32> = (0..n).map(|_| rng.below(3) as u32).collect();
        ids[0] = 0;
        ids[1] = 1;
        let r = relation_matrix(&ids).unwrap();
        let a = Tensor::new(&[n, n], (0..n * n).map(|_| rng.unit()).collect()).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a).unwrap();
        let ld = loss_d(&mut tape, av, &r).unwrap();
        let lg = loss_g_adv(&mut tape, av).unwrap();
        prop_assert!((-1.0..=1.0).contains(&tape.value(ld).item()));
        prop_assert!((-1.0..=0.0).contains(&tape.value(lg).item()));
    }

    #[test]
    fn standardized_columns_have_unit_variance(seed in any::<u64>(), n in 2usize..10, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(&[n, d], (0..n * d).map(|_| rng.normal() * 3.0 + 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let s = standardize_columns(&mut tape, xv).unwrap();
        let v = tape.value(s);
        for c in 0..d {
            let col: Vec<f64> = (0..n).map(|r| v.data()[r * d + c]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_views_stay_in_range(seed in any::<u64>(), jitter in 0.0f64..0.5) {
        let slide = make_slide(seed as u32 % 7, seed, 0.4).unwrap();
        let patch = render_patch(&slide, seed ^ 1, (seed % 2) as usize, &RenderConfig::default()).unwrap();
        let cfg = AugmentConfig { jitter, ..AugmentConfig::default() };
        let v = augment_view(&patch, &cfg, seed).unwrap();
        prop_assert_eq!(v.shape(), &[3, cfg.crop, cfg.crop]);
        prop_assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::scalar(1e100)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let z = tape.mul(y, y);
    assert!(matches!(z, Err(sassl_core::Error::NonFinite(_))));
}
