mod common;

use proptest::prelude::*;
use rand::Rng;
use smaformer::gradcheck::{grad_check, DEFAULT_STEP};
use smaformer::loss::{bce_dice_value, DICE_EPS, PROB_CLAMP};
use smaformer::metrics::{counts, dsc, iou, miou, rows_to_csv, MetricRow, MultiClassMasks};
use smaformer::{Error, Tape, Tensor};

fn loss(p: &[f64], y: &[f64], rows: usize, cols: usize) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::new(&[rows, cols], p.to_vec()).unwrap());
    let target = Tensor::new(&[rows, cols], y.to_vec()).unwrap();
    let l = tape.bce_dice(pv, &target, DICE_EPS).unwrap();
    tape.value(l).data()[0]
}

fn bits(v: u32, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((v >> i) & 1) as u8).collect()
}

// --------------------------------------------------------------- loss

#[test]
fn perfect_prediction_costs_almost_nothing() {
    let ones = vec![1.0; 64];
    let l = loss(&ones, &ones, 1, 64);
    assert!((0.0..=2e-7).contains(&l), "{l:e}");
    let floor = -(1.0f64 - PROB_CLAMP).ln();
    assert!(l >= floor);
}

#[test]
fn half_confidence_on_a_full_mask() {
    let l = loss(&[0.5; 4], &[1.0; 4], 1, 4);
    let dice = 1.0 - 4.0 / (6.0 + DICE_EPS);
    assert!((dice - 1.0 / 3.0).abs() < 1e-6);
    assert!((l - (dice + std::f64::consts::LN_2)).abs() < 1e-12);
    assert!((l - 1.0265).abs() < 1e-3);
}

#[test]
fn loss_matches_direct_definition() {
    let mut rng = common::rng(1);
    for rows in 1..4 {
        let cols = 10;
        let p: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let want = common::bce_dice(&p, &y, rows, cols, DICE_EPS);
        assert!((loss(&p, &y, rows, cols) - want).abs() < 1e-12);
        assert!((bce_dice_value(&p, &y, rows, cols, DICE_EPS) - want).abs() < 1e-12);
    }
}

#[test]
fn extreme_probabilities_are_clamped() {
    let l = loss(&[0.0, 1.0, 0.0, 1.0], &[1.0, 0.0, 1.0, 0.0], 1, 4);
    assert!(l.is_finite());
    let want = common::bce_dice(&[0.0, 1.0, 0.0, 1.0], &[1.0, 0.0, 1.0, 0.0], 1, 4, DICE_EPS);
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = common::rng(2);
    for _ in 0..5 {
        let (rows, cols) = (2, 16);
        let p: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.05..0.95)).collect();
        let y: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let target = Tensor::new(&[rows, cols], y).unwrap();
        let err = grad_check(
            |t, pv| t.bce_dice(pv, &target, DICE_EPS),
            &Tensor::new(&[rows, cols], p).unwrap(),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err:e}");
    }
}

#[test]
fn loss_is_minimized_at_the_target() {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for ymask in 0..16u32 {
        let y: Vec<f64> = bits(ymask, 4).into_iter().map(f64::from).collect();
        let at_target = loss(&y, &y, 1, 4);
        for combo in 0..625usize {
            let p: Vec<f64> = (0..4).map(|i| grid[combo / 5usize.pow(i) % 5]).collect();
            let l = loss(&p, &y, 1, 4);
            assert!(l >= -1e-12);
            assert!(at_target <= l + 1e-12, "y={y:?} p={p:?}: {at_target} > {l}");
        }
    }
}

#[test]
fn loss_rejects_bad_targets() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::full(&[1, 4], 0.5));
    let err = tape.bce_dice(p, &Tensor::new(&[1, 4], vec![0.0, 0.5, 1.0, 1.0]).unwrap(), DICE_EPS);
    assert!(matches!(err, Err(Error::Contract(_))));
    let err = tape.bce_dice(p, &Tensor::zeros(&[2, 2]), DICE_EPS);
    assert!(matches!(err, Err(Error::Shape { .. })));
}

// ------------------------------------------------------------ metrics

#[test]
fn dsc_examples() {
    assert_eq!(dsc(&[1, 1, 0, 1], &[1, 1, 0, 1]).unwrap(), 1.0);
    assert_eq!(dsc(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    let p = [1, 1, 1, 1, 0, 0, 0, 0];
    let g = [0, 0, 1, 1, 1, 1, 0, 0];
    assert_eq!(dsc(&p, &g).unwrap(), 0.5);
    assert_eq!(dsc(&[0; 9], &[0; 9]).unwrap(), 1.0);
    assert_eq!(iou(&[0; 9], &[0; 9]).unwrap(), 1.0);
}

#[test]
fn metrics_reject_invalid_masks() {
    assert!(dsc(&[0, 2], &[0, 1]).is_err());
    assert!(dsc(&[0, 1, 1], &[0, 1]).is_err());
    assert!(MultiClassMasks::new(vec![vec![1, 0]], vec![vec![1, 0], vec![0, 1]]).is_err());
    assert!(MultiClassMasks::new(vec![vec![1, 0], vec![1, 0]], vec![vec![1, 0], vec![1, 0]]).is_err());
}

#[test]
fn miou_examples() {
    let labels = [0u8, 1, 2, 2, 1, 0, 0, 2, 1];
    let perfect = MultiClassMasks::from_labels(&labels, &labels, &[0, 1, 2]).unwrap();
    assert_eq!(miou(&perfect), 1.0);

    let half = MultiClassMasks::new(vec![vec![1, 1, 0, 0], vec![1, 1, 0, 0]], vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]]).unwrap();
    assert_eq!(miou(&half), 0.5);

    let (p, g) = (vec![1, 1, 0, 1, 0], vec![0, 1, 1, 1, 0]);
    let single = MultiClassMasks::new(vec![p.clone()], vec![g.clone()]).unwrap();
    assert_eq!(miou(&single), iou(&p, &g).unwrap());
}

#[test]
fn counting_oracle_examples() {
    assert_eq!(common::confusion_counts_oracle(&[0; 16], &[0; 16], 4, 4), (0, 0, 0));
    let board: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
    let inverse: Vec<u8> = board.iter().map(|v| 1 - v).collect();
    assert_eq!(common::confusion_counts_oracle(&board, &inverse, 4, 4), (0, 8, 8));
    let c = counts(&board, &inverse).unwrap();
    assert_eq!((c.intersection, c.pred, c.truth), (0, 8, 8));
}

#[test]
fn dsc_agrees_with_counting_oracle() {
    let mut rng = common::rng(3);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let density = rng.random_range(0.0..1.0);
        let mut draw = || -> Vec<u8> { (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect() };
        let (p, g) = (draw(), draw());
        let (inter, np, ng) = common::confusion_counts_oracle(&p, &g, h, w);
        let want = if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 };
        assert!((dsc(&p, &g).unwrap() - want).abs() <= 1e-15);
    }
}

#[test]
fn exhaustive_three_by_three_properties() {
    let masks: Vec<Vec<u8>> = (0..512).map(|v| bits(v, 9)).collect();
    for p in &masks {
        for g in &masks {
            let (d, j) = (dsc(p, g).unwrap(), iou(p, g).unwrap());
            assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
            assert_eq!(d, dsc(g, p).unwrap());
            assert_eq!(j, iou(g, p).unwrap());
            if counts(p, g).unwrap().union() > 0 {
                assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-15);
            }
        }
    }
}

proptest! {
    #![proptest_config(common::cases(128))]

    #[test]
    fn miou_is_bounded_and_symmetric(seed in 0u64..100_000, n in 1usize..40) {
        let mut rng = common::rng(seed);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..3u8)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..3u8)).collect();
        let ab = miou(&MultiClassMasks::from_labels(&a, &b, &[0, 1, 2]).unwrap());
        let ba = miou(&MultiClassMasks::from_labels(&b, &a, &[0, 1, 2]).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
    }
}

#[test]
fn metric_rows_serialize_as_csv() {
    let rows = [
        MetricRow {
            sample_id: "s0".into(),
            class_id: "1".into(),
            dsc: 0.5,
            iou: 1.0 / 3.0,
        },
        MetricRow {
            sample_id: "s0".into(),
            class_id: "avg".into(),
            dsc: 1.0,
            iou: 1.0,
        },
    ];
    assert_eq!(
        rows_to_csv(&rows),
        "sample_id,class_id,dsc,iou\ns0,1,0.500000,0.333333\ns0,avg,1.000000,1.000000\n"
    );
}
