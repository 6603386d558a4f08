mod common;

use common::spl_trials;
use proptest::prelude::*;
use vlpix::losses::{
    combine, downsample_labels, itm_loss, mlm_loss, segl_loss, spl_loss, ssul_loss, LossWeights, PseudoLabelSet,
    SegLabelMap, DEFAULT_EOS_COEF, IGNORE_LABEL,
};
use vlpix::tensor::{Tape, Tensor};
use vlpix::text::IGNORE;
use vlpix::vision::{patchify, Image};
use vlpix::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn scalar(tape: &Tape, v: vlpix::tensor::Var) -> f64 {
    tape.value(v).item()
}

fn one_hot_logits(targets: &[usize], classes: usize) -> Tensor {
    let mut data = vec![-40.0; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        data[r * classes + t] = 40.0;
    }
    Tensor::new(vec![targets.len(), classes], data).unwrap()
}

#[test]
fn mlm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 8]));
    let none = mlm_loss(&mut tape, x, &[IGNORE; 4]).unwrap();
    assert_eq!(scalar(&tape, none), 0.0);
    let uniform = mlm_loss(&mut tape, x, &[IGNORE, 3, IGNORE, 5]).unwrap();
    assert!((scalar(&tape, uniform) - 8f64.ln()).abs() < 1e-12);
    let y = tape.constant(one_hot_logits(&[1, 3, 0, 5], 8));
    let perfect = mlm_loss(&mut tape, y, &[IGNORE, 3, IGNORE, 5]).unwrap();
    assert!(scalar(&tape, perfect) < 1e-9);
}

#[test]
fn itm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2], vec![10.0, -10.0]).unwrap());
    let l = itm_loss(&mut tape, x, true).unwrap();
    assert!(scalar(&tape, l) < 1e-4);
    let z = tape.constant(Tensor::zeros(&[2]));
    let l = itm_loss(&mut tape, z, false).unwrap();
    assert!((scalar(&tape, l) - LN2).abs() < 1e-12);
}

#[test]
fn ssul_examples() {
    let img = Image::filled(8, 8, [0.5; 3]);
    let mut grid = patchify(&img, 4).unwrap();
    grid.mask[2] = true;
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[4, 3]));
    let l = ssul_loss(&mut tape, zero, &grid).unwrap();
    assert!((scalar(&tape, l) - 0.25).abs() < 1e-15);

    let exact = tape.constant(grid.mean_colors.clone());
    let l = ssul_loss(&mut tape, exact, &grid).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    // perturbing unmasked rows changes nothing
    let mut other = grid.mean_colors.clone();
    for k in [0, 1, 3] {
        other.data_mut()[k * 3] += 7.0;
    }
    let p = tape.constant(other);
    let l = ssul_loss(&mut tape, p, &grid).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);

    grid.mask[2] = false;
    let l = ssul_loss(&mut tape, zero, &grid).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
}

#[test]
fn downsample_examples() {
    let y = SegLabelMap::new(2, 2, vec![1, 1, 2, 3]).unwrap();
    assert_eq!(downsample_labels(&y, 1, 1).unwrap().data(), &[1]);
    let y = SegLabelMap::new(2, 2, vec![2, 2, 1, 1]).unwrap();
    assert_eq!(downsample_labels(&y, 1, 1).unwrap().data(), &[1]);
    let y = SegLabelMap::new(2, 2, vec![IGNORE_LABEL, 4, IGNORE_LABEL, IGNORE_LABEL]).unwrap();
    assert_eq!(downsample_labels(&y, 1, 1).unwrap().data(), &[4]);
    let y = SegLabelMap::filled(4, 4, IGNORE_LABEL);
    assert!(downsample_labels(&y, 2, 2).unwrap().data().iter().all(|&c| c == IGNORE_LABEL));
    let y = SegLabelMap::filled(12, 12, 6);
    assert!(downsample_labels(&y, 3, 3).unwrap().data().iter().all(|&c| c == 6));
    assert!(matches!(downsample_labels(&y, 5, 5), Err(Error::Geometry { .. })));
}

proptest! {
    #[test]
    fn downsampled_classes_come_from_their_block(cells in prop::collection::vec(prop_oneof![0u8..6, Just(IGNORE_LABEL)], 64)) {
        let y = SegLabelMap::new(8, 8, cells).unwrap();
        let d = downsample_labels(&y, 2, 4).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let block: Vec<u8> = (0..4).flat_map(|i| (0..2).map(move |j| (r * 4 + i, c * 2 + j))).map(|(i, j)| y.get(i, j)).collect();
                prop_assert!(block.contains(&d.get(r, c)));
            }
        }
    }
}

#[test]
fn segl_examples() {
    let y = SegLabelMap::new(2, 2, vec![0, 7, 3, 3]).unwrap();
    let mut tape = Tape::new();
    let perfect = tape.constant(one_hot_logits(&[0, 7, 3, 3], 8));
    let l = segl_loss(&mut tape, perfect, &y).unwrap();
    assert!(scalar(&tape, l) < 1e-9);
    let uniform = tape.constant(Tensor::zeros(&[4, 8]));
    let l = segl_loss(&mut tape, uniform, &y).unwrap();
    assert!((scalar(&tape, l) - 8f64.ln()).abs() < 1e-12);
    let ignored = SegLabelMap::filled(2, 2, IGNORE_LABEL);
    let l = segl_loss(&mut tape, uniform, &ignored).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let bad = SegLabelMap::new(2, 2, vec![0, 9, 0, 0]).unwrap();
    assert!(matches!(segl_loss(&mut tape, uniform, &bad), Err(Error::Index { .. })));
}

#[test]
fn spl_crosses_slots_when_cheaper() {
    // 1 real class + no-object; slot 0 predicts no-object, slot 1 the class
    let labels = PseudoLabelSet::padded(&[0], 2, 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(one_hot_logits(&[1, 0], 2));
    let out = spl_loss(&mut tape, x, &labels, DEFAULT_EOS_COEF).unwrap();
    assert_eq!(out.assignment.sigma, vec![1, 0]);
    assert!(scalar(&tape, out.loss) < 1e-3);
}

#[test]
fn spl_uniform_predictions() {
    for count in 0..=4 {
        let raw: Vec<usize> = (0..count).collect();
        let labels = PseudoLabelSet::padded(&raw, 4, 8).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 9]));
        let out = spl_loss(&mut tape, x, &labels, DEFAULT_EOS_COEF).unwrap();
        assert!((scalar(&tape, out.loss) - 9f64.ln()).abs() < 1e-12);
    }
    assert!(matches!(PseudoLabelSet::padded(&[10], 4, 8), Err(Error::Index { .. })));
}

#[test]
fn spl_permutation_invariance_and_optimality() {
    for n in [4, 36] {
        let s = spl_trials(n, 100, 31);
        assert!(s.max_permutation_deviation <= 1e-12, "N={n}: {}", s.max_permutation_deviation);
        assert_eq!(s.beaten, 0, "N={n}");
    }
}

#[test]
fn combine_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let b = tape.constant(Tensor::scalar(0.25));
    let c = tape.constant(Tensor::scalar(0.25));
    let (total, bundle) = combine(&mut tape, a, b, Some(c), LossWeights::default()).unwrap();
    assert_eq!(scalar(&tape, total), 1.0);
    assert_eq!(bundle.total, 1.0);
    let (_, bundle) = combine(&mut tape, a, b, None, LossWeights::default()).unwrap();
    assert_eq!(bundle.visual, 0.0);
    assert_eq!(bundle.total, 0.75);
    let w = LossWeights {
        visual: -1.0,
        ..Default::default()
    };
    assert!(matches!(combine(&mut tape, a, b, Some(c), w), Err(Error::Config(_))));
}

#[test]
fn zero_visual_weight_blocks_visual_gradient() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.5));
    let b = tape.constant(Tensor::scalar(0.25));
    let head = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.0, -0.5]).unwrap(), true);
    let y = SegLabelMap::new(1, 2, vec![1, 2]).unwrap();
    let v = segl_loss(&mut tape, head, &y).unwrap();
    let w = LossWeights {
        visual: 0.0,
        ..Default::default()
    };
    let (total, _) = combine(&mut tape, a, b, Some(v), w).unwrap();
    tape.backward(total).unwrap();
    assert!(tape.grad(head).unwrap().iter().all(|&g| g == 0.0));
}
