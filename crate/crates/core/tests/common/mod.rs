//! Measurement helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};
use vlpix::model::{LossMode, ModelConfig};
use vlpix::seed::{self, stream};
use vlpix::synth::{gen_record, SampleRecord, SynthConfig};
use vlpix::text::{apply_mlm_mask, Vocabulary, IGNORE, MASK, MLM_RATIO, PAD};
use vlpix::train::{Dataset, TrainConfig, Trainer};
use vlpix::vision::{flip_if_safe, mask_patches, patchify, Image, KeywordSet, PATCH_MASK_RATIO};

pub fn records(seed: u64, n: usize, image_size: usize) -> Vec<SampleRecord> {
    let cfg = SynthConfig {
        image_size,
        ..Default::default()
    };
    (0..n).map(|i| gen_record(seed, i, &cfg).1).collect()
}

/// Small model for fast end-to-end runs on 24×24 images.
pub fn small_model(mode: LossMode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_lang_layers: 1,
        n_vis_layers: 1,
        n_cross_layers: 1,
        n_decoder_layers: 1,
        patch_size: 8,
        n_queries: 4,
        ffn_dim: 32,
        loss_mode: mode,
        ..Default::default()
    }
}

#[derive(Debug, Default)]
pub struct MlmStats {
    pub positions: usize,
    pub selected: usize,
    pub masked: usize,
    pub zeroed: usize,
    /// Selection indicator of every eligible position, in draw order.
    pub draws: Vec<bool>,
    pub restored_exactly: bool,
}

/// Corrupt synthetic captions until at least `min_positions` eligible
/// positions have been seen.
pub fn mlm_stats(min_positions: usize, seed: u64) -> MlmStats {
    let pool = records(seed, 500, 16);
    let captions: Vec<&str> = pool.iter().map(|r| r.caption.as_str()).collect();
    let vocab = Vocabulary::build(&captions).unwrap();
    let mut s = MlmStats {
        restored_exactly: true,
        ..Default::default()
    };
    let mut i = 0u64;
    while s.positions < min_positions {
        let seq = vocab.encode(captions[i as usize % captions.len()], 32).unwrap();
        let mut rng = seed::rng(seed, &[stream::MLM, i]);
        let out = apply_mlm_mask(&seq, MLM_RATIO, &mut rng);
        s.restored_exactly &= out.restore() == seq.ids;
        for p in seq.content_range() {
            let sel = out.mlm_labels[p] != IGNORE;
            s.positions += 1;
            s.draws.push(sel);
            if sel {
                s.selected += 1;
                s.masked += (out.ids[p] == MASK) as usize;
                s.zeroed += (out.ids[p] == PAD) as usize;
            }
        }
        i += 1;
    }
    s
}

/// Pearson chi-square of per-block success counts against Binomial(n, p),
/// with tail bins pooled until each expected count is at least 5. Returns
/// (statistic, critical value at `alpha`).
pub fn binomial_chi_square(draws: &[bool], n: u64, p: f64, alpha: f64) -> (f64, f64) {
    let blocks: Vec<usize> = draws.chunks_exact(n as usize).map(|b| b.iter().filter(|&&x| x).count()).collect();
    let total = blocks.len() as f64;
    let mut observed = vec![0.0; n as usize + 1];
    for &k in &blocks {
        observed[k] += 1.0;
    }
    let dist = Binomial::new(p, n).unwrap();
    let expected: Vec<f64> = (0..=n).map(|k| total * dist.pmf(k)).collect();
    pooled_chi_square(&observed, &expected, alpha)
}

/// Pearson statistic after merging adjacent bins whose expected count is
/// below 5.
pub fn pooled_chi_square(observed: &[f64], expected: &[f64], alpha: f64) -> (f64, f64) {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&ob, &ex) in observed.iter().zip(expected) {
        o += ob;
        e += ex;
        if e >= 5.0 {
            bins.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += o;
        last.1 += e;
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = (bins.len() - 1) as f64;
    let critical = ChiSquared::new(df).unwrap().inverse_cdf(1.0 - alpha);
    (stat, critical)
}

/// Fraction of masked patches over `grids` seeded 12×12 grids.
pub fn patch_mask_rate(grids: usize, seed: u64) -> f64 {
    let grid = patchify(&Image::filled(96, 96, [0.5; 3]), 8).unwrap();
    let mut masked = 0;
    for i in 0..grids {
        let mut rng = seed::rng(seed, &[stream::PATCH_MASK, i as u64]);
        masked += mask_patches(&grid, PATCH_MASK_RATIO, &mut rng).unwrap().masked_count();
    }
    masked as f64 / (grids * grid.len()) as f64
}

/// Fraction of mismatched pairs the trainer draws over `pairs` samples.
pub fn negative_rate(pairs: usize, seed: u64) -> f64 {
    let data = Dataset::new(records(seed, 100, 16)).unwrap();
    let mut cfg = TrainConfig::new(seed);
    cfg.model = data
        .model_config(&ModelConfig {
            patch_size: 8,
            ..small_model(LossMode::None)
        })
        .unwrap();
    cfg.batch_size = 100;
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    let mut negatives = 0;
    let mut seen = 0;
    let mut step = 0;
    while seen < pairs {
        for ex in trainer.batch_examples(step).unwrap() {
            negatives += (!ex.is_match) as usize;
            seen += 1;
        }
        step += 1;
    }
    negatives as f64 / seen as f64
}

#[derive(Debug, Default)]
pub struct FlipStats {
    pub keyword_draws: usize,
    pub keyword_flips: usize,
    pub plain_draws: usize,
    pub plain_flips: usize,
}

/// Seeded flip decisions on synthetic records, split by whether the caption
/// carries a compositional keyword. A flip is detected from the image.
pub fn flip_stats(draws_each: usize, seed: u64) -> FlipStats {
    let pool = records(seed, 400, 16);
    let keywords = KeywordSet::default();
    let (with, without): (Vec<&SampleRecord>, Vec<&SampleRecord>) =
        pool.iter().filter(|r| r.image.flip_horizontal() != r.image).partition(|r| r.has_keyword);
    assert!(!with.is_empty() && !without.is_empty());
    let mut s = FlipStats::default();
    for i in 0..draws_each {
        let mut rng = seed::rng(seed, &[stream::AUGMENT, i as u64]);
        let r = with[i % with.len()];
        s.keyword_draws += 1;
        s.keyword_flips += (flip_if_safe(r, &keywords, &mut rng).image != r.image) as usize;
        let r = without[i % without.len()];
        s.plain_draws += 1;
        s.plain_flips += (flip_if_safe(r, &keywords, &mut rng).image != r.image) as usize;
    }
    s
}

/// Dyadic random costs (multiples of 1/8 in [-4, 4)) so sums are exact.
pub fn dyadic_costs<R: rand::Rng>(n: usize, rng: &mut R) -> vlpix::assignment::CostMatrix {
    let costs = (0..n * n).map(|_| rng.gen_range(-32i32..32) as f64 / 8.0).collect();
    vlpix::assignment::CostMatrix::new(n, costs).unwrap()
}

/// Seeded Hungarian-versus-brute-force trials at size `n`; returns the
/// number of exact cost agreements.
pub fn hungarian_agreements(n: usize, trials: usize, seed: u64) -> usize {
    use vlpix::assignment::{brute_force_assignment, solve_assignment};
    let mut rng = seed::rng(seed, &[n as u64]);
    (0..trials)
        .filter(|_| {
            let c = dyadic_costs(n, &mut rng);
            let fast = solve_assignment(&c);
            let slow = brute_force_assignment(&c).unwrap();
            let mut seen = fast.sigma.clone();
            seen.sort_unstable();
            seen == (0..n).collect::<Vec<_>>() && fast.total_cost == slow.total_cost && c.cost_of(&fast.sigma) == slow.total_cost
        })
        .count()
}

#[derive(Debug, Default)]
pub struct SplTrialStats {
    pub trials: usize,
    /// Largest |loss(π(labels)) − loss(labels)| over all trials.
    pub max_permutation_deviation: f64,
    /// Trials in which some alternative matching had a lower cost.
    pub beaten: usize,
}

/// Random logits and label sets at `n` slots over 9 classes (+ no-object).
/// Optimality is checked exhaustively for n ≤ 7, otherwise against every
/// transposition of σ̂ and 500 random permutations.
pub fn spl_trials(n: usize, trials: usize, seed: u64) -> SplTrialStats {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use vlpix::assignment::brute_force_assignment;
    use vlpix::losses::{matching_costs, spl_loss, PseudoLabelSet, DEFAULT_EOS_COEF};
    use vlpix::tensor::{Tape, Tensor};

    const CLASSES: usize = 9;
    let mut rng = seed::rng(seed, &[n as u64, 0x5e7]);
    let mut stats = SplTrialStats {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let logits: Vec<f64> = (0..n * (CLASSES + 1)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let logits = Tensor::new(vec![n, CLASSES + 1], logits).unwrap();
        let count = rng.gen_range(0..=n.min(8));
        let raw: Vec<usize> = (0..count).map(|_| rng.gen_range(0..CLASSES)).collect();
        let labels = PseudoLabelSet::padded(&raw, n, CLASSES).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = labels.permuted(&order);

        let loss_of = |l: &PseudoLabelSet| {
            let mut tape = Tape::new();
            let x = tape.constant(logits.clone());
            let out = spl_loss(&mut tape, x, l, DEFAULT_EOS_COEF).unwrap();
            (tape.value(out.loss).item(), out.assignment)
        };
        let (base, assignment) = loss_of(&labels);
        let (perm, _) = loss_of(&shuffled);
        stats.max_permutation_deviation = stats.max_permutation_deviation.max((base - perm).abs());

        let costs = matching_costs(&logits, &labels).unwrap();
        let best = costs.cost_of(&assignment.sigma);
        let tol = 1e-12;
        let beaten = if n <= 7 {
            brute_force_assignment(&costs).unwrap().total_cost < best - tol
        } else {
            let mut alt = assignment.sigma.clone();
            let mut any = false;
            for i in 0..n {
                for j in i + 1..n {
                    alt.swap(i, j);
                    any |= costs.cost_of(&alt) < best - tol;
                    alt.swap(i, j);
                }
            }
            for _ in 0..500 {
                alt.shuffle(&mut rng);
                any |= costs.cost_of(&alt) < best - tol;
            }
            any
        };
        stats.beaten += beaten as usize;
    }
    stats
}
