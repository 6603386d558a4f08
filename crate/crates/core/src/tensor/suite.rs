//! Seeded finite-difference sweep over every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step used by the sweep.
pub const SUITE_STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1 * scale..scale);
                if rng.gen::<bool>() { m } else { -m }
            })
            .collect(),
    )
    .unwrap()
}

/// Magnitudes in [0.2, 2] with random sign. Near-zero coordinates make the
/// relative-error metric measure rounding noise instead of gradient error.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..2.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(random(&mut rng, &shape, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

pub type Primitive = fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>;

pub fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    vec![
        ("add", vec![3, 4], |tp, x, r| {
            let c = tp.constant(random(r, &[3, 4], 1.0));
            tp.add(x, c)
        }),
        ("add_row", vec![4], |tp, x, r| {
            let c = tp.constant(random(r, &[3, 4], 1.0));
            tp.add(c, x)
        }),
        ("sub", vec![3, 4], |tp, x, r| {
            let c = tp.constant(random(r, &[3, 4], 1.0));
            let a = tp.sub(c, x)?;
            tp.sub(a, x)
        }),
        ("mul", vec![3, 4], |tp, x, r| {
            let c = tp.constant(random(r, &[3, 4], 1.0));
            let y = tp.mul(x, c)?;
            tp.mul(y, x)
        }),
        ("scale", vec![5], |tp, x, _| Ok(tp.scale(x, -1.7))),
        ("matmul", vec![3, 5], |tp, x, r| {
            let c = tp.constant(random(r, &[5, 2], 1.0));
            tp.matmul(x, c)
        }),
        ("transpose", vec![3, 5], |tp, x, _| tp.transpose(x)),
        ("reshape", vec![3, 4], |tp, x, _| tp.reshape(x, &[2, 6])),
        ("concat_rows", vec![2, 3], |tp, x, r| {
            let c = tp.constant(random(r, &[1, 3], 1.0));
            tp.concat(&[c, x, x], 0)
        }),
        ("concat_cols", vec![2, 3], |tp, x, r| {
            let c = tp.constant(random(r, &[2, 2], 1.0));
            tp.concat(&[x, c, x], 1)
        }),
        ("slice_rows", vec![4, 3], |tp, x, _| tp.slice(x, 0, 1, 2)),
        ("slice_cols", vec![4, 5], |tp, x, _| tp.slice(x, 1, 2, 3)),
        ("relu", vec![3, 4], |tp, x, _| Ok(tp.relu(x))),
        ("gelu", vec![3, 4], |tp, x, _| Ok(tp.gelu(x))),
        ("softmax", vec![3, 4], |tp, x, _| tp.softmax(x)),
        ("layernorm", vec![3, 6], |tp, x, r| {
            let g = tp.constant(random(r, &[6], 2.0));
            let b = tp.constant(random(r, &[6], 1.0));
            tp.layernorm(x, g, b)
        }),
        ("layernorm_gamma", vec![6], |tp, x, r| {
            let v = tp.constant(random(r, &[3, 6], 2.0));
            let b = tp.constant(random(r, &[6], 1.0));
            tp.layernorm(v, x, b)
        }),
        ("embedding", vec![5, 3], |tp, x, _| tp.embedding(x, &[4, 0, 4, 2])),
        ("cross_entropy", vec![4, 5], |tp, x, _| {
            tp.cross_entropy(x, &[0, 4, 7, 2], Some(7))
        }),
        ("weighted_cross_entropy", vec![3, 4], |tp, x, _| {
            tp.weighted_cross_entropy(x, &[3, 1, 0], &[0.1, 1.0, 1.0])
        }),
        ("mse", vec![4, 3], |tp, x, r| {
            let target = random(r, &[4, 3], 1.0);
            tp.mse(x, &target, Some(&[true, false, true, true]))
        }),
        ("sum", vec![2, 3], |tp, x, _| Ok(tp.sum(x))),
        ("mean", vec![2, 3], |tp, x, _| Ok(tp.mean(x))),
    ]
}

/// Worst relative error per primitive over `trials` seeded inputs.
pub fn primitive_checks(trials: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shape, op) in primitives() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let x = away_from_zero(&mut rng, &shape);
            let seed = 1000 + trial;
            let report = grad_check(
                |tp, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let y = op(tp, v, &mut r)?;
                    project(tp, y, seed)
                },
                &x,
                SUITE_STEP,
            )?;
            worst = worst.max(report.max_rel_err);
        }
        out.push((name, worst));
    }
    Ok(out)
}
