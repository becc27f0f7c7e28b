//! Central finite-difference gradient checking.
//!
//! The check is independent of the backward pass: it only runs forward
//! evaluations at perturbed inputs and compares the quotient against the
//! analytic gradient from [`Tape::backward`]. Used by the test suites of
//! every downstream crate, always at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dtype::DType;
use crate::error::Result;
use crate::tape::{Tape, TensorId};

/// One differentiable input to a checked function.
#[derive(Clone)]
pub struct CheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        CheckInput {
            data,
            shape: shape.to_vec(),
        }
    }

    /// Uniform random input in `[lo, hi]`.
    pub fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        CheckInput {
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            shape: shape.to_vec(),
        }
    }
}

/// Settings for [`check_gradients`].
pub struct CheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates sampled per input (all coordinates when numel is smaller).
    pub max_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            eps: 1e-4,
            tol: 1e-4,
            max_coords: 24,
            seed: 0x5eed,
        }
    }
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` must construct a scalar loss from the given leaves on the provided
/// tape and must be deterministic across calls (any randomness fixed by the
/// caller). Returns `Err(description)` on the first failing coordinate.
pub fn check_gradients(
    inputs: &[CheckInput],
    opts: &CheckOpts,
    build: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
) -> std::result::Result<(), String> {
    let eval = |datasets: &[Vec<f64>]| -> std::result::Result<(f64, Vec<Vec<f64>>), String> {
        let mut tape = Tape::new(DType::F64);
        let ids: Vec<TensorId> = datasets
            .iter()
            .zip(inputs)
            .map(|(d, i)| tape.leaf(d.clone(), &i.shape, true))
            .collect::<Result<_>>()
            .map_err(|e| e.to_string())?;
        let loss = build(&mut tape, &ids).map_err(|e| e.to_string())?;
        if tape.numel(loss) != 1 {
            return Err("build must return a scalar loss".into());
        }
        tape.backward(loss).map_err(|e| e.to_string())?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((tape.item(loss), grads))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let (_, analytic) = eval(&base)?;

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.data.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < opts.max_coords {
                picked.insert(rng.gen_range(0..n));
            }
            picked.into_iter().collect()
        };
        for ci in coords {
            let mut plus = base.clone();
            plus[ii][ci] += opts.eps;
            let mut minus = base.clone();
            minus[ii][ci] -= opts.eps;
            let (lp, _) = eval(&plus)?;
            let (lm, _) = eval(&minus)?;
            let fd = (lp - lm) / (2.0 * opts.eps);
            let an = analytic[ii][ci];
            let denom = fd.abs().max(an.abs());
            let abs_err = (fd - an).abs();
            // Near-zero gradients are compared absolutely.
            if abs_err > opts.tol * denom && abs_err > 1e-9 {
                return Err(format!(
                    "input {ii} coord {ci}: analytic {an:e} vs finite-difference {fd:e} \
                     (rel err {:e})",
                    abs_err / denom.max(f64::MIN_POSITIVE)
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = CheckInput::uniform(&mut rng, &[3, 4], -1.0, 1.0);
        check_gradients(&[x], &CheckOpts::default(), |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            t.mean_all(sq)
        })
        .unwrap();
    }

    #[test]
    fn rejects_wrong_gradient() {
        // tanh forward with a deliberately wrong surrogate gradient: use
        // relu's loss so the mismatch is structural, not numeric noise.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = CheckInput::uniform(&mut rng, &[5], 0.5, 1.5);
        // Build a function whose analytic grad is fine, then corrupt the
        // comparison by checking against a different function's FD: instead,
        // verify the checker notices when eps-perturbed loss disagrees.
        let r = check_gradients(&[x.clone()], &CheckOpts::default(), |t, ids| {
            // abs has zero analytic grad at 0 but the data avoids 0, so this
            // passes; shift data through a kink to force a detectable error.
            let y = t.abs(ids[0]);
            t.sum_all(y);
            // Return a loss whose gradient the tape reports for a different
            // tensor: sum(x) has gradient 1, FD of sum(|x|) sees sign(x)=1
            // on positive data, so make data straddle the kink instead.
            let z = t.relu(ids[0]);
            t.mean_all(z)
        });
        assert!(r.is_ok());

        // A genuinely wrong gradient: scale the loss inside build depending
        // on a detached copy so analytic and FD disagree.
        let r = check_gradients(&[x], &CheckOpts::default(), |t, ids| {
            let d = t.detach(ids[0]);
            let y = t.mul(ids[0], d)?; // analytic grad misses the d-path
            t.mean_all(y)
        });
        assert!(r.is_err(), "detached second factor must fail the check");
    }
}
