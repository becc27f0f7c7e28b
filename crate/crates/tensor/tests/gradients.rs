//! Finite-difference checks for every differentiable op, three random
//! instances each, at 64-bit with eps = 1e-4 and relative tolerance 1e-4.

use fargan_tensor::gradcheck::{check_gradients, CheckInput, CheckOpts};
use fargan_tensor::Result;
use fargan_tensor::{Tape, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn opts(seed: u64) -> CheckOpts {
    CheckOpts {
        seed,
        ..CheckOpts::default()
    }
}

/// Push values away from a non-differentiable kink so the central quotient
/// stays on one side.
fn away_from(mut input: CheckInput, kink: f64, margin: f64) -> CheckInput {
    for v in input.data.iter_mut() {
        if (*v - kink).abs() < margin {
            *v = kink + margin * if *v >= kink { 1.0 } else { -1.0 };
        }
    }
    input
}

fn run3(
    shapes: &[Vec<Vec<usize>>],
    make: impl Fn(&mut ChaCha12Rng, &[Vec<usize>]) -> Vec<CheckInput>,
    build: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId> + Copy,
) {
    for (case, shape_set) in shapes.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(100 + case as u64);
        let inputs = make(&mut rng, shape_set);
        check_gradients(&inputs, &opts(case as u64), build)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

fn uniform_set(rng: &mut ChaCha12Rng, shapes: &[Vec<usize>]) -> Vec<CheckInput> {
    shapes
        .iter()
        .map(|s| CheckInput::uniform(rng, s, -1.0, 1.0))
        .collect()
}

#[test]
fn grad_elementwise_binary() {
    let shapes = vec![
        vec![vec![3, 4], vec![3, 4]],
        vec![vec![2, 2, 2, 2], vec![2, 2, 2, 2]],
        vec![vec![7], vec![7]],
    ];
    run3(&shapes, uniform_set, |t, ids| {
        let a = t.add(ids[0], ids[1])?;
        let m = t.mul(a, ids[0])?;
        let s = t.sub(m, ids[1])?;
        t.mean_all(s)
    });
}

#[test]
fn grad_activations() {
    let shapes = vec![vec![vec![4, 4]], vec![vec![2, 3, 2, 2]], vec![vec![11]]];
    run3(
        &shapes,
        |rng, s| vec![away_from(CheckInput::uniform(rng, &s[0], -1.0, 1.0), 0.0, 0.01)],
        |t, ids| {
            let r = t.relu(ids[0]);
            let l = t.leaky_relu(ids[0], 0.2);
            let th = t.tanh(ids[0]);
            let sg = t.sigmoid(ids[0]);
            let a = t.add(r, l)?;
            let b = t.add(th, sg)?;
            let y = t.add(a, b)?;
            t.mean_all(y)
        },
    );
}

#[test]
fn grad_abs_sqrt_recip_clamp() {
    let shapes = vec![vec![vec![5]], vec![vec![2, 3]], vec![vec![3, 1, 2, 2]]];
    run3(
        &shapes,
        |rng, s| vec![CheckInput::uniform(rng, &s[0], 0.4, 1.6)],
        |t, ids| {
            let sq = t.sqrt(ids[0]);
            let rc = t.recip(ids[0]);
            let ab = t.abs(ids[0]);
            let cl = t.clamp_min(ids[0], 0.1);
            let a = t.add(sq, rc)?;
            let b = t.add(ab, cl)?;
            let y = t.mul(a, b)?;
            t.mean_all(y)
        },
    );
}

#[test]
fn grad_conv2d() {
    // (input shape, weight shape, stride, pad)
    let cases: Vec<(Vec<usize>, Vec<usize>, usize, usize)> = vec![
        (vec![2, 3, 8, 8], vec![4, 3, 3, 3], 1, 1),
        (vec![1, 2, 6, 6], vec![3, 2, 3, 3], 2, 1),
        (vec![1, 1, 5, 5], vec![2, 1, 1, 1], 1, 0),
    ];
    for (case, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(200 + case as u64);
        let x = CheckInput::uniform(&mut rng, &xs, -1.0, 1.0);
        let w = CheckInput::uniform(&mut rng, &ws, -1.0, 1.0);
        let b = CheckInput::uniform(&mut rng, &[ws[0]], -0.5, 0.5);
        check_gradients(&[x, w, b], &opts(case as u64), |t, ids| {
            let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
            let y = t.mul(y, y)?;
            t.mean_all(y)
        })
        .unwrap_or_else(|e| panic!("conv2d case {case}: {e}"));
    }
}

#[test]
fn grad_transposed_conv2d() {
    let cases: Vec<(Vec<usize>, Vec<usize>, usize, usize)> = vec![
        (vec![1, 2, 4, 4], vec![2, 3, 4, 4], 2, 1),
        (vec![2, 1, 3, 3], vec![1, 2, 2, 2], 2, 0),
        (vec![1, 2, 5, 5], vec![2, 2, 3, 3], 1, 1),
    ];
    for (case, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(300 + case as u64);
        let x = CheckInput::uniform(&mut rng, &xs, -1.0, 1.0);
        let w = CheckInput::uniform(&mut rng, &ws, -1.0, 1.0);
        let b = CheckInput::uniform(&mut rng, &[ws[1]], -0.5, 0.5);
        check_gradients(&[x, w, b], &opts(case as u64), |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
            let y = t.mul(y, y)?;
            t.mean_all(y)
        })
        .unwrap_or_else(|e| panic!("transposed case {case}: {e}"));
    }
}

#[test]
fn grad_pooling() {
    let shapes = vec![
        vec![vec![1, 2, 4, 4]],
        vec![vec![2, 1, 6, 6]],
        vec![vec![1, 3, 4, 4]],
    ];
    run3(&shapes, uniform_set, |t, ids| {
        let a = t.avg_pool2d(ids[0], 2)?;
        let y = t.mul(a, a)?;
        t.mean_all(y)
    });
    run3(&shapes, uniform_set, |t, ids| {
        let m = t.max_pool2d(ids[0], 2)?;
        let y = t.mul(m, m)?;
        t.mean_all(y)
    });
}

#[test]
fn grad_composite_conv_relu_pool() {
    // conv -> relu -> pool -> sum, the canonical composite graph.
    for case in 0..3u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(400 + case);
        let x = CheckInput::uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = CheckInput::uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = CheckInput::uniform(&mut rng, &[3], -0.2, 0.2);
        check_gradients(&[x, w, b], &opts(case), |t, ids| {
            let c = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
            let r = t.relu(c);
            let p = t.avg_pool2d(r, 2)?;
            Ok(t.sum_all(p))
        })
        .unwrap_or_else(|e| panic!("composite case {case}: {e}"));
    }
}

#[test]
fn grad_matmul_bmm() {
    let shapes = vec![
        vec![vec![3, 4], vec![4, 5]],
        vec![vec![1, 6], vec![6, 2]],
        vec![vec![5, 2], vec![2, 5]],
    ];
    run3(&shapes, uniform_set, |t, ids| {
        let y = t.matmul(ids[0], ids[1])?;
        let y = t.mul(y, y)?;
        t.mean_all(y)
    });
    let shapes = vec![
        vec![vec![2, 3, 4], vec![2, 4, 2]],
        vec![vec![1, 2, 5], vec![1, 5, 3]],
        vec![vec![3, 2, 2], vec![3, 2, 2]],
    ];
    run3(&shapes, uniform_set, |t, ids| {
        let y = t.bmm(ids[0], ids[1])?;
        let y = t.mul(y, y)?;
        t.mean_all(y)
    });
}

#[test]
fn grad_softmax() {
    let cases = vec![(vec![3, 5], 1), (vec![2, 3, 4], 2), (vec![4, 2], 0)];
    for (case, (shape, axis)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(500 + case as u64);
        let x = CheckInput::uniform(&mut rng, &shape, -2.0, 2.0);
        check_gradients(&[x], &opts(case as u64), |t, ids| {
            let y = t.softmax(ids[0], axis)?;
            let w = t.mul(y, y)?;
            t.sum_all(w);
            // weight the probabilities so the gradient is non-trivial
            let y2 = t.mul(y, ids[0])?;
            t.mean_all(y2)
        })
        .unwrap_or_else(|e| panic!("softmax case {case}: {e}"));
    }
}

#[test]
fn grad_channel_ops() {
    for case in 0..3u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(600 + case);
        let x = CheckInput::uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let v = CheckInput::uniform(&mut rng, &[3], 0.5, 1.5);
        check_gradients(&[x, v], &opts(case), |t, ids| {
            let mu = t.channel_mean(ids[0])?;
            let centred = t.sub_channel(ids[0], mu)?;
            let scaled = t.div_channel(centred, ids[1])?;
            let gained = t.mul_channel(scaled, ids[1])?;
            let shifted = t.add_channel(gained, mu)?;
            let y = t.mul(shifted, scaled)?;
            t.mean_all(y)
        })
        .unwrap_or_else(|e| panic!("channel case {case}: {e}"));
    }
}

#[test]
fn grad_scalar_broadcast_and_scale_map() {
    for case in 0..3u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(700 + case);
        let x = CheckInput::uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let s = CheckInput::uniform(&mut rng, &[1], 0.5, 1.5);
        let scales = CheckInput::uniform(&mut rng, &[2], -1.0, 1.0);
        let map = CheckInput::uniform(&mut rng, &[9], -1.0, 1.0).data;
        check_gradients(&[x, s, scales], &opts(case), move |t, ids| {
            let a = t.mul_scalar_t(ids[0], ids[1])?;
            let noise = t.channel_scale_map(ids[2], &map, 1, 3, 3)?;
            let y = t.add(a, noise)?;
            let y = t.mul(y, y)?;
            t.mean_all(y)
        })
        .unwrap_or_else(|e| panic!("scalar-broadcast case {case}: {e}"));
    }
}

#[test]
fn grad_shape_ops() {
    for case in 0..3u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(800 + case);
        let a = CheckInput::uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let b = CheckInput::uniform(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        check_gradients(&[a, b], &opts(case), |t, ids| {
            let cat = t.concat_channel(&[ids[0], ids[1]])?;
            let sw = t.swap_axes01(cat)?;
            let up = t.nearest_resize(sw, 8, 8)?;
            let down = t.nearest_resize(up, 2, 2)?;
            let fl = t.reshape(down, &[3, 4])?;
            let tr = t.transpose_last2(fl)?;
            let y = t.mul(tr, tr)?;
            t.mean_all(y)
        })
        .unwrap_or_else(|e| panic!("shape-op case {case}: {e}"));
    }
}
