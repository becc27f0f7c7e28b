//! Building-block layers: spectral-normalized convolutions, channel
//! statistics, self-attention, and residual downsampling blocks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use fargan_tensor::{Tape, TensorId};

use crate::error::{Error, Result};
use crate::params::{conv_init, Binding, ParamId, ParamStore};

/// Negative slope shared by every leaky-relu in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Per-forward context: the tape under construction, the bound parameters,
/// and the mutable pieces a pass may touch (spectral-norm state, noise RNG).
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bind: &'a Binding,
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha12Rng,
    /// Run power iterations and persist the updated vectors.
    pub update_sn: bool,
    /// Sample noise maps; when false every noise injection is the identity.
    pub use_noise: bool,
    /// Feed encoder skip features to the decoder (test switch).
    pub use_skips: bool,
}

impl<'a> Fwd<'a> {
    pub fn new(
        tape: &'a mut Tape,
        bind: &'a Binding,
        store: &'a mut ParamStore,
        rng: &'a mut ChaCha12Rng,
    ) -> Self {
        Fwd {
            tape,
            bind,
            store,
            rng,
            update_sn: false,
            use_noise: false,
            use_skips: true,
        }
    }
}

// ---- spectral normalization ---------------------------------------------

/// Power-iteration state for one weight: left/right singular-vector
/// estimates and the per-step iteration count.
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub n_power_iterations: usize,
}

impl SpectralNormState {
    /// Fresh state warmed up against `w` so the first estimate is usable
    /// even before any training step.
    pub fn new(
        w: &[f64],
        out_len: usize,
        rest_len: usize,
        n_power_iterations: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut u: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut u);
        let mut st = SpectralNormState {
            u,
            v: vec![0.0; rest_len],
            n_power_iterations,
        };
        power_iterate(w, out_len, rest_len, &mut st.u, &mut st.v, n_power_iterations.max(1));
        st
    }
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        for v in x.iter_mut() {
            *v /= n;
        }
    }
}

fn power_iterate(w: &[f64], out: usize, rest: usize, u: &mut [f64], v: &mut [f64], iters: usize) {
    for _ in 0..iters {
        // v <- normalize(W^T u)
        for j in 0..rest {
            let mut s = 0.0;
            for i in 0..out {
                s += w[i * rest + j] * u[i];
            }
            v[j] = s;
        }
        normalize(v);
        // u <- normalize(W v)
        for (i, ui) in u.iter_mut().enumerate() {
            let row = &w[i * rest..][..rest];
            *ui = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        normalize(u);
    }
}

/// Divide `weight` by its estimated top singular value.
///
/// The power iteration runs outside the graph on raw data (when `update`),
/// while the estimate sigma = u^T W v enters the graph with u, v treated as
/// constants, so gradients flow through the division. A zero weight passes
/// through unchanged thanks to the 1e-12 guard on sigma.
pub fn spectral_normalize(
    tape: &mut Tape,
    weight: TensorId,
    state: &mut SpectralNormState,
    update: bool,
) -> Result<TensorId> {
    spectral_normalize_axis(tape, weight, state, update, 0)
}

/// As [`spectral_normalize`] with the output-channel axis selectable
/// (transposed-conv weights carry it on axis 1).
pub fn spectral_normalize_axis(
    tape: &mut Tape,
    weight: TensorId,
    state: &mut SpectralNormState,
    update: bool,
    out_axis: usize,
) -> Result<TensorId> {
    let shape = tape.shape(weight).to_vec();
    let m2 = if out_axis == 0 {
        let out = shape[0];
        tape.reshape(weight, &[out, tape.numel(weight) / out])?
    } else {
        let sw = tape.swap_axes01(weight)?;
        let out = shape[1];
        tape.reshape(sw, &[out, tape.numel(weight) / out])?
    };
    let (out, rest) = (tape.shape(m2)[0], tape.shape(m2)[1]);
    if state.u.len() != out || state.v.len() != rest {
        return Err(Error::config(format!(
            "spectral norm state sized ({}, {}) does not fit weight matrix ({out}, {rest})",
            state.u.len(),
            state.v.len()
        )));
    }
    if update {
        let w_data = tape.data(m2).to_vec();
        power_iterate(
            &w_data,
            out,
            rest,
            &mut state.u,
            &mut state.v,
            state.n_power_iterations,
        );
    }
    let v_col = tape.constant(state.v.clone(), &[rest, 1])?;
    let u_col = tape.constant(state.u.clone(), &[out, 1])?;
    let wv = tape.matmul(m2, v_col)?;
    let uwv = tape.mul(u_col, wv)?;
    let sigma = tape.sum_all(uwv);
    let sigma_eps = tape.add_scalar(sigma, 1e-12);
    let inv = tape.recip(sigma_eps);
    Ok(tape.mul_scalar_t(weight, inv)?)
}

// ---- channel statistics ---------------------------------------------------

/// Per-channel mean and standard deviation over batch and spatial axes.
pub struct ChannelStats {
    pub mu: TensorId,
    pub sigma: TensorId,
}

/// Differentiable per-channel statistics, accumulated in 64-bit.
/// The variance uses E[h^2] - mu^2, which equals the mean of (h^2 - mu^2)
/// since mu is constant over the sum; tiny negative rounding is clamped
/// before the square root.
pub fn channel_stats(tape: &mut Tape, h: TensorId) -> Result<ChannelStats> {
    let mu = tape.channel_mean(h)?;
    let h2 = tape.mul(h, h)?;
    let ex2 = tape.channel_mean(h2)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.sub(ex2, mu2)?;
    let var = tape.clamp_min(var, 0.0);
    let sigma = tape.sqrt(var);
    Ok(ChannelStats { mu, sigma })
}

// ---- convolution layers -----------------------------------------------------

/// Convolution layer descriptor; learnable data lives in the [`ParamStore`].
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
    sn: Option<SnParams>,
    transposed: bool,
}

/// Spectral-norm state parked in the store so checkpoints capture it.
struct SnParams {
    u: ParamId,
    v: ParamId,
    n_power_iterations: usize,
    out_axis: usize,
}

/// Per-step power iterations during training; verification uses more.
pub const SN_TRAIN_ITERS: usize = 1;

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        sn: bool,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = conv_init(rng, &shape, c_in * k * k);
        Self::build(store, rng, name, w, &shape, stride, pad, bias, sn, 0)
    }

    /// Transposed convolution; weight layout `(c_in, c_out, k, k)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new_transposed(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        sn: bool,
    ) -> Self {
        let shape = [c_in, c_out, k, k];
        let w = conv_init(rng, &shape, c_in * k * k);
        let mut l = Self::build(store, rng, name, w, &shape, stride, pad, bias, sn, 1);
        l.transposed = true;
        l
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        w: Vec<f64>,
        shape: &[usize; 4],
        stride: usize,
        pad: usize,
        bias: bool,
        sn: bool,
        out_axis: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), w.clone(), shape);
        let c_out = shape[out_axis.min(1)];
        let bias = bias.then(|| store.add(format!("{name}.bias"), vec![0.0; c_out], &[c_out]));
        let sn = sn.then(|| {
            let (out_len, rest) = if out_axis == 0 {
                (shape[0], shape[1] * shape[2] * shape[3])
            } else {
                (shape[1], shape[0] * shape[2] * shape[3])
            };
            // Warm up against a matricized copy so sigma is meaningful from
            // the very first eval-mode forward.
            let m = if out_axis == 0 {
                w
            } else {
                let rest3 = shape[2] * shape[3];
                let mut m = vec![0.0; w.len()];
                for i in 0..shape[0] {
                    for j in 0..shape[1] {
                        m[(j * shape[0] + i) * rest3..][..rest3]
                            .copy_from_slice(&w[(i * shape[1] + j) * rest3..][..rest3]);
                    }
                }
                m
            };
            let st = SpectralNormState::new(&m, out_len, rest, SN_TRAIN_ITERS, rng);
            SnParams {
                u: store.add_state(format!("{name}.sn_u"), st.u, &[out_len]),
                v: store.add_state(format!("{name}.sn_v"), st.v, &[rest]),
                n_power_iterations: SN_TRAIN_ITERS,
                out_axis,
            }
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad,
            sn,
            transposed: false,
        }
    }

    /// Effective (possibly normalized) weight on the tape.
    fn weight_id(&self, f: &mut Fwd) -> Result<TensorId> {
        let w = f.bind.get(self.weight);
        let Some(sn) = &self.sn else { return Ok(w) };
        let mut state = SpectralNormState {
            u: f.store.entry(sn.u).data.clone(),
            v: f.store.entry(sn.v).data.clone(),
            n_power_iterations: sn.n_power_iterations,
        };
        let wsn = spectral_normalize_axis(f.tape, w, &mut state, f.update_sn, sn.out_axis)?;
        if f.update_sn {
            *f.store.data_mut(sn.u) = state.u;
            *f.store.data_mut(sn.v) = state.v;
        }
        Ok(wsn)
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let w = self.weight_id(f)?;
        let b = self.bias.map(|b| f.bind.get(b));
        let y = if self.transposed {
            f.tape.conv_transpose2d(x, w, b, self.stride, self.pad)?
        } else {
            f.tape.conv2d(x, w, b, self.stride, self.pad)?
        };
        Ok(y)
    }
}

impl Conv2d {
    pub fn weight_param(&self) -> ParamId {
        self.weight
    }

    pub fn bias_param(&self) -> Option<ParamId> {
        self.bias
    }
}

// ---- self-attention ----------------------------------------------------------

/// Non-local block: softmax attention over all spatial positions with a
/// learnable residual gain starting at zero (identity map at init).
pub struct SelfAttention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    out: Conv2d,
    gamma: ParamId,
}

/// Key/query channel reduction factor.
pub const ATTN_REDUCTION: usize = 8;

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels % ATTN_REDUCTION != 0 {
            return Err(Error::config(format!(
                "self-attention at {channels} channels: not divisible by {ATTN_REDUCTION}"
            )));
        }
        let c8 = channels / ATTN_REDUCTION;
        let conv1x1 = |store: &mut ParamStore, rng: &mut ChaCha12Rng, n: String, c_out: usize| {
            Conv2d::new(store, rng, &n, channels, c_out, 1, 1, 0, false, false)
        };
        Ok(SelfAttention {
            query: conv1x1(store, rng, format!("{name}.query"), c8),
            key: conv1x1(store, rng, format!("{name}.key"), c8),
            value: conv1x1(store, rng, format!("{name}.value"), channels),
            out: conv1x1(store, rng, format!("{name}.out"), channels),
            gamma: store.add(format!("{name}.gamma"), vec![0.0], &[1]),
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        Ok(self.forward_with_attn(f, x)?.0)
    }

    /// Returns `(output, attention)` where attention is `(N, L, L)` with
    /// source positions on axis 1 (each output column sums to one).
    pub fn forward_with_attn(&self, f: &mut Fwd, x: TensorId) -> Result<(TensorId, TensorId)> {
        let s = f.tape.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let l = h * w;
        let q = self.query.forward(f, x)?;
        let k = self.key.forward(f, x)?;
        let v = self.value.forward(f, x)?;
        let c8 = f.tape.shape(q)[1];
        let q = f.tape.reshape(q, &[n, c8, l])?;
        let k = f.tape.reshape(k, &[n, c8, l])?;
        let v = f.tape.reshape(v, &[n, c, l])?;
        // scores[i, j] = <q_i, k_j>; normalize over source positions i.
        let qt = f.tape.transpose_last2(q)?;
        let scores = f.tape.bmm(qt, k)?;
        let attn = f.tape.softmax(scores, 1)?;
        let gathered = f.tape.bmm(v, attn)?;
        let gathered = f.tape.reshape(gathered, &[n, c, h, w])?;
        let projected = self.out.forward(f, gathered)?;
        let gamma = f.bind.get(self.gamma);
        let scaled = f.tape.mul_scalar_t(projected, gamma)?;
        let y = f.tape.add(x, scaled)?;
        Ok((y, attn))
    }
}

// ---- residual downsampling ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

pub fn pool(tape: &mut Tape, x: TensorId, kind: PoolKind, k: usize) -> Result<TensorId> {
    Ok(match kind {
        PoolKind::Avg => tape.avg_pool2d(x, k)?,
        PoolKind::Max => tape.max_pool2d(x, k)?,
    })
}

/// Pre-activation residual block that halves spatial extents:
/// `pool(conv2(lrelu(conv1(lrelu(x))))) + pool(skip(x))`.
pub struct ResidualDownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
    pool: PoolKind,
}

impl ResidualDownBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        pool: PoolKind,
    ) -> Self {
        ResidualDownBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, true, true),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true, true),
            skip: Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, true, true),
            pool,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        let a = f.tape.leaky_relu(x, LEAKY_SLOPE);
        let c1 = self.conv1.forward(f, a)?;
        let b = f.tape.leaky_relu(c1, LEAKY_SLOPE);
        let c2 = self.conv2.forward(f, b)?;
        let main = pool(f.tape, c2, self.pool, 2)?;
        let sk = self.skip.forward(f, x)?;
        let sk = pool(f.tape, sk, self.pool, 2)?;
        Ok(f.tape.add(main, sk)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcheck::{check_net_gradients, NetCheckOpts};
    use fargan_tensor::gradcheck::CheckInput;
    use fargan_tensor::DType;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn svd_sigma_max(data: &[f64], rows: usize, cols: usize) -> f64 {
        DMatrix::from_row_slice(rows, cols, data)
            .svd(false, false)
            .singular_values[0]
    }

    fn normalize_matrix(data: Vec<f64>, rows: usize, cols: usize, iters: usize, seed: u64) -> Vec<f64> {
        let mut tape = Tape::new(DType::F64);
        let w = tape.leaf(data.clone(), &[rows, cols], true).unwrap();
        let mut st = SpectralNormState::new(&data, rows, cols, iters, &mut rng(seed));
        st.n_power_iterations = iters;
        let wn = spectral_normalize(&mut tape, w, &mut st, true).unwrap();
        tape.data(wn).to_vec()
    }

    #[test]
    fn spectral_norm_diag_matrix() {
        let wn = normalize_matrix(vec![3.0, 0.0, 0.0, 1.0], 2, 2, 20, 0);
        let s = svd_sigma_max(&wn, 2, 2);
        assert!((0.999..=1.001).contains(&s), "sigma {s}");
    }

    #[test]
    fn spectral_norm_is_idempotent_near_unit_norm() {
        // A matrix already at unit spectral norm passes through.
        let raw = vec![0.6, 0.8, 0.0, 0.0];
        assert!((svd_sigma_max(&raw, 2, 2) - 1.0).abs() < 1e-12);
        let wn = normalize_matrix(raw.clone(), 2, 2, 50, 1);
        for (a, b) in wn.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn spectral_norm_zero_matrix_passes_through() {
        let wn = normalize_matrix(vec![0.0; 6], 2, 3, 20, 2);
        assert!(wn.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_norm_random_10x10_vs_svd() {
        for seed in 0..5u64 {
            let mut r = rng(900 + seed);
            let data: Vec<f64> = (0..100).map(|_| r.gen_range(-1.0..1.0)).collect();
            let wn = normalize_matrix(data, 10, 10, 20, seed);
            let s = svd_sigma_max(&wn, 10, 10);
            assert!((s - 1.0).abs() < 1e-2, "seed {seed}: sigma {s}");
        }
    }

    #[test]
    fn spectral_norm_u_stays_unit() {
        let mut r = rng(11);
        let data: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let st = SpectralNormState::new(&data, 3, 4, 7, &mut r);
        let norm = st.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn channel_stats_constant_and_two_point() {
        let mut tape = Tape::new(DType::F64);
        let h = tape.leaf(vec![5.0; 32], &[1, 2, 4, 4], false).unwrap();
        let st = channel_stats(&mut tape, h).unwrap();
        assert_eq!(tape.data(st.mu), &[5.0, 5.0]);
        assert_eq!(tape.data(st.sigma), &[0.0, 0.0]);

        let h = tape.leaf(vec![0.0, 2.0], &[1, 1, 1, 2], false).unwrap();
        let st = channel_stats(&mut tape, h).unwrap();
        assert_eq!(tape.data(st.mu), &[1.0]);
        assert_eq!(tape.data(st.sigma), &[1.0]);
    }

    #[test]
    fn channel_stats_matches_scalar_loop() {
        let mut r = rng(21);
        let (n, c, hh, ww) = (2usize, 3usize, 4usize, 4usize);
        let data: Vec<f64> = (0..n * c * hh * ww).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new(DType::F64);
        let h = tape.leaf(data.clone(), &[n, c, hh, ww], false).unwrap();
        let st = channel_stats(&mut tape, h).unwrap();
        for ci in 0..c {
            let mut sum = 0.0;
            let mut count = 0.0;
            for ni in 0..n {
                for y in 0..hh {
                    for x in 0..ww {
                        sum += data[((ni * c + ci) * hh + y) * ww + x];
                        count += 1.0;
                    }
                }
            }
            let mu = sum / count;
            let mut sq = 0.0;
            for ni in 0..n {
                for y in 0..hh {
                    for x in 0..ww {
                        let v = data[((ni * c + ci) * hh + y) * ww + x];
                        sq += v * v - mu * mu;
                    }
                }
            }
            let sigma = (sq / count).max(0.0).sqrt();
            assert!((tape.data(st.mu)[ci] - mu).abs() < 1e-6);
            assert!((tape.data(st.sigma)[ci] - sigma).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_indivisible_channels() {
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, &mut rng(0), "attn", 12).is_err());
    }

    #[test]
    fn attention_gamma_zero_is_identity() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng(3), "attn", 8).unwrap();
        let mut tape = Tape::new(DType::F64);
        let binding = store.bind(&mut tape, false);
        let mut r = rng(4);
        let data: Vec<f64> = (0..8 * 16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(data.clone(), &[1, 8, 4, 4], false).unwrap();
        let mut f = Fwd::new(&mut tape, &binding, &mut store, &mut r);
        let y = attn.forward(&mut f, x).unwrap();
        assert_eq!(tape.data(y), data.as_slice());
    }

    #[test]
    fn attention_uniform_input_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng(5), "attn", 8).unwrap();
        *store.data_mut(store.find("attn.gamma").unwrap()) = vec![1.0];
        let mut tape = Tape::new(DType::F64);
        let binding = store.bind(&mut tape, false);
        let mut r = rng(6);
        let x = tape.leaf(vec![0.37; 8 * 16], &[1, 8, 4, 4], false).unwrap();
        let mut f = Fwd::new(&mut tape, &binding, &mut store, &mut r);
        let (_, attn_w) = attn.forward_with_attn(&mut f, x).unwrap();
        for v in tape.data(attn_w) {
            assert!((v - 1.0 / 16.0).abs() < 1e-9, "weight {v}");
        }
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng(7), "attn", 8).unwrap();
        *store.data_mut(store.find("attn.gamma").unwrap()) = vec![0.7];
        let get = |n: &str| store.entry(store.find(n).unwrap()).data.clone();
        let (wq, wk, wv, wo) = (
            get("attn.query.weight"),
            get("attn.key.weight"),
            get("attn.value.weight"),
            get("attn.out.weight"),
        );

        let (c, hh, ww) = (8usize, 4usize, 4usize);
        let l = hh * ww;
        let mut r = rng(8);
        let data: Vec<f64> = (0..c * l).map(|_| r.gen_range(-1.0..1.0)).collect();

        // O((HW)^2) scalar reference
        let c8 = c / ATTN_REDUCTION;
        let lin = |w: &[f64], co: usize, i: usize| -> Vec<f64> {
            (0..co)
                .map(|o| (0..c).map(|ci| w[o * c + ci] * data[ci * l + i]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = (0..l).map(|i| lin(&wq, c8, i)).collect();
        let k: Vec<Vec<f64>> = (0..l).map(|i| lin(&wk, c8, i)).collect();
        let v: Vec<Vec<f64>> = (0..l).map(|i| lin(&wv, c, i)).collect();
        let mut expected = vec![0.0; c * l];
        for j in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|i| (0..c8).map(|t| q[i][t] * k[j][t]).sum())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let gathered: Vec<f64> = (0..c)
                .map(|ci| (0..l).map(|i| v[i][ci] * exps[i] / z).sum())
                .collect();
            for o in 0..c {
                let proj: f64 = (0..c).map(|ci| wo[o * c + ci] * gathered[ci]).sum();
                expected[o * l + j] = data[o * l + j] + 0.7 * proj;
            }
        }

        let mut tape = Tape::new(DType::F64);
        let binding = store.bind(&mut tape, false);
        let x = tape.leaf(data, &[1, c, hh, ww], false).unwrap();
        let mut f = Fwd::new(&mut tape, &binding, &mut store, &mut r);
        let y = attn.forward(&mut f, x).unwrap();
        let got = tape.data(y);
        let max_diff = got
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn residual_down_halves_extent_and_zero_maps_to_zero() {
        let mut store = ParamStore::new();
        let blk = ResidualDownBlock::new(&mut store, &mut rng(9), "blk", 3, 6, PoolKind::Avg);
        let mut tape = Tape::new(DType::F64);
        let binding = store.bind(&mut tape, false);
        let x = tape.leaf(vec![0.0; 3 * 64], &[1, 3, 8, 8], false).unwrap();
        let mut r = rng(10);
        let mut f = Fwd::new(&mut tape, &binding, &mut store, &mut r);
        let y = blk.forward(&mut f, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 6, 4, 4]);
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_down_gradients_match_fd() {
        let mut store = ParamStore::new();
        let blk = ResidualDownBlock::new(&mut store, &mut rng(12), "blk", 2, 3, PoolKind::Avg);
        let mut r = rng(13);
        let x = CheckInput::uniform(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        check_net_gradients(&mut store, &[x], &NetCheckOpts::default(), |f, ids| {
            let y = blk.forward(f, ids[0])?;
            let sq = f.tape.mul(y, y)?;
            Ok(f.tape.mean_all(sq)?)
        })
        .unwrap();
    }

    #[test]
    fn self_attention_gradients_match_fd() {
        let mut store = ParamStore::new();
        let attn = SelfAttention::new(&mut store, &mut rng(14), "attn", 8).unwrap();
        *store.data_mut(store.find("attn.gamma").unwrap()) = vec![0.5];
        let mut r = rng(15);
        let x = CheckInput::uniform(&mut r, &[1, 8, 3, 3], -1.0, 1.0);
        check_net_gradients(&mut store, &[x], &NetCheckOpts::default(), |f, ids| {
            let y = attn.forward(f, ids[0])?;
            let sq = f.tape.mul(y, y)?;
            Ok(f.tape.mean_all(sq)?)
        })
        .unwrap();
    }

    use rand::Rng;
}
