//! Finite-difference checking for store-backed networks.
//!
//! Complements `fargan_tensor::gradcheck`: here the differentiable
//! quantities are parameter-store entries plus free input tensors, and the
//! forward pass runs through layer descriptors with a fixed RNG stream so
//! every evaluation sees identical noise. Spectral-norm state is never
//! updated during a check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use fargan_tensor::gradcheck::CheckInput;
use fargan_tensor::{DType, Tape, TensorId};

use crate::error::Result;
use crate::layers::Fwd;
use crate::params::ParamStore;

pub struct NetCheckOpts {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter entry and per input.
    pub max_coords: usize,
    pub coord_seed: u64,
    /// Seed of the forward RNG (noise maps); identical across evaluations.
    pub rng_seed: u64,
    pub use_noise: bool,
    pub use_skips: bool,
}

impl Default for NetCheckOpts {
    fn default() -> Self {
        NetCheckOpts {
            eps: 1e-4,
            tol: 1e-4,
            max_coords: 4,
            coord_seed: 0xC0FFEE,
            rng_seed: 7,
            use_noise: false,
            use_skips: true,
        }
    }
}

/// Check analytic gradients of a scalar built by `build` against central
/// finite differences, over every trainable store entry and every input.
pub fn check_net_gradients(
    store: &mut ParamStore,
    inputs: &[CheckInput],
    opts: &NetCheckOpts,
    build: impl Fn(&mut Fwd, &[TensorId]) -> Result<TensorId>,
) -> std::result::Result<(), String> {
    let eval = |store: &mut ParamStore,
                input_data: &[Vec<f64>],
                want_grads: bool|
     -> std::result::Result<(f64, Vec<Option<Vec<f64>>>, Vec<Vec<f64>>), String> {
        let mut tape = Tape::new(DType::F64);
        let binding = store.bind(&mut tape, true);
        let ids: Vec<TensorId> = input_data
            .iter()
            .zip(inputs)
            .map(|(d, i)| tape.leaf(d.clone(), &i.shape, true))
            .collect::<fargan_tensor::Result<_>>()
            .map_err(|e| e.to_string())?;
        let mut rng = ChaCha12Rng::seed_from_u64(opts.rng_seed);
        let loss = {
            let mut f = Fwd::new(&mut tape, &binding, store, &mut rng);
            f.use_noise = opts.use_noise;
            f.use_skips = opts.use_skips;
            build(&mut f, &ids).map_err(|e| e.to_string())?
        };
        if tape.numel(loss) != 1 {
            return Err("build must return a scalar".into());
        }
        let value = tape.item(loss);
        if !want_grads {
            return Ok((value, Vec::new(), Vec::new()));
        }
        tape.backward(loss).map_err(|e| e.to_string())?;
        let pgrads = store.collect_grads(&tape, &binding);
        let igrads = ids
            .iter()
            .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        Ok((value, pgrads, igrads))
    };

    let base_inputs: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let (_, pgrads, igrads) = eval(store, &base_inputs, true)?;

    let mut coord_rng = ChaCha12Rng::seed_from_u64(opts.coord_seed);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut s = std::collections::BTreeSet::new();
            while s.len() < opts.max_coords {
                s.insert(coord_rng.gen_range(0..n));
            }
            s.into_iter().collect()
        }
    };
    let compare = |an: f64, fd: f64, what: String| -> std::result::Result<(), String> {
        let denom = fd.abs().max(an.abs());
        let abs_err = (fd - an).abs();
        if abs_err > opts.tol * denom && abs_err > 1e-9 {
            return Err(format!(
                "{what}: analytic {an:e} vs finite-difference {fd:e} (rel {:e})",
                abs_err / denom.max(f64::MIN_POSITIVE)
            ));
        }
        Ok(())
    };

    // Parameter entries.
    for ei in 0..store.len() {
        if !store.entries()[ei].trainable {
            continue;
        }
        let n = store.entries()[ei].data.len();
        let name = store.entries()[ei].name.clone();
        for ci in pick(n) {
            let orig = store.entries()[ei].data[ci];
            store.entries_mut()[ei].data[ci] = orig + opts.eps;
            let (lp, _, _) = eval(store, &base_inputs, false)?;
            store.entries_mut()[ei].data[ci] = orig - opts.eps;
            let (lm, _, _) = eval(store, &base_inputs, false)?;
            store.entries_mut()[ei].data[ci] = orig;
            let fd = (lp - lm) / (2.0 * opts.eps);
            let an = pgrads[ei].as_ref().map(|g| g[ci]).unwrap_or(0.0);
            compare(an, fd, format!("param `{name}`[{ci}]"))?;
        }
    }

    // Free inputs.
    for (ii, input) in inputs.iter().enumerate() {
        for ci in pick(input.data.len()) {
            let mut plus = base_inputs.clone();
            plus[ii][ci] += opts.eps;
            let (lp, _, _) = eval(store, &plus, false)?;
            let mut minus = base_inputs.clone();
            minus[ii][ci] -= opts.eps;
            let (lm, _, _) = eval(store, &minus, false)?;
            let fd = (lp - lm) / (2.0 * opts.eps);
            compare(igrads[ii][ci], fd, format!("input {ii}[{ci}]"))?;
        }
    }
    Ok(())
}
