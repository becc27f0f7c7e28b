//! Spatially-adaptive normalization: per-channel whitening of the feature
//! map modulated by learned per-pixel scale and bias fields derived from the
//! landmark pathway, plus per-channel noise injection.

use fargan_tensor::{Tape, TensorError, TensorId};

use crate::error::Result;
use crate::layers::{channel_stats, Conv2d, Fwd, LEAKY_SLOPE};
use crate::params::{gaussian, ParamId, ParamStore};
use rand_chacha::ChaCha12Rng;

/// Hidden width of the shared convolution at paper scale; desk-scale
/// configs narrow it (see `NetworkConfig::for_size`).
pub const SPADE_HIDDEN: usize = 128;

/// Epsilon added to the per-channel standard deviation before dividing.
pub const SPADE_EPS: f64 = 1e-5;

/// Maps the modulation input to per-pixel scale and bias fields.
pub struct SpadeModule {
    shared: Conv2d,
    gamma_head: Conv2d,
    beta_head: Conv2d,
    pub eps: f64,
}

impl SpadeModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        feature_channels: usize,
        mod_channels: usize,
    ) -> Self {
        Self::with_hidden(store, rng, name, feature_channels, mod_channels, SPADE_HIDDEN)
    }

    pub fn with_hidden(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        feature_channels: usize,
        mod_channels: usize,
        hidden: usize,
    ) -> Self {
        SpadeModule {
            shared: Conv2d::new(
                store,
                rng,
                &format!("{name}.shared"),
                mod_channels,
                hidden,
                3,
                1,
                1,
                true,
                false,
            ),
            gamma_head: Conv2d::new(
                store,
                rng,
                &format!("{name}.gamma"),
                hidden,
                feature_channels,
                3,
                1,
                1,
                true,
                false,
            ),
            beta_head: Conv2d::new(
                store,
                rng,
                &format!("{name}.beta"),
                hidden,
                feature_channels,
                3,
                1,
                1,
                true,
                false,
            ),
            eps: SPADE_EPS,
        }
    }

    pub fn shared_conv(&self) -> &Conv2d {
        &self.shared
    }

    pub fn gamma_conv(&self) -> &Conv2d {
        &self.gamma_head
    }

    pub fn beta_conv(&self) -> &Conv2d {
        &self.beta_head
    }
}

/// Intermediate fields of one SPADE application, exposed for oracle tests.
pub struct SpadeParts {
    pub out: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
    pub mu: TensorId,
    pub sigma: TensorId,
}

/// `out = gamma(m) * (h - mu_c) / (sigma_c + eps) + beta(m)`.
///
/// `m` must already share spatial extents with `h` (resize with
/// nearest-neighbour beforehand); a mismatch is a dimension error.
pub fn spade_forward(f: &mut Fwd, h: TensorId, m: TensorId, module: &SpadeModule) -> Result<TensorId> {
    Ok(spade_forward_detailed(f, h, m, module)?.out)
}

pub fn spade_forward_detailed(
    f: &mut Fwd,
    h: TensorId,
    m: TensorId,
    module: &SpadeModule,
) -> Result<SpadeParts> {
    let hs = f.tape.shape(h).to_vec();
    let ms = f.tape.shape(m).to_vec();
    if hs.len() != 4 || ms.len() != 4 || hs[2] != ms[2] || hs[3] != ms[3] || hs[0] != ms[0] {
        return Err(TensorError::DimMismatch {
            op: "spade_forward",
            axis: "spatial",
            expected: hs.get(2).copied().unwrap_or(0) * hs.get(3).copied().unwrap_or(0),
            got: ms.get(2).copied().unwrap_or(0) * ms.get(3).copied().unwrap_or(0),
        }
        .into());
    }
    let shared = module.shared.forward(f, m)?;
    let shared = f.tape.relu(shared);
    let gamma = module.gamma_head.forward(f, shared)?;
    let beta = module.beta_head.forward(f, shared)?;
    let stats = channel_stats(f.tape, h)?;
    let centred = f.tape.sub_channel(h, stats.mu)?;
    let denom = f.tape.add_scalar(stats.sigma, module.eps);
    let normalized = f.tape.div_channel(centred, denom)?;
    let modulated = f.tape.mul(gamma, normalized)?;
    let out = f.tape.add(modulated, beta)?;
    Ok(SpadeParts {
        out,
        gamma,
        beta,
        mu: stats.mu,
        sigma: stats.sigma,
    })
}

/// Adds one shared Gaussian spatial map per call, scaled by a learnable
/// per-channel factor initialized to zero (identity at init).
pub struct NoiseInjection {
    scales: ParamId,
}

impl NoiseInjection {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        NoiseInjection {
            scales: store.add(format!("{name}.noise_scale"), vec![0.0; channels], &[channels]),
        }
    }

    pub fn scales_param(&self) -> ParamId {
        self.scales
    }

    /// One `HxW` map is drawn per call and shared across batch and channels.
    /// With `use_noise` off the map is zero and the layer is the identity.
    pub fn forward(&self, f: &mut Fwd, x: TensorId) -> Result<TensorId> {
        if !f.use_noise {
            return Ok(x);
        }
        let s = f.tape.shape(x).to_vec();
        let (n, _, h, w) = (s[0], s[1], s[2], s[3]);
        let z: Vec<f64> = (0..h * w).map(|_| gaussian(f.rng)).collect();
        let scales = f.bind.get(self.scales);
        let noise = f.tape.channel_scale_map(scales, &z, n, h, w)?;
        Ok(f.tape.add(x, noise)?)
    }
}

/// Noise injection, SPADE normalization, leaky-relu, then a 3x3 convolution;
/// spatial extents are preserved throughout.
pub struct SpadeBlock {
    pub noise: NoiseInjection,
    pub spade: SpadeModule,
    pub conv: Conv2d,
}

impl SpadeBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        mod_channels: usize,
        spectral_norm: bool,
    ) -> Self {
        Self::with_hidden(store, rng, name, c_in, c_out, mod_channels, spectral_norm, SPADE_HIDDEN)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_hidden(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        mod_channels: usize,
        spectral_norm: bool,
        hidden: usize,
    ) -> Self {
        SpadeBlock {
            noise: NoiseInjection::new(store, &format!("{name}"), c_in),
            spade: SpadeModule::with_hidden(
                store,
                rng,
                &format!("{name}.spade"),
                c_in,
                mod_channels,
                hidden,
            ),
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                c_in,
                c_out,
                3,
                1,
                1,
                true,
                spectral_norm,
            ),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: TensorId, m: TensorId) -> Result<TensorId> {
        let noisy = self.noise.forward(f, x)?;
        let s = spade_forward(f, noisy, m, &self.spade)?;
        let a = f.tape.leaky_relu(s, LEAKY_SLOPE);
        self.conv.forward(f, a)
    }
}

/// Spatially-uniform per-channel modulation (adaptive instance norm style),
/// kept as a comparison stub: with a flat modulation input the per-pixel
/// SPADE fields collapse to exactly this, washing out spatial mask content.
pub fn adain_stub(
    tape: &mut Tape,
    h: TensorId,
    gamma_c: TensorId,
    beta_c: TensorId,
    eps: f64,
) -> Result<TensorId> {
    let stats = channel_stats(tape, h)?;
    let centred = tape.sub_channel(h, stats.mu)?;
    let denom = tape.add_scalar(stats.sigma, eps);
    let normalized = tape.div_channel(centred, denom)?;
    let scaled = tape.mul_channel(normalized, gamma_c)?;
    Ok(tape.add_channel(scaled, beta_c)?)
}
