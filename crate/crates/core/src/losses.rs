//! Loss terms: least-squares adversarial objectives, pixel L1, and
//! feature-space distances under fixed (never-trained) convolutional
//! pyramids standing in for pretrained perceptual/identity networks.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use fargan_tensor::{Tape, TensorId};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Fwd, LEAKY_SLOPE};
use crate::params::{derive_seed, ParamStore};

/// Term weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_l1: f64,
    pub w_p: f64,
    pub w_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_adv: 1.0,
            w_l1: 20.0,
            w_p: 2.0,
            w_id: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_adv < 0.0 || self.w_l1 < 0.0 || self.w_p < 0.0 || self.w_id < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Per-step scalar report; `total_g`/`total_d` always recombine from the
/// parts under `weights`.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub adv_g: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub total_g: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
    pub total_d: f64,
    pub weights: LossWeightsEcho,
}

/// Weights echoed into every report for downstream logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossWeightsEcho {
    pub w_adv: f64,
    pub w_l1: f64,
    pub w_p: f64,
    pub w_id: f64,
}

impl From<LossWeights> for LossWeightsEcho {
    fn from(w: LossWeights) -> Self {
        LossWeightsEcho {
            w_adv: w.w_adv,
            w_l1: w.w_l1,
            w_p: w.w_p,
            w_id: w.w_id,
        }
    }
}

fn require_nonempty(tape: &Tape, x: TensorId, what: &str) -> Result<()> {
    if tape.numel(x) == 0 {
        return Err(Error::config(format!("{what}: empty tensor")));
    }
    Ok(())
}

/// Generator adversarial term: mean over patches of `(score - 1)^2`.
pub fn adv_g(tape: &mut Tape, d_scores_fake: TensorId) -> Result<TensorId> {
    require_nonempty(tape, d_scores_fake, "adv_g")?;
    let s = tape.add_scalar(d_scores_fake, -1.0);
    let q = tape.mul(s, s)?;
    Ok(tape.mean_all(q)?)
}

/// Discriminator objective: `mean(fake^2) + mean((real - 1)^2)`.
pub fn adv_d(tape: &mut Tape, d_scores_fake: TensorId, d_scores_real: TensorId) -> Result<TensorId> {
    let (f, r) = adv_d_parts(tape, d_scores_fake, d_scores_real)?;
    Ok(tape.add(f, r)?)
}

/// The two discriminator terms separately (fake first).
pub fn adv_d_parts(
    tape: &mut Tape,
    d_scores_fake: TensorId,
    d_scores_real: TensorId,
) -> Result<(TensorId, TensorId)> {
    require_nonempty(tape, d_scores_fake, "adv_d")?;
    require_nonempty(tape, d_scores_real, "adv_d")?;
    let fq = tape.mul(d_scores_fake, d_scores_fake)?;
    let fake_term = tape.mean_all(fq)?;
    let r = tape.add_scalar(d_scores_real, -1.0);
    let rq = tape.mul(r, r)?;
    let real_term = tape.mean_all(rq)?;
    Ok((fake_term, real_term))
}

/// Mean absolute difference over all elements.
pub fn l1_loss(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    Ok(tape.mean_all(ad)?)
}

/// One stage of a feature pyramid: convolution with optional activation
/// and 2x average pooling, tapped after the stage.
pub struct FeatureStage {
    pub conv: Conv2d,
    pub activate: bool,
    pub pool: bool,
}

/// A fixed convolutional pyramid with designated tap layers. Weights are
/// seeded-random by default and frozen for the lifetime of the net; an
/// import path accepts external weights in the checkpoint container format.
pub struct FeatureNet {
    pub store: ParamStore,
    stages: Vec<FeatureStage>,
}

/// Stage widths of the default desk-scale pyramid.
pub const FEATURE_STAGES: [usize; 4] = [16, 32, 64, 128];

impl FeatureNet {
    /// Four-stage seeded-random pyramid over `in_channels` images.
    pub fn seeded(name: &str, in_channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xFEA7));
        let mut stages = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in FEATURE_STAGES.iter().enumerate() {
            let conv = Conv2d::new(
                &mut store,
                &mut rng,
                &format!("{name}.stage{i}"),
                c_in,
                c_out,
                3,
                1,
                1,
                true,
                false,
            );
            stages.push(FeatureStage {
                conv,
                activate: true,
                pool: true,
            });
            c_in = c_out;
        }
        let mut net = FeatureNet { store, stages };
        net.freeze();
        net
    }

    /// Assemble from explicit stages (test hooks and custom imports).
    pub fn from_parts(store: ParamStore, stages: Vec<FeatureStage>) -> Self {
        let mut net = FeatureNet { store, stages };
        net.freeze();
        net
    }

    fn freeze(&mut self) {
        for e in self.store.entries_mut() {
            e.trainable = false;
        }
    }

    /// Activations at every tap for input `x` on the shared tape.
    pub fn taps(&mut self, tape: &mut Tape, x: TensorId) -> Result<Vec<TensorId>> {
        let binding = self.store.bind(tape, false);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut f = Fwd::new(tape, &binding, &mut self.store, &mut rng);
        let mut cur = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = stage.conv.forward(&mut f, cur)?;
            if stage.activate {
                cur = f.tape.leaky_relu(cur, LEAKY_SLOPE);
            }
            // Stop halving once the map is too small to split evenly.
            let s = f.tape.shape(cur).to_vec();
            if stage.pool && s[2] > 1 && s[2] % 2 == 0 && s[3] > 1 && s[3] % 2 == 0 {
                cur = f.tape.avg_pool2d(cur, 2)?;
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Final-stage activations globally average-pooled to one vector per
    /// image: `(N, F)`.
    pub fn pooled(&mut self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let taps = self.taps(tape, x)?;
        let last = *taps.last().expect("at least one stage");
        let s = tape.shape(last).to_vec();
        if s[2] != s[3] {
            return Err(Error::config("pooled features expect square maps"));
        }
        let gap = tape.avg_pool2d(last, s[2])?;
        Ok(tape.reshape(gap, &[s[0], s[1]])?)
    }
}

/// Sum over tap layers of the mean absolute activation difference.
pub fn feature_loss(tape: &mut Tape, a: TensorId, b: TensorId, net: &mut FeatureNet) -> Result<TensorId> {
    let ta = net.taps(tape, a)?;
    let tb = net.taps(tape, b)?;
    let mut total: Option<TensorId> = None;
    for (&xa, &xb) in ta.iter().zip(&tb) {
        let term = l1_loss(tape, xa, xb)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("feature net has stages"))
}

/// Everything the generator minimizes. Returns the in-graph total and the
/// scalar report; `d_scores_fake = None` drops the adversarial term (the
/// no-discriminator ablation).
pub fn total_generator_loss(
    tape: &mut Tape,
    d_scores_fake: Option<TensorId>,
    fake: TensorId,
    target: TensorId,
    feat_p: &mut FeatureNet,
    feat_id: &mut FeatureNet,
    weights: &LossWeights,
) -> Result<(TensorId, LossReport)> {
    weights.validate()?;
    let adv = match d_scores_fake {
        Some(s) => Some(adv_g(tape, s)?),
        None => None,
    };
    let l1 = l1_loss(tape, fake, target)?;
    let p = feature_loss(tape, fake, target, feat_p)?;
    let id = feature_loss(tape, fake, target, feat_id)?;

    let l1_w = tape.scale(l1, weights.w_l1);
    let p_w = tape.scale(p, weights.w_p);
    let id_w = tape.scale(id, weights.w_id);
    let mut total = tape.add(l1_w, p_w)?;
    total = tape.add(total, id_w)?;
    if let Some(adv) = adv {
        let adv_w = tape.scale(adv, weights.w_adv);
        total = tape.add(total, adv_w)?;
    }

    // The report recombines its parts in 64-bit; the in-graph total (which
    // the backward pass consumes) is quantized to the tape precision.
    let adv_v = adv.map(|a| tape.item(a)).unwrap_or(0.0);
    let (l1_v, p_v, id_v) = (tape.item(l1), tape.item(p), tape.item(id));
    let report = LossReport {
        adv_g: adv_v,
        l1: l1_v,
        perceptual: p_v,
        identity: id_v,
        total_g: weights.w_adv * adv_v + weights.w_l1 * l1_v + weights.w_p * p_v + weights.w_id * id_v,
        weights: (*weights).into(),
        ..LossReport::default()
    };
    Ok((total, report))
}

/// Discriminator total plus its two terms for the report.
pub fn total_discriminator_loss(
    tape: &mut Tape,
    d_scores_fake: TensorId,
    d_scores_real: TensorId,
    weights: &LossWeights,
) -> Result<(TensorId, LossReport)> {
    let (fake_term, real_term) = adv_d_parts(tape, d_scores_fake, d_scores_real)?;
    let total = tape.add(fake_term, real_term)?;
    let (fake_v, real_v) = (tape.item(fake_term), tape.item(real_term));
    let report = LossReport {
        adv_d_fake: fake_v,
        adv_d_real: real_v,
        total_d: fake_v + real_v,
        weights: (*weights).into(),
        ..LossReport::default()
    };
    Ok((total, report))
}
