//! Alternating GAN training: one discriminator update on detached fakes,
//! then one generator update, per batch. All randomness is derived from
//! `(seed, step)` streams, so an interrupted run resumed from a checkpoint
//! reproduces the uninterrupted trajectory exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use fargan_tensor::{DType, Tape};

use crate::checkpoint::{self, NamedTensor};
use crate::config::TrainConfig;
use crate::dataset::{sample_pair, DatasetManifest, SamplePair, Split};
use crate::error::{Error, Result};
use crate::landmarks::ContourPalette;
use crate::layers::Fwd;
use crate::losses::{total_discriminator_loss, total_generator_loss, FeatureNet, LossReport};
use crate::metrics::{self, SsimParams};
use crate::nets::{Discriminator, Generator, NetworkConfig};
use crate::optim::{adam_step, lr_schedule, AdamState};
use crate::params::{derive_seed, ParamStore};

// Stream tags for seed derivation.
const STREAM_G_INIT: u64 = 0x61;
const STREAM_D_INIT: u64 = 0x62;
const STREAM_PERCEPTUAL: u64 = 0x70;
const STREAM_IDENTITY: u64 = 0x71;
const STREAM_DATA: u64 = 0xDA7A_0000;
const STREAM_NOISE_D: u64 = 0xD0_0000;
const STREAM_NOISE_G: u64 = 0x60_0000;
const STREAM_REENACT: u64 = 0xEEAC;

/// Network architecture derived from a training configuration.
pub fn network_config(tc: &TrainConfig) -> NetworkConfig {
    let mut nc = NetworkConfig::for_size(tc.image_size, tc.base_channels, tc.mask_mode.channels());
    nc.use_attention = tc.use_attention;
    nc.use_noise = tc.use_noise;
    nc.spade_input = tc.spade_input;
    nc
}

/// Everything owned by one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net_cfg: NetworkConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    pub feat_p: FeatureNet,
    pub feat_id: FeatureNet,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub step: u64,
    pub steps_per_epoch: usize,
    pub last_checkpoint: Option<PathBuf>,
    pub palette: ContourPalette,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = network_config(&cfg);
        net_cfg.validate()?;
        let mut g_store = ParamStore::new();
        let mut rng_g = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_G_INIT));
        let generator = Generator::build(&mut g_store, &mut rng_g, &net_cfg)?;
        let mut d_store = ParamStore::new();
        let mut rng_d = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_D_INIT));
        let discriminator = Discriminator::build(&mut d_store, &mut rng_d, &net_cfg)?;
        let feat_p = FeatureNet::seeded("phi", 3, derive_seed(cfg.seed, STREAM_PERCEPTUAL));
        let feat_id = FeatureNet::seeded("psi", 3, derive_seed(cfg.seed, STREAM_IDENTITY));
        let adam_g = AdamState::new(&g_store);
        let adam_d = AdamState::new(&d_store);
        Ok(Trainer {
            cfg,
            net_cfg,
            generator,
            discriminator,
            g_store,
            d_store,
            feat_p,
            feat_id,
            adam_g,
            adam_d,
            step: 0,
            steps_per_epoch: steps_per_epoch.max(1),
            last_checkpoint: None,
            palette: ContourPalette::default(),
        })
    }

    /// Trainer sized for a dataset: one epoch spans the training frames.
    pub fn for_dataset(cfg: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        let frames = manifest.total_frames(Split::Train);
        let spe = (frames / cfg.batch_size.max(1)).max(1);
        Trainer::new(cfg, spe)
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.steps_per_epoch as u64) as usize
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.epoch(), self.cfg.lr0, self.cfg.total_epochs, self.cfg.schedule)
    }

    /// Deterministic batch for a given step index.
    pub fn sample_step_batch(
        &self,
        manifest: &DatasetManifest,
        step: u64,
    ) -> Result<Vec<SamplePair>> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_DATA + step));
        (0..self.cfg.batch_size)
            .map(|_| {
                sample_pair(
                    manifest,
                    Split::Train,
                    &mut rng,
                    self.cfg.image_size,
                    self.cfg.mask_mode,
                    &self.palette,
                )
            })
            .collect()
    }

    /// One discriminator update on detached fakes, then one generator
    /// update; with the discriminator disabled only the generator runs and
    /// the adversarial term is dropped.
    pub fn train_step(&mut self, batch: &[SamplePair]) -> Result<LossReport> {
        let (x_src, x_tgt, m_tgt, b, s, mc) = stack_batch(batch, &self.cfg)?;
        let precision = self.cfg.precision;
        let lr = self.lr();
        let mut report = LossReport::default();

        if self.cfg.use_discriminator {
            let mut tape = Tape::new(precision);
            let gb = self.g_store.bind(&mut tape, false);
            let db = self.d_store.bind(&mut tape, true);
            let x = tape.constant(x_src.clone(), &[b, 3, s, s])?;
            let m = tape.constant(m_tgt.clone(), &[b, mc, s, s])?;
            let xt = tape.constant(x_tgt.clone(), &[b, 3, s, s])?;
            let fake = {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                    self.cfg.seed,
                    STREAM_NOISE_D + self.step,
                ));
                let mut f = Fwd::new(&mut tape, &gb, &mut self.g_store, &mut rng);
                f.use_noise = self.cfg.use_noise;
                // generator parameters are bound without gradients here, so
                // the fake is already detached from G
                self.generator.generate(&mut f, x, m)?
            };
            let (s_fake, s_real) = {
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                let mut f = Fwd::new(&mut tape, &db, &mut self.d_store, &mut rng);
                f.update_sn = true;
                let s_fake = self.discriminator.discriminate(&mut f, fake, m)?;
                f.update_sn = false;
                let s_real = self.discriminator.discriminate(&mut f, xt, m)?;
                (s_fake, s_real)
            };
            let (total_d, rep_d) =
                total_discriminator_loss(&mut tape, s_fake, s_real, &self.cfg.weights())?;
            if !tape.item(total_d).is_finite() {
                return Err(self.abort("non-finite discriminator loss"));
            }
            tape.backward(total_d)?;
            let grads = self.d_store.collect_grads(&tape, &db);
            adam_step(&mut self.d_store, &grads, &mut self.adam_d, lr, precision)
                .map_err(|e| self.enrich_abort(e))?;
            report.adv_d_fake = rep_d.adv_d_fake;
            report.adv_d_real = rep_d.adv_d_real;
            report.total_d = rep_d.total_d;
        }

        // Generator update.
        let mut tape = Tape::new(precision);
        let gb = self.g_store.bind(&mut tape, true);
        let db = self.d_store.bind(&mut tape, false);
        let x = tape.constant(x_src, &[b, 3, s, s])?;
        let m = tape.constant(m_tgt, &[b, mc, s, s])?;
        let xt = tape.constant(x_tgt, &[b, 3, s, s])?;
        let fake = {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                self.cfg.seed,
                STREAM_NOISE_G + self.step,
            ));
            let mut f = Fwd::new(&mut tape, &gb, &mut self.g_store, &mut rng);
            f.use_noise = self.cfg.use_noise;
            f.update_sn = true;
            self.generator.generate(&mut f, x, m)?
        };
        let scores = if self.cfg.use_discriminator {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let mut f = Fwd::new(&mut tape, &db, &mut self.d_store, &mut rng);
            Some(self.discriminator.discriminate(&mut f, fake, m)?)
        } else {
            None
        };
        let weights = self.cfg.weights();
        let (total_g, rep_g) = total_generator_loss(
            &mut tape,
            scores,
            fake,
            xt,
            &mut self.feat_p,
            &mut self.feat_id,
            &weights,
        )?;
        if !tape.item(total_g).is_finite() {
            return Err(self.abort("non-finite generator loss"));
        }
        tape.backward(total_g)?;
        let grads = self.g_store.collect_grads(&tape, &gb);
        adam_step(&mut self.g_store, &grads, &mut self.adam_g, lr, precision)
            .map_err(|e| self.enrich_abort(e))?;

        report.adv_g = rep_g.adv_g;
        report.l1 = rep_g.l1;
        report.perceptual = rep_g.perceptual;
        report.identity = rep_g.identity;
        report.total_g = rep_g.total_g;
        report.weights = rep_g.weights;
        self.step += 1;
        Ok(report)
    }

    fn abort(&self, msg: &str) -> Error {
        Error::TrainAbort {
            step: self.step,
            msg: msg.to_string(),
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn enrich_abort(&self, e: Error) -> Error {
        match e {
            Error::TrainAbort { step, msg, .. } => Error::TrainAbort {
                step,
                msg,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            other => other,
        }
    }

    /// CSV header matching [`Trainer::csv_line`].
    pub const CSV_HEADER: &'static str = "step,lr,adv_g,l1,perceptual,identity,total_g,total_d";

    pub fn csv_line(&self, step: u64, lr: f64, r: &LossReport) -> String {
        format!(
            "{step},{lr},{},{},{},{},{},{}",
            r.adv_g, r.l1, r.perceptual, r.identity, r.total_g, r.total_d
        )
    }

    /// Run `steps` optimizer steps, one CSV line each; checkpoints land in
    /// `out_dir` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        manifest: &DatasetManifest,
        steps: u64,
        out_dir: Option<&Path>,
        checkpoint_every: u64,
        sink: &mut dyn Write,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::with_capacity(steps as usize);
        writeln!(sink, "{}", Self::CSV_HEADER).map_err(|e| Error::io("writing csv", e))?;
        let target = self.step + steps;
        while self.step < target {
            let batch = self.sample_step_batch(manifest, self.step)?;
            let lr = self.lr();
            let step_before = self.step;
            let report = self.train_step(&batch)?;
            writeln!(sink, "{}", self.csv_line(step_before, lr, &report))
                .map_err(|e| Error::io("writing csv", e))?;
            if let Some(dir) = out_dir {
                if checkpoint_every > 0
                    && (self.step % checkpoint_every == 0 || self.step == target)
                {
                    self.save_checkpoint(&dir.join("checkpoint.farg"))?;
                }
            }
            reports.push(report);
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("checkpoint.farg"))?;
        }
        Ok(reports)
    }

    // ---- persistence -----------------------------------------------------

    /// Everything needed to resume exactly: both stores (trainable weights
    /// in the configured precision, power-iteration state in f64), both
    /// Adam states, the step counter, and the config echo.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut tensors = vec![
            NamedTensor::scalar("meta.step", self.step as f64),
            NamedTensor::scalar("meta.steps_per_epoch", self.steps_per_epoch as f64),
        ];
        tensors.extend(self.cfg.to_tensors());
        tensors.extend(store_tensors_mixed("g", &self.g_store, self.cfg.precision));
        tensors.extend(store_tensors_mixed("d", &self.d_store, self.cfg.precision));
        tensors.extend(self.adam_g.to_tensors("adam_g", &self.g_store, self.cfg.precision));
        tensors.extend(self.adam_d.to_tensors("adam_d", &self.d_store, self.cfg.precision));
        checkpoint::write_container(path, &tensors)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let tensors = checkpoint::read_container(path)?;
        let cfg = TrainConfig::from_tensors(&tensors)?;
        let steps_per_epoch = checkpoint::find_scalar(&tensors, "meta.steps_per_epoch")? as usize;
        let mut trainer = Trainer::new(cfg, steps_per_epoch)?;
        checkpoint::load_store(&tensors, "g", &mut trainer.g_store)?;
        checkpoint::load_store(&tensors, "d", &mut trainer.d_store)?;
        trainer
            .adam_g
            .load_tensors(&tensors, "adam_g", &trainer.g_store)?;
        trainer
            .adam_d
            .load_tensors(&tensors, "adam_d", &trainer.d_store)?;
        trainer.step = checkpoint::find_scalar(&tensors, "meta.step")? as u64;
        trainer.last_checkpoint = Some(path.to_path_buf());
        Ok(trainer)
    }

    // ---- inference -------------------------------------------------------

    /// Deterministic reenactment of one source frame under a target mask.
    /// Noise follows the config; its stream is fixed, so repeated calls and
    /// separate processes agree bitwise.
    pub fn reenact(&mut self, x_src: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
        let s = self.cfg.image_size;
        let mc = self.cfg.mask_mode.channels();
        let mut tape = Tape::new(self.cfg.precision);
        let gb = self.g_store.bind(&mut tape, false);
        let x = tape.constant(x_src.to_vec(), &[1, 3, s, s])?;
        let m = tape.constant(mask.to_vec(), &[1, mc, s, s])?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_REENACT));
        let mut f = Fwd::new(&mut tape, &gb, &mut self.g_store, &mut rng);
        f.use_noise = self.cfg.use_noise;
        let y = self.generator.generate(&mut f, x, m)?;
        Ok(tape.data(y).to_vec())
    }

    /// Reenact consecutive-frame pairs across a split and score the results:
    /// mean SSIM against the true targets and the Fréchet distance between
    /// generated and real target sets under the fixed desk extractor.
    pub fn evaluate(&mut self, manifest: &DatasetManifest, split: Split) -> Result<EvalReport> {
        let s = self.cfg.image_size;
        let mut fakes = Vec::new();
        let mut reals = Vec::new();
        let mut ssim_sum = 0.0;
        let params = SsimParams::default();
        for &idx in manifest.split_members(split) {
            let frames = &manifest.identities[idx].frames;
            for w in 0..frames.len().saturating_sub(1) {
                let (src, _) = crate::dataset::load_frame(&frames[w], s)?;
                let (tgt, lm_tgt) = crate::dataset::load_frame(&frames[w + 1], s)?;
                let mask = crate::dataset::landmark_mask(
                    &lm_tgt,
                    s,
                    self.cfg.mask_mode,
                    &self.palette,
                )?;
                let fake = self.reenact(&src, &mask.to_tensor_data())?;
                ssim_sum += ssim_of(&fake, &tgt, s, &params)?;
                fakes.push(fake);
                reals.push(tgt);
            }
        }
        if fakes.len() < 2 {
            return Err(Error::Metric(
                "evaluation needs at least two frame pairs".into(),
            ));
        }
        let mut extractor = metrics::fid_extractor();
        let sf = metrics::feature_stats(&fakes, 3, s, &mut extractor)?;
        let sr = metrics::feature_stats(&reals, 3, s, &mut extractor)?;
        Ok(EvalReport {
            ssim_mean: ssim_sum / fakes.len() as f64,
            fid: metrics::frechet_distance(&sf, &sr)?,
            n_images: fakes.len(),
        })
    }
}

fn ssim_of(a: &[f64], b: &[f64], size: usize, p: &SsimParams) -> Result<f64> {
    metrics::ssim(a, b, 3, size, p)
}

/// Evaluation summary emitted by the `evaluate` command.
#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub fid: f64,
    pub n_images: usize,
}

impl EvalReport {
    /// The line-oriented report format.
    pub fn to_text(&self) -> String {
        format!(
            "ssim_mean={}\nfid={}\nn_images={}\n",
            self.ssim_mean, self.fid, self.n_images
        )
    }
}

/// Trainable entries in the requested precision; persistent state (power
/// iteration vectors) always in f64 so round-trips cost nothing.
fn store_tensors_mixed(prefix: &str, store: &ParamStore, dtype: DType) -> Vec<NamedTensor> {
    store
        .entries()
        .iter()
        .map(|e| NamedTensor {
            name: format!("{prefix}.{}", e.name),
            dtype: if e.trainable { dtype } else { DType::F64 },
            shape: e.shape.clone(),
            data: e.data.clone(),
        })
        .collect()
}

fn stack_batch(
    batch: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize, usize, usize)> {
    if batch.is_empty() {
        return Err(Error::dataset("empty batch"));
    }
    let s = cfg.image_size;
    let mc = cfg.mask_mode.channels();
    let b = batch.len();
    let mut x_src = Vec::with_capacity(b * 3 * s * s);
    let mut x_tgt = Vec::with_capacity(b * 3 * s * s);
    let mut m_tgt = Vec::with_capacity(b * mc * s * s);
    for p in batch {
        if p.size != s || p.mask_channels != mc {
            return Err(Error::dataset(format!(
                "sample sized {}/{} does not match config {s}/{mc}",
                p.size, p.mask_channels
            )));
        }
        x_src.extend_from_slice(&p.x_src);
        x_tgt.extend_from_slice(&p.x_tgt);
        m_tgt.extend_from_slice(&p.m_tgt);
    }
    Ok((x_src, x_tgt, m_tgt, b, s, mc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            image_size: 32,
            base_channels: 8,
            batch_size: 2,
            lr0: 1e-3,
            seed: 17,
            train_steps: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fixed_seed_runs_produce_identical_traces() {
        let manifest = DatasetManifest::synthetic(17, 3, 3).unwrap();
        let run = || {
            let mut t = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
            let mut out: Vec<LossReport> = Vec::new();
            for step in 0..3 {
                let batch = t.sample_step_batch(&manifest, step).unwrap();
                out.push(t.train_step(&batch).unwrap());
            }
            out
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total_g, y.total_g);
            assert_eq!(x.total_d, y.total_d);
            assert_eq!(x.l1, y.l1);
        }
    }

    #[test]
    fn feature_nets_stay_bitwise_frozen() {
        let manifest = DatasetManifest::synthetic(5, 3, 3).unwrap();
        let mut t = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let before_p: Vec<Vec<f64>> = t.feat_p.store.entries().iter().map(|e| e.data.clone()).collect();
        let before_id: Vec<Vec<f64>> =
            t.feat_id.store.entries().iter().map(|e| e.data.clone()).collect();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        t.train_step(&batch).unwrap();
        for (e, b) in t.feat_p.store.entries().iter().zip(&before_p) {
            assert_eq!(&e.data, b, "{} changed", e.name);
        }
        for (e, b) in t.feat_id.store.entries().iter().zip(&before_id) {
            assert_eq!(&e.data, b, "{} changed", e.name);
        }
    }

    #[test]
    fn report_totals_recombine() {
        let manifest = DatasetManifest::synthetic(7, 3, 3).unwrap();
        let mut t = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        let r = t.train_step(&batch).unwrap();
        let w = &r.weights;
        let total = w.w_adv * r.adv_g + w.w_l1 * r.l1 + w.w_p * r.perceptual + w.w_id * r.identity;
        assert!((r.total_g - total).abs() < 1e-7);
        assert!((r.total_d - (r.adv_d_fake + r.adv_d_real)).abs() < 1e-7);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::synthetic(9, 3, 3).unwrap();
        let mut t = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        t.train_step(&batch).unwrap();

        let src = batch[0].x_src.clone();
        let mask = batch[0].m_tgt.clone();
        let before = t.reenact(&src, &mask).unwrap();

        let path = dir.path().join("ck.farg");
        t.save_checkpoint(&path).unwrap();
        let mut loaded = Trainer::load_checkpoint(&path).unwrap();
        let after = loaded.reenact(&src, &mask).unwrap();
        assert_eq!(before, after);

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("ck2.farg");
        loaded.save_checkpoint(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn interrupt_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::synthetic(11, 3, 3).unwrap();

        // uninterrupted: 4 steps
        let mut full = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let mut full_trace = Vec::new();
        for step in 0..4 {
            let batch = full.sample_step_batch(&manifest, step).unwrap();
            full_trace.push(full.train_step(&batch).unwrap().total_g);
        }

        // interrupted after 2, resumed from checkpoint
        let mut first = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let mut trace = Vec::new();
        for step in 0..2 {
            let batch = first.sample_step_batch(&manifest, step).unwrap();
            trace.push(first.train_step(&batch).unwrap().total_g);
        }
        let path = dir.path().join("ck.farg");
        first.save_checkpoint(&path).unwrap();
        drop(first);
        let mut resumed = Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 2);
        for step in 2..4 {
            let batch = resumed.sample_step_batch(&manifest, step).unwrap();
            trace.push(resumed.train_step(&batch).unwrap().total_g);
        }

        for (i, (a, b)) in full_trace.iter().zip(&trace).enumerate() {
            assert!(
                (a - b).abs() <= 1e-7 * a.abs().max(1.0),
                "step {i}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn truncated_checkpoint_leaves_no_partial_trainer() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::synthetic(13, 3, 3).unwrap();
        let mut t = Trainer::for_dataset(tiny_train_config(), &manifest).unwrap();
        let path = dir.path().join("ck.farg");
        t.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Trainer::load_checkpoint(&path).is_err());
    }

    #[test]
    fn no_discriminator_mode_drops_adversarial_term() {
        let manifest = DatasetManifest::synthetic(15, 3, 3).unwrap();
        let cfg = TrainConfig {
            use_discriminator: false,
            ..tiny_train_config()
        };
        let mut t = Trainer::for_dataset(cfg, &manifest).unwrap();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        let r = t.train_step(&batch).unwrap();
        assert_eq!(r.adv_g, 0.0);
        assert_eq!(r.total_d, 0.0);
        assert!(r.l1 > 0.0);
    }

    #[test]
    fn reenact_is_reproducible_with_noise_off() {
        let manifest = DatasetManifest::synthetic(19, 2, 2).unwrap();
        let cfg = TrainConfig {
            use_noise: false,
            ..tiny_train_config()
        };
        let mut t = Trainer::for_dataset(cfg, &manifest).unwrap();
        let batch = t.sample_step_batch(&manifest, 0).unwrap();
        let a = t.reenact(&batch[0].x_src, &batch[0].m_tgt).unwrap();
        let b = t.reenact(&batch[0].x_src, &batch[0].m_tgt).unwrap();
        assert_eq!(a, b);
    }
}
