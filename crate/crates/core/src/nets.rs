//! The full generator (landmark embedder + U-Net transformer with SPADE
//! decoder stages) and the conditional patch discriminator.

use rand_chacha::ChaCha12Rng;

use fargan_tensor::{TensorError, TensorId};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Fwd, PoolKind, ResidualDownBlock, SelfAttention, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::spade::SpadeBlock;

/// What feeds the SPADE modulation pathway: embedder features (default) or
/// raw multi-scale masks (the ablation variant that leaks contours).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpadeInput {
    Features,
    Masks,
}

impl SpadeInput {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(SpadeInput::Features),
            "masks" => Ok(SpadeInput::Masks),
            other => Err(Error::config(format!(
                "spade_input must be features|masks, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpadeInput::Features => "features",
            SpadeInput::Masks => "masks",
        }
    }
}

/// Architecture hyper-parameters shared by generator and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub depth: usize,
    pub attention_resolutions: Vec<usize>,
    pub use_attention: bool,
    pub use_noise: bool,
    pub spade_input: SpadeInput,
    pub mask_channels: usize,
    pub embedder_pool: PoolKind,
    /// Hidden width of the SPADE shared convolutions.
    pub spade_hidden: usize,
}

impl NetworkConfig {
    /// Scale-appropriate defaults: depth puts the bottleneck at 8 px and
    /// attention sits at the 32/64-px decoder stages (clipped to what the
    /// resolution offers).
    pub fn for_size(image_size: usize, base_channels: usize, mask_channels: usize) -> Self {
        let depth = (image_size as f64 / 8.0).log2().round().max(1.0) as usize;
        let wanted = [
            (image_size / 4).min(32),
            (image_size / 2).min(64),
        ];
        let valid: Vec<usize> = (0..depth).map(|k| image_size >> k).collect();
        let mut attention_resolutions: Vec<usize> = wanted
            .into_iter()
            .filter(|r| valid.contains(r))
            .collect();
        attention_resolutions.dedup();
        NetworkConfig {
            image_size,
            base_channels,
            max_channels: 512,
            depth,
            attention_resolutions,
            use_attention: true,
            use_noise: true,
            spade_input: SpadeInput::Features,
            mask_channels,
            embedder_pool: PoolKind::Avg,
            // full width at paper scale; narrower on desk-scale images
            spade_hidden: if image_size >= 128 { 128 } else { 64 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        let stride_total = 1usize << self.depth;
        if self.image_size % stride_total != 0 || self.image_size / stride_total < 4 {
            return Err(Error::config(format!(
                "image_size {} must be 2^depth x bottleneck with bottleneck >= 4 (depth {})",
                self.image_size, self.depth
            )));
        }
        if self.mask_channels != 1 && self.mask_channels != 3 {
            return Err(Error::config("mask_channels must be 1 or 3"));
        }
        if self.spade_hidden == 0 || self.base_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        let decoder: Vec<usize> = (0..self.depth).map(|k| self.image_size >> k).collect();
        for r in &self.attention_resolutions {
            if !decoder.contains(r) {
                return Err(Error::config(format!(
                    "attention resolution {r} not among decoder resolutions {decoder:?}"
                )));
            }
        }
        Ok(())
    }

    /// Channel count at pyramid level `k`.
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    fn wants_attention(&self, resolution: usize) -> bool {
        self.use_attention && self.attention_resolutions.contains(&resolution)
    }

    /// Channels feeding the SPADE modulation pathway at level `k`.
    fn mod_channels(&self, level: usize) -> usize {
        match self.spade_input {
            SpadeInput::Features => self.channels(level),
            SpadeInput::Masks => self.mask_channels,
        }
    }
}

/// Landmark-mask encoder emitting one feature map per resolution.
pub struct Embedder {
    in_conv: Conv2d,
    blocks: Vec<ResidualDownBlock>,
    mask_channels: usize,
}

impl Embedder {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &NetworkConfig) -> Self {
        let in_conv = Conv2d::new(
            store,
            rng,
            "embedder.in",
            cfg.mask_channels,
            cfg.channels(0),
            3,
            1,
            1,
            true,
            false,
        );
        let blocks = (0..cfg.depth)
            .map(|k| {
                ResidualDownBlock::new(
                    store,
                    rng,
                    &format!("embedder.block{k}"),
                    cfg.channels(k),
                    cfg.channels(k + 1),
                    cfg.embedder_pool,
                )
            })
            .collect();
        Embedder {
            in_conv,
            blocks,
            mask_channels: cfg.mask_channels,
        }
    }

    /// Feature pyramid with `depth + 1` levels; level `k` has extent
    /// `image_size / 2^k`.
    pub fn forward(&self, f: &mut Fwd, mask: TensorId) -> Result<Vec<TensorId>> {
        let s = f.tape.shape(mask).to_vec();
        if s.len() != 4 || s[1] != self.mask_channels {
            return Err(Error::config(format!(
                "embedder expects {} mask channels, got shape {s:?}",
                self.mask_channels
            )));
        }
        let mut levels = Vec::with_capacity(self.blocks.len() + 1);
        let mut x = self.in_conv.forward(f, mask)?;
        levels.push(x);
        for block in &self.blocks {
            x = block.forward(f, x)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// U-Net image transformer: spectral-normalized encoder, SPADE-modulated
/// decoder with skip connections and optional self-attention.
pub struct Transformer {
    in_conv: Conv2d,
    downs: Vec<Conv2d>,
    bottleneck: SpadeBlock,
    /// Decoder stages ordered from the bottleneck upward (level depth-1..0).
    ups: Vec<Conv2d>,
    spades: Vec<SpadeBlock>,
    attns: Vec<Option<SelfAttention>>,
    out_conv: Conv2d,
    depth: usize,
}

impl Transformer {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &NetworkConfig) -> Result<Self> {
        let in_conv = Conv2d::new(store, rng, "transformer.in", 3, cfg.channels(0), 3, 1, 1, true, false);
        let downs = (0..cfg.depth)
            .map(|k| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("transformer.down{k}"),
                    cfg.channels(k),
                    cfg.channels(k + 1),
                    3,
                    1,
                    1,
                    true,
                    true,
                )
            })
            .collect();
        let bottleneck = SpadeBlock::with_hidden(
            store,
            rng,
            "transformer.bottleneck",
            cfg.channels(cfg.depth),
            cfg.channels(cfg.depth),
            cfg.mod_channels(cfg.depth),
            true,
            cfg.spade_hidden,
        );
        let mut ups = Vec::with_capacity(cfg.depth);
        let mut spades = Vec::with_capacity(cfg.depth);
        let mut attns = Vec::with_capacity(cfg.depth);
        for k in (0..cfg.depth).rev() {
            ups.push(Conv2d::new_transposed(
                store,
                rng,
                &format!("transformer.up{k}"),
                cfg.channels(k + 1),
                cfg.channels(k),
                4,
                2,
                1,
                true,
                true,
            ));
            spades.push(SpadeBlock::with_hidden(
                store,
                rng,
                &format!("transformer.spade{k}"),
                2 * cfg.channels(k),
                cfg.channels(k),
                cfg.mod_channels(k),
                true,
                cfg.spade_hidden,
            ));
            let res = cfg.resolution(k);
            attns.push(if cfg.wants_attention(res) {
                Some(SelfAttention::new(
                    store,
                    rng,
                    &format!("transformer.attn{k}"),
                    cfg.channels(k),
                )?)
            } else {
                None
            });
        }
        let out_conv = Conv2d::new(store, rng, "transformer.out", cfg.channels(0), 3, 3, 1, 1, true, false);
        Ok(Transformer {
            in_conv,
            downs,
            bottleneck,
            ups,
            spades,
            attns,
            out_conv,
            depth: cfg.depth,
        })
    }

    pub fn forward(&self, f: &mut Fwd, x_src: TensorId, feats: &[TensorId]) -> Result<TensorId> {
        if feats.len() != self.depth + 1 {
            return Err(Error::config(format!(
                "feature pyramid has {} levels, transformer expects {}",
                feats.len(),
                self.depth + 1
            )));
        }
        // Encoder; keep per-level features for the skip connections.
        let mut enc = Vec::with_capacity(self.depth + 1);
        let mut x = self.in_conv.forward(f, x_src)?;
        enc.push(x);
        for down in &self.downs {
            let pooled = f.tape.avg_pool2d(x, 2)?;
            let c = down.forward(f, pooled)?;
            x = f.tape.leaky_relu(c, LEAKY_SLOPE);
            enc.push(x);
        }

        let mut d = self.bottleneck.forward(f, x, feats[self.depth])?;
        for (stage, k) in (0..self.depth).rev().enumerate() {
            let up = self.ups[stage].forward(f, d)?;
            let up = f.tape.leaky_relu(up, LEAKY_SLOPE);
            let skip = if f.use_skips {
                enc[k]
            } else {
                let shape = f.tape.shape(enc[k]).to_vec();
                f.tape.zeros(&shape)
            };
            let cat = f.tape.concat_channel(&[up, skip])?;
            d = self.spades[stage].forward(f, cat, feats[k])?;
            if let Some(attn) = &self.attns[stage] {
                d = attn.forward(f, d)?;
            }
        }
        let out = self.out_conv.forward(f, d)?;
        Ok(f.tape.tanh(out))
    }
}

/// The complete generator: landmark pathway plus image transformer.
pub struct Generator {
    pub cfg: NetworkConfig,
    pub embedder: Option<Embedder>,
    pub transformer: Transformer,
}

impl Generator {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = match cfg.spade_input {
            SpadeInput::Features => Some(Embedder::build(store, rng, cfg)),
            SpadeInput::Masks => None,
        };
        let transformer = Transformer::build(store, rng, cfg)?;
        Ok(Generator {
            cfg: cfg.clone(),
            embedder,
            transformer,
        })
    }

    /// Modulation inputs per level: embedder features or resized masks.
    pub fn modulation_features(&self, f: &mut Fwd, mask: TensorId) -> Result<Vec<TensorId>> {
        match &self.embedder {
            Some(e) => e.forward(f, mask),
            None => (0..=self.cfg.depth)
                .map(|k| {
                    let r = self.cfg.resolution(k);
                    Ok(f.tape.nearest_resize(mask, r, r)?)
                })
                .collect(),
        }
    }

    /// Reenact: map a source frame and a target landmark mask to the target
    /// frame estimate in `(-1, 1)`.
    pub fn generate(&self, f: &mut Fwd, x_src: TensorId, mask: TensorId) -> Result<TensorId> {
        let s = f.tape.shape(x_src).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::config(format!(
                "source image shape {s:?} does not match image_size {}",
                self.cfg.image_size
            )));
        }
        let feats = self.modulation_features(f, mask)?;
        self.transformer.forward(f, x_src, &feats)
    }
}

/// Conditional patch discriminator over image concatenated with its mask.
pub struct Discriminator {
    in_conv: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    attn: Option<SelfAttention>,
    patch: Conv2d,
}

impl Discriminator {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha12Rng, cfg: &NetworkConfig) -> Result<Self> {
        let b = cfg.base_channels;
        let in_conv = Conv2d::new(store, rng, "disc.in", 3 + cfg.mask_channels, b, 3, 1, 1, true, true);
        let down1 = Conv2d::new(store, rng, "disc.down1", b, 2 * b, 4, 2, 1, true, true);
        let down2 = Conv2d::new(store, rng, "disc.down2", 2 * b, 4 * b, 4, 2, 1, true, true);
        let attn = if cfg.use_attention {
            Some(SelfAttention::new(store, rng, "disc.attn", 4 * b)?)
        } else {
            None
        };
        let patch = Conv2d::new(store, rng, "disc.patch", 4 * b, 1, 4, 1, 1, true, false);
        Ok(Discriminator {
            in_conv,
            down1,
            down2,
            attn,
            patch,
        })
    }

    /// Real-valued patch score grid; no output non-linearity
    /// (least-squares objective).
    pub fn discriminate(&self, f: &mut Fwd, img: TensorId, mask: TensorId) -> Result<TensorId> {
        let si = f.tape.shape(img).to_vec();
        let sm = f.tape.shape(mask).to_vec();
        if si.len() != 4 || sm.len() != 4 || si[2] != sm[2] || si[3] != sm[3] {
            return Err(TensorError::DimMismatch {
                op: "discriminate",
                axis: "spatial",
                expected: si.get(2).copied().unwrap_or(0) * si.get(3).copied().unwrap_or(0),
                got: sm.get(2).copied().unwrap_or(0) * sm.get(3).copied().unwrap_or(0),
            }
            .into());
        }
        let x = f.tape.concat_channel(&[img, mask])?;
        let x = self.in_conv.forward(f, x)?;
        let x = f.tape.leaky_relu(x, LEAKY_SLOPE);
        let x = self.down1.forward(f, x)?;
        let x = f.tape.leaky_relu(x, LEAKY_SLOPE);
        let x = self.down2.forward(f, x)?;
        let mut x = f.tape.leaky_relu(x, LEAKY_SLOPE);
        if let Some(attn) = &self.attn {
            x = attn.forward(f, x)?;
        }
        self.patch.forward(f, x)
    }
}
