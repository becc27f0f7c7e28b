//! Training configuration and its line-oriented `key = value` file format.
//! Unknown and duplicated keys are errors so typos surface immediately.

use fargan_tensor::DType;

use crate::error::{Error, Result};
use crate::landmarks::MaskMode;
use crate::losses::LossWeights;
use crate::nets::SpadeInput;
use crate::optim::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Decay horizon: the learning rate reaches zero here.
    pub total_epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub w_adv: f64,
    pub w_l1: f64,
    pub w_p: f64,
    pub w_id: f64,
    pub use_attention: bool,
    pub use_noise: bool,
    pub mask_mode: MaskMode,
    pub spade_input: SpadeInput,
    pub use_discriminator: bool,
    pub schedule: Schedule,
    /// Number of optimizer steps the `train` command runs.
    pub train_steps: usize,
    pub base_channels: usize,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            total_epochs: 100,
            batch_size: 4,
            image_size: 64,
            seed: 0,
            w_adv: 1.0,
            w_l1: 20.0,
            w_p: 2.0,
            w_id: 0.2,
            use_attention: true,
            use_noise: true,
            mask_mode: MaskMode::Contour,
            spade_input: SpadeInput::Features,
            use_discriminator: true,
            schedule: Schedule::Linear,
            train_steps: 200,
            base_channels: 64,
            precision: DType::F32,
        }
    }
}

pub const CONFIG_KEYS: [&str; 18] = [
    "lr0",
    "total_epochs",
    "batch_size",
    "image_size",
    "seed",
    "w_adv",
    "w_l1",
    "w_p",
    "w_id",
    "use_attention",
    "use_noise",
    "mask_mode",
    "spade_input",
    "use_discriminator",
    "schedule",
    "train_steps",
    "base_channels",
    "precision",
];

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_adv: self.w_adv,
            w_l1: self.w_l1,
            w_p: self.w_p,
            w_id: self.w_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::config("lr0 must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.train_steps == 0 {
            return Err(Error::config("train_steps must be at least 1"));
        }
        self.weights().validate()?;
        Ok(())
    }

    /// Parse the config file format: one `key = value` per line; `#` starts
    /// a comment line; every key must be a known TrainConfig key and appear
    /// at most once.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: line_no,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let bad_num = |what: &str| err(format!("cannot parse `{value}` as {what}"));
            match key {
                "lr0" => cfg.lr0 = value.parse().map_err(|_| bad_num("float"))?,
                "total_epochs" => cfg.total_epochs = value.parse().map_err(|_| bad_num("integer"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad_num("integer"))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad_num("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad_num("integer"))?,
                "w_adv" => cfg.w_adv = value.parse().map_err(|_| bad_num("float"))?,
                "w_l1" => cfg.w_l1 = value.parse().map_err(|_| bad_num("float"))?,
                "w_p" => cfg.w_p = value.parse().map_err(|_| bad_num("float"))?,
                "w_id" => cfg.w_id = value.parse().map_err(|_| bad_num("float"))?,
                "use_attention" => cfg.use_attention = parse_bool(value).map_err(|m| err(m))?,
                "use_noise" => cfg.use_noise = parse_bool(value).map_err(|m| err(m))?,
                "use_discriminator" => {
                    cfg.use_discriminator = parse_bool(value).map_err(|m| err(m))?
                }
                "mask_mode" => cfg.mask_mode = MaskMode::parse(value)?,
                "spade_input" => cfg.spade_input = SpadeInput::parse(value)?,
                "schedule" => cfg.schedule = Schedule::parse(value)?,
                "train_steps" => cfg.train_steps = value.parse().map_err(|_| bad_num("integer"))?,
                "base_channels" => {
                    cfg.base_channels = value.parse().map_err(|_| bad_num("integer"))?
                }
                "precision" => {
                    cfg.precision = match value {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(err(format!("precision must be f32|f64, got `{value}`"))),
                    }
                }
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr0 = {}\n\
             total_epochs = {}\n\
             batch_size = {}\n\
             image_size = {}\n\
             seed = {}\n\
             w_adv = {}\n\
             w_l1 = {}\n\
             w_p = {}\n\
             w_id = {}\n\
             use_attention = {}\n\
             use_noise = {}\n\
             mask_mode = {}\n\
             spade_input = {}\n\
             use_discriminator = {}\n\
             schedule = {}\n\
             train_steps = {}\n\
             base_channels = {}\n\
             precision = {}\n",
            self.lr0,
            self.total_epochs,
            self.batch_size,
            self.image_size,
            self.seed,
            self.w_adv,
            self.w_l1,
            self.w_p,
            self.w_id,
            self.use_attention,
            self.use_noise,
            self.mask_mode.as_str(),
            self.spade_input.as_str(),
            self.use_discriminator,
            self.schedule.as_str(),
            self.train_steps,
            self.base_channels,
            match self.precision {
                DType::F32 => "f32",
                DType::F64 => "f64",
            },
        )
    }

    /// Scalar tensors echoing the config into a checkpoint.
    pub fn to_tensors(&self) -> Vec<crate::checkpoint::NamedTensor> {
        use crate::checkpoint::NamedTensor as T;
        vec![
            T::scalar("cfg.lr0", self.lr0),
            T::scalar("cfg.total_epochs", self.total_epochs as f64),
            T::scalar("cfg.batch_size", self.batch_size as f64),
            T::scalar("cfg.image_size", self.image_size as f64),
            T::scalar("cfg.seed_lo", (self.seed & 0xFFFF_FFFF) as f64),
            T::scalar("cfg.seed_hi", (self.seed >> 32) as f64),
            T::scalar("cfg.w_adv", self.w_adv),
            T::scalar("cfg.w_l1", self.w_l1),
            T::scalar("cfg.w_p", self.w_p),
            T::scalar("cfg.w_id", self.w_id),
            T::scalar("cfg.use_attention", self.use_attention as u8 as f64),
            T::scalar("cfg.use_noise", self.use_noise as u8 as f64),
            T::scalar(
                "cfg.mask_mode",
                matches!(self.mask_mode, MaskMode::Binary) as u8 as f64,
            ),
            T::scalar(
                "cfg.spade_input",
                matches!(self.spade_input, SpadeInput::Masks) as u8 as f64,
            ),
            T::scalar("cfg.use_discriminator", self.use_discriminator as u8 as f64),
            T::scalar(
                "cfg.schedule",
                matches!(self.schedule, Schedule::WarmLinear) as u8 as f64,
            ),
            T::scalar("cfg.train_steps", self.train_steps as f64),
            T::scalar("cfg.base_channels", self.base_channels as f64),
            T::scalar(
                "cfg.precision",
                matches!(self.precision, DType::F64) as u8 as f64,
            ),
        ]
    }

    pub fn from_tensors(tensors: &[crate::checkpoint::NamedTensor]) -> Result<Self> {
        use crate::checkpoint::find_scalar as f;
        let seed_lo = f(tensors, "cfg.seed_lo")? as u64;
        let seed_hi = f(tensors, "cfg.seed_hi")? as u64;
        Ok(TrainConfig {
            lr0: f(tensors, "cfg.lr0")?,
            total_epochs: f(tensors, "cfg.total_epochs")? as usize,
            batch_size: f(tensors, "cfg.batch_size")? as usize,
            image_size: f(tensors, "cfg.image_size")? as usize,
            seed: (seed_hi << 32) | seed_lo,
            w_adv: f(tensors, "cfg.w_adv")?,
            w_l1: f(tensors, "cfg.w_l1")?,
            w_p: f(tensors, "cfg.w_p")?,
            w_id: f(tensors, "cfg.w_id")?,
            use_attention: f(tensors, "cfg.use_attention")? != 0.0,
            use_noise: f(tensors, "cfg.use_noise")? != 0.0,
            mask_mode: if f(tensors, "cfg.mask_mode")? != 0.0 {
                MaskMode::Binary
            } else {
                MaskMode::Contour
            },
            spade_input: if f(tensors, "cfg.spade_input")? != 0.0 {
                SpadeInput::Masks
            } else {
                SpadeInput::Features
            },
            use_discriminator: f(tensors, "cfg.use_discriminator")? != 0.0,
            schedule: if f(tensors, "cfg.schedule")? != 0.0 {
                Schedule::WarmLinear
            } else {
                Schedule::Linear
            },
            train_steps: f(tensors, "cfg.train_steps")? as usize,
            base_channels: f(tensors, "cfg.base_channels")? as usize,
            precision: if f(tensors, "cfg.precision")? != 0.0 {
                DType::F64
            } else {
                DType::F32
            },
        })
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("cannot parse `{other}` as bool")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_conventions() {
        let c = TrainConfig::default();
        assert_eq!(c.lr0, 5e-5);
        assert_eq!(c.total_epochs, 100);
        assert_eq!((c.w_l1, c.w_p, c.w_id), (20.0, 2.0, 0.2));
    }

    #[test]
    fn parse_roundtrip() {
        let c = TrainConfig {
            lr0: 1e-3,
            seed: 0xDEAD_BEEF_CAFE,
            mask_mode: MaskMode::Binary,
            base_channels: 16,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(&c.to_text(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_error_with_line() {
        let err = TrainConfig::parse("lr0 = 1e-4\nlr_zero = 2\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg:2") && msg.contains("lr_zero"), "{msg}");
    }

    #[test]
    fn duplicate_key_is_error() {
        assert!(TrainConfig::parse("seed = 1\nseed = 2\n", "cfg").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let c = TrainConfig::parse("# comment\n\nseed = 9\n", "cfg").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn tensor_echo_roundtrip() {
        let c = TrainConfig {
            seed: u64::MAX - 12345,
            precision: DType::F64,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_tensors(&c.to_tensors()).unwrap();
        assert_eq!(back, c);
    }
}
