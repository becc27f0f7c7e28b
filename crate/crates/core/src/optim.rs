//! Adam with bias correction and the linear learning-rate decay schedule.

use fargan_tensor::DType;

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators aligned with a store's entries.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }

    /// Serialize moments and step under `prefix` (e.g. `adam_g`).
    pub fn to_tensors(&self, prefix: &str, store: &ParamStore, dtype: DType) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::scalar(format!("{prefix}.step"), self.step as f64)];
        for (i, e) in store.entries().iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.m.{}", e.name),
                dtype,
                shape: e.shape.clone(),
                data: self.m[i].clone(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.v.{}", e.name),
                dtype,
                shape: e.shape.clone(),
                data: self.v[i].clone(),
            });
        }
        out
    }

    pub fn load_tensors(
        &mut self,
        tensors: &[NamedTensor],
        prefix: &str,
        store: &ParamStore,
    ) -> Result<()> {
        let step = crate::checkpoint::find_scalar(tensors, &format!("{prefix}.step"))?;
        self.step = step as u64;
        for (i, e) in store.entries().iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let name = format!("{prefix}.{kind}.{}", e.name);
                let t = tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| Error::config(format!("checkpoint missing `{name}`")))?;
                if t.shape != e.shape {
                    return Err(Error::config(format!("`{name}`: shape mismatch")));
                }
                *slot = t.data.clone();
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every trainable entry with a
/// gradient. Parameters and moments are quantized to `precision` after the
/// update so checkpoint round-trips are lossless.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    precision: DType,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::config(format!(
            "gradient list has {} entries, store has {}",
            grads.len(),
            store.len()
        )));
    }
    if lr < 0.0 {
        return Err(Error::config("learning rate must be non-negative"));
    }
    // Validate before mutating anything so an abort leaves state untouched.
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !store.entries()[i].trainable {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainAbort {
                    step: state.step,
                    msg: format!(
                        "non-finite gradient in parameter `{}`",
                        store.entries()[i].name
                    ),
                    last_checkpoint: None,
                });
            }
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !store.entries()[i].trainable {
            continue;
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = &mut store.entries_mut()[i].data;
        for k in 0..g.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        if precision == DType::F32 {
            for buf in [&mut *m, &mut *v, &mut *p] {
                for x in buf.iter_mut() {
                    *x = *x as f32 as f64;
                }
            }
        }
    }
    state.step = t;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Linear decay from epoch 0, reaching zero at `total_epochs`.
    Linear,
    /// Constant for the first half, then linear decay to zero.
    WarmLinear,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "warm-linear" => Ok(Schedule::WarmLinear),
            other => Err(Error::config(format!(
                "schedule must be linear|warm-linear, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::WarmLinear => "warm-linear",
        }
    }
}

/// Learning rate for the given epoch.
pub fn lr_schedule(epoch: usize, lr0: f64, total_epochs: usize, schedule: Schedule) -> f64 {
    let total = total_epochs.max(1) as f64;
    match schedule {
        Schedule::Linear => lr0 * (1.0 - epoch as f64 / total).max(0.0),
        Schedule::WarmLinear => {
            let warm = total / 2.0;
            if (epoch as f64) < warm {
                lr0
            } else {
                lr0 * ((total - epoch as f64) / (total - warm)).max(0.0)
            }
        }
    }
}
