/// Element precision of a tape.
///
/// Storage is always `f64`; in `F32` mode every op result (and every leaf)
/// is rounded through `f32` so values stay representable in 32 bits.
/// Reductions still accumulate in 64-bit before rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Round a buffer in place to this precision.
    pub(crate) fn quantize(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}
