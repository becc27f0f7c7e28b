//! Image-quality metrics: windowed SSIM over grayscale luma and Fréchet
//! distance between Gaussian fits of pooled feature distributions.

use nalgebra::{DMatrix, DVector};

use fargan_tensor::{DType, Tape};

use crate::error::{Error, Result};
use crate::losses::FeatureNet;

/// Seed of the desk-scale Fréchet feature extractor. Fixed globally (and
/// independent of any training seed) so scores are comparable across runs.
pub const FID_EXTRACTOR_SEED: u64 = 0x52D;

pub fn fid_extractor() -> FeatureNet {
    FeatureNet::seeded("fid", 3, FID_EXTRACTOR_SEED)
}

/// Gaussian window and stabilization constants for SSIM.
#[derive(Debug, Clone)]
pub struct SsimParams {
    pub window: Vec<f64>,
    pub window_side: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::new(11, 1.5, 1.0)
    }
}

impl SsimParams {
    pub fn new(side: usize, sigma: f64, dynamic_range: f64) -> Self {
        let c = (side as f64 - 1.0) / 2.0;
        let mut window = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                window.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = window.iter().sum();
        for w in window.iter_mut() {
            *w /= sum;
        }
        SsimParams {
            window,
            window_side: side,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        }
    }
}

/// Grayscale luma in `[0, 1]` from CHW `[-1, 1]` data (BT.601 weights for
/// RGB; single-channel data is rescaled directly).
fn to_luma(data: &[f64], channels: usize, size: usize) -> Result<Vec<f64>> {
    let s2 = size * size;
    match channels {
        3 => Ok((0..s2)
            .map(|p| {
                let r = (data[p] + 1.0) / 2.0;
                let g = (data[s2 + p] + 1.0) / 2.0;
                let b = (data[2 * s2 + p] + 1.0) / 2.0;
                0.299 * r + 0.587 * g + 0.114 * b
            })
            .collect()),
        1 => Ok(data.iter().map(|v| (v + 1.0) / 2.0).collect()),
        c => Err(Error::Metric(format!("ssim expects 1 or 3 channels, got {c}"))),
    }
}

/// Mean local SSIM over all valid (fully inside) window positions.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, size: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != b.len() || a.len() != channels * size * size {
        return Err(Error::Metric(format!(
            "ssim: buffers must both be {channels}x{size}x{size}"
        )));
    }
    let side = p.window_side;
    if size < side {
        return Err(Error::Metric(format!(
            "ssim: image of {size} px is smaller than the {side} px window"
        )));
    }
    let (la, lb) = (to_luma(a, channels, size)?, to_luma(b, channels, size)?);
    let valid = size - side + 1;
    let mut total = 0.0;
    for wy in 0..valid {
        for wx in 0..valid {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for ky in 0..side {
                for kx in 0..side {
                    let w = p.window[ky * side + kx];
                    let va = la[(wy + ky) * size + wx + kx];
                    let vb = lb[(wy + ky) * size + wx + kx];
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let local = ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2))
                / ((ma * ma + mb * mb + p.c1) * (var_a + var_b + p.c2));
            total += local;
        }
    }
    Ok(total / (valid * valid) as f64)
}

/// Gaussian fit of a pooled-feature distribution.
#[derive(Debug, Clone)]
pub struct FrechetStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Numerical PSD check: symmetric with eigenvalues above `-1e-8`.
    pub fn validate(&self) -> Result<()> {
        let n = self.sigma.nrows();
        if self.sigma.ncols() != n || n != self.mu.len() {
            return Err(Error::Metric("covariance shape mismatch".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.sigma[(i, j)] - self.sigma[(j, i)]).abs() > 1e-9 {
                    return Err(Error::Metric("covariance not symmetric".into()));
                }
            }
        }
        let eig = self.sigma.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-8) {
            return Err(Error::Metric("covariance has negative eigenvalues".into()));
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance of pooled features over a set of
/// CHW `[-1, 1]` images. Needs at least two images.
pub fn feature_stats(
    images: &[Vec<f64>],
    channels: usize,
    size: usize,
    extractor: &mut FeatureNet,
) -> Result<FrechetStats> {
    if images.len() < 2 {
        return Err(Error::Metric(format!(
            "feature_stats needs at least 2 images, got {}",
            images.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut tape = Tape::new(DType::F64);
        let mut data = Vec::with_capacity(chunk.len() * channels * size * size);
        for img in chunk {
            if img.len() != channels * size * size {
                return Err(Error::Metric("image buffer size mismatch".into()));
            }
            data.extend_from_slice(img);
        }
        let x = tape.constant(data, &[chunk.len(), channels, size, size])?;
        let pooled = extractor.pooled(&mut tape, x)?;
        let f = tape.shape(pooled)[1];
        for i in 0..chunk.len() {
            rows.push(tape.data(pooled)[i * f..][..f].to_vec());
        }
    }
    let n = rows.len();
    let f = rows[0].len();
    let mut mu = vec![0.0; f];
    for row in &rows {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut sigma = DMatrix::zeros(f, f);
    for row in &rows {
        for i in 0..f {
            let di = row[i] - mu[i];
            for j in 0..f {
                sigma[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    sigma /= (n - 1) as f64;
    Ok(FrechetStats {
        mu: DVector::from_vec(mu),
        sigma,
    })
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// clamping small negative eigenvalues; below `-1e-6` is an error.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for l in vals.iter_mut() {
        if *l < -1e-6 {
            return Err(Error::Metric(format!(
                "matrix square root unstable: eigenvalue {l}"
            )));
        }
        *l = l.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_distance(s1: &FrechetStats, s2: &FrechetStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::Metric(format!(
            "feature dimensions differ: {} vs {}",
            s1.dim(),
            s2.dim()
        )));
    }
    s1.validate()?;
    s2.validate()?;
    let dmu = &s1.mu - &s2.mu;
    let half = sqrtm_psd(&s1.sigma)?;
    let inner = &half * &s2.sigma * &half;
    let cross = sqrtm_psd(&inner)?;
    let d = dmu.norm_squared() + s1.sigma.trace() + s2.sigma.trace() - 2.0 * cross.trace();
    if d < -1e-6 {
        return Err(Error::Metric(format!("negative Frechet distance {d}")));
    }
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_image(r: &mut ChaCha12Rng, channels: usize, size: usize) -> Vec<f64> {
        (0..channels * size * size).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn window_sums_to_one() {
        let p = SsimParams::default();
        let s: f64 = p.window.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(p.window.len(), 121);
    }

    #[test]
    fn ssim_self_is_one() {
        let mut r = rng(1);
        let img = random_image(&mut r, 3, 32);
        let v = ssim(&img, &img, 3, 32, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ssim_inverted_half_and_half_is_low() {
        // left half black, right half white; the inverse flips them
        let size = 32usize;
        let mut img = vec![-1.0; size * size];
        for y in 0..size {
            for x in size / 2..size {
                img[y * size + x] = 1.0;
            }
        }
        let inv: Vec<f64> = img.iter().map(|v| -v).collect();
        let v = ssim(&img, &inv, 1, size, &SsimParams::default()).unwrap();
        assert!(v < 0.1, "{v}");
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let mut r = rng(2);
        let size = 32usize;
        // smooth gradient image
        let img: Vec<f64> = (0..size * size)
            .map(|i| (i % size) as f64 / size as f64 * 2.0 - 1.0)
            .collect();
        let noise: Vec<f64> = (0..size * size).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut last = 1.0;
        for sigma in [0.05, 0.1, 0.2] {
            let noisy: Vec<f64> = img
                .iter()
                .zip(&noise)
                .map(|(v, n)| (v + sigma * n).clamp(-1.0, 1.0))
                .collect();
            let v = ssim(&img, &noisy, 1, size, &SsimParams::default()).unwrap();
            assert!(v < last, "sigma {sigma}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut r = rng(3);
        let a = random_image(&mut r, 3, 24);
        let b = random_image(&mut r, 3, 24);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, 3, 24, &p).unwrap();
        let ba = ssim(&b, &a, 3, 24, &p).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = vec![0.0; 8 * 8];
        assert!(ssim(&img, &img, 1, 8, &SsimParams::default()).is_err());
    }

    #[test]
    fn feature_stats_identical_images_zero_covariance() {
        let mut ex = fid_extractor();
        let mut r = rng(4);
        let img = random_image(&mut r, 3, 32);
        let stats = feature_stats(&[img.clone(), img.clone(), img], 3, 32, &mut ex).unwrap();
        assert!(stats.sigma.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn feature_stats_two_images_mean_is_midpoint() {
        let mut ex = fid_extractor();
        let mut r = rng(5);
        let a = random_image(&mut r, 3, 32);
        let b = random_image(&mut r, 3, 32);
        let stats = feature_stats(&[a.clone(), b.clone()], 3, 32, &mut ex).unwrap();

        let fa = feature_stats(&[a.clone(), a], 3, 32, &mut ex).unwrap().mu;
        let fb = feature_stats(&[b.clone(), b], 3, 32, &mut ex).unwrap().mu;
        let mid = (fa + fb) * 0.5;
        assert!((stats.mu - mid).norm() < 1e-9);
    }

    #[test]
    fn feature_stats_matches_scalar_loop() {
        let mut ex = fid_extractor();
        let mut r = rng(6);
        let images: Vec<Vec<f64>> = (0..5).map(|_| random_image(&mut r, 3, 32)).collect();
        let stats = feature_stats(&images, 3, 32, &mut ex).unwrap();

        // loop oracle over per-image pooled vectors
        let rows: Vec<DVector<f64>> = images
            .iter()
            .map(|img| {
                feature_stats(&[img.clone(), img.clone()], 3, 32, &mut ex)
                    .unwrap()
                    .mu
            })
            .collect();
        let n = rows.len();
        let f = rows[0].len();
        for i in 0..f {
            let mu: f64 = rows.iter().map(|r| r[i]).sum::<f64>() / n as f64;
            assert!((stats.mu[i] - mu).abs() < 1e-8);
            for j in 0..f {
                let muj: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let cov: f64 = rows
                    .iter()
                    .map(|r| (r[i] - mu) * (r[j] - muj))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!((stats.sigma[(i, j)] - cov).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn feature_stats_requires_two_images() {
        let mut ex = fid_extractor();
        let img = vec![0.0; 3 * 32 * 32];
        assert!(feature_stats(&[img], 3, 32, &mut ex).is_err());
    }

    fn stats(mu: &[f64], diag: &[f64]) -> FrechetStats {
        FrechetStats {
            mu: DVector::from_row_slice(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
        }
    }

    #[test]
    fn frechet_identity_is_zero() {
        let s = stats(&[1.0, -2.0], &[0.5, 2.0]);
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn frechet_equal_covariance_reduces_to_mean_shift() {
        let s1 = stats(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        let s2 = stats(&[1.0, -2.0, 0.5], &[1.0, 2.0, 3.0]);
        let d = frechet_distance(&s1, &s2).unwrap();
        let expect = 1.0 + 4.0 + 0.25;
        assert!((d - expect).abs() < 1e-8, "{d}");
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        // trace term: 1 + 4 + 4 + 1 - 2 (2 + 2) = 2
        let s1 = stats(&[0.0, 0.0], &[1.0, 4.0]);
        let s2 = stats(&[0.0, 0.0], &[4.0, 1.0]);
        let d = frechet_distance(&s1, &s2).unwrap();
        assert!((d - 2.0).abs() < 1e-8, "{d}");
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut r = rng(7);
        for _ in 0..5 {
            // random PSD matrices via A A^T
            let f = 4usize;
            let a1 = DMatrix::from_fn(f, f, |_, _| r.gen_range(-1.0..1.0));
            let a2 = DMatrix::from_fn(f, f, |_, _| r.gen_range(-1.0..1.0));
            let s1 = FrechetStats {
                mu: DVector::from_fn(f, |_, _| r.gen_range(-1.0..1.0)),
                sigma: &a1 * a1.transpose(),
            };
            let s2 = FrechetStats {
                mu: DVector::from_fn(f, |_, _| r.gen_range(-1.0..1.0)),
                sigma: &a2 * a2.transpose(),
            };
            let d12 = frechet_distance(&s1, &s2).unwrap();
            let d21 = frechet_distance(&s2, &s1).unwrap();
            assert!(d12 >= 0.0);
            assert!((d12 - d21).abs() < 1e-8, "{d12} vs {d21}");
        }
    }

    #[test]
    fn frechet_rejects_dimension_mismatch() {
        let s1 = stats(&[0.0], &[1.0]);
        let s2 = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(frechet_distance(&s1, &s2).is_err());
    }
}
