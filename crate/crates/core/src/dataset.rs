//! Paired-frame training data: a procedural synthetic face generator with
//! analytically placed 68-point landmarks, identity-disjoint train/test
//! splits, pair sampling, and ingestion of externally prepared directories
//! in the same layout (`root/<identity>/<frame>.png` + `<frame>.lms`).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::landmarks::{
    draw_line, rasterize_binary, rasterize_contour, ContourPalette, LandmarkSet, MaskImage,
    MaskMode, JAW, LANDMARK_COUNT, LEFT_BROW, LEFT_EYE, MOUTH_INNER, MOUTH_OUTER, NOSE,
    RIGHT_BROW, RIGHT_EYE,
};
use crate::params::derive_seed;

// Fixed stroke colors of the rendered facial features; identity-specific
// fills (skin, hair, background) are sampled per identity.
pub const JAW_STROKE: [u8; 3] = [60, 40, 30];
pub const BROW_STROKE: [u8; 3] = [25, 20, 15];
pub const EYE_FILL: [u8; 3] = [25, 25, 70];
pub const NOSE_STROKE: [u8; 3] = [90, 60, 45];
pub const LIP_FILL: [u8; 3] = [150, 40, 60];
pub const LIP_STROKE: [u8; 3] = [110, 20, 40];
pub const CAVITY_FILL: [u8; 3] = [25, 8, 12];

/// Square 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgb8Image {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Rgb8Image {
    pub fn filled(size: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            pixels.extend_from_slice(&color);
        }
        Rgb8Image { size, pixels }
    }

    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let off = (y * self.size + x) * 3;
        self.pixels[off..off + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let off = (y * self.size + x) * 3;
        [self.pixels[off], self.pixels[off + 1], self.pixels[off + 2]]
    }

    /// CHW tensor data in `[-1, 1]`.
    pub fn to_tensor_data(&self) -> Vec<f64> {
        let s2 = self.size * self.size;
        let mut out = vec![0.0; 3 * s2];
        for p in 0..s2 {
            for c in 0..3 {
                out[c * s2 + p] = self.pixels[p * 3 + c] as f64 / 255.0 * 2.0 - 1.0;
            }
        }
        out
    }

    /// Quantize CHW `[-1, 1]` data back to 8-bit RGB.
    pub fn from_tensor_data(data: &[f64], size: usize) -> Self {
        let s2 = size * size;
        let mut pixels = vec![0u8; 3 * s2];
        for p in 0..s2 {
            for c in 0..3 {
                let v = ((data[c * s2 + p].clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round();
                pixels[p * 3 + c] = v as u8;
            }
        }
        Rgb8Image { size, pixels }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::RgbImage::from_raw(self.size as u32, self.size as u32, self.pixels.clone())
            .expect("pixel buffer matches dimensions")
            .save(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }

    pub fn load_png(path: &Path, resize_to: Option<usize>) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != h {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("image must be square, got {w}x{h}"),
            });
        }
        let img = match resize_to {
            Some(s) if s != w => image::imageops::resize(
                &img,
                s as u32,
                s as u32,
                image::imageops::FilterType::Nearest,
            ),
            _ => img,
        };
        Ok(Rgb8Image {
            size: img.width() as usize,
            pixels: img.into_raw(),
        })
    }
}

/// Per-identity appearance, a deterministic function of (seed, index).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub face_a: f64,
    pub face_b: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_w: f64,
    pub eye_h: f64,
    pub brow_off: f64,
    pub nose_len: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub skin: [u8; 3],
    pub hair: [u8; 3],
    pub background: [u8; 3],
}

impl IdentityParams {
    pub fn sample(dataset_seed: u64, index: usize) -> Self {
        let mut r = ChaCha12Rng::seed_from_u64(derive_seed(dataset_seed, 0x1D00 + index as u64));
        let skin_r = r.gen_range(0.70..0.95);
        let skin_g = r.gen_range(0.55..skin_r);
        let skin_b = r.gen_range(0.40..skin_g);
        IdentityParams {
            face_a: r.gen_range(0.24..0.30),
            face_b: r.gen_range(0.30..0.36),
            eye_dx: r.gen_range(0.10..0.14),
            eye_y: r.gen_range(0.42..0.46),
            eye_w: r.gen_range(0.035..0.050),
            eye_h: r.gen_range(0.018..0.028),
            brow_off: r.gen_range(0.050..0.070),
            nose_len: r.gen_range(0.10..0.14),
            mouth_y: r.gen_range(0.66..0.72),
            mouth_w: r.gen_range(0.08..0.12),
            skin: [to_u8(skin_r), to_u8(skin_g), to_u8(skin_b)],
            hair: [
                to_u8(r.gen_range(0.05..0.45)),
                to_u8(r.gen_range(0.05..0.35)),
                to_u8(r.gen_range(0.05..0.30)),
            ],
            background: [
                to_u8(r.gen_range(0.30..0.95)),
                to_u8(r.gen_range(0.30..0.95)),
                to_u8(r.gen_range(0.30..0.95)),
            ],
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-frame expression, a deterministic function of (seed, identity, frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpressionParams {
    /// 0 = closed, 1 = wide open.
    pub mouth_open: f64,
    /// -1 = lowered, +1 = raised.
    pub brow_raise: f64,
    /// -1..1, rendered as a horizontal feature offset.
    pub yaw: f64,
    /// 0 = open, 1 = closed lids.
    pub eye_close: f64,
}

impl ExpressionParams {
    pub fn sample(dataset_seed: u64, identity: usize, frame: usize) -> Self {
        let stream = 0xE0_0000 + (identity as u64) * 1009 + frame as u64;
        let mut r = ChaCha12Rng::seed_from_u64(derive_seed(dataset_seed, stream));
        ExpressionParams {
            mouth_open: r.gen_range(0.0..1.0),
            brow_raise: r.gen_range(-1.0..1.0),
            yaw: r.gen_range(-1.0..1.0),
            eye_close: r.gen_range(0.0..0.8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.mouth_open)
            && (-1.0..=1.0).contains(&self.brow_raise)
            && (-1.0..=1.0).contains(&self.yaw)
            && (0.0..=1.0).contains(&self.eye_close);
        if ok {
            Ok(())
        } else {
            Err(Error::dataset(format!("expression out of range: {self:?}")))
        }
    }
}

/// Landmark geometry shared by the renderer and the returned landmark set.
fn face_landmarks(id: &IdentityParams, ex: &ExpressionParams) -> Vec<(f64, f64)> {
    let cx = 0.5 + 0.04 * ex.yaw;
    let cy = 0.52;
    let fx = cx + 0.05 * ex.yaw;
    let mut pts = vec![(0.0, 0.0); LANDMARK_COUNT];

    // Jaw: lower half of the head ellipse from viewer-left to viewer-right.
    for (k, i) in JAW.enumerate() {
        let theta = std::f64::consts::PI * (1.0 - k as f64 / 16.0);
        pts[i] = (cx + id.face_a * theta.cos(), cy + id.face_b * theta.sin());
    }

    let brow_y = id.eye_y - id.brow_off - 0.020 * ex.brow_raise;
    let brow_w = id.eye_w * 1.5;
    for (side, range) in [(-1.0, RIGHT_BROW), (1.0, LEFT_BROW)] {
        let bx = fx + side * id.eye_dx;
        for (k, i) in range.enumerate() {
            let t = k as f64 / 4.0 - 0.5;
            pts[i] = (bx + 2.0 * brow_w * t, brow_y - 0.012 * (std::f64::consts::PI * k as f64 / 4.0).sin());
        }
    }

    // Nose: four bridge points then five across the base.
    let nose_top = id.eye_y + 0.02;
    for k in 0..4 {
        pts[27 + k] = (fx, nose_top + id.nose_len * k as f64 / 3.0);
    }
    let nose_base_y = nose_top + id.nose_len + 0.015;
    for k in 0..5 {
        let t = k as f64 / 4.0 - 0.5;
        pts[31 + k] = (fx + 2.0 * 0.045 * t, nose_base_y);
    }

    let eh = id.eye_h * (1.0 - 0.85 * ex.eye_close);
    for (side, range) in [(-1.0, RIGHT_EYE), (1.0, LEFT_EYE)] {
        let ex_c = fx + side * id.eye_dx;
        let ey = id.eye_y;
        let w = id.eye_w;
        let ring = [
            (-w, 0.0),
            (-w / 3.0, -eh),
            (w / 3.0, -eh),
            (w, 0.0),
            (w / 3.0, eh),
            (-w / 3.0, eh),
        ];
        for (k, i) in range.enumerate() {
            pts[i] = (ex_c + ring[k].0, ey + ring[k].1);
        }
    }

    // Mouth: outer 12-gon and inner 8-gon; the inner opening scales with
    // mouth_open so its vertical spread is strictly monotone in it.
    let mh_outer = 0.018 + 0.030 * ex.mouth_open;
    let mh_inner = 0.003 + 0.028 * ex.mouth_open;
    for (k, i) in MOUTH_OUTER.enumerate() {
        let psi = std::f64::consts::PI + k as f64 * std::f64::consts::TAU / 12.0;
        pts[i] = (fx + id.mouth_w * psi.cos(), id.mouth_y + mh_outer * psi.sin());
    }
    for (k, i) in MOUTH_INNER.enumerate() {
        let psi = std::f64::consts::PI + k as f64 * std::f64::consts::TAU / 8.0;
        pts[i] = (
            fx + id.mouth_w * 0.78 * psi.cos(),
            id.mouth_y + mh_inner * psi.sin(),
        );
    }

    for p in pts.iter_mut() {
        p.0 = p.0.clamp(0.01, 0.99);
        p.1 = p.1.clamp(0.01, 0.99);
    }
    pts
}

fn px(v: f64, size: usize) -> i64 {
    ((v * size as f64).floor() as i64).clamp(0, size as i64 - 1)
}

fn fill_ellipse(img: &mut Rgb8Image, cx: f64, cy: f64, a: f64, b: f64, color: [u8; 3]) {
    let s = img.size as f64;
    for y in 0..img.size {
        for x in 0..img.size {
            let dx = (x as f64 + 0.5) / s - cx;
            let dy = (y as f64 + 0.5) / s - cy;
            if dx * dx / (a * a) + dy * dy / (b * b) <= 1.0 {
                img.put(x, y, color);
            }
        }
    }
}

fn fill_polygon(img: &mut Rgb8Image, poly: &[(f64, f64)], color: [u8; 3]) {
    let s = img.size as f64;
    let (min_y, max_y) = poly
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let (min_x, max_x) = poly
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let y0 = ((min_y * s).floor().max(0.0)) as usize;
    let y1 = ((max_y * s).ceil().min(s - 1.0)) as usize;
    let x0 = ((min_x * s).floor().max(0.0)) as usize;
    let x1 = ((max_x * s).ceil().min(s - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fx, fy) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut inside = false;
            let n = poly.len();
            for i in 0..n {
                let (x1p, y1p) = poly[i];
                let (x2p, y2p) = poly[(i + 1) % n];
                if (y1p > fy) != (y2p > fy) {
                    let xint = x1p + (fy - y1p) / (y2p - y1p) * (x2p - x1p);
                    if fx < xint {
                        inside = !inside;
                    }
                }
            }
            if inside {
                img.put(x, y, color);
            }
        }
    }
}

fn stroke_polyline(img: &mut Rgb8Image, pts: &[(f64, f64)], color: [u8; 3], closed: bool) {
    let size = img.size;
    let ip: Vec<(i64, i64)> = pts.iter().map(|&(x, y)| (px(x, size), px(y, size))).collect();
    let mut set = |x: usize, y: usize| img.put(x, y, color);
    for pair in ip.windows(2) {
        draw_line(size, pair[0], pair[1], &mut set);
    }
    if closed && ip.len() > 2 {
        draw_line(size, ip[ip.len() - 1], ip[0], &mut set);
    }
    if ip.len() == 1 {
        set(ip[0].0 as usize, ip[0].1 as usize);
    }
}

/// Render a flat-shaded face and return the landmarks that generated it.
/// Deterministic in all arguments.
pub fn synth_render(
    id: &IdentityParams,
    ex: &ExpressionParams,
    size: usize,
) -> Result<(Rgb8Image, LandmarkSet)> {
    if size < 32 {
        return Err(Error::dataset(format!("render size {size} below minimum 32")));
    }
    ex.validate()?;
    let pts = face_landmarks(id, ex);
    let cx = 0.5 + 0.04 * ex.yaw;
    let cy = 0.52;

    let mut img = Rgb8Image::filled(size, id.background);
    // Hair sits behind and slightly above the head.
    fill_ellipse(&mut img, cx, cy - 0.05, id.face_a + 0.035, id.face_b + 0.02, id.hair);
    fill_ellipse(&mut img, cx, cy, id.face_a, id.face_b, id.skin);

    stroke_polyline(&mut img, &pts[JAW], JAW_STROKE, false);
    for range in [RIGHT_BROW, LEFT_BROW] {
        stroke_polyline(&mut img, &pts[range.clone()], BROW_STROKE, false);
        // second pass one pixel lower: a 2-px thick brow
        let lower: Vec<(f64, f64)> = pts[range]
            .iter()
            .map(|&(x, y)| (x, (y + 1.0 / size as f64).min(0.99)))
            .collect();
        stroke_polyline(&mut img, &lower, BROW_STROKE, false);
    }
    for range in [RIGHT_EYE, LEFT_EYE] {
        fill_polygon(&mut img, &pts[range.clone()], EYE_FILL);
        stroke_polyline(&mut img, &pts[range], EYE_FILL, true);
    }
    stroke_polyline(&mut img, &pts[27..=30], NOSE_STROKE, false);
    stroke_polyline(&mut img, &pts[31..=35], NOSE_STROKE, false);

    fill_polygon(&mut img, &pts[MOUTH_OUTER], LIP_FILL);
    stroke_polyline(&mut img, &pts[MOUTH_OUTER], LIP_STROKE, true);
    if ex.mouth_open > 0.05 {
        fill_polygon(&mut img, &pts[MOUTH_INNER], CAVITY_FILL);
    }
    stroke_polyline(&mut img, &pts[MOUTH_INNER], CAVITY_FILL, true);

    Ok((img, LandmarkSet::new(pts)?))
}

// ---- manifests --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    Synth {
        seed: u64,
        identity: usize,
        frame: usize,
    },
    Disk {
        image: PathBuf,
        landmarks: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRecord {
    pub label: String,
    pub frames: Vec<FrameSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("split must be train|test, got `{other}`"))),
        }
    }
}

/// Identity list, per-identity frames, and the train/test assignment.
/// Train and test identity sets are disjoint by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub identities: Vec<IdentityRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 8:2 shuffle-split of `0..n`: `floor(0.8 n)` train, rest test.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x59117));
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = (0.8 * n as f64).floor() as usize;
    let train = idx[..n_train].to_vec();
    let test = idx[n_train..].to_vec();
    if train.is_empty() || test.is_empty() {
        log::warn!("degenerate identity split: {} train / {} test", train.len(), test.len());
    }
    (train, test)
}

impl DatasetManifest {
    /// Fully synthetic dataset of `n_identities` x `frames` frames.
    pub fn synthetic(seed: u64, n_identities: usize, frames: usize) -> Result<Self> {
        if n_identities == 0 || frames == 0 {
            return Err(Error::dataset("need at least one identity and one frame"));
        }
        let identities = (0..n_identities)
            .map(|i| IdentityRecord {
                label: format!("id_{i:03}"),
                frames: (0..frames)
                    .map(|f| FrameSource::Synth {
                        seed,
                        identity: i,
                        frame: f,
                    })
                    .collect(),
            })
            .collect();
        let (train, test) = split_indices(n_identities, seed);
        Ok(DatasetManifest {
            identities,
            train,
            test,
        })
    }

    pub fn split_members(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn total_frames(&self, split: Split) -> usize {
        self.split_members(split)
            .iter()
            .map(|&i| self.identities[i].frames.len())
            .sum()
    }

    /// Serialize as line-oriented text: one `frame-path<TAB>identity` line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for rec in &self.identities {
            for (fi, frame) in rec.frames.iter().enumerate() {
                let path = match frame {
                    FrameSource::Synth { identity, frame, .. } => {
                        format!("{}/frame_{frame:03}.png#synth{identity}", rec.label)
                    }
                    FrameSource::Disk { image, .. } => image.display().to_string(),
                };
                let _ = fi;
                s.push_str(&format!("{path}\t{}\n", rec.label));
            }
        }
        s
    }
}

/// Load one frame as a CHW `[-1, 1]` tensor plus its landmarks.
pub fn load_frame(source: &FrameSource, size: usize) -> Result<(Vec<f64>, LandmarkSet)> {
    match source {
        FrameSource::Synth {
            seed,
            identity,
            frame,
        } => {
            let id = IdentityParams::sample(*seed, *identity);
            let ex = ExpressionParams::sample(*seed, *identity, *frame);
            let (img, lm) = synth_render(&id, &ex, size)?;
            Ok((img.to_tensor_data(), lm))
        }
        FrameSource::Disk { image, landmarks } => {
            let img = Rgb8Image::load_png(image, Some(size))?;
            let lm = LandmarkSet::load(landmarks)?;
            Ok((img.to_tensor_data(), lm))
        }
    }
}

/// Rasterize a landmark set in the configured representation.
pub fn landmark_mask(
    lm: &LandmarkSet,
    size: usize,
    mode: MaskMode,
    palette: &ContourPalette,
) -> Result<MaskImage> {
    match mode {
        MaskMode::Contour => rasterize_contour(lm, size, palette),
        MaskMode::Binary => rasterize_binary(lm, size),
    }
}

/// One training triplet: source frame, target frame, target landmark mask.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub x_src: Vec<f64>,
    pub x_tgt: Vec<f64>,
    pub m_tgt: Vec<f64>,
    pub mask_channels: usize,
    pub size: usize,
    pub identity: usize,
    pub t1: usize,
    pub t2: usize,
}

/// Uniformly sample an identity from the split (identities with fewer than
/// two frames are ineligible) and two distinct frames from it.
pub fn sample_pair(
    manifest: &DatasetManifest,
    split: Split,
    rng: &mut ChaCha12Rng,
    size: usize,
    mode: MaskMode,
    palette: &ContourPalette,
) -> Result<SamplePair> {
    let eligible: Vec<usize> = manifest
        .split_members(split)
        .iter()
        .copied()
        .filter(|&i| manifest.identities[i].frames.len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::dataset(
            "no identity in the split has at least two frames",
        ));
    }
    let identity = eligible[rng.gen_range(0..eligible.len())];
    let frames = &manifest.identities[identity].frames;
    let t1 = rng.gen_range(0..frames.len());
    let mut t2 = rng.gen_range(0..frames.len() - 1);
    if t2 >= t1 {
        t2 += 1;
    }
    let (x_src, _) = load_frame(&frames[t1], size)?;
    let (x_tgt, lm_tgt) = load_frame(&frames[t2], size)?;
    let mask = landmark_mask(&lm_tgt, size, mode, palette)?;
    Ok(SamplePair {
        x_src,
        x_tgt,
        m_tgt: mask.to_tensor_data(),
        mask_channels: mode.channels(),
        size,
        identity,
        t1,
        t2,
    })
}

/// Write a synthetic dataset to disk in the ingestible layout and return
/// the manifest describing what was written.
pub fn generate_to_disk(
    seed: u64,
    n_identities: usize,
    frames: usize,
    size: usize,
    out: &Path,
) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::synthetic(seed, n_identities, frames)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    for (i, rec) in manifest.identities.iter().enumerate() {
        let dir = out.join(&rec.label);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (f, _) in rec.frames.iter().enumerate() {
            let id = IdentityParams::sample(seed, i);
            let ex = ExpressionParams::sample(seed, i, f);
            let (img, lm) = synth_render(&id, &ex, size)?;
            img.save_png(&dir.join(format!("frame_{f:03}.png")))?;
            lm.save(&dir.join(format!("frame_{f:03}.lms")))?;
        }
    }
    std::fs::write(out.join("manifest.txt"), manifest.to_text())
        .map_err(|e| Error::io("writing manifest.txt", e))?;
    Ok(manifest)
}

/// Scan `root/<identity>/<frame>.png` (+ sibling `.lms`) into a manifest.
/// Frames without landmarks are skipped with a warning; an empty root is an
/// error. The split is reassigned from `seed`.
pub fn ingest_directory(root: &Path, seed: u64) -> Result<DatasetManifest> {
    let mut identities = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(format!("reading {}", root.display()), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        frames.sort();
        let mut sources = Vec::new();
        for img in frames {
            let lms = img.with_extension("lms");
            if !lms.exists() {
                log::warn!("skipping {}: no landmark sibling", img.display());
                continue;
            }
            sources.push(FrameSource::Disk {
                image: img,
                landmarks: lms,
            });
        }
        if sources.is_empty() {
            log::warn!("identity {label}: no usable frames, skipped");
            continue;
        }
        identities.push(IdentityRecord {
            label,
            frames: sources,
        });
    }
    if identities.is_empty() {
        return Err(Error::dataset(format!(
            "no identities with usable frames under {}",
            root.display()
        )));
    }
    let (train, test) = split_indices(identities.len(), seed);
    Ok(DatasetManifest {
        identities,
        train,
        test,
    })
}
