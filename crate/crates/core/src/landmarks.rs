//! 68-point facial landmark parsing and mask rasterization.
//!
//! Two mask representations: color-coded contour polylines (one distinct
//! color per facial group) and a binary convex-hull fill of the face region.
//! Rasterization is integer Bresenham with no anti-aliasing so the
//! palette-only pixel invariant holds exactly.

use std::path::Path;

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;

/// Index ranges of the standard 68-point annotation scheme.
pub const JAW: std::ops::RangeInclusive<usize> = 0..=16;
pub const RIGHT_BROW: std::ops::RangeInclusive<usize> = 17..=21;
pub const LEFT_BROW: std::ops::RangeInclusive<usize> = 22..=26;
pub const NOSE: std::ops::RangeInclusive<usize> = 27..=35;
pub const RIGHT_EYE: std::ops::RangeInclusive<usize> = 36..=41;
pub const LEFT_EYE: std::ops::RangeInclusive<usize> = 42..=47;
pub const MOUTH_OUTER: std::ops::RangeInclusive<usize> = 48..=59;
pub const MOUTH_INNER: std::ops::RangeInclusive<usize> = 60..=67;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Contour,
    Binary,
}

impl MaskMode {
    pub fn channels(self) -> usize {
        match self {
            MaskMode::Contour => 3,
            MaskMode::Binary => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "contour" => Ok(MaskMode::Contour),
            "binary" => Ok(MaskMode::Binary),
            other => Err(Error::config(format!(
                "mask mode must be `contour` or `binary`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Contour => "contour",
            MaskMode::Binary => "binary",
        }
    }
}

/// 68 ordered points in normalized `[0, 1]` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::dataset(format!(
                "landmark set needs exactly {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        for (i, &(x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::dataset(format!("landmark {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::dataset(format!(
                    "landmark {i} ({x}, {y}) outside [0, 1]"
                )));
            }
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Parse the line-oriented on-disk format: 68 lines of `x y` floats.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if i >= LANDMARK_COUNT {
                return Err(err(
                    line_no,
                    format!("expected exactly {LANDMARK_COUNT} lines, found more"),
                ));
            }
            let mut parts = line.split_whitespace();
            let parse_one = |tok: Option<&str>, what: &str| -> Result<f64> {
                let tok = tok
                    .ok_or_else(|| err(line_no, format!("missing {what} coordinate")))?;
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(line_no, format!("unparsable {what} `{tok}`")))?;
                if !v.is_finite() {
                    return Err(err(line_no, format!("{what} is not finite")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(line_no, format!("{what} {v} outside [0, 1]")));
                }
                Ok(v)
            };
            let x = parse_one(parts.next(), "x")?;
            let y = parse_one(parts.next(), "y")?;
            if parts.next().is_some() {
                return Err(err(line_no, "trailing tokens after `x y`".into()));
            }
            points.push((x, y));
        }
        if points.len() != LANDMARK_COUNT {
            return Err(err(
                points.len() + 1,
                format!("expected {LANDMARK_COUNT} lines, got {}", points.len()),
            ));
        }
        LandmarkSet::new(points)
    }

    /// Serialize in the same format `parse` reads (LF line endings).
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(LANDMARK_COUNT * 20);
        for &(x, y) in &self.points {
            s.push_str(&format!("{x:.8} {y:.8}\n"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// RGB colors of the six contour groups; all distinct, none black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourPalette {
    pub face_contour: [u8; 3],
    pub eyebrows: [u8; 3],
    pub nose: [u8; 3],
    pub eyes: [u8; 3],
    pub mouth_outer: [u8; 3],
    pub mouth_inner: [u8; 3],
}

impl Default for ContourPalette {
    fn default() -> Self {
        ContourPalette {
            face_contour: [255, 0, 0],
            eyebrows: [0, 255, 0],
            nose: [255, 255, 0],
            eyes: [0, 0, 255],
            mouth_outer: [255, 0, 255],
            mouth_inner: [0, 255, 255],
        }
    }
}

impl ContourPalette {
    pub fn colors(&self) -> [[u8; 3]; 6] {
        [
            self.face_contour,
            self.eyebrows,
            self.nose,
            self.eyes,
            self.mouth_outer,
            self.mouth_inner,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let cs = self.colors();
        for (i, c) in cs.iter().enumerate() {
            if *c == [0, 0, 0] {
                return Err(Error::config("palette color equals background black"));
            }
            for other in cs.iter().skip(i + 1) {
                if c == other {
                    return Err(Error::config("palette colors must be pairwise distinct"));
                }
            }
        }
        Ok(())
    }
}

/// Rasterized landmark mask: RGB contour drawing or binary hull fill.
/// Contour pixels are interleaved RGB row-major; binary pixels are `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub mode: MaskMode,
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl MaskImage {
    /// CHW tensor data in `[-1, 1]`.
    pub fn to_tensor_data(&self) -> Vec<f64> {
        let s2 = self.size * self.size;
        match self.mode {
            MaskMode::Contour => {
                let mut out = vec![0.0; 3 * s2];
                for p in 0..s2 {
                    for c in 0..3 {
                        out[c * s2 + p] = self.pixels[p * 3 + c] as f64 / 255.0 * 2.0 - 1.0;
                    }
                }
                out
            }
            MaskMode::Binary => self
                .pixels
                .iter()
                .map(|&v| if v > 0 { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size as u32;
        let img_err = |e: image::ImageError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        match self.mode {
            MaskMode::Contour => {
                image::RgbImage::from_raw(s, s, self.pixels.clone())
                    .expect("pixel buffer matches dimensions")
                    .save(path)
                    .map_err(img_err)?;
            }
            MaskMode::Binary => {
                let bytes: Vec<u8> = self.pixels.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
                image::GrayImage::from_raw(s, s, bytes)
                    .expect("pixel buffer matches dimensions")
                    .save(path)
                    .map_err(img_err)?;
            }
        }
        Ok(())
    }

    pub fn load_png(path: &Path, mode: MaskMode) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != h {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("mask must be square, got {w}x{h}"),
            });
        }
        let pixels = match mode {
            MaskMode::Contour => img.to_rgb8().into_raw(),
            MaskMode::Binary => img
                .to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| u8::from(v > 127))
                .collect(),
        };
        Ok(MaskImage {
            mode,
            size: w,
            pixels,
        })
    }
}

/// Normalized coordinate to pixel index: `floor(x * size)`, clamped.
fn to_px(v: f64, size: usize) -> i64 {
    ((v * size as f64).floor() as i64).clamp(0, size as i64 - 1)
}

/// Integer midpoint (Bresenham) line, all octants.
pub(crate) fn draw_line(size: usize, p0: (i64, i64), p1: (i64, i64), mut set: impl FnMut(usize, usize)) {
    let (mut x0, mut y0) = p0;
    let (x1, y1) = p1;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..size as i64).contains(&x0) && (0..size as i64).contains(&y0) {
            set(x0 as usize, y0 as usize);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

struct Group {
    range: std::ops::RangeInclusive<usize>,
    closed: bool,
    color_index: usize,
}

const GROUPS: [Group; 8] = [
    Group { range: JAW, closed: false, color_index: 0 },
    Group { range: RIGHT_BROW, closed: false, color_index: 1 },
    Group { range: LEFT_BROW, closed: false, color_index: 1 },
    Group { range: NOSE, closed: false, color_index: 2 },
    Group { range: RIGHT_EYE, closed: true, color_index: 3 },
    Group { range: LEFT_EYE, closed: true, color_index: 3 },
    Group { range: MOUTH_OUTER, closed: true, color_index: 4 },
    Group { range: MOUTH_INNER, closed: true, color_index: 5 },
];

/// Draw the grouped polylines in the palette colors over black.
/// Eye and mouth groups are closed loops; jaw, brows and nose stay open.
pub fn rasterize_contour(lm: &LandmarkSet, size: usize, palette: &ContourPalette) -> Result<MaskImage> {
    if size < 16 {
        return Err(Error::config(format!("mask size {size} below minimum 16")));
    }
    palette.validate()?;
    let colors = palette.colors();
    let mut pixels = vec![0u8; size * size * 3];
    for g in &GROUPS {
        let color = colors[g.color_index];
        let pts: Vec<(i64, i64)> = lm.points()[g.range.clone()]
            .iter()
            .map(|&(x, y)| (to_px(x, size), to_px(y, size)))
            .collect();
        let mut set = |x: usize, y: usize| {
            let off = (y * size + x) * 3;
            pixels[off..off + 3].copy_from_slice(&color);
        };
        for pair in pts.windows(2) {
            draw_line(size, pair[0], pair[1], &mut set);
        }
        if g.closed && pts.len() > 2 {
            draw_line(size, pts[pts.len() - 1], pts[0], &mut set);
        }
        if pts.len() == 1 {
            set(pts[0].0 as usize, pts[0].1 as usize);
        }
    }
    Ok(MaskImage {
        mode: MaskMode::Contour,
        size,
        pixels,
    })
}

/// Fill the convex hull of all 68 points with ones.
/// Degenerate hulls (all points collinear or identical) fill the covered
/// line or single pixel.
pub fn rasterize_binary(lm: &LandmarkSet, size: usize) -> Result<MaskImage> {
    if size < 16 {
        return Err(Error::config(format!("mask size {size} below minimum 16")));
    }
    let mut pts: Vec<(i64, i64)> = lm
        .points()
        .iter()
        .map(|&(x, y)| (to_px(x, size), to_px(y, size)))
        .collect();
    pts.sort_unstable();
    pts.dedup();

    let mut pixels = vec![0u8; size * size];
    let hull = convex_hull(&pts);
    match hull.len() {
        0 => {}
        1 => pixels[hull[0].1 as usize * size + hull[0].0 as usize] = 1,
        2 => draw_line(size, hull[0], hull[1], |x, y| pixels[y * size + x] = 1),
        _ => {
            let (min_y, max_y) = hull
                .iter()
                .fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
            let (min_x, max_x) = hull
                .iter()
                .fold((i64::MAX, i64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
            for y in min_y..=max_y {
                for x in min_x..=max_x {
                    if inside_hull(&hull, (x, y)) {
                        pixels[y as usize * size + x as usize] = 1;
                    }
                }
            }
        }
    }
    Ok(MaskImage {
        mode: MaskMode::Binary,
        size,
        pixels,
    })
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull over pre-sorted deduplicated points,
/// counter-clockwise in screen coordinates.
fn convex_hull(pts: &[(i64, i64)]) -> Vec<(i64, i64)> {
    if pts.len() < 3 {
        return pts.to_vec();
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(pts.len() * 2);
    for &p in pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        // All input points collinear: keep the two extremes.
        let mut line = vec![pts[0], *pts.last().unwrap()];
        line.dedup();
        return line;
    }
    hull
}

/// Half-plane containment, orientation-agnostic; boundary counts as inside.
fn inside_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    let n = hull.len();
    let mut sign = 0i64;
    for i in 0..n {
        let c = cross(hull[i], hull[(i + 1) % n], p);
        if c != 0 {
            if sign == 0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_set(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::new(vec![(x, y); LANDMARK_COUNT]).unwrap()
    }

    #[test]
    fn parse_accepts_valid_and_counts_lines() {
        let text = "0.5 0.5\n".repeat(68);
        let lm = LandmarkSet::parse(&text, "mem").unwrap();
        assert!(lm.points().iter().all(|&p| p == (0.5, 0.5)));

        let short = "0.5 0.5\n".repeat(67);
        let err = LandmarkSet::parse(&short, "mem").unwrap_err();
        assert!(err.to_string().contains("68"), "{err}");

        let long = "0.5 0.5\n".repeat(69);
        assert!(LandmarkSet::parse(&long, "mem").is_err());
    }

    #[test]
    fn parse_rejects_bad_numbers_with_line_numbers() {
        let mut lines: Vec<String> = (0..68).map(|_| "0.4 0.6".to_string()).collect();
        lines[10] = "0.4 nope".into();
        let err = LandmarkSet::parse(&lines.join("\n"), "mem").unwrap_err();
        assert!(err.to_string().contains(":11:"), "{err}");

        lines[10] = "0.4 NaN".into();
        assert!(LandmarkSet::parse(&lines.join("\n"), "mem").is_err());
        lines[10] = "0.4 1.5".into();
        assert!(LandmarkSet::parse(&lines.join("\n"), "mem").is_err());
    }

    #[test]
    fn text_roundtrip_within_1e6() {
        let pts: Vec<(f64, f64)> = (0..68)
            .map(|i| (0.1 + 0.8 * (i as f64 / 67.0), 0.9 - 0.7 * (i as f64 / 67.0)))
            .collect();
        let lm = LandmarkSet::new(pts.clone()).unwrap();
        let back = LandmarkSet::parse(&lm.to_text(), "mem").unwrap();
        for (a, b) in back.points().iter().zip(&pts) {
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        }
    }

    #[test]
    fn horizontal_brow_segment_hits_exact_pixels() {
        // Right brow laid on the y = 0.5 row; everything else in a far
        // corner cluster so only the brow paints that row.
        let size = 32usize;
        let mut pts = vec![(0.95, 0.95); LANDMARK_COUNT];
        for (k, i) in RIGHT_BROW.enumerate() {
            pts[i] = (0.2 + 0.5 * k as f64 / 4.0, 0.5);
        }
        let lm = LandmarkSet::new(pts).unwrap();
        let mask = rasterize_contour(&lm, size, &ContourPalette::default()).unwrap();
        let brow = ContourPalette::default().eyebrows;
        let y = to_px(0.5, size) as usize;
        let (x0, x1) = (to_px(0.2, size) as usize, to_px(0.7, size) as usize);
        for py in 0..size {
            for px in 0..size {
                let got = &mask.pixels[(py * size + px) * 3..][..3];
                let is_brow = got == brow;
                let expected = py == y && (x0..=x1).contains(&px);
                assert_eq!(is_brow, expected, "pixel ({px}, {py})");
            }
        }
    }

    #[test]
    fn degenerate_identical_points_give_valid_single_dot_mask() {
        let lm = uniform_set(0.5, 0.5);
        let mask = rasterize_contour(&lm, 32, &ContourPalette::default()).unwrap();
        let lit: usize = mask
            .pixels
            .chunks(3)
            .filter(|c| c.iter().any(|&v| v != 0))
            .count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn contour_contains_only_palette_colors_plus_black() {
        let pts: Vec<(f64, f64)> = (0..68)
            .map(|i| {
                let a = i as f64 / 68.0 * std::f64::consts::TAU;
                (0.5 + 0.35 * a.cos(), 0.5 + 0.4 * a.sin())
            })
            .collect();
        let lm = LandmarkSet::new(pts).unwrap();
        let palette = ContourPalette::default();
        let mask = rasterize_contour(&lm, 48, &palette).unwrap();
        let allowed: Vec<[u8; 3]> = palette
            .colors()
            .into_iter()
            .chain(std::iter::once([0, 0, 0]))
            .collect();
        for c in mask.pixels.chunks(3) {
            assert!(allowed.iter().any(|a| a == c), "stray color {c:?}");
        }
    }

    #[test]
    fn translation_shifts_drawing_by_one_pixel() {
        let size = 64usize;
        let base: Vec<(f64, f64)> = (0..68)
            .map(|i| {
                let a = i as f64 / 68.0 * std::f64::consts::TAU;
                (0.4 + 0.2 * a.cos(), 0.4 + 0.25 * a.sin())
            })
            .collect();
        let shifted: Vec<(f64, f64)> = base
            .iter()
            .map(|&(x, y)| (x + 1.0 / size as f64, y))
            .collect();
        let m0 =
            rasterize_contour(&LandmarkSet::new(base).unwrap(), size, &ContourPalette::default())
                .unwrap();
        let m1 = rasterize_contour(
            &LandmarkSet::new(shifted).unwrap(),
            size,
            &ContourPalette::default(),
        )
        .unwrap();
        for y in 0..size {
            for x in 0..size - 1 {
                let a = &m0.pixels[(y * size + x) * 3..][..3];
                let b = &m1.pixels[(y * size + x + 1) * 3..][..3];
                assert_eq!(a, b, "pixel ({x}, {y}) not shifted");
            }
        }
    }

    /// Independent ray-casting point-in-polygon oracle.
    fn ray_cast_inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
        let mut inside = false;
        let n = poly.len();
        for i in 0..n {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % n];
            if (y1 > py) != (y2 > py) {
                let xint = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
                if px < xint {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn binary_square_fill_matches_analytic_area() {
        // Four repeated corner clusters spanning a square.
        let size = 64usize;
        let corners = [(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)];
        let pts: Vec<(f64, f64)> = (0..68).map(|i| corners[i % 4]).collect();
        let lm = LandmarkSet::new(pts).unwrap();
        let mask = rasterize_binary(&lm, size).unwrap();
        let count: usize = mask.pixels.iter().map(|&v| v as usize).sum();
        let side = (to_px(0.75, size) - to_px(0.25, size) + 1) as usize;
        let expect = side * side;
        let tolerance = 4 * side + 4; // one-pixel boundary band
        assert!(
            (count as i64 - expect as i64).unsigned_abs() as usize <= tolerance,
            "count {count} vs {expect}"
        );
        assert!(mask.pixels.iter().all(|&v| v <= 1));
    }

    #[test]
    fn binary_all_identical_sets_single_pixel() {
        let mask = rasterize_binary(&uniform_set(0.3, 0.7), 32).unwrap();
        assert_eq!(mask.pixels.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn binary_ones_lie_inside_hull_by_ray_casting() {
        let size = 48usize;
        let pts: Vec<(f64, f64)> = (0..68)
            .map(|i| {
                let a = i as f64 / 68.0 * std::f64::consts::TAU;
                (0.5 + 0.3 * a.cos(), 0.5 + 0.35 * a.sin())
            })
            .collect();
        let lm = LandmarkSet::new(pts.clone()).unwrap();
        let mask = rasterize_binary(&lm, size).unwrap();
        // Oracle polygon: the landmark ellipse itself (convex by shape),
        // inflated by 1.5 px to absorb pixel quantization.
        let centre = (0.5 * size as f64, 0.5 * size as f64);
        let poly: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = (x * size as f64, y * size as f64);
                let (dx, dy) = (px - centre.0, py - centre.1);
                let len = (dx * dx + dy * dy).sqrt().max(1e-9);
                (px + 1.5 * dx / len, py + 1.5 * dy / len)
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                if mask.pixels[y * size + x] == 1 {
                    assert!(
                        ray_cast_inside(&poly, x as f64 + 0.5, y as f64 + 0.5),
                        "pixel ({x}, {y}) outside hull"
                    );
                }
            }
        }
    }

    #[test]
    fn binary_collinear_points_fill_a_line() {
        let pts: Vec<(f64, f64)> = (0..68).map(|i| (0.1 + 0.8 * (i as f64 / 67.0), 0.5)).collect();
        let mask = rasterize_binary(&LandmarkSet::new(pts).unwrap(), 32).unwrap();
        let count: usize = mask.pixels.iter().map(|&v| v as usize).sum();
        assert!(count > 10, "line fill too small: {count}");
        let y = to_px(0.5, 32) as usize;
        for (i, &v) in mask.pixels.iter().enumerate() {
            if v == 1 {
                assert_eq!(i / 32, y);
            }
        }
    }

    #[test]
    fn binary_pixel_count_monotone_under_dilation() {
        let size = 48usize;
        let mut last = 0usize;
        for scale in [0.1, 0.2, 0.3] {
            let pts: Vec<(f64, f64)> = (0..68)
                .map(|i| {
                    let a = i as f64 / 68.0 * std::f64::consts::TAU;
                    (0.5 + scale * a.cos(), 0.5 + scale * a.sin())
                })
                .collect();
            let mask = rasterize_binary(&LandmarkSet::new(pts).unwrap(), size).unwrap();
            let count: usize = mask.pixels.iter().map(|&v| v as usize).sum();
            assert!(count >= last, "scale {scale}: {count} < {last}");
            last = count;
        }
    }

    #[test]
    fn palette_must_be_distinct_and_non_black() {
        let mut p = ContourPalette::default();
        p.nose = p.eyes;
        assert!(p.validate().is_err());
        let mut p = ContourPalette::default();
        p.nose = [0, 0, 0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<(f64, f64)> = (0..68)
            .map(|i| {
                let a = i as f64 / 68.0 * std::f64::consts::TAU;
                (0.5 + 0.3 * a.cos(), 0.5 + 0.3 * a.sin())
            })
            .collect();
        let lm = LandmarkSet::new(pts).unwrap();
        for mode in [MaskMode::Contour, MaskMode::Binary] {
            let mask = match mode {
                MaskMode::Contour => rasterize_contour(&lm, 32, &ContourPalette::default()).unwrap(),
                MaskMode::Binary => rasterize_binary(&lm, 32).unwrap(),
            };
            let path = dir.path().join(format!("m_{}.png", mode.as_str()));
            mask.save_png(&path).unwrap();
            let back = MaskImage::load_png(&path, mode).unwrap();
            assert_eq!(mask, back);
        }
    }
}
