//! Parameter-recording augmentation.
//!
//! A view pair is built as `v1 = T1(x)` and `v2 = Trel(v1)`. `Trel` is the
//! relative transform and its normalized parameter vector is the regression
//! target of the equivariance probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageops::{self, batch_dims, ImageBatch, CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum ViewError {
    #[error("invalid transform spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Params(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Rotation,
    Color,
    Blur,
    Translation,
    Crop,
    Flip,
}

impl Family {
    pub const ALL: [Family; 6] =
        [Family::Rotation, Family::Color, Family::Blur, Family::Translation, Family::Crop, Family::Flip];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rotation => "rotation",
            Family::Color => "color",
            Family::Blur => "blur",
            Family::Translation => "translation",
            Family::Crop => "crop",
            Family::Flip => "flip",
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::Rotation => &["angle"],
            Family::Color => &["brightness", "contrast", "saturation", "hue"],
            Family::Blur => &["sigma"],
            Family::Translation => &["dx", "dy"],
            Family::Crop => &["scale", "cx", "cy"],
            Family::Flip => &["flip"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    /// Affine map of `[min, max]` onto `[-1, 1]`; a degenerate range maps to 0.
    pub fn normalize(&self, x: f64) -> f64 {
        if self.max > self.min {
            2.0 * (x - self.min) / (self.max - self.min) - 1.0
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        if self.max > self.min {
            self.min + (u + 1.0) * 0.5 * (self.max - self.min)
        } else {
            self.min
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

const UNIT: Range = Range::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorRanges {
    pub brightness: Range,
    pub contrast: Range,
    pub saturation: Range,
    /// Fraction of the full hue circle.
    pub hue: Range,
}

impl Default for ColorRanges {
    fn default() -> Self {
        Self {
            brightness: Range::new(0.6, 1.4),
            contrast: Range::new(0.6, 1.4),
            saturation: Range::new(0.6, 1.4),
            hue: Range::new(-0.1, 0.1),
        }
    }
}

/// Enabled transform families and their sampling ranges (`None` = disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct TransformSpec {
    /// Degrees, counter-clockwise.
    pub rotation: Option<Range>,
    pub color: Option<ColorRanges>,
    /// Gaussian sigma in pixels.
    pub blur: Option<Range>,
    /// Shift as a fraction of width (dx) and height (dy).
    pub translation: Option<Range>,
    /// Fraction of image area kept; the crop center is uniform over the feasible positions.
    pub crop: Option<Range>,
    /// Probability of a horizontal flip.
    pub flip: Option<f64>,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            rotation: Some(Range::new(-90.0, 90.0)),
            color: Some(ColorRanges::default()),
            blur: Some(Range::new(0.1, 2.0)),
            translation: Some(Range::new(-0.25, 0.25)),
            crop: Some(Range::new(0.2, 1.0)),
            flip: Some(0.5),
        }
    }
}

impl TransformSpec {
    pub fn none() -> Self {
        Self { rotation: None, color: None, blur: None, translation: None, crop: None, flip: None }
    }

    pub fn families(&self) -> Vec<Family> {
        Family::ALL.into_iter().filter(|f| self.enabled(*f)).collect()
    }

    pub fn enabled(&self, family: Family) -> bool {
        match family {
            Family::Rotation => self.rotation.is_some(),
            Family::Color => self.color.is_some(),
            Family::Blur => self.blur.is_some(),
            Family::Translation => self.translation.is_some(),
            Family::Crop => self.crop.is_some(),
            Family::Flip => self.flip.is_some(),
        }
    }

    pub fn validate(&self) -> Result<(), ViewError> {
        if self.families().is_empty() {
            return Err(ViewError::Spec("at least one transform family must be enabled".into()));
        }
        let check = |name: &str, r: &Range| {
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                Err(ViewError::Spec(format!("{}: range [{}, {}] is empty", name, r.min, r.max)))
            } else {
                Ok(())
            }
        };
        if let Some(r) = &self.rotation {
            check("rotation", r)?;
        }
        if let Some(c) = &self.color {
            check("color.brightness", &c.brightness)?;
            check("color.contrast", &c.contrast)?;
            check("color.saturation", &c.saturation)?;
            check("color.hue", &c.hue)?;
            if c.brightness.min < 0.0 || c.contrast.min < 0.0 || c.saturation.min < 0.0 {
                return Err(ViewError::Spec("color factors must be nonnegative".into()));
            }
        }
        if let Some(r) = &self.blur {
            check("blur", r)?;
            if r.min < 0.0 {
                return Err(ViewError::Spec("blur sigma must be nonnegative".into()));
            }
        }
        if let Some(r) = &self.translation {
            check("translation", r)?;
        }
        if let Some(r) = &self.crop {
            check("crop", r)?;
            if r.min <= 0.0 || r.max > 1.0 {
                return Err(ViewError::Spec("crop scale must lie in (0, 1]".into()));
            }
        }
        if let Some(p) = self.flip {
            if !(0.0..=1.0).contains(&p) {
                return Err(ViewError::Spec(format!("flip probability {} outside [0, 1]", p)));
            }
        }
        Ok(())
    }

    fn ranges(&self, family: Family) -> Vec<Range> {
        match family {
            Family::Rotation => vec![self.rotation.expect("enabled")],
            Family::Color => {
                let c = self.color.expect("enabled");
                vec![c.brightness, c.contrast, c.saturation, c.hue]
            }
            Family::Blur => vec![self.blur.expect("enabled")],
            Family::Translation => vec![self.translation.expect("enabled"); 2],
            Family::Crop => vec![self.crop.expect("enabled"), UNIT, UNIT],
            Family::Flip => vec![],
        }
    }

    /// Names of the normalized target vector entries, e.g. `color.hue`.
    pub fn target_names(&self) -> Vec<String> {
        self.families()
            .into_iter()
            .flat_map(|f| f.param_names().iter().map(move |p| format!("{}.{}", f.name(), p)))
            .collect()
    }

    /// Family of each normalized target entry.
    pub fn target_families(&self) -> Vec<Family> {
        self.families().into_iter().flat_map(|f| std::iter::repeat(f).take(f.param_names().len())).collect()
    }

    /// Normalized parameter vector: each value affinely mapped to `[-1, 1]`,
    /// flip encoded as `{0, 1}`.
    pub fn normalize(&self, params: &TransformParams) -> Vec<f64> {
        let mut out = Vec::new();
        for fp in &params.entries {
            if fp.family == Family::Flip {
                out.push(fp.values[0]);
                continue;
            }
            for (v, r) in fp.values.iter().zip(self.ranges(fp.family)) {
                out.push(r.normalize(*v));
            }
        }
        out
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Result<TransformParams, ViewError> {
        let mut entries = Vec::new();
        let mut rest = normalized;
        for family in self.families() {
            let n = family.param_names().len();
            if rest.len() < n {
                return Err(ViewError::Params(format!("normalized vector too short for {}", family.name())));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            let values = if family == Family::Flip {
                head.to_vec()
            } else {
                head.iter().zip(self.ranges(family)).map(|(u, r)| r.denormalize(*u)).collect()
            };
            entries.push(FamilyParams { family, values });
        }
        if !rest.is_empty() {
            return Err(ViewError::Params(format!("{} surplus normalized values", rest.len())));
        }
        Ok(TransformParams { entries })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyParams {
    pub family: Family,
    pub values: Vec<f64>,
}

/// Concrete parameters for every enabled family, in [`Family::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub entries: Vec<FamilyParams>,
}

impl TransformParams {
    /// Parameters under which [`apply`] is the identity map.
    pub fn identity(spec: &TransformSpec) -> Self {
        let entries = spec
            .families()
            .into_iter()
            .map(|family| {
                let values = match family {
                    Family::Rotation => vec![0.0],
                    Family::Color => vec![1.0, 1.0, 1.0, 0.0],
                    Family::Blur => vec![0.0],
                    Family::Translation => vec![0.0, 0.0],
                    Family::Crop => vec![1.0, 0.5, 0.5],
                    Family::Flip => vec![0.0],
                };
                FamilyParams { family, values }
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, family: Family) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.family == family).map(|e| e.values.as_slice())
    }

    pub fn families(&self) -> Vec<Family> {
        self.entries.iter().map(|e| e.family).collect()
    }
}

/// Draws every enabled parameter uniformly within its range (flip as a
/// Bernoulli draw). Deterministic in `seed`.
pub fn sample_params(spec: &TransformSpec, seed: u64) -> TransformParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = spec
        .families()
        .into_iter()
        .map(|family| {
            let values = match family {
                Family::Flip => vec![if rng.gen_bool(spec.flip.expect("enabled")) { 1.0 } else { 0.0 }],
                _ => spec.ranges(family).iter().map(|r| r.sample(&mut rng)).collect(),
            };
            FamilyParams { family, values }
        })
        .collect();
    TransformParams { entries }
}

/// Mixes (seed, epoch, index) into an independent per-item seed.
pub fn item_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ index)
}

// ------------------------------------------------------------------ kernels

fn rotate(img: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let plane = h * w;
    if h == w && (degrees == 90.0 || degrees == -90.0 || degrees.abs() == 180.0) {
        let n = h;
        let mut out = vec![0.0; img.len()];
        for c in 0..CHANNELS {
            let src = &img[c * plane..(c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = if degrees == 90.0 {
                        src[j * n + (n - 1 - i)]
                    } else if degrees == -90.0 {
                        src[(n - 1 - j) * n + i]
                    } else {
                        src[(n - 1 - i) * n + (n - 1 - j)]
                    };
                }
            }
        }
        return out;
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(img.len());
    for c in 0..CHANNELS {
        let src = &img[c * plane..(c + 1) * plane];
        for i in 0..h {
            let y = i as f64 - cy;
            for j in 0..w {
                let x = j as f64 - cx;
                let sx = cos * x - sin * y + cx;
                let sy = sin * x + cos * y + cy;
                out.push(imageops::sample_zero(src, h, w, sy, sx));
            }
        }
    }
    out
}

fn translate(img: &[f32], h: usize, w: usize, dx: f64, dy: f64) -> Vec<f32> {
    if dx == 0.0 && dy == 0.0 {
        return img.to_vec();
    }
    let (sx, sy) = (dx * w as f64, dy * h as f64);
    let plane = h * w;
    let mut out = Vec::with_capacity(img.len());
    for c in 0..CHANNELS {
        let src = &img[c * plane..(c + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                out.push(imageops::sample_zero(src, h, w, i as f64 - sy, j as f64 - sx));
            }
        }
    }
    out
}

fn crop(img: &[f32], h: usize, w: usize, scale: f64, cx: f64, cy: f64) -> Vec<f32> {
    if scale >= 1.0 {
        return img.to_vec();
    }
    let side = scale.sqrt();
    let (ch, cw) = (side * h as f64, side * w as f64);
    let top = cy * (h as f64 - ch);
    let left = cx * (w as f64 - cw);
    imageops::resample_region(img, h, w, (top, left, ch, cw), h, w)
}

fn flip(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(out.len(), CHANNELS * h * w);
    out
}

fn clamp01(x: f32) -> f32 {
    x.clamp(0.0, 1.0)
}

/// Brightness, contrast, saturation, then hue.
fn color_jitter(img: &mut [f32], h: usize, w: usize, params: &[f64]) {
    let plane = h * w;
    let (brightness, contrast, saturation, hue) = (params[0] as f32, params[1] as f32, params[2] as f32, params[3] as f32);
    let (r, rest) = img.split_at_mut(plane);
    let (g, b) = rest.split_at_mut(plane);
    if brightness != 1.0 {
        for p in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *p = clamp01(*p * brightness);
        }
    }
    if contrast != 1.0 {
        let mean = (0..plane).map(|i| imageops::luma(r[i], g[i], b[i]) as f64).sum::<f64>() as f32 / plane as f32;
        for p in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *p = clamp01((*p - mean) * contrast + mean);
        }
    }
    if saturation != 1.0 {
        for i in 0..plane {
            let gray = imageops::luma(r[i], g[i], b[i]);
            r[i] = clamp01(gray + (r[i] - gray) * saturation);
            g[i] = clamp01(gray + (g[i] - gray) * saturation);
            b[i] = clamp01(gray + (b[i] - gray) * saturation);
        }
    }
    if hue != 0.0 {
        for i in 0..plane {
            let (hh, s, v) = imageops::rgb_to_hsv(r[i], g[i], b[i]);
            let (nr, ng, nb) = imageops::hsv_to_rgb(hh + hue, s, v);
            r[i] = clamp01(nr);
            g[i] = clamp01(ng);
            b[i] = clamp01(nb);
        }
    }
}

/// Separable Gaussian blur with replicated borders; sigma below 0.1 is a no-op.
fn blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma < 0.1 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let plane = h * w;
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    for c in 0..CHANNELS {
        let src = &img[c * plane..(c + 1) * plane];
        let t = &mut tmp[c * plane..(c + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let jj = (j as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += wt * src[i * w + jj];
                }
                t[i * w + j] = acc;
            }
        }
        let o = &mut out[c * plane..(c + 1) * plane];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let ii = (i as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += wt * t[ii * w + j];
                }
                o[i * w + j] = clamp01(acc);
            }
        }
    }
    out
}

/// Applies `params` to one planar `3 x h x w` image.
///
/// Order: crop, rotation, translation, flip, color, blur. Vacated pixels are
/// filled with 0 and the result is clamped to `[0, 1]`.
pub fn apply_image(img: &[f32], h: usize, w: usize, params: &TransformParams) -> Vec<f32> {
    let mut out = img.to_vec();
    if let Some(p) = params.get(Family::Crop) {
        out = crop(&out, h, w, p[0], p[1], p[2]);
    }
    if let Some(p) = params.get(Family::Rotation) {
        out = rotate(&out, h, w, p[0]);
    }
    if let Some(p) = params.get(Family::Translation) {
        out = translate(&out, h, w, p[0], p[1]);
    }
    if let Some(p) = params.get(Family::Flip) {
        if p[0] >= 0.5 {
            out = flip(&out, h, w);
        }
    }
    if let Some(p) = params.get(Family::Color) {
        color_jitter(&mut out, h, w, p);
    }
    if let Some(p) = params.get(Family::Blur) {
        out = blur(&out, h, w, p[0]);
    }
    out.iter_mut().for_each(|x| *x = clamp01(*x));
    out
}

/// Applies per-item parameters to a batch.
pub fn apply(batch: &ImageBatch, params: &[TransformParams]) -> ImageBatch {
    let (n, h, w) = batch_dims(batch);
    assert_eq!(params.len(), n, "one parameter set per image");
    let images: Vec<Vec<f32>> = (0..n).map(|i| apply_image(imageops::image(batch, i), h, w, &params[i])).collect();
    imageops::stack(&images, h, w)
}

/// Two views of a batch and the relative transform from the first to the second.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub v1: ImageBatch,
    pub v2: ImageBatch,
    /// Transform producing `v1` from the source image.
    pub first: Vec<TransformParams>,
    /// Transform producing `v2` from `v1`; the regression target.
    pub relative: Vec<TransformParams>,
}

impl ViewPair {
    /// `N x P` matrix of normalized relative parameters.
    pub fn targets(&self, spec: &TransformSpec) -> Vec<Vec<f64>> {
        self.relative.iter().map(|p| spec.normalize(p)).collect()
    }
}

pub fn view_pair_with(batch: &ImageBatch, first: Vec<TransformParams>, relative: Vec<TransformParams>) -> ViewPair {
    let v1 = apply(batch, &first);
    let v2 = apply(&v1, &relative);
    ViewPair { v1, v2, first, relative }
}

/// Builds a view pair; item `i` draws its parameters from `seeds[i]`
/// (see [`item_seed`]).
pub fn make_view_pair(batch: &ImageBatch, spec: &TransformSpec, seeds: &[u64]) -> ViewPair {
    let (first, relative) = seeds.iter().map(|&s| pair_params(spec, s)).unzip();
    view_pair_with(batch, first, relative)
}

/// The `(first, relative)` parameters [`make_view_pair`] uses for one item.
pub fn pair_params(spec: &TransformSpec, seed: u64) -> (TransformParams, TransformParams) {
    (sample_params(spec, item_seed(seed, 0, 1)), sample_params(spec, item_seed(seed, 0, 2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f32> {
        (0..CHANNELS * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
    }

    #[test]
    fn identity_params_are_exact() {
        let spec = TransformSpec::default();
        let img = ramp(8, 8);
        assert_eq!(apply_image(&img, 8, 8, &TransformParams::identity(&spec)), img);
    }

    #[test]
    fn right_angle_rotation_is_permutation() {
        let n = 4;
        let img = ramp(n, n);
        let params = TransformParams { entries: vec![FamilyParams { family: Family::Rotation, values: vec![90.0] }] };
        let out = apply_image(&img, n, n, &params);
        for c in 0..CHANNELS {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(out[c * 16 + i * n + j], img[c * 16 + j * n + (n - 1 - i)]);
                }
            }
        }
        // the interpolating path agrees with the permutation up to rounding
        let near = rotate(&img, n, n, 90.0 + 1e-9);
        for (a, b) in near.iter().zip(&out) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn flip_reverses_rows_and_composes_to_identity() {
        let row = [0.1f32, 0.2, 0.3, 0.4];
        let img: Vec<f32> = row.iter().cycle().take(CHANNELS * 4).copied().collect();
        let out = flip(&img, 1, 4);
        assert_eq!(&out[..4], &[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(flip(&out, 1, 4), img);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = vec![0.3f32; CHANNELS * 6 * 6];
        for v in blur(&img, 6, 6, 1.5) {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_shift_of_gray_is_noop() {
        let mut img = vec![0.5f32; CHANNELS * 2 * 2];
        color_jitter(&mut img, 2, 2, &[1.0, 1.0, 1.0, 0.3]);
        assert!(img.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn spec_validation() {
        assert!(TransformSpec::default().validate().is_ok());
        assert!(TransformSpec::none().validate().is_err());
        let mut s = TransformSpec::none();
        s.rotation = Some(Range::new(10.0, -10.0));
        assert!(s.validate().is_err());
    }
}
