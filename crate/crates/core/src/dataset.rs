//! Datasets: the EQDS binary format, the procedural mini-IEBench generator,
//! and ingestion of binary PPM (P6) image directories.
//!
//! EQDS layout (little-endian):
//!
//! ```text
//! "EQDS" | version u16 | count u32 | channels u8 | height u16 | width u16
//! count x ( pixels u8[height*width*3] (row-major RGB) | label u16 | n u8 | latents f32[n] )
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageops::{self, ImageBatch, CHANNELS};
use crate::views::{item_seed, Range};

pub const MAGIC: &[u8; 4] = b"EQDS";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("EQDS format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("PPM ingestion failed for {} file(s): {}", .0.len(), FailureList(.0))]
    Ingest(Vec<(PathBuf, String)>),
}

pub struct FailureList<'a>(&'a [(PathBuf, String)]);

impl fmt::Display for FailureList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (p, m)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", p.display(), m)?;
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Row-major interleaved RGB.
    pub pixels: Vec<u8>,
    pub label: u16,
    pub latents: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Format {
                offset: self.pos,
                message: format!("truncated while reading {} ({} bytes needed, {} left)", what, n, self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, DatasetError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u16> {
        let mut c: Vec<u16> = self.records.iter().map(|r| r.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    /// Planar `3 x H x W` image of record `i` in `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f32> {
        hwc_to_planar(&self.records[i].pixels, self.height, self.width)
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let images: Vec<Vec<f32>> = indices.iter().map(|&i| self.image(i)).collect();
        imageops::stack(&images, self.height, self.width)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.push(CHANNELS as u8);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.pixels);
            out.extend_from_slice(&r.label.to_le_bytes());
            out.push(r.latents.len() as u8);
            for l in &r.latents {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DatasetError> {
        let mut rd = Reader { buf, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != MAGIC {
            return Err(DatasetError::Format { offset: 0, message: format!("bad magic {:?}", String::from_utf8_lossy(magic)) });
        }
        let at = rd.pos;
        let version = rd.u16("version")?;
        if version != VERSION {
            return Err(DatasetError::Format { offset: at, message: format!("unsupported version {}", version) });
        }
        let count = rd.u32("record count")? as usize;
        let at = rd.pos;
        let channels = rd.u8("channels")?;
        if channels as usize != CHANNELS {
            return Err(DatasetError::Format { offset: at, message: format!("expected 3 channels, found {}", channels) });
        }
        let height = rd.u16("height")? as usize;
        let width = rd.u16("width")? as usize;
        if height == 0 || width == 0 {
            return Err(DatasetError::Format { offset: rd.pos - 4, message: "zero image extent".into() });
        }
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let pixels = rd.take(height * width * CHANNELS, &format!("pixels of record {}", i))?.to_vec();
            let label = rd.u16(&format!("label of record {}", i))?;
            let n = rd.u8(&format!("latent count of record {}", i))? as usize;
            let mut latents = Vec::with_capacity(n);
            for j in 0..n {
                let at = rd.pos;
                let v = f32::from_le_bytes(rd.take(4, &format!("latent {} of record {}", j, i))?.try_into().unwrap());
                if !v.is_finite() {
                    return Err(DatasetError::Format { offset: at, message: format!("non-finite latent in record {}", i) });
                }
                latents.push(v);
            }
            records.push(Record { pixels, label, latents });
        }
        if rd.pos != buf.len() {
            return Err(DatasetError::Format {
                offset: rd.pos,
                message: format!("{} trailing bytes after the declared {} records", buf.len() - rd.pos, count),
            });
        }
        Ok(Self { height, width, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

pub fn hwc_to_planar(pixels: &[u8], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; CHANNELS * h * w];
    for (p, px) in pixels.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            out[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    out
}

/// Quantizes a planar image to interleaved RGB bytes, clamping to `[0, 1]` first.
pub fn planar_to_hwc(img: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0u8; CHANNELS * h * w];
    for p in 0..h * w {
        for c in 0..CHANNELS {
            out[p * CHANNELS + c] = (img[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

// ------------------------------------------------------------------ mini-IEBench

/// Procedural stand-in for a rendered-object benchmark with known latents:
/// filled regular polygons (class = vertex count) with in-plane rotation,
/// hue and scale latents over a fixed gray value-noise background.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniIEBenchConfig {
    pub image_size: usize,
    /// Classes are vertex counts `3 ..= 2 + num_classes`.
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Degrees.
    pub rotation: Range,
    pub hue: Range,
    pub scale: Range,
    pub seed: u64,
}

impl Default for MiniIEBenchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 8,
            samples_per_class: 1000,
            rotation: Range::new(-90.0, 90.0),
            hue: Range::new(0.0, 1.0),
            scale: Range::new(0.5, 0.9),
            seed: 0,
        }
    }
}

pub const FILL_SATURATION: f64 = 0.85;
pub const FILL_VALUE: f64 = 0.9;
const SUBSAMPLES: usize = 4;

impl MiniIEBenchConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.samples_per_class < 1 {
            return Err(DatasetError::Config("samples_per_class must be at least 1".into()));
        }
        if !(1..=8).contains(&self.num_classes) {
            return Err(DatasetError::Config("num_classes must be in 1..=8 (vertex counts 3..=10)".into()));
        }
        if self.image_size < 4 || self.image_size > u16::MAX as usize {
            return Err(DatasetError::Config(format!("image_size {} out of range", self.image_size)));
        }
        for (name, r) in [("rotation", &self.rotation), ("hue", &self.hue), ("scale", &self.scale)] {
            if !(r.min <= r.max) {
                return Err(DatasetError::Config(format!("{} range [{}, {}] is empty", name, r.min, r.max)));
            }
        }
        if self.scale.min <= 0.0 || self.scale.max > 1.0 {
            return Err(DatasetError::Config("scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Smooth gray texture in `[0.25, 0.55]`, identical for every image of a dataset.
pub fn background(size: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, u64::MAX, 0));
    let mut out = vec![0.0f64; size * size];
    for (cell, amp) in [(8.0f64, 0.2f64), (3.0, 0.1)] {
        let n = (size as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 / cell, j as f64 / cell);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let (sy, sx) = (fy * fy * (3.0 - 2.0 * fy), fx * fx * (3.0 - 2.0 * fx));
                let v = |a: usize, b: usize| lattice[a * n + b];
                let top = v(y0, x0) * (1.0 - sx) + v(y0, x0 + 1) * sx;
                let bottom = v(y0 + 1, x0) * (1.0 - sx) + v(y0 + 1, x0 + 1) * sx;
                out[i * size + j] += amp * (top * (1.0 - sy) + bottom * sy);
            }
        }
    }
    out.iter().map(|v| (0.25 + v) as f32).collect()
}

/// Renders a filled regular `vertices`-gon over `background`. Rotation is in
/// degrees (counter-clockwise), `scale` is the circumradius as a fraction of
/// half the image side. Returns interleaved RGB bytes.
pub fn render_polygon(size: usize, background: &[f32], vertices: usize, rotation: f32, hue: f32, scale: f32) -> Vec<u8> {
    let c = size as f64 / 2.0;
    let radius = scale as f64 * c;
    let theta = (rotation as f64).to_radians();
    let pts: Vec<(f64, f64)> = (0..vertices)
        .map(|j| {
            let phi = std::f64::consts::FRAC_PI_2 + theta + 2.0 * std::f64::consts::PI * j as f64 / vertices as f64;
            (c + radius * phi.cos(), c - radius * phi.sin())
        })
        .collect();
    // Vertices run counter-clockwise on screen, i.e. clockwise in y-down coordinates.
    let inside = |x: f64, y: f64| {
        (0..vertices).all(|j| {
            let (ax, ay) = pts[j];
            let (bx, by) = pts[(j + 1) % vertices];
            (bx - ax) * (y - ay) - (by - ay) * (x - ax) <= 0.0
        })
    };
    let (fr, fg, fb) = imageops::hsv_to_rgb(hue, FILL_SATURATION as f32, FILL_VALUE as f32);
    let fill = [fr, fg, fb];
    let mut out = vec![0u8; size * size * CHANNELS];
    let step = 1.0 / SUBSAMPLES as f64;
    for i in 0..size {
        for j in 0..size {
            let mut hits = 0usize;
            for a in 0..SUBSAMPLES {
                for b in 0..SUBSAMPLES {
                    let y = i as f64 + (a as f64 + 0.5) * step;
                    let x = j as f64 + (b as f64 + 0.5) * step;
                    if inside(x, y) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f32 / (SUBSAMPLES * SUBSAMPLES) as f32;
            let bg = background[i * size + j];
            for ch in 0..CHANNELS {
                let v = alpha * fill[ch] + (1.0 - alpha) * bg;
                out[(i * size + j) * CHANNELS + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Stored latent vector: `[rotation_degrees, hue, scale]`.
pub const LATENT_NAMES: [&str; 3] = ["rotation", "hue", "scale"];

/// Generates `num_classes * samples_per_class` records with classes interleaved.
/// The label of a record is its polygon's vertex count.
pub fn generate_mini_iebench(cfg: &MiniIEBenchConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let size = cfg.image_size;
    let bg = background(size, cfg.seed);
    let total = cfg.num_classes * cfg.samples_per_class;
    let records = (0..total)
        .map(|i| {
            let class = i % cfg.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, 0, i as u64));
            let draw = |rng: &mut ChaCha8Rng, r: &Range| if r.max > r.min { rng.gen_range(r.min..r.max) } else { r.min };
            let rotation = draw(&mut rng, &cfg.rotation) as f32;
            let hue = draw(&mut rng, &cfg.hue) as f32;
            let scale = draw(&mut rng, &cfg.scale) as f32;
            Record {
                pixels: render_polygon(size, &bg, class + 3, rotation, hue, scale),
                label: (class + 3) as u16,
                latents: vec![rotation, hue, scale],
            }
        })
        .collect();
    Ok(Dataset { height: size, width: size, records })
}

// ------------------------------------------------------------------ PPM

/// Parses a binary PPM (P6) with maxval <= 255. Returns `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("not a binary PPM (magic {:?})", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {} {:?}", what, s));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {}", maxval));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * CHANNELS;
    if bytes.len() < pos + need {
        return Err(format!("pixel data truncated ({} of {} bytes)", bytes.len().saturating_sub(pos), need));
    }
    let mut rgb = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for v in &mut rgb {
            *v = ((*v as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok((w, h, rgb))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads the PPM images named in `labels_file` (lines `filename<TAB>class`)
/// from `dir` and resizes them to `size x size`. Any bad file aborts the
/// ingestion; the error lists every offender.
pub fn ingest_ppm_dir(dir: &Path, labels_file: &Path, size: usize) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(labels_file).map_err(io_err(labels_file))?;
    let mut failures = Vec::new();
    let mut records = Vec::new();
    let mut first_dims: Option<(usize, usize)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((name, class)) = line.split_once('\t') else {
            failures.push((labels_file.to_path_buf(), format!("line {}: expected filename<TAB>class", lineno + 1)));
            continue;
        };
        let path = dir.join(name.trim());
        let label = match class.trim().parse::<u16>() {
            Ok(l) => l,
            Err(_) => {
                failures.push((path, format!("bad class {:?}", class.trim())));
                continue;
            }
        };
        let parsed = fs::read(&path).map_err(|e| e.to_string()).and_then(|b| parse_ppm(&b));
        match parsed {
            Err(msg) => failures.push((path, msg)),
            Ok((w, h, rgb)) => {
                let dims = *first_dims.get_or_insert((w, h));
                if dims != (w, h) {
                    failures.push((path, format!("size {}x{} differs from {}x{}", w, h, dims.0, dims.1)));
                    continue;
                }
                let planar = hwc_to_planar(&rgb, h, w);
                let resized = imageops::resize_bilinear(&planar, h, w, size, size);
                records.push(Record { pixels: planar_to_hwc(&resized, size, size), label, latents: Vec::new() });
            }
        }
    }
    if !failures.is_empty() {
        return Err(DatasetError::Ingest(failures));
    }
    Ok(Dataset { height: size, width: size, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 10).collect();
        let bytes = encode_ppm(3, 2, &rgb);
        assert_eq!(parse_ppm(&bytes).unwrap(), (3, 2, rgb));
    }

    #[test]
    fn ppm_with_comment_header() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_ppm(&bytes).unwrap(), (1, 1, vec![1, 2, 3]));
    }

    #[test]
    fn planar_quantization_round_trip() {
        let rgb: Vec<u8> = (0..4 * 3).map(|i| (i * 21) as u8).collect();
        assert_eq!(planar_to_hwc(&hwc_to_planar(&rgb, 2, 2), 2, 2), rgb);
    }

    #[test]
    fn quantization_clamps_out_of_range_values() {
        let img = [-0.5, 1.7, f32::NEG_INFINITY];
        assert_eq!(planar_to_hwc(&img, 1, 1), [0, 255, 0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MiniIEBenchConfig { samples_per_class: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.samples_per_class = 1;
        assert!(cfg.validate().is_ok());
    }
}
