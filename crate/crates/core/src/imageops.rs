//! Pixel-level helpers shared by the augmentation engine and the dataset tools.
//!
//! Images are planar RGB `f32` in `[0, 1]`: a single image is `3 x H x W`
//! and a batch is an `N x 3 x H x W` [`ImageBatch`].

use crate::gradcore::Tensor;

/// `N x 3 x H x W` pixel tensor with values in `[0, 1]`.
pub type ImageBatch = Tensor<f32>;

pub const CHANNELS: usize = 3;

pub fn batch_dims(batch: &ImageBatch) -> (usize, usize, usize) {
    let s = batch.shape();
    assert!(s.len() == 4 && s[1] == CHANNELS, "expected N x 3 x H x W, got {:?}", s);
    (s[0], s[2], s[3])
}

/// Planar pixels of image `i`.
pub fn image(batch: &ImageBatch, i: usize) -> &[f32] {
    let (_, h, w) = batch_dims(batch);
    let n = CHANNELS * h * w;
    &batch.data()[i * n..(i + 1) * n]
}

pub fn stack(images: &[Vec<f32>], h: usize, w: usize) -> ImageBatch {
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        assert_eq!(img.len(), CHANNELS * h * w);
        data.extend_from_slice(img);
    }
    Tensor::from_vec(vec![images.len(), CHANNELS, h, w], data)
}

/// Exact `floor` for values well inside the `i64` range, without the libm call.
fn floor_f64(x: f64) -> f64 {
    let t = x as i64 as f64;
    if t > x {
        t - 1.0
    } else {
        t
    }
}

fn floor_f32(x: f32) -> f32 {
    let t = x as i32 as f32;
    if t > x {
        t - 1.0
    } else {
        t
    }
}

/// Bilinear sample at continuous pixel-center coordinates; outside pixels read as 0.
pub fn sample_zero(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y0 = floor_f64(y);
    let x0 = floor_f64(x);
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let at = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear sample with coordinates clamped to the image border.
pub fn sample_clamped(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y as usize, x as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the axis-aligned region `(top, left, height, width)` of a planar
/// image to `out_h x out_w` with half-pixel-center bilinear interpolation.
pub fn resample_region(
    src: &[f32],
    h: usize,
    w: usize,
    region: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let (top, left, rh, rw) = region;
    let (sy, sx) = (rh / out_h as f64, rw / out_w as f64);
    let mut out = Vec::with_capacity(CHANNELS * out_h * out_w);
    for c in 0..CHANNELS {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for i in 0..out_h {
            let y = top + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..out_w {
                let x = left + (j as f64 + 0.5) * sx - 0.5;
                out.push(sample_clamped(plane, h, w, y, x));
            }
        }
    }
    out
}

pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    resample_region(src, h, w, (0.0, 0.0, h as f64, w as f64), out_h, out_w)
}

/// RGB in `[0,1]` to HSV with hue as a fraction of the full circle.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        let t = (g - b) / delta;
        if t < 0.0 {
            t + 6.0
        } else {
            t
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = h / 6.0;
    (h - floor_f32(h), s, v)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h - floor_f32(h)) * 6.0;
    let fl = floor_f32(h6);
    let sector = (fl as i32).rem_euclid(6);
    let f = h6 - fl;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.4f32, 0.9f32), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.8, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..3 * 4 * 4).map(|i| i as f32 / 48.0).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 4, 4), src);
        let flat = vec![0.25f32; 3 * 8 * 8];
        assert!(resize_bilinear(&flat, 8, 8, 3, 5).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn zero_fill_outside() {
        let plane = [1.0f32; 4];
        assert_eq!(sample_zero(&plane, 2, 2, -5.0, 0.0), 0.0);
        assert_eq!(sample_zero(&plane, 2, 2, 0.0, 0.0), 1.0);
    }
}
