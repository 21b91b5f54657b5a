use super::GrayImage;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Averages `k x k` tiles. Edge tiles that run past the image average only the
/// pixels present, so the output is `ceil(H/k) x ceil(W/k)`. Means are rounded
/// to the nearest integer, halves up.
pub fn downsample_avg(img: &GrayImage, k: usize) -> Result<GrayImage> {
    if k == 0 {
        return Err(Error::config("downsampling kernel must be at least 1"));
    }
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (w.div_ceil(k), h.div_ceil(k));
    let mut out = Vec::with_capacity(ow * oh);
    for ty in 0..oh {
        let ys = ty * k..((ty + 1) * k).min(h);
        for tx in 0..ow {
            let xs = tx * k..((tx + 1) * k).min(w);
            let count = (ys.len() * xs.len()) as u64;
            let sum: u64 = ys
                .clone()
                .flat_map(|y| img.pixels()[y * w + xs.start..y * w + xs.end].iter())
                .map(|&p| p as u64)
                .sum();
            out.push(((sum + count / 2) / count) as u16);
        }
    }
    GrayImage::new(ow, oh, img.bit_depth(), out)
}

/// Bilinear resampling with corner-aligned sample positions: output corner
/// pixels coincide with input corner pixels.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Maps raw samples linearly onto `[0, 255]` by bit depth, resizes to the
/// model's square input, and replicates the plane across all channels.
pub fn preprocess_view(img: &GrayImage, cfg: &ModelConfig) -> Result<Tensor> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::config("cannot preprocess an empty image"));
    }
    let scale = 255.0 / img.max_value() as f64;
    let plane: Vec<f64> = img.pixels().iter().map(|&p| p as f64 * scale).collect();
    let s = cfg.image_size;
    let resized = if img.width() == s && img.height() == s {
        plane
    } else {
        resize_bilinear(&plane, img.height(), img.width(), s, s)
    };
    let mut data = Vec::with_capacity(cfg.channels * s * s);
    for _ in 0..cfg.channels {
        data.extend(resized.iter().map(|v| v.clamp(0.0, 255.0)));
    }
    Tensor::new(vec![cfg.channels, s, s], data)
}
