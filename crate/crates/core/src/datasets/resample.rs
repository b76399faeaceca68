//! 28 x 28 to 7 x 7 downscaling and the 8 x 8 input frame.
//!
//! Both resamplers are pixel-centre aligned: output pixel k samples source
//! coordinate `4k + 1.5`, with source pixel i centred at i. `Point`
//! interpolates bilinearly at that coordinate, averaging a 2 x 2 block.
//! `Antialiased` widens the bilinear (triangle) kernel by the reduction
//! factor so that every source pixel contributes, renormalizing the taps
//! that fall inside the image.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::{Error, Result};

pub const SOURCE: usize = 28;
pub const TARGET: usize = 7;
pub const FRAME: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    #[default]
    Antialiased,
    Point,
}

/// Taps `(source index, weight)` for each output index along one axis.
fn taps(resampler: Resampler, src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let factor = src as f64 / dst as f64;
    (0..dst)
        .map(|k| {
            let center = factor * k as f64 + 0.5 * (factor - 1.0);
            let radius = match resampler {
                Resampler::Antialiased => factor.max(1.0),
                Resampler::Point => 1.0,
            };
            let raw: Vec<(usize, f64)> = (0..src)
                .filter_map(|i| {
                    let w = 1.0 - (i as f64 - center).abs() / radius;
                    (w > 0.0).then_some((i, w))
                })
                .collect();
            let total: f64 = raw.iter().map(|t| t.1).sum();
            raw.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect()
}

/// Downscales a row-major `SOURCE x SOURCE` image to `TARGET x TARGET`.
pub fn downscale(image: &[f64], resampler: Resampler) -> Result<Vec<f64>> {
    if image.len() != SOURCE * SOURCE {
        return Err(Error::Shape(format!("expected a {SOURCE}x{SOURCE} image, got {} values", image.len())));
    }
    let t = taps(resampler, SOURCE, TARGET);
    let mut rows = vec![0.0; SOURCE * TARGET];
    for r in 0..SOURCE {
        for (k, tk) in t.iter().enumerate() {
            rows[r * TARGET + k] = tk.iter().map(|&(i, w)| w * image[r * SOURCE + i]).sum();
        }
    }
    let mut out = vec![0.0; TARGET * TARGET];
    for (k, tk) in t.iter().enumerate() {
        for c in 0..TARGET {
            let v: f64 = tk.iter().map(|&(i, w)| w * rows[i * TARGET + c]).sum();
            out[k * TARGET + c] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Downscales with the default (antialiased bilinear) resampler.
pub fn downscale_bilinear(image: &[f64]) -> Result<Vec<f64>> {
    downscale(image, Resampler::default())
}

/// Places a `TARGET x TARGET` image at the top-left of a zero
/// `FRAME x FRAME` frame and flattens it row-major.
pub fn pad_and_linearize(image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != TARGET * TARGET {
        return Err(Error::Shape(format!("expected a {TARGET}x{TARGET} image, got {} values", image.len())));
    }
    let mut out = vec![0.0; FRAME * FRAME];
    for r in 0..TARGET {
        out[r * FRAME..r * FRAME + TARGET].copy_from_slice(&image[r * TARGET..(r + 1) * TARGET]);
    }
    Ok(out)
}

/// 28 x 28 images to 64-element input vectors.
pub fn mnist_pipeline(images: &LabeledDataset, resampler: Resampler) -> Result<LabeledDataset> {
    let mut inputs = Array2::zeros((images.len(), FRAME * FRAME));
    for (mut dst, src) in inputs.rows_mut().into_iter().zip(images.inputs.rows()) {
        let src = src.to_vec();
        let v = pad_and_linearize(&downscale(&src, resampler)?)?;
        dst.assign(&ndarray::ArrayView1::from(&v));
    }
    LabeledDataset::new(inputs, images.labels.clone(), images.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct 2D convolution with the same kernels, normalized jointly.
    fn oracle(image: &[f64], resampler: Resampler) -> Vec<f64> {
        let radius = match resampler {
            Resampler::Antialiased => 4.0,
            Resampler::Point => 1.0,
        };
        let kern = |d: f64| (1.0 - d.abs() / radius).max(0.0);
        let mut out = vec![0.0; 49];
        for ky in 0..7 {
            for kx in 0..7 {
                let (cy, cx) = (4.0 * ky as f64 + 1.5, 4.0 * kx as f64 + 1.5);
                let (mut num, mut den) = (0.0, 0.0);
                for y in 0..28 {
                    for x in 0..28 {
                        let w = kern(y as f64 - cy) * kern(x as f64 - cx);
                        num += w * image[y * 28 + x];
                        den += w;
                    }
                }
                out[ky * 7 + kx] = num / den;
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = crate::seed::rng(3);
        for resampler in [Resampler::Antialiased, Resampler::Point] {
            for _ in 0..5 {
                let img: Vec<f64> = (0..784).map(|_| rng.random()).collect();
                let a = downscale(&img, resampler).unwrap();
                let b = oracle(&img, resampler);
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_and_ramp() {
        for resampler in [Resampler::Antialiased, Resampler::Point] {
            let out = downscale(&[0.37; 784], resampler).unwrap();
            assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
        let ramp: Vec<f64> = (0..784).map(|k| (k % 28) as f64 / 27.0).collect();
        let point = downscale(&ramp, Resampler::Point).unwrap();
        let aa = downscale(&ramp, Resampler::Antialiased).unwrap();
        for k in 0..7 {
            let expected = (4.0 * k as f64 + 1.5) / 27.0;
            assert!((point[k] - expected).abs() < 1e-12);
            // The wide kernel is symmetric only away from the border.
            if (1..6).contains(&k) {
                assert!((aa[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_layout() {
        let ones = pad_and_linearize(&[1.0; 49]).unwrap();
        assert_eq!(ones.iter().filter(|&&v| v == 1.0).count(), 49);
        for k in 0..64 {
            assert_eq!(ones[k] == 0.0, k / 8 == 7 || k % 8 == 7);
        }
        assert!(pad_and_linearize(&[0.0; 49]).unwrap().iter().all(|&v| v == 0.0));
        let mut single = [0.0; 49];
        single[2 * 7 + 3] = 1.0;
        let v = pad_and_linearize(&single).unwrap();
        assert_eq!(v.iter().position(|&x| x == 1.0), Some(19));
        assert!(pad_and_linearize(&[0.0; 48]).is_err());
        assert!(downscale(&[0.0; 10], Resampler::Point).is_err());
    }
}
