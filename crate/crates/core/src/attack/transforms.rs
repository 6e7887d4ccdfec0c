//! Input-diversity and translation-invariance transforms for the attack
//! loop.

use crate::error::{Error, Result};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use xfer_tensor::Tensor;

/// Random resize-and-refit applied with probability `prob`, as a graph op
/// so attack gradients flow through it. The target side is drawn from
/// [low, high]; smaller targets are zero-padded back to the input size at
/// a random offset, larger ones are randomly cropped. Draw order is
/// fixed: gate, target side, row offset, column offset.
pub fn diversity_transform_t(
    x: &Tensor,
    low: usize,
    high: usize,
    prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    if low > high {
        return Err(Error::Config(format!("diversity resize_low {low} > resize_high {high}")));
    }
    if low == 0 {
        return Err(Error::Config("diversity resize_low must be >= 1".into()));
    }
    let sh = x.shape();
    let (h, w) = (sh[2], sh[3]);
    if h != w {
        return Err(Error::Config(format!(
            "diversity transform requires square inputs, got {h}x{w}"
        )));
    }
    if rng.random::<f64>() >= prob {
        return Ok(x.clone());
    }
    let r = rng.random_range(low..=high);
    let resized = if r == h { x.clone() } else { x.resize_nearest(r, r) };
    if r < h {
        let top = rng.random_range(0..=(h - r));
        let left = rng.random_range(0..=(w - r));
        Ok(resized.pad2d(top, h - r - top, left, w - r - left))
    } else if r > h {
        let top = rng.random_range(0..=(r - h));
        let left = rng.random_range(0..=(r - w));
        Ok(resized.crop2d(top, left, h, w))
    } else {
        Ok(resized)
    }
}

/// Plain-array form of the diversity transform.
pub fn diversity_transform(
    x: &Array4<f64>,
    low: usize,
    high: usize,
    prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Array4<f64>> {
    let t = diversity_transform_t(&Tensor::constant(x.clone().into_dyn()), low, high, prob, rng)?;
    Ok(t.value().into_dimensionality::<ndarray::Ix4>().expect("rank 4"))
}

/// Normalized k x k Gaussian kernel with sigma = k / 3.
pub fn gaussian_kernel(k: usize) -> Array2<f64> {
    let mut kernel = Array2::<f64>::zeros((k, k));
    if k == 1 {
        kernel[[0, 0]] = 1.0;
        return kernel;
    }
    let c = (k - 1) as f64 / 2.0;
    let sigma = k as f64 / 3.0;
    let denom = 2.0 * sigma * sigma;
    for i in 0..k {
        for j in 0..k {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            kernel[[i, j]] = (-(dy * dy + dx * dx) / denom).exp();
        }
    }
    let sum = kernel.sum();
    kernel.mapv_inplace(|v| v / sum);
    kernel
}

fn reflect(i: isize, n: usize) -> usize {
    // symmetric padding: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    let n = n as isize;
    let m = if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
    m as usize
}

/// Depthwise convolution of a gradient batch with the normalized Gaussian
/// kernel, same-shape output with symmetric padding. k = 1 is the
/// identity; even k is rejected.
pub fn translation_smooth(grad: &Array4<f64>, k: usize) -> Result<Array4<f64>> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("translation kernel must be odd, got {k}")));
    }
    if k == 1 {
        return Ok(grad.clone());
    }
    let (b, c, h, w) = grad.dim();
    let half = (k / 2) as isize;
    if k / 2 > h || k / 2 > w {
        return Err(Error::Config(format!(
            "translation kernel {k} too large for a {h}x{w} gradient"
        )));
    }
    let kernel = gaussian_kernel(k);
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = reflect(y as isize + ky as isize - half, h);
                        for kx in 0..k {
                            let ix = reflect(x as isize + kx as isize - half, w);
                            acc += kernel[[ky, kx]] * grad[[bi, ci, iy, ix]];
                        }
                    }
                    out[[bi, ci, y, x]] = acc;
                }
            }
        }
    }
    Ok(out)
}
