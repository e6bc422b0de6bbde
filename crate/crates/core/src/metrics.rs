//! Image quality metrics: PSNR and SSIM over unit-range images.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Peak signal-to-noise ratio in dB with peak value 1.0. Identical images
/// return `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape("psnr", a.shape(), b.shape())?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr", "empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

/// 11-tap Gaussian window with sigma 1.5, normalized to unit sum.
fn ssim_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    let sigma = 1.5;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *wi = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= sum;
    }
    w
}

/// Mean structural similarity over all fully-valid 11x11 windows (no padding).
/// Constants K1 = 0.01, K2 = 0.03, dynamic range L = 1.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape("ssim", a.shape(), b.shape())?;
    if a.shape().len() != 2 {
        return Err(Error::invalid(
            "ssim",
            format!("expected 2-D images, got {:?}", a.shape()),
        ));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < 11 || w < 11 {
        return Err(Error::invalid(
            "ssim",
            format!("images must be at least 11x11, got {h}x{w}"),
        ));
    }
    let win = ssim_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);

    // separable weighted local moments
    let hh = h;
    let ww = w - 10; // horizontally filtered width
    let mut fa = vec![0.0; hh * ww];
    let mut fb = vec![0.0; hh * ww];
    let mut faa = vec![0.0; hh * ww];
    let mut fbb = vec![0.0; hh * ww];
    let mut fab = vec![0.0; hh * ww];
    for y in 0..hh {
        for x in 0..ww {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let va = a.at2(y, x + k);
                let vb = b.at2(y, x + k);
                sa += wk * va;
                sb += wk * vb;
                saa += wk * va * va;
                sbb += wk * vb * vb;
                sab += wk * va * vb;
            }
            let idx = y * ww + x;
            fa[idx] = sa;
            fb[idx] = sb;
            faa[idx] = saa;
            fbb[idx] = sbb;
            fab[idx] = sab;
        }
    }
    let oh = h - 10;
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ww {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut m_aa = 0.0;
            let mut m_bb = 0.0;
            let mut m_ab = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let idx = (y + k) * ww + x;
                mu_a += wk * fa[idx];
                mu_b += wk * fb[idx];
                m_aa += wk * faa[idx];
                m_bb += wk * fbb[idx];
                m_ab += wk * fab[idx];
            }
            let var_a = m_aa - mu_a * mu_a;
            let var_b = m_bb - mu_b * mu_b;
            let cov = m_ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
        }
    }
    Ok(total / (oh * ww) as f64)
}
