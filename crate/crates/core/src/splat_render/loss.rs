//! Interior masking, the masked loss stack and image-quality metrics.

use serde::{Deserialize, Serialize};

use super::{RenderError, RenderOutput};
use crate::image::{GrayImage, Image, Mask, RgbImage};

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f64,
    pub ssim: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 0.8,
            ssim: 0.2,
            depth: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rgb: f64,
    pub ssim: f64,
    pub depth: f64,
}

/// Thresholds accumulated opacity and erodes the result with a
/// `(2r+1)²` square. Pixels outside the image count as unsupported.
pub fn interior_mask(acc_alpha: &GrayImage, alpha_thresh: f64, radius: usize) -> Mask {
    let (w, h) = (acc_alpha.width, acc_alpha.height);
    let support: Vec<bool> = acc_alpha.data.iter().map(|&a| a > alpha_thresh).collect();
    if radius == 0 {
        return Image {
            width: w,
            height: h,
            data: support,
        };
    }
    let r = radius as isize;
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).all(|dx| {
                let xx = x as isize + dx;
                xx >= 0 && xx < w as isize && support[y * w + xx as usize]
            });
        }
    }
    Image::from_fn(w, h, |x, y| {
        (-r..=r).all(|dy| {
            let yy = y as isize + dy;
            yy >= 0 && yy < h as isize && rows[yy as usize * w + x]
        })
    })
}

fn window_1d() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Zero-padded separable filtering with the SSIM window.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = window_1d();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && xx < w as isize {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && yy < h as isize {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-channel local statistics of a masked image pair, plus the partial
/// derivatives of the SSIM map with respect to the raw moments.
struct SsimChannel {
    map: Vec<f64>,
    /// ∂S/∂μx, ∂S/∂E[x²], ∂S/∂E[xy], already divided by the window mass.
    d_mx: Vec<f64>,
    d_sxx: Vec<f64>,
    d_sxy: Vec<f64>,
}

fn ssim_channel(x: &[f64], y: &[f64], mask: &[f64], w: usize, h: usize, with_grad: bool) -> SsimChannel {
    let n = w * h;
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { (0..n).map(|i| a[i] * b[i] * mask[i]).collect() };
    let mx_raw: Vec<f64> = (0..n).map(|i| x[i] * mask[i]).collect();
    let my_raw: Vec<f64> = (0..n).map(|i| y[i] * mask[i]).collect();
    let z = blur(mask, w, h);
    let bx = blur(&mx_raw, w, h);
    let by = blur(&my_raw, w, h);
    let bxx = blur(&prod(x, x), w, h);
    let byy = blur(&prod(y, y), w, h);
    let bxy = blur(&prod(x, y), w, h);
    let mut out = SsimChannel {
        map: vec![0.0; n],
        d_mx: vec![0.0; if with_grad { n } else { 0 }],
        d_sxx: vec![0.0; if with_grad { n } else { 0 }],
        d_sxy: vec![0.0; if with_grad { n } else { 0 }],
    };
    for i in 0..n {
        if mask[i] == 0.0 || z[i] <= 0.0 {
            continue;
        }
        let zi = z[i];
        let (mx, my) = (bx[i] / zi, by[i] / zi);
        let vx = bxx[i] / zi - mx * mx;
        let vy = byy[i] / zi - my * my;
        let cxy = bxy[i] / zi - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        out.map[i] = s;
        if with_grad {
            out.d_mx[i] = (2.0 * my * (a2 - a1) / (b1 * b2) - s * 2.0 * mx * (b2 - b1) / (b1 * b2)) / zi;
            out.d_sxx[i] = -s / b2 / zi;
            out.d_sxy[i] = 2.0 * a1 / (b1 * b2) / zi;
        }
    }
    out
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[c]).collect()
}

fn mask_f64(mask: &Mask) -> Vec<f64> {
    mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Mean SSIM over the masked pixels and the three channels. Window
/// statistics only use masked, in-image pixels, with the window renormalized.
pub fn masked_ssim(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64, RenderError> {
    let count = mask.count();
    if count == 0 {
        return Err(RenderError::EmptyMask);
    }
    if !a.same_size(b) || !a.same_size(mask) {
        return Err(RenderError::SizeMismatch);
    }
    let m = mask_f64(mask);
    let mut total = 0.0;
    for c in 0..3 {
        let ch = ssim_channel(&channel(a, c), &channel(b, c), &m, a.width, a.height, false);
        total += ch.map.iter().sum::<f64>();
    }
    Ok(total / (3.0 * count as f64))
}

/// Full-image SSIM.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let full = Image::filled(a.width, a.height, true);
    masked_ssim(a, b, &full).expect("non-empty image of matching size")
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    assert!(a.same_size(b));
    let mut se = 0.0;
    for (p, q) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            se += (p[c] - q[c]).powi(2);
        }
    }
    let mse = se / (3 * a.len()) as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

fn check_sizes(render: &RenderOutput, gt_rgb: &RgbImage, gt_depth: &GrayImage, mask: &Mask) -> Result<(), RenderError> {
    if !render.color.same_size(gt_rgb) || !render.color.same_size(gt_depth) || !render.color.same_size(mask) {
        return Err(RenderError::SizeMismatch);
    }
    if mask.count() == 0 {
        return Err(RenderError::EmptyMask);
    }
    Ok(())
}

pub fn losses(
    render: &RenderOutput,
    gt_rgb: &RgbImage,
    gt_depth: &GrayImage,
    mask: &Mask,
    w: &LossWeights,
) -> Result<LossTerms, RenderError> {
    check_sizes(render, gt_rgb, gt_depth, mask)?;
    Ok(evaluate(render, gt_rgb, gt_depth, mask, w, false).0)
}

/// Loss terms plus `∂L/∂C` and `∂L/∂D` per pixel.
pub fn loss_image_grads(
    render: &RenderOutput,
    gt_rgb: &RgbImage,
    gt_depth: &GrayImage,
    mask: &Mask,
    w: &LossWeights,
) -> Result<(LossTerms, Vec<[f64; 3]>, Vec<f64>), RenderError> {
    check_sizes(render, gt_rgb, gt_depth, mask)?;
    Ok(evaluate(render, gt_rgb, gt_depth, mask, w, true))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn evaluate(
    render: &RenderOutput,
    gt_rgb: &RgbImage,
    gt_depth: &GrayImage,
    mask: &Mask,
    w: &LossWeights,
    with_grad: bool,
) -> (LossTerms, Vec<[f64; 3]>, Vec<f64>) {
    let (width, height) = (mask.width, mask.height);
    let n = width * height;
    let count = mask.count() as f64;
    let mut g_color = vec![[0.0; 3]; if with_grad { n } else { 0 }];
    let mut g_depth = vec![0.0; if with_grad { n } else { 0 }];

    let mut rgb = 0.0;
    for i in 0..n {
        if !mask.data[i] {
            continue;
        }
        for c in 0..3 {
            let r = render.color.data[i][c] - gt_rgb.data[i][c];
            rgb += r.abs();
            if with_grad {
                g_color[i][c] += w.rgb * sign(r) / (3.0 * count);
            }
        }
    }
    let rgb = rgb / (3.0 * count);

    let depth_px: Vec<usize> = (0..n).filter(|&i| mask.data[i] && gt_depth.data[i] > 0.0).collect();
    let mut depth = 0.0;
    for &i in &depth_px {
        let r = render.depth.data[i] - gt_depth.data[i];
        depth += r.abs();
        if with_grad {
            g_depth[i] = w.depth * sign(r) / depth_px.len() as f64;
        }
    }
    if !depth_px.is_empty() {
        depth /= depth_px.len() as f64;
    }

    let m = mask_f64(mask);
    let mut ssim_sum = 0.0;
    for c in 0..3 {
        let x = channel(&render.color, c);
        let y = channel(gt_rgb, c);
        let ch = ssim_channel(&x, &y, &m, width, height, with_grad);
        ssim_sum += ch.map.iter().sum::<f64>();
        if with_grad && w.ssim != 0.0 {
            let scale = -w.ssim / (3.0 * count);
            let f1 = blur(&ch.d_mx, width, height);
            let f2 = blur(&ch.d_sxx, width, height);
            let f3 = blur(&ch.d_sxy, width, height);
            for i in 0..n {
                if mask.data[i] {
                    g_color[i][c] += scale * (f1[i] + 2.0 * x[i] * f2[i] + y[i] * f3[i]);
                }
            }
        }
    }
    let ssim_loss = 1.0 - ssim_sum / (3.0 * count);

    let terms = LossTerms {
        total: w.rgb * rgb + w.ssim * ssim_loss + w.depth * depth,
        rgb,
        ssim: ssim_loss,
        depth,
    };
    (terms, g_color, g_depth)
}
