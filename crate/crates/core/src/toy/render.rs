//! Isotropic Gaussian point splatting onto a square pixel grid, and the
//! two-scale L1 reconstruction loss.

use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::augmentation::LossWeights;
use crate::linalg::{gemm, MatRef};

/// `size × size` intensities, row-major with row index `v` (y) and column
/// index `u` (x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; size * size] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.size + u]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Pixel pitch in scene units for a grid spanning `[-1, 1]`.
pub fn pixel_pitch(grid: usize) -> f64 {
    2.0 / grid as f64
}

/// Scene coordinate of pixel center `k` along one axis.
pub fn pixel_center(grid: usize, k: usize) -> f64 {
    -1.0 + (k as f64 + 0.5) * pixel_pitch(grid)
}

/// Per-axis kernel factors: `out[i * grid + k] = exp(-(c_k - coord_i)² / 2σ²)`.
fn axis_factors(positions: &[[f64; 2]], axis: usize, grid: usize, sigma: f64, out: &mut [f64]) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, p) in positions.iter().enumerate() {
        for k in 0..grid {
            let d = pixel_center(grid, k) - p[axis];
            out[i * grid + k] = (-d * d * inv).exp();
        }
    }
}

/// Renders `Σ_i exp(-‖pix − pos_i‖² / 2σ²)` with `σ = kernel_sigma_px` pixels.
///
/// The isotropic kernel factorizes over axes, so the image is `EYᵀ·EX`
/// where `EX`/`EY` hold the per-axis factors of every point.
pub fn render_points(positions: &[[f64; 2]], grid: usize, kernel_sigma_px: f64) -> Image {
    RenderCache::new(positions, grid, kernel_sigma_px).image
}

/// Forward pass state kept for the backward pass.
pub struct RenderCache {
    grid: usize,
    sigma: f64,
    ex: Vec<f64>,
    ey: Vec<f64>,
    pub image: Image,
}

impl RenderCache {
    pub fn new(positions: &[[f64; 2]], grid: usize, kernel_sigma_px: f64) -> Self {
        let n = positions.len();
        let sigma = kernel_sigma_px * pixel_pitch(grid);
        let mut ex = vec![0.0; n * grid];
        let mut ey = vec![0.0; n * grid];
        axis_factors(positions, 0, grid, sigma, &mut ex);
        axis_factors(positions, 1, grid, sigma, &mut ey);
        let mut image = Image::zeros(grid);
        gemm(MatRef::row_major(&ey, n, grid).t(), MatRef::row_major(&ex, n, grid), 0.0, &mut image.data);
        Self { grid, sigma, ex, ey, image }
    }

    /// Gradient of a scalar with respect to each position, given its
    /// gradient with respect to the image.
    pub fn backward(&self, positions: &[[f64; 2]], d_image: &Image) -> Vec<[f64; 2]> {
        let n = positions.len();
        let g = self.grid;
        let mut d_ex = vec![0.0; n * g];
        let mut d_ey = vec![0.0; n * g];
        gemm(MatRef::row_major(&self.ey, n, g), MatRef::row_major(&d_image.data, g, g), 0.0, &mut d_ex);
        gemm(MatRef::row_major(&self.ex, n, g), MatRef::row_major(&d_image.data, g, g).t(), 0.0, &mut d_ey);
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for k in 0..g {
                    let c = pixel_center(g, k);
                    gx += d_ex[i * g + k] * self.ex[i * g + k] * (c - p[0]);
                    gy += d_ey[i * g + k] * self.ey[i * g + k] * (c - p[1]);
                }
                [gx * inv_s2, gy * inv_s2]
            })
            .collect()
    }
}

/// 2×2 average pooling. An odd trailing row/column is dropped.
pub fn downsample2(img: &Image) -> Image {
    let h = img.size / 2;
    let mut out = Image::zeros(h);
    for v in 0..h {
        for u in 0..h {
            out.data[v * h + u] = 0.25
                * (img.at(2 * u, 2 * v)
                    + img.at(2 * u + 1, 2 * v)
                    + img.at(2 * u, 2 * v + 1)
                    + img.at(2 * u + 1, 2 * v + 1));
        }
    }
    out
}

fn mean_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `λ_l1·meanL1(pred, target) + λ_perc·meanL1(down2(pred), down2(target))`.
pub fn recon_loss(pred: &Image, target: &Image, weights: &LossWeights) -> Result<f64, ToyError> {
    if pred.size != target.size {
        return Err(ToyError::ShapeMismatch { expected: target.size, got: pred.size });
    }
    let fine = mean_l1(&pred.data, &target.data);
    let coarse = if pred.size >= 2 { mean_l1(&downsample2(pred).data, &downsample2(target).data) } else { 0.0 };
    Ok(weights.lambda_l1 * fine + weights.lambda_perceptual * coarse)
}

/// The individual summands of [`recon_loss`]: one per fine pixel, then one per
/// coarse pixel. Their sum equals the loss up to summation order.
pub fn recon_loss_terms(pred: &Image, target: &Image, weights: &LossWeights) -> Result<Vec<f64>, ToyError> {
    if pred.size != target.size {
        return Err(ToyError::ShapeMismatch { expected: target.size, got: pred.size });
    }
    let n = pred.data.len() as f64;
    let mut terms: Vec<f64> =
        pred.data.iter().zip(&target.data).map(|(p, t)| weights.lambda_l1 * (p - t).abs() / n).collect();
    if pred.size >= 2 {
        let (dp, dt) = (downsample2(pred), downsample2(target));
        let m = dp.data.len() as f64;
        terms.extend(dp.data.iter().zip(&dt.data).map(|(p, t)| weights.lambda_perceptual * (p - t).abs() / m));
    }
    Ok(terms)
}

/// `recon_loss` together with its (sub)gradient with respect to `pred`.
/// The sign of a zero residual is taken as zero.
pub fn recon_loss_grad(pred: &Image, target: &Image, weights: &LossWeights) -> Result<(f64, Image), ToyError> {
    let loss = recon_loss(pred, target, weights)?;
    let g = pred.size;
    let mut grad = Image::zeros(g);
    let fine_scale = weights.lambda_l1 / (g * g) as f64;
    for ((o, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        *o = fine_scale * sign(p - t);
    }
    let h = g / 2;
    if h > 0 {
        let dp = downsample2(pred);
        let dt = downsample2(target);
        let coarse_scale = 0.25 * weights.lambda_perceptual / (h * h) as f64;
        for v in 0..h {
            for u in 0..h {
                let s = coarse_scale * sign(dp.data[v * h + u] - dt.data[v * h + u]);
                for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    grad.data[(2 * v + dv) * g + 2 * u + du] += s;
                }
            }
        }
    }
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
