//! Natural image quality evaluator: distance between the natural-scene
//! statistics of an image and a multivariate Gaussian fitted on a pristine
//! corpus. Lower is more natural.
//!
//! Features follow the usual NIQE recipe on 8-bit-scaled luminance: MSCN
//! coefficients, a generalized-Gaussian fit (shape, variance) and asymmetric
//! generalized-Gaussian fits (shape, mean, left/right variance) of the four
//! neighbour products, at two scales, per patch. Two local choices for small
//! images: the second scale is a 2x2 box downsample, and neighbour products
//! stay inside each patch instead of wrapping around.

use crate::{Error, Image, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

const FEATURES_PER_SCALE: usize = 18;
pub const FEATURE_DIM: usize = 2 * FEATURES_PER_SCALE;
const MIN_CORPUS: usize = 64;
const REGULARIZATION: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NiqeConfig {
    /// Patch side at full resolution; must be even.
    pub patch_size: usize,
    /// Corpus patches whose sharpness is below this fraction of the sharpest
    /// patch are skipped when fitting.
    pub sharpness_threshold: f64,
    /// Score display-referred (sRGB gamma-encoded) luminance rather than
    /// linear intensity.
    pub gamma_encode: bool,
    /// Stabilizing constant of the contrast normalization, on the 0-255 scale.
    pub mscn_constant: f64,
}

impl Default for NiqeConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            sharpness_threshold: 0.75,
            gamma_encode: false,
            mscn_constant: 1.0,
        }
    }
}

impl NiqeConfig {
    fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "NIQE patch size must be even and >= 8, got {}",
                self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.sharpness_threshold) {
            return Err(Error::Config("NIQE sharpness threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub config: NiqeConfig,
    pub mean: Vec<f64>,
    /// Row-major `FEATURE_DIM x FEATURE_DIM`.
    pub cov: Vec<f64>,
    /// Whether the fitted covariance needed diagonal loading.
    pub regularized: bool,
}

/// Shape grid shared by both fits, with the GGD moment ratio
/// `G(1/a) G(3/a) / G(2/a)^2` (strictly decreasing in `a`).
fn shape_table() -> &'static (Vec<f64>, Vec<f64>) {
    static TABLE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let shapes: Vec<f64> = (0..=9800).map(|i| 0.2 + 0.001 * i as f64).collect();
        let ratios = shapes
            .iter()
            .map(|a| {
                let g2 = libm::tgamma(2.0 / a);
                libm::tgamma(1.0 / a) * libm::tgamma(3.0 / a) / (g2 * g2)
            })
            .collect();
        (shapes, ratios)
    })
}

/// Shape whose GGD moment ratio is closest to `rho`.
fn shape_for_ratio(rho: f64) -> f64 {
    let (shapes, ratios) = shape_table();
    if !rho.is_finite() {
        return shapes[0];
    }
    // `ratios` is decreasing; find the first entry <= rho.
    let i = ratios.partition_point(|r| *r > rho);
    let pick = match i {
        0 => 0,
        i if i == ratios.len() => ratios.len() - 1,
        i if (ratios[i - 1] - rho).abs() <= (ratios[i] - rho).abs() => i - 1,
        i => i,
    };
    shapes[pick]
}

/// Symmetric generalized Gaussian: `(shape, variance)`.
fn fit_ggd(x: &[f64]) -> [f64; 2] {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let e_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if e_abs == 0.0 {
        return [shape_table().0.last().copied().unwrap_or(10.0), 0.0];
    }
    [shape_for_ratio(var / (e_abs * e_abs)), var]
}

/// Asymmetric generalized Gaussian: `(shape, mean, left var, right var)`.
fn fit_aggd(x: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for v in x {
        if *v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if *v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let n = x.len() as f64;
    let e_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let e_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if e_sq == 0.0 || left == 0.0 || right == 0.0 {
        // Degenerate (flat or one-sided) patch: report the widest shape and
        // the raw one-sided spreads.
        let shape = shape_table().0.last().copied().unwrap_or(10.0);
        return [shape, right - left, left * left, right * right];
    }
    let g = left / right;
    let r_hat = e_abs * e_abs / e_sq;
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    // The AGGD ratio is the reciprocal of the GGD one.
    let shape = shape_for_ratio(1.0 / r_norm);
    let g1 = libm::tgamma(1.0 / shape);
    let mean = (right - left) * (libm::tgamma(2.0 / shape) / g1) * (g1 / libm::tgamma(3.0 / shape)).sqrt();
    [shape, mean, left * left, right * right]
}

fn gaussian_7() -> [f64; 7] {
    let sigma = 7.0 / 6.0;
    let mut k = [0.0; 7];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 3.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable 7x7 Gaussian with replicated borders.
fn blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_7();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = (0..7).map(|i| k[i] * x[y * w + clamp(xx as isize + i as isize - 3, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = (0..7).map(|i| k[i] * tmp[clamp(y as isize + i as isize - 3, h) * w + xx]).sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients and the local deviation.
fn mscn(x: &[f64], h: usize, w: usize, c: f64) -> (Vec<f64>, Vec<f64>) {
    let mu = blur(x, h, w);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mu_sq = blur(&sq, h, w);
    let sigma: Vec<f64> = mu_sq.iter().zip(&mu).map(|(s, m)| (s - m * m).abs().sqrt()).collect();
    let coeffs = x.iter().zip(&mu).zip(&sigma).map(|((v, m), s)| (v - m) / (s + c)).collect();
    (coeffs, sigma)
}

fn patch_features(m: &[f64], w: usize, y0: usize, x0: usize, p: usize, out: &mut Vec<f64>) {
    let at = |y: usize, x: usize| m[(y0 + y) * w + x0 + x];
    let mut vals = Vec::with_capacity(p * p);
    for y in 0..p {
        for x in 0..p {
            vals.push(at(y, x));
        }
    }
    out.extend_from_slice(&fit_ggd(&vals));
    let shifts: [(usize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prods = Vec::with_capacity(p * p);
        for y in 0..p - dy {
            for x in 0..p {
                let xx = x as isize + dx;
                if xx < 0 || xx >= p as isize {
                    continue;
                }
                prods.push(at(y, x) * at(y + dy, xx as usize));
            }
        }
        out.extend_from_slice(&fit_aggd(&prods));
    }
}

/// Per-patch feature vectors and sharpness of one image.
fn image_features(image: &Image, config: &NiqeConfig) -> Result<(Vec<[f64; FEATURE_DIM]>, Vec<f64>)> {
    let p = config.patch_size;
    let (h, w) = (image.height(), image.width());
    if h < 2 * p || w < 2 * p {
        return Err(Error::InvalidInput(format!(
            "NIQE needs images of at least {}x{} for patch size {p}, got {h}x{w}",
            2 * p,
            2 * p
        )));
    }
    let encode = |v: f64| {
        if !config.gamma_encode {
            v
        } else if v <= 0.0031308 {
            12.92 * v
        } else {
            1.055 * v.powf(1.0 / 2.4) - 0.055
        }
    };
    let gray: Vec<f64> = image.luminance().iter().map(|v| encode(*v as f64) * 255.0).collect();
    let (m1, sigma1) = mscn(&gray, h, w, config.mscn_constant);
    let (h2, w2) = (h / 2, w / 2);
    let mut half = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            let s = gray[2 * y * w + 2 * x]
                + gray[2 * y * w + 2 * x + 1]
                + gray[(2 * y + 1) * w + 2 * x]
                + gray[(2 * y + 1) * w + 2 * x + 1];
            half[y * w2 + x] = s / 4.0;
        }
    }
    let (m2, _) = mscn(&half, h2, w2, config.mscn_constant);
    let mut feats = Vec::new();
    let mut sharp = Vec::new();
    for py in 0..h / p {
        for px in 0..w / p {
            let mut v = Vec::with_capacity(FEATURE_DIM);
            patch_features(&m1, w, py * p, px * p, p, &mut v);
            patch_features(&m2, w2, py * p / 2, px * p / 2, p / 2, &mut v);
            let mut arr = [0.0; FEATURE_DIM];
            arr.copy_from_slice(&v);
            feats.push(arr);
            let mut s = 0.0;
            for y in 0..p {
                for x in 0..p {
                    s += sigma1[(py * p + y) * w + px * p + x];
                }
            }
            sharp.push(s / (p * p) as f64);
        }
    }
    Ok((feats, sharp))
}

fn mean_cov(rows: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mean = DVector::zeros(FEATURE_DIM);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    if n > 1 {
        for r in rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

impl NiqeModel {
    /// Fits the pristine model on sharp patches of `corpus`.
    pub fn fit(corpus: &[&Image], config: NiqeConfig) -> Result<Self> {
        config.validate()?;
        if corpus.len() < MIN_CORPUS {
            return Err(Error::InvalidInput(format!(
                "NIQE corpus needs at least {MIN_CORPUS} images, got {}",
                corpus.len()
            )));
        }
        let mut rows = Vec::new();
        for image in corpus {
            let (feats, sharp) = image_features(image, &config)?;
            let max = sharp.iter().copied().fold(0.0, f64::max);
            rows.extend(
                feats
                    .into_iter()
                    .zip(&sharp)
                    .filter(|(_, s)| **s > config.sharpness_threshold * max)
                    .map(|(f, _)| f),
            );
        }
        // Guarantee the sharpest patches alone still give a usable estimate.
        if rows.len() < 2 {
            return Err(Error::InvalidInput("NIQE corpus yielded fewer than two patches".into()));
        }
        let (mean, mut cov) = mean_cov(&rows);
        let regularized = cov.clone().cholesky().is_none();
        if regularized {
            log::warn!("NIQE covariance is singular; adding {REGULARIZATION} to the diagonal");
            cov += DMatrix::identity(FEATURE_DIM, FEATURE_DIM) * REGULARIZATION;
        }
        Ok(Self {
            config,
            mean: mean.iter().copied().collect(),
            cov: cov.transpose().iter().copied().collect(),
            regularized,
        })
    }

    /// Distance of `image` from the pristine model (lower is better).
    pub fn score(&self, image: &Image) -> Result<f64> {
        if self.mean.len() != FEATURE_DIM || self.cov.len() != FEATURE_DIM * FEATURE_DIM {
            return Err(Error::Config("NIQE model has the wrong feature dimension".into()));
        }
        let (feats, _) = image_features(image, &self.config)?;
        let (mu, cov) = mean_cov(&feats);
        let model_mu = DVector::from_column_slice(&self.mean);
        let model_cov = DMatrix::from_row_slice(FEATURE_DIM, FEATURE_DIM, &self.cov);
        let pooled = (model_cov + cov) / 2.0;
        let inv = pooled
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InvalidInput(format!("NIQE covariance inversion failed: {e}")))?;
        let d = model_mu - mu;
        let q = (d.transpose() * inv * &d)[(0, 0)];
        Ok(q.max(0.0).sqrt())
    }
}
