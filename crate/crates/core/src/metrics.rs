//! Image fidelity (PSNR, SSIM), Fréchet distance between Gaussian feature
//! fits, and inter-ocular normalized landmark error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::imaging::{Image, LandmarkSet};

/// Upper bound reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Eigenvalues above `-PSD_TOLERANCE` count as nonnegative.
pub const PSD_TOLERANCE: f64 = 1e-6;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// PSNR in dB on the `[0, 1]`-mapped full frames, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (unit(x) - unit(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR restricted to hole pixels.
pub fn masked_psnr(a: &Image, b: &Image, mask: &crate::imaging::Mask) -> Result<f64> {
    check_same(a, b)?;
    if mask.dims() != a.dims() {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs image {:?}", mask.dims(), a.dims())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((pa, pb), &m) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).zip(mask.data()) {
        if m == 1 {
            sum += pa.iter().zip(pb).map(|(&x, &y)| (unit(x) - unit(y)).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::InvalidValue("masked PSNR needs a nonempty hole".into()));
    }
    if sum == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (n as f64 / sum).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable Gaussian filter of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) on `[0, 1]`
/// values, averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidValue(format!("SSIM needs at least 11x11 images, got {h}x{w}")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| unit(v)).collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| unit(v)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&prod(&x, &x), h, w, &k);
        let syy = filter_valid(&prod(&y, &y), h, w, &k);
        let sxy = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Mean and covariance of a Gaussian fit to feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::ShapeMismatch(format!("mean of dim {d} with covariance {:?}", cov.shape())));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: features.len(),
        });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    GaussianStats::new(mean, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with tiny negative eigenvalues
/// clipped to zero; anything below `-tolerance` is an error.
fn psd_eigen(m: &DMatrix<f64>, tolerance: f64, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -tolerance {
            return Err(Error::InvalidValue(format!("{what} is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, PSD_TOLERANCE, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// Fréchet distance `‖μx − μg‖² + Tr(Σx + Σg − 2(ΣxΣg)^{1/2})`.
///
/// The trace of the product root is taken as `Tr((√Σx Σg √Σx)^{1/2})`,
/// whose argument is symmetric PSD with the same spectrum as `ΣxΣg`.
pub fn fid(x: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if x.dim() != g.dim() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", x.dim(), g.dim())));
    }
    psd_eigen(&g.cov, PSD_TOLERANCE, "second covariance")?;
    let root_x = psd_sqrt(&x.cov, "first covariance")?;
    let inner = &root_x * &g.cov * &root_x;
    let scale = inner.amax().max(1.0);
    let eig = psd_eigen(&inner, PSD_TOLERANCE * scale, "covariance product")?;
    let trace_root: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let shift = (&x.mean - &g.mean).norm_squared();
    Ok(shift + x.cov.trace() + g.cov.trace() - 2.0 * trace_root)
}

/// Outer eye corners used for normalization.
pub const NME_EYE_CORNERS: (usize, usize) = (36, 45);

/// Mean point error divided by the ground-truth outer-eye-corner distance.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    let g = gt.points();
    let (l, r) = (g[NME_EYE_CORNERS.0], g[NME_EYE_CORNERS.1]);
    let iod = ((l[0] - r[0]) as f64).hypot((l[1] - r[1]) as f64);
    if iod < 1e-12 {
        return Err(Error::InvalidValue("inter-ocular distance is zero".into()));
    }
    let err: f64 = pred
        .points()
        .iter()
        .zip(g)
        .map(|(p, q)| ((p[0] - q[0]) as f64).hypot((p[1] - q[1]) as f64))
        .sum();
    Ok(err / g.len() as f64 / iod)
}
