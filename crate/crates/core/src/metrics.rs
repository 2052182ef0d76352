//! Image-quality metrics: PSNR, SSIM, LPIPS and FID.
//!
//! PSNR and SSIM operate on `[0, 255]` planes; LPIPS and FID take features
//! from a pluggable [`FeatureExtractor`].

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * PEAK) * (0.01 * PEAK);
const SSIM_C2: f64 = (0.03 * PEAK) * (0.03 * PEAK);
/// Largest tolerated imaginary component of the covariance-product root.
const MAX_IMAGINARY: f64 = 1e-3;
const PSD_TOLERANCE: f64 = 1e-8;

/// A `(channels, height, width)` image of `f64` samples on the `[0, 255]`
/// scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || data.is_empty() {
            return Err(Error::Shape(format!(
                "{} samples for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = p.0[c] as f64;
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn same_dims(a: &Planes, b: &Planes) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

/// `10 log10(255² / MSE)`.
pub fn psnr(a: &Planes, b: &Planes) -> Result<Psnr> {
    same_dims(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (PEAK * PEAK / mse).log10()))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filtering without padding: the output is
/// `(h - 10) × (w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
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

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// averaged over valid window positions and then over channels.
pub fn ssim(a: &Planes, b: &Planes) -> Result<f64> {
    same_dims(a, b)?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.plane(ch);
        let y = b.plane(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Gaussian fit of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl DistributionStats {
    /// Checks that `cov` is square, matches `mean`, is symmetric and is
    /// numerically positive semidefinite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || d == 0 {
            return Err(Error::Shape(format!(
                "mean of {d} dims with a {}x{} covariance",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Numerical("covariance is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        if min_eig < -PSD_TOLERANCE * scale {
            return Err(Error::Numerical(format!(
                "covariance has eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of `samples` (one row per
    /// sample). Needs at least `d + 1` samples.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().map(Vec::len).unwrap_or(0);
        if d == 0 {
            return Err(Error::SampleCount { needed: 1, got: 0 });
        }
        if samples.len() < d + 1 {
            return Err(Error::SampleCount {
                needed: d + 1,
                got: samples.len(),
            });
        }
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean: DVector<f64> = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`.
///
/// The trace of `(Σ₁Σ₂)^{1/2}` is taken from the symmetric similar matrix
/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`. Its negative eigenvalues correspond to imaginary
/// parts of the root: those below `1e-3` in magnitude are dropped, larger
/// ones are an error.
pub fn frechet_distance(s1: &DistributionStats, s2: &DistributionStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!("{} vs {} dims", s1.dim(), s2.dim())));
    }
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let root1 = sqrt_psd(&s1.cov);
    let mut inner = &root1 * &s2.cov * &root1;
    inner = (&inner + inner.transpose()) * 0.5;
    let mut tr_root = 0.0;
    for v in SymmetricEigen::new(inner).eigenvalues.iter() {
        if *v >= 0.0 {
            tr_root += v.sqrt();
        } else if (-v).sqrt() > MAX_IMAGINARY {
            return Err(Error::Numerical(format!(
                "matrix square root has an imaginary component of {:e}",
                (-v).sqrt()
            )));
        }
    }
    Ok(diff + s1.cov.trace() + s2.cov.trace() - 2.0 * tr_root)
}

pub fn fid_from_samples(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let s1 = DistributionStats::from_samples(real)?;
    let s2 = DistributionStats::from_samples(fake)?;
    frechet_distance(&s1, &s2)
}

/// Rows of a `(n, d)` tensor as `f64` vectors.
pub fn feature_rows(features: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(features.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Per-pair perceptual distance: channel-normalised stage features,
/// squared differences summed over channels, averaged spatially and summed
/// over stages. `a` and `b` are `(n, 3, h, w)` batches in `[-1, 1]`.
pub fn lpips_distance(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let fa = extractor.stages(a)?;
    let fb = extractor.stages(b)?;
    let n = a.dims()[0];
    let mut total = vec![0.0; n];
    for (x, y) in fa.iter().zip(&fb) {
        let x = x.to_dtype(DType::F64)?;
        let y = y.to_dtype(DType::F64)?;
        let unit = |t: &Tensor| -> Result<Tensor> {
            let norm = (t.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            Ok(t.broadcast_div(&norm)?)
        };
        let d = (unit(&x)? - unit(&y)?)?.sqr()?.sum(1)?.mean(2)?.mean(1)?;
        for (acc, v) in total.iter_mut().zip(d.to_vec1::<f64>()?) {
            *acc += v;
        }
    }
    Ok(total)
}

/// Aggregate quality of a set of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Mean PSNR; serialized as `"inf"` when every pair was identical.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// `None` when the set is too small to estimate a covariance.
    pub fid: Option<f64>,
    pub n: usize,
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr {t:?}"))),
    }
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::Value(format!("ssim {} outside [-1, 1]", self.ssim)));
        }
        if self.fid.is_some_and(|f| f < -1e-6) {
            return Err(Error::Value(format!("negative fid {:?}", self.fid)));
        }
        if !(self.psnr_db > 0.0) {
            return Err(Error::Value(format!("psnr {} is not positive", self.psnr_db)));
        }
        Ok(())
    }
}

/// Computes every metric over aligned `(n, 3, h, w)` batches of generated
/// and reference images in `[-1, 1]`.
pub fn evaluate(generated: &Tensor, reference: &Tensor, extractor: &dyn FeatureExtractor) -> Result<MetricsReport> {
    if generated.dims() != reference.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", generated.dims(), reference.dims())));
    }
    let gen_planes = crate::imageio::to_planes(generated)?;
    let ref_planes = crate::imageio::to_planes(reference)?;
    let n = gen_planes.len();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (g, r) in gen_planes.iter().zip(&ref_planes) {
        psnr_sum += psnr(g, r)?.db();
        ssim_sum += ssim(g, r)?;
    }
    let lpips = lpips_distance(generated, reference, extractor)?;
    let fid = match fid_from_samples(
        &feature_rows(&extractor.pooled(reference)?)?,
        &feature_rows(&extractor.pooled(generated)?)?,
    ) {
        Ok(v) => Some(v),
        Err(Error::SampleCount { .. }) => None,
        Err(e) => return Err(e),
    };
    let report = MetricsReport {
        psnr_db: psnr_sum / n as f64,
        ssim: ssim_sum / n as f64,
        lpips: lpips.iter().sum::<f64>() / n as f64,
        fid,
        n,
    };
    report.validate()?;
    Ok(report)
}
