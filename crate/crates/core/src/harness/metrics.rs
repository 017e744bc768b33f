//! Reconstruction and distribution-level metrics.

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, SymEigen, EIGEN_FLOOR};
use crate::oracles::GaussianSpec;

/// Ridge added to a rank-deficient sample covariance.
pub const COV_RIDGE: f64 = 1e-9;
/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 200.0;

/// Sample mean and unbiased covariance of the rows of `samples`.
pub fn fit_gaussian(samples: ArrayView2<f64>) -> Result<GaussianSpec> {
    let (n, d) = samples.dim();
    if n <= d {
        return Err(Error::Config(format!("need more than {d} samples to fit, got {n}")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let mean = samples.mean_axis(Axis(0)).expect("nonempty");
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let mut cov = linalg::symmetrize(&DMatrix::from_fn(d, d, |i, j| cov[(i, j)]));
    let min_eig = SymEigen::new(&cov).values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig <= EIGEN_FLOOR {
        log::warn!("sample covariance is rank deficient; adding {COV_RIDGE}·I");
        for i in 0..d {
            cov[(i, i)] += COV_RIDGE;
        }
    }
    GaussianSpec::new_psd(DVector::from_iterator(d, mean.iter().copied()), cov)
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn frechet_gaussian(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    check_dim("frechet dimension", a.dim(), b.dim())?;
    if a.mean() == b.mean() && a.cov() == b.cov() {
        return Ok(0.0);
    }
    let mean_gap = (a.mean() - b.mean()).norm_squared();
    let ra = a.eigen().sqrt();
    let cross = linalg::symmetrize(&(&ra * b.cov() * &ra));
    let cross_root = linalg::psd_sqrt(&cross);
    let tr = a.cov().trace() + b.cov().trace() - 2.0 * cross_root.trace();
    Ok((mean_gap + tr).max(0.0))
}

/// `10 log10(range² / mse)`, capped for exact matches.
pub fn psnr(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
}

/// Mean over coordinates of the across-reconstruction sample standard
/// deviation; `recs` holds the reconstructions of one observation as rows.
pub fn diversity_of(recs: ArrayView2<f64>) -> Result<f64> {
    let k = recs.nrows();
    if k < 2 {
        return Err(Error::Config("diversity needs at least two reconstructions".into()));
    }
    Ok(recs.std_axis(Axis(0), 1.0).mean().expect("nonempty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    /// Over the first reconstruction of each observation.
    pub mse: f64,
    pub psnr: f64,
    /// Over all reconstructions.
    pub mse_all: f64,
    pub psnr_all: f64,
    pub mse_stderr: f64,
    pub consistency_mse: f64,
    pub consistency_psnr: f64,
    pub diversity: f64,
    pub diversity_stderr: f64,
    /// At least one PSNR hit the cap.
    pub capped: bool,
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `recs` has `k` consecutive rows per observation; `forward` maps
/// reconstruction `j` of observation `i` into observation space.
pub fn reconstruction_metrics(
    x_true: ArrayView2<f64>,
    y: ArrayView2<f64>,
    recs: ArrayView2<f64>,
    k: usize,
    data_range: f64,
    forward: impl Fn(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<ReconstructionMetrics> {
    let n = x_true.nrows();
    if k < 2 {
        return Err(Error::Config("reconstruction metrics need k >= 2".into()));
    }
    if !(data_range > 0.0) {
        return Err(Error::Config("data_range must be positive".into()));
    }
    check_dim("reconstruction rows", n * k, recs.nrows())?;
    check_dim("observation rows", n, y.nrows())?;
    check_dim("reconstruction width", x_true.ncols(), recs.ncols())?;
    let sq = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64
    };

    let mut first_mse = Vec::with_capacity(n);
    let mut all_mse = 0.0;
    let mut consistency = 0.0;
    let mut diversities = Vec::with_capacity(n);
    for i in 0..n {
        let x = x_true.row(i).to_vec();
        let block = recs.slice(ndarray::s![i * k..(i + 1) * k, ..]);
        let first = block.row(0).to_vec();
        first_mse.push(sq(&first, &x));
        for r in block.axis_iter(Axis(0)) {
            all_mse += sq(&r.to_vec(), &x);
        }
        consistency += sq(&forward(i, &first)?, &y.row(i).to_vec());
        diversities.push(diversity_of(block)?);
    }
    let (mse, mse_stderr) = mean_and_stderr(&first_mse);
    let (diversity, diversity_stderr) = mean_and_stderr(&diversities);
    let mse_all = all_mse / (n * k) as f64;
    let consistency_mse = consistency / n as f64;
    let metrics = ReconstructionMetrics {
        mse,
        psnr: psnr(mse, data_range),
        mse_all,
        psnr_all: psnr(mse_all, data_range),
        mse_stderr,
        consistency_mse,
        consistency_psnr: psnr(consistency_mse, data_range),
        diversity,
        diversity_stderr,
        capped: mse <= 0.0 || consistency_mse <= 0.0,
    };
    if metrics.capped {
        log::warn!("PSNR capped at {PSNR_CAP} dB (zero error)");
    }
    Ok(metrics)
}
