//! Closed-form ground truth.
//!
//! Gaussian and Gaussian-mixture targets stay in their family under VE
//! diffusion (the covariance just gains `v(t)·I`), so their diffused scores,
//! conditionals and posteriors are available exactly. These are what the
//! learned estimators and the samplers are checked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, SymEigen};
use crate::rng::{self, Purpose};
use crate::sde::{MultiBlockSdeSpec, VeSdeSpec};

const SYMMETRY_TOL: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

/// A multivariate normal with a cached eigendecomposition of its covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianSpec {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    eig: SymEigen,
}

impl PartialEq for GaussianSpec {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl TryFrom<GaussianRepr> for GaussianSpec {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let cov = linalg::matrix_from_rows(&r.cov)
            .ok_or_else(|| Error::Config("covariance rows have unequal lengths".into()))?;
        GaussianSpec::new(DVector::from_vec(r.mean), cov)
    }
}

impl From<GaussianSpec> for GaussianRepr {
    fn from(g: GaussianSpec) -> Self {
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov: linalg::matrix_to_rows(&g.cov),
        }
    }
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let g = Self::new_psd(mean, cov)?;
        if g.eig.values.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("covariance is not positive definite".into()));
        }
        Ok(g)
    }

    /// Accepts positive semi-definite covariances (e.g. empirical fits of
    /// degenerate samples).
    pub(crate) fn new_psd(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::Config("covariance must be square".into()));
        }
        check_dim("gaussian mean", cov.nrows(), mean.len())?;
        if mean.is_empty() {
            return Err(Error::Config("gaussian needs at least one dimension".into()));
        }
        if linalg::max_asymmetry(&cov) > SYMMETRY_TOL {
            return Err(Error::Config("covariance is not symmetric".into()));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gaussian parameters".into()));
        }
        let eig = SymEigen::new(&cov);
        Ok(Self { mean, cov, eig })
    }

    pub fn from_slices(mean: &[f64], cov_rows: &[Vec<f64>]) -> Result<Self> {
        let cov = linalg::matrix_from_rows(cov_rows)
            .ok_or_else(|| Error::Config("covariance rows have unequal lengths".into()))?;
        Self::new(DVector::from_column_slice(mean), cov)
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eig
    }

    /// Score of `N(μ, Σ + v·I)` at `point`.
    pub fn score_with_variance(&self, v: f64, point: &[f64]) -> Result<Vec<f64>> {
        check_dim("gaussian score", self.dim(), point.len())?;
        let diff = DVector::from_column_slice(point) - &self.mean;
        let q = &self.eig.vectors;
        let mut coeffs = q.tr_mul(&diff);
        for (c, &l) in coeffs.iter_mut().zip(self.eig.values.iter()) {
            *c /= (l + v).max(linalg::EIGEN_FLOOR);
        }
        Ok((q * coeffs).iter().map(|c| -c).collect())
    }

    /// ln N(point; μ, Σ + v·I)
    pub fn log_density_with_variance(&self, v: f64, point: &[f64]) -> Result<f64> {
        check_dim("gaussian density", self.dim(), point.len())?;
        let diff = DVector::from_column_slice(point) - &self.mean;
        let coeffs = self.eig.vectors.tr_mul(&diff);
        let maha: f64 = coeffs
            .iter()
            .zip(self.eig.values.iter())
            .map(|(c, &l)| c * c / (l + v).max(linalg::EIGEN_FLOOR))
            .sum();
        Ok(-0.5 * (maha + self.eig.log_det_shifted(v) + self.dim() as f64 * LN_2PI))
    }

    pub fn log_density(&self, point: &[f64]) -> Result<f64> {
        self.log_density_with_variance(0.0, point)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let mut z = DVector::zeros(d);
        for (zi, &l) in z.iter_mut().zip(self.eig.values.iter()) {
            *zi = l.max(0.0).sqrt() * rng::standard_normal(rng);
        }
        (&self.mean + &self.eig.vectors * z).iter().copied().collect()
    }
}

/// ∇ ln p_t at `point` for `p_0 = g` diffused by `spec` up to time `t`.
pub fn gaussian_diffused_score(
    g: &GaussianSpec,
    spec: &VeSdeSpec,
    t: f64,
    point: &[f64],
) -> Result<Vec<f64>> {
    g.score_with_variance(spec.marginal_variance(t)?, point)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentRepr {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRepr {
    components: Vec<ComponentRepr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct GmmSpec {
    weights: Vec<f64>,
    components: Vec<GaussianSpec>,
}

impl TryFrom<GmmRepr> for GmmSpec {
    type Error = Error;

    fn try_from(r: GmmRepr) -> Result<Self> {
        let components = r
            .components
            .into_iter()
            .map(|c| {
                let g = GaussianSpec::try_from(GaussianRepr {
                    mean: c.mean,
                    cov: c.cov,
                })?;
                Ok((c.weight, g))
            })
            .collect::<Result<Vec<_>>>()?;
        GmmSpec::new(components)
    }
}

impl From<GmmSpec> for GmmRepr {
    fn from(m: GmmSpec) -> Self {
        GmmRepr {
            components: m
                .weights
                .into_iter()
                .zip(m.components)
                .map(|(weight, g)| {
                    let r = GaussianRepr::from(g);
                    ComponentRepr {
                        weight,
                        mean: r.mean,
                        cov: r.cov,
                    }
                })
                .collect(),
        }
    }
}

impl GmmSpec {
    pub fn new(components: Vec<(f64, GaussianSpec)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != dim) {
            return Err(Error::Config("mixture components differ in dimension".into()));
        }
        if components.iter().any(|(w, _)| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let (weights, components) = components.into_iter().unzip();
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianSpec] {
        &self.components
    }

    fn log_terms(&self, v: f64, point: &[f64]) -> Result<Vec<f64>> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| Ok(w.ln() + g.log_density_with_variance(v, point)?))
            .collect()
    }

    pub fn log_density_with_variance(&self, v: f64, point: &[f64]) -> Result<f64> {
        let terms = self.log_terms(v, point)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(top + terms.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    }

    /// Component responsibilities of the `v`-diffused mixture at `point`.
    pub fn responsibilities(&self, v: f64, point: &[f64]) -> Result<Vec<f64>> {
        let terms = self.log_terms(v, point)?;
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = terms.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / z).collect())
    }

    pub fn score_with_variance(&self, v: f64, point: &[f64]) -> Result<Vec<f64>> {
        let resp = self.responsibilities(v, point)?;
        let mut out = vec![0.0; self.dim()];
        for (r, g) in resp.iter().zip(&self.components) {
            for (o, s) in out.iter_mut().zip(g.score_with_variance(v, point)?) {
                *o += r * s;
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample(rng)
    }
}

pub fn gmm_diffused_score(m: &GmmSpec, spec: &VeSdeSpec, t: f64, point: &[f64]) -> Result<Vec<f64>> {
    m.score_with_variance(spec.marginal_variance(t)?, point)
}

/// A Gaussian over `z = (x, y)` with its block split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGaussianSpec {
    joint: GaussianSpec,
    n_x: usize,
    n_y: usize,
}

/// `x | y_t` for a joint Gaussian whose `y` block has been diffused by an
/// extra variance. The mean is affine in the conditioning value and the
/// covariance does not depend on it.
#[derive(Debug, Clone)]
pub struct ConditionalMap {
    gain: DMatrix<f64>,
    offset: DVector<f64>,
    cov: DMatrix<f64>,
    cov_eig: SymEigen,
}

impl ConditionalMap {
    pub fn n_x(&self) -> usize {
        self.offset.len()
    }

    pub fn n_y(&self) -> usize {
        self.gain.ncols()
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean(&self, y: &[f64]) -> Result<DVector<f64>> {
        check_dim("conditioning value", self.n_y(), y.len())?;
        Ok(&self.offset + &self.gain * DVector::from_column_slice(y))
    }

    /// `(cond_cov + v_x·I)⁻¹`
    pub fn precision(&self, v_x: f64) -> DMatrix<f64> {
        self.cov_eig.shifted_inverse(v_x)
    }

    /// Score of the x-block diffused by `v_x`: `−(C + v_x I)⁻¹ (x_t − m(y))`.
    pub fn score(&self, v_x: f64, x_t: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let precision = self.precision(v_x);
        self.score_with_precision(&precision, x_t, y)
    }

    pub fn score_with_precision(
        &self,
        precision: &DMatrix<f64>,
        x_t: &[f64],
        y: &[f64],
    ) -> Result<Vec<f64>> {
        check_dim("conditional score point", self.n_x(), x_t.len())?;
        let diff = DVector::from_column_slice(x_t) - self.mean(y)?;
        Ok((precision * diff).iter().map(|v| -v).collect())
    }

    pub fn to_gaussian(&self, y: &[f64]) -> Result<GaussianSpec> {
        GaussianSpec::new_psd(self.mean(y)?, self.cov.clone())
    }
}

impl JointGaussianSpec {
    pub fn new(joint: GaussianSpec, n_x: usize, n_y: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 || n_x + n_y != joint.dim() {
            return Err(Error::Config(format!(
                "block split ({n_x}, {n_y}) inconsistent with dimension {}",
                joint.dim()
            )));
        }
        Ok(Self { joint, n_x, n_y })
    }

    /// Standard bivariate normal with correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        let g = GaussianSpec::from_slices(&[0.0, 0.0], &[vec![1.0, rho], vec![rho, 1.0]])?;
        Self::new(g, 1, 1)
    }

    pub fn joint(&self) -> &GaussianSpec {
        &self.joint
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn x_marginal(&self) -> GaussianSpec {
        let mean = self.joint.mean.rows(0, self.n_x).into_owned();
        let cov = self.joint.cov.view((0, 0), (self.n_x, self.n_x)).into_owned();
        GaussianSpec::new_psd(mean, cov).expect("sub-block of a valid covariance")
    }

    /// Condition `x` on `y_t = y + e`, `e ~ N(0, y_var·I)`.
    pub fn condition(&self, y_var: f64) -> Result<ConditionalMap> {
        let (nx, ny) = (self.n_x, self.n_y);
        let cov = &self.joint.cov;
        let sxx = cov.view((0, 0), (nx, nx));
        let sxy = cov.view((0, nx), (nx, ny));
        let mut syy = cov.view((nx, nx), (ny, ny)).into_owned();
        for i in 0..ny {
            syy[(i, i)] += y_var;
        }
        let syy_eig = SymEigen::new(&syy);
        if syy_eig.values.iter().any(|&l| l <= linalg::EIGEN_FLOOR) {
            return Err(Error::Numeric("conditioning block is singular".into()));
        }
        let gain = sxy * syy_eig.shifted_inverse(0.0);
        let mu_x = self.joint.mean.rows(0, nx);
        let mu_y = self.joint.mean.rows(nx, ny);
        let offset = mu_x - &gain * mu_y;
        let cond_cov = linalg::symmetrize(&(sxx - &gain * sxy.transpose()));
        let cov_eig = SymEigen::new(&cond_cov);
        Ok(ConditionalMap {
            gain,
            offset,
            cov: cond_cov,
            cov_eig,
        })
    }

    /// p(x | y) as a Gaussian.
    pub fn joint_conditional(&self, y: &[f64]) -> Result<GaussianSpec> {
        self.condition(0.0)?.to_gaussian(y)
    }
}

fn xy_variances(mspec: &MultiBlockSdeSpec, t: f64) -> Result<(f64, f64)> {
    let (x, y) = mspec.xy()?;
    Ok((x.spec.marginal_variance(t)?, y.spec.marginal_variance(t)?))
}

/// ∇_{x_t} ln p(x_t | y) with the condition left clean.
pub fn conditional_score_given_clean_y(
    j: &JointGaussianSpec,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    x_t: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let (v_x, _) = xy_variances(mspec, t)?;
    j.condition(0.0)?.score(v_x, x_t, y)
}

/// ∇_{x_t} ln p(x_t | y_t), the x-block of the joint diffused score.
pub fn conditional_score_given_diffused_y(
    j: &JointGaussianSpec,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    x_t: &[f64],
    y_t: &[f64],
) -> Result<Vec<f64>> {
    let (v_x, v_y) = xy_variances(mspec, t)?;
    j.condition(v_y)?.score(v_x, x_t, y_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseErrorPoint {
    pub sigma_y_max: f64,
    pub mse: f64,
    pub mc_stderr: f64,
}

/// Monte-Carlo estimate of `E_{y_t ~ p(y_t|y)} ‖∇ln p(x_t|y_t) − ∇ln p(x_t|y)‖²`
/// for each condition speed in `sigma_y_max_grid`.
///
/// The x diffusion is `x_spec`; each grid value builds a y diffusion sharing
/// its σ_min and horizon. The same normal draws are reused across the grid.
#[allow(clippy::too_many_arguments)]
pub fn condition_noise_error_curve(
    j: &JointGaussianSpec,
    x_spec: &VeSdeSpec,
    t: f64,
    x_t: &[f64],
    y: &[f64],
    sigma_y_max_grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<NoiseErrorPoint>> {
    if sigma_y_max_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("sigma_y_max grid must be ascending".into()));
    }
    if n_mc < 2 {
        return Err(Error::Config("need at least two Monte-Carlo draws".into()));
    }
    check_dim("error curve x_t", j.n_x(), x_t.len())?;
    check_dim("error curve y", j.n_y(), y.len())?;
    let v_x = x_spec.marginal_variance(t)?;
    let clean = j.condition(0.0)?;
    let reference = DVector::from_vec(clean.score(v_x, x_t, y)?);
    let y_vec = DVector::from_column_slice(y);

    sigma_y_max_grid
        .iter()
        .map(|&sigma_y_max| {
            let y_spec = x_spec.with_sigma_max(sigma_y_max)?;
            let v_y = y_spec.marginal_variance(t)?;
            let std_y = v_y.sqrt();
            let map = j.condition(v_y)?;
            let precision = map.precision(v_x);
            let x_vec = DVector::from_column_slice(x_t);
            let mut rng = rng::substream(seed, Purpose::MonteCarlo, 0);
            let mut z = vec![0.0; j.n_y()];
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n_mc {
                rng::fill_standard_normal(&mut rng, &mut z);
                let y_t = if v_y == 0.0 {
                    y_vec.clone()
                } else {
                    &y_vec + DVector::from_column_slice(&z) * std_y
                };
                let mean = &map.offset + &map.gain * y_t;
                let score = -(&precision * (&x_vec - mean));
                let gap = (score - &reference).norm_squared();
                sum += gap;
                sum_sq += gap * gap;
            }
            let n = n_mc as f64;
            let mse = sum / n;
            let var = ((sum_sq - n * mse * mse) / (n - 1.0)).max(0.0);
            Ok(NoiseErrorPoint {
                sigma_y_max,
                mse,
                mc_stderr: (var / n).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineTarget {
    /// Regress on the transition score ∇ ln p(x_t | x_0).
    CdeTarget,
    /// Regress on the exact conditional score ∇ ln p(x_t | y).
    TrueConditionalTarget,
}

/// `s(x_t, y) = A·(x_t, y) + b` at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineScore {
    pub fn eval(&self, x_t: &[f64], y: &[f64]) -> Vec<f64> {
        let feats: Vec<f64> = x_t.iter().chain(y).copied().collect();
        (&self.weights * DVector::from_vec(feats) + &self.bias)
            .iter()
            .copied()
            .collect()
    }

    /// All coefficients flattened (weights row-major, then bias).
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out: Vec<f64> = linalg::matrix_to_rows(&self.weights).concat();
        out.extend(self.bias.iter());
        out
    }
}

/// Streaming least squares over features `(x_t, y, 1)`.
#[derive(Debug, Clone)]
pub struct AffineFitAccumulator {
    n_x: usize,
    n_y: usize,
    gram: DMatrix<f64>,
    moment: DMatrix<f64>,
    count: usize,
}

impl AffineFitAccumulator {
    pub fn new(n_x: usize, n_y: usize) -> Self {
        let d = n_x + n_y + 1;
        Self {
            n_x,
            n_y,
            gram: DMatrix::zeros(d, d),
            moment: DMatrix::zeros(d, n_x),
            count: 0,
        }
    }

    pub fn push(&mut self, x_t: &[f64], y: &[f64], target: &[f64]) -> Result<()> {
        check_dim("affine fit x_t", self.n_x, x_t.len())?;
        check_dim("affine fit y", self.n_y, y.len())?;
        check_dim("affine fit target", self.n_x, target.len())?;
        let feats: Vec<f64> = x_t.iter().chain(y).copied().chain([1.0]).collect();
        let d = feats.len();
        for i in 0..d {
            for k in 0..d {
                self.gram[(i, k)] += feats[i] * feats[k];
            }
            for (k, tk) in target.iter().enumerate() {
                self.moment[(i, k)] += feats[i] * tk;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn solve(&self) -> Result<AffineScore> {
        let eig = SymEigen::new(&self.gram);
        let top = eig.values.iter().cloned().fold(0.0, f64::max);
        let bottom = eig.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(top > 0.0) || bottom <= 1e-12 * top {
            return Err(Error::Rank(format!(
                "normal equations are singular ({} samples)",
                self.count
            )));
        }
        let beta = eig.map(|l| 1.0 / l) * &self.moment;
        let d = self.n_x + self.n_y;
        let weights = beta.rows(0, d).transpose();
        let bias = beta.row(d).transpose();
        Ok(AffineScore { weights, bias })
    }
}

/// Least-squares affine fit over `(x_t, y, target)` rows.
pub fn fit_affine_score<'a, I>(n_x: usize, n_y: usize, rows: I) -> Result<AffineScore>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
{
    let mut acc = AffineFitAccumulator::new(n_x, n_y);
    for (x_t, y, target) in rows {
        acc.push(x_t, y, target)?;
    }
    acc.solve()
}

/// Draw `n` samples `(x_0, y) ~ j`, diffuse `x_0` to `x_t` and fit the
/// affine score against the requested target. Identical seeds give the
/// identical `(x_t, y)` design for both targets.
pub fn fit_affine_score_sampled(
    j: &JointGaussianSpec,
    x_spec: &VeSdeSpec,
    t: f64,
    n: usize,
    target: AffineTarget,
    seed: u64,
) -> Result<AffineScore> {
    let (nx, ny) = (j.n_x(), j.n_y());
    let v = x_spec.marginal_variance(t)?;
    let clean = j.condition(0.0)?;
    let precision = clean.precision(v);
    let mut data_rng = rng::substream(seed, Purpose::Data, 0);
    let mut noise_rng = rng::substream(seed, Purpose::Block, 0);
    let mut acc = AffineFitAccumulator::new(nx, ny);
    for _ in 0..n {
        let z0 = j.joint().sample(&mut data_rng);
        let (x0, y) = z0.split_at(nx);
        let x_t = x_spec.transition_sample(x0, t, &mut noise_rng)?;
        let tgt = match target {
            AffineTarget::CdeTarget => x_spec.transition_score(x0, &x_t, t)?,
            AffineTarget::TrueConditionalTarget => clean.score_with_precision(&precision, &x_t, y)?,
        };
        acc.push(&x_t, y, &tgt)?;
    }
    acc.solve()
}
