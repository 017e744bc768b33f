//! Forward operators and `(x, y = A x)` datasets.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::{read_f64s, split_header, write_f64s};
use crate::oracles::{ConditionalMap, GaussianSpec, GmmSpec, JointGaussianSpec};
use crate::rng::{self, Purpose};
use crate::samplers::ScoreSource;
use crate::sde::VeSdeSpec;

/// Fraction of coordinates hidden by [`ForwardOperator::Mask`].
pub const MASK_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForwardOperator {
    /// Zero a contiguous block of `⌈n/4⌉` coordinates at a seeded offset.
    Mask,
    /// Means over consecutive blocks of `k` coordinates.
    Pool { k: usize },
    /// `y = A x + noise_std · z`, with `matrix` given row by row.
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        noise_std: f64,
    },
}

/// The operator as a concrete matrix for one draw of its randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedOperator {
    pub matrix: DMatrix<f64>,
    pub noise_std: f64,
}

pub fn mask_len(n: usize) -> usize {
    (MASK_FRACTION * n as f64).ceil() as usize
}

impl ForwardOperator {
    pub fn name(&self) -> &'static str {
        match self {
            ForwardOperator::Mask => "mask",
            ForwardOperator::Pool { .. } => "pool",
            ForwardOperator::Linear { .. } => "linear",
        }
    }

    pub fn validate(&self, n_x: usize) -> Result<()> {
        if n_x == 0 {
            return Err(Error::Config("operator input dimension must be positive".into()));
        }
        match self {
            ForwardOperator::Mask => Ok(()),
            ForwardOperator::Pool { k } => {
                if *k == 0 || n_x % k != 0 {
                    return Err(Error::Config(format!(
                        "pool size {k} must divide the dimension {n_x}"
                    )));
                }
                Ok(())
            }
            ForwardOperator::Linear { matrix, noise_std } => {
                if matrix.is_empty() {
                    return Err(Error::Config("linear operator has no rows".into()));
                }
                for row in matrix {
                    check_dim("linear operator row", n_x, row.len())
                        .map_err(|e| Error::Config(e.to_string()))?;
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return Err(Error::Config(format!("invalid noise std {noise_std}")));
                }
                Ok(())
            }
        }
    }

    pub fn output_dim(&self, n_x: usize) -> usize {
        match self {
            ForwardOperator::Mask => n_x,
            ForwardOperator::Pool { k } => n_x / k,
            ForwardOperator::Linear { matrix, .. } => matrix.len(),
        }
    }

    /// Offset of the hidden block for a given operator seed.
    pub fn mask_offset(n_x: usize, seed: u64) -> usize {
        let hidden = mask_len(n_x);
        rng::substream(seed, Purpose::Operator, 0).random_range(0..=n_x - hidden)
    }

    pub fn realize(&self, n_x: usize, seed: u64) -> Result<RealizedOperator> {
        self.validate(n_x)?;
        Ok(match self {
            ForwardOperator::Mask => {
                let offset = Self::mask_offset(n_x, seed);
                let mut m = DMatrix::identity(n_x, n_x);
                for i in offset..offset + mask_len(n_x) {
                    m[(i, i)] = 0.0;
                }
                RealizedOperator {
                    matrix: m,
                    noise_std: 0.0,
                }
            }
            ForwardOperator::Pool { k } => RealizedOperator {
                matrix: pool_matrix(n_x, *k),
                noise_std: 0.0,
            },
            ForwardOperator::Linear { matrix, noise_std } => RealizedOperator {
                matrix: DMatrix::from_fn(matrix.len(), n_x, |i, j| matrix[i][j]),
                noise_std: *noise_std,
            },
        })
    }
}

fn pool_matrix(n_x: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_x / k, n_x, |i, j| if j / k == i { 1.0 / k as f64 } else { 0.0 })
}

/// Deterministic in `(op, x, seed)`.
pub fn apply_operator(op: &ForwardOperator, x: &[f64], seed: u64) -> Result<Vec<f64>> {
    let n = x.len();
    op.validate(n)?;
    Ok(match op {
        ForwardOperator::Mask => {
            let offset = ForwardOperator::mask_offset(n, seed);
            let mut y = x.to_vec();
            y[offset..offset + mask_len(n)].fill(0.0);
            y
        }
        ForwardOperator::Pool { k } => x.chunks(*k).map(|c| c.iter().sum::<f64>() / *k as f64).collect(),
        ForwardOperator::Linear { matrix, noise_std } => {
            let mut noise = rng::substream(seed, Purpose::Operator, 1);
            matrix
                .iter()
                .map(|row| {
                    let clean: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    if *noise_std > 0.0 {
                        clean + noise_std * rng::standard_normal(&mut noise)
                    } else {
                        clean
                    }
                })
                .collect()
        }
    })
}

/// Joint law of `(x, A x + s z)` for Gaussian `x`.
pub fn linear_joint(base: &GaussianSpec, op: &RealizedOperator) -> Result<JointGaussianSpec> {
    let a = &op.matrix;
    check_dim("operator columns", base.dim(), a.ncols())?;
    let (n_x, n_y) = (a.ncols(), a.nrows());
    let sxx = base.cov();
    let sxy = sxx * a.transpose();
    let mut syy = a * &sxy;
    for i in 0..n_y {
        syy[(i, i)] += op.noise_std * op.noise_std;
    }
    let n = n_x + n_y;
    let mut cov = DMatrix::zeros(n, n);
    cov.view_mut((0, 0), (n_x, n_x)).copy_from(sxx);
    cov.view_mut((0, n_x), (n_x, n_y)).copy_from(&sxy);
    cov.view_mut((n_x, 0), (n_y, n_x)).copy_from(&sxy.transpose());
    cov.view_mut((n_x, n_x), (n_y, n_y)).copy_from(&syy);
    let mut mean = DVector::zeros(n);
    mean.rows_mut(0, n_x).copy_from(base.mean());
    mean.rows_mut(n_x, n_y).copy_from(&(a * base.mean()));
    JointGaussianSpec::new(GaussianSpec::new_psd(mean, crate::linalg::symmetrize(&cov))?, n_x, n_y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDistribution {
    Gaussian(GaussianSpec),
    Gmm(GmmSpec),
}

impl BaseDistribution {
    pub fn dim(&self) -> usize {
        match self {
            BaseDistribution::Gaussian(g) => g.dim(),
            BaseDistribution::Gmm(m) => m.dim(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            BaseDistribution::Gaussian(g) => g.sample(rng),
            BaseDistribution::Gmm(m) => m.sample(rng),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianSpec> {
        match self {
            BaseDistribution::Gaussian(g) => Some(g),
            BaseDistribution::Gmm(_) => None,
        }
    }
}

/// Pairs `(x_i, y_i)` stored as rows, with what is needed to regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub base: BaseDistribution,
    pub operator: ForwardOperator,
    pub seed: u64,
    pub xs: Array2<f64>,
    pub ys: Array2<f64>,
}

const DATASET_FORMAT: &str = "multispeed-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    base: BaseDistribution,
    operator: ForwardOperator,
    seed: u64,
    n: usize,
    n_x: usize,
    n_y: usize,
}

/// Seed of the operator draw for pair `i`.
pub fn pair_operator_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, Purpose::Operator, i as u64)
}

pub fn make_dataset(
    base: &BaseDistribution,
    op: &ForwardOperator,
    n: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let n_x = base.dim();
    op.validate(n_x)?;
    let n_y = op.output_dim(n_x);
    let mut xs = Array2::zeros((n, n_x));
    let mut ys = Array2::zeros((n, n_y));
    for (i, (mut xr, mut yr)) in xs.axis_iter_mut(Axis(0)).zip(ys.axis_iter_mut(Axis(0))).enumerate() {
        let x = base.sample(&mut rng::substream(seed, Purpose::Data, i as u64));
        let y = apply_operator(op, &x, pair_operator_seed(seed, i))?;
        xr.iter_mut().zip(&x).for_each(|(a, b)| *a = *b);
        yr.iter_mut().zip(&y).for_each(|(a, b)| *a = *b);
    }
    Ok(TaskDataset {
        base: base.clone(),
        operator: op.clone(),
        seed,
        xs,
        ys,
    })
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_x(&self) -> usize {
        self.xs.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.ys.ncols()
    }

    /// Recompute every `y_i` from `x_i` and compare bit for bit.
    pub fn verify(&self) -> Result<()> {
        for (i, (x, y)) in self.xs.axis_iter(Axis(0)).zip(self.ys.axis_iter(Axis(0))).enumerate() {
            let again = apply_operator(&self.operator, &x.to_vec(), pair_operator_seed(self.seed, i))?;
            if again.iter().zip(y.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Contract(format!("pair {i} does not match its operator")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            base: self.base.clone(),
            operator: self.operator.clone(),
            seed: self.seed,
            n: self.len(),
            n_x: self.n_x(),
            n_y: self.n_y(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        write_f64s(&mut out, &self.xs.iter().copied().collect::<Vec<_>>());
        write_f64s(&mut out, &self.ys.iter().copied().collect::<Vec<_>>());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, rest): (DatasetHeader, _) = split_header(bytes)?;
        if h.format != DATASET_FORMAT || h.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset {} v{}", h.format, h.version)));
        }
        let (xs, rest) = read_f64s(rest, h.n * h.n_x)?;
        let (ys, rest) = read_f64s(rest, h.n * h.n_y)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
        Ok(Self {
            base: h.base,
            operator: h.operator,
            seed: h.seed,
            xs: Array2::from_shape_vec((h.n, h.n_x), xs).map_err(shape_err)?,
            ys: Array2::from_shape_vec((h.n, h.n_y), ys).map_err(shape_err)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Position of the hidden block, read off the zero pattern of `y`.
pub fn infer_mask_offset(y: &[f64]) -> Option<usize> {
    let hidden = mask_len(y.len());
    (0..=y.len() - hidden).find(|&o| y[o..o + hidden].iter().all(|v| *v == 0.0))
}

/// Exact `∇ ln p(x_t | y)` for the masking task on a Gaussian base: each
/// mask position reduces to conditioning on the observed coordinates.
#[derive(Debug, Clone)]
pub struct MaskPosteriorScore {
    maps: Vec<ConditionalMap>,
    n_x: usize,
    x_spec: VeSdeSpec,
}

impl MaskPosteriorScore {
    pub fn new(base: &GaussianSpec, x_spec: VeSdeSpec) -> Result<Self> {
        let n = base.dim();
        let hidden = mask_len(n);
        if hidden >= n {
            return Err(Error::Config("mask would hide every coordinate".into()));
        }
        let maps = (0..=n - hidden)
            .map(|o| Self::observed_joint(base, o)?.condition(0.0))
            .collect::<Result<_>>()?;
        Ok(Self { maps, n_x: n, x_spec })
    }

    /// Joint of `x` with its observed coordinates for a mask at `offset`.
    pub fn observed_joint(base: &GaussianSpec, offset: usize) -> Result<JointGaussianSpec> {
        let n = base.dim();
        let hidden = mask_len(n);
        let observed: Vec<usize> = (0..n).filter(|i| !(offset..offset + hidden).contains(i)).collect();
        let select = DMatrix::from_fn(observed.len(), n, |r, c| if observed[r] == c { 1.0 } else { 0.0 });
        linear_joint(
            base,
            &RealizedOperator {
                matrix: select,
                noise_std: 0.0,
            },
        )
    }

    fn observed(y: &[f64], offset: usize) -> Vec<f64> {
        let hidden = mask_len(y.len());
        y.iter()
            .enumerate()
            .filter(|(i, _)| !(offset..offset + hidden).contains(i))
            .map(|(_, v)| *v)
            .collect()
    }

    /// Exact posterior of `x` given a masked observation.
    pub fn posterior(base: &GaussianSpec, y: &[f64]) -> Result<GaussianSpec> {
        let offset = infer_mask_offset(y)
            .ok_or_else(|| Error::Domain("observation carries no mask".into()))?;
        Self::observed_joint(base, offset)?.joint_conditional(&Self::observed(y, offset))
    }
}

impl ScoreSource for MaskPosteriorScore {
    fn x_dim(&self) -> usize {
        self.n_x
    }

    fn cond_dim(&self) -> usize {
        self.n_x
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let v = self.x_spec.marginal_variance(t)?;
        let precisions: Vec<DMatrix<f64>> = self.maps.iter().map(|m| m.precision(v)).collect();
        let mut out = Array2::zeros(x.raw_dim());
        for ((xr, yr), mut o) in x
            .axis_iter(Axis(0))
            .zip(cond.axis_iter(Axis(0)))
            .zip(out.axis_iter_mut(Axis(0)))
        {
            let y = yr.to_vec();
            let offset = infer_mask_offset(&y)
                .ok_or_else(|| Error::Domain("observation carries no mask".into()))?;
            let s = self.maps[offset].score_with_precision(
                &precisions[offset],
                &xr.to_vec(),
                &Self::observed(&y, offset),
            )?;
            o.iter_mut().zip(s).for_each(|(a, b)| *a = b);
        }
        Ok(out)
    }
}
