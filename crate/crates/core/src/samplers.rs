//! Reverse-time predictor-corrector sampling.
//!
//! The predictor is Euler–Maruyama on `dx = −g(t)² ∇ln p_t(x) dt + g(t) dw̄`;
//! the corrector is one (or more) Langevin steps whose size is set by a
//! signal-to-noise ratio. Conditional sampling either feeds the clean
//! observation to the score model (CDE) or redraws a diffused copy
//! `ŷ_t ~ p(y_t | y)` before every score evaluation (CDiffE, CMDE). The
//! condition itself is never integrated.
//!
//! Chains are processed in fixed-size chunks; each chain owns its random
//! streams, so output does not depend on thread scheduling.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::{ParamVector, ScoreNetwork};
use crate::objectives::{self, EstimatorKind, ObjectiveConfig};
use crate::oracles::{ConditionalMap, GaussianSpec, GmmSpec, JointGaussianSpec};
use crate::rng::{self, Purpose, StreamRng};
use crate::sde::{MultiBlockSdeSpec, VeSdeSpec, DEFAULT_EPS};

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub corrector_steps: usize,
    pub snr: f64,
    /// Final time of the reverse integration.
    pub eps: f64,
    /// Evaluate networks with their EMA weights.
    pub use_ema: bool,
    /// Redraw `ŷ_t` before each corrector sub-step as well as the predictor.
    pub resample_y_in_corrector: bool,
    /// Replace the output by `x + var(ε)·s(x, ε)`.
    pub denoise_final: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            corrector_steps: 1,
            snr: 0.16,
            eps: DEFAULT_EPS,
            use_ema: true,
            resample_y_in_corrector: true,
            denoise_final: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.eps > 0.0 && self.eps < horizon) {
            return Err(Error::Config(format!(
                "sampler end time {} must lie in (0, {horizon})",
                self.eps
            )));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config("corrector snr must be positive".into()));
        }
        Ok(())
    }
}

/// Something that supplies `∇_x ln p_t(x | cond)` for a batch of chains.
pub trait ScoreSource: Sync {
    fn x_dim(&self) -> usize;

    /// Width of the conditioning input; zero for unconditional sources.
    fn cond_dim(&self) -> usize;

    /// Row `i` of the result is the x-score of chain `i`.
    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>>;
}

/// A trained network read as a score over `x`. For joint models only the
/// leading `n_x` outputs are used.
#[derive(Debug, Clone)]
pub struct NetworkScore {
    network: ScoreNetwork,
    params: ParamVector,
    objective: ObjectiveConfig,
    /// The diffusion the network is sampled under.
    mspec: MultiBlockSdeSpec,
}

impl NetworkScore {
    pub fn new(
        network: ScoreNetwork,
        params: ParamVector,
        objective: ObjectiveConfig,
        mspec: MultiBlockSdeSpec,
    ) -> Result<Self> {
        check_dim("network parameters", network.num_params(), params.len())?;
        objective.validate(&mspec)?;
        check_dim("network input", objective.input_dim(&mspec), network.spec().input_dim)?;
        check_dim("network output", objective.output_dim(&mspec), network.spec().output_dim)?;
        Ok(Self {
            network,
            params,
            objective,
            mspec,
        })
    }

    fn n_x(&self) -> usize {
        self.mspec.blocks()[0].dim
    }
}

impl ScoreSource for NetworkScore {
    fn x_dim(&self) -> usize {
        self.n_x()
    }

    fn cond_dim(&self) -> usize {
        self.network.spec().input_dim - self.n_x()
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let n = x.nrows();
        let n_x = self.n_x();
        let mut input = Array2::zeros((n, self.network.spec().input_dim));
        input.slice_mut(s![.., ..n_x]).assign(&x);
        input.slice_mut(s![.., n_x..]).assign(&cond);
        let in_scales = objectives::input_scales(&self.objective, &self.mspec, t)?;
        for mut row in input.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&in_scales).for_each(|(v, c)| *v *= c);
        }
        let out = self
            .network
            .forward_batch(&self.params, input.view(), &vec![t; n])?;
        let out_scales = objectives::output_scales(&self.objective, &self.mspec, t)?;
        let mut score = out.slice(s![.., ..n_x]).to_owned();
        for mut row in score.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&out_scales).for_each(|(v, c)| *v *= c);
        }
        Ok(score)
    }
}

fn rows_map(
    x: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(x.raw_dim());
    for ((xr, cr), mut o) in x
        .axis_iter(Axis(0))
        .zip(cond.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let v = f(&xr.to_vec(), &cr.to_vec())?;
        o.iter_mut().zip(v).for_each(|(a, b)| *a = b);
    }
    Ok(out)
}

/// Exact diffused score of a Gaussian target.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub target: GaussianSpec,
    pub spec: VeSdeSpec,
}

impl ScoreSource for GaussianScore {
    fn x_dim(&self) -> usize {
        self.target.dim()
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let v = self.spec.marginal_variance(t)?;
        rows_map(x, cond, |xr, _| self.target.score_with_variance(v, xr))
    }
}

/// Exact diffused score of a Gaussian-mixture target.
#[derive(Debug, Clone)]
pub struct GmmScore {
    pub target: GmmSpec,
    pub spec: VeSdeSpec,
}

impl ScoreSource for GmmScore {
    fn x_dim(&self) -> usize {
        self.target.dim()
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let v = self.spec.marginal_variance(t)?;
        rows_map(x, cond, |xr, _| self.target.score_with_variance(v, xr))
    }
}

/// Apply `−P (x − m(y))` row by row for a precomputed precision `P`.
fn conditional_rows(
    map: &ConditionalMap,
    v_x: f64,
    x: ArrayView2<f64>,
    cond: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let precision = map.precision(v_x);
    rows_map(x, cond, |xr, yr| map.score_with_precision(&precision, xr, yr))
}

/// Exact `∇ ln p(x_t | y)` with a clean condition.
#[derive(Debug, Clone)]
pub struct CleanConditionalScore {
    map: ConditionalMap,
    x_spec: VeSdeSpec,
}

impl CleanConditionalScore {
    pub fn new(joint: &JointGaussianSpec, x_spec: VeSdeSpec) -> Result<Self> {
        Ok(Self {
            map: joint.condition(0.0)?,
            x_spec,
        })
    }
}

impl ScoreSource for CleanConditionalScore {
    fn x_dim(&self) -> usize {
        self.map.n_x()
    }

    fn cond_dim(&self) -> usize {
        self.map.n_y()
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        conditional_rows(&self.map, self.x_spec.marginal_variance(t)?, x, cond)
    }
}

/// Exact `∇ ln p(x_t | y_t)`: the x-block of the jointly diffused score.
#[derive(Debug, Clone)]
pub struct DiffusedConditionalScore {
    joint: JointGaussianSpec,
    mspec: MultiBlockSdeSpec,
}

impl DiffusedConditionalScore {
    pub fn new(joint: JointGaussianSpec, mspec: MultiBlockSdeSpec) -> Result<Self> {
        let (x, y) = mspec.xy()?;
        check_dim("joint x block", joint.n_x(), x.dim)?;
        check_dim("joint y block", joint.n_y(), y.dim)?;
        Ok(Self { joint, mspec })
    }
}

impl ScoreSource for DiffusedConditionalScore {
    fn x_dim(&self) -> usize {
        self.joint.n_x()
    }

    fn cond_dim(&self) -> usize {
        self.joint.n_y()
    }

    fn score(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let (xb, yb) = self.mspec.xy()?;
        let map = self.joint.condition(yb.spec.marginal_variance(t)?)?;
        conditional_rows(&map, xb.spec.marginal_variance(t)?, x, cond)
    }
}

/// `x + g² s Δt + g √Δt z`
pub fn predictor_update(x: &mut [f64], score: &[f64], g: f64, dt: f64, z: &[f64]) {
    let g2dt = g * g * dt;
    let noise = g * dt.sqrt();
    for ((xi, si), zi) in x.iter_mut().zip(score).zip(z) {
        *xi += g2dt * si + noise * zi;
    }
}

/// One Euler–Maruyama step of the reverse SDE from `t` to `t − dt`.
pub fn predictor_step<R: Rng + ?Sized>(
    score: &[f64],
    x: &mut [f64],
    spec: &VeSdeSpec,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {dt}")));
    }
    check_dim("predictor score", x.len(), score.len())?;
    let g = spec.instantaneous_diffusion(t)?;
    let z: Vec<f64> = (0..x.len()).map(|_| rng::standard_normal(rng)).collect();
    predictor_update(x, score, g, dt, &z);
    Ok(())
}

/// Langevin step size `2 (snr · ‖z‖ / ‖s‖)²` from mean per-chain norms over
/// the batch; `None` when the score vanishes.
pub fn corrector_step_size(scores: ArrayView2<f64>, noise: ArrayView2<f64>, snr: f64) -> Option<f64> {
    let (s_sum, z_sum) = norm_sums(scores, noise);
    step_from_norms(s_sum, z_sum, snr)
}

fn norm_sums(scores: ArrayView2<f64>, noise: ArrayView2<f64>) -> (f64, f64) {
    let row_norm = |r: ndarray::ArrayView1<f64>| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s: f64 = scores.axis_iter(Axis(0)).map(row_norm).sum();
    let z: f64 = noise.axis_iter(Axis(0)).map(row_norm).sum();
    (s, z)
}

fn step_from_norms(score_norm_sum: f64, noise_norm_sum: f64, snr: f64) -> Option<f64> {
    if score_norm_sum == 0.0 {
        return None;
    }
    let ratio = snr * noise_norm_sum / score_norm_sum;
    Some(2.0 * ratio * ratio)
}

/// `x + δ s + √(2δ) z` with δ from [`corrector_step_size`]. Rows of `x`,
/// `score` and `noise` are chains. Returns the step size used (zero when
/// the step was skipped).
pub fn corrector_step(
    score: ArrayView2<f64>,
    mut x: ArrayViewMut2<f64>,
    snr: f64,
    noise: ArrayView2<f64>,
) -> f64 {
    match corrector_step_size(score, noise, snr) {
        None => 0.0,
        Some(delta) => {
            apply_corrector(&mut x, score, noise, delta);
            delta
        }
    }
}

fn apply_corrector(x: &mut ArrayViewMut2<f64>, score: ArrayView2<f64>, noise: ArrayView2<f64>, delta: f64) {
    let amp = (2.0 * delta).sqrt();
    ndarray::Zip::from(x)
        .and(score)
        .and(noise)
        .for_each(|xi, &si, &zi| *xi += delta * si + amp * zi);
}

struct Chunk {
    x: Array2<f64>,
    cond: Array2<f64>,
    x_rngs: Vec<StreamRng>,
    y_rngs: Vec<StreamRng>,
    alive: Vec<bool>,
    first_index: usize,
}

impl Chunk {
    fn draw_noise(&mut self) -> Array2<f64> {
        let mut z = Array2::zeros(self.x.raw_dim());
        for (mut row, r) in z.axis_iter_mut(Axis(0)).zip(&mut self.x_rngs) {
            row.iter_mut().for_each(|v| *v = rng::standard_normal(r));
        }
        z
    }

    /// The conditioning rows to feed the score: clean, or freshly diffused.
    fn condition(&mut self, y_spec: Option<&VeSdeSpec>, t: f64) -> Result<Array2<f64>> {
        let Some(spec) = y_spec else {
            return Ok(self.cond.clone());
        };
        let mut out = Array2::zeros(self.cond.raw_dim());
        for ((row, mut o), r) in self
            .cond
            .axis_iter(Axis(0))
            .zip(out.axis_iter_mut(Axis(0)))
            .zip(&mut self.y_rngs)
        {
            let drawn = spec.transition_sample(row.as_slice().expect("contiguous row"), t, r)?;
            o.iter_mut().zip(drawn).for_each(|(a, b)| *a = b);
        }
        Ok(out)
    }

    fn mark_failures(&mut self, score: &mut Array2<f64>) {
        for (i, mut row) in score.axis_iter_mut(Axis(0)).enumerate() {
            if self.alive[i] && row.iter().any(|v| !v.is_finite()) {
                log::warn!(
                    "chain {} produced a non-finite score; abandoning it",
                    self.first_index + i
                );
                self.alive[i] = false;
                self.x.row_mut(i).fill(f64::NAN);
            }
            if !self.alive[i] {
                row.fill(0.0);
            }
        }
    }

    fn scores(&mut self, source: &dyn ScoreSource, cond: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let mut live_x = self.x.clone();
        for (i, mut row) in live_x.axis_iter_mut(Axis(0)).enumerate() {
            if !self.alive[i] {
                row.fill(0.0);
            }
        }
        let mut s = source.score(live_x.view(), cond.view(), t)?;
        check_dim("score rows", self.x.nrows(), s.nrows())?;
        check_dim("score width", self.x.ncols(), s.ncols())?;
        self.mark_failures(&mut s);
        Ok(s)
    }

    fn zero_dead(&self, z: &mut Array2<f64>) {
        for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            if !self.alive[i] {
                row.fill(0.0);
            }
        }
    }
}

struct ChainSetup<'a> {
    source: &'a dyn ScoreSource,
    x_spec: VeSdeSpec,
    /// Diffusion used to redraw the condition; `None` keeps it clean.
    y_spec: Option<VeSdeSpec>,
    cfg: SamplerConfig,
}

fn init_chunks(x_spec: &VeSdeSpec, n_x: usize, conds: ArrayView2<f64>, seed: u64) -> Vec<Chunk> {
    let n = conds.nrows();
    (0..n)
        .step_by(CHUNK)
        .map(|start| {
            let end = (start + CHUNK).min(n);
            let mut x = Array2::zeros((end - start, n_x));
            for (k, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
                let mut r = rng::substream(seed, Purpose::Prior, (start + k) as u64);
                row.iter_mut()
                    .for_each(|v| *v = x_spec.sigma_max() * rng::standard_normal(&mut r));
            }
            Chunk {
                x,
                cond: conds.slice(s![start..end, ..]).to_owned(),
                x_rngs: (start..end)
                    .map(|i| rng::substream(seed, Purpose::ChainNoise, i as u64))
                    .collect(),
                y_rngs: (start..end)
                    .map(|i| rng::substream(seed, Purpose::ConditionResample, i as u64))
                    .collect(),
                alive: vec![true; end - start],
                first_index: start,
            }
        })
        .collect()
}

fn run_chains(
    setup: &ChainSetup<'_>,
    conds: ArrayView2<f64>,
    seed: u64,
    mut trajectory: Option<&mut Vec<Array2<f64>>>,
) -> Result<Array2<f64>> {
    let ChainSetup {
        source,
        x_spec,
        y_spec,
        cfg,
    } = setup;
    let horizon = x_spec.horizon();
    cfg.validate(horizon)?;
    check_dim("conditioning width", source.cond_dim(), conds.ncols())?;
    let n_x = source.x_dim();
    let mut chunks = init_chunks(x_spec, n_x, conds, seed);
    let dt = (horizon - cfg.eps) / cfg.n_steps as f64;
    let y_spec = y_spec.as_ref();

    for i in 0..cfg.n_steps {
        let t = horizon - i as f64 * dt;
        let mut shared_cond: Vec<Option<Array2<f64>>> = vec![None; chunks.len()];
        for c in 0..cfg.corrector_steps {
            let resample = c == 0 || cfg.resample_y_in_corrector;
            let staged: Vec<(Array2<f64>, Array2<f64>, f64, f64)> = chunks
                .par_iter_mut()
                .zip(shared_cond.par_iter_mut())
                .map(|(ch, shared)| {
                    if resample || shared.is_none() {
                        *shared = Some(ch.condition(y_spec, t)?);
                    }
                    let cond = shared.as_ref().expect("condition drawn above");
                    let s = ch.scores(*source, cond, t)?;
                    let mut z = ch.draw_noise();
                    ch.zero_dead(&mut z);
                    let (sn, zn) = norm_sums(s.view(), z.view());
                    Ok((s, z, sn, zn))
                })
                .collect::<Result<_>>()?;
            let (s_sum, z_sum) = staged
                .iter()
                .fold((0.0, 0.0), |(a, b), (_, _, sn, zn)| (a + sn, b + zn));
            if let Some(delta) = step_from_norms(s_sum, z_sum, cfg.snr) {
                chunks
                    .par_iter_mut()
                    .zip(staged.par_iter())
                    .for_each(|(ch, (s, z, _, _))| {
                        apply_corrector(&mut ch.x.view_mut(), s.view(), z.view(), delta)
                    });
            }
        }

        let g = x_spec.instantaneous_diffusion(t)?;
        chunks
            .par_iter_mut()
            .zip(shared_cond.into_par_iter())
            .try_for_each(|(ch, shared)| -> Result<()> {
                let cond = match shared {
                    Some(c) if !cfg.resample_y_in_corrector && cfg.corrector_steps > 0 => c,
                    _ => ch.condition(y_spec, t)?,
                };
                let s = ch.scores(*source, &cond, t)?;
                let mut z = ch.draw_noise();
                ch.zero_dead(&mut z);
                for ((mut xr, sr), zr) in ch
                    .x
                    .axis_iter_mut(Axis(0))
                    .zip(s.axis_iter(Axis(0)))
                    .zip(z.axis_iter(Axis(0)))
                {
                    predictor_update(
                        xr.as_slice_mut().expect("contiguous row"),
                        sr.as_slice().expect("contiguous row"),
                        g,
                        dt,
                        zr.as_slice().expect("contiguous row"),
                    );
                }
                Ok(())
            })?;
        if let Some(traj) = trajectory.as_deref_mut() {
            traj.push(gather(&chunks, n_x));
        }
    }

    if cfg.denoise_final {
        let var = x_spec.marginal_variance(cfg.eps)?;
        chunks.par_iter_mut().try_for_each(|ch| -> Result<()> {
            let cond = ch.condition(y_spec, cfg.eps)?;
            let s = ch.scores(*source, &cond, cfg.eps)?;
            ch.x.zip_mut_with(&s, |xi, &si| *xi += var * si);
            Ok(())
        })?;
    }

    let failed: usize = chunks.iter().map(|c| c.alive.iter().filter(|a| !**a).count()).sum();
    if failed > 0 {
        log::warn!("{failed} of {} chains were abandoned", conds.nrows());
    }
    Ok(gather(&chunks, n_x))
}

fn gather(chunks: &[Chunk], n_x: usize) -> Array2<f64> {
    let n: usize = chunks.iter().map(|c| c.x.nrows()).sum();
    let mut out = Array2::zeros((n, n_x));
    let mut row = 0;
    for c in chunks {
        out.slice_mut(s![row..row + c.x.nrows(), ..]).assign(&c.x);
        row += c.x.nrows();
    }
    out
}

/// Draw `n_samples` chains from the prior and integrate them back to `ε`.
pub fn sample_unconditional(
    source: &dyn ScoreSource,
    spec: &VeSdeSpec,
    cfg: &SamplerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if source.cond_dim() != 0 {
        return Err(Error::Config("unconditional sampling needs an unconditional source".into()));
    }
    let setup = ChainSetup {
        source,
        x_spec: *spec,
        y_spec: None,
        cfg: *cfg,
    };
    run_chains(&setup, Array2::zeros((n_samples, 0)).view(), seed, None)
}

fn conditional_setup<'a>(
    source: &'a dyn ScoreSource,
    mspec: &MultiBlockSdeSpec,
    cfg: &SamplerConfig,
    estimator: EstimatorKind,
) -> Result<ChainSetup<'a>> {
    let (x, y) = mspec.xy()?;
    check_dim("source x dimension", x.dim, source.x_dim())?;
    check_dim("source condition dimension", y.dim, source.cond_dim())?;
    let y_spec = match estimator {
        EstimatorKind::Dsm => {
            return Err(Error::Config("DSM is not a conditional estimator".into()))
        }
        EstimatorKind::Cde => None,
        EstimatorKind::Cdiffe | EstimatorKind::Cmde => Some(y.spec),
    };
    Ok(ChainSetup {
        source,
        x_spec: x.spec,
        y_spec,
        cfg: *cfg,
    })
}

/// One chain per row of `ys`; chain `i` is conditioned on `ys[i]`.
pub fn sample_conditional_batch(
    source: &dyn ScoreSource,
    mspec: &MultiBlockSdeSpec,
    ys: ArrayView2<f64>,
    cfg: &SamplerConfig,
    estimator: EstimatorKind,
    seed: u64,
) -> Result<Array2<f64>> {
    let setup = conditional_setup(source, mspec, cfg, estimator)?;
    run_chains(&setup, ys, seed, None)
}

/// `n_samples` chains all conditioned on the same `y`.
pub fn sample_conditional(
    source: &dyn ScoreSource,
    mspec: &MultiBlockSdeSpec,
    y: &[f64],
    cfg: &SamplerConfig,
    estimator: EstimatorKind,
    n_samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let ys = repeat_rows(y, n_samples);
    sample_conditional_batch(source, mspec, ys.view(), cfg, estimator, seed)
}

/// Like [`sample_conditional_batch`], returning the chain states after
/// every predictor step.
pub fn sample_conditional_trajectory(
    source: &dyn ScoreSource,
    mspec: &MultiBlockSdeSpec,
    ys: ArrayView2<f64>,
    cfg: &SamplerConfig,
    estimator: EstimatorKind,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let setup = conditional_setup(source, mspec, cfg, estimator)?;
    let mut traj = Vec::with_capacity(cfg.n_steps);
    run_chains(&setup, ys, seed, Some(&mut traj))?;
    Ok(traj)
}

pub fn repeat_rows(row: &[f64], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.len()));
    for mut r in out.axis_iter_mut(Axis(0)) {
        r.iter_mut().zip(row).for_each(|(a, b)| *a = *b);
    }
    out
}
