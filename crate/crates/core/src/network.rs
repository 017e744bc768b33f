//! Dense score network `s_θ(input, t)` with hand-written backpropagation,
//! Adam and an EMA of the weights.
//!
//! Time enters through `[sin(2^k π t), cos(2^k π t)]` features appended to
//! the input. Hidden layers use SiLU; the output layer is linear. Parameters
//! live in one flat vector laid out layer by layer as `W` (row-major,
//! `fan_out × fan_in`) followed by `b`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::objectives::{self, ObjectiveConfig, TrainingSample};
use crate::rng::{self, Purpose};
use crate::sde::MultiBlockSdeSpec;

fn default_time_features() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim,
            time_features: default_time_features(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.input_dim + 2 * self.time_features;
        for &w in self.hidden_widths.iter().chain([&self.output_dim]) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl LayerSlot {
    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &p[self.weights..self.weights + self.fan_out * self.fan_in],
        )
        .expect("layout matches spec")
    }

    fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.bias..self.bias + self.fan_out]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Architecture plus parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    spec: MlpSpec,
    layers: Vec<LayerSlot>,
    n_params: usize,
}

struct ForwardTrace {
    /// Layer inputs; `inputs[0]` is the feature matrix.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

/// Raw outputs times [`objectives::output_scales`], and the scales.
fn scaled_output<'a>(
    objective: &ObjectiveConfig,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    raw: impl Iterator<Item = &'a f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scales = objectives::output_scales(objective, mspec, t)?;
    let out = raw.zip(&scales).map(|(o, c)| o * c).collect();
    Ok((out, scales))
}

impl ScoreNetwork {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            let weights = offset;
            let bias = weights + fan_in * fan_out;
            offset = bias + fan_out;
            layers.push(LayerSlot {
                fan_in,
                fan_out,
                weights,
                bias,
            });
        }
        Ok(Self {
            spec,
            layers,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    /// Offsets `(weights, bias)` of each layer in the flat vector.
    pub fn layer_offsets(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.layers
            .iter()
            .map(|l| (l.weights..l.bias, l.bias..l.bias + l.fan_out))
            .collect()
    }

    /// He-normal weights (variance 2/fan_in), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut p = vec![0.0; self.n_params];
        for (i, l) in self.layers.iter().enumerate() {
            let mut r = rng::substream(seed, Purpose::Init, i as u64);
            let std = (2.0 / l.fan_in as f64).sqrt();
            for w in &mut p[l.weights..l.bias] {
                *w = std * rng::standard_normal(&mut r);
            }
        }
        ParamVector(p)
    }

    pub fn time_embedding(&self, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.spec.time_features);
        for k in 0..self.spec.time_features {
            let arg = (1u64 << k) as f64 * PI * t;
            out.push(arg.sin());
            out.push(arg.cos());
        }
        out
    }

    fn features(&self, inputs: ArrayView2<f64>, times: &[f64]) -> Result<Array2<f64>> {
        check_dim("network input", self.spec.input_dim, inputs.ncols())?;
        check_dim("network times", inputs.nrows(), times.len())?;
        if inputs.iter().chain(times).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        let width = self.spec.input_dim + 2 * self.spec.time_features;
        let mut feats = Array2::zeros((inputs.nrows(), width));
        feats
            .slice_mut(s![.., ..self.spec.input_dim])
            .assign(&inputs);
        for (mut row, &t) in feats.axis_iter_mut(Axis(0)).zip(times) {
            for (slot, v) in row
                .slice_mut(s![self.spec.input_dim..])
                .iter_mut()
                .zip(self.time_embedding(t))
            {
                *slot = v;
            }
        }
        Ok(feats)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_dim("parameter vector", self.n_params, params.len())
    }

    fn run(&self, params: &[f64], feats: Array2<f64>, keep: bool) -> ForwardTrace {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut h = feats;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w(params).t());
            z += &ArrayView2::from_shape((1, l.fan_out), l.b(params)).expect("bias row");
            if i == last {
                if keep {
                    inputs.push(h);
                }
                return ForwardTrace {
                    inputs,
                    pre,
                    output: z,
                };
            }
            let a = z.mapv(silu);
            if keep {
                inputs.push(h);
                pre.push(z);
            }
            h = a;
        }
        unreachable!("network has an output layer")
    }

    /// Batched forward pass; row `i` of `inputs` is evaluated at `times[i]`.
    pub fn forward_batch(
        &self,
        params: &ParamVector,
        inputs: ArrayView2<f64>,
        times: &[f64],
    ) -> Result<Array2<f64>> {
        self.check_params(params)?;
        let feats = self.features(inputs, times)?;
        Ok(self.run(&params.0, feats, false).output)
    }

    pub fn forward(&self, params: &ParamVector, input: &[f64], t: f64) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(self.forward_batch(params, view, &[t])?.into_raw_vec_and_offset().0)
    }

    fn batch_inputs(
        &self,
        batch: &[TrainingSample],
        objective: &ObjectiveConfig,
        mspec: &MultiBlockSdeSpec,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let mut x = Array2::zeros((batch.len(), self.spec.input_dim));
        for (mut row, s) in x.axis_iter_mut(Axis(0)).zip(batch) {
            check_dim("training sample", self.spec.input_dim, s.noised.len())?;
            let scales = objectives::input_scales(objective, mspec, s.t)?;
            for ((r, v), c) in row.iter_mut().zip(&s.noised).zip(scales) {
                *r = v * c;
            }
        }
        Ok((x, batch.iter().map(|s| s.t).collect()))
    }

    fn check_objective(&self, objective: &ObjectiveConfig, mspec: &MultiBlockSdeSpec) -> Result<()> {
        objective.validate(mspec)?;
        check_dim("network input vs objective", objective.input_dim(mspec), self.spec.input_dim)?;
        check_dim(
            "network output vs objective",
            objective.output_dim(mspec),
            self.spec.output_dim,
        )
    }

    /// Mean per-sample loss over the batch.
    pub fn loss(
        &self,
        params: &ParamVector,
        batch: &[TrainingSample],
        objective: &ObjectiveConfig,
        mspec: &MultiBlockSdeSpec,
    ) -> Result<f64> {
        self.check_objective(objective, mspec)?;
        let (x, times) = self.batch_inputs(batch, objective, mspec)?;
        let out = self.forward_batch(params, x.view(), &times)?;
        let mut total = 0.0;
        for (s, row) in batch.iter().zip(out.axis_iter(Axis(0))) {
            let row = scaled_output(objective, mspec, s.t, row.iter())?.0;
            total += objectives::per_sample_loss(objective, mspec, s.t, &s.clean, &s.noised, &row)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss and its exact gradient with respect to the parameters.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[TrainingSample],
        objective: &ObjectiveConfig,
        mspec: &MultiBlockSdeSpec,
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        self.check_objective(objective, mspec)?;
        let (x, times) = self.batch_inputs(batch, objective, mspec)?;
        let feats = self.features(x.view(), &times)?;
        let trace = self.run(&params.0, feats, true);
        let n = batch.len() as f64;

        let mut total = 0.0;
        let mut d_out = Array2::zeros(trace.output.raw_dim());
        for ((s, row), mut d_row) in batch
            .iter()
            .zip(trace.output.axis_iter(Axis(0)))
            .zip(d_out.axis_iter_mut(Axis(0)))
        {
            let (row, scales) = scaled_output(objective, mspec, s.t, row.iter())?;
            let (l, g) = objectives::per_sample_loss_and_output_grad(
                objective, mspec, s.t, &s.clean, &s.noised, &row,
            )?;
            total += l;
            for ((d, gi), c) in d_row.iter_mut().zip(g).zip(scales) {
                *d = gi * c / n;
            }
        }

        let mut grad = vec![0.0; self.n_params];
        let mut d_z = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let h = &trace.inputs[i];
            let d_w = d_z.t().dot(h);
            grad[l.weights..l.bias].copy_from_slice(
                d_w.as_slice().expect("fresh matmul output is contiguous"),
            );
            for (g, col) in grad[l.bias..l.bias + l.fan_out]
                .iter_mut()
                .zip(d_z.axis_iter(Axis(1)))
            {
                *g = col.sum();
            }
            if i > 0 {
                let mut d_h = d_z.dot(&l.w(&params.0));
                d_h.zip_mut_with(&trace.pre[i - 1], |d, &z| *d *= silu_grad(z));
                d_z = d_h;
            }
        }
        Ok((total / n, ParamVector(grad)))
    }

    /// Central differences of the mean loss along the requested coordinates.
    pub fn finite_diff_grad(
        &self,
        params: &ParamVector,
        batch: &[TrainingSample],
        objective: &ObjectiveConfig,
        mspec: &MultiBlockSdeSpec,
        coords: &[usize],
        h: f64,
    ) -> Result<Vec<f64>> {
        finite_diff(params, coords, h, |p| self.loss(p, batch, objective, mspec))
    }
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn finite_diff(
    params: &ParamVector,
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamVector) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = params.clone();
    coords
        .iter()
        .map(|&i| {
            if i >= p.len() {
                return Err(Error::Shape {
                    what: "finite-difference coordinate",
                    expected: p.len(),
                    got: i,
                });
            }
            let orig = p.0[i];
            p.0[i] = orig + h;
            let up = f(&p)?;
            p.0[i] = orig - h;
            let down = f(&p)?;
            p.0[i] = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments plus the EMA shadow of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub adam: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub ema: ParamVector,
    pub ema_rate: f64,
}

impl OptimizerState {
    /// EMA starts at the initial parameters.
    pub fn new(params: &ParamVector, adam: AdamConfig, ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1), got {ema_rate}")));
        }
        Ok(Self {
            adam,
            first_moment: vec![0.0; params.len()],
            second_moment: vec![0.0; params.len()],
            step: 0,
            ema: params.clone(),
            ema_rate,
        })
    }

    /// One bias-corrected Adam update. A non-finite gradient is refused and
    /// leaves both state and parameters untouched.
    pub fn adam_step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        check_dim("adam params", self.first_moment.len(), params.len())?;
        check_dim("adam grad", self.first_moment.len(), grad.len())?;
        if grad.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.adam;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .0
            .iter_mut()
            .zip(&grad.0)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    /// `ema ← rate·ema + (1 − rate)·params`
    pub fn ema_update(&mut self, params: &ParamVector) -> Result<()> {
        check_dim("ema params", self.ema.len(), params.len())?;
        let r = self.ema_rate;
        for (e, p) in self.ema.0.iter_mut().zip(&params.0) {
            *e = r * *e + (1.0 - r) * p;
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "multispeed-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    spec: MlpSpec,
    optimizer: AdamConfig,
    ema_rate: f64,
    step: u64,
    master_seed: u64,
    n_params: usize,
    metadata: std::collections::BTreeMap<String, String>,
}

/// Network weights, EMA weights and enough metadata to rebuild the model.
///
/// On disk: one line of JSON header, then the parameter and EMA arrays as
/// little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub optimizer: AdamConfig,
    pub ema_rate: f64,
    pub step: u64,
    pub master_seed: u64,
    pub metadata: std::collections::BTreeMap<String, String>,
    pub params: ParamVector,
    pub ema: ParamVector,
}

pub(crate) fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64s(bytes: &[u8], count: usize) -> Result<(Vec<f64>, &[u8])> {
    let need = count * 8;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "expected {count} f64 values, only {} bytes left",
            bytes.len()
        )));
    }
    let values = bytes[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((values, &bytes[need..]))
}

/// Split `bytes` at the first newline and parse the JSON header before it.
pub(crate) fn split_header<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<(T, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, &bytes[nl + 1..]))
}

impl Checkpoint {
    pub fn network(&self) -> Result<ScoreNetwork> {
        ScoreNetwork::new(self.spec.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            optimizer: self.optimizer,
            ema_rate: self.ema_rate,
            step: self.step,
            master_seed: self.master_seed,
            n_params: self.params.len(),
            metadata: self.metadata.clone(),
        };
        check_dim("checkpoint ema", self.params.len(), self.ema.len())?;
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
        write_f64s(&mut out, &self.params.0);
        write_f64s(&mut out, &self.ema.0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, rest): (CheckpointHeader, _) = split_header(bytes)?;
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                h.format, h.version
            )));
        }
        let expected = ScoreNetwork::new(h.spec.clone())?.num_params();
        check_dim("checkpoint parameter count", expected, h.n_params)?;
        let (params, rest) = read_f64s(rest, h.n_params)?;
        let (ema, rest) = read_f64s(rest, h.n_params)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            spec: h.spec,
            optimizer: h.optimizer,
            ema_rate: h.ema_rate,
            step: h.step,
            master_seed: h.master_seed,
            metadata: h.metadata,
            params: ParamVector(params),
            ema: ParamVector(ema),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
