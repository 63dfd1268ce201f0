//! Feedforward classifier without biases: `n` hidden layers with an entry-wise
//! activation, a linear output layer, softmax and categorical cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Rank3};
use crate::rng::Rng;

/// Entry-wise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Tanh,
    Softplus,
    Sigmoid,
    /// Linear pass-through; used by the convolution tests.
    Identity,
}

impl ActKind {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            ActKind::Relu => z.max(0.0),
            ActKind::Tanh => z.tanh(),
            ActKind::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
            ActKind::Sigmoid => sigmoid(z),
            ActKind::Identity => z,
        }
    }

    /// First derivative. ReLU uses `A'(0) = 0`.
    pub fn d1(self, z: f64) -> f64 {
        match self {
            ActKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActKind::Softplus => sigmoid(z),
            ActKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActKind::Identity => 1.0,
        }
    }

    /// Second derivative; identically zero for the piecewise-linear kinds.
    pub fn d2(self, z: f64) -> f64 {
        match self {
            ActKind::Relu | ActKind::Identity => 0.0,
            ActKind::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ActKind::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }

    /// True when `A''` vanishes everywhere, so curvature terms of the
    /// activation can be skipped outright.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, ActKind::Relu | ActKind::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Tanh => "tanh",
            ActKind::Softplus => "softplus",
            ActKind::Sigmoid => "sigmoid",
            ActKind::Identity => "identity",
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture: `dims[0]` is the input width, `dims[k]` the width of hidden
/// layer `k` for `k = 1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dims: Vec<usize>,
    pub classes: usize,
    pub activation: ActKind,
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, classes: usize, activation: ActKind) -> Result<Self> {
        let spec = NetworkSpec {
            dims,
            classes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Validation(
                "need an input width and at least one hidden layer".into(),
            ));
        }
        if self.dims.contains(&0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        Ok(())
    }

    /// Number of hidden layers.
    pub fn n(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn with_activation(&self, activation: ActKind) -> NetworkSpec {
        NetworkSpec {
            activation,
            ..self.clone()
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    /// Total trainable weight count.
    pub fn param_count(&self) -> usize {
        self.layout().total()
    }
}

/// All trainable parameters. `w[k - 1]` holds layer `k`'s `dₖ × dₖ₋₁` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub w: Vec<Mat>,
    pub u: Mat,
}

impl WeightSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let w = (1..=spec.n())
            .map(|k| Mat::zeros(spec.dims[k], spec.dims[k - 1]))
            .collect();
        WeightSet {
            w,
            u: Mat::zeros(spec.classes, spec.dims[spec.n()]),
        }
    }

    /// Gaussian weights scaled by `gain / sqrt(fan_in)`.
    pub fn random(spec: &NetworkSpec, rng: &mut Rng, gain: f64) -> Self {
        let mut ws = WeightSet::zeros(spec);
        for m in ws.w.iter_mut() {
            let s = gain / (m.cols() as f64).sqrt();
            for x in m.as_mut_slice() {
                *x = s * rng.normal();
            }
        }
        let s = gain / (ws.u.cols() as f64).sqrt();
        for x in ws.u.as_mut_slice() {
            *x = s * rng.normal();
        }
        ws
    }

    /// Layer `k` weights, `k` in `1..=n`.
    pub fn layer(&self, k: usize) -> &Mat {
        &self.w[k - 1]
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        if self.w.len() != spec.n() {
            return shape_err(format!("{} weight layers for n = {}", self.w.len(), spec.n()));
        }
        for k in 1..=spec.n() {
            let want = (spec.dims[k], spec.dims[k - 1]);
            if self.w[k - 1].shape() != want {
                return shape_err(format!(
                    "w({k}) is {:?}, expected {:?}",
                    self.w[k - 1].shape(),
                    want
                ));
            }
        }
        if self.u.shape() != (spec.classes, spec.dims[spec.n()]) {
            return shape_err(format!("u is {:?}", self.u.shape()));
        }
        if !self.u.is_finite() || self.w.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.u.as_slice());
        for m in &self.w {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn unflatten(spec: &NetworkSpec, theta: &[f64]) -> Result<Self> {
        let layout = spec.layout();
        if theta.len() != layout.total() {
            return shape_err(format!(
                "flat parameter vector has {} entries, layout needs {}",
                theta.len(),
                layout.total()
            ));
        }
        let u = Mat::new(
            spec.classes,
            spec.dims[spec.n()],
            theta[layout.u_range()].to_vec(),
        )?;
        let w = (1..=spec.n())
            .map(|k| Mat::new(spec.dims[k], spec.dims[k - 1], theta[layout.w_range(k)].to_vec()))
            .collect::<Result<_>>()?;
        Ok(WeightSet { w, u })
    }
}

/// Flattened parameter layout: the `u` block first, then `w(1)..w(n)`, each
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLayout {
    /// `(rows, cols, offset)` per block; index 0 is `u`, index `k` is `w(k)`.
    pub blocks: Vec<(usize, usize, usize)>,
}

impl ParamLayout {
    pub fn new(spec: &NetworkSpec) -> Self {
        let n = spec.n();
        let mut blocks = Vec::with_capacity(n + 1);
        let mut off = 0;
        blocks.push((spec.classes, spec.dims[n], off));
        off += spec.classes * spec.dims[n];
        for k in 1..=n {
            blocks.push((spec.dims[k], spec.dims[k - 1], off));
            off += spec.dims[k] * spec.dims[k - 1];
        }
        ParamLayout { blocks }
    }

    pub fn total(&self) -> usize {
        let &(r, c, off) = self.blocks.last().unwrap();
        off + r * c
    }

    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let (r, c, off) = self.blocks[b];
        off..off + r * c
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        self.block_range(0)
    }

    pub fn w_range(&self, k: usize) -> std::ops::Range<usize> {
        self.block_range(k)
    }
}

/// One labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Sample {
    /// Validates that `y` is one-hot.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != y.len() {
            return Err(Error::Validation("label vector must be one-hot".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite input".into()));
        }
        Ok(Sample { x, y })
    }

    pub fn with_label(x: Vec<f64>, label: usize, classes: usize) -> Result<Self> {
        if label >= classes {
            return Err(Error::Validation(format!("label {label} >= {classes} classes")));
        }
        let mut y = vec![0.0; classes];
        y[label] = 1.0;
        Sample::new(x, y)
    }

    pub fn random(spec: &NetworkSpec, rng: &mut Rng) -> Self {
        let x = (0..spec.dims[0]).map(|_| rng.normal()).collect();
        let label = rng.below(spec.classes);
        Sample::with_label(x, label, spec.classes).expect("valid by construction")
    }

    pub fn label(&self) -> usize {
        self.y.iter().position(|&v| v == 1.0).expect("one-hot")
    }
}

/// All per-sample intermediates of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `v[0] = x`, `v[k]` is the output of hidden layer `k`.
    pub v: Vec<Vec<f64>>,
    /// `z[k - 1]` is the preactivation of layer `k`.
    pub z: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub yhat: Vec<f64>,
    pub f: f64,
}

impl ForwardTrace {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Preactivation of layer `k`, `k` in `1..=n`.
    pub fn z_layer(&self, k: usize) -> &[f64] {
        &self.z[k - 1]
    }

    /// Smallest `|z|` over every hidden unit.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.z
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

pub fn forward(spec: &NetworkSpec, weights: &WeightSet, sample: &Sample) -> Result<ForwardTrace> {
    weights.check(spec)?;
    if sample.x.len() != spec.dims[0] {
        return shape_err(format!("input has {} entries, expected {}", sample.x.len(), spec.dims[0]));
    }
    if sample.y.len() != spec.classes {
        return shape_err(format!("label has {} entries, expected {}", sample.y.len(), spec.classes));
    }
    Sample::new(sample.x.clone(), sample.y.clone())?;
    Ok(forward_unchecked(spec, weights, sample))
}

pub(crate) fn forward_unchecked(spec: &NetworkSpec, weights: &WeightSet, sample: &Sample) -> ForwardTrace {
    let n = spec.n();
    let act = spec.activation;
    let mut v = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n);
    v.push(sample.x.clone());
    for k in 1..=n {
        let zk = weights.layer(k).matvec(&v[k - 1]);
        v.push(zk.iter().map(|&t| act.eval(t)).collect());
        z.push(zk);
    }
    let p = weights.u.matvec(&v[n]);
    let (yhat, log_yhat) = log_softmax(&p);
    let f = -sample
        .y
        .iter()
        .zip(&log_yhat)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, l)| y * l)
        .sum::<f64>();
    ForwardTrace { v, z, p, yhat, f }
}

/// Max-shifted softmax; returns `(softmax, log_softmax)`.
pub fn log_softmax(p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = p.iter().map(|x| x - m).collect();
    let sum: f64 = shifted.iter().map(|x| x.exp()).sum();
    let lse = sum.ln();
    let log: Vec<f64> = shifted.iter().map(|x| x - lse).collect();
    let sm = log.iter().map(|l| l.exp()).collect();
    (sm, log)
}

pub fn softmax(p: &[f64]) -> Vec<f64> {
    log_softmax(p).0
}

/// `∂f/∂p = ŷ − y`.
pub fn dfdp(trace: &ForwardTrace, sample: &Sample) -> Vec<f64> {
    trace.yhat.iter().zip(&sample.y).map(|(a, b)| a - b).collect()
}

/// `∂²f/∂p² = diag(ŷ) − ŷŷᵀ`.
pub fn d2fdp2(trace: &ForwardTrace) -> Mat {
    let y = &trace.yhat;
    let c = y.len();
    Mat::from_fn(c, c, |i, j| {
        let d = if i == j { y[i] } else { 0.0 };
        d - y[i] * y[j]
    })
}

/// `∂³f/∂p³`, fully symmetric:
/// `δᵢⱼₖŷᵢ − δᵢⱼŷᵢŷₖ − δᵢₖŷᵢŷⱼ − δⱼₖŷⱼŷᵢ + 2ŷᵢŷⱼŷₖ`.
pub fn d3fdp3(trace: &ForwardTrace) -> Rank3 {
    let y = &trace.yhat;
    let c = y.len();
    let mut t = Rank3::zeros((c, c, c));
    for i in 0..c {
        for j in 0..c {
            for k in 0..c {
                let mut v = 2.0 * y[i] * y[j] * y[k];
                if i == j {
                    v -= y[i] * y[k];
                }
                if i == k {
                    v -= y[i] * y[j];
                }
                if j == k {
                    v -= y[j] * y[i];
                }
                if i == j && j == k {
                    v += y[i];
                }
                t[(i, j, k)] = v;
            }
        }
    }
    t
}

/// Loss as a function of the flat parameter vector; convenience for oracles.
pub fn loss_at(spec: &NetworkSpec, theta: &[f64], sample: &Sample) -> Result<f64> {
    let ws = WeightSet::unflatten(spec, theta)?;
    Ok(forward_unchecked(spec, &ws, sample).f)
}
