//! First-order factor chain of the feedforward net.
//!
//! * `γ⁽ᵏ⁾ = A'(z⁽ᵏ⁾)`, kept as a vector (it is diagonal by construction).
//! * `β⁽ᵏ⁾ = diag(γ⁽ᵏ⁾) w⁽ᵏ⁾`, the one-layer Jacobian `∂v⁽ᵏ⁾/∂v⁽ᵏ⁻¹⁾`.
//! * `α⁽ᵏ'ˡ⁾ = β⁽ᵏ⁾ ⋯ β⁽ˡ⁺¹⁾` (identity when `k = l`, zero when `k < l`).
//! * `η⁽ᵏ'ˡ⁾ = α⁽ᵏ'ˡ⁾ diag(γ⁽ˡ⁾)`, i.e. `∂v⁽ᵏ⁾/∂z⁽ˡ⁾`.
//!
//! Only the top row `η⁽ⁿ'ᵏ⁾` is stored. Interior matrices `η⁽ʳ'ᵏ⁾`, `r < n`,
//! come from [`EtaGenerator`], which hands them out one row at a time in
//! decreasing `r` and keeps a live count so callers can assert the peak.

use std::cell::Cell;
use std::ops::Deref;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::{ForwardTrace, NetworkSpec, Sample, WeightSet};

/// `γ⁽ᵏ⁾` for `k = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaStack {
    gamma: Vec<Vec<f64>>,
}

impl GammaStack {
    pub fn layer(&self, k: usize) -> &[f64] {
        &self.gamma[k - 1]
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.gamma.iter().map(Vec::len).sum()
    }
}

pub fn gamma(trace: &ForwardTrace, spec: &NetworkSpec) -> GammaStack {
    let act = spec.activation;
    GammaStack {
        gamma: trace
            .z
            .iter()
            .map(|zk| zk.iter().map(|&z| act.d1(z)).collect())
            .collect(),
    }
}

/// `β⁽ᵏ⁾ = diag(γ⁽ᵏ⁾) w⁽ᵏ⁾`
pub fn beta(gs: &GammaStack, weights: &WeightSet, k: usize) -> Mat {
    weights.layer(k).scale_rows(gs.layer(k))
}

fn width(weights: &WeightSet, k: usize) -> usize {
    if k == 0 {
        weights.w[0].cols()
    } else {
        weights.layer(k).rows()
    }
}

/// `α⁽ᵏ'ˡ⁾` for `0 ≤ k, l ≤ n`.
pub fn alpha(gs: &GammaStack, weights: &WeightSet, k: usize, l: usize) -> Result<Mat> {
    let n = gs.n();
    if k > n || l > n {
        return Err(Error::Validation(format!(
            "alpha({k}, {l}) out of range for n = {n}"
        )));
    }
    Ok(alpha_unchecked(gs, weights, k, l))
}

pub(crate) fn alpha_unchecked(gs: &GammaStack, weights: &WeightSet, k: usize, l: usize) -> Mat {
    if k < l {
        return Mat::zeros(width(weights, k), width(weights, l));
    }
    let mut acc = Mat::identity(width(weights, l));
    for i in (l + 1)..=k {
        acc = beta(gs, weights, i).mul(&acc);
    }
    acc
}

/// `η⁽ⁿ'ᵏ⁾` for `k = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaStack {
    eta: Vec<Mat>,
}

impl EtaStack {
    /// `η⁽ⁿ'ᵏ⁾`, a `dₙ × dₖ` matrix.
    pub fn top(&self, k: usize) -> &Mat {
        &self.eta[k - 1]
    }

    pub fn n(&self) -> usize {
        self.eta.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.eta.iter().map(Mat::len).sum()
    }
}

/// Row `r` of the η table: `η⁽ʳ'ᵏ⁾` for `k = 1..=r`, built right to left so
/// only one running `α` product is alive.
fn eta_row(gs: &GammaStack, weights: &WeightSet, r: usize) -> Vec<Mat> {
    let mut row = Vec::with_capacity(r);
    let mut a = Mat::identity(width(weights, r));
    for k in (1..=r).rev() {
        row.push(a.scale_cols(gs.layer(k)));
        if k > 1 {
            a = a.mul(&beta(gs, weights, k));
        }
    }
    row.reverse();
    row
}

pub fn eta_stack(gs: &GammaStack, weights: &WeightSet, spec: &NetworkSpec) -> EtaStack {
    EtaStack {
        eta: eta_row(gs, weights, spec.n()),
    }
}

/// A value produced by the generator; the live count drops when it does.
#[derive(Debug)]
pub struct Streamed<T> {
    value: T,
    count: usize,
    scalars: usize,
    live: Rc<Cell<usize>>,
    live_scalars: Rc<Cell<usize>>,
}

impl<T> Deref for Streamed<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.value
    }
}

impl<T> Drop for Streamed<T> {
    fn drop(&mut self) {
        self.live.set(self.live.get() - self.count);
        self.live_scalars.set(self.live_scalars.get() - self.scalars);
    }
}

/// Interior matrices `η⁽ʳ'ᵏ⁾, k = 1..=r` for one `r`.
#[derive(Debug)]
pub struct EtaRow {
    pub r: usize,
    mats: Vec<Mat>,
}

impl EtaRow {
    /// `η⁽ʳ'ᵏ⁾`
    pub fn get(&self, k: usize) -> &Mat {
        &self.mats[k - 1]
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }
}

/// Counters reported by [`EtaGenerator::stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EtaStats {
    /// Largest number of interior η matrices alive at once.
    pub peak_live: usize,
    /// Total interior η matrices produced so far.
    pub produced: usize,
    /// Largest number of scalars held by live interior η matrices.
    pub peak_scalars: usize,
}

/// On-demand producer of interior `η⁽ʳ'ᵏ⁾`, `1 ≤ k ≤ r < n`. Thread-confined.
#[derive(Debug)]
pub struct EtaGenerator<'a> {
    gs: &'a GammaStack,
    weights: &'a WeightSet,
    live: Rc<Cell<usize>>,
    live_scalars: Rc<Cell<usize>>,
    peak: Cell<usize>,
    peak_scalars: Cell<usize>,
    produced: Cell<usize>,
}

impl<'a> EtaGenerator<'a> {
    pub fn new(gs: &'a GammaStack, weights: &'a WeightSet) -> Self {
        EtaGenerator {
            gs,
            weights,
            live: Rc::new(Cell::new(0)),
            live_scalars: Rc::new(Cell::new(0)),
            peak: Cell::new(0),
            peak_scalars: Cell::new(0),
            produced: Cell::new(0),
        }
    }

    pub fn n(&self) -> usize {
        self.gs.n()
    }

    fn register(&self, count: usize, scalars: usize) {
        self.live.set(self.live.get() + count);
        self.live_scalars.set(self.live_scalars.get() + scalars);
        self.produced.set(self.produced.get() + count);
        self.peak.set(self.peak.get().max(self.live.get()));
        self.peak_scalars
            .set(self.peak_scalars.get().max(self.live_scalars.get()));
    }

    /// Row `r` of interior η matrices, `1 ≤ r ≤ n − 1`.
    pub fn row(&self, r: usize) -> Result<Streamed<EtaRow>> {
        if r == 0 || r >= self.n() {
            return Err(Error::Validation(format!(
                "interior eta row {r} out of range for n = {}",
                self.n()
            )));
        }
        let mats = eta_row(self.gs, self.weights, r);
        let scalars = mats.iter().map(Mat::len).sum();
        self.register(mats.len(), scalars);
        Ok(self.wrap(EtaRow { r, mats }, r, scalars))
    }

    fn wrap<T>(&self, value: T, count: usize, scalars: usize) -> Streamed<T> {
        Streamed {
            value,
            count,
            scalars,
            live: Rc::clone(&self.live),
            live_scalars: Rc::clone(&self.live_scalars),
        }
    }

    /// Single interior matrix `η⁽ʳ'ᵏ⁾`, `1 ≤ k ≤ r < n`.
    pub fn interior(&self, r: usize, k: usize) -> Result<Streamed<Mat>> {
        if k == 0 || k > r || r >= self.n() {
            return Err(Error::Validation(format!(
                "interior eta({r}, {k}) out of range for n = {}",
                self.n()
            )));
        }
        let m = alpha_unchecked(self.gs, self.weights, r, k).scale_cols(self.gs.layer(k));
        let scalars = m.len();
        self.register(1, scalars);
        Ok(self.wrap(m, 1, scalars))
    }

    /// Rows `n − 1, n − 2, …, 1`, each produced only when requested.
    pub fn rows_desc(&self) -> impl Iterator<Item = Streamed<EtaRow>> + '_ {
        (1..self.n())
            .rev()
            .map(move |r| self.row(r).expect("row index in range"))
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn stats(&self) -> EtaStats {
        EtaStats {
            peak_live: self.peak.get(),
            produced: self.produced.get(),
            peak_scalars: self.peak_scalars.get(),
        }
    }
}

/// Interior η matrices a fully-stored scheme would keep: `n(n − 1)/2`.
pub fn full_interior_eta_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Per-sample gradient in outer-product form.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredGradient {
    /// `∂f/∂p`; also the left factor of `∂f/∂u`.
    pub df_dp: Vec<f64>,
    /// `v⁽ⁿ⁾`, the right factor of `∂f/∂u`.
    pub u_right: Vec<f64>,
    /// `(∂f/∂p)ᵀ u η⁽ⁿ'ᵏ⁾` per layer (index `k − 1`).
    pub w_left: Vec<Vec<f64>>,
    /// `v⁽ᵏ⁻¹⁾` per layer (index `k − 1`).
    pub w_right: Vec<Vec<f64>>,
}

impl FactoredGradient {
    pub fn u_left(&self) -> &[f64] {
        &self.df_dp
    }

    pub fn dense_u(&self) -> Mat {
        Mat::outer(&self.df_dp, &self.u_right)
    }

    pub fn dense_w(&self, k: usize) -> Mat {
        Mat::outer(&self.w_left[k - 1], &self.w_right[k - 1])
    }

    /// Densified gradient in the flat parameter layout. Debug/test path.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.dense_u().into_vec();
        for k in 1..=self.w_left.len() {
            out.extend(self.dense_w(k).into_vec());
        }
        out
    }

    /// Scalars held by the factored form.
    pub fn scalar_count(&self) -> usize {
        self.df_dp.len()
            + self.u_right.len()
            + self.w_left.iter().map(Vec::len).sum::<usize>()
            + self.w_right.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn grad(
    trace: &ForwardTrace,
    gs: &GammaStack,
    es: &EtaStack,
    weights: &WeightSet,
    sample: &Sample,
) -> FactoredGradient {
    let _ = gs;
    let n = es.n();
    let g = crate::net::dfdp(trace, sample);
    let q = weights.u.tmatvec(&g);
    FactoredGradient {
        u_right: trace.v[n].clone(),
        w_left: (1..=n).map(|k| es.top(k).tmatvec(&q)).collect(),
        w_right: (1..=n).map(|k| trace.v[k - 1].clone()).collect(),
        df_dp: g,
    }
}

/// Densified analytic gradient at a flat parameter vector. Used as the
/// function differentiated by the FD-of-gradient Hessian oracle.
pub fn flat_grad(spec: &NetworkSpec, theta: &[f64], sample: &Sample) -> Result<Vec<f64>> {
    let ws = WeightSet::unflatten(spec, theta)?;
    let t = crate::net::forward_unchecked(spec, &ws, sample);
    let gs = gamma(&t, spec);
    let es = eta_stack(&gs, &ws, spec);
    Ok(grad(&t, &gs, &es, &ws, sample).flatten())
}

/// `ζ = ∂f/∂x = α⁽ⁿ'⁰⁾ᵀ uᵀ ∂f/∂p`, accumulated by a backward sweep.
pub fn grad_input(
    trace: &ForwardTrace,
    weights: &WeightSet,
    spec: &NetworkSpec,
    sample: &Sample,
) -> Vec<f64> {
    let gs = gamma(trace, spec);
    let g = crate::net::dfdp(trace, sample);
    let mut delta = weights.u.tmatvec(&g);
    for k in (1..=spec.n()).rev() {
        let scaled: Vec<f64> = delta.iter().zip(gs.layer(k)).map(|(d, c)| d * c).collect();
        delta = weights.layer(k).tmatvec(&scaled);
    }
    delta
}

/// Scalars in the stored first-order factors:
/// `Σₖ dₙdₖ + Σₖ (dₖ + dₖ₋₁) + C + dₙ`.
pub fn first_order_storage(spec: &NetworkSpec) -> usize {
    let n = spec.n();
    let d = &spec.dims;
    (1..=n).map(|k| d[n] * d[k]).sum::<usize>()
        + (1..=n).map(|k| d[k] + d[k - 1]).sum::<usize>()
        + spec.classes
        + d[n]
}
