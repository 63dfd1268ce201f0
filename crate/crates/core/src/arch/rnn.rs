//! Recurrent layer and recurrent classifier with a piecewise-linear activation.
//!
//! Network: `v₀ = 0`, `vᵣ = A(w vᵣ₋₁ + u xᵣ₋₁)` for `r = 1..=n`, `p = z vₙ`,
//! softmax cross-entropy on `p`. With `γᵣ = A'(preᵣ)`, `βᵣ = diag(γᵣ) w` and
//! `E(t,k) = ∂vₜ/∂preₖ = βₜ⋯βₖ₊₁ diag(γₖ)`, weight tying turns every
//! per-step derivative into a sum over steps.
//!
//! Layer: the same recurrence without input, `vₜ = A(w vₜ₋₁)` started from
//! `v₀ = x`. It is the feedforward stack with `w⁽ᵏ⁾ = w` for every `k`, so it
//! reuses the feedforward factors.

use crate::blocks::{BlockTerm, FactoredBlock};
use crate::error::{shape_err, Error, Result};
use crate::factors::{alpha_unchecked, gamma, GammaStack};
use crate::hessian::DenseHessian;
use crate::linalg::Mat;
use crate::net::{log_softmax, ActKind, NetworkSpec, Sample, WeightSet};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentSpec {
    pub state: usize,
    pub input: usize,
    pub classes: usize,
    pub steps: usize,
    pub activation: ActKind,
}

impl RecurrentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state == 0 || self.input == 0 || self.steps == 0 {
            return Err(Error::Validation("state, input and steps must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        Ok(())
    }

    fn require_piecewise_linear(&self) -> Result<()> {
        if !self.activation.is_piecewise_linear() {
            return Err(Error::Validation(format!(
                "recurrent second derivatives need a piecewise-linear activation, got {}",
                self.activation.name()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.classes * self.state + self.state * self.state + self.state * self.input
    }
}

/// Parameters; flattened in the order `z`, `w`, `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnWeights {
    pub w: Mat,
    pub u: Mat,
    pub z: Mat,
}

impl RnnWeights {
    pub fn random(rs: &RecurrentSpec, rng: &mut Rng, gain: f64) -> Self {
        let mut fill = |r: usize, c: usize| {
            let s = gain / (c as f64).sqrt();
            Mat::from_fn(r, c, |_, _| s * rng.normal())
        };
        RnnWeights {
            w: fill(rs.state, rs.state),
            u: fill(rs.state, rs.input),
            z: fill(rs.classes, rs.state),
        }
    }

    pub fn check(&self, rs: &RecurrentSpec) -> Result<()> {
        rs.validate()?;
        if self.w.shape() != (rs.state, rs.state)
            || self.u.shape() != (rs.state, rs.input)
            || self.z.shape() != (rs.classes, rs.state)
        {
            return shape_err("recurrent weights do not match the spec");
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.z.as_slice().to_vec();
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.u.as_slice());
        out
    }

    pub fn unflatten(rs: &RecurrentSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != rs.param_count() {
            return shape_err(format!("expected {} parameters, got {}", rs.param_count(), theta.len()));
        }
        let (c, d, di) = (rs.classes, rs.state, rs.input);
        let (a, rest) = theta.split_at(c * d);
        let (b, rest) = rest.split_at(d * d);
        Ok(RnnWeights {
            z: Mat::new(c, d, a.to_vec())?,
            w: Mat::new(d, d, b.to_vec())?,
            u: Mat::new(d, di, rest.to_vec())?,
        })
    }
}

/// Input sequence `x₀..xₙ₋₁` and one-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnSample {
    pub xs: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl RnnSample {
    pub fn random(rs: &RecurrentSpec, rng: &mut Rng) -> Self {
        let xs = (0..rs.steps)
            .map(|_| (0..rs.input).map(|_| rng.normal()).collect())
            .collect();
        let mut y = vec![0.0; rs.classes];
        y[rng.below(rs.classes)] = 1.0;
        RnnSample { xs, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnTrace {
    /// `v[0] = 0`, `v[r]` for `r = 1..=n`.
    pub v: Vec<Vec<f64>>,
    /// `pre[r − 1]`
    pub pre: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub yhat: Vec<f64>,
    pub f: f64,
}

impl RnnTrace {
    pub fn min_abs_preactivation(&self) -> f64 {
        self.pre.iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

pub fn rnn_forward(rs: &RecurrentSpec, weights: &RnnWeights, sample: &RnnSample) -> Result<RnnTrace> {
    weights.check(rs)?;
    if sample.xs.len() != rs.steps || sample.xs.iter().any(|x| x.len() != rs.input) {
        return shape_err("input sequence does not match the spec");
    }
    if sample.y.len() != rs.classes {
        return shape_err("label length does not match class count");
    }
    Ok(rnn_forward_unchecked(rs, weights, sample))
}

fn rnn_forward_unchecked(rs: &RecurrentSpec, weights: &RnnWeights, sample: &RnnSample) -> RnnTrace {
    let mut v = vec![vec![0.0; rs.state]];
    let mut pre = Vec::with_capacity(rs.steps);
    for x in &sample.xs {
        let mut z = weights.w.matvec(v.last().unwrap());
        for (a, b) in z.iter_mut().zip(weights.u.matvec(x)) {
            *a += b;
        }
        v.push(z.iter().map(|&s| rs.activation.eval(s)).collect());
        pre.push(z);
    }
    let p = weights.z.matvec(v.last().unwrap());
    let (yhat, logs) = log_softmax(&p);
    let f = -sample.y.iter().zip(&logs).map(|(y, l)| y * l).sum::<f64>();
    RnnTrace { v, pre, p, yhat, f }
}

/// Loss at a flat parameter vector `(z, w, u)`.
pub fn rnn_loss_at(rs: &RecurrentSpec, theta: &[f64], sample: &RnnSample) -> Result<f64> {
    let ws = RnnWeights::unflatten(rs, theta)?;
    Ok(rnn_forward(rs, &ws, sample)?.f)
}

/// Gradients and every Hessian block of the recurrent classifier.
#[derive(Debug, Clone)]
pub struct RnnNetworkDerivs {
    pub grad_z: Mat,
    pub grad_w: Mat,
    pub grad_u: Mat,
    /// `hᵣ = E(n,r)ᵀ zᵀ ∂f/∂p`, index `r − 1`.
    pub h: Vec<Vec<f64>>,
    pub zz: FactoredBlock,
    pub zw: FactoredBlock,
    pub zu: FactoredBlock,
    pub ww: FactoredBlock,
    pub wu: FactoredBlock,
    pub uu: FactoredBlock,
}

impl RnnNetworkDerivs {
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = self.grad_z.as_slice().to_vec();
        out.extend_from_slice(self.grad_w.as_slice());
        out.extend_from_slice(self.grad_u.as_slice());
        out
    }

    /// Dense Hessian in the `(z, w, u)` layout.
    pub fn dense(&self) -> DenseHessian {
        let nz = self.zz.rows.0 * self.zz.rows.1;
        let nw = self.ww.rows.0 * self.ww.rows.1;
        let nu = self.uu.rows.0 * self.uu.rows.1;
        let p = nz + nw + nu;
        let offs = [0, nz, nz + nw];
        let mut h = Mat::zeros(p, p);
        let grid = [
            (0, 0, self.zz.clone()),
            (0, 1, self.zw.clone()),
            (0, 2, self.zu.clone()),
            (1, 0, self.zw.transpose()),
            (1, 1, self.ww.clone()),
            (1, 2, self.wu.clone()),
            (2, 0, self.zu.transpose()),
            (2, 1, self.wu.transpose()),
            (2, 2, self.uu.clone()),
        ];
        for (a, b, blk) in grid {
            blk.densify_into(&mut h, offs[a], offs[b]);
        }
        let layout = crate::net::ParamLayout {
            blocks: vec![
                (self.zz.rows.0, self.zz.rows.1, 0),
                (self.ww.rows.0, self.ww.rows.1, nz),
                (self.uu.rows.0, self.uu.rows.1, nz + nw),
            ],
        };
        DenseHessian::symmetrized(h, layout)
    }
}

struct Chain {
    gamma: Vec<Vec<f64>>,
    w: Mat,
}

impl Chain {
    /// `E(t,k)`, `1 ≤ k ≤ t ≤ n`.
    fn e(&self, t: usize, k: usize) -> Mat {
        let mut m = Mat::diag(&self.gamma[k - 1]);
        for j in (k + 1)..=t {
            m = self.w.scale_rows(&self.gamma[j - 1]).mul(&m);
        }
        m
    }
}

pub fn rnn_network_derivs(rs: &RecurrentSpec, weights: &RnnWeights, sample: &RnnSample) -> Result<RnnNetworkDerivs> {
    rs.require_piecewise_linear()?;
    let tr = rnn_forward(rs, weights, sample)?;
    let n = rs.steps;
    let chain = Chain {
        gamma: tr
            .pre
            .iter()
            .map(|z| z.iter().map(|&s| rs.activation.d1(s)).collect())
            .collect(),
        w: weights.w.clone(),
    };
    let g: Vec<f64> = tr.yhat.iter().zip(&sample.y).map(|(a, b)| a - b).collect();
    let p = d2fdp2_of(&tr.yhat);
    let q = weights.z.tmatvec(&g);
    let top: Vec<Mat> = (1..=n).map(|k| chain.e(n, k)).collect();
    let h: Vec<Vec<f64>> = top.iter().map(|e| e.tmatvec(&q)).collect();
    let m: Vec<Mat> = top.iter().map(|e| weights.z.mul(e)).collect();
    let pm: Vec<Mat> = m.iter().map(|mk| p.mul(mk)).collect();
    let vn = &tr.v[n];
    let x = |r: usize| &sample.xs[r - 1];
    let v = |r: usize| &tr.v[r];

    let (c, d, di) = (rs.classes, rs.state, rs.input);
    let mut grad_w = Mat::zeros(d, d);
    let mut grad_u = Mat::zeros(d, di);
    for r in 1..=n {
        grad_w.add_assign_scaled(&Mat::outer(&h[r - 1], v(r - 1)), 1.0);
        grad_u.add_assign_scaled(&Mat::outer(&h[r - 1], x(r)), 1.0);
    }

    let mut zz = FactoredBlock::zero((c, d), (c, d));
    zz.push(BlockTerm::Kron { a: p.clone(), x: vn.clone(), y: vn.clone() })?;
    let mut zw = FactoredBlock::zero((c, d), (d, d));
    let mut zu = FactoredBlock::zero((c, d), (d, di));
    for k in 1..=n {
        zw.push(BlockTerm::Cross { a: g.clone(), m: top[k - 1].clone(), y: v(k - 1).clone() })?;
        zw.push(BlockTerm::Kron { a: pm[k - 1].clone(), x: vn.clone(), y: v(k - 1).clone() })?;
        zu.push(BlockTerm::Cross { a: g.clone(), m: top[k - 1].clone(), y: x(k).clone() })?;
        zu.push(BlockTerm::Kron { a: pm[k - 1].clone(), x: vn.clone(), y: x(k).clone() })?;
    }
    let mut ww = FactoredBlock::zero((d, d), (d, d));
    let mut wu = FactoredBlock::zero((d, d), (d, di));
    let mut uu = FactoredBlock::zero((d, di), (d, di));
    for r in 1..=n {
        for c2 in 1..=n {
            let gn = m[r - 1].transpose().mul(&pm[c2 - 1]);
            ww.push(BlockTerm::Kron { a: gn.clone(), x: v(r - 1).clone(), y: v(c2 - 1).clone() })?;
            wu.push(BlockTerm::Kron { a: gn.clone(), x: v(r - 1).clone(), y: x(c2).clone() })?;
            uu.push(BlockTerm::Kron { a: gn, x: x(r).clone(), y: x(c2).clone() })?;
        }
    }
    // vᵣ₋₁ moves with w and u through steps c < r; E(n,r) moves with w
    // through steps c > r.
    for r in 1..=n {
        for c2 in 1..r {
            let e = chain.e(r - 1, c2);
            ww.push(BlockTerm::Cross { a: h[r - 1].clone(), m: e.clone(), y: v(c2 - 1).clone() })?;
            wu.push(BlockTerm::Cross { a: h[r - 1].clone(), m: e, y: x(c2).clone() })?;
        }
        for c2 in (r + 1)..=n {
            let e = chain.e(c2 - 1, r);
            ww.push(BlockTerm::CrossT { a: h[c2 - 1].clone(), m: e, x: v(r - 1).clone() })?;
        }
    }
    Ok(RnnNetworkDerivs {
        grad_z: Mat::outer(&g, vn),
        grad_w,
        grad_u,
        h,
        zz,
        zw,
        zu,
        ww,
        wu,
        uu,
    })
}

fn d2fdp2_of(yhat: &[f64]) -> Mat {
    let c = yhat.len();
    Mat::from_fn(c, c, |i, j| if i == j { yhat[i] } else { 0.0 } - yhat[i] * yhat[j])
}

/// Derivatives of `vₜ` for the input-free recurrent layer started at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnLayerDerivs {
    /// `d × d²`; column `(q,r)` is `∂vₜ/∂w[q,r]`.
    pub dv_dw: Mat,
    /// `d × d`
    pub dv_dx: Mat,
    /// Per output `m`, `d² × d²`.
    pub d2v_dwdw: Vec<Mat>,
    /// Per output `m`, `d² × d`.
    pub d2v_dwdx: Vec<Mat>,
    /// Per output `m`, `d × d`; zero for piecewise-linear activations.
    pub d2v_dxdx: Vec<Mat>,
}

fn unrolled(d: usize, t: usize, w: &Mat, act: ActKind) -> Result<(NetworkSpec, WeightSet)> {
    let spec = NetworkSpec::new(vec![d; t + 1], 2, act)?;
    let ws = WeightSet {
        w: vec![w.clone(); t],
        u: Mat::zeros(2, d),
    };
    Ok((spec, ws))
}

/// State after `t` steps of the input-free layer, plus its unrolled factors.
fn layer_factors(rs: &RecurrentSpec, w: &Mat, x: &[f64], t: usize) -> Result<(Vec<Vec<f64>>, GammaStack, WeightSet)> {
    rs.validate()?;
    if t == 0 || t > rs.steps {
        return Err(Error::Validation(format!("step {t} out of range 1..={}", rs.steps)));
    }
    if w.shape() != (rs.state, rs.state) || x.len() != rs.state {
        return shape_err("layer weight or state does not match the spec");
    }
    let (spec, ws) = unrolled(rs.state, t, w, rs.activation)?;
    let sample = Sample { x: x.to_vec(), y: vec![1.0, 0.0] };
    let tr = crate::net::forward(&spec, &ws, &sample)?;
    let gs = gamma(&tr, &spec);
    Ok((tr.v, gs, ws))
}

/// `vₜ` of the input-free layer.
pub fn rnn_layer_state(rs: &RecurrentSpec, w: &Mat, x: &[f64], t: usize) -> Result<Vec<f64>> {
    Ok(layer_factors(rs, w, x, t)?.0.pop().unwrap())
}

pub fn rnn_layer_derivs(rs: &RecurrentSpec, w: &Mat, x: &[f64], t: usize) -> Result<RnnLayerDerivs> {
    rs.require_piecewise_linear()?;
    let (v, gs, ws) = layer_factors(rs, w, x, t)?;
    let d = rs.state;
    let eta = |r: usize, k: usize| alpha_unchecked(&gs, &ws, r, k).scale_cols(gs.layer(k));
    let etas: Vec<Vec<Mat>> = (0..=t)
        .map(|r| (0..=t).map(|k| if k >= 1 && k <= r { eta(r, k) } else { Mat::zeros(0, 0) }).collect())
        .collect();
    let d2 = d * d;
    // dvₜ/dw = Σₖ η⁽ᵗ'ᵏ⁾ ⊗ vₖ₋₁
    let mut dv_dw = Mat::zeros(d, d2);
    for k in 1..=t {
        for m in 0..d {
            for q in 0..d {
                for r in 0..d {
                    dv_dw[(m, q * d + r)] += etas[t][k][(m, q)] * v[k - 1][r];
                }
            }
        }
    }
    let dv_dx = alpha_unchecked(&gs, &ws, t, 0);
    let mut d2v_dwdw = Vec::with_capacity(d);
    let mut d2v_dwdx = Vec::with_capacity(d);
    for m in 0..d {
        // One triangle: step j > k differentiates η⁽ᵗ'ᵏ⁾. The other triangle
        // (step j < k moving vₖ₋₁) is its transpose.
        let mut tri = Mat::zeros(d2, d2);
        for k in 1..=t {
            for j in (k + 1)..=t {
                for q in 0..d {
                    for r in 0..d {
                        let vr = v[k - 1][r];
                        for a in 0..d {
                            let ea = etas[t][j][(m, a)];
                            for b in 0..d {
                                tri[(q * d + r, a * d + b)] += ea * etas[j - 1][k][(b, q)] * vr;
                            }
                        }
                    }
                }
            }
        }
        let mut full = tri.transpose();
        full.add_assign_scaled(&tri, 1.0);
        d2v_dwdw.push(full);

        // ∂vₖ₋₁/∂x is I for k = 1 and η⁽ᵏ⁻¹'¹⁾ w otherwise.
        let mut wx = Mat::zeros(d2, d);
        for k in 1..=t {
            let dvx = if k == 1 { Mat::identity(d) } else { etas[k - 1][1].mul(w) };
            for q in 0..d {
                let e = etas[t][k][(m, q)];
                for r in 0..d {
                    for i in 0..d {
                        wx[(q * d + r, i)] += e * dvx[(r, i)];
                    }
                }
            }
        }
        d2v_dwdx.push(wx);
    }
    Ok(RnnLayerDerivs {
        dv_dw,
        dv_dx,
        d2v_dwdw,
        d2v_dwdx,
        d2v_dxdx: vec![Mat::zeros(d, d); d],
    })
}

/// The `t = 1` classifier as a one-hidden-layer feedforward net:
/// `w⁽¹⁾ = u`, output `z`, input `x₀`.
pub fn single_step_as_feedforward(rs: &RecurrentSpec, weights: &RnnWeights, sample: &RnnSample) -> Result<(NetworkSpec, WeightSet, Sample)> {
    if rs.steps != 1 {
        return Err(Error::Validation("only a single-step network reduces to one layer".into()));
    }
    let spec = NetworkSpec::new(vec![rs.input, rs.state], rs.classes, rs.activation)?;
    let ws = WeightSet {
        w: vec![weights.u.clone()],
        u: weights.z.clone(),
    };
    Ok((spec, ws, Sample::new(sample.xs[0].clone(), sample.y.clone())?))
}
