//! Second derivatives for any smooth entry-wise activation.
//!
//! `λ⁽ˡ⁾ = A''(z⁽ˡ⁾)` enters through `∂γ⁽ˡ⁾/∂w⁽q⁾`. Writing
//! `ζ⁽ʳ'ᵏ⁾ = ∂z⁽ʳ⁾/∂z⁽ᵏ⁾ ⊘ γ⁽ᵏ⁾ = w⁽ʳ⁾η⁽ʳ⁻¹'ᵏ⁾` (`ζ⁽ᵏ'ᵏ⁾ = I`), so that
//! `∂z⁽ʳ⁾/∂w⁽q⁾ = ζ⁽ʳ'q⁾ ⊗ v⁽q⁻¹⁾`, every derivative below is a sum of
//! [`F4Term::Core`] terms (one per layer whose `γ` moves) and at most one
//! [`F4Term::Pair`] term (the layer whose weight is differentiated).
//!
//! For piecewise-linear activations `λ ≡ 0` and the core terms are skipped,
//! which makes every routine here reproduce the ReLU path exactly.

use crate::blocks::{BlockTerm, F4Term, Factored4, FactoredBlock};
use crate::error::{Error, Result};
use crate::factors::{alpha_unchecked, EtaGenerator};
use crate::hessian::{
    check_cap, gauss_newton_ww, hess_uu, hess_uw, hess_wu, min_eigpair, DenseHessian, Direction,
    HessianFactors,
};
use crate::linalg::Mat;
use crate::net::{ForwardTrace, NetworkSpec};

/// `λ⁽ˡ⁾ = A''(z⁽ˡ⁾)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaStack {
    lambda: Vec<Vec<f64>>,
    piecewise_linear: bool,
}

impl LambdaStack {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.lambda[l - 1]
    }

    /// True when every `λ` vanishes by construction and core terms are skipped.
    pub fn skipped(&self) -> bool {
        self.piecewise_linear
    }
}

pub fn lambda(trace: &ForwardTrace, spec: &NetworkSpec) -> LambdaStack {
    let act = spec.activation;
    LambdaStack {
        lambda: trace
            .z
            .iter()
            .map(|zl| zl.iter().map(|&z| act.d2(z)).collect())
            .collect(),
        piecewise_linear: act.is_piecewise_linear(),
    }
}

fn width(hf: &HessianFactors, k: usize) -> usize {
    hf.spec.dims[k]
}

fn check(hf: &HessianFactors, layers: &[usize], lo: usize) -> Result<()> {
    let n = hf.n();
    for &k in layers {
        if k < lo || k > n {
            return Err(Error::Validation(format!("layer {k} out of range {lo}..={n}")));
        }
    }
    Ok(())
}

/// `ζ⁽ʳ'ᵏ⁾`, `r ≥ k ≥ 1`.
fn zeta(hf: &HessianFactors, gen: &EtaGenerator, r: usize, k: usize) -> Result<Mat> {
    if r == k {
        return Ok(Mat::identity(width(hf, k)));
    }
    let eta = gen.interior(r - 1, k)?;
    Ok(hf.weights.layer(r).mul(&eta))
}

/// `η⁽ᵏ'q⁾` for any `1 ≤ q ≤ k ≤ n`.
fn eta_any(hf: &HessianFactors, gen: &EtaGenerator, k: usize, q: usize) -> Result<Mat> {
    if k == hf.n() {
        Ok(hf.eta_top.top(q).clone())
    } else {
        Ok(gen.interior(k, q)?.clone())
    }
}

fn alpha(hf: &HessianFactors, k: usize, l: usize) -> Mat {
    alpha_unchecked(&hf.gamma, hf.weights, k, l)
}

fn core(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    left: Mat,
    r: usize,
    right: Mat,
    q: usize,
) -> Result<F4Term> {
    Ok(F4Term::Core {
        left,
        weight: ls.layer(r).to_vec(),
        right,
        side: zeta(hf, gen, r, q)?,
        vec: hf.v(q - 1).to_vec(),
    })
}

/// `∂γ⁽ˡ⁾/∂w⁽q⁾` as a `d_l × 1` matrix derivative: zero for `l < q`,
/// otherwise `diag(λ⁽ˡ⁾) ζ⁽ˡ'q⁾ ⊗ v⁽q⁻¹⁾`.
pub fn dgamma_dw(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    l: usize,
    q: usize,
) -> Result<Factored4> {
    check(hf, &[l, q], 1)?;
    let dl = width(hf, l);
    let mut out = Factored4::zero((dl, 1, width(hf, q), width(hf, q - 1)));
    if l >= q && !ls.skipped() {
        out.push(core(hf, ls, gen, Mat::identity(dl), l, Mat::from_fn(dl, 1, |_, _| 1.0), q)?)?;
    }
    Ok(out)
}

/// `∂β⁽ᵏ⁾/∂w⁽q⁾` with `β⁽ᵏ⁾ = diag(γ⁽ᵏ⁾) w⁽ᵏ⁾`.
pub fn dbeta_dw(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    k: usize,
    q: usize,
) -> Result<Factored4> {
    check(hf, &[k, q], 1)?;
    let mut out = Factored4::zero((width(hf, k), width(hf, k - 1), width(hf, q), width(hf, q - 1)));
    if k >= q && !ls.skipped() {
        let dk = width(hf, k);
        out.push(core(hf, ls, gen, Mat::identity(dk), k, hf.weights.layer(k).clone(), q)?)?;
    }
    if k == q {
        out.push(F4Term::Pair {
            a: Mat::diag(hf.gamma.layer(k)),
            b: Mat::identity(width(hf, k - 1)),
        })?;
    }
    Ok(out)
}

/// `∂α⁽ᵏ'ˡ⁾/∂w⁽q⁾`, `0 ≤ l ≤ k ≤ n`:
///
/// ```text
/// Σ_{r=max(l+1,q)}^{k} Core{α⁽ᵏ'ʳ⁾, λ⁽ʳ⁾, w⁽ʳ⁾α⁽ʳ⁻¹'ˡ⁾, ζ⁽ʳ'q⁾, v⁽q⁻¹⁾}
///   + [l < q ≤ k] Pair{η⁽ᵏ'q⁾, α⁽q⁻¹'ˡ⁾}
/// ```
pub fn dalpha_dw(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    k: usize,
    l: usize,
    q: usize,
) -> Result<Factored4> {
    check(hf, &[k, l], 0)?;
    check(hf, &[q], 1)?;
    let mut out = Factored4::zero((width(hf, k), width(hf, l), width(hf, q), width(hf, q - 1)));
    if k < l {
        return Ok(out);
    }
    if !ls.skipped() {
        for r in (l + 1).max(q)..=k {
            let right = hf.weights.layer(r).mul(&alpha(hf, r - 1, l));
            out.push(core(hf, ls, gen, alpha(hf, k, r), r, right, q)?)?;
        }
    }
    if l < q && q <= k {
        out.push(F4Term::Pair {
            a: eta_any(hf, gen, k, q)?,
            b: alpha(hf, q - 1, l),
        })?;
    }
    Ok(out)
}

/// `∂η⁽ⁿ'ᵏ⁾/∂w⁽q⁾`, by case:
///
/// ```text
/// Σ_{r=max(k,q)}^{n} Core{α⁽ⁿ'ʳ⁾, λ⁽ʳ⁾, ζ⁽ʳ'ᵏ⁾, ζ⁽ʳ'q⁾, v⁽q⁻¹⁾}
///   + [q > k] Pair{η⁽ⁿ'q⁾, η⁽q⁻¹'ᵏ⁾}
/// ```
///
/// The `r = k` core is the derivative of `γ⁽ᵏ⁾` itself, present only when
/// `q ≤ k`.
pub fn deta_dw(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    k: usize,
    q: usize,
) -> Result<Factored4> {
    check(hf, &[k, q], 1)?;
    let n = hf.n();
    let mut out = Factored4::zero((width(hf, n), width(hf, k), width(hf, q), width(hf, q - 1)));
    if !ls.skipped() {
        for r in k.max(q)..=n {
            out.push(core(hf, ls, gen, alpha(hf, n, r), r, zeta(hf, gen, r, k)?, q)?)?;
        }
    }
    if q > k {
        out.push(F4Term::Pair {
            a: hf.eta_top.top(q).clone(),
            b: gen.interior(q - 1, k)?.clone(),
        })?;
    }
    Ok(out)
}

/// `∂²v⁽ⁿ⁾/∂w⁽ᵏ⁾∂w⁽q⁾`: `∂η⁽ⁿ'ᵏ⁾/∂w⁽q⁾ ⊗ v⁽ᵏ⁻¹⁾`, plus
/// `η⁽ⁿ'ᵏ⁾ ⊗ η⁽ᵏ⁻¹'q⁾ ⊗ v⁽q⁻¹⁾` when `q < k` (the input `v⁽ᵏ⁻¹⁾` moves).
#[derive(Debug, Clone)]
pub struct D2vDwDw {
    pub deta: Factored4,
    pub v_prev: Vec<f64>,
    pub tail: Option<(Mat, Mat, Vec<f64>)>,
}

impl D2vDwDw {
    /// `Σ_j x[j] ∂²v⁽ⁿ⁾_j/∂w⁽ᵏ⁾∂w⁽q⁾` as a block with rows `w⁽ᵏ⁾`, columns `w⁽q⁾`.
    pub fn contract(&self, x: &[f64]) -> Result<FactoredBlock> {
        let mut block = self.deta.contract_rows(x, &self.v_prev)?;
        if let Some((eta_nk, eta_in, v)) = &self.tail {
            block.push(BlockTerm::Cross {
                a: eta_nk.tmatvec(x),
                m: eta_in.clone(),
                y: v.clone(),
            })?;
        }
        Ok(block)
    }

    /// Dense slice for output unit `j`: rows `w⁽ᵏ⁾`, columns `w⁽q⁾`.
    pub fn densify_output(&self, j: usize) -> Result<Mat> {
        let mut e = vec![0.0; self.deta.dims.0];
        e[j] = 1.0;
        Ok(self.contract(&e)?.densify())
    }
}

pub fn d2v_dwdw(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    k: usize,
    q: usize,
) -> Result<D2vDwDw> {
    let deta = deta_dw(hf, ls, gen, k, q)?;
    let tail = if q < k {
        Some((
            hf.eta_top.top(k).clone(),
            gen.interior(k - 1, q)?.clone(),
            hf.v(q - 1).to_vec(),
        ))
    } else {
        None
    };
    Ok(D2vDwDw {
        deta,
        v_prev: hf.v(k - 1).to_vec(),
        tail,
    })
}

/// Objective Hessian block `∂²f/∂w⁽ᵏ⁾∂w⁽q⁾`: the Gauss-Newton term plus
/// `(∂f/∂p)ᵀu · ∂²v⁽ⁿ⁾/∂w⁽ᵏ⁾∂w⁽q⁾`.
pub fn hess_general(
    hf: &HessianFactors,
    ls: &LambdaStack,
    k: usize,
    q: usize,
    gen: &EtaGenerator,
) -> Result<FactoredBlock> {
    let mut block = gauss_newton_ww(hf, k, q)?;
    for t in d2v_dwdw(hf, ls, gen, k, q)?.contract(hf.q())?.terms {
        block.push(t)?;
    }
    Ok(block)
}

/// Dense Hessian with the general `ww` blocks; the `u` rows and columns are
/// activation-independent and shared with the ReLU path.
pub fn assemble_dense_general(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    cap: usize,
) -> Result<DenseHessian> {
    let layout = hf.layout();
    let p = layout.total();
    check_cap(p, cap)?;
    let n = hf.n();
    let mut h = Mat::zeros(p, p);
    let off = |b: usize| layout.block_range(b).start;
    hess_uu(hf).densify_into(&mut h, 0, 0);
    for k in 1..=n {
        hess_uw(hf, k)?.densify_into(&mut h, 0, off(k));
        hess_wu(hf, k)?.densify_into(&mut h, off(k), 0);
        for q in 1..=n {
            hess_general(hf, ls, k, q, gen)?.densify_into(&mut h, off(k), off(q));
        }
    }
    Ok(DenseHessian::symmetrized(h, layout))
}

/// Smallest eigenpair of the general dense Hessian.
pub fn min_curvature_general(
    hf: &HessianFactors,
    ls: &LambdaStack,
    gen: &EtaGenerator,
    cap: usize,
) -> Result<(f64, Direction)> {
    let dense = assemble_dense_general(hf, ls, gen, cap)?;
    min_eigpair(&dense, hf.spec)
}
