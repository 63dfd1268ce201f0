//! Input-space regularizers and the first-order perturbation bound.
//!
//! With `B = u α⁽ⁿ'⁰⁾` (so `∂p/∂x = B`), `g = ∂f/∂p`, `P = ∂²f/∂p²`:
//!
//! * `ζ = Bᵀg`, the input gradient, penalized by `‖ζ‖²`;
//! * `ξ = BᵀPB`, penalized by `‖ξ‖²_F`. For ReLU nets this is the input
//!   Hessian of `f`; smooth activations add `λ` terms, see [`input_hessian`].
//!
//! Weight derivatives of both penalties split into a part routed through the
//! head (`P` or `∂³f/∂p³`) and a part routed through `∂α⁽ⁿ'⁰⁾/∂w⁽ᵏ⁾`.

use crate::error::{Error, Result};
use crate::factors::{alpha_unchecked, gamma, grad_input};
use crate::general::{dalpha_dw, lambda, LambdaStack};
use crate::hessian::HessianFactors;
use crate::linalg::{dot, Mat, Rank3};
use crate::net::{d2fdp2, d3fdp3, forward_unchecked, ForwardTrace, NetworkSpec, Sample, WeightSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GradRegResult {
    pub zeta: Vec<f64>,
    pub penalty: f64,
    pub dpenalty_du: Mat,
    pub dpenalty_dw: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvRegResult {
    pub xi: Mat,
    pub penalty: f64,
    pub dpenalty_du: Mat,
    pub dpenalty_dw: Vec<Mat>,
}

/// `α⁽ⁿ'⁰⁾` and `B = u α⁽ⁿ'⁰⁾`.
fn input_jacobians(hf: &HessianFactors) -> (Mat, Mat) {
    let a = alpha_unchecked(&hf.gamma, hf.weights, hf.n(), 0);
    let b = hf.weights.u.mul(&a);
    (a, b)
}

/// `‖∂f/∂x‖²` and its derivatives in every weight.
pub fn grad_reg(hf: &HessianFactors, ls: &LambdaStack) -> Result<GradRegResult> {
    let n = hf.n();
    let (a, b) = input_jacobians(hf);
    let zeta = b.tmatvec(&hf.df_dp);
    let penalty = dot(&zeta, &zeta);
    let bz = b.matvec(&zeta);
    let pbz = hf.d2f_dp2.matvec(&bz);
    let mut du = Mat::outer(&hf.df_dp, &a.matvec(&zeta));
    du.add_assign_scaled(&Mat::outer(&pbz, hf.v(n)), 1.0);
    let du = du.scaled(2.0);
    let gen = hf.generator();
    let xbar = Mat::outer(hf.q(), &zeta);
    let mut dw = Vec::with_capacity(n);
    for k in 1..=n {
        let mut d = Mat::outer(&hf.m(k).tmatvec(&pbz), hf.v(k - 1));
        d.add_assign_scaled(&dalpha_dw(hf, ls, &gen, n, 0, k)?.contract_matrix(&xbar)?, 1.0);
        dw.push(d.scaled(2.0));
    }
    Ok(GradRegResult {
        zeta,
        penalty,
        dpenalty_du: du,
        dpenalty_dw: dw,
    })
}

/// `‖BᵀPB‖²_F` and its derivatives; `d3` is `∂³f/∂p³` for this sample.
pub fn curv_reg(hf: &HessianFactors, ls: &LambdaStack, d3: &Rank3) -> Result<CurvRegResult> {
    let n = hf.n();
    let c = hf.spec.classes;
    if d3.dims() != (c, c, c) {
        return Err(Error::Shape(format!("third derivative {:?}, want {c}³", d3.dims())));
    }
    let (a, b) = input_jacobians(hf);
    let p = &hf.d2f_dp2;
    let pb = p.mul(&b);
    let xi = b.transpose().mul(&pb);
    let penalty = xi.dot(&xi);
    let pbxi = pb.mul(&xi);
    // t_c = Σ_ab T_abc (BξBᵀ)_ab
    let t = d3.contract_first_two(&b.mul(&xi).mul(&b.transpose()));
    let mut du = pbxi.mul(&a.transpose()).scaled(4.0);
    du.add_assign_scaled(&Mat::outer(&t, hf.v(n)), 2.0);
    let gen = hf.generator();
    let upbxi = hf.weights.u.transpose().mul(&pbxi);
    let mut dw = Vec::with_capacity(n);
    for k in 1..=n {
        let mut d = dalpha_dw(hf, ls, &gen, n, 0, k)?.contract_matrix(&upbxi)?.scaled(4.0);
        d.add_assign_scaled(&Mat::outer(&hf.m(k).tmatvec(&t), hf.v(k - 1)), 2.0);
        dw.push(d);
    }
    Ok(CurvRegResult {
        xi,
        penalty,
        dpenalty_du: du,
        dpenalty_dw: dw,
    })
}

/// Full input Hessian `∂²f/∂x²` for any activation:
/// `BᵀPB + Σᵣ (w⁽ʳ⁾α⁽ʳ⁻¹'⁰⁾)ᵀ diag(cʳ) (w⁽ʳ⁾α⁽ʳ⁻¹'⁰⁾)` with
/// `cʳ = (α⁽ⁿ'ʳ⁾ᵀ uᵀg) ⊙ λ⁽ʳ⁾`.
pub fn input_hessian(hf: &HessianFactors, ls: &LambdaStack) -> Mat {
    let (_, b) = input_jacobians(hf);
    let mut h = b.transpose().mul(&hf.d2f_dp2.mul(&b));
    if ls.skipped() {
        return h;
    }
    let n = hf.n();
    for r in 1..=n {
        let c: Vec<f64> = alpha_unchecked(&hf.gamma, hf.weights, n, r)
            .tmatvec(hf.q())
            .iter()
            .zip(ls.layer(r))
            .map(|(x, l)| x * l)
            .collect();
        let dz = hf.weights.layer(r).mul(&alpha_unchecked(&hf.gamma, hf.weights, r - 1, 0));
        h.add_assign_scaled(&dz.transpose().mul(&dz.scale_rows(&c)), 1.0);
    }
    h
}

/// `∂ŷ/∂x = (diag ŷ − ŷŷᵀ) u α⁽ⁿ'⁰⁾` and its Frobenius norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbBound {
    pub jac: Mat,
    pub frob: f64,
}

impl PerturbBound {
    pub fn new(trace: &ForwardTrace, weights: &WeightSet, spec: &NetworkSpec) -> Result<Self> {
        weights.check(spec)?;
        let gs = gamma(trace, spec);
        let a = alpha_unchecked(&gs, weights, spec.n(), 0);
        let jac = d2fdp2(trace).mul(&weights.u).mul(&a);
        let frob = jac.frobenius();
        Ok(PerturbBound { jac, frob })
    }

    /// Smallest `‖Δx‖` that can move `ŷ` by `dy_norm` under the linear model.
    pub fn bound(&self, dy_norm: f64) -> Result<f64> {
        if !(dy_norm >= 0.0 && dy_norm.is_finite()) {
            return Err(Error::Validation(format!("dy norm must be >= 0, got {dy_norm}")));
        }
        if self.frob == 0.0 {
            return Err(Error::DegenerateBound);
        }
        Ok(dy_norm / self.frob)
    }
}

pub fn perturb_bound(
    trace: &ForwardTrace,
    weights: &WeightSet,
    spec: &NetworkSpec,
    dy_norm: f64,
) -> Result<f64> {
    PerturbBound::new(trace, weights, spec)?.bound(dy_norm)
}

/// `‖∂f/∂x‖²` at flat weights `theta`; the function the FD oracle differentiates.
pub fn grad_penalty_at(spec: &NetworkSpec, theta: &[f64], sample: &Sample) -> Result<f64> {
    let ws = WeightSet::unflatten(spec, theta)?;
    let t = forward_unchecked(spec, &ws, sample);
    let z = grad_input(&t, &ws, spec, sample);
    Ok(dot(&z, &z))
}

/// `‖BᵀPB‖²_F` at flat weights `theta`.
pub fn curv_penalty_at(spec: &NetworkSpec, theta: &[f64], sample: &Sample) -> Result<f64> {
    let ws = WeightSet::unflatten(spec, theta)?;
    let t = forward_unchecked(spec, &ws, sample);
    let gs = gamma(&t, spec);
    let b = ws.u.mul(&alpha_unchecked(&gs, &ws, spec.n(), 0));
    let xi = b.transpose().mul(&d2fdp2(&t).mul(&b));
    Ok(xi.dot(&xi))
}

/// Convenience: both regularizers for one sample.
pub fn regularizers(hf: &HessianFactors) -> Result<(GradRegResult, CurvRegResult)> {
    let ls = lambda(hf.trace, hf.spec);
    let d3 = d3fdp3(hf.trace);
    Ok((grad_reg(hf, &ls)?, curv_reg(hf, &ls, &d3)?))
}

/// Flattens `(du, dw)` in the parameter layout.
pub fn flatten_derivs(du: &Mat, dw: &[Mat]) -> Vec<f64> {
    let mut out = du.as_slice().to_vec();
    for m in dw {
        out.extend_from_slice(m.as_slice());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{fd_grad, fd_hess, fd_jacobian, kink_guard, max_abs_err, max_rel_err, FdConfig, FdTarget};
    use crate::net::{forward, softmax, ActKind};
    use crate::rng::Rng;

    fn setup(dims: Vec<usize>, c: usize, act: ActKind, seed: u64) -> (NetworkSpec, WeightSet, Sample, ForwardTrace) {
        let spec = NetworkSpec::new(dims, c, act).unwrap();
        let mut rng = Rng::new(seed);
        loop {
            let ws = WeightSet::random(&spec, &mut rng, 1.0);
            let s = Sample::random(&spec, &mut rng);
            let t = forward(&spec, &ws, &s).unwrap();
            if act != ActKind::Relu || kink_guard(&t, 1e-3) {
                return (spec, ws, s, t);
            }
        }
    }

    #[test]
    fn zero_head_zeroes_everything() {
        let (spec, mut ws, s, _) = setup(vec![3, 4, 3], 3, ActKind::Tanh, 1);
        ws.u = Mat::zeros(3, 3);
        let t = forward(&spec, &ws, &s).unwrap();
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let (gr, cr) = regularizers(&hf).unwrap();
        assert!(gr.zeta.iter().all(|&z| z == 0.0));
        assert_eq!(gr.penalty, 0.0);
        assert!(gr.dpenalty_dw.iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(cr.xi.max_abs(), 0.0);
        assert_eq!(cr.penalty, 0.0);
        assert!(matches!(perturb_bound(&t, &ws, &spec, 0.1), Err(Error::DegenerateBound)));
    }

    #[test]
    fn grad_reg_derivatives_match_fd() {
        let (spec, ws, s, t) = setup(vec![3, 4, 3], 3, ActKind::Tanh, 2);
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let (gr, _) = regularizers(&hf).unwrap();
        let fd = fd_grad(|th| grad_penalty_at(&spec, th, &s), &ws.flatten(), &FdConfig::default()).unwrap();
        let an = flatten_derivs(&gr.dpenalty_du, &gr.dpenalty_dw);
        assert!(max_rel_err(&an, &fd) <= 1e-5, "{}", max_rel_err(&an, &fd));
    }

    #[test]
    fn curv_reg_derivatives_match_fd() {
        for (i, act) in [ActKind::Tanh, ActKind::Sigmoid].into_iter().enumerate() {
            let (spec, ws, s, t) = setup(vec![3, 4, 3], 3, act, 3 + i as u64);
            let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
            let (_, cr) = regularizers(&hf).unwrap();
            assert!(cr.xi.asymmetry() <= 1e-10);
            let fd = fd_grad(|th| curv_penalty_at(&spec, th, &s), &ws.flatten(), &FdConfig::default()).unwrap();
            let an = flatten_derivs(&cr.dpenalty_du, &cr.dpenalty_dw);
            assert!(max_rel_err(&an, &fd) <= 1e-4, "{act:?}: {}", max_rel_err(&an, &fd));
        }
    }

    #[test]
    fn directional_derivative_consistency() {
        let (spec, ws, s, t) = setup(vec![3, 4, 4, 3], 3, ActKind::Softplus, 4);
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let (gr, _) = regularizers(&hf).unwrap();
        let an = flatten_derivs(&gr.dpenalty_du, &gr.dpenalty_dw);
        let mut rng = Rng::new(5);
        let dir: Vec<f64> = (0..an.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let th = ws.flatten();
        let line = |e: &[f64]| {
            let x: Vec<f64> = th.iter().zip(&dir).map(|(a, d)| a + e[0] * d).collect();
            grad_penalty_at(&spec, &x, &s)
        };
        let fd = fd_grad(line, &[0.0], &FdConfig::default()).unwrap()[0];
        let want = dot(&an, &dir);
        assert!((fd - want).abs() <= 1e-5 * want.abs().max(1.0));
    }

    #[test]
    fn xi_is_input_hessian_on_relu() {
        let (spec, ws, s, t) = setup(vec![4, 5, 4], 3, ActKind::Relu, 6);
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let (_, cr) = regularizers(&hf).unwrap();
        let f = |x: &[f64]| {
            let sx = Sample { x: x.to_vec(), y: s.y.clone() };
            Ok(forward_unchecked(&spec, &ws, &sx).f)
        };
        let fd = fd_hess(FdTarget::Value(&f), &s.x, &FdConfig::second_of_value()).unwrap();
        assert!(max_abs_err(cr.xi.as_slice(), fd.as_slice()) <= 1e-5);
    }

    #[test]
    fn full_input_hessian_on_tanh() {
        let (spec, ws, s, t) = setup(vec![4, 5, 4], 3, ActKind::Tanh, 7);
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let ls = lambda(&t, &spec);
        let h = input_hessian(&hf, &ls);
        let g = |x: &[f64]| {
            let sx = Sample { x: x.to_vec(), y: s.y.clone() };
            Ok(grad_input(&forward_unchecked(&spec, &ws, &sx), &ws, &spec, &sx))
        };
        let fd = fd_hess(FdTarget::Gradient(&g), &s.x, &FdConfig::second_of_gradient()).unwrap();
        assert!(max_abs_err(h.as_slice(), fd.as_slice()) <= 1e-6);
        // ξ alone misses the λ terms on a smooth net.
        let (_, cr) = regularizers(&hf).unwrap();
        assert!(cr.xi.sub(&h).max_abs() > 1e-6);
    }

    #[test]
    fn bound_jacobian_and_linear_model() {
        let (spec, ws, s, t) = setup(vec![4, 5, 3], 3, ActKind::Tanh, 8);
        let pb = PerturbBound::new(&t, &ws, &spec).unwrap();
        let fd = fd_jacobian(
            |x| {
                let sx = Sample { x: x.to_vec(), y: s.y.clone() };
                Ok(softmax(&forward_unchecked(&spec, &ws, &sx).p))
            },
            &s.x,
            &FdConfig::default(),
        )
        .unwrap();
        assert!(max_abs_err(pb.jac.as_slice(), fd.as_slice()) <= 1e-6);
        let dy = 0.05;
        let bound = pb.bound(dy).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let dir: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let scale = rng.next_f64() * bound / crate::linalg::norm(&dir);
            let dx: Vec<f64> = dir.iter().map(|d| d * scale).collect();
            let lin = crate::linalg::norm(&pb.jac.matvec(&dx));
            assert!(lin <= dy + 1e-12);
        }
        assert!(pb.bound(-1.0).is_err());
    }
}
