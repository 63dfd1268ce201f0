//! Central finite differences. Shares nothing with the analytic code beyond
//! the forward pass handed in by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdMode {
    Central1st,
    Central2ndOfGradient,
    Central2ndOfValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    pub step: f64,
    pub mode: FdMode,
    pub kink_margin: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            mode: FdMode::Central1st,
            kink_margin: 1e-3,
        }
    }
}

impl FdConfig {
    /// Defaults for 4-point second differences of a value.
    pub fn second_of_value() -> Self {
        FdConfig {
            step: 1e-4,
            mode: FdMode::Central2ndOfValue,
            ..Default::default()
        }
    }

    pub fn second_of_gradient() -> Self {
        FdConfig {
            mode: FdMode::Central2ndOfGradient,
            ..Default::default()
        }
    }

    pub fn with_step(self, step: f64) -> Self {
        FdConfig { step, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Validation(format!("fd step must be > 0, got {}", self.step)));
        }
        if !(self.kink_margin >= 0.0 && self.kink_margin.is_finite()) {
            return Err(Error::Validation(format!(
                "kink margin must be >= 0, got {}",
                self.kink_margin
            )));
        }
        Ok(())
    }
}

fn step_for(cfg: &FdConfig, theta_i: f64) -> f64 {
    cfg.step * theta_i.abs().max(1.0)
}

fn finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Oracle(format!("non-finite evaluation: {x}")))
    }
}

/// Central-difference gradient of a scalar function.
pub fn fd_grad<F>(eval: F, theta: &[f64], cfg: &FdConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let mut th = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = step_for(cfg, theta[i]);
        th[i] = theta[i] + h;
        let fp = finite(eval(&th)?)?;
        th[i] = theta[i] - h;
        let fm = finite(eval(&th)?)?;
        th[i] = theta[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector function; row `i` is output `i`.
pub fn fd_jacobian<F>(eval: F, theta: &[f64], cfg: &FdConfig) -> Result<Mat>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut th = theta.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let h = step_for(cfg, theta[j]);
        th[j] = theta[j] + h;
        let gp = eval(&th)?;
        th[j] = theta[j] - h;
        let gm = eval(&th)?;
        th[j] = theta[j];
        if gp.len() != gm.len() {
            return Err(Error::Oracle("output length changed under perturbation".into()));
        }
        let col = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| finite((a - b) / (2.0 * h)))
            .collect::<Result<Vec<_>>>()?;
        cols.push(col);
    }
    let rows = cols.first().map_or(0, Vec::len);
    Ok(Mat::from_fn(rows, theta.len(), |i, j| cols[j][i]))
}

/// What `fd_hess` differentiates.
pub enum FdTarget<'a> {
    Value(&'a dyn Fn(&[f64]) -> Result<f64>),
    Gradient(&'a dyn Fn(&[f64]) -> Result<Vec<f64>>),
}

/// Hessian by central differences. A gradient target is differentiated once
/// (column `j` from perturbing `θⱼ`); a value target uses 4-point second
/// differences. The result is not symmetrized.
pub fn fd_hess(target: FdTarget<'_>, theta: &[f64], cfg: &FdConfig) -> Result<Mat> {
    cfg.validate()?;
    match target {
        FdTarget::Gradient(g) => fd_jacobian(g, theta, cfg),
        FdTarget::Value(f) => hess_of_value(f, theta, cfg),
    }
}

fn hess_of_value(f: &dyn Fn(&[f64]) -> Result<f64>, theta: &[f64], cfg: &FdConfig) -> Result<Mat> {
    let p = theta.len();
    let mut th = theta.to_vec();
    let mut h = Mat::zeros(p, p);
    let f0 = finite(f(theta)?)?;
    for i in 0..p {
        let hi = step_for(cfg, theta[i]);
        th[i] = theta[i] + 2.0 * hi;
        let fpp = finite(f(&th)?)?;
        th[i] = theta[i] - 2.0 * hi;
        let fmm = finite(f(&th)?)?;
        th[i] = theta[i];
        h[(i, i)] = (fpp - 2.0 * f0 + fmm) / (4.0 * hi * hi);
        for j in (i + 1)..p {
            let hj = step_for(cfg, theta[j]);
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                th[i] = theta[i] + si * hi;
                th[j] = theta[j] + sj * hj;
                let v = finite(f(&th)?);
                th[i] = theta[i];
                th[j] = theta[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Accept iff every preactivation is farther than `margin` from zero.
/// A zero margin accepts everything.
pub fn kink_guard(trace: &ForwardTrace, margin: f64) -> bool {
    margin == 0.0 || trace.min_abs_preactivation() > margin
}

/// `|a − b| / max(1e-12, |a|, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-12f64.max(a.abs()).max(b.abs())
}

/// Coordinate-wise maximum of [`rel_err`]. Panics on length mismatch.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err length mismatch");
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_err length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, ActKind, NetworkSpec, Sample, WeightSet};

    #[test]
    fn quadratic_and_linear() {
        let th = vec![0.3, -1.7, 2.5, 0.0];
        let g = fd_grad(|t| Ok(t.iter().map(|x| x * x).sum()), &th, &FdConfig::default()).unwrap();
        for (a, b) in g.iter().zip(&th) {
            assert!((a - 2.0 * b).abs() <= 1e-10);
        }
        // Pure rounding error here is ulp(f)/2h, so keep |f| well below 1.
        let c = [1.5, -2.0, 0.25, 4.0];
        let small: Vec<f64> = th.iter().map(|x| 0.01 * x).collect();
        let g = fd_grad(|t| Ok(crate::linalg::dot(&c, t)), &small, &FdConfig::default()).unwrap();
        for (a, b) in g.iter().zip(&c) {
            assert!((a - b).abs() <= 1e-11);
        }
    }

    #[test]
    fn quadratic_form_hessian_both_modes() {
        let a = Mat::from_rows(&[&[2.0, 0.5, -1.0], &[0.5, 3.0, 0.25], &[-1.0, 0.25, 1.0]]);
        let th = vec![0.4, -0.2, 1.3];
        let f = |t: &[f64]| Ok(0.5 * crate::linalg::dot(t, &a.matvec(t)));
        let g = |t: &[f64]| Ok(a.matvec(t));
        let hv = fd_hess(FdTarget::Value(&f), &th, &FdConfig::second_of_value()).unwrap();
        let hg = fd_hess(FdTarget::Gradient(&g), &th, &FdConfig::second_of_gradient()).unwrap();
        assert!(hv.sub(&a).max_abs() <= 1e-8);
        assert!(hg.sub(&a).max_abs() <= 1e-8);
    }

    #[test]
    fn polynomial_calibration() {
        // f = Σ θᵢ³ + θ₀θ₁θ₂ ; gradient and Hessian in closed form.
        let f = |t: &[f64]| Ok(t.iter().map(|x| x * x * x).sum::<f64>() + t[0] * t[1] * t[2]);
        let th = vec![0.7, -1.2, 0.4];
        let grad = [
            3.0 * th[0] * th[0] + th[1] * th[2],
            3.0 * th[1] * th[1] + th[0] * th[2],
            3.0 * th[2] * th[2] + th[0] * th[1],
        ];
        let g = fd_grad(f, &th, &FdConfig::default()).unwrap();
        assert!(max_abs_err(&g, &grad) <= 1e-8);
        let hess = Mat::from_rows(&[
            &[6.0 * th[0], th[2], th[1]],
            &[th[2], 6.0 * th[1], th[0]],
            &[th[1], th[0], 6.0 * th[2]],
        ]);
        let hv = fd_hess(FdTarget::Value(&f), &th, &FdConfig::second_of_value()).unwrap();
        assert!(hv.sub(&hess).max_abs() <= 1e-6);
    }

    #[test]
    fn modes_agree_on_smooth_net() {
        let spec = NetworkSpec::new(vec![3, 3, 2], 2, ActKind::Tanh).unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let ws = WeightSet::random(&spec, &mut rng, 1.0);
        let s = Sample::random(&spec, &mut rng);
        let f = |t: &[f64]| crate::net::loss_at(&spec, t, &s);
        let g = |t: &[f64]| fd_grad(f, t, &FdConfig::default());
        let th = ws.flatten();
        let hv = fd_hess(FdTarget::Value(&f), &th, &FdConfig::second_of_value()).unwrap();
        let hg = fd_hess(FdTarget::Gradient(&g), &th, &FdConfig::default().with_step(1e-4)).unwrap();
        assert!(hv.sub(&hg).max_abs() <= 1e-4);
        assert!(hg.asymmetry() <= 1e-6);
    }

    #[test]
    fn non_finite_is_oracle_error() {
        let r = fd_grad(|_| Ok(f64::NAN), &[1.0], &FdConfig::default());
        assert!(matches!(r, Err(Error::Oracle(_))));
        assert!(FdConfig::default().with_step(0.0).validate().is_err());
    }

    #[test]
    fn kink_guard_cases() {
        let spec = NetworkSpec::new(vec![2, 2], 2, ActKind::Relu).unwrap();
        let ws = WeightSet::zeros(&spec);
        let s = Sample::with_label(vec![1.0, 1.0], 0, 2).unwrap();
        let t = forward(&spec, &ws, &s).unwrap();
        assert!(!kink_guard(&t, 1e-3));
        assert!(kink_guard(&t, 0.0));
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(rel_err(1e-13, 0.0), 0.1);
    }
}
