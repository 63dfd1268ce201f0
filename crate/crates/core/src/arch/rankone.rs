//! Rank-one weights: `u = a bᵀ`, `w⁽ᵏ⁾ = cᵏ eᵏᵀ`.
//!
//! Every factor gradient is a scalar times a vector, and both come from
//! quantities the full-rank gradient already has.

use crate::error::{shape_err, Result};
use crate::factors::{eta_stack, gamma};
use crate::linalg::{dot, Mat};
use crate::net::{dfdp, forward, NetworkSpec, Sample, WeightSet};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RankOneWeights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `c[k − 1]`, length `dims[k]`
    pub c: Vec<Vec<f64>>,
    /// `e[k − 1]`, length `dims[k − 1]`
    pub e: Vec<Vec<f64>>,
}

impl RankOneWeights {
    pub fn random(spec: &NetworkSpec, rng: &mut Rng) -> Self {
        let mut v = |len: usize| -> Vec<f64> {
            let s = 1.0 / (len as f64).sqrt();
            (0..len).map(|_| s.sqrt() * rng.normal()).collect()
        };
        let n = spec.n();
        RankOneWeights {
            a: v(spec.classes),
            b: v(spec.dims[n]),
            c: (1..=n).map(|k| v(spec.dims[k])).collect(),
            e: (1..=n).map(|k| v(spec.dims[k - 1])).collect(),
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        let n = spec.n();
        let ok = self.a.len() == spec.classes
            && self.b.len() == spec.dims[n]
            && self.c.len() == n
            && self.e.len() == n
            && (1..=n).all(|k| self.c[k - 1].len() == spec.dims[k] && self.e[k - 1].len() == spec.dims[k - 1]);
        if !ok {
            return shape_err("rank-one factors do not match the network");
        }
        Ok(())
    }

    pub fn expand(&self) -> WeightSet {
        WeightSet {
            w: self.c.iter().zip(&self.e).map(|(c, e)| Mat::outer(c, e)).collect(),
            u: Mat::outer(&self.a, &self.b),
        }
    }

    /// `a, b, c¹, e¹, …, cⁿ, eⁿ`
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.a.clone();
        out.extend_from_slice(&self.b);
        for (c, e) in self.c.iter().zip(&self.e) {
            out.extend_from_slice(c);
            out.extend_from_slice(e);
        }
        out
    }

    pub fn unflatten(spec: &NetworkSpec, theta: &[f64]) -> Result<Self> {
        let n = spec.n();
        let want = spec.classes + spec.dims[n] + (1..=n).map(|k| spec.dims[k] + spec.dims[k - 1]).sum::<usize>();
        if theta.len() != want {
            return shape_err(format!("expected {want} factor entries, got {}", theta.len()));
        }
        let mut rest = theta;
        let mut take = |len: usize| {
            let (h, t) = rest.split_at(len);
            rest = t;
            h.to_vec()
        };
        let a = take(spec.classes);
        let b = take(spec.dims[n]);
        let mut c = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for k in 1..=n {
            c.push(take(spec.dims[k]));
            e.push(take(spec.dims[k - 1]));
        }
        Ok(RankOneWeights { a, b, c, e })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledVec {
    pub scalar: f64,
    pub vector: Vec<f64>,
}

impl ScaledVec {
    pub fn to_vec(&self) -> Vec<f64> {
        self.vector.iter().map(|x| self.scalar * x).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOneGrads {
    pub da: ScaledVec,
    pub db: ScaledVec,
    pub dc: Vec<ScaledVec>,
    pub de: Vec<ScaledVec>,
}

impl RankOneGrads {
    /// Same order as [`RankOneWeights::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.da.to_vec();
        out.extend(self.db.to_vec());
        for (c, e) in self.dc.iter().zip(&self.de) {
            out.extend(c.to_vec());
            out.extend(e.to_vec());
        }
        out
    }
}

pub fn rankone_grads(spec: &NetworkSpec, rw: &RankOneWeights, sample: &Sample) -> Result<RankOneGrads> {
    rw.check(spec)?;
    let ws = rw.expand();
    let tr = forward(spec, &ws, sample)?;
    let gs = gamma(&tr, spec);
    let es = eta_stack(&gs, &ws, spec);
    let g = dfdp(&tr, sample);
    let n = spec.n();
    let vn = &tr.v[n];
    let ga = dot(&g, &rw.a);
    let mut dc = Vec::with_capacity(n);
    let mut de = Vec::with_capacity(n);
    for k in 1..=n {
        let etb = es.top(k).tmatvec(&rw.b);
        let c = &rw.c[k - 1];
        let e = &rw.e[k - 1];
        let vp = &tr.v[k - 1];
        dc.push(ScaledVec { scalar: dot(vp, e), vector: etb.iter().map(|x| ga * x).collect() });
        de.push(ScaledVec { scalar: ga * dot(&etb, c), vector: vp.clone() });
    }
    Ok(RankOneGrads {
        da: ScaledVec { scalar: dot(vn, &rw.b), vector: g.clone() },
        db: ScaledVec { scalar: ga, vector: vn.clone() },
        dc,
        de,
    })
}

/// Loss as a function of the flattened factors.
pub fn rankone_loss_at(spec: &NetworkSpec, theta: &[f64], sample: &Sample) -> Result<f64> {
    let rw = RankOneWeights::unflatten(spec, theta)?;
    Ok(forward(spec, &rw.expand(), sample)?.f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::grad;
    use crate::fd::{fd_grad, max_rel_err, FdConfig};
    use crate::linalg::norm;
    use crate::net::ActKind;

    fn case(seed: u64) -> (NetworkSpec, RankOneWeights, Sample) {
        let spec = NetworkSpec::new(vec![4, 3, 5], 3, ActKind::Relu).unwrap();
        let mut rng = Rng::new(seed);
        loop {
            let rw = RankOneWeights::random(&spec, &mut rng);
            let s = Sample::random(&spec, &mut rng);
            let tr = forward(&spec, &rw.expand(), &s).unwrap();
            if tr.min_abs_preactivation() > 1e-3 && tr.v[2].iter().any(|&x| x > 0.0) {
                return (spec, rw, s);
            }
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let (spec, rw, _) = case(1);
        assert_eq!(RankOneWeights::unflatten(&spec, &rw.flatten()).unwrap(), rw);
        assert!(RankOneWeights::unflatten(&spec, &[0.0; 3]).is_err());
    }

    #[test]
    fn grads_match_fd() {
        for seed in 0..5 {
            let (spec, rw, s) = case(seed);
            let an = rankone_grads(&spec, &rw, &s).unwrap().flatten();
            let fd = fd_grad(|t| rankone_loss_at(&spec, t, &s), &rw.flatten(), &FdConfig::default()).unwrap();
            assert!(max_rel_err(&an, &fd) <= 1e-6, "seed {seed}");
            let cos = dot(&an, &fd) / (norm(&an) * norm(&fd));
            assert!(cos >= 1.0 - 1e-8);
        }
    }

    #[test]
    fn b_orthogonal_to_last_activation_zeroes_da() {
        let (spec, mut rw, s) = case(3);
        let vn = forward(&spec, &rw.expand(), &s).unwrap().v[2].clone();
        let k = dot(&rw.b, &vn) / dot(&vn, &vn);
        for (b, v) in rw.b.iter_mut().zip(&vn) {
            *b -= k * v;
        }
        let r = rankone_grads(&spec, &rw, &s).unwrap();
        assert!(r.da.scalar.abs() <= 1e-14);
        assert!(r.da.to_vec().iter().all(|x| x.abs() <= 1e-14));
    }

    #[test]
    fn grads_are_projections_of_full_gradient() {
        let (spec, rw, s) = case(7);
        let ws = rw.expand();
        let tr = forward(&spec, &ws, &s).unwrap();
        let gs = gamma(&tr, &spec);
        let es = eta_stack(&gs, &ws, &spec);
        let full = grad(&tr, &gs, &es, &ws, &s);
        let r = rankone_grads(&spec, &rw, &s).unwrap();
        let du = full.dense_u();
        let da = du.matvec(&rw.b);
        assert!(max_rel_err(&da, &r.da.to_vec()) <= 1e-12);
        for k in 1..=2 {
            let dw = full.dense_w(k);
            assert!(max_rel_err(&dw.matvec(&rw.e[k - 1]), &r.dc[k - 1].to_vec()) <= 1e-12);
            assert!(max_rel_err(&dw.tmatvec(&rw.c[k - 1]), &r.de[k - 1].to_vec()) <= 1e-12);
        }
    }
}
