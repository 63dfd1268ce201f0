//! Exact per-sample Hessian of the ReLU network in factored form.
//!
//! With `g = ∂f/∂p`, `P = ∂²f/∂p²`, `q = uᵀg`, `hᵏ = η⁽ⁿ'ᵏ⁾ᵀq` and
//! `Mₖ = u η⁽ⁿ'ᵏ⁾`, the blocks are
//!
//! ```text
//! uu      = Kron{P, vⁿ, vⁿ}
//! u,wᵏ    = Cross{g, η⁽ⁿ'ᵏ⁾, vᵏ⁻¹} + Kron{P Mₖ, vⁿ, vᵏ⁻¹}
//! wᵏ,wʳ   = Kron{Mₖᵀ P Mᵣ, vᵏ⁻¹, vʳ⁻¹}
//!         + CrossT{hʳ, η⁽ʳ⁻¹'ᵏ⁾, vᵏ⁻¹}   if r > k
//!         + Cross{hᵏ, η⁽ᵏ⁻¹'ʳ⁾, vʳ⁻¹}    if r < k
//! ```
//!
//! Interior `η⁽ʳ'ᵏ⁾` come from [`EtaGenerator`]; whole-Hessian routines walk
//! its rows in decreasing `r`, so at most `n − 1` interior matrices are alive.

use serde::Serialize;

use crate::blocks::{BlockTerm, FactoredBlock};
use crate::error::{shape_err, Error, Result};
use crate::factors::{
    eta_stack, full_interior_eta_count, gamma, EtaGenerator, EtaStack, GammaStack,
};
use crate::linalg::{dot, sym_eig, Mat};
use crate::net::{d2fdp2, dfdp, ForwardTrace, NetworkSpec, ParamLayout, Sample, WeightSet};
use crate::rng::Rng;

pub const DEFAULT_DENSE_CAP: usize = 5000;

/// A perturbation of every weight: `ω = Δu`, `φ⁽ᵏ⁾ = Δw⁽ᵏ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub omega: Mat,
    pub phi: Vec<Mat>,
}

impl Direction {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let ws = WeightSet::zeros(spec);
        Direction {
            omega: ws.u,
            phi: ws.w,
        }
    }

    /// Entries uniform in `[-1, 1)`.
    pub fn random(spec: &NetworkSpec, rng: &mut Rng) -> Self {
        let mut d = Direction::zeros(spec);
        for x in d.omega.as_mut_slice() {
            *x = rng.uniform(-1.0, 1.0);
        }
        for m in &mut d.phi {
            for x in m.as_mut_slice() {
                *x = rng.uniform(-1.0, 1.0);
            }
        }
        d
    }

    /// `φ⁽ᵏ⁾`, 1-based.
    pub fn layer(&self, k: usize) -> &Mat {
        &self.phi[k - 1]
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.layout();
        if self.phi.len() != spec.n() {
            return shape_err(format!(
                "direction has {} layers, network has {}",
                self.phi.len(),
                spec.n()
            ));
        }
        let shapes = std::iter::once(&self.omega).chain(&self.phi);
        for (b, m) in shapes.enumerate() {
            let (r, c, _) = layout.blocks[b];
            if m.shape() != (r, c) {
                return shape_err(format!("direction block {b} is {:?}, want ({r}, {c})", m.shape()));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.omega.as_slice().to_vec();
        for m in &self.phi {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        let ws = WeightSet::unflatten(spec, flat)?;
        Ok(Direction {
            omega: ws.u,
            phi: ws.w,
        })
    }

    pub fn scaled(&self, s: f64) -> Direction {
        Direction {
            omega: self.omega.scaled(s),
            phi: self.phi.iter().map(|m| m.scaled(s)).collect(),
        }
    }
}

/// `‖ω‖²_F + Σₖ ‖φ⁽ᵏ⁾‖²_F`, square-rooted.
pub fn direction_norm(d: &Direction) -> f64 {
    let sq = d.omega.dot(&d.omega) + d.phi.iter().map(|m| m.dot(m)).sum::<f64>();
    sq.sqrt()
}

/// Everything needed to evaluate any Hessian block of one sample without
/// weight-indexed dense storage.
#[derive(Debug, Clone)]
pub struct HessianFactors<'a> {
    pub spec: &'a NetworkSpec,
    pub weights: &'a WeightSet,
    pub trace: &'a ForwardTrace,
    pub gamma: GammaStack,
    pub eta_top: EtaStack,
    pub df_dp: Vec<f64>,
    pub d2f_dp2: Mat,
    q: Vec<f64>,
    h: Vec<Vec<f64>>,
    m: Vec<Mat>,
    pm: Vec<Mat>,
}

impl<'a> HessianFactors<'a> {
    pub fn new(
        spec: &'a NetworkSpec,
        weights: &'a WeightSet,
        trace: &'a ForwardTrace,
        sample: &Sample,
    ) -> Result<Self> {
        weights.check(spec)?;
        if trace.n() != spec.n() || sample.y.len() != spec.classes {
            return shape_err("trace or sample does not match the network");
        }
        let gs = gamma(trace, spec);
        let es = eta_stack(&gs, weights, spec);
        let g = dfdp(trace, sample);
        let p = d2fdp2(trace);
        let q = weights.u.tmatvec(&g);
        let n = spec.n();
        let h = (1..=n).map(|k| es.top(k).tmatvec(&q)).collect();
        let m: Vec<Mat> = (1..=n).map(|k| weights.u.mul(es.top(k))).collect();
        let pm = m.iter().map(|mk| p.mul(mk)).collect();
        Ok(HessianFactors {
            spec,
            weights,
            trace,
            gamma: gs,
            eta_top: es,
            df_dp: g,
            d2f_dp2: p,
            q,
            h,
            m,
            pm,
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    /// `uᵀ ∂f/∂p`
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `hᵏ = η⁽ⁿ'ᵏ⁾ᵀ uᵀ ∂f/∂p`
    pub fn h(&self, k: usize) -> &[f64] {
        &self.h[k - 1]
    }

    /// `Mₖ = u η⁽ⁿ'ᵏ⁾`
    pub fn m(&self, k: usize) -> &Mat {
        &self.m[k - 1]
    }

    /// `P Mₖ`
    pub fn pm(&self, k: usize) -> &Mat {
        &self.pm[k - 1]
    }

    /// `v⁽ᵏ⁾`
    pub fn v(&self, k: usize) -> &[f64] {
        &self.trace.v[k]
    }

    pub fn generator(&self) -> EtaGenerator<'_> {
        EtaGenerator::new(&self.gamma, self.weights)
    }

    pub fn layout(&self) -> ParamLayout {
        self.spec.layout()
    }

    fn wshape(&self, k: usize) -> (usize, usize) {
        self.weights.layer(k).shape()
    }

    fn ushape(&self) -> (usize, usize) {
        self.weights.u.shape()
    }

    fn check_layer(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n() {
            return Err(Error::Validation(format!(
                "layer {k} out of range 1..={}",
                self.n()
            )));
        }
        Ok(())
    }

    /// Scalars held by these factors.
    pub fn scalar_count(&self) -> usize {
        self.gamma.scalar_count()
            + self.eta_top.scalar_count()
            + self.df_dp.len()
            + self.d2f_dp2.len()
            + self.q.len()
            + self.h.iter().map(Vec::len).sum::<usize>()
            + self.m.iter().map(Mat::len).sum::<usize>()
            + self.pm.iter().map(Mat::len).sum::<usize>()
            + self.trace.v.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn hess_uu(hf: &HessianFactors) -> FactoredBlock {
    let vn = hf.v(hf.n()).to_vec();
    FactoredBlock::zero(hf.ushape(), hf.ushape()).with(BlockTerm::Kron {
        a: hf.d2f_dp2.clone(),
        x: vn.clone(),
        y: vn,
    })
}

/// Rows `u`, columns `w⁽ᵏ⁾`.
pub fn hess_uw(hf: &HessianFactors, k: usize) -> Result<FactoredBlock> {
    hf.check_layer(k)?;
    let n = hf.n();
    Ok(FactoredBlock::zero(hf.ushape(), hf.wshape(k))
        .with(BlockTerm::Cross {
            a: hf.df_dp.clone(),
            m: hf.eta_top.top(k).clone(),
            y: hf.v(k - 1).to_vec(),
        })
        .with(BlockTerm::Kron {
            a: hf.pm(k).clone(),
            x: hf.v(n).to_vec(),
            y: hf.v(k - 1).to_vec(),
        }))
}

/// Rows `w⁽ᵏ⁾`, columns `u`; derived directly from `∂f/∂w⁽ᵏ⁾ = hᵏ ⊗ vᵏ⁻¹`
/// rather than by transposing [`hess_uw`].
pub fn hess_wu(hf: &HessianFactors, k: usize) -> Result<FactoredBlock> {
    hf.check_layer(k)?;
    let n = hf.n();
    Ok(FactoredBlock::zero(hf.wshape(k), hf.ushape())
        .with(BlockTerm::CrossT {
            a: hf.df_dp.clone(),
            m: hf.eta_top.top(k).clone(),
            x: hf.v(k - 1).to_vec(),
        })
        .with(BlockTerm::Kron {
            a: hf.m(k).transpose().mul(&hf.d2f_dp2),
            x: hf.v(k - 1).to_vec(),
            y: hf.v(n).to_vec(),
        }))
}

/// The term routed through `∂²f/∂p²`, present for every layer pair.
pub fn gauss_newton_ww(hf: &HessianFactors, k: usize, r: usize) -> Result<FactoredBlock> {
    hf.check_layer(k)?;
    hf.check_layer(r)?;
    Ok(
        FactoredBlock::zero(hf.wshape(k), hf.wshape(r)).with(BlockTerm::Kron {
            a: hf.m(k).transpose().mul(hf.pm(r)),
            x: hf.v(k - 1).to_vec(),
            y: hf.v(r - 1).to_vec(),
        }),
    )
}

/// Case term of block `(k, r)` given the interior `η` it needs:
/// `η⁽ʳ⁻¹'ᵏ⁾` when `r > k`, `η⁽ᵏ⁻¹'ʳ⁾` when `r < k`.
fn ww_case_term(hf: &HessianFactors, k: usize, r: usize, interior: &Mat) -> BlockTerm {
    if r > k {
        BlockTerm::CrossT {
            a: hf.h(r).to_vec(),
            m: interior.clone(),
            x: hf.v(k - 1).to_vec(),
        }
    } else {
        BlockTerm::Cross {
            a: hf.h(k).to_vec(),
            m: interior.clone(),
            y: hf.v(r - 1).to_vec(),
        }
    }
}

/// Rows `w⁽ᵏ⁾`, columns `w⁽ʳ⁾`.
pub fn hess_ww(hf: &HessianFactors, k: usize, r: usize, gen: &EtaGenerator) -> Result<FactoredBlock> {
    let mut block = gauss_newton_ww(hf, k, r)?;
    if r != k {
        let (hi, lo) = (k.max(r), k.min(r));
        let eta = gen.interior(hi - 1, lo)?;
        block.push(ww_case_term(hf, k, r, &eta))?;
    }
    Ok(block)
}

/// Dense Hessian over the flat parameter layout.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    pub h: Mat,
    pub index_map: ParamLayout,
    /// Largest `|H[i,j] − H[j,i]|` before symmetrization.
    pub asymmetry: f64,
}

impl DenseHessian {
    /// Pre-symmetrization defect relative to `max|H|`.
    pub fn relative_asymmetry(&self) -> f64 {
        let m = self.h.max_abs();
        if m == 0.0 {
            0.0
        } else {
            self.asymmetry / m
        }
    }

    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, &self.h.matvec(b))
    }

    /// Averages with the transpose and records the defect.
    pub(crate) fn symmetrized(h: Mat, index_map: ParamLayout) -> DenseHessian {
        let asymmetry = h.asymmetry();
        let mut s = h.clone();
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                s[(i, j)] = 0.5 * (h[(i, j)] + h[(j, i)]);
            }
        }
        DenseHessian {
            h: s,
            index_map,
            asymmetry,
        }
    }
}

pub(crate) fn check_cap(p: usize, cap: usize) -> Result<()> {
    if p > cap {
        return Err(Error::Resource {
            what: "dense Hessian parameter count",
            requested: p,
            cap,
        });
    }
    Ok(())
}

/// Densifies every block. Interior η rows are streamed, so the generator's
/// peak stays at `n − 1`.
pub fn assemble_dense(hf: &HessianFactors, gen: &EtaGenerator, cap: usize) -> Result<DenseHessian> {
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
        for r in 1..=n {
            gauss_newton_ww(hf, k, r)?.densify_into(&mut h, off(k), off(r));
        }
    }
    for row in gen.rows_desc() {
        let hi = row.r + 1;
        for lo in 1..=row.r {
            let eta = row.get(lo);
            FactoredBlock::zero(hf.wshape(lo), hf.wshape(hi))
                .with(ww_case_term(hf, lo, hi, eta))
                .densify_into(&mut h, off(lo), off(hi));
            FactoredBlock::zero(hf.wshape(hi), hf.wshape(lo))
                .with(ww_case_term(hf, hi, lo, eta))
                .densify_into(&mut h, off(hi), off(lo));
        }
    }
    Ok(DenseHessian::symmetrized(h, layout))
}

/// `xᵀHx` for `x = d`, evaluated from the factors:
///
/// ```text
/// bₖ  = φ⁽ᵏ⁾ vᵏ⁻¹,   s = Σₖ η⁽ⁿ'ᵏ⁾ bₖ,   Jx = ω vⁿ + u s
/// xᵀHx = JxᵀPJx + 2 gᵀω s + 2 Σ_{k>r} hᵏᵀ φ⁽ᵏ⁾ η⁽ᵏ⁻¹'ʳ⁾ bᵣ
/// ```
///
/// The last sum walks the generator's rows; nothing parameter-squared is
/// allocated.
pub fn quad_form(hf: &HessianFactors, d: &Direction, gen: &EtaGenerator) -> Result<f64> {
    d.check(hf.spec)?;
    let n = hf.n();
    let b: Vec<Vec<f64>> = (1..=n).map(|k| d.layer(k).matvec(hf.v(k - 1))).collect();
    let mut s = vec![0.0; hf.v(n).len()];
    for k in 1..=n {
        let t = hf.eta_top.top(k).matvec(&b[k - 1]);
        s.iter_mut().zip(&t).for_each(|(a, x)| *a += x);
    }
    let mut jx = d.omega.matvec(hf.v(n));
    let us = hf.weights.u.matvec(&s);
    jx.iter_mut().zip(&us).for_each(|(a, x)| *a += x);
    let gn = dot(&jx, &hf.d2f_dp2.matvec(&jx));
    let cross_u = dot(&hf.df_dp, &d.omega.matvec(&s));
    let mut cross_w = 0.0;
    for row in gen.rows_desc() {
        let k = row.r + 1;
        let left = d.layer(k).tmatvec(hf.h(k));
        for r in 1..=row.r {
            cross_w += dot(&left, &row.get(r).matvec(&b[r - 1]));
        }
    }
    Ok(gn + 2.0 * cross_u + 2.0 * cross_w)
}

/// Hessian-vector product `H·d` in direction form.
pub fn hvp(hf: &HessianFactors, d: &Direction, gen: &EtaGenerator) -> Result<Direction> {
    d.check(hf.spec)?;
    let n = hf.n();
    let mut out = Direction::zeros(hf.spec);
    out.omega = hess_uu(hf).apply(&d.omega)?;
    for k in 1..=n {
        out.omega.add_assign_scaled(&hess_uw(hf, k)?.apply(d.layer(k))?, 1.0);
        let mut acc = hess_wu(hf, k)?.apply(&d.omega)?;
        for r in 1..=n {
            acc.add_assign_scaled(&gauss_newton_ww(hf, k, r)?.apply(d.layer(r))?, 1.0);
        }
        out.phi[k - 1] = acc;
    }
    for row in gen.rows_desc() {
        let hi = row.r + 1;
        for lo in 1..=row.r {
            let eta = row.get(lo);
            let up = FactoredBlock::zero(hf.wshape(lo), hf.wshape(hi)).with(ww_case_term(hf, lo, hi, eta));
            out.phi[lo - 1].add_assign_scaled(&up.apply(d.layer(hi))?, 1.0);
            let down = FactoredBlock::zero(hf.wshape(hi), hf.wshape(lo)).with(ww_case_term(hf, hi, lo, eta));
            out.phi[hi - 1].add_assign_scaled(&down.apply(d.layer(lo))?, 1.0);
        }
    }
    Ok(out)
}

/// Smallest Hessian eigenvalue and its unit eigenvector, via dense
/// assembly and Jacobi.
pub fn min_curvature(hf: &HessianFactors, gen: &EtaGenerator, cap: usize) -> Result<(f64, Direction)> {
    let dense = assemble_dense(hf, gen, cap)?;
    min_eigpair(&dense, hf.spec)
}

pub(crate) fn min_eigpair(dense: &DenseHessian, spec: &NetworkSpec) -> Result<(f64, Direction)> {
    let eig = sym_eig(&dense.h)?;
    let v = eig.vectors.col(0);
    Ok((eig.values[0], Direction::from_flat(spec, &v)?))
}

/// Scalar counts of the factored representation versus dense storage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StorageReport {
    pub classes: usize,
    pub d2f_dp2_entries: usize,
    pub d3f_dp3_entries: usize,
    pub eta_top_sizes: Vec<usize>,
    pub streamed_eta_peak: usize,
    pub streamed_eta_peak_scalars: usize,
    pub full_interior_eta: usize,
    pub param_count: usize,
    pub factored_second_order_scalars: usize,
    pub bound_n_plus_2_times_params: usize,
    pub dense_hessian_entries: usize,
}

/// Runs the generator once through all rows to measure its peak.
pub fn storage_report(hf: &HessianFactors) -> StorageReport {
    let gen = hf.generator();
    for row in gen.rows_desc() {
        drop(row);
    }
    let stats = gen.stats();
    let n = hf.n();
    let c = hf.spec.classes;
    let p = hf.spec.param_count();
    StorageReport {
        classes: c,
        d2f_dp2_entries: hf.d2f_dp2.len(),
        d3f_dp3_entries: c * c * c,
        eta_top_sizes: (1..=n).map(|k| hf.eta_top.top(k).len()).collect(),
        streamed_eta_peak: stats.peak_live,
        streamed_eta_peak_scalars: stats.peak_scalars,
        full_interior_eta: full_interior_eta_count(n),
        param_count: p,
        factored_second_order_scalars: hf.scalar_count() + stats.peak_scalars,
        bound_n_plus_2_times_params: (n + 2) * p,
        dense_hessian_entries: p * p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::flat_grad;
    use crate::fd::{fd_hess, kink_guard, max_rel_err, FdConfig, FdTarget};
    use crate::net::{forward, loss_at, ActKind};

    struct Case {
        spec: NetworkSpec,
        ws: WeightSet,
        s: Sample,
        t: ForwardTrace,
    }

    fn relu_case(dims: Vec<usize>, c: usize, seed: u64) -> Case {
        let spec = NetworkSpec::new(dims, c, ActKind::Relu).unwrap();
        let mut rng = Rng::new(seed);
        loop {
            let ws = WeightSet::random(&spec, &mut rng, 1.0);
            let s = Sample::random(&spec, &mut rng);
            let t = forward(&spec, &ws, &s).unwrap();
            if kink_guard(&t, 1e-3) && t.v[spec.n()].iter().any(|&x| x > 0.0) {
                return Case { spec, ws, s, t };
            }
        }
    }

    fn fd_dense(case: &Case) -> Mat {
        let g = |th: &[f64]| flat_grad(&case.spec, th, &case.s);
        fd_hess(FdTarget::Gradient(&g), &case.ws.flatten(), &FdConfig::second_of_gradient()).unwrap()
    }

    fn sub_block(m: &Mat, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
        Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows.start + i, cols.start + j)])
    }

    #[test]
    fn uu_block_at_origin() {
        let spec = NetworkSpec::new(vec![2, 3], 2, ActKind::Relu).unwrap();
        let mut ws = WeightSet::zeros(&spec);
        ws.w[0] = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let s = Sample::with_label(vec![1.0, 0.0], 0, 2).unwrap();
        let t = forward(&spec, &ws, &s).unwrap();
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let d = hess_uu(&hf).densify();
        let mut want = Mat::zeros(6, 6);
        want[(0, 0)] = 0.25;
        want[(0, 3)] = -0.25;
        want[(3, 0)] = -0.25;
        want[(3, 3)] = 0.25;
        assert_eq!(d, want);
    }

    #[test]
    fn zero_hidden_output_gives_zero_uu() {
        let spec = NetworkSpec::new(vec![2, 3], 2, ActKind::Relu).unwrap();
        let ws = WeightSet::zeros(&spec);
        let s = Sample::with_label(vec![1.0, 0.0], 0, 2).unwrap();
        let t = forward(&spec, &ws, &s).unwrap();
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        assert_eq!(hess_uu(&hf).densify().max_abs(), 0.0);
        let gen = hf.generator();
        assert_eq!(assemble_dense(&hf, &gen, DEFAULT_DENSE_CAP).unwrap().h.max_abs(), 0.0);
    }

    #[test]
    fn single_layer_identity_blocks() {
        // n = 1, w = I, every unit active: η⁽¹'¹⁾ = I, so both u,w terms are
        // explicit outer products.
        let spec = NetworkSpec::new(vec![2, 2], 3, ActKind::Relu).unwrap();
        let ws = WeightSet {
            w: vec![Mat::identity(2)],
            u: Mat::from_rows(&[&[0.3, -0.2], &[0.1, 0.4], &[-0.5, 0.2]]),
        };
        let s = Sample::with_label(vec![1.0, 2.0], 2, 3).unwrap();
        let t = forward(&spec, &ws, &s).unwrap();
        let hf = HessianFactors::new(&spec, &ws, &t, &s).unwrap();
        let g = dfdp(&t, &s);
        let p = d2fdp2(&t);
        let x = &s.x;
        let dense = hess_uw(&hf, 1).unwrap().densify();
        let pu = p.mul(&ws.u);
        for i in 0..3 {
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        let delta = if j == a { 1.0 } else { 0.0 };
                        let want = g[i] * delta * x[b] + pu[(i, a)] * x[j] * x[b];
                        assert!((dense[(i * 2 + j, a * 2 + b)] - want).abs() <= 1e-15);
                    }
                }
            }
        }
        let case = Case { spec: spec.clone(), ws: ws.clone(), s: s.clone(), t: t.clone() };
        let fd = fd_dense(&case);
        let layout = spec.layout();
        let fd_block = sub_block(&fd, layout.u_range(), layout.w_range(1));
        assert!(max_rel_err(dense.as_slice(), fd_block.as_slice()) <= 1e-5);
        // r = k only: the ww block is the Gauss-Newton term.
        let gen = hf.generator();
        assert_eq!(hess_ww(&hf, 1, 1, &gen).unwrap().terms.len(), 1);
    }

    #[test]
    fn blocks_match_fd_of_gradient() {
        for seed in 0..3 {
            let case = relu_case(vec![3, 4, 3, 4], 3, 100 + seed);
            let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
            let gen = hf.generator();
            let fd = fd_dense(&case);
            let layout = case.spec.layout();
            let n = case.spec.n();
            let check = |dense: Mat, b1: usize, b2: usize| {
                let want = sub_block(&fd, layout.block_range(b1), layout.block_range(b2));
                let e = max_rel_err(dense.as_slice(), want.as_slice());
                assert!(e <= 1e-5, "block ({b1},{b2}) rel err {e}");
            };
            check(hess_uu(&hf).densify(), 0, 0);
            for k in 1..=n {
                check(hess_uw(&hf, k).unwrap().densify(), 0, k);
                check(hess_wu(&hf, k).unwrap().densify(), k, 0);
                for r in 1..=n {
                    check(hess_ww(&hf, k, r, &gen).unwrap().densify(), k, r);
                }
            }
        }
    }

    #[test]
    fn transposed_blocks_agree() {
        let case = relu_case(vec![3, 4, 3, 2], 3, 7);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gen = hf.generator();
        for k in 1..=3 {
            let uw = hess_uw(&hf, k).unwrap().densify();
            let wu = hess_wu(&hf, k).unwrap().densify();
            assert!(uw.sub(&wu.transpose()).max_abs() <= 1e-14);
            for r in 1..=3 {
                let a = hess_ww(&hf, k, r, &gen).unwrap().densify();
                let b = hess_ww(&hf, r, k, &gen).unwrap().densify();
                assert!(a.sub(&b.transpose()).max_abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn dense_symmetric_and_matches_second_differences() {
        let case = relu_case(vec![3, 4, 2], 3, 21);
        let case60 = relu_case(vec![4, 4, 4, 4], 3, 22);
        assert_eq!(case60.spec.param_count(), 60);
        for c in [&case, &case60] {
            let hf = HessianFactors::new(&c.spec, &c.ws, &c.t, &c.s).unwrap();
            let gen = hf.generator();
            let dense = assemble_dense(&hf, &gen, DEFAULT_DENSE_CAP).unwrap();
            assert!(dense.relative_asymmetry() <= 1e-10);
            assert!(gen.stats().peak_live <= c.spec.n().saturating_sub(1));
            let f = |th: &[f64]| loss_at(&c.spec, th, &c.s);
            let fd = fd_hess(FdTarget::Value(&f), &c.ws.flatten(), &FdConfig::second_of_value()).unwrap();
            assert!(dense.h.sub(&fd).max_abs() <= 1e-4);
        }
    }

    #[test]
    fn dense_cap_enforced() {
        let case = relu_case(vec![3, 4, 3], 3, 1);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gen = hf.generator();
        let err = assemble_dense(&hf, &gen, 10).unwrap_err();
        assert!(matches!(err, Error::Resource { cap: 10, .. }));
    }

    #[test]
    fn quad_form_matches_dense_and_is_quadratic() {
        let case = relu_case(vec![3, 4, 3, 4], 3, 5);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gen = hf.generator();
        let dense = assemble_dense(&hf, &gen, DEFAULT_DENSE_CAP).unwrap();
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let d = Direction::random(&case.spec, &mut rng);
            let q = quad_form(&hf, &d, &gen).unwrap();
            let flat = d.flatten();
            let want = dense.bilinear(&flat, &flat);
            assert!((q - want).abs() <= 1e-10 * want.abs().max(1e-300));
            let q2 = quad_form(&hf, &d.scaled(2.0), &gen).unwrap();
            assert!((q2 - 4.0 * q).abs() <= 1e-12 * q.abs().max(1e-300));
        }
        assert_eq!(quad_form(&hf, &Direction::zeros(&case.spec), &gen).unwrap(), 0.0);
        assert_eq!(gen.live(), 0);
    }

    #[test]
    fn hvp_matches_dense() {
        let case = relu_case(vec![3, 4, 3, 4], 3, 6);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gen = hf.generator();
        let dense = assemble_dense(&hf, &gen, DEFAULT_DENSE_CAP).unwrap();
        let d = Direction::random(&case.spec, &mut Rng::new(3));
        let hv = hvp(&hf, &d, &gen).unwrap().flatten();
        let want = dense.h.matvec(&d.flatten());
        let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in hv.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn direction_norm_cases() {
        let spec = NetworkSpec::new(vec![2, 3], 2, ActKind::Relu).unwrap();
        let mut d = Direction::zeros(&spec);
        assert_eq!(direction_norm(&d), 0.0);
        d.phi[0][(1, 1)] = 1.0;
        assert_eq!(direction_norm(&d), 1.0);
        let d = Direction::random(&spec, &mut Rng::new(4));
        let flat = d.flatten();
        assert!((direction_norm(&d) - dot(&flat, &flat).sqrt()).abs() <= 1e-15);
        assert_eq!(Direction::from_flat(&spec, &flat).unwrap(), d);
    }

    #[test]
    fn min_curvature_matches_eig_and_quad_form() {
        let case = relu_case(vec![3, 4, 3], 3, 9);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gen = hf.generator();
        let (lam, d) = min_curvature(&hf, &gen, DEFAULT_DENSE_CAP).unwrap();
        let dense = assemble_dense(&hf, &gen, DEFAULT_DENSE_CAP).unwrap();
        let eig = sym_eig(&dense.h).unwrap();
        assert!((lam - eig.values[0]).abs() <= 1e-8 * lam.abs());
        assert!((direction_norm(&d) - 1.0).abs() <= 1e-12);
        let q = quad_form(&hf, &d, &gen).unwrap();
        assert!((q - lam).abs() <= 1e-8 * lam.abs());
    }

    #[test]
    fn single_layer_gauss_newton_is_psd() {
        let case = relu_case(vec![3, 4], 3, 12);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let gn = gauss_newton_ww(&hf, 1, 1).unwrap().densify();
        let eig = sym_eig(&DenseHessian::symmetrized(gn, hf.layout()).h).unwrap();
        assert!(eig.values[0] >= -1e-10);
    }

    #[test]
    fn storage_counts() {
        let case = relu_case(vec![4, 6, 6, 6, 6], 10, 2);
        let hf = HessianFactors::new(&case.spec, &case.ws, &case.t, &case.s).unwrap();
        let rep = storage_report(&hf);
        assert_eq!(rep.d2f_dp2_entries, 100);
        assert_eq!(rep.d3f_dp3_entries, 1000);
        assert_eq!(rep.streamed_eta_peak, 3);
        assert_eq!(rep.full_interior_eta, 6);
        assert_eq!(rep.eta_top_sizes, vec![36; 4]);
        assert!(rep.factored_second_order_scalars <= rep.bound_n_plus_2_times_params);
    }
}
