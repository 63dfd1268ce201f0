//! Verification suites: each draws random instances from one seed, runs the
//! analytic path against an independent oracle and returns named records.
//!
//! A record passes iff `value <= tolerance`. Records with the same name from
//! different instances are merged by taking the largest value.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::arch::conv::{conv_derivs, conv_forward, ConvSpec};
use crate::arch::rankone::{rankone_grads, rankone_loss_at, RankOneWeights};
use crate::arch::rnn::{
    rnn_forward, rnn_layer_derivs, rnn_layer_state, rnn_loss_at, rnn_network_derivs,
    single_step_as_feedforward, RecurrentSpec, RnnSample, RnnWeights,
};
use crate::error::{Error, Result};
use crate::factors::{flat_grad, full_interior_eta_count, grad, grad_input};
use crate::fd::{fd_grad, fd_hess, fd_jacobian, kink_guard, max_abs_err, max_rel_err, rel_err, FdConfig, FdTarget};
use crate::general::{assemble_dense_general, lambda};
use crate::hessian::{
    assemble_dense, gauss_newton_ww, hess_uu, hess_uw, hess_wu, hess_ww, hvp, min_curvature,
    quad_form, storage_report, Direction, HessianFactors, DEFAULT_DENSE_CAP,
};
use crate::linalg::{dot, norm, svd_rank, sym_eig, Mat};
use crate::net::{forward, loss_at, softmax, ActKind, ForwardTrace, NetworkSpec, Sample, WeightSet};
use crate::reg::{
    curv_penalty_at, flatten_derivs, grad_penalty_at, input_hessian, perturb_bound, regularizers,
    PerturbBound,
};
use crate::blocks::BlockTerm;
use crate::rng::Rng;

pub const SUITES: &[&str] = &[
    "grad",
    "hess",
    "hess-general",
    "quadform",
    "curvature",
    "rank",
    "storage",
    "reg",
    "bound",
    "rnn",
    "conv",
    "rankone",
];

/// Draws before giving up on finding a point that clears the kink guard.
pub const KINK_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub counters: BTreeMap<String, f64>,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckRecord {
            name: name.into(),
            value,
            tolerance,
            counters: BTreeMap::new(),
        }
    }

    pub fn counter(mut self, key: &str, v: f64) -> Self {
        self.counters.insert(key.to_string(), v);
        self
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

/// Runs independent jobs; results come back in job order.
pub trait Executor: Sync {
    fn run(&self, jobs: usize, f: &(dyn Fn(usize) -> Result<Vec<CheckRecord>> + Sync)) -> Vec<Result<Vec<CheckRecord>>>;
}

pub struct Sequential;

impl Executor for Sequential {
    fn run(&self, jobs: usize, f: &(dyn Fn(usize) -> Result<Vec<CheckRecord>> + Sync)) -> Vec<Result<Vec<CheckRecord>>> {
        (0..jobs).map(f).collect()
    }
}

/// Counts allocations of at least `min_bytes` made by the calling thread
/// between `start` and `stop`.
pub trait AllocProbe: Sync {
    fn start(&self, min_bytes: usize);
    fn stop(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchSource {
    Fixed(NetworkSpec),
    /// `n` in `1..=max_layers`, every width in `2..=max_dim`, classes in
    /// `2..=max_classes`; `activation` applies where a suite leaves it open.
    Random {
        max_layers: usize,
        max_dim: usize,
        max_classes: usize,
        activation: ActKind,
    },
}

impl ArchSource {
    pub fn draw(&self, rng: &mut Rng, activation: ActKind) -> Result<NetworkSpec> {
        match self {
            ArchSource::Fixed(s) => Ok(s.with_activation(activation)),
            ArchSource::Random { max_layers, max_dim, max_classes, .. } => {
                let n = 1 + rng.below(*max_layers);
                let dims = (0..=n).map(|_| 2 + rng.below(max_dim - 1)).collect();
                let classes = 2 + rng.below(max_classes - 1);
                NetworkSpec::new(dims, classes, activation)
            }
        }
    }

    /// Activation used where a suite does not force one.
    pub fn default_activation(&self) -> ActKind {
        match self {
            ArchSource::Fixed(s) => s.activation,
            ArchSource::Random { activation, .. } => *activation,
        }
    }

    fn smooth_activation(&self) -> ActKind {
        let a = self.default_activation();
        if a.is_piecewise_linear() {
            ActKind::Tanh
        } else {
            a
        }
    }
}

pub struct VerifyCtx<'a> {
    pub arch: ArchSource,
    pub instances: usize,
    pub seed: u64,
    pub dense_cap: usize,
    pub first: FdConfig,
    pub second_grad: FdConfig,
    pub second_value: FdConfig,
    pub exec: &'a dyn Executor,
    pub probe: Option<&'a dyn AllocProbe>,
}

impl<'a> VerifyCtx<'a> {
    pub fn new(arch: ArchSource, instances: usize, seed: u64) -> Self {
        VerifyCtx {
            arch,
            instances,
            seed,
            dense_cap: DEFAULT_DENSE_CAP,
            first: FdConfig::default(),
            second_grad: FdConfig::second_of_gradient(),
            second_value: FdConfig::second_of_value(),
            exec: &Sequential,
            probe: None,
        }
    }

    /// Overrides the step of every FD mode and the kink margin.
    pub fn with_fd(mut self, step: Option<f64>, kink_margin: Option<f64>) -> Result<Self> {
        for c in [&mut self.first, &mut self.second_grad, &mut self.second_value] {
            if let Some(s) = step {
                c.step = s;
            }
            if let Some(m) = kink_margin {
                c.kink_margin = m;
            }
            c.validate()?;
        }
        Ok(self)
    }

    fn margin(&self) -> f64 {
        self.first.kink_margin
    }

    /// One independent generator per job, drawn in order.
    fn job_rngs(&self, suite: &str) -> Vec<Rng> {
        let salt = suite.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut master = Rng::new(self.seed ^ salt);
        (0..self.instances.max(1)).map(|_| master.fork()).collect()
    }

    fn run_jobs(&self, suite: &str, job: impl Fn(usize, Rng) -> Result<Vec<CheckRecord>> + Sync) -> Result<Vec<CheckRecord>> {
        let rngs = self.job_rngs(suite);
        let f = |i: usize| job(i, rngs[i].clone());
        let parts = self.exec.run(rngs.len(), &f);
        let mut all = Vec::with_capacity(parts.len());
        for p in parts {
            all.push(p?);
        }
        Ok(merge(all))
    }
}

/// Merges per-job records by name in order of first appearance. Values take
/// the max (NaN wins); counters named `max_*` or `peak_*` take the max, the
/// rest are summed.
pub fn merge(parts: Vec<Vec<CheckRecord>>) -> Vec<CheckRecord> {
    let mut out: Vec<CheckRecord> = Vec::new();
    for rec in parts.into_iter().flatten() {
        match out.iter_mut().find(|r| r.name == rec.name) {
            None => out.push(rec),
            Some(cur) => {
                if rec.value.is_nan() || rec.value > cur.value {
                    cur.value = rec.value;
                }
                for (k, v) in rec.counters {
                    let e = cur.counters.entry(k.clone()).or_insert(if is_max_key(&k) { v } else { 0.0 });
                    if is_max_key(&k) {
                        *e = e.max(v);
                    } else {
                        *e += v;
                    }
                }
            }
        }
    }
    out
}

fn is_max_key(k: &str) -> bool {
    k.starts_with("max_") || k.starts_with("peak_")
}

pub fn run_suite(name: &str, ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    match name {
        "grad" => suite_grad(ctx),
        "hess" => suite_hess(ctx),
        "hess-general" => suite_hess_general(ctx),
        "quadform" => suite_quadform(ctx),
        "curvature" => suite_curvature(ctx),
        "rank" => suite_rank(ctx),
        "storage" => suite_storage(ctx),
        "reg" => suite_reg(ctx),
        "bound" => suite_bound(ctx),
        "rnn" => suite_rnn(ctx),
        "conv" => suite_conv(ctx),
        "rankone" => suite_rankone(ctx),
        other => Err(Error::Validation(format!("unknown suite {other:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: NetworkSpec,
    pub weights: WeightSet,
    pub sample: Sample,
    pub trace: ForwardTrace,
    /// Draws needed to clear the kink guard (1 when no guard applies).
    pub attempts: usize,
}

impl Instance {
    fn counters(&self, rec: CheckRecord) -> CheckRecord {
        rec.counter("instances", 1.0)
            .counter("kink_draws", self.attempts as f64)
            .counter("max_params", self.spec.param_count() as f64)
    }
}

/// Random weights and sample for `spec`; piecewise-linear nets are redrawn
/// until the kink guard accepts.
pub fn draw_instance(rng: &mut Rng, spec: &NetworkSpec, margin: f64) -> Result<Instance> {
    for attempt in 1..=KINK_ATTEMPTS {
        let weights = WeightSet::random(spec, rng, 1.0);
        let sample = Sample::random(spec, rng);
        let trace = forward(spec, &weights, &sample)?;
        if !spec.activation.is_piecewise_linear() || kink_guard(&trace, margin) {
            return Ok(Instance {
                spec: spec.clone(),
                weights,
                sample,
                trace,
                attempts: attempt,
            });
        }
    }
    Err(Error::Oracle(format!("kink guard rejected {KINK_ATTEMPTS} draws")))
}

fn fresh(ctx: &VerifyCtx, rng: &mut Rng, act: ActKind) -> Result<Instance> {
    let spec = ctx.arch.draw(rng, act)?;
    draw_instance(rng, &spec, ctx.margin())
}

/// Coordinate-wise relative error, with the absolute error kept as a counter.
fn fd_record(name: &str, analytic: &[f64], fd: &[f64], tol: f64) -> CheckRecord {
    CheckRecord::new(name, max_rel_err(analytic, fd), tol).counter("max_abs_err", max_abs_err(analytic, fd))
}

fn submatrix(m: &Mat, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows.start + i, cols.start + j)])
}

/// `max|a − b| / max|b|`, for comparing two analytic paths at roundoff level.
fn normwise(a: &Mat, b: &Mat) -> f64 {
    let d = a.sub(b).max_abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.max_abs().max(1e-300)
    }
}

pub fn suite_grad(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("grad", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ctx.arch.default_activation())?;
        let theta = inst.weights.flatten();
        let an = flat_grad(&inst.spec, &theta, &inst.sample)?;
        let fd = fd_grad(|t| loss_at(&inst.spec, t, &inst.sample), &theta, &ctx.first)?;
        Ok(vec![inst.counters(fd_record("grad/fd", &an, &fd, 1e-6))])
    })
}

fn fd_hessian(ctx: &VerifyCtx, inst: &Instance) -> Result<Mat> {
    let g = |t: &[f64]| flat_grad(&inst.spec, t, &inst.sample);
    fd_hess(FdTarget::Gradient(&g), &inst.weights.flatten(), &ctx.second_grad)
}

pub fn suite_hess(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("hess", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ActKind::Relu)?;
        let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
        let gen = hf.generator();
        let fd = fd_hessian(ctx, &inst)?;
        let layout = hf.layout();
        let n = hf.n();
        let (mut worst, mut abs) = (0.0f64, 0.0f64);
        let mut blocks = 0;
        for a in 0..=n {
            for b in 0..=n {
                let blk = match (a, b) {
                    (0, 0) => hess_uu(&hf),
                    (0, k) => hess_uw(&hf, k)?,
                    (k, 0) => hess_wu(&hf, k)?,
                    (k, r) => hess_ww(&hf, k, r, &gen)?,
                };
                let want = submatrix(&fd, layout.block_range(a), layout.block_range(b));
                let got = blk.densify();
                worst = worst.max(max_rel_err(got.as_slice(), want.as_slice()));
                abs = abs.max(max_abs_err(got.as_slice(), want.as_slice()));
                blocks += 1;
            }
        }
        let dense = assemble_dense(&hf, &gen, ctx.dense_cap)?;
        Ok(vec![
            inst.counters(CheckRecord::new("hess/blocks_fd", worst, 1e-5))
                .counter("blocks", blocks as f64)
                .counter("max_abs_err", abs),
            CheckRecord::new("hess/symmetry", dense.relative_asymmetry(), 1e-10)
                .counter("peak_streamed_eta", gen.stats().peak_live as f64),
        ])
    })
}

const SMOOTH: [ActKind; 3] = [ActKind::Tanh, ActKind::Softplus, ActKind::Sigmoid];

pub fn suite_hess_general(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("hess-general", |i, mut rng| {
        let act = SMOOTH[i % SMOOTH.len()];
        let inst = fresh(ctx, &mut rng, act)?;
        let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
        let gen = hf.generator();
        let ls = lambda(&inst.trace, &inst.spec);
        let dense = assemble_dense_general(&hf, &ls, &gen, ctx.dense_cap)?;
        let fd = fd_hessian(ctx, &inst)?;

        let relu = draw_instance(&mut rng, &inst.spec.with_activation(ActKind::Relu), ctx.margin())?;
        let hr = HessianFactors::new(&relu.spec, &relu.weights, &relu.trace, &relu.sample)?;
        let gr = hr.generator();
        let lr = lambda(&relu.trace, &relu.spec);
        let via_general = assemble_dense_general(&hr, &lr, &gr, ctx.dense_cap)?;
        let via_relu = assemble_dense(&hr, &gr, ctx.dense_cap)?;
        Ok(vec![
            inst.counters(fd_record("hess-general/fd", dense.h.as_slice(), fd.as_slice(), 1e-5))
                .counter(&format!("instances_{}", act.name()), 1.0),
            CheckRecord::new("hess-general/symmetry", dense.relative_asymmetry(), 1e-10),
            CheckRecord::new("hess-general/relu_path_equal", normwise(&via_general.h, &via_relu.h), 1e-12)
                .counter("kink_draws", relu.attempts as f64),
        ])
    })
}

pub const QUADFORM_DIRECTIONS: usize = 100;

pub fn suite_quadform(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("quadform", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ActKind::Relu)?;
        let dirs: Vec<Direction> = (0..QUADFORM_DIRECTIONS).map(|_| Direction::random(&inst.spec, &mut rng)).collect();
        let p = inst.spec.param_count();
        if let Some(probe) = ctx.probe {
            probe.start(p * p * std::mem::size_of::<f64>());
        }
        let factored: Result<Vec<f64>> = (|| {
            let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
            let gen = hf.generator();
            dirs.iter().map(|d| quad_form(&hf, d, &gen)).collect()
        })();
        let big_allocs = ctx.probe.map(|pr| pr.stop());
        let factored = factored?;
        let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
        let dense = assemble_dense(&hf, &hf.generator(), ctx.dense_cap)?;
        let mut worst = 0.0f64;
        for (d, qf) in dirs.iter().zip(&factored) {
            let x = d.flatten();
            worst = worst.max(rel_err(*qf, dense.bilinear(&x, &x)));
        }
        let mut out = vec![inst
            .counters(CheckRecord::new("quadform/dense_bilinear", worst, 1e-10))
            .counter("directions", dirs.len() as f64)];
        if let Some(c) = big_allocs {
            out.push(CheckRecord::new("quadform/pxp_allocations", c as f64, 0.0));
        }
        Ok(out)
    })
}

pub fn suite_curvature(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("curvature", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ActKind::Relu)?;
        let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
        let gen = hf.generator();
        let (lam, dir) = min_curvature(&hf, &gen, ctx.dense_cap)?;
        let dense = assemble_dense(&hf, &gen, ctx.dense_cap)?;
        let eig = sym_eig(&dense.h)?;
        let scale = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let qf = quad_form(&hf, &dir, &gen)?;
        let hd = hvp(&hf, &dir, &gen)?.flatten();
        let d = dir.flatten();
        let resid = norm(&hd.iter().zip(&d).map(|(a, b)| a - lam * b).collect::<Vec<_>>());

        // n = 1: the ww block is Gauss-Newton only.
        let one = NetworkSpec::new(inst.spec.dims[..2].to_vec(), inst.spec.classes, ActKind::Relu)?;
        let small = draw_instance(&mut rng, &one, ctx.margin())?;
        let h1 = HessianFactors::new(&small.spec, &small.weights, &small.trace, &small.sample)?;
        let g1 = h1.generator();
        let ww = hess_ww(&h1, 1, 1, &g1)?;
        let case_terms = ww.terms.iter().filter(|t| !matches!(t, BlockTerm::Kron { .. })).count();
        let gn = gauss_newton_ww(&h1, 1, 1)?.densify();
        let gn_min = sym_eig(&gn)?.values[0];
        Ok(vec![
            inst.counters(CheckRecord::new("curvature/lambda_min", rel_err(lam, eig.values[0]), 1e-8)),
            CheckRecord::new("curvature/quad_form_at_min", (qf - lam).abs() / scale, 1e-8),
            CheckRecord::new("curvature/eig_residual", resid / scale, 1e-8),
            CheckRecord::new("curvature/n1_case_terms", case_terms as f64, 0.0),
            CheckRecord::new("curvature/n1_gauss_newton_min_eig", (-gn_min).max(0.0), 1e-10),
        ])
    })
}

pub const RANK_TOL: f64 = 1e-8;
pub const RANK_BATCH: usize = 3;

pub fn suite_rank(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("rank", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ctx.arch.default_activation())?;
        let spec = &inst.spec;
        let mut samples = vec![inst.sample.clone()];
        while samples.len() < RANK_BATCH {
            samples.push(Sample::random(spec, &mut rng));
        }
        let (mut excess, mut checked, mut zero) = (0usize, 0usize, 0usize);
        let n = spec.n();
        let mut mean: Vec<Mat> = Vec::new();
        for s in &samples {
            let tr = forward(spec, &inst.weights, s)?;
            let hf = HessianFactors::new(spec, &inst.weights, &tr, s)?;
            let g = grad(&tr, &hf.gamma, &hf.eta_top, &inst.weights, s);
            let mats: Vec<Mat> = std::iter::once(g.dense_u()).chain((1..=n).map(|k| g.dense_w(k))).collect();
            for m in &mats {
                if m.max_abs() == 0.0 {
                    zero += 1;
                    continue;
                }
                checked += 1;
                excess = excess.max(svd_rank(m, RANK_TOL)?.abs_diff(1));
            }
            if mean.is_empty() {
                mean = mats.iter().map(|m| m.scaled(1.0 / RANK_BATCH as f64)).collect();
            } else {
                for (acc, m) in mean.iter_mut().zip(&mats) {
                    acc.add_assign_scaled(m, 1.0 / RANK_BATCH as f64);
                }
            }
        }
        let mut batch_max = 0;
        for m in &mean {
            batch_max = batch_max.max(svd_rank(m, RANK_TOL)?);
        }
        Ok(vec![
            inst.counters(CheckRecord::new("rank/per_sample_rank_one", excess as f64, 0.0))
                .counter("checked", checked as f64)
                .counter("skipped_zero", zero as f64),
            CheckRecord::new("rank/batch_rank_excess", batch_max.saturating_sub(RANK_BATCH) as f64, 0.0)
                .counter("max_batch_rank", batch_max as f64),
        ])
    })
}

fn deep_relu(n: usize, width: usize, classes: usize, rng: &mut Rng) -> Result<Instance> {
    let spec = NetworkSpec::new(vec![width; n + 1], classes, ActKind::Relu)?;
    // No FD here, so kinks do not matter.
    draw_instance(rng, &spec, 0.0)
}

pub fn suite_storage(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    let mut rng = ctx.job_rngs("storage").remove(0);
    let mut out = Vec::new();
    let mut peak_err = 0usize;
    let mut ratio = 0.0f64;
    for (n, want) in [(10usize, 45usize), (20, 190)] {
        out.push(CheckRecord::new(
            format!("storage/interior_eta_n{n}"),
            full_interior_eta_count(n).abs_diff(want) as f64,
            0.0,
        ));
        let inst = deep_relu(n, 3, 10, &mut rng)?;
        let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
        let rep = storage_report(&hf);
        peak_err = peak_err.max(rep.streamed_eta_peak.abs_diff(n - 1));
        ratio = ratio.max(rep.factored_second_order_scalars as f64 / rep.bound_n_plus_2_times_params as f64);
        if n == 10 {
            out.push(CheckRecord::new("storage/d2f_dp2_entries_c10", rep.d2f_dp2_entries.abs_diff(100) as f64, 0.0));
        }
    }
    out.push(CheckRecord::new("storage/streamed_peak_n_minus_1", peak_err as f64, 0.0));
    out.push(CheckRecord::new("storage/factored_over_bound", ratio, 1.0));
    let spec = ctx.arch.draw(&mut rng, ActKind::Relu)?;
    let inst = draw_instance(&mut rng, &spec, 0.0)?;
    let hf = HessianFactors::new(&inst.spec, &inst.weights, &inst.trace, &inst.sample)?;
    let rep = storage_report(&hf);
    let mut rec = CheckRecord::new("storage/configured_net", 0.0, 0.0)
        .counter("classes", rep.classes as f64)
        .counter("d2f_dp2_entries", rep.d2f_dp2_entries as f64)
        .counter("d3f_dp3_entries", rep.d3f_dp3_entries as f64)
        .counter("peak_streamed_eta", rep.streamed_eta_peak as f64)
        .counter("peak_streamed_eta_scalars", rep.streamed_eta_peak_scalars as f64)
        .counter("full_interior_eta", rep.full_interior_eta as f64)
        .counter("param_count", rep.param_count as f64)
        .counter("factored_second_order_scalars", rep.factored_second_order_scalars as f64)
        .counter("bound_n_plus_2_times_params", rep.bound_n_plus_2_times_params as f64)
        .counter("dense_hessian_entries", rep.dense_hessian_entries as f64);
    for (k, s) in rep.eta_top_sizes.iter().enumerate() {
        rec = rec.counter(&format!("eta_top_size_{}", k + 1), *s as f64);
    }
    // Informational: on very small nets the C² and C³ terms can exceed (n+2)N.
    rec = rec.counter(
        "within_bound",
        (rep.factored_second_order_scalars <= rep.bound_n_plus_2_times_params) as u8 as f64,
    );
    out.push(rec);
    Ok(out)
}

fn with_x(s: &Sample, x: &[f64]) -> Sample {
    Sample { x: x.to_vec(), y: s.y.clone() }
}

pub fn suite_reg(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("reg", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ctx.arch.smooth_activation())?;
        let (spec, ws, s) = (&inst.spec, &inst.weights, &inst.sample);
        let hf = HessianFactors::new(spec, ws, &inst.trace, s)?;
        let (gr, cr) = regularizers(&hf)?;
        let theta = ws.flatten();
        let zeta_fd = fd_grad(|x| Ok(forward(spec, ws, &with_x(s, x))?.f), &s.x, &ctx.first)?;
        let gpen = fd_grad(|t| grad_penalty_at(spec, t, s), &theta, &ctx.first)?;
        let cpen = fd_grad(|t| curv_penalty_at(spec, t, s), &theta, &ctx.first)?;
        let deriv_err = max_rel_err(&flatten_derivs(&gr.dpenalty_du, &gr.dpenalty_dw), &gpen)
            .max(max_rel_err(&flatten_derivs(&cr.dpenalty_du, &cr.dpenalty_dw), &cpen));
        let gi = |x: &[f64]| {
            let sx = with_x(s, x);
            Ok(grad_input(&forward(spec, ws, &sx)?, ws, spec, &sx))
        };
        let smooth_h = fd_hess(FdTarget::Gradient(&gi), &s.x, &ctx.second_grad)?;
        let ls = lambda(&inst.trace, spec);
        let h_err = max_rel_err(input_hessian(&hf, &ls).as_slice(), smooth_h.as_slice());

        let relu = draw_instance(&mut rng, &spec.with_activation(ActKind::Relu), ctx.margin())?;
        let hr = HessianFactors::new(&relu.spec, &relu.weights, &relu.trace, &relu.sample)?;
        let (_, crr) = regularizers(&hr)?;
        let s2 = &relu.sample;
        let g2 = |x: &[f64]| {
            let sx = with_x(s2, x);
            Ok(grad_input(&forward(&relu.spec, &relu.weights, &sx)?, &relu.weights, &relu.spec, &sx))
        };
        let relu_h = fd_hess(FdTarget::Gradient(&g2), &s2.x, &ctx.second_grad)?;
        Ok(vec![
            inst.counters(fd_record("reg/zeta_fd", &gr.zeta, &zeta_fd, 1e-4)),
            CheckRecord::new("reg/penalty_weight_derivs_fd", deriv_err, 1e-4),
            CheckRecord::new("reg/xi_input_hessian_relu", max_rel_err(crr.xi.as_slice(), relu_h.as_slice()), 1e-5)
                .counter("kink_draws", relu.attempts as f64),
            CheckRecord::new("reg/input_hessian_smooth", h_err, 1e-5),
        ])
    })
}

pub fn suite_bound(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("bound", |_, mut rng| {
        let inst = fresh(ctx, &mut rng, ctx.arch.default_activation())?;
        let (spec, ws, s) = (&inst.spec, &inst.weights, &inst.sample);
        let pb = PerturbBound::new(&inst.trace, ws, spec)?;
        let fd = fd_jacobian(|x| Ok(softmax(&forward(spec, ws, &with_x(s, x))?.p)), &s.x, &ctx.first)?;
        let dy = 0.05;
        let b = pb.bound(dy)?;
        let mut over = 0.0f64;
        for _ in 0..100 {
            let dir: Vec<f64> = (0..s.x.len()).map(|_| rng.normal()).collect();
            let scale = rng.next_f64() * b / norm(&dir);
            let dx: Vec<f64> = dir.iter().map(|d| d * scale).collect();
            over = over.max(norm(&pb.jac.matvec(&dx)) - dy);
        }
        let mut zero = ws.clone();
        zero.u = Mat::zeros(spec.classes, spec.dims[spec.n()]);
        let tz = forward(spec, &zero, s)?;
        let degenerate = matches!(perturb_bound(&tz, &zero, spec, dy), Err(Error::DegenerateBound));
        Ok(vec![
            inst.counters(fd_record("bound/jacobian_fd", pb.jac.as_slice(), fd.as_slice(), 1e-6)),
            CheckRecord::new("bound/linear_model_within", over.max(0.0), 1e-12),
            CheckRecord::new("bound/degenerate_u_zero", (!degenerate) as u8 as f64, 0.0),
        ])
    })
}

pub const RNN_STATE: usize = 3;
pub const RNN_INPUT: usize = 2;
pub const RNN_STEPS: usize = 4;

fn rnn_instance(rs: &RecurrentSpec, rng: &mut Rng, margin: f64) -> Result<(RnnWeights, RnnSample, usize)> {
    for attempt in 1..=KINK_ATTEMPTS {
        let ws = RnnWeights::random(rs, rng, 1.0);
        let s = RnnSample::random(rs, rng);
        if rnn_forward(rs, &ws, &s)?.min_abs_preactivation() > margin {
            return Ok((ws, s, attempt));
        }
    }
    Err(Error::Oracle(format!("kink guard rejected {KINK_ATTEMPTS} recurrent draws")))
}

pub fn suite_rnn(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("rnn", |_, mut rng| {
        let rs = RecurrentSpec {
            state: RNN_STATE,
            input: RNN_INPUT,
            classes: 3,
            steps: RNN_STEPS,
            activation: ActKind::Relu,
        };
        let (ws, s, draws) = rnn_instance(&rs, &mut rng, ctx.margin())?;
        let d = rnn_network_derivs(&rs, &ws, &s)?;
        let theta = ws.flatten();
        let grad_fd = fd_grad(|t| rnn_loss_at(&rs, t, &s), &theta, &ctx.first)?;
        let gfn = |t: &[f64]| Ok(rnn_network_derivs(&rs, &RnnWeights::unflatten(&rs, t)?, &s)?.flat_grad());
        let hfd = fd_hess(FdTarget::Gradient(&gfn), &theta, &ctx.second_grad)?;
        let dense = d.dense();

        // Untied backward sweep, one step at a time.
        let tr = rnn_forward(&rs, &ws, &s)?;
        let g: Vec<f64> = tr.yhat.iter().zip(&s.y).map(|(a, b)| a - b).collect();
        let mut delta = ws.z.tmatvec(&g);
        let mut bw = Mat::zeros(rs.state, rs.state);
        let mut bu = Mat::zeros(rs.state, rs.input);
        for r in (1..=rs.steps).rev() {
            for (dl, z) in delta.iter_mut().zip(&tr.pre[r - 1]) {
                *dl *= rs.activation.d1(*z);
            }
            bw.add_assign_scaled(&Mat::outer(&delta, &tr.v[r - 1]), 1.0);
            bu.add_assign_scaled(&Mat::outer(&delta, &s.xs[r - 1]), 1.0);
            delta = ws.w.tmatvec(&delta);
        }
        let bptt = max_rel_err(bw.as_slice(), d.grad_w.as_slice()).max(max_rel_err(bu.as_slice(), d.grad_u.as_slice()));

        // Single step against the one-hidden-layer feedforward blocks.
        let rs1 = RecurrentSpec { steps: 1, ..rs.clone() };
        let (w1, s1, _) = rnn_instance(&rs1, &mut rng, ctx.margin())?;
        let d1 = rnn_network_derivs(&rs1, &w1, &s1)?;
        let (fspec, fw, fs) = single_step_as_feedforward(&rs1, &w1, &s1)?;
        let ft = forward(&fspec, &fw, &fs)?;
        let hf = HessianFactors::new(&fspec, &fw, &ft, &fs)?;
        let gen = hf.generator();
        let t1 = max_rel_err(d1.zz.densify().as_slice(), hess_uu(&hf).densify().as_slice())
            .max(max_rel_err(d1.zu.densify().as_slice(), hess_uw(&hf, 1)?.densify().as_slice()))
            .max(max_rel_err(d1.uu.densify().as_slice(), hess_ww(&hf, 1, 1, &gen)?.densify().as_slice()));

        // Input-free layer against FD of the unrolled state.
        let lrs = RecurrentSpec { state: 3, input: 3, classes: 2, steps: 3, activation: ActKind::Relu };
        let (lw, lx) = loop {
            let w = Mat::from_fn(3, 3, |_, _| 0.9 * rng.normal());
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let mut v = x.clone();
            let mut ok = true;
            for _ in 0..3 {
                let z = w.matvec(&v);
                ok &= z.iter().all(|a| a.abs() > ctx.margin());
                v = z.iter().map(|a| a.max(0.0)).collect();
            }
            if ok {
                break (w, x);
            }
        };
        let t = lrs.steps;
        let ld = rnn_layer_derivs(&lrs, &lw, &lx, t)?;
        let state = |wf: &[f64], xf: &[f64]| rnn_layer_state(&lrs, &Mat::new(3, 3, wf.to_vec())?, xf, t);
        let mut layer = max_rel_err(fd_jacobian(|wf| state(wf, &lx), lw.as_slice(), &ctx.first)?.as_slice(), ld.dv_dw.as_slice())
            .max(max_rel_err(fd_jacobian(|xf| state(lw.as_slice(), xf), &lx, &ctx.first)?.as_slice(), ld.dv_dx.as_slice()));
        for m in 0..3 {
            let row = |wf: &[f64], xf: &[f64]| {
                Ok(rnn_layer_derivs(&lrs, &Mat::new(3, 3, wf.to_vec())?, xf, t)?.dv_dw.row(m).to_vec())
            };
            let ww = fd_jacobian(|wf| row(wf, &lx), lw.as_slice(), &ctx.first)?;
            let wx = fd_jacobian(|xf| row(lw.as_slice(), xf), &lx, &ctx.first)?;
            layer = layer
                .max(max_rel_err(ww.as_slice(), ld.d2v_dwdw[m].as_slice()))
                .max(max_rel_err(wx.as_slice(), ld.d2v_dwdx[m].as_slice()));
        }
        let xx_zero = ld.d2v_dxdx.iter().map(|m| m.max_abs()).fold(0.0, f64::max);

        Ok(vec![
            fd_record("rnn/network_grad_fd", &d.flat_grad(), &grad_fd, 1e-6)
                .counter("instances", 1.0)
                .counter("kink_draws", draws as f64),
            fd_record("rnn/network_blocks_fd", dense.h.as_slice(), hfd.as_slice(), 1e-5),
            CheckRecord::new("rnn/network_symmetry", dense.relative_asymmetry(), 1e-10),
            CheckRecord::new("rnn/bptt_gradient", bptt, 1e-12),
            CheckRecord::new("rnn/single_step_equals_feedforward", t1, 1e-12),
            CheckRecord::new("rnn/layer_fd", layer, 1e-5),
            CheckRecord::new("rnn/layer_dxdx_zero", xx_zero, 0.0),
        ])
    })
}

/// Kernel, strides, input and activation per conv job; the strided case
/// leaves a border outside every window.
type ConvCase = ((usize, usize), (usize, usize), (usize, usize), ActKind);

const CONV_CASES: [ConvCase; 4] = [
    ((2, 2), (1, 1), (4, 4), ActKind::Tanh),
    ((2, 2), (2, 2), (5, 5), ActKind::Tanh),
    ((3, 2), (1, 2), (5, 6), ActKind::Softplus),
    ((2, 3), (2, 1), (6, 4), ActKind::Sigmoid),
];

fn conv_loop_oracle(cs: &ConvSpec, x: &Mat) -> Result<Mat> {
    let (s_out, t_out) = cs.output_dims()?;
    let (kh, kw) = cs.kernel.shape();
    let mut z = Mat::zeros(s_out, t_out);
    for s in 0..s_out {
        for t in 0..t_out {
            for l in 0..kh {
                for k in 0..kw {
                    z[(s, t)] += cs.kernel[(l, k)] * x[(cs.strides.0 * s + l, cs.strides.1 * t + k)];
                }
            }
        }
    }
    Ok(z)
}

pub fn suite_conv(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("conv", |i, mut rng| {
        let (kd, strides, input, act) = CONV_CASES[i % CONV_CASES.len()];
        let kernel = Mat::from_fn(kd.0, kd.1, |_, _| 0.5 * rng.normal());
        let x = Mat::from_fn(input.0, input.1, |_, _| rng.normal());
        let cs = ConvSpec::new(kernel.clone(), strides, input, act)?;
        let tr = conv_forward(&cs, &x)?;
        let loop_err = max_rel_err(tr.z.as_slice(), conv_loop_oracle(&cs, &x)?.as_slice());
        let d = conv_derivs(&cs, &x, &tr)?;
        let k0 = kernel.as_slice().to_vec();
        let x0 = x.as_slice().to_vec();
        let at = |kf: &[f64], xf: &[f64]| -> Result<(ConvSpec, Mat)> {
            let cs2 = ConvSpec { kernel: Mat::new(kd.0, kd.1, kf.to_vec())?, ..cs.clone() };
            Ok((cs2, Mat::new(input.0, input.1, xf.to_vec())?))
        };
        let v = |kf: &[f64], xf: &[f64]| -> Result<Vec<f64>> {
            let (c2, xm) = at(kf, xf)?;
            Ok(conv_forward(&c2, &xm)?.v.into_vec())
        };
        let mut err = max_rel_err(fd_jacobian(|kf| v(kf, &x0), &k0, &ctx.first)?.as_slice(), d.dv_dw.as_slice())
            .max(max_rel_err(fd_jacobian(|xf| v(&k0, xf), &x0, &ctx.first)?.as_slice(), d.dv_dx.as_slice()));
        for o in 0..d.d2v_dwdw.len() {
            let first = |kf: &[f64], xf: &[f64], wrt_w: bool| -> Result<Vec<f64>> {
                let (c2, xm) = at(kf, xf)?;
                let tr2 = conv_forward(&c2, &xm)?;
                let dd = conv_derivs(&c2, &xm, &tr2)?;
                Ok(if wrt_w { dd.dv_dw.row(o).to_vec() } else { dd.dv_dx.row(o).to_vec() })
            };
            let ww = fd_jacobian(|kf| first(kf, &x0, true), &k0, &ctx.first)?;
            let wx = fd_jacobian(|xf| first(&k0, xf, true), &x0, &ctx.first)?;
            let xx = fd_jacobian(|xf| first(&k0, xf, false), &x0, &ctx.first)?;
            err = err
                .max(max_rel_err(ww.as_slice(), d.d2v_dwdw[o].as_slice()))
                .max(max_rel_err(wx.as_slice(), d.d2v_dwdx[o].as_slice()))
                .max(max_rel_err(xx.as_slice(), d.d2v_dxdx[o].as_slice()));
        }
        Ok(vec![
            CheckRecord::new("conv/families_fd", err, 1e-6).counter("instances", 1.0),
            CheckRecord::new("conv/loop_oracle", loop_err, 1e-14),
        ])
    })
}

pub fn suite_rankone(ctx: &VerifyCtx) -> Result<Vec<CheckRecord>> {
    ctx.run_jobs("rankone", |_, mut rng| {
        let spec = ctx.arch.draw(&mut rng, ctx.arch.default_activation())?;
        let mut attempts = 0;
        let (rw, s) = loop {
            attempts += 1;
            let rw = RankOneWeights::random(&spec, &mut rng);
            let s = Sample::random(&spec, &mut rng);
            let tr = forward(&spec, &rw.expand(), &s)?;
            if !spec.activation.is_piecewise_linear() || kink_guard(&tr, ctx.margin()) {
                break (rw, s);
            }
            if attempts >= KINK_ATTEMPTS {
                return Err(Error::Oracle("kink guard rejected every rank-one draw".into()));
            }
        };
        let g = rankone_grads(&spec, &rw, &s)?;
        let an = g.flatten();
        let fd = fd_grad(|t| rankone_loss_at(&spec, t, &s), &rw.flatten(), &ctx.first)?;
        let fam: Vec<&crate::arch::rankone::ScaledVec> =
            std::iter::once(&g.da).chain(std::iter::once(&g.db)).chain(g.dc.iter().zip(&g.de).flat_map(|(c, e)| [c, e])).collect();
        let mut off = 0;
        let mut worst = 0.0f64;
        let mut parallel = 0;
        for f in fam {
            let len = f.vector.len();
            let piece = &fd[off..off + len];
            off += len;
            let (nf, nv) = (norm(piece), norm(&f.vector));
            if f.scalar == 0.0 || nf == 0.0 || nv == 0.0 {
                continue;
            }
            parallel += 1;
            worst = worst.max(1.0 - dot(piece, &f.vector).abs() / (nf * nv));
        }
        Ok(vec![
            fd_record("rankone/fd", &an, &fd, 1e-6)
                .counter("instances", 1.0)
                .counter("kink_draws", attempts as f64),
            CheckRecord::new("rankone/parallel_to_factor", worst, 1e-12).counter("families", parallel as f64),
        ])
    })
}
