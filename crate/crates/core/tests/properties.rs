use outerprod::arch::rnn::{rnn_forward, rnn_network_derivs, RecurrentSpec, RnnSample, RnnWeights};
use outerprod::factors::{alpha, gamma, grad};
use outerprod::general::{assemble_dense_general, lambda};
use outerprod::hessian::{assemble_dense, hess_uw, hess_wu, hvp, quad_form, Direction, HessianFactors};
use outerprod::linalg::{dot, svd_rank};
use outerprod::net::d3fdp3;
use outerprod::verify::draw_instance;
use outerprod::{forward, ActKind, Mat, NetworkSpec, Rng, Sample};
use proptest::prelude::*;

fn spec_from(seed: u64, act: ActKind) -> (NetworkSpec, Rng) {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(4);
    let dims = (0..=n).map(|_| 2 + rng.below(5)).collect();
    let classes = 2 + rng.below(4);
    (NetworkSpec::new(dims, classes, act).unwrap(), rng)
}

fn acts() -> impl Strategy<Value = ActKind> {
    prop_oneof![Just(ActKind::Relu), Just(ActKind::Tanh), Just(ActKind::Softplus), Just(ActKind::Sigmoid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn per_sample_gradients_rank_one(seed in any::<u64>(), act in acts()) {
        let (spec, mut rng) = spec_from(seed, act);
        let inst = draw_instance(&mut rng, &spec, 0.0).unwrap();
        let hf = HessianFactors::new(&spec, &inst.weights, &inst.trace, &inst.sample).unwrap();
        let g = grad(&inst.trace, &hf.gamma, &hf.eta_top, &inst.weights, &inst.sample);
        prop_assert!(svd_rank(&g.dense_u(), 1e-8).unwrap() <= 1);
        for k in 1..=spec.n() {
            prop_assert!(svd_rank(&g.dense_w(k), 1e-8).unwrap() <= 1);
        }
    }

    #[test]
    fn batch_mean_rank_bounded(seed in any::<u64>(), b in 1usize..6) {
        let (spec, mut rng) = spec_from(seed, ActKind::Tanh);
        let inst = draw_instance(&mut rng, &spec, 0.0).unwrap();
        let mut mean = Mat::zeros(spec.classes, spec.dims[spec.n()]);
        for _ in 0..b {
            let s = Sample::random(&spec, &mut rng);
            let t = forward(&spec, &inst.weights, &s).unwrap();
            let hf = HessianFactors::new(&spec, &inst.weights, &t, &s).unwrap();
            mean.add_assign_scaled(&grad(&t, &hf.gamma, &hf.eta_top, &inst.weights, &s).dense_u(), 1.0 / b as f64);
        }
        let cap = b.min(spec.classes).min(spec.dims[spec.n()]);
        prop_assert!(svd_rank(&mean, 1e-8).unwrap() <= cap);
    }

    #[test]
    fn alpha_composes(seed in any::<u64>(), act in acts()) {
        let (spec, mut rng) = spec_from(seed, act);
        let inst = draw_instance(&mut rng, &spec, 0.0).unwrap();
        let gs = gamma(&inst.trace, &spec);
        let n = spec.n();
        for k in 0..=n {
            for l in 0..=k {
                for m in 0..=l {
                    let lhs = alpha(&gs, &inst.weights, k, l).unwrap().mul(&alpha(&gs, &inst.weights, l, m).unwrap());
                    let rhs = alpha(&gs, &inst.weights, k, m).unwrap();
                    prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * rhs.max_abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn uw_is_transpose_of_wu(seed in any::<u64>()) {
        let (spec, mut rng) = spec_from(seed, ActKind::Relu);
        let inst = draw_instance(&mut rng, &spec, 1e-3).unwrap();
        let hf = HessianFactors::new(&spec, &inst.weights, &inst.trace, &inst.sample).unwrap();
        for k in 1..=spec.n() {
            let a = hess_uw(&hf, k).unwrap().densify();
            let b = hess_wu(&hf, k).unwrap().densify().transpose();
            prop_assert!(a.sub(&b).max_abs() <= 1e-13 * a.max_abs().max(1.0));
        }
    }

    #[test]
    fn quad_form_and_hvp_agree_with_dense(seed in any::<u64>()) {
        let (spec, mut rng) = spec_from(seed, ActKind::Relu);
        let inst = draw_instance(&mut rng, &spec, 1e-3).unwrap();
        let hf = HessianFactors::new(&spec, &inst.weights, &inst.trace, &inst.sample).unwrap();
        let gen = hf.generator();
        let dense = assemble_dense(&hf, &gen, 5000).unwrap();
        let d = Direction::random(&spec, &mut rng);
        let e = Direction::random(&spec, &mut rng);
        let (x, y) = (d.flatten(), e.flatten());
        let want = dense.bilinear(&x, &x);
        let got = quad_form(&hf, &d, &gen).unwrap();
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-12));
        let hx = hvp(&hf, &d, &gen).unwrap().flatten();
        let scale = dense.h.max_abs() * outerprod::linalg::norm(&x) * outerprod::linalg::norm(&y);
        prop_assert!((dot(&hx, &y) - dense.bilinear(&y, &x)).abs() <= 1e-12 * scale.max(1e-12));
        prop_assert!(gen.stats().peak_live < spec.n().max(2));
    }

    #[test]
    fn general_path_reduces_to_relu(seed in any::<u64>()) {
        let (spec, mut rng) = spec_from(seed, ActKind::Relu);
        let inst = draw_instance(&mut rng, &spec, 1e-3).unwrap();
        let hf = HessianFactors::new(&spec, &inst.weights, &inst.trace, &inst.sample).unwrap();
        let gen = hf.generator();
        let ls = lambda(&inst.trace, &spec);
        prop_assert!(ls.skipped());
        let a = assemble_dense_general(&hf, &ls, &gen, 5000).unwrap().h;
        let b = assemble_dense(&hf, &gen, 5000).unwrap().h;
        prop_assert!(a.sub(&b).max_abs() <= 1e-12 * b.max_abs().max(1e-300));
    }

    #[test]
    fn third_derivative_storage_is_cubic(seed in any::<u64>()) {
        let (spec, mut rng) = spec_from(seed, ActKind::Tanh);
        let inst = draw_instance(&mut rng, &spec, 0.0).unwrap();
        let c = spec.classes;
        prop_assert_eq!(d3fdp3(&inst.trace).as_slice().len(), c * c * c);
    }

    #[test]
    fn recurrent_gradient_is_sum_of_untied_steps(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let rs = RecurrentSpec { state: 3, input: 2, classes: 3, steps: 1 + rng.below(5), activation: ActKind::Relu };
        let ws = RnnWeights::random(&rs, &mut rng, 1.0);
        let s = RnnSample::random(&rs, &mut rng);
        let d = rnn_network_derivs(&rs, &ws, &s).unwrap();
        let tr = rnn_forward(&rs, &ws, &s).unwrap();
        // Step r treated as its own layer with a private copy of w and u.
        let g: Vec<f64> = tr.yhat.iter().zip(&s.y).map(|(a, b)| a - b).collect();
        let mut back = ws.z.tmatvec(&g);
        let mut sum_w = Mat::zeros(3, 3);
        let mut sum_u = Mat::zeros(3, 2);
        for r in (1..=rs.steps).rev() {
            let delta: Vec<f64> = back.iter().zip(&tr.pre[r - 1]).map(|(b, z)| b * rs.activation.d1(*z)).collect();
            sum_w.add_assign_scaled(&Mat::outer(&delta, &tr.v[r - 1]), 1.0);
            sum_u.add_assign_scaled(&Mat::outer(&delta, &s.xs[r - 1]), 1.0);
            back = ws.w.tmatvec(&delta);
        }
        prop_assert!(sum_w.sub(&d.grad_w).max_abs() <= 1e-12 * sum_w.max_abs().max(1.0));
        prop_assert!(sum_u.sub(&d.grad_u).max_abs() <= 1e-12 * sum_u.max_abs().max(1.0));
    }
}
