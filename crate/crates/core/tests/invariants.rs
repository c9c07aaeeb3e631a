use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng as _;

use orthode::adversary::{apply_attack, AttackSpec, FnGradient};
use orthode::layers::{cayley_orthogonalize, groupsort_forward, relu_forward, KernelWeights, Layer, OrthoConv, PlainConv};
use orthode::lipschitz::{empirical_lipschitz, gronwall_certify, lipschitz_upper_bound, spectral_norm_conv};
use orthode::numerics::{circular_conv, conv_transpose, fft2, ifft2, Complex};
use orthode::odeint::{integrate, non_intersection_check, DynamicsField, SolverConfig, TimeMode, VectorField};
use orthode::reference;
use orthode::rng::{stream, Purpose, Rng};
use orthode::{ComplexMatrix, Tensor};

fn rng(seed: u64) -> Rng {
    stream(seed, Purpose::Test, 0)
}

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn kernel(rng: &mut Rng, c_out: usize, c_in: usize, k: usize, scale: f64) -> KernelWeights<f64> {
    KernelWeights::new(uniform(rng, &[c_out, c_in, k, k], scale)).unwrap()
}

fn ortho_dense(w: &KernelWeights<f64>, h: usize) -> DMatrix<f64> {
    let op = cayley_orthogonalize(w, (h, h)).unwrap();
    let n_in = op.c_in() * h * h;
    let n_out = op.c_out() * h * h;
    let mut m = DMatrix::zeros(n_out, n_in);
    for j in 0..n_in {
        let mut e = Tensor::zeros(&[1, op.c_in(), h, h]);
        e.data_mut()[j] = 1.0;
        for (i, &v) in op.apply(&e).unwrap().data().iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

fn random_dynamics(rng: &mut Rng, c: usize, h: usize, ortho: bool) -> DynamicsField<f64> {
    let conv = |rng: &mut Rng| -> Layer<f64> {
        let w = kernel(rng, c, c, 3, 0.4);
        if ortho {
            Layer::OrthoConv(OrthoConv::new(w, (h, h)).unwrap())
        } else {
            Layer::PlainConv(PlainConv::new(w, None, (h, h)).unwrap())
        }
    };
    let first = conv(rng);
    let second = conv(rng);
    DynamicsField::new(vec![first, Layer::GroupSort, second], TimeMode::Autonomous)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fft_round_trip(h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
        let x = uniform(&mut rng(seed), &[h, w], 1.0);
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        let err = back.real_part().sub(&x).unwrap().max_abs().max(back.max_imag());
        prop_assert!(err < 1e-10, "{h}x{w}: {err}");
    }

    #[test]
    fn fft_convolution_equals_direct_sum(
        c_in in 1usize..=3, c_out in 1usize..=3, h in 1usize..=7, w in 1usize..=7,
        k in prop::sample::select(vec![1usize, 3]), seed in any::<u64>(),
    ) {
        let k = if h.min(w) < k { 1 } else { k };
        let mut r = rng(seed);
        let x = uniform(&mut r, &[2, c_in, h, w], 1.0);
        let kw = uniform(&mut r, &[c_out, c_in, k, k], 1.0);
        let fast = circular_conv(&x, &kw).unwrap();
        let slow = reference::direct_circular_conv(&x, &kw);
        prop_assert!(fast.sub(&slow).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn conv_transpose_is_the_adjoint(
        c_in in 1usize..=3, c_out in 1usize..=3, h in 3usize..=7, w in 3usize..=7, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, c_in, h, w], 1.0);
        let y = uniform(&mut r, &[1, c_out, h, w], 1.0);
        let kw = uniform(&mut r, &[c_out, c_in, 3, 3], 1.0);
        let lhs = circular_conv(&x, &kw).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_transpose(&y, &kw).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn complex_inverse_multiplies_back(n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = ComplexMatrix::from_fn(n, n, |i, j| {
            let base = Complex::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            if i == j { base + Complex::new(2.0 * n as f64, 0.0) } else { base }
        });
        let prod = m.matmul(&m.inverse().unwrap()).unwrap();
        prop_assert!(prod.max_abs_diff(&ComplexMatrix::identity(n)) < 1e-10);
    }

    #[test]
    fn square_cayley_conv_preserves_norms(
        c in 1usize..=4, h in 1usize..=8, w in 1usize..=8, k in prop::sample::select(vec![1usize, 3]),
        scale in 0.01f64..2.0, seed in any::<u64>(),
    ) {
        let k = if h.min(w) < k { 1 } else { k };
        let mut r = rng(seed);
        let op = cayley_orthogonalize(&kernel(&mut r, c, c, k, scale), (h, w)).unwrap();
        let x = uniform(&mut r, &[2, c, h, w], 1.0);
        let ratio = op.apply(&x).unwrap().norm2() / x.norm2();
        prop_assert!((ratio - 1.0).abs() < 1e-5, "{ratio}");
    }

    #[test]
    fn wide_cayley_conv_contracts(
        c_out in 1usize..=3, extra in 1usize..=2, h in 3usize..=6, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let c_in = c_out + extra;
        let op = cayley_orthogonalize(&kernel(&mut r, c_out, c_in, 3, 1.0), (h, h)).unwrap();
        let x = uniform(&mut r, &[1, c_in, h, h], 1.0);
        prop_assert!(op.apply(&x).unwrap().norm2() <= x.norm2() * (1.0 + 1e-5));
    }

    #[test]
    fn activations_are_one_lipschitz(c in 1usize..=5, n in 1usize..=4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[n, c, 3, 3], 2.0);
        let b = uniform(&mut r, &[n, c, 3, 3], 2.0);
        let gap = a.sub(&b).unwrap().norm2();
        for act in [relu_forward::<f64>, groupsort_forward::<f64>] {
            let out = act(&a).unwrap().0.sub(&act(&b).unwrap().0).unwrap().norm2();
            prop_assert!(out <= gap * (1.0 + 1e-12));
        }
    }

    #[test]
    fn spectral_norm_matches_dense_svd(
        c_out in 1usize..=3, c_in in 1usize..=3, h in 3usize..=6, w in 3usize..=6, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let kw = kernel(&mut r, c_out, c_in, 3, 1.0);
        let dense = reference::dense_conv_matrix(&kw.values, h, w);
        let truth = reference::singular_values(&dense).into_iter().fold(0.0, f64::max);
        let fast = spectral_norm_conv(&kw, (h, w)).unwrap();
        prop_assert!((fast - truth).abs() < 1e-8, "{fast} vs {truth}");
    }

    #[test]
    fn plain_dynamics_bound_scales_with_kernels(alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_dynamics(&mut r, 2, 4, false);
        let mut scaled = f.clone();
        for layer in &mut scaled.layers {
            if let Layer::PlainConv(c) = layer {
                c.weights.values = c.weights.values.scale(alpha);
                c.refresh().unwrap();
            }
        }
        let expected = lipschitz_upper_bound(&f).unwrap() * alpha * alpha;
        let got = lipschitz_upper_bound(&scaled).unwrap();
        prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + expected));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cayley_operator_matches_dense_cayley(c in 1usize..=3, h in 3usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let kw = kernel(&mut r, c, c, 3, 0.5);
        let conv = reference::dense_conv_matrix(&kw.values, h, h);
        let expected = reference::dense_cayley(&(&conv - conv.transpose()));
        let diff = (ortho_dense(&kw, h) - expected).abs().max();
        prop_assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn lipschitz_sandwich_and_gronwall_hold(ortho in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, h) = (2, 4);
        let f = random_dynamics(&mut r, c, h, ortho);
        let pairs: Vec<_> = (0..6)
            .map(|_| (uniform(&mut r, &[1, c, h, h], 1.0), uniform(&mut r, &[1, c, h, h], 1.0)))
            .collect();
        let upper = lipschitz_upper_bound(&f).unwrap();
        let lower = empirical_lipschitz(|x| f.eval(0.0, x), &pairs).unwrap();
        prop_assert!(lower <= upper * (1.0 + 1e-6), "{lower} > {upper}");
        let report = gronwall_certify(&f, &SolverConfig::default(), &pairs, upper).unwrap();
        prop_assert!(!report.violated, "ratio {}", report.max_ratio);
    }

    #[test]
    fn trajectories_are_deterministic_and_disjoint(ortho in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = random_dynamics(&mut r, 2, 3, ortho);
        let a = uniform(&mut r, &[1, 2, 3, 3], 1.0);
        let b = uniform(&mut r, &[1, 2, 3, 3], 1.0);
        let cfg = SolverConfig::adaptive(1e-6, 1e-8);
        let first = integrate(&f, &a, &cfg).unwrap();
        let second = integrate(&f, &a, &cfg).unwrap();
        prop_assert_eq!(&first.states, &second.states);
        prop_assert_eq!(&first.times, &second.times);
        let report = non_intersection_check(&f, &a, &b, &cfg).unwrap();
        prop_assert!(!report.merged && report.min_distance > 0.0);
    }

    #[test]
    fn attacks_stay_in_budget(eps in 0.0f64..0.5, steps in 1usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[3, 1, 4, 4], |_| r.gen_range(0.0..1.0));
        let weights = uniform(&mut r, &[16], 1.0);
        // Loss sin(w . x) per sample; its gradient changes sign across the box.
        let model = FnGradient(|x: &Tensor<f64>, _: &[usize]| {
            let mut g = Tensor::zeros(x.shape());
            let mut loss = 0.0;
            for s in 0..x.batch() {
                let dot: f64 = x.sample(s).iter().zip(weights.data()).map(|(a, b)| a * b).sum();
                loss += dot.sin();
                for (gi, wi) in g.sample_mut(s).iter_mut().zip(weights.data()) {
                    *gi = dot.cos() * wi;
                }
            }
            Ok((loss, g))
        });
        let specs = [
            AttackSpec::fgsm(eps),
            AttackSpec { steps, ..AttackSpec::pgd(eps) },
            AttackSpec::gaussian(eps),
        ];
        for spec in &specs {
            let adv = apply_attack(&model, &x, &[0, 0, 0], spec, seed, 0).unwrap();
            prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if spec.kind != orthode::adversary::AttackKind::Gaussian {
                prop_assert!(adv.sub(&x).unwrap().max_abs() <= eps + 1e-12);
            }
            let again = apply_attack(&model, &x, &[0, 0, 0], spec, seed, 0).unwrap();
            prop_assert_eq!(adv, again);
        }
    }
}
