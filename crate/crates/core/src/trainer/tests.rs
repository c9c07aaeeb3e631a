use super::*;
use crate::dataio::synthetic_blobs;
use crate::odeint::{Method, SolverConfig, TimeMode};
use rand::Rng as _;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        pre_channels: vec![2, 4],
        pool_stages: 1,
        ..ModelSpec::default()
    }
}

fn tiny(arch: ArchKind, spec: &ModelSpec) -> NodeModel<f64> {
    NodeModel::build(arch, spec, (1, 8, 8), 3, &SolverConfig::fixed(Method::Rk4, 3), 11).unwrap()
}

fn flat_params<T: Real>(m: &NodeModel<T>) -> Vec<T> {
    m.layers().iter().flat_map(|l| l.params().into_iter().flat_map(|p| p.data().to_vec())).collect()
}

#[test]
fn default_architectures_have_matching_parameter_counts() {
    let spread = parameter_spread(&ModelSpec::default(), (1, 28, 28), 10).unwrap();
    assert!(spread <= 0.10, "spread {spread}");
    let spread = parameter_spread(&tiny_spec(), (1, 8, 8), 3).unwrap();
    assert!(spread <= 0.10, "spread {spread}");
}

#[test]
fn feature_dims_reject_odd_pooling() {
    let spec = ModelSpec::default();
    assert_eq!(spec.feature_dims((1, 28, 28)).unwrap(), (32, 7, 7));
    assert!(matches!(spec.feature_dims((1, 14, 14)), Err(Error::IndivisibleShape { size: 7, .. })));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut time_spec = tiny_spec();
    time_spec.time_mode = TimeMode::TimeChannel;
    let cases = [
        (ArchKind::ResnetBaseline, tiny_spec()),
        (ArchKind::VanillaOde, tiny_spec()),
        (ArchKind::OrthoOde, tiny_spec()),
        (ArchKind::OrthoOde, time_spec),
    ];
    for (arch, spec) in cases {
        let model = tiny(arch, &spec);
        let mut rng = stream(3, Purpose::Test, 0);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let labels = [1, 2];
        let loss = |m: &NodeModel<f64>, x: &Tensor<f64>| cross_entropy(&m.logits(x).unwrap(), &labels).unwrap().0;
        let (_, _, grads) = model.loss_and_grads(&x, &labels, 1.0).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&model, &p) - loss(&model, &m)) / (2.0 * h);
            let an = grads.grad_x.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{arch:?} input {i}: {fd} vs {an}");
        }
        let layers = model.layers();
        for (li, g) in grads.layers.into_iter().enumerate() {
            if layers[li].param_count() == 0 {
                continue;
            }
            let pg = layers[li].param_gradients(g).unwrap();
            for (pi, gt) in pg.iter().enumerate() {
                for e in (0..gt.len()).step_by(5) {
                    let eval = |delta: f64| {
                        let mut mm = model.clone();
                        let mut ls = mm.layers_mut();
                        ls[li].params_mut()[pi].data_mut()[e] += delta;
                        ls[li].refresh().unwrap();
                        loss(&mm, &x)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = gt.data()[e];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(1e-3),
                        "{arch:?} layer {li} param {pi}[{e}]: {fd} vs {an}"
                    );
                }
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synthetic_blobs(8, 3, 0.1, 2).unwrap();
    for arch in ArchKind::ALL {
        let mut model = NodeModel::<f32>::build(arch, &tiny_spec(), (1, 8, 8), 3, &SolverConfig::fixed(Method::Rk4, 2), 4)
            .unwrap();
        let before = flat_params(&model);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(before, flat_params(&model), "{arch:?}");
    }
}

#[test]
fn separable_blobs_are_learned() {
    let data = synthetic_blobs(50, 2, 0.05, 9).unwrap();
    let mut model =
        NodeModel::<f32>::build(ArchKind::OrthoOde, &tiny_spec(), (1, 8, 8), 2, &SolverConfig::fixed(Method::Rk4, 4), 1)
            .unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &cfg).unwrap();
    let (_, acc) = dataset_loss(&model, &data, 50).unwrap();
    assert!(acc >= 99.0, "train accuracy {acc}, curve {:?}", report.loss_curve());
    let curve = report.loss_curve();
    assert!(curve.last().unwrap() <= &(0.5 * curve[0]));
}

#[test]
fn training_is_deterministic_and_thread_count_independent() {
    let data = synthetic_blobs(12, 3, 0.1, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        chunk_size: 3,
        seed: 77,
        augmentation: Augmentation::default(),
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = NodeModel::<f32>::build(
                ArchKind::OrthoOde,
                &tiny_spec(),
                (1, 8, 8),
                3,
                &SolverConfig::fixed(Method::Rk4, 2),
                cfg.seed,
            )
            .unwrap();
            let report = train(&mut model, &data, &cfg).unwrap();
            (flat_params(&model), report.without_timings())
        })
    };
    let (w1, r1) = run(1);
    let (w2, r2) = run(3);
    assert_eq!(w1, w2);
    assert_eq!(r1, r2);
}

#[test]
fn ortho_dynamics_stay_one_lipschitz_through_updates() {
    let data = synthetic_blobs(10, 3, 0.1, 6).unwrap();
    let mut model =
        NodeModel::<f32>::build(ArchKind::OrthoOde, &tiny_spec(), (1, 8, 8), 3, &SolverConfig::fixed(Method::Euler, 2), 8)
            .unwrap();
    let mut opt = Sgd::new(&model, 0.5, 0.9);
    for step in 0..6 {
        let idx: Vec<usize> = (step * 5..step * 5 + 5).collect();
        let (x, y) = data.batch::<f32>(&idx);
        let (_, _, g) = model.loss_and_grads(&x, &y, 1.0).unwrap();
        opt.step(&mut model, g.layers).unwrap();
        let bound = lipschitz_upper_bound(model.dynamics().unwrap()).unwrap();
        assert!((bound - 1.0).abs() < 1e-5, "step {step}: {bound}");
    }
}

#[test]
fn exploding_updates_abort_with_non_finite_loss() {
    let data = synthetic_blobs(10, 2, 0.1, 1).unwrap();
    let mut model =
        NodeModel::<f32>::build(ArchKind::ResnetBaseline, &tiny_spec(), (1, 8, 8), 2, &SolverConfig::default(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        learning_rate: 1e30,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut model, &data, &cfg), Err(Error::NonFiniteLoss { .. })));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let wd = TrainConfig {
        weight_decay: 1e-4,
        ..TrainConfig::default()
    };
    assert!(wd.validate().is_err());
    let lr = TrainConfig {
        learning_rate: -1.0,
        ..TrainConfig::default()
    };
    assert!(lr.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 1, "lr": 0.1}"#).is_err());
}

#[test]
fn checkpoints_round_trip_for_every_architecture() {
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 5) as f32 / 5.0);
    for arch in ArchKind::ALL {
        let model =
            NodeModel::<f32>::build(arch, &tiny_spec(), (1, 8, 8), 3, &SolverConfig::adaptive(1e-3, 1e-5), 21).unwrap();
        let back = NodeModel::<f32>::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(back.arch, arch);
        assert_eq!(back.solver(), model.solver());
        assert_eq!(flat_params(&back), flat_params(&model));
        assert_eq!(back.logits(&x).unwrap(), model.logits(&x).unwrap());
    }
    let mut bytes = NodeModel::<f32>::build(ArchKind::OrthoOde, &tiny_spec(), (1, 8, 8), 3, &SolverConfig::default(), 0)
        .unwrap()
        .to_bytes()
        .unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(NodeModel::<f32>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
}

#[test]
fn trivial_attacks_match_clean_accuracy() {
    let data = synthetic_blobs(10, 3, 0.2, 3).unwrap();
    let model = tiny(ArchKind::OrthoOde, &tiny_spec());
    let report = evaluate(&model, &data, &[AttackSpec::none(), AttackSpec::fgsm(0.0), AttackSpec::pgd(0.0)], 0, 7).unwrap();
    assert_eq!(report.accuracy[0].label, "clean");
    assert_eq!(report.accuracy.len(), 3);
    let clean = report.accuracy[0].accuracy;
    assert!(report.accuracy.iter().all(|r| r.accuracy == clean && (0.0..=100.0).contains(&r.accuracy)));
}

#[test]
fn certificates_bracket_the_body() {
    let data = synthetic_blobs(10, 3, 0.2, 3).unwrap();
    let cfg = CertifyConfig {
        pairs: 12,
        ..CertifyConfig::default()
    };
    for arch in ArchKind::ALL {
        let model = tiny(arch, &tiny_spec());
        let cert = certify(&model, &data, &cfg, 4).unwrap();
        let lip = cert.lipschitz.unwrap();
        assert!(lip.lower <= lip.upper * (1.0 + 1e-9), "{arch:?}: {lip:?}");
        if arch == ArchKind::OrthoOde {
            assert!((lip.upper - 1.0).abs() < 1e-9);
            assert!(!cert.gronwall.unwrap().violated);
        }
    }
    // An untrained vanilla field at the default widths is already expansive.
    let vanilla =
        NodeModel::<f64>::build(ArchKind::VanillaOde, &ModelSpec::default(), (1, 28, 28), 10, &SolverConfig::default(), 0)
            .unwrap();
    let bound = lipschitz_upper_bound(vanilla.dynamics().unwrap()).unwrap();
    assert!(bound > 1.0, "{bound}");
}
