use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::model::ModelConfig;
use crate::params::ParamGroup;
use crate::synth::{generate_benchmark, BenchmarkConfig};

/// `L(x) = (x - target)^2` on a single scalar parameter `x`.
struct Parabola {
    target: f64,
}

impl Objective for Parabola {
    fn loss_and_grad(
        &self,
        params: &ParameterStore,
        trainable: &[String],
    ) -> Result<(f64, GradientVector), MetaError> {
        let x = params.require("x")?.item();
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::scalar(2.0 * (x - self.target)));
        Ok(((x - self.target).powi(2), GradientVector::from_tensors(trainable, &g)?))
    }
}

struct Poisoned;

impl Objective for Poisoned {
    fn loss_and_grad(
        &self,
        params: &ParameterStore,
        trainable: &[String],
    ) -> Result<(f64, GradientVector), MetaError> {
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::scalar(f64::NAN));
        let _ = params;
        Ok((1.0, GradientVector::from_tensors(trainable, &g)?))
    }
}

fn scalar_store(x: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("x", Tensor::scalar(x));
    s.insert("frozen", Tensor::scalar(7.0));
    s
}

fn x_of(s: &ParameterStore) -> f64 {
    s.get("x").unwrap().item()
}

fn names() -> Vec<String> {
    vec!["x".to_string()]
}

#[test]
fn inner_and_outer_steps_on_a_parabola() {
    let f = Parabola { target: 2.0 };
    let site = StepSite::default();
    let theta = scalar_store(0.0);
    let (adapted, loss) = inner_step(&theta, &f, &names(), 0.1, site).unwrap();
    assert!((x_of(&adapted) - 0.4).abs() < 1e-15);
    assert_eq!(loss, 4.0);
    let (task, _) = outer_step(&adapted, &f, &names(), 0.1, site).unwrap();
    assert!((x_of(&task) - 0.72).abs() < 1e-15);
    // inputs untouched; untrained entries carried over
    assert_eq!(x_of(&theta), 0.0);
    assert_eq!(task.get("frozen").unwrap().item(), 7.0);
}

#[test]
fn zero_rate_and_stationary_points_leave_parameters() {
    let f = Parabola { target: 2.0 };
    let site = StepSite::default();
    let theta = scalar_store(0.3);
    let (a, _) = inner_step(&theta, &f, &names(), 0.0, site).unwrap();
    assert_eq!(a, theta);
    let (b, _) = outer_step(&theta, &f, &names(), 0.0, site).unwrap();
    assert_eq!(b, theta);
    let at_min = scalar_store(2.0);
    let (c, loss) = inner_step(&at_min, &f, &names(), 0.5, site).unwrap();
    assert_eq!(c, at_min);
    assert_eq!(loss, 0.0);
}

#[test]
fn outer_on_the_support_set_is_a_second_inner_step() {
    let f = Parabola { target: -1.0 };
    let site = StepSite::default();
    let theta = scalar_store(0.7);
    let (a, _) = inner_step(&theta, &f, &names(), 0.05, site).unwrap();
    let (b, _) = outer_step(&a, &f, &names(), 0.05, site).unwrap();
    let (a2, _) = inner_step(&a, &f, &names(), 0.05, site).unwrap();
    assert_eq!(b, a2);
}

#[test]
fn nan_gradient_aborts_with_the_site() {
    let site = StepSite {
        epoch: 3,
        batch: 2,
        task: 4,
    };
    let err = inner_step(&scalar_store(0.0), &Poisoned, &names(), 0.1, site).unwrap_err();
    assert_eq!(
        err,
        MetaError::NonFinite {
            what: "support gradient",
            epoch: 3,
            batch: 2,
            task: 4
        }
    );
}

fn sgd_update(theta: f64, tasks: &[f64], beta: f64) -> f64 {
    let task_stores: Vec<ParameterStore> = tasks.iter().map(|&t| scalar_store(t)).collect();
    let out = meta_update(
        &scalar_store(theta),
        &task_stores,
        &names(),
        beta,
        &mut MetaOptimizer::Sgd,
    )
    .unwrap();
    x_of(&out)
}

#[test]
fn meta_update_examples() {
    assert_eq!(sgd_update(0.0, &[1.0, 3.0], 0.5), 1.0);
    assert_eq!(sgd_update(0.1, &[0.1, 0.1, 0.1], 0.3), 0.1);
    assert_eq!(sgd_update(0.2, &[0.123_456_789], 1.0), 0.123_456_789);
    let err = meta_update(&scalar_store(0.0), &[], &names(), 0.5, &mut MetaOptimizer::Sgd);
    assert_eq!(err, Err(MetaError::EmptyUpdate));
}

#[test]
fn adam_meta_update_has_the_same_fixed_point() {
    let theta = scalar_store(0.25);
    let mut opt = MetaOptimizer::new(MetaOptimizerKind::Adam);
    let out = meta_update(&theta, &[theta.clone(), theta.clone()], &names(), 0.01, &mut opt).unwrap();
    assert_eq!(out, theta);
    // moves toward the task mean by about beta on the first step
    let mut opt = MetaOptimizer::new(MetaOptimizerKind::Adam);
    let out = meta_update(&theta, &[scalar_store(1.0)], &names(), 0.01, &mut opt).unwrap();
    assert!((x_of(&out) - 0.26).abs() < 1e-6);
}

proptest! {
    // Dyadic inputs keep every intermediate exact, so the identity must hold
    // bit for bit.
    #[test]
    fn meta_update_is_linear_on_dyadic_values(
        theta in -512i32..512,
        tasks in proptest::collection::vec(-512i32..512, 1..5),
        shift in 0u32..4,
    ) {
        let k = tasks.len();
        prop_assume!(k.is_power_of_two());
        let beta = 1.0 / f64::from(1u32 << shift);
        let th = f64::from(theta) / 64.0;
        let ts: Vec<f64> = tasks.iter().map(|&t| f64::from(t) / 64.0).collect();
        let mean = ts.iter().sum::<f64>() / k as f64;
        prop_assert_eq!(sgd_update(th, &ts, beta), (1.0 - beta) * th + beta * mean);
    }

    #[test]
    fn meta_update_is_linear_on_reals(
        theta in -10.0f64..10.0,
        tasks in proptest::collection::vec(-10.0f64..10.0, 1..6),
        beta in 0.0f64..=1.0,
    ) {
        let mean = tasks.iter().sum::<f64>() / tasks.len() as f64;
        let expected = (1.0 - beta) * theta + beta * mean;
        let got = sgd_update(theta, &tasks, beta);
        prop_assert!((got - expected).abs() <= 1e-14 * (1.0 + expected.abs()));
    }
}

fn small_dataset() -> Dataset {
    let cfg = BenchmarkConfig {
        meta_contents_per_class: 1,
        eval_contents_per_class: 1,
        ..BenchmarkConfig::default()
    };
    generate_benchmark(&cfg, 11).unwrap()
}

#[test]
fn tasks_follow_the_distortion_types() {
    let ds = small_dataset();
    let cfg = MetaConfig::default();
    let tasks = build_meta_tasks(&ds, &cfg, 0, 1).unwrap();
    assert_eq!(tasks.len(), 6);
    for (i, t) in tasks.iter().enumerate() {
        assert_eq!(t.distortion_type.id(), i);
        assert_eq!((t.support.len(), t.query.len()), (8, 8));
        let s: std::collections::BTreeSet<_> = t.support.iter().map(|p| p.0).collect();
        assert!(t.query.iter().all(|q| !s.contains(&q.0)));
        for &(idx, y) in t.support.iter().chain(&t.query) {
            let r = ds.record(idx);
            assert_eq!(r.distortion_type, t.distortion_type);
            assert_eq!(r.split, Split::MetaTrain);
            assert!((0.0..=1.0).contains(&y));
        }
    }
    assert_eq!(tasks, build_meta_tasks(&ds, &cfg, 0, 1).unwrap());
    assert_ne!(tasks, build_meta_tasks(&ds, &cfg, 0, 2).unwrap());
}

#[test]
fn labels_are_rescaled_per_task() {
    let ds = small_dataset();
    let cfg = MetaConfig {
        support_size: 18,
        query_size: 18,
        ..MetaConfig::default()
    };
    for t in build_meta_tasks(&ds, &cfg, 0, 1).unwrap() {
        let ys: Vec<f64> = t.support.iter().chain(&t.query).map(|p| p.1).collect();
        assert_eq!(ys.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
}

#[test]
fn small_pools_are_rejected() {
    let ds = small_dataset();
    let cfg = MetaConfig {
        support_size: 30,
        query_size: 30,
        ..MetaConfig::default()
    };
    assert!(matches!(
        build_meta_tasks(&ds, &cfg, 0, 1),
        Err(MetaError::TaskTooSmall { need: 60, .. })
    ));
}

#[test]
fn config_bounds_on_k() {
    let ds = small_dataset();
    let init = DualEncoder::init(&ModelConfig::default(), 0).unwrap();
    for k in [0, 7] {
        let cfg = MetaConfig {
            tasks_per_batch: k,
            epochs: 1,
            ..MetaConfig::default()
        };
        assert!(matches!(
            run_meta_pretraining(&ds, &init, &cfg, 0),
            Err(MetaError::Config(_))
        ));
    }
}

#[test]
fn zero_epochs_return_the_initialization() {
    let ds = small_dataset();
    let init = DualEncoder::init(&ModelConfig::default(), 5).unwrap();
    let cfg = MetaConfig {
        epochs: 0,
        ..MetaConfig::default()
    };
    let run = run_meta_pretraining(&ds, &init, &cfg, 0).unwrap();
    assert_eq!(run.model, init);
    assert!(run.log.is_empty());
}

#[test]
fn training_is_deterministic_and_touches_only_prompts() {
    let ds = small_dataset();
    let init = DualEncoder::init(&ModelConfig::default(), 5).unwrap();
    let cfg = MetaConfig {
        epochs: 2,
        tasks_per_batch: 4,
        ..MetaConfig::default()
    };
    let a = run_meta_pretraining(&ds, &init, &cfg, 9).unwrap();
    let b = run_meta_pretraining(&ds, &init, &cfg, 9).unwrap();
    assert_eq!(a, b);
    // 6 tasks in batches of 4: two batches per epoch
    assert_eq!(a.log.len(), 2 * 6);
    assert_eq!(a.log.iter().map(|r| r.batch).max(), Some(2));
    let encoder = |n: &str| ParamGroup::of(n) == ParamGroup::Encoder;
    assert_eq!(a.model.params.checksum(encoder), init.params.checksum(encoder));
    for name in init.meta_trainable() {
        assert_ne!(a.model.params.get(&name), init.params.get(&name), "{name}");
    }
}
