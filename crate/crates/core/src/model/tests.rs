use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;

fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..32 * 32 * 3).map(|_| rng.gen::<f64>()).collect();
    Image::new(32, 32, 3, data)
}

fn model() -> DualEncoder {
    DualEncoder::init(&ModelConfig::default(), 1).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn image_feature_is_unit_norm() {
    let f = model().encode_image(&random_image(3)).unwrap();
    assert_eq!(f.len(), 64);
    assert!((norm(&f) - 1.0).abs() < 1e-9);
}

#[test]
fn prompt_output_is_discarded_each_layer() {
    let (_, trace) = model().encode_image_traced(&random_image(4)).unwrap();
    assert_eq!(trace.len(), 4);
    for t in trace {
        assert_eq!((t.input_len, t.output_len, t.forwarded_len), (18, 18, 17));
    }
}

#[test]
fn image_feature_depends_on_visual_prompt() {
    let m = model();
    let img = random_image(5);
    let base = m.encode_image(&img).unwrap();
    for layer in 0..4 {
        let mut bumped = m.clone();
        bumped
            .params
            .perturb(&names::visual_prompt(layer), 7, 1e-2);
        let f = bumped.encode_image(&img).unwrap();
        let diff: f64 = f.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "layer {layer} prompt has no effect");
    }
}

#[test]
fn wrong_image_shape_is_rejected() {
    let img = Image::filled(16, 16, 3, 0.5);
    assert!(matches!(
        model().encode_image(&img),
        Err(ModelError::ImageShape { .. })
    ));
}

#[test]
fn text_features_are_unit_norm_and_deterministic() {
    let m = model();
    let a = m.encode_text(&TextPrompt::high_quality()).unwrap();
    let b = m.encode_text(&TextPrompt::high_quality()).unwrap();
    assert!((norm(&a) - 1.0).abs() < 1e-9);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let h = m.encode_text(&TextPrompt::class(3)).unwrap();
    assert!((norm(&h) - 1.0).abs() < 1e-9);
}

#[test]
fn empty_token_sequence_is_rejected() {
    assert_eq!(
        model().encode_text(&TextPrompt::Tokens(vec![])),
        Err(ModelError::EmptySequence)
    );
}

#[test]
fn quality_prompts_differ_at_random_init() {
    for seed in 0..10 {
        let cfg = ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        };
        let m = DualEncoder::init(&cfg, seed + 100).unwrap();
        let hi = m.encode_text(&TextPrompt::high_quality()).unwrap();
        let lo = m.encode_text(&TextPrompt::low_quality()).unwrap();
        let cos: f64 = hi.iter().zip(&lo).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-6, "seed {seed}: cos {cos}");
    }
}

#[test]
fn quality_probability_examples() {
    let f = [1.0, 0.0];
    // equal similarities
    assert_eq!(quality_probability(&f, &[0.0, 1.0], &[0.0, -1.0], 0.5).unwrap(), 0.5);
    // sims (1, -1) at tau = 1: e / (e + 1/e)
    let p = quality_probability(&f, &[1.0, 0.0], &[-1.0, 0.0], 1.0).unwrap();
    assert!((p - 0.880_797).abs() < 1e-6);
    let mut last = p;
    for tau in [2.0, 10.0, 100.0, 1e4] {
        let q = quality_probability(&f, &[1.0, 0.0], &[-1.0, 0.0], tau).unwrap();
        assert!(q < last && q > 0.5);
        last = q;
    }
    assert!((last - 0.5).abs() < 1e-3);
    assert!(quality_probability(&f, &f, &f, 0.0).is_err());
    assert!(quality_probability(&f, &f, &f, -1.0).is_err());
}

#[test]
fn graph_probability_matches_closed_form() {
    let m = model();
    let img = random_image(8);
    let f = m.encode_image(&img).unwrap();
    let hi = m.encode_text(&TextPrompt::high_quality()).unwrap();
    let lo = m.encode_text(&TextPrompt::low_quality()).unwrap();
    let expected = quality_probability(&f, &hi, &lo, m.temperature()).unwrap();
    let got = m.quality_scores(&[&img]).unwrap()[0];
    assert!((expected - got).abs() < 1e-12);
}

#[test]
fn semantic_distribution_sums_to_one_and_is_stable() {
    let m = model();
    let sem = m.frozen_copy();
    let img = random_image(9);
    let a = sem.semantic_distribution(&img).unwrap();
    let b = sem.semantic_distribution(&img).unwrap();
    assert_eq!(a.len(), 9);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(a, b);
    // the tunable model at init gives the same distribution
    assert_eq!(m.semantic_distribution(&img).unwrap(), a);
}

#[test]
fn batched_encoding_matches_single() {
    let m = model();
    let imgs: Vec<Image> = (0..3).map(random_image).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let batch = m.encode_images(&refs).unwrap();
    for (img, f) in imgs.iter().zip(&batch) {
        let single = m.encode_image(img).unwrap();
        for (a, b) in single.iter().zip(f) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn quality_loss_reaches_both_prompt_groups() {
    let m = model();
    let imgs = [random_image(10), random_image(11)];
    let refs: Vec<&Image> = imgs.iter().collect();
    let trainable = m.meta_trainable();
    let mut g = Graph::new();
    let p = m.bind(&mut g, &trainable);
    let dist = quality_distribution(&mut g, &p, &m.config, &refs).unwrap();
    let logp = g.log(&dist).unwrap();
    let target = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let prod = g.mul(&logp, &target).unwrap();
    let loss = g.sum(&prod).unwrap();
    let grads = g.backward(&loss).unwrap();
    for name in &trainable {
        let gn = grads.get(&p[name]).unwrap();
        let mag: f64 = gn.data().iter().map(|v| v.abs()).sum();
        assert!(mag > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn trainable_sets_match_the_two_stages() {
    let m = model();
    let meta = m.meta_trainable();
    assert!(meta.contains(&names::TEXT_CONTEXT.to_string()));
    assert!(meta.contains(&names::LOG_TEMPERATURE.to_string()));
    assert_eq!(meta.len(), 1 + 4 + 1);
    let ft = m.finetune_trainable();
    assert!(ft.iter().any(|n| n.starts_with("image.blocks.3.")));
    assert!(ft.iter().any(|n| n.starts_with("image.blocks.2.")));
    assert!(!ft.iter().any(|n| n.starts_with("image.blocks.1.")));
    assert!(ft.iter().any(|n| n.starts_with("text.blocks.1.")));
    assert!(!ft.iter().any(|n| n.starts_with("text.blocks.0.")));
    assert!(ft.contains(&names::IMAGE_PROJ.to_string()));
    assert!(ft.contains(&names::TEXT_PROJ.to_string()));
    assert!(!ft.contains(&names::LOG_TEMPERATURE.to_string()));
}

#[test]
fn config_rejects_indivisible_heads() {
    let cfg = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(matches!(
        DualEncoder::init(&cfg, 0),
        Err(ModelError::Config { field: "heads", .. })
    ));
}
