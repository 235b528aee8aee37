use guidenet::data::{generate_samples, partition, GeneratorConfig, Sample};
use guidenet::model::{checkpoint, Group, Vocab};
use guidenet::train::{
    bench_latency, build_model, evaluate, run_comparison, train, zero_shot_classify, ComparisonConfig, Confusion,
    ForwardPath, InferenceAudit, MetricsReport, Regime, TrainConfig,
};
use guidenet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>, Vocab) {
    let gen = GeneratorConfig { n_samples: n, image_size: 32, seed, ..Default::default() };
    let (train_set, test_set) = partition(generate_samples(&gen).unwrap().samples);
    (train_set, test_set, gen.vocab.vocab())
}

fn quick(regime: Regime) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 8, regime, ..Default::default() }
}

#[test]
fn one_epoch_gives_one_loss() {
    let (train_set, _, vocab) = dataset(12, 1);
    let ten = &train_set[..10];
    for regime in Regime::ALL {
        let mut m = build_model("desk", vocab.len(), 1).unwrap();
        let history = train(&mut m, ten, &vocab, &quick(regime)).unwrap();
        assert_eq!(history.len(), 1, "{regime}");
        assert!(history[0].is_finite());
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let (train_set, _, vocab) = dataset(60, 2);
    let run = || {
        let mut m = build_model("desk", vocab.len(), 2).unwrap();
        let tc = TrainConfig { epochs: 2, seed: 2, ..quick(Regime::GuidedUnfrozen) };
        let h = train(&mut m, &train_set, &vocab, &tc).unwrap();
        (checkpoint::to_bytes(&m).unwrap(), h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn frozen_text_parameters_never_move() {
    let (train_set, _, vocab) = dataset(40, 3);
    let init = build_model("desk", vocab.len(), 3).unwrap();
    let mut frozen = init.clone();
    train(&mut frozen, &train_set, &vocab, &TrainConfig { epochs: 2, ..quick(Regime::GuidedFrozen) }).unwrap();
    let mut unfrozen = init.clone();
    train(&mut unfrozen, &train_set, &vocab, &quick(Regime::GuidedUnfrozen)).unwrap();
    for ((p0, pf), pu) in init.params().iter().zip(frozen.params().iter()).zip(unfrozen.params().iter()) {
        match p0.group {
            Group::Text => {
                assert_eq!(p0.value.data(), pf.value.data(), "{} moved while frozen", p0.name);
                if p0.name == "text.embedding" {
                    assert_ne!(p0.value.data(), pu.value.data());
                }
            }
            Group::Image | Group::Classifier => assert_ne!(p0.value.data(), pf.value.data(), "{}", p0.name),
            _ => {}
        }
    }
}

#[test]
fn baseline_training_leaves_guidance_parameters_alone() {
    let (train_set, _, vocab) = dataset(30, 4);
    let init = build_model("desk", vocab.len(), 4).unwrap();
    let mut m = init.clone();
    train(&mut m, &train_set, &vocab, &quick(Regime::Baseline)).unwrap();
    for (a, b) in init.params().iter().zip(m.params().iter()) {
        let touched = matches!(a.group, Group::Image | Group::Classifier);
        assert_eq!(a.value.data() != b.value.data(), touched, "{}", a.name);
    }
}

#[test]
fn divergence_aborts_with_location() {
    let (train_set, _, vocab) = dataset(40, 5);
    let mut m = build_model("desk", vocab.len(), 5).unwrap();
    let tc = TrainConfig { epochs: 3, learning_rate: 1e250, ..quick(Regime::Baseline) };
    match train(&mut m, &train_set, &vocab, &tc) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch ") && msg.contains("batch "), "{msg}"),
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn invalid_inputs_are_config_errors() {
    let (train_set, _, vocab) = dataset(12, 6);
    let mut m = build_model("desk", vocab.len(), 6).unwrap();
    assert!(matches!(train(&mut m, &[], &vocab, &quick(Regime::Baseline)), Err(Error::Config(_))));
    let zero = TrainConfig { epochs: 0, ..quick(Regime::Baseline) };
    assert!(matches!(train(&mut m, &train_set, &vocab, &zero), Err(Error::Config(_))));
    assert!(matches!(evaluate(&m, &[], ForwardPath::Baseline), Err(Error::Config(_))));
    assert!(matches!(build_model("huge", 10, 1), Err(Error::Config(_))));
    assert!(matches!("guided".parse::<Regime>(), Err(Error::Config(_))));
}

#[test]
fn metric_definitions() {
    let r = MetricsReport::from_confusion(Confusion { tp: 3, fp: 1, tn: 4, fn_: 2 });
    assert_eq!((r.precision, r.recall, r.accuracy), (Some(0.75), Some(0.6), 0.7));

    let labels = [1, 0, 1, 0, 1, 0, 0, 1];
    let perfect = MetricsReport::from_confusion(Confusion::from_predictions(&labels, &labels));
    assert_eq!((perfect.precision, perfect.recall, perfect.accuracy), (Some(1.0), Some(1.0), 1.0));
    let constant = MetricsReport::from_confusion(Confusion::from_predictions(&[0; 8], &labels));
    assert_eq!((constant.precision, constant.recall, constant.accuracy), (None, Some(0.0), 0.5));
}

#[test]
fn evaluation_counts_every_sample_and_uses_the_image_only_path() {
    let (train_set, test_set, vocab) = dataset(80, 7);
    let mut m = build_model("desk", vocab.len(), 7).unwrap();
    train(&mut m, &train_set, &vocab, &quick(Regime::GuidedUnfrozen)).unwrap();
    let r = evaluate(&m, &test_set, ForwardPath::Inference).unwrap();
    let c = r.confusion;
    assert_eq!(c.total(), test_set.len());
    assert_eq!(r.accuracy * c.total() as f64, (c.tp + c.tn) as f64);
    let audit = InferenceAudit::run(&m, &guidenet::train::image_batch(&[&test_set[0]]).unwrap()).unwrap();
    assert!(audit.is_clean(), "{audit:?}");
    assert!(audit.total_ops > 0);
    // Same graph, same answers.
    assert_eq!(evaluate(&m, &test_set, ForwardPath::Baseline).unwrap(), r);
}

/// Cosine argmax by explicit loops, first maximum wins.
fn brute_force(image: &[f64], classes: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, c) in classes.iter().enumerate() {
        let mut dot = 0.0;
        let mut nc = 0.0;
        let mut ni = 0.0;
        for i in 0..image.len() {
            dot += image[i] * c[i];
            nc += c[i] * c[i];
            ni += image[i] * image[i];
        }
        let score = dot / (nc.sqrt() * ni.sqrt());
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best
}

#[test]
fn zero_shot_agrees_with_brute_force_and_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let dim = rng.gen_range(2..12);
        let k = rng.gen_range(2..6);
        let draw = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let image = draw(&mut rng);
        let classes: Vec<Vec<f64>> = (0..k).map(|_| draw(&mut rng)).collect();
        let expected = brute_force(&image, &classes);
        assert_eq!(zero_shot_classify(&image, &classes).unwrap(), expected);
        for scale in [0.01, 1.0, 100.0] {
            let scaled: Vec<Vec<f64>> = classes.iter().map(|c| c.iter().map(|v| v * scale).collect()).collect();
            let img: Vec<f64> = image.iter().map(|v| v * scale).collect();
            assert_eq!(zero_shot_classify(&img, &scaled).unwrap(), expected);
        }
    }
}

#[test]
fn latency_statistics() {
    let (_, test_set, vocab) = dataset(40, 8);
    let m = build_model("desk", vocab.len(), 8).unwrap();
    let probe = guidenet::train::image_batch(&[&test_set[0]]).unwrap();
    let stats = bench_latency(&m, ForwardPath::Inference, &probe, 5, 100).unwrap();
    assert_eq!(stats.runs.len(), 100);
    assert!(stats.median <= stats.p95);
    assert!(stats.runs.iter().all(|&t| t > 0.0));
    assert!(matches!(bench_latency(&m, ForwardPath::Baseline, &probe, 0, 29), Err(Error::Config(_))));
}

#[test]
fn small_comparison_has_three_rows_and_shared_test_sets() {
    let cfg = ComparisonConfig {
        seeds: vec![3],
        generator: GeneratorConfig { n_samples: 60, image_size: 32, ..Default::default() },
        train: TrainConfig { epochs: 1, batch_size: 16, ..Default::default() },
        latency_warmup: 2,
        latency_runs: 30,
        ..Default::default()
    };
    let mut log = Vec::new();
    let result = run_comparison(&cfg, &mut |m| log.push(m.to_string())).unwrap();
    assert_eq!(result.regimes.len(), 3);
    assert!(result.test_sets_identical());
    let table = result.render_table();
    let header = table.lines().next().unwrap();
    let columns: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(columns, ["Model", "Precision", "Recall", "Accuracy", "Latency"]);
    for r in Regime::ALL {
        assert_eq!(table.lines().filter(|l| l.starts_with(r.name())).count(), 1, "{table}");
    }
    let json = result.to_json();
    assert_eq!(json["regimes"].as_array().unwrap().len(), 3);
    for r in json["regimes"].as_array().unwrap() {
        let s = &r["seeds"][0];
        for key in ["seed", "tp", "fp", "tn", "fn", "precision", "recall", "accuracy", "latency_median_s"] {
            assert!(s.get(key).is_some(), "missing {key}");
        }
        assert!(s["latency_median_s"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(result.paired_deltas(Regime::GuidedFrozen).len(), 1);
    assert!(!log.is_empty());

    let empty = ComparisonConfig { seeds: vec![], ..cfg.clone() };
    assert!(matches!(run_comparison(&empty, &mut |_| {}), Err(Error::Config(_))));
    let missing = ComparisonConfig { regimes: vec![Regime::Baseline], ..cfg };
    assert!(matches!(run_comparison(&missing, &mut |_| {}), Err(Error::Config(_))));
}

/// Ten baseline epochs on the default 10 000-sample dataset fit the training set.
#[test]
fn desk_baseline_fits_training_data() {
    let gen = GeneratorConfig::default();
    let (train_set, _) = partition(generate_samples(&gen).unwrap().samples);
    let vocab = gen.vocab.vocab();
    let mut m = build_model("desk", vocab.len(), 1).unwrap();
    train(&mut m, &train_set, &vocab, &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
    let acc = evaluate(&m, &train_set, ForwardPath::Baseline).unwrap().accuracy;
    assert!(acc > 0.9, "train accuracy {acc}");
}
