use lid_core::autograd::Graph;
use lid_core::encoder::EncoderConfig;
use lid_core::heads::{HeadConfig, HeadKind};
use lid_core::model::{LidModel, ModelConfig, RunMode};
use lid_core::params::ParamStore;
use lid_core::ppg::EmbeddingMode;
use lid_core::synth::{generate_split, SynthConfig};
use lid_core::tensor::Mat;
use lid_core::training::{fit, optimizer_step, AdamState, EarlyStopper, Example, TrainConfig};

fn toy_examples(split: usize, phones: usize, model: &LidModel) -> Vec<Example> {
    let cfg = SynthConfig {
        num_phones: phones,
        train_fragments: 12,
        dev_fragments: 6,
        test_fragments: 6,
        utterance_frames: 60,
        chop_seconds: 0.2,
        min_duration: 2,
        max_duration: 5,
        seed: 21,
        ..SynthConfig::default()
    };
    let lms = cfg.language_models().unwrap();
    generate_split(&cfg, &lms, split)
        .unwrap()
        .into_iter()
        .map(|f| Example {
            tokens: model.tokenize(&f.ppg, Some(&f.segments)).unwrap(),
            label: f.label,
        })
        .collect()
}

fn toy_model(mode: RunMode, kind: HeadKind, embedding: EmbeddingMode) -> LidModel {
    let phones = 6;
    LidModel::new(ModelConfig {
        mode,
        encoder: EncoderConfig {
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_sequence_length: 24,
            dropout_rate: 0.0,
            seed: 5,
            ..EncoderConfig::for_inventory(phones, embedding)
        },
        head: HeadConfig {
            kind,
            num_classes: 2,
            cnn_filters: 4,
            cnn_kernel_width: 3,
            lstm_hidden: 4,
            lstm_layers: 1,
            dpcnn_channels: 4,
            dpcnn_region_width: 3,
            dpcnn_blocks: 2,
            rcnn_hidden: 4,
            rcnn_proj: 6,
            seed: 6,
        },
        phones: vec![],
    })
    .unwrap()
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Mat::from_vec(1, 1, vec![value]));
    s
}

fn scalar_grad(store: &ParamStore, g: f64) -> lid_core::autograd::Gradients {
    let mut graph = Graph::new(store);
    let w = graph.param("w");
    let l = graph.dot_const(w, Mat::from_vec(1, 1, vec![g]));
    graph.backward(l, 1.0)
}

#[test]
fn scalar_adam_matches_reference_loop() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        weight_decay: 0.01,
        warmup_fraction: 0.2,
        ..TrainConfig::default()
    };
    let (g, total, k) = (0.3, 20u64, 15);
    let mut store = scalar_store(1.5);
    let mut state = AdamState::new(&store);
    for _ in 0..k {
        let grads = scalar_grad(&store, g);
        optimizer_step(&mut store, &grads, &mut state, &cfg, total).unwrap();
    }

    let (mut p, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for step in 0..k {
        let x = step as f64 / total as f64;
        let mult = if x < 0.2 { x / 0.2 } else { (1.0 - x) / 0.8 };
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        p -= 0.01 * mult * (m / (v.sqrt() + 1e-6) + 0.01 * p);
    }
    assert!((store.get("w").unwrap().data()[0] - p).abs() < 1e-14);
    assert_eq!(state.step, k as u64);
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        learning_rate: 0.1,
        warmup_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut model = toy_model(RunMode::BertLid, HeadKind::Rcnn, EmbeddingMode::AvPpg);
    let before = model.params.clone();
    let mut state = AdamState::new(&model.params);
    for _ in 0..5 {
        let grads = lid_core::autograd::Gradients::empty(model.params.len());
        optimizer_step(&mut model.params, &grads, &mut state, &cfg, 10).unwrap();
    }
    assert_eq!(model.params, before);
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut store = scalar_store(0.0);
    let mut state = AdamState::new(&store);
    let grads = scalar_grad(&store, f64::NAN);
    let err = optimizer_step(&mut store, &grads, &mut state, &TrainConfig::default(), 10).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
}

#[test]
fn early_stop_fires_at_exactly_the_fiftieth_increase() {
    let mut s = EarlyStopper::new(50);
    assert!(!s.observe(1.0));
    for i in 1..50 {
        assert!(!s.observe(1.0 + i as f64), "stopped early at increase {i}");
    }
    assert!(s.observe(100.0));
    assert_eq!(s.increases(), 50);

    // An equal value in the middle restarts the count.
    let mut s = EarlyStopper::new(50);
    s.observe(0.0);
    for i in 1..=30 {
        s.observe(i as f64);
    }
    assert!(!s.observe(30.0));
    for i in 1..50 {
        assert!(!s.observe(30.0 + i as f64));
    }
    assert!(s.observe(1000.0));
}

fn accumulation_pair(mode: RunMode, kind: HeadKind, embedding: EmbeddingMode) {
    let base = toy_model(mode, kind, embedding);
    let train = toy_examples(0, 6, &base);
    let dev = toy_examples(1, 6, &base);
    let run = |batch: usize, accum: usize| {
        let mut m = base.clone();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            warmup_fraction: 0.0,
            epochs: 2,
            batch_size: batch,
            grad_accumulation_steps: accum,
            shuffle: false,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let report = fit(&mut m, &train[..8], &dev, &cfg, None).unwrap();
        (report, m)
    };
    let (ra, ma) = run(2, 2);
    let (rb, mb) = run(4, 1);
    assert_eq!(ra.state.step, 4);
    assert_eq!(ra.state.step, rb.state.step);
    let mut worst = 0.0f64;
    for (a, b) in ra.state.m.iter().zip(&rb.state.m).chain(ra.state.v.iter().zip(&rb.state.v)) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    for ((_, a), (_, b)) in ma.params.iter().zip(mb.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-9, "{mode} {kind}: {worst}");
    assert!(ma.params != base.params, "training moved no parameter");
}

#[test]
fn gradient_accumulation_matches_large_batch_for_every_head() {
    for kind in HeadKind::ALL {
        accumulation_pair(RunMode::BertLid, kind, EmbeddingMode::AvPpg);
        accumulation_pair(RunMode::LidOnly, kind, EmbeddingMode::PpgFrm);
    }
    accumulation_pair(RunMode::BertOnly, HeadKind::Cnn, EmbeddingMode::PhoneEmb);
}

#[test]
fn returned_parameters_have_the_lowest_dev_loss() {
    let mut model = toy_model(RunMode::BertLid, HeadKind::Cnn, EmbeddingMode::AvPpg);
    let train = toy_examples(0, 6, &model);
    let dev = toy_examples(1, 6, &model);
    // A large rate lets the dev loss move both ways.
    let cfg = TrainConfig {
        learning_rate: 0.05,
        warmup_fraction: 0.0,
        epochs: 15,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &train, &dev, &cfg, None).unwrap();
    let min = report.history.iter().map(|h| h.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_entry().dev_loss, min);
    let (loss, _) = lid_core::training::evaluate(&model, &dev).unwrap();
    assert_eq!(loss, min);
    assert_eq!(report.history.len(), 15);
}

#[test]
fn small_learning_rate_descends_on_a_fixed_batch() {
    for kind in HeadKind::ALL {
        let mut model = toy_model(RunMode::BertLid, kind, EmbeddingMode::AvPpg);
        let data = toy_examples(0, 6, &model);
        let batch = &data[..8];
        let cfg = TrainConfig {
            learning_rate: 1e-6,
            warmup_fraction: 0.0,
            epochs: 10,
            batch_size: 8,
            shuffle: false,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, batch, batch, &cfg, None).unwrap();
        assert_eq!(report.history.len(), 10);
        for w in report.history.windows(2) {
            assert!(w[1].dev_loss <= w[0].dev_loss, "{kind}: {} -> {}", w[0].dev_loss, w[1].dev_loss);
        }
    }
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let mut model = toy_model(RunMode::BertLid, HeadKind::Lstm, EmbeddingMode::AvPpg);
    model.config.encoder.dropout_rate = 0.1;
    let train = toy_examples(0, 6, &model);
    let dev = toy_examples(1, 6, &model);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut a = model.clone();
    let mut b = model.clone();
    let ra = fit(&mut a, &train, &dev, &cfg, None).unwrap();
    let rb = fit(&mut b, &train, &dev, &cfg, None).unwrap();
    assert_eq!(ra.history_tsv(), rb.history_tsv());
    assert_eq!(a.params, b.params);
}

#[test]
fn resume_continues_the_step_counter() {
    let mut model = toy_model(RunMode::BertLid, HeadKind::Cnn, EmbeddingMode::AvPpg);
    let train = toy_examples(0, 6, &model);
    let dev = toy_examples(1, 6, &model);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let first = fit(&mut model, &train, &dev, &cfg, None).unwrap();
    let bytes = model.to_bytes(Some(&first.state.to_saved(&model.params))).unwrap();
    let (mut again, saved) = LidModel::from_bytes(&bytes).unwrap();
    let state = AdamState::from_saved(&saved.unwrap(), &again.params).unwrap();
    assert_eq!(state.step, first.state.step);
    let second = fit(&mut again, &train, &dev, &cfg, Some(state)).unwrap();
    assert_eq!(second.state.step, 2 * first.state.step);
    assert!(second.history[0].step > first.history.last().unwrap().step);
}
