use lid_core::ngram::{
    featurize, predict_margin, train_margin_classifier, NGramVocab, SparseVec, SvmConfig, Weighting,
};
use lid_core::synth::{generate_split, SynthConfig};

fn phone_sequences(split: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let cfg = SynthConfig {
        num_phones: 12,
        train_fragments: 80,
        dev_fragments: 40,
        test_fragments: 40,
        seed: 31,
        ..SynthConfig::default()
    };
    let lms = cfg.language_models().unwrap();
    generate_split(&cfg, &lms, split)
        .unwrap()
        .into_iter()
        .map(|f| (f.segments.iter().map(|s| s.phone).collect(), f.label))
        .unzip()
}

fn l2_of_scaled(x: &SparseVec, c: f64) -> SparseVec {
    let scaled: Vec<(usize, f64)> = x.iter().map(|(i, v)| (i, v * c)).collect();
    let norm = scaled.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
    SparseVec::new(scaled.into_iter().map(|(i, v)| (i, v / norm)).collect()).unwrap()
}

#[test]
fn duplicated_training_set_gives_the_same_decision_function() {
    let (train, labels) = phone_sequences(0);
    let (test, _) = phone_sequences(2);
    let vocab = NGramVocab::build(&train, 3).unwrap();
    let feats: Vec<SparseVec> = train.iter().map(|s| featurize(s, &vocab, Weighting::L2).unwrap()).collect();
    let cfg = SvmConfig::default();
    let once = train_margin_classifier(&feats, &labels, 2, vocab.len(), &cfg).unwrap();
    let twice_feats: Vec<SparseVec> = feats.iter().chain(&feats).cloned().collect();
    let twice_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let twice = train_margin_classifier(&twice_feats, &twice_labels, 2, vocab.len(), &cfg).unwrap();
    for s in &test {
        let x = featurize(s, &vocab, Weighting::L2).unwrap();
        let (la, sa) = predict_margin(&x, &once).unwrap();
        let (lb, sb) = predict_margin(&x, &twice).unwrap();
        assert_eq!(la, lb);
        for (a, b) in sa.iter().zip(&sb) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn objective_of_averaged_iterate_trends_down() {
    let (train, labels) = phone_sequences(0);
    let vocab = NGramVocab::build(&train, 3).unwrap();
    let feats: Vec<SparseVec> = train.iter().map(|s| featurize(s, &vocab, Weighting::L2).unwrap()).collect();
    let cfg = SvmConfig {
        epochs: 30,
        ..SvmConfig::default()
    };
    let clf = train_margin_classifier(&feats, &labels, 2, vocab.len(), &cfg).unwrap();
    for history in &clf.objective {
        assert_eq!(history.len(), 30);
        let windows: Vec<f64> = history.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }
}

#[test]
fn l2_weighting_is_scale_invariant() {
    let (train, labels) = phone_sequences(0);
    let (test, _) = phone_sequences(2);
    let vocab = NGramVocab::build(&train, 2).unwrap();
    let raw: Vec<SparseVec> = train.iter().map(|s| featurize(s, &vocab, Weighting::Raw).unwrap()).collect();
    let run = |c: f64| {
        let feats: Vec<SparseVec> = raw.iter().map(|x| l2_of_scaled(x, c)).collect();
        let clf = train_margin_classifier(&feats, &labels, 2, vocab.len(), &SvmConfig::default()).unwrap();
        test.iter()
            .map(|s| {
                let x = l2_of_scaled(&featurize(s, &vocab, Weighting::Raw).unwrap(), c);
                predict_margin(&x, &clf).unwrap().0
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1.0), run(7.25));
}

#[test]
fn margin_scores_are_informative_on_held_out_data() {
    let (train, labels) = phone_sequences(0);
    let (test, test_labels) = phone_sequences(2);
    let vocab = NGramVocab::build(&train, 3).unwrap();
    let w = Weighting::TfIdf;
    let feats: Vec<SparseVec> = train.iter().map(|s| featurize(s, &vocab, w).unwrap()).collect();
    let clf = train_margin_classifier(&feats, &labels, 2, vocab.len(), &SvmConfig::default()).unwrap();
    let probs: Vec<Vec<f64>> = test
        .iter()
        .map(|s| predict_margin(&featurize(s, &vocab, w).unwrap(), &clf).unwrap().1)
        .collect();
    let e = lid_core::eval::multiclass_eer(&probs, &test_labels).unwrap();
    assert!(e < 0.3, "{e}");
}
