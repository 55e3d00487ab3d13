use lid_core::ppg::{greedy_decode, parse_alignment, parse_inventory, parse_manifest, parse_ppg_file, PhoneSegment};
use lid_core::synth::{
    build_dataset, chop, emit_ppg, generate_split, make_code_switch, majority_language, sample_utterance_with,
    LanguageModelSpec, SynthConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

#[test]
fn bigram_frequencies_approach_the_transition_matrix() {
    let p = 6;
    let lm = LanguageModelSpec::random(p, 1.0, 1, 1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = vec![vec![0usize; p]; p];
    for _ in 0..10_000 {
        let u = sample_utterance_with(&lm, 40, &mut rng);
        for w in u.phones.windows(2) {
            counts[w[0].0][w[1].0] += 1;
        }
    }
    let mut worst = 0.0f64;
    for (i, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        assert!(n > 1000);
        for (j, &c) in row.iter().enumerate() {
            worst = worst.max((c as f64 / n as f64 - lm.transitions[i][j]).abs());
        }
    }
    assert!(worst <= 0.02, "L-inf gap {worst}");
}

#[test]
fn emitted_rows_are_stochastic_and_sharpen_with_kappa() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let segs: Vec<PhoneSegment> = (0..100).map(|i| PhoneSegment::new(i % 8, i * 10, i * 10 + 10)).collect();
    let mut mean_mass = Vec::new();
    for kappa in [0.5, 5.0, 50.0, 1e6] {
        let ppg = emit_ppg(&segs, 8, kappa, 10.0, &mut rng).unwrap();
        assert_eq!(ppg.frames(), 1000);
        let mut mass = 0.0;
        let mut min_mass = 1.0f64;
        for s in &segs {
            for t in s.start..s.end {
                let row = ppg.row(t);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                mass += row[s.phone];
                min_mass = min_mass.min(row[s.phone]);
            }
        }
        mean_mass.push(mass / 1000.0);
        if kappa == 1e6 {
            assert!(min_mass >= 0.999);
            assert_eq!(greedy_decode(&ppg, 1), segs);
        }
    }
    assert!(mean_mass.windows(2).all(|w| w[1] > w[0]), "{mean_mass:?}");
}

#[test]
fn sharp_fragments_are_recovered_by_transition_likelihood() {
    let cfg = SynthConfig {
        kappa: 1e6,
        train_fragments: 200,
        ..SynthConfig::default()
    };
    let lms = cfg.language_models().unwrap();
    let frags = generate_split(&cfg, &lms, 0).unwrap();
    assert_eq!(frags.len(), 200);
    for f in &frags {
        let phones: Vec<usize> = greedy_decode(&f.ppg, 1).iter().map(|s| s.phone).collect();
        let ll: Vec<f64> = lms.iter().map(|lm| lm.transition_log_likelihood(&phones)).collect();
        let best = if ll[1] > ll[0] { 1 } else { 0 };
        assert_eq!(best, f.label, "{}: {ll:?}", f.id);
    }
}

#[test]
fn majority_labels_match_frame_counting() {
    let a = LanguageModelSpec::random(10, 0.5, 2, 6, 4).unwrap();
    let b = LanguageModelSpec::random(10, 0.5, 2, 6, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let frames = rng.random_range(50..400);
        let p = rng.random_range(0.0..0.6);
        let cs = make_code_switch(&a, &b, frames, p, &mut rng).unwrap();
        let mut lang_of = vec![usize::MAX; frames];
        for (s, &l) in cs.segments.iter().zip(&cs.languages) {
            for f in s.start..s.end {
                lang_of[f] = l;
            }
        }
        assert!(lang_of.iter().all(|&l| l < 2));
        let ppg = emit_ppg(&cs.segments, 10, 5.0, 10.0, &mut rng).unwrap();
        for frag in chop(&ppg, &cs.segments, 0.5, 10.0).unwrap() {
            let ones = lang_of[frag.start..frag.end].iter().filter(|&&l| l == 1).count();
            let zeros = frag.end - frag.start - ones;
            let oracle = if ones > zeros { 1 } else { 0 };
            assert_eq!(majority_language(&cs.spans, frag.start, frag.end), oracle);
        }
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_sizes_integrity_and_determinism() {
    let cfg = SynthConfig {
        utterance_frames: 250,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let paths = build_dataset(&cfg, &a.path().join("nested/out")).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    assert_eq!(tree(&a.path().join("nested/out")), tree(b.path()));

    let inv = parse_inventory(&fs::read_to_string(&paths.inventory).unwrap()).unwrap();
    let base = paths.inventory.parent().unwrap();
    let mut ids = BTreeSet::new();
    let mut utterances: Vec<BTreeSet<String>> = Vec::new();
    for (manifest, want) in paths.manifests.iter().zip([200, 50, 50]) {
        let records = parse_manifest(&fs::read_to_string(manifest).unwrap(), base).unwrap();
        assert_eq!(records.len(), want);
        let mut utts = BTreeSet::new();
        for r in &records {
            assert!(ids.insert(r.id.clone()));
            utts.insert(r.id.rsplit_once('-').unwrap().0.to_string());
            let ppg = parse_ppg_file(&fs::read_to_string(&r.ppg_path).unwrap()).unwrap();
            // 250 frames chop into 100, 100 and a kept half-length tail.
            assert!([100, 50].contains(&ppg.frames()));
            let ali = r.align_path.as_ref().unwrap();
            parse_alignment(&fs::read_to_string(ali).unwrap(), &inv, ppg.frames()).unwrap();
        }
        utterances.push(utts);
    }
    assert!(utterances[0].is_disjoint(&utterances[1]));
    assert!(utterances[1].is_disjoint(&utterances[2]));
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&paths.meta).unwrap()).unwrap();
    assert_eq!(meta["config"]["kappa"], 5.0);
}
