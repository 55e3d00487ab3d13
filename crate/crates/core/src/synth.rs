//! Synthetic multilingual corpora: per-language Markov phonotactics over a
//! shared inventory, Dirichlet-noised posteriorgrams, fixed-length chopping
//! and code-switched splicing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppg::{
    validate_segments, write_alignment, write_inventory, write_manifest, write_ppg_file,
    PhoneInventory, PhoneSegment, PosteriorGram, UtteranceRecord,
};
use crate::seeds::{derive_seed, derived_rng};

const LM_STREAM: u64 = 1;
const SPLIT_STREAMS: [u64; 3] = [10, 11, 12];
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// First-order Markov phonotactics with uniform phone durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModelSpec {
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// Inclusive `(min, max)` duration in frames for each phone.
    pub durations: Vec<(usize, usize)>,
    pub seed: u64,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn sample_dirichlet<R: Rng>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        // Every draw underflowed; fall back to the largest concentration.
        let top = alpha.iter().enumerate().fold(0, |b, (i, a)| if *a > alpha[b] { i } else { b });
        v[top] = 1.0;
    }
    v
}

impl LanguageModelSpec {
    pub fn new(
        transitions: Vec<Vec<f64>>,
        initial: Vec<f64>,
        durations: Vec<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        let p = initial.len();
        if p < 2 || transitions.len() != p || durations.len() != p {
            return Err(Error::Config("language model sizes disagree".into()));
        }
        check_distribution(&initial, "initial distribution")?;
        for (i, row) in transitions.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Config(format!("transition row {i} has {} entries", row.len())));
            }
            check_distribution(row, &format!("transition row {i}"))?;
        }
        if durations.iter().any(|&(lo, hi)| lo == 0 || hi < lo) {
            return Err(Error::Config("phone durations must satisfy 1 ≤ min ≤ max".into()));
        }
        Ok(Self {
            transitions,
            initial,
            durations,
            seed,
        })
    }

    /// Random chain without self-loops: each transition row is drawn from a
    /// symmetric Dirichlet over the other phones; lower `concentration`
    /// gives peakier, more language-specific rows.
    pub fn random(phones: usize, concentration: f64, min_dur: usize, max_dur: usize, seed: u64) -> Result<Self> {
        if !(concentration > 0.0) {
            return Err(Error::Config("transition concentration must be positive".into()));
        }
        let mut rng = derived_rng(seed, 0, 0);
        let transitions = (0..phones)
            .map(|i| {
                let alpha: Vec<f64> = (0..phones - 1).map(|_| concentration).collect();
                let mut row = sample_dirichlet(&alpha, &mut rng);
                row.insert(i, 0.0);
                row
            })
            .collect();
        Self::new(
            transitions,
            vec![1.0 / phones as f64; phones],
            vec![(min_dur, max_dur); phones],
            seed,
        )
    }

    pub fn phones(&self) -> usize {
        self.initial.len()
    }

    fn samplers(&self) -> (WeightedIndex<f64>, Vec<Option<WeightedIndex<f64>>>) {
        let init = WeightedIndex::new(&self.initial).expect("validated distribution");
        // A row of zeros cannot occur after validation, but absorbing rows
        // (all mass on one phone) are fine.
        let rows = self.transitions.iter().map(|r| WeightedIndex::new(r).ok()).collect();
        (init, rows)
    }

    /// Sum of log transition probabilities along `phones`.
    pub fn transition_log_likelihood(&self, phones: &[usize]) -> f64 {
        phones
            .windows(2)
            .map(|w| self.transitions[w[0]][w[1]].max(1e-300).ln())
            .sum()
    }
}

/// Sampled phones with durations, and the segments they produce (adjacent
/// repeats of one phone merged).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledUtterance {
    pub phones: Vec<(usize, usize)>,
    pub segments: Vec<PhoneSegment>,
}

fn push_segment(segs: &mut Vec<PhoneSegment>, phone: usize, len: usize) {
    match segs.last_mut() {
        Some(last) if last.phone == phone => last.end += len,
        _ => {
            let start = segs.last().map_or(0, |s| s.end);
            segs.push(PhoneSegment::new(phone, start, start + len));
        }
    }
}

/// Utterance of exactly `length` frames, deterministic in `lm.seed`.
pub fn sample_utterance(lm: &LanguageModelSpec, length: usize) -> SampledUtterance {
    sample_utterance_with(lm, length, &mut derived_rng(lm.seed, 1, 0))
}

pub fn sample_utterance_with<R: Rng>(lm: &LanguageModelSpec, length: usize, rng: &mut R) -> SampledUtterance {
    let (init, rows) = lm.samplers();
    let mut phones = Vec::new();
    let mut segments = Vec::new();
    let mut total = 0;
    let mut phone = init.sample(rng);
    while total < length {
        let (lo, hi) = lm.durations[phone];
        let d = rng.random_range(lo..=hi).min(length - total);
        phones.push((phone, d));
        push_segment(&mut segments, phone, d);
        total += d;
        if let Some(row) = &rows[phone] {
            phone = row.sample(rng);
        }
    }
    SampledUtterance { phones, segments }
}

/// Posteriorgram whose row for each frame is drawn from
/// Dirichlet(κ·e_true + 1/P): the expected true-phone mass grows with κ.
pub fn emit_ppg<R: Rng>(
    segments: &[PhoneSegment],
    phones: usize,
    kappa: f64,
    frame_shift_ms: f64,
    rng: &mut R,
) -> Result<PosteriorGram> {
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
    }
    let frames = segments.last().map_or(0, |s| s.end);
    validate_segments(segments, frames, phones)?;
    let floor = 1.0 / phones as f64;
    let mut values = Vec::with_capacity(frames * phones);
    for s in segments {
        let mut alpha = vec![floor; phones];
        alpha[s.phone] += kappa;
        for _ in s.start..s.end {
            values.extend(sample_dirichlet(&alpha, rng));
        }
    }
    PosteriorGram::new(frames, phones, values, frame_shift_ms)
}

/// A slice `[start, end)` of a longer utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub start: usize,
    pub end: usize,
    pub ppg: PosteriorGram,
    pub segments: Vec<PhoneSegment>,
}

pub fn chop_length(chop_seconds: f64, frame_shift_ms: f64) -> Result<usize> {
    let len = (chop_seconds * 1000.0 / frame_shift_ms + 1e-9).floor();
    if !(len >= 1.0) || !len.is_finite() {
        return Err(Error::Config(format!(
            "chop of {chop_seconds} s at {frame_shift_ms} ms is shorter than one frame"
        )));
    }
    Ok(len as usize)
}

/// Frame ranges of consecutive `len`-frame fragments over `frames`; a
/// shorter trailing piece is kept only if it is at least half of `len`.
pub fn chop_ranges(frames: usize, len: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..frames / len).map(|i| (i * len, (i + 1) * len)).collect();
    let rest = frames % len;
    if rest > 0 && 2 * rest >= len {
        out.push((frames - rest, frames));
    }
    out
}

/// Segments restricted to `[start, end)` and re-indexed from zero.
pub fn clip_segments(segs: &[PhoneSegment], start: usize, end: usize) -> Vec<PhoneSegment> {
    segs.iter()
        .filter(|s| s.end > start && s.start < end)
        .map(|s| PhoneSegment::new(s.phone, s.start.max(start) - start, s.end.min(end) - start))
        .collect()
}

pub fn chop(ppg: &PosteriorGram, segs: &[PhoneSegment], chop_seconds: f64, frame_shift_ms: f64) -> Result<Vec<Fragment>> {
    let len = chop_length(chop_seconds, frame_shift_ms)?;
    Ok(chop_ranges(ppg.frames(), len)
        .into_iter()
        .map(|(start, end)| Fragment {
            start,
            end,
            ppg: ppg.slice(start, end),
            segments: clip_segments(segs, start, end),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpan {
    pub language: usize,
    pub start: usize,
    pub end: usize,
}

/// A spliced utterance. Languages are 0 for the first model, 1 for the second.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSwitchUtterance {
    pub segments: Vec<PhoneSegment>,
    pub languages: Vec<usize>,
    pub spans: Vec<LanguageSpan>,
}

/// Starts in language 0; at each phone boundary the language flips with
/// probability `switch_prob`, and the next phone is drawn from the active
/// language's transitions out of the previous phone.
pub fn make_code_switch<R: Rng>(
    lm_a: &LanguageModelSpec,
    lm_b: &LanguageModelSpec,
    total_frames: usize,
    switch_prob: f64,
    rng: &mut R,
) -> Result<CodeSwitchUtterance> {
    if lm_a.phones() != lm_b.phones() {
        return Err(Error::Config("code-switched languages must share one inventory".into()));
    }
    if !(0.0..=1.0).contains(&switch_prob) {
        return Err(Error::Config(format!("switch probability {switch_prob} outside [0, 1]")));
    }
    let lms = [lm_a, lm_b];
    let samplers = [lm_a.samplers(), lm_b.samplers()];
    let mut lang = 0;
    let mut phone = samplers[0].0.sample(rng);
    let mut segments: Vec<PhoneSegment> = Vec::new();
    let mut languages: Vec<usize> = Vec::new();
    let mut total = 0;
    while total < total_frames {
        let (lo, hi) = lms[lang].durations[phone];
        let d = rng.random_range(lo..=hi).min(total_frames - total);
        match segments.last_mut() {
            Some(last) if last.phone == phone && languages.last() == Some(&lang) => last.end += d,
            _ => {
                segments.push(PhoneSegment::new(phone, total, total + d));
                languages.push(lang);
            }
        }
        total += d;
        if switch_prob > 0.0 && rng.random::<f64>() < switch_prob {
            lang = 1 - lang;
        }
        if let Some(row) = &samplers[lang].1[phone] {
            phone = row.sample(rng);
        }
    }
    let mut spans: Vec<LanguageSpan> = Vec::new();
    for (s, &l) in segments.iter().zip(&languages) {
        match spans.last_mut() {
            Some(last) if last.language == l => last.end = s.end,
            _ => spans.push(LanguageSpan {
                language: l,
                start: s.start,
                end: s.end,
            }),
        }
    }
    Ok(CodeSwitchUtterance {
        segments,
        languages,
        spans,
    })
}

/// Language with the most frames inside `[start, end)`, ties to the lowest index.
pub fn majority_language(spans: &[LanguageSpan], start: usize, end: usize) -> usize {
    let top = spans.iter().map(|s| s.language).max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for s in spans {
        let lo = s.start.max(start);
        let hi = s.end.min(end);
        if hi > lo {
            counts[s.language] += hi - lo;
        }
    }
    let mut best = 0;
    for (l, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = l;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_languages: usize,
    pub num_phones: usize,
    /// Fragments (manifest rows) per split.
    pub train_fragments: usize,
    pub dev_fragments: usize,
    pub test_fragments: usize,
    /// Length of each generated utterance before chopping.
    pub utterance_frames: usize,
    pub kappa: f64,
    pub chop_seconds: f64,
    pub frame_shift_ms: f64,
    pub code_switch_probability: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub transition_concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_languages: 2,
            num_phones: 40,
            train_fragments: 200,
            dev_fragments: 50,
            test_fragments: 50,
            utterance_frames: 300,
            kappa: 5.0,
            chop_seconds: 1.0,
            frame_shift_ms: 10.0,
            code_switch_probability: 0.0,
            min_duration: 3,
            max_duration: 12,
            transition_concentration: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, why: &str| Err(Error::Config(format!("synth.{k} {why}")));
        if self.num_languages < 2 {
            return fail("num_languages", "must be at least 2");
        }
        if self.num_phones < 2 {
            return fail("num_phones", "must be at least 2");
        }
        for (k, v) in [
            ("train_fragments", self.train_fragments),
            ("dev_fragments", self.dev_fragments),
            ("test_fragments", self.test_fragments),
            ("utterance_frames", self.utterance_frames),
            ("min_duration", self.min_duration),
        ] {
            if v == 0 {
                return fail(k, "must be positive");
            }
        }
        if self.max_duration < self.min_duration {
            return fail("max_duration", "must be at least synth.min_duration");
        }
        for (k, v) in [
            ("kappa", self.kappa),
            ("chop_seconds", self.chop_seconds),
            ("frame_shift_ms", self.frame_shift_ms),
            ("transition_concentration", self.transition_concentration),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(k, "must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.code_switch_probability) {
            return fail("code_switch_probability", "must lie in [0, 1]");
        }
        let len = chop_length(self.chop_seconds, self.frame_shift_ms)
            .map_err(|_| Error::Config("synth.chop_seconds is shorter than one frame".into()))?;
        if chop_ranges(self.utterance_frames, len).is_empty() {
            return fail("utterance_frames", "is shorter than half a chop");
        }
        Ok(())
    }

    /// The per-language models this config generates.
    pub fn language_models(&self) -> Result<Vec<LanguageModelSpec>> {
        (0..self.num_languages)
            .map(|k| {
                LanguageModelSpec::random(
                    self.num_phones,
                    self.transition_concentration,
                    self.min_duration,
                    self.max_duration,
                    derive_seed(self.seed, LM_STREAM, k as u64),
                )
            })
            .collect()
    }
}

/// Fragment-level sample produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFragment {
    pub id: String,
    pub label: usize,
    pub ppg: PosteriorGram,
    pub segments: Vec<PhoneSegment>,
}

/// Generates the fragments of one split in memory. Utterance `u` starts in
/// language `u mod L` and may switch into language `u + 1 mod L`.
pub fn generate_split(cfg: &SynthConfig, lms: &[LanguageModelSpec], split: usize) -> Result<Vec<LabeledFragment>> {
    let want = [cfg.train_fragments, cfg.dev_fragments, cfg.test_fragments][split];
    let len = chop_length(cfg.chop_seconds, cfg.frame_shift_ms)?;
    let mut out = Vec::with_capacity(want);
    let mut u = 0u64;
    while out.len() < want {
        let mut rng: ChaCha8Rng = derived_rng(cfg.seed, SPLIT_STREAMS[split], u);
        let a = u as usize % cfg.num_languages;
        let b = (a + 1) % cfg.num_languages;
        let cs = make_code_switch(&lms[a], &lms[b], cfg.utterance_frames, cfg.code_switch_probability, &mut rng)?;
        let ppg = emit_ppg(&cs.segments, cfg.num_phones, cfg.kappa, cfg.frame_shift_ms, &mut rng)?;
        for (f, (start, end)) in chop_ranges(ppg.frames(), len).into_iter().enumerate() {
            if out.len() == want {
                break;
            }
            let local = majority_language(&cs.spans, start, end);
            out.push(LabeledFragment {
                id: format!("{}-u{u:04}-f{f:02}", SPLITS[split]),
                label: if local == 0 { a } else { b },
                ppg: ppg.slice(start, end),
                segments: clip_segments(&cs.segments, start, end),
            });
        }
        u += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    config: SynthConfig,
    languages: Vec<String>,
    language_seeds: Vec<u64>,
    fragments: Vec<usize>,
}

/// Manifest paths written by [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub inventory: PathBuf,
    pub meta: PathBuf,
    pub manifests: [PathBuf; 3],
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `inventory.txt`, `meta.json`, `{train,dev,test}.tsv` and the
/// `ppg/` and `align/` trees under `out_dir`.
pub fn build_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetPaths> {
    cfg.validate()?;
    let inv = PhoneInventory::numbered(cfg.num_phones)?;
    let lms = cfg.language_models()?;
    for sub in ["ppg", "align"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let inventory = out_dir.join("inventory.txt");
    write_file(&inventory, &write_inventory(&inv))?;
    let mut manifests = Vec::with_capacity(3);
    let mut counts = Vec::with_capacity(3);
    for (split, name) in SPLITS.iter().enumerate() {
        let frags = generate_split(cfg, &lms, split)?;
        let mut records = Vec::with_capacity(frags.len());
        for f in &frags {
            let ppg_rel = PathBuf::from("ppg").join(format!("{}.ppg", f.id));
            let ali_rel = PathBuf::from("align").join(format!("{}.ali", f.id));
            write_file(&out_dir.join(&ppg_rel), &write_ppg_file(&f.ppg))?;
            write_file(&out_dir.join(&ali_rel), &write_alignment(&f.segments, &inv))?;
            records.push(UtteranceRecord {
                id: f.id.clone(),
                label: f.label,
                ppg_path: ppg_rel,
                align_path: Some(ali_rel),
            });
        }
        let path = out_dir.join(format!("{name}.tsv"));
        write_file(&path, &write_manifest(&records))?;
        manifests.push(path);
        counts.push(records.len());
    }
    let meta = DatasetMeta {
        config: cfg.clone(),
        languages: (0..cfg.num_languages).map(|k| format!("lang{k}")).collect(),
        language_seeds: lms.iter().map(|l| l.seed).collect(),
        fragments: counts,
    };
    let meta_path = out_dir.join("meta.json");
    write_file(&meta_path, &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    Ok(DatasetPaths {
        inventory,
        meta: meta_path,
        manifests: manifests.try_into().expect("three splits"),
    })
}
