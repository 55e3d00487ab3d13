//! Phonotactic baseline: bag-of-n-grams over phone sequences and a
//! one-vs-rest linear SVM trained by Pegasos subgradient steps.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::ppg::PhoneInventory;
use crate::seeds::derived_rng;
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Raw,
    L2,
    /// Counts times smoothed IDF, then L2-normalized.
    TfIdf,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Raw => "raw",
            Weighting::L2 => "l2",
            Weighting::TfIdf => "tfidf",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Weighting::Raw),
            "l2" => Ok(Weighting::L2),
            "tfidf" => Ok(Weighting::TfIdf),
            other => Err(Error::Config(format!(
                "unknown weighting `{other}` (expected raw, l2 or tfidf)"
            ))),
        }
    }
}

/// Every n-gram of order 1..=n_max with its count.
pub fn count_ngrams(seq: &[usize], n_max: usize) -> BTreeMap<Vec<usize>, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=n_max.min(seq.len()) {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// N-gram → feature index map built from training sequences. Indices follow
/// the lexicographic order of the n-grams.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramVocab {
    n_max: usize,
    index: BTreeMap<Vec<usize>, usize>,
    doc_freq: Vec<usize>,
    num_docs: usize,
}

impl NGramVocab {
    pub fn build(seqs: &[Vec<usize>], n_max: usize) -> Result<Self> {
        if n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        let mut df: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for s in seqs {
            for gram in count_ngrams(s, n_max).into_keys() {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        let doc_freq = df.values().copied().collect();
        let index = df.into_keys().enumerate().map(|(i, g)| (g, i)).collect();
        Ok(Self {
            n_max,
            index,
            doc_freq,
            num_docs: seqs.len(),
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, gram: &[usize]) -> Option<usize> {
        self.index.get(gram).copied()
    }

    /// N-grams in index order.
    pub fn ngrams(&self) -> impl Iterator<Item = &[usize]> {
        self.index.keys().map(Vec::as_slice)
    }

    pub fn idf(&self, i: usize) -> f64 {
        ((1 + self.num_docs) as f64 / (1 + self.doc_freq[i]) as f64).ln() + 1.0
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn new(pairs: Vec<(usize, f64)>) -> Result<Self> {
        if pairs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Input("sparse indices must be strictly increasing".into()));
        }
        if pairs.iter().any(|p| !p.1.is_finite()) {
            return Err(Error::NonFinite("sparse feature value".into()));
        }
        Ok(Self {
            indices: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| dense[i] * v).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.last().copied()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn featurize(seq: &[usize], vocab: &NGramVocab, weighting: Weighting) -> Result<SparseVec> {
    if seq.is_empty() {
        return Err(Error::Input("empty phone sequence".into()));
    }
    let mut pairs: Vec<(usize, f64)> = count_ngrams(seq, vocab.n_max)
        .into_iter()
        .filter_map(|(g, c)| vocab.get(&g).map(|i| (i, c as f64)))
        .collect();
    pairs.sort_by_key(|p| p.0);
    if weighting == Weighting::TfIdf {
        pairs.iter_mut().for_each(|p| p.1 *= vocab.idf(p.0));
    }
    if weighting != Weighting::Raw {
        let norm = pairs.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
        if norm > 0.0 {
            pairs.iter_mut().for_each(|p| p.1 /= norm);
        }
    }
    SparseVec::new(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
        }
    }
}

/// One-vs-rest linear classifier. Each weight row has `dim + 1` entries; the
/// last multiplies a constant bias feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginClassifier {
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    /// Regularized objective of each class's averaged iterate after each epoch.
    pub objective: Vec<Vec<f64>>,
}

fn score(w: &[f64], x: &SparseVec) -> f64 {
    x.dot(w) + w[w.len() - 1]
}

fn objective(w: &[f64], lambda: f64, data: &[(SparseVec, f64, f64)]) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = data.iter().map(|(x, y, q)| q * (1.0 - y * score(w, x)).max(0.0)).sum();
    reg + loss
}

/// Pegasos over weighted unique examples `(x, ±1, weight)`, weights summing
/// to 1. Returns the average of all iterates and the per-epoch objective.
fn pegasos(
    data: &[(SparseVec, f64, f64)],
    dim: usize,
    cfg: &SvmConfig,
    stream: u64,
) -> (Vec<f64>, Vec<f64>) {
    let u = data.len() as f64;
    let mut rng = derived_rng(cfg.seed, stream, 0);
    let mut w = vec![0.0; dim + 1];
    let mut avg = vec![0.0; dim + 1];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let radius = 1.0 / cfg.lambda.sqrt();
    let mut t = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let (x, y, q) = &data[i];
            let eta = 1.0 / (cfg.lambda * t as f64);
            let margin = y * score(&w, x);
            let shrink = 1.0 - eta * cfg.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                let step = eta * u * q * y;
                for (j, v) in x.iter() {
                    w[j] += step * v;
                }
                w[dim] += step;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
            }
            let k = 1.0 / t as f64;
            avg.iter_mut().zip(&w).for_each(|(a, v)| *a += (v - *a) * k);
        }
        history.push(objective(&avg, cfg.lambda, data));
    }
    (avg, history)
}

/// Trains one binary Pegasos SVM per class.
///
/// Identical `(features, label)` pairs are merged into a single weighted
/// example, so repeating the training set leaves the result unchanged.
pub fn train_margin_classifier(
    features: &[SparseVec],
    labels: &[usize],
    num_classes: usize,
    dim: usize,
    cfg: &SvmConfig,
) -> Result<MarginClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Input(format!(
            "{} feature vectors for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(cfg.lambda > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config("svm lambda and epochs must be positive".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!("label {l} outside {num_classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Input("training data contains a single class".into()));
    }
    if let Some(i) = features.iter().filter_map(SparseVec::max_index).find(|&i| i >= dim) {
        return Err(Error::Input(format!("feature index {i} outside dimension {dim}")));
    }

    let mut unique: Vec<(&SparseVec, usize, usize)> = Vec::new();
    for (x, &l) in features.iter().zip(labels) {
        match unique.iter_mut().find(|(ux, ul, _)| *ul == l && *ux == x) {
            Some(entry) => entry.2 += 1,
            None => unique.push((x, l, 1)),
        }
    }
    let n = features.len() as f64;
    let mut weights = Vec::with_capacity(num_classes);
    let mut history = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let data: Vec<(SparseVec, f64, f64)> = unique
            .iter()
            .map(|(x, l, k)| ((*x).clone(), if *l == c { 1.0 } else { -1.0 }, *k as f64 / n))
            .collect();
        let (w, h) = pegasos(&data, dim, cfg, c as u64);
        weights.push(w);
        history.push(h);
    }
    Ok(MarginClassifier {
        dim,
        weights,
        objective: history,
    })
}

impl MarginClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn scores(&self, x: &SparseVec) -> Result<Vec<f64>> {
        if let Some(i) = x.max_index().filter(|&i| i >= self.dim) {
            return Err(Error::Input(format!(
                "feature index {i} outside classifier dimension {}",
                self.dim
            )));
        }
        Ok(self.weights.iter().map(|w| score(w, x)).collect())
    }
}

/// Predicted class and the one-vs-rest margin scores.
pub fn predict_margin(x: &SparseVec, clf: &MarginClassifier) -> Result<(usize, Vec<f64>)> {
    let s = clf.scores(x)?;
    Ok((argmax(&s), s))
}

/// Vocabulary, weighting and classifier, stored together as text.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub vocab: NGramVocab,
    pub weighting: Weighting,
    pub classifier: MarginClassifier,
}

fn parse_pair(line: usize, tok: &str) -> Result<(usize, &str)> {
    let (i, v) = tok
        .split_once(':')
        .ok_or_else(|| Error::parse(line, ParseErrorKind::Other(format!("expected index:value, got `{tok}`"))))?;
    let i = i.parse().map_err(|_| Error::parse(line, ParseErrorKind::NotNumeric(i.into())))?;
    Ok((i, v))
}

impl NGramModel {
    pub fn to_text(&self, inv: &PhoneInventory) -> String {
        let v = &self.vocab;
        let mut s = format!(
            "# ngram-svm n_max={} weighting={} docs={} classes={} dim={}\n[vocab]\n",
            v.n_max,
            self.weighting,
            v.num_docs,
            self.classifier.num_classes(),
            self.classifier.dim
        );
        for (gram, i) in &v.index {
            let syms: Vec<&str> = gram.iter().map(|&p| inv.symbol(p).unwrap_or("?")).collect();
            let _ = writeln!(s, "{} {i}", syms.join(" "));
        }
        s.push_str("[doc_freq]\n");
        let df: Vec<String> = v.doc_freq.iter().enumerate().map(|(i, d)| format!("{i}:{d}")).collect();
        s.push_str(&df.join(" "));
        s.push_str("\n[weights]\n");
        for (c, w) in self.classifier.weights.iter().enumerate() {
            let _ = write!(s, "{c}");
            for (i, x) in w.iter().enumerate().filter(|(_, x)| **x != 0.0) {
                let _ = write!(s, " {i}:{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, inv: &PhoneInventory) -> Result<Self> {
        let bad = |line: usize, m: String| Error::parse(line, ParseErrorKind::Other(m));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty model file".into()))?;
        let mut fields = BTreeMap::new();
        for kv in header.trim_start_matches('#').split_whitespace().skip(1) {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k, v);
            }
        }
        let field = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(1, ParseErrorKind::Header(format!("missing `{k}`"))))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::parse(1, ParseErrorKind::Header(format!("bad `{k}`"))))
        };
        let (n_max, docs, classes, dim) = (num("n_max")?, num("docs")?, num("classes")?, num("dim")?);
        let weighting: Weighting = field("weighting")?.parse()?;

        let mut section = "";
        let mut index = BTreeMap::new();
        let mut doc_freq = vec![0; dim];
        let mut weights = vec![vec![0.0; dim + 1]; classes];
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') && !line.contains(' ') {
                section = match line {
                    "[vocab]" | "[doc_freq]" | "[weights]" => line,
                    other => return Err(bad(ln, format!("unknown section {other}"))),
                };
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match section {
                "[vocab]" => {
                    let (idx, syms) = toks.split_last().expect("non-empty line");
                    let idx: usize = idx.parse().map_err(|_| Error::parse(ln, ParseErrorKind::NotNumeric((*idx).into())))?;
                    if idx >= dim || syms.is_empty() || syms.len() > n_max {
                        return Err(bad(ln, format!("bad vocabulary entry `{line}`")));
                    }
                    let gram = syms
                        .iter()
                        .map(|s| inv.index_of(s).ok_or_else(|| Error::parse(ln, ParseErrorKind::UnknownPhone((*s).into()))))
                        .collect::<Result<Vec<_>>>()?;
                    index.insert(gram, idx);
                }
                "[doc_freq]" => {
                    for tok in toks {
                        let (i, v) = parse_pair(ln, tok)?;
                        if i >= dim {
                            return Err(bad(ln, format!("index {i} outside dimension {dim}")));
                        }
                        doc_freq[i] = v.parse().map_err(|_| Error::parse(ln, ParseErrorKind::NotNumeric(v.into())))?;
                    }
                }
                "[weights]" => {
                    let c: usize = toks[0].parse().map_err(|_| Error::parse(ln, ParseErrorKind::NotNumeric(toks[0].into())))?;
                    if c >= classes {
                        return Err(bad(ln, format!("class {c} outside {classes} classes")));
                    }
                    for tok in &toks[1..] {
                        let (i, v) = parse_pair(ln, tok)?;
                        if i > dim {
                            return Err(bad(ln, format!("index {i} outside dimension {dim}")));
                        }
                        weights[c][i] = v.parse().map_err(|_| Error::parse(ln, ParseErrorKind::NotNumeric(v.into())))?;
                    }
                }
                _ => return Err(bad(ln, "content outside a section".into())),
            }
        }
        if index.len() != dim {
            return Err(Error::Input(format!("vocabulary has {} entries, header says {dim}", index.len())));
        }
        Ok(Self {
            vocab: NGramVocab {
                n_max,
                index,
                doc_freq,
                num_docs: docs,
            },
            weighting,
            classifier: MarginClassifier {
                dim,
                weights,
                objective: Vec::new(),
            },
        })
    }
}
