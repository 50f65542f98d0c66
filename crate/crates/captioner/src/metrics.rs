//! Caption quality and diversity metrics: clipped n-gram precision (BLEU-4),
//! TF-IDF n-gram similarity (CIDEr), distinct n-gram ratios, eigenvalue-based
//! set diversity, and scene-text coverage.

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::vocab::tokenize;

const MAX_ORDER: usize = 4;

type Gram = Vec<String>;

fn gram_counts(words: &[String], n: usize) -> HashMap<Gram, f64> {
    let mut m = HashMap::new();
    if n == 0 || words.len() < n {
        return m;
    }
    for i in 0..=words.len() - n {
        *m.entry(words[i..i + n].to_vec()).or_insert(0.0) += 1.0;
    }
    m
}

/// Document frequencies over an evaluation corpus: each image counts once per
/// n-gram, no matter how many of its references contain it.
#[derive(Clone, Debug, Default)]
pub struct DfCorpus {
    images: usize,
    df: HashMap<Gram, f64>,
}

impl DfCorpus {
    /// `refs_per_image[i]` holds the reference captions of image i.
    pub fn from_refs(refs_per_image: &[Vec<String>]) -> DfCorpus {
        let mut df = HashMap::new();
        for refs in refs_per_image {
            let mut grams: HashSet<Gram> = HashSet::new();
            for r in refs {
                let words = tokenize(r);
                for n in 1..=MAX_ORDER {
                    grams.extend(gram_counts(&words, n).into_keys());
                }
            }
            for g in grams {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        DfCorpus { images: refs_per_image.len(), df }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    /// Smoothed inverse document frequency, strictly positive even for grams
    /// present in every image of a one-image corpus.
    pub fn idf(&self, gram: &Gram) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0.0);
        ((self.images as f64 + 1.0) / (df + 1.0)).ln() + 1.0
    }
}

fn order_cosine(a: &HashMap<Gram, f64>, b: &HashMap<Gram, f64>, df: &DfCorpus) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (g, &ca) in a {
        let w = df.idf(g);
        na += (ca * w) * (ca * w);
        if let Some(&cb) = b.get(g) {
            dot += (ca * w) * (cb * w);
        }
    }
    for (g, &cb) in b {
        let w = df.idf(g);
        nb += (cb * w) * (cb * w);
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean TF-IDF n-gram cosine over orders 1..=4, in [0,1]. Identical token
/// sequences score exactly 1 regardless of length; otherwise an order with an
/// empty side contributes 0.
pub fn caption_similarity(a: &str, b: &str, df: &DfCorpus) -> f64 {
    let wa = tokenize(a);
    let wb = tokenize(b);
    if wa == wb {
        return 1.0;
    }
    let mut total = 0.0;
    for n in 1..=MAX_ORDER {
        total += order_cosine(&gram_counts(&wa, n), &gram_counts(&wb, n), df);
    }
    total / MAX_ORDER as f64
}

/// TF-IDF similarity to each reference, averaged, times 10.
pub fn cider(candidate: &str, refs: &[String], df: &DfCorpus) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let total: f64 = refs.iter().map(|r| caption_similarity(candidate, r, df)).sum();
    10.0 * total / refs.len() as f64
}

/// Sentence BLEU-4 with clipped precision, geometric mean over orders, brevity
/// penalty against the closest reference length (ties to the shorter), and no
/// smoothing: any empty order zeroes the score. A candidate that matches a
/// reference word for word scores 1 outright, which keeps identity exact even
/// for captions too short to have higher-order n-grams.
pub fn bleu4(candidate: &str, refs: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let ref_words: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
    if ref_words.iter().any(|r| *r == cand) {
        return 1.0;
    }

    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let counts = gram_counts(&cand, n);
        let total: f64 = counts.values().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut clipped = 0.0;
        for (g, &c) in &counts {
            let best_ref = ref_words
                .iter()
                .map(|r| gram_counts(r, n).get(g).copied().unwrap_or(0.0))
                .fold(0.0, f64::max);
            clipped += c.min(best_ref);
        }
        if clipped == 0.0 {
            return 0.0;
        }
        log_sum += (clipped / total).ln();
    }

    let c_len = cand.len() as f64;
    let r_len = ref_words
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
        .unwrap_or(0) as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * (log_sum / MAX_ORDER as f64).exp()
}

/// Distinct n-grams over total n-grams, pooled across the caption set. 0 when
/// no caption has an n-gram of this order.
pub fn div_n(captions: &[String], n: usize) -> f64 {
    let mut distinct: HashSet<Gram> = HashSet::new();
    let mut total = 0.0;
    for cap in captions {
        let words = tokenize(cap);
        for (g, c) in gram_counts(&words, n) {
            total += c;
            distinct.insert(g);
        }
    }
    if total == 0.0 {
        0.0
    } else {
        distinct.len() as f64 / total
    }
}

/// Diversity of a caption set from the eigenvalue concentration of its
/// pairwise-similarity kernel: 0 when one caption dominates (identical set),
/// 1 when all captions are mutually dissimilar. None for fewer than 2 captions.
pub fn self_cider(captions: &[String], df: &DfCorpus) -> Option<f64> {
    let k = captions.len();
    if k < 2 {
        return None;
    }
    let mut kernel = vec![vec![0.0; k]; k];
    for i in 0..k {
        kernel[i][i] = 1.0;
        for j in i + 1..k {
            let s = caption_similarity(&captions[i], &captions[j], df);
            kernel[i][j] = s;
            kernel[j][i] = s;
        }
    }
    self_cider_from_kernel(&kernel)
}

/// Eigenvalue form of the set-diversity score over a symmetric similarity
/// kernel with unit diagonal.
pub fn self_cider_from_kernel(kernel: &[Vec<f64>]) -> Option<f64> {
    let k = kernel.len();
    if k < 2 {
        return None;
    }
    if kernel.iter().all(|row| row.iter().all(|&v| v == 1.0)) {
        // one repeated caption: rank-one kernel, exactly zero diversity
        return Some(0.0);
    }
    let m = DMatrix::from_fn(k, k, |i, j| kernel[i][j]);
    let eig = m.symmetric_eigen();
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= 0.0 {
        return Some(0.0);
    }
    let top = clipped.iter().cloned().fold(0.0, f64::max);
    let score = -(top / sum).ln() / (k as f64).ln();
    Some(score.clamp(0.0, 1.0))
}

/// Fraction of the scene's distinct token texts (case-folded, tokenized) that
/// appear somewhere in the caption set. None when the scene has no tokens.
pub fn cover_ratio(captions: &[String], ocr_texts: &[String]) -> Option<f64> {
    let targets: HashSet<Vec<String>> =
        ocr_texts.iter().map(|t| tokenize(t)).filter(|t| !t.is_empty()).collect();
    if targets.is_empty() {
        return None;
    }
    let caption_words: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let covered = targets
        .iter()
        .filter(|span| {
            caption_words.iter().any(|words| {
                span.len() <= words.len()
                    && (0..=words.len() - span.len()).any(|p| &words[p..p + span.len()] == span.as_slice())
            })
        })
        .count();
    Some(covered as f64 / targets.len() as f64)
}

/// Everything needed to score one image.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    /// Generated captions, best first.
    pub captions: Vec<String>,
    pub refs: Vec<String>,
    pub ocr_texts: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub captions: usize,
    pub bleu4: Option<f64>,
    pub cider: Option<f64>,
    pub div1: Option<f64>,
    pub div2: Option<f64>,
    pub self_cider: Option<f64>,
    pub cover_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CorpusMeans {
    pub bleu4: Option<f64>,
    pub cider: Option<f64>,
    pub div1: Option<f64>,
    pub div2: Option<f64>,
    pub self_cider: Option<f64>,
    pub cover_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// What was scored: "generated" or "refs".
    pub source: String,
    pub images: usize,
    pub corpus: CorpusMeans,
    pub per_image: Vec<ImageMetrics>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Score a corpus. Accuracy metrics use the first caption against the
/// references; diversity metrics pool the whole caption set. Images missing
/// the inputs a metric needs are excluded from that metric's mean.
pub fn evaluate(items: &[EvalItem], source: &str) -> MetricReport {
    let df = DfCorpus::from_refs(&items.iter().map(|i| i.refs.clone()).collect::<Vec<_>>());
    let per_image: Vec<ImageMetrics> = items
        .iter()
        .map(|item| {
            let top1 = item.captions.first();
            let scored = top1.filter(|_| !item.refs.is_empty());
            ImageMetrics {
                id: item.id.clone(),
                captions: item.captions.len(),
                bleu4: scored.map(|c| bleu4(c, &item.refs)),
                cider: scored.map(|c| cider(c, &item.refs, &df)),
                div1: (!item.captions.is_empty()).then(|| div_n(&item.captions, 1)),
                div2: (!item.captions.is_empty()).then(|| div_n(&item.captions, 2)),
                self_cider: self_cider(&item.captions, &df),
                cover_ratio: cover_ratio(&item.captions, &item.ocr_texts),
            }
        })
        .collect();
    let corpus = CorpusMeans {
        bleu4: mean_of(per_image.iter().map(|m| m.bleu4)),
        cider: mean_of(per_image.iter().map(|m| m.cider)),
        div1: mean_of(per_image.iter().map(|m| m.div1)),
        div2: mean_of(per_image.iter().map(|m| m.div2)),
        self_cider: mean_of(per_image.iter().map(|m| m.self_cider)),
        cover_ratio: mean_of(per_image.iter().map(|m| m.cover_ratio)),
    };
    MetricReport { source: source.to_string(), images: items.len(), corpus, per_image }
}
