//! Segmentation of token states into overlapping fixed-length windows,
//! average and importance-weighted pooling, and importance-label construction.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel size `k` and stride `d_s` of the segment windows. Windows that run
/// past the end of the document are right-padded with zero vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl SegmentationSpec {
    pub fn new(kernel: usize, stride: usize) -> Result<Self> {
        let spec = SegmentationSpec { kernel, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config("segment kernel and stride must be positive".into()));
        }
        if self.stride > self.kernel {
            return Err(Error::Config(format!(
                "segment stride {} exceeds kernel {}: tokens would be skipped",
                self.stride, self.kernel
            )));
        }
        Ok(())
    }

    /// Number of segments for a document of `n` tokens.
    pub fn num_segments(&self, n: usize) -> usize {
        if n <= self.kernel {
            1
        } else {
            (n - self.kernel).div_ceil(self.stride) + 1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    /// Window length including padding; always the kernel size.
    pub len: usize,
    /// Slots backed by real tokens.
    pub valid: usize,
}

impl Segment {
    pub fn padded(&self) -> usize {
        self.len - self.valid
    }

    pub fn tokens(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.valid
    }
}

/// Segment `j` covers tokens `j*d_s .. j*d_s + k - 1`.
pub fn segment_index_map(n: usize, spec: &SegmentationSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("cannot segment an empty document".into()));
    }
    Ok((0..spec.num_segments(n))
        .map(|j| {
            let start = j * spec.stride;
            Segment { start, len: spec.kernel, valid: spec.kernel.min(n - start) }
        })
        .collect())
}

/// For each token, the segment whose window contains it and whose window
/// centre is nearest; ties go to the lower segment index.
pub fn corresponding_segment(n: usize, spec: &SegmentationSpec) -> Result<Vec<usize>> {
    let segments = segment_index_map(n, spec)?;
    let mut out = vec![0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (j, s) in segments.iter().enumerate() {
            if !s.tokens().contains(&i) {
                continue;
            }
            // Twice the distance to the centre start + (k-1)/2, kept integral.
            let dist2 = (2 * i).abs_diff(2 * s.start + s.len - 1);
            if best.map_or(true, |(_, d)| dist2 < d) {
                best = Some((j, dist2));
            }
        }
        *slot = best.expect("segments cover every token").0;
    }
    Ok(out)
}

/// Sparse linear pooling map: segment `j` is `sum_i coef * e_i` over its row.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPlan {
    n_in: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl PoolPlan {
    /// Average pooling with literal weight `1/k`; padded slots add zero.
    pub fn average(n: usize, spec: &SegmentationSpec) -> Result<Self> {
        let coef = 1.0 / spec.kernel as f64;
        let rows = segment_index_map(n, spec)?
            .iter()
            .map(|s| s.tokens().map(|i| (i, coef)).collect())
            .collect();
        Ok(PoolPlan { n_in: n, rows })
    }

    /// Softmax of `weights` within each window, over real tokens only.
    pub fn weighted(weights: &ImportanceWeights, spec: &SegmentationSpec) -> Result<Self> {
        let p = weights.as_slice();
        let n = p.len();
        if let Some(i) = p.iter().position(|x| !x.is_finite()) {
            return Err(Error::Input(format!("importance weight {i} is not finite")));
        }
        let rows = segment_index_map(n, spec)?
            .iter()
            .map(|s| {
                let max = s.tokens().map(|i| p[i]).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<(usize, f64)> = s.tokens().map(|i| (i, (p[i] - max).exp())).collect();
                let z: f64 = exps.iter().map(|(_, e)| e).sum();
                exps.into_iter().map(|(i, e)| (i, e / z)).collect()
            })
            .collect();
        Ok(PoolPlan { n_in: n, rows })
    }

    pub fn num_segments(&self) -> usize {
        self.rows.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.n_in
    }

    pub fn coefficients(&self, segment: usize) -> &[(usize, f64)] {
        &self.rows[segment]
    }

    pub(crate) fn apply(&self, e: &Tensor) -> Result<Tensor> {
        let (n, d) = e.dims2()?;
        if n != self.n_in {
            return Err(Error::Shape(format!("pool plan for {} tokens applied to {n}", self.n_in)));
        }
        let mut out = Tensor::zeros(&[self.rows.len(), d]);
        for (j, row) in self.rows.iter().enumerate() {
            let oj = out.row_mut(j);
            for &(i, c) in row {
                for (o, x) in oj.iter_mut().zip(e.row(i)) {
                    *o += c * x;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn transpose_apply(&self, g: &Tensor, shape: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(shape);
        for (j, row) in self.rows.iter().enumerate() {
            let gj = g.row(j);
            for &(i, c) in row {
                for (o, x) in out.row_mut(i).iter_mut().zip(gj) {
                    *o += c * x;
                }
            }
        }
        out
    }
}

pub fn pool_average(e: &Tensor, spec: &SegmentationSpec) -> Result<Tensor> {
    let (n, _) = e.dims2()?;
    PoolPlan::average(n, spec)?.apply(e)
}

pub fn pool_weighted(e: &Tensor, weights: &ImportanceWeights, spec: &SegmentationSpec) -> Result<Tensor> {
    let (n, _) = e.dims2()?;
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} tokens", weights.len())));
    }
    PoolPlan::weighted(weights, spec)?.apply(e)
}

/// Per-token pooling weights `p_n`; any finite reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights(Vec<f64>);

impl ImportanceWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("importance weights must be finite".into()));
        }
        Ok(ImportanceWeights(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-token binary importance labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportanceLabels(Vec<u8>);

impl ImportanceLabels {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Input("labels must be 0 or 1".into()));
        }
        Ok(ImportanceLabels(labels))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&l| l == 1).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&l| f64::from(l)).collect()
    }
}

pub fn labels_to_weights(labels: &ImportanceLabels, hi: f64, lo: f64) -> Result<ImportanceWeights> {
    if !(hi > lo) {
        return Err(Error::Config(format!("label weights need hi > lo, got hi={hi} lo={lo}")));
    }
    ImportanceWeights::new(labels.as_slice().iter().map(|&l| if l == 1 { hi } else { lo }).collect())
}

/// Lowercases, then strips suffixes: one of `sses -> ss`, `ies -> i`, or a
/// trailing `s` (words longer than 3), followed by `ing`/`ed` when at least
/// three characters remain.
pub fn stem(word: &str) -> String {
    let mut w = word.to_lowercase();
    if w.ends_with("sses") {
        w.truncate(w.len() - 2);
    } else if w.ends_with("ies") {
        w.truncate(w.len() - 2);
    } else if w.ends_with('s') && w.chars().count() > 3 {
        w.pop();
    }
    for suffix in ["ing", "ed"] {
        if let Some(rest) = w.strip_suffix(suffix) {
            if rest.chars().count() >= 3 {
                w.truncate(rest.len());
                break;
            }
        }
    }
    w
}

const DEFAULT_STOPWORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "if", "of", "at", "by", "for", "with", "about", "to", "from",
    "in", "on", "up", "out", "as", "is", "are", "was", "were", "be", "been", "being", "have", "has",
    "had", "do", "does", "did", "it", "its", "this", "that", "these", "those", "i", "you", "he", "she",
    "we", "they", "not", "no", "so", "than", "too",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Stopwords(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl Stopwords {
    pub fn empty() -> Self {
        Stopwords(HashSet::new())
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Stopwords(words.into_iter().map(|w| w.as_ref().trim().to_lowercase()).filter(|w| !w.is_empty()).collect())
    }

    /// UTF-8 file, one word per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A document token is important when it is not a stopword and its stem
/// occurs among the stems of the reference tokens.
pub fn build_importance_labels<S: AsRef<str>>(doc: &[S], reference: &[S], stopwords: &Stopwords) -> ImportanceLabels {
    let ref_stems: HashSet<String> = reference.iter().map(|r| stem(r.as_ref())).collect();
    ImportanceLabels(
        doc.iter()
            .map(|t| {
                let t = t.as_ref();
                u8::from(!stopwords.contains(t) && ref_stems.contains(&stem(t)))
            })
            .collect(),
    )
}

/// Label file: one document per line, whitespace-separated 0/1 per token.
pub fn read_label_file(path: &Path) -> Result<Vec<ImportanceLabels>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(ln, line)| {
            let labels = line
                .split_whitespace()
                .map(|tok| match tok {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Input(format!("{}:{}: bad label {other:?}", path.display(), ln + 1))),
                })
                .collect::<Result<Vec<u8>>>()?;
            Ok(ImportanceLabels(labels))
        })
        .collect()
}

pub fn format_labels(docs: &[ImportanceLabels]) -> String {
    let mut out = String::new();
    for doc in docs {
        let line: Vec<&str> = doc.0.iter().map(|&l| if l == 1 { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_label_file(path: &Path, docs: &[ImportanceLabels]) -> Result<()> {
    std::fs::write(path, format_labels(docs)).map_err(|e| Error::io(path, e))
}
