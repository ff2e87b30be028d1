//! Evaluation suite: BLEU / ROUGE-1 / ROUGE-L / METEOR for answer text,
//! Fréchet feature distance plus fidelity / agreement / diversity for
//! generated images.
//!
//! Text metrics use the standard definitions with these recorded choices:
//! unsmoothed BLEU, ROUGE as F1, METEOR with exact unigram matches only
//! (no stemming or synonyms). Image metrics run on a fixed seeded
//! random-projection feature extractor, so absolute magnitudes are not
//! comparable to published embedding-based scores.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{sym_eigen, Tensor};
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

// ── Text normalization ──────────────────────────────────────────────

const TRAILING_PUNCT: &[char] = &['?', '.', ',', '!', ';', ':'];

/// Metric tokenization: lowercase, split on whitespace, strip trailing
/// punctuation. Tokens that were pure punctuation are dropped.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_end_matches(TRAILING_PUNCT)
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

// ── Text metrics ────────────────────────────────────────────────────

/// Unsmoothed BLEU: geometric mean of clipped n-gram precisions up to
/// `min(max_n, |candidate|)` times the brevity penalty `exp(1 - r/c)`
/// for candidates shorter than the reference. Any zero precision gives 0.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("bleu: empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let upper = max_n.min(candidate.len()).max(1);
    let mut log_sum = 0.0;
    for n in 1..=upper {
        let cand = ngram_counts(candidate, n);
        let reference_counts = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(*reference_counts.get(gram).unwrap_or(&0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / upper as f64).exp();
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(precision * bp)
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge_1(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("rouge_1: empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let cand = ngram_counts(candidate, 1);
    let reference_counts = ngram_counts(reference, 1);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(*reference_counts.get(g).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

/// LCS-based F1: P = LCS/|c|, R = LCS/|r|, F = 2PR/(P+R).
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("rouge_l: empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// METEOR with exact unigram alignment (greedy earliest-unused match):
/// F = 10PR/(R+9P), penalty = 0.5 (chunks/m)^3, score = F (1 - penalty).
pub fn meteor(candidate: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("meteor: empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (ci, word) in candidate.iter().enumerate() {
        if let Some(ri) = (0..reference.len()).find(|&ri| !used[ri] && reference[ri] == *word) {
            used[ri] = true;
            alignment.push((ci, ri));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return Ok(0.0);
    }
    let mut chunks = 1;
    for w in alignment.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f * (1.0 - penalty))
}

/// Per-run text metric record; all values in [0, 1].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "epoch,bleu,rouge1,rougeL,meteor"
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{:.6},{:.6},{:.6},{:.6}",
            self.bleu, self.rouge1, self.rouge_l, self.meteor
        )
    }
}

/// Scores one candidate/reference pair of raw strings.
pub fn score_pair(candidate: &str, reference: &str) -> Result<MetricReport> {
    let c = normalize(candidate);
    let r = normalize(reference);
    Ok(MetricReport {
        bleu: bleu(&c, &r, 4)?,
        rouge1: rouge_1(&c, &r)?,
        rouge_l: rouge_l(&c, &r)?,
        meteor: meteor(&c, &r)?,
    })
}

/// Mean metrics over candidate/reference pairs.
pub fn score_batch<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<MetricReport> {
    let mut sum = MetricReport::default();
    let mut n = 0usize;
    for (c, r) in pairs {
        let s = score_pair(c, r)?;
        sum.bleu += s.bleu;
        sum.rouge1 += s.rouge1;
        sum.rouge_l += s.rouge_l;
        sum.meteor += s.meteor;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("score_batch: no prediction pairs".into()));
    }
    let k = n as f64;
    Ok(MetricReport {
        bleu: sum.bleu / k,
        rouge1: sum.rouge1 / k,
        rouge_l: sum.rouge_l / k,
        meteor: sum.meteor / k,
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

/// Reads a JSON-lines predictions file ({id, candidate, reference}).
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: Prediction = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("predictions line {}: {e}", lineno + 1)))?;
        out.push(pred);
    }
    Ok(out)
}

/// Batch evaluator over a predictions file; writes a one-row metric CSV.
pub fn evaluate_predictions_file(
    predictions: &Path,
    csv_out: &Path,
    epoch: usize,
) -> Result<MetricReport> {
    let preds = read_predictions(predictions)?;
    let report = score_batch(
        preds
            .iter()
            .map(|p| (p.candidate.as_str(), p.reference.as_str())),
    )?;
    let mut f = std::fs::File::create(csv_out)?;
    writeln!(f, "{}", MetricReport::csv_header())?;
    writeln!(f, "{}", report.csv_row(epoch))?;
    Ok(report)
}

// ── Image feature space ─────────────────────────────────────────────

pub const FEATURE_DIM: usize = 16;

/// Fixed seeded projection (flattened image -> 16 dims) followed by tanh,
/// plus a parallel fixed projection for prompt embeddings into the same
/// space. Never trained; deterministic across runs given the seed.
pub struct FeatureExtractor {
    seed: u64,
    image_proj: RefCell<HashMap<usize, Vec<f64>>>,
    prompt_proj: RefCell<HashMap<usize, Vec<f64>>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        FeatureExtractor {
            seed,
            image_proj: RefCell::new(HashMap::new()),
            prompt_proj: RefCell::new(HashMap::new()),
        }
    }

    fn projection(
        &self,
        cache: &RefCell<HashMap<usize, Vec<f64>>>,
        tag: &str,
        dim: usize,
    ) -> Vec<f64> {
        cache
            .borrow_mut()
            .entry(dim)
            .or_insert_with(|| {
                let mut r = rng::substream(self.seed, tag, &[dim as u64]);
                rng::randn_vec(&mut r, FEATURE_DIM * dim, 1.0 / (dim as f64).sqrt())
            })
            .clone()
    }

    /// 16-dim tanh feature of a flattened image.
    pub fn image_features(&self, flat_pixels: &[f64]) -> Vec<f64> {
        let dim = flat_pixels.len();
        let proj = self.projection(&self.image_proj, "feat.image", dim);
        (0..FEATURE_DIM)
            .map(|row| {
                let dot: f64 = proj[row * dim..(row + 1) * dim]
                    .iter()
                    .zip(flat_pixels)
                    .map(|(w, p)| w * p)
                    .sum();
                dot.tanh()
            })
            .collect()
    }

    /// Projects a prompt embedding into the shared 16-dim space.
    pub fn prompt_features(&self, embedding: &[f64]) -> Vec<f64> {
        let dim = embedding.len();
        let proj = self.projection(&self.prompt_proj, "feat.prompt", dim);
        (0..FEATURE_DIM)
            .map(|row| {
                proj[row * dim..(row + 1) * dim]
                    .iter()
                    .zip(embedding)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn feature_moments(features: &[Vec<f64>]) -> (Vec<f64>, Tensor) {
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Unbiased covariance (n - 1 denominator).
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for c in &mut cov {
        *c /= denom;
    }
    (mean, Tensor::new(cov, &[d, d]).expect("square covariance"))
}

fn check_symmetric(sigma: &Tensor, ctx: &str) -> Result<usize> {
    let shape = sigma.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "{ctx}: covariance must be square, got {shape:?}"
        )));
    }
    let n = shape[0];
    let d = sigma.data();
    for i in 0..n {
        for j in (i + 1)..n {
            if (d[i * n + j] - d[j * n + i]).abs() > 1e-8 {
                return Err(Error::Contract(format!(
                    "{ctx}: covariance not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(n)
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn psd_sqrt(sigma: &Tensor) -> Result<Tensor> {
    let n = sigma.shape()[0];
    let (vals, vecs) = sym_eigen(sigma)?;
    let v = vecs.data();
    let lam: Vec<f64> = vals.data().iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v[i * n + k] * lam[k] * v[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(out, &[n, n])
}

fn square_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace term
/// computed through the symmetric form `tr sqrt(S1^{1/2} S2 S1^{1/2})`.
pub fn frechet_distance(mu1: &[f64], sigma1: &Tensor, mu2: &[f64], sigma2: &Tensor) -> Result<f64> {
    let n = check_symmetric(sigma1, "frechet_distance sigma1")?;
    let n2 = check_symmetric(sigma2, "frechet_distance sigma2")?;
    if n != n2 || mu1.len() != n || mu2.len() != n {
        return Err(Error::Shape(format!(
            "frechet_distance: dimension mismatch (mu {} / {}, sigma {n} / {n2})",
            mu1.len(),
            mu2.len()
        )));
    }
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr1: f64 = (0..n).map(|i| sigma1.data()[i * n + i]).sum();
    let tr2: f64 = (0..n).map(|i| sigma2.data()[i * n + i]).sum();

    let s1h = psd_sqrt(sigma1)?;
    let tmp = square_matmul(s1h.data(), sigma2.data(), n);
    let inner_raw = square_matmul(&tmp, s1h.data(), n);
    // Symmetrize before the eigen pass; the product is symmetric up to
    // rounding.
    let mut inner = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            inner[i * n + j] = 0.5 * (inner_raw[i * n + j] + inner_raw[j * n + i]);
        }
    }
    let (vals, _) = sym_eigen(&Tensor::new(inner, &[n, n])?)?;
    let tr_sqrt: f64 = vals.data().iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok((mean_term + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet feature distance between two image sets (each >= 2 images of
/// equal dimensions).
pub fn fbd(real: &[Vec<f64>], generated: &[Vec<f64>], extractor: &FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Input(format!(
            "fbd needs >= 2 images per set, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let dim = real[0].len();
    if real.iter().chain(generated).any(|img| img.len() != dim) {
        return Err(Error::Input("fbd: image dimensions differ".into()));
    }
    let rf: Vec<Vec<f64>> = real.iter().map(|i| extractor.image_features(i)).collect();
    let gf: Vec<Vec<f64>> = generated
        .iter()
        .map(|i| extractor.image_features(i))
        .collect();
    let (mu_r, sig_r) = feature_moments(&rf);
    let (mu_g, sig_g) = feature_moments(&gf);
    frechet_distance(&mu_r, &sig_r, &mu_g, &sig_g)
}

/// Mean over generated images of the max cosine similarity to any real
/// image feature.
pub fn fidelity(
    generated: &[Vec<f64>],
    real: &[Vec<f64>],
    extractor: &FeatureExtractor,
) -> Result<f64> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::Input("fidelity: empty image set".into()));
    }
    let rf: Vec<Vec<f64>> = real.iter().map(|i| extractor.image_features(i)).collect();
    let mut total = 0.0;
    for g in generated {
        let gf = extractor.image_features(g);
        let best = rf
            .iter()
            .map(|r| cosine(&gf, r))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / generated.len() as f64)
}

/// Mean cosine similarity between each image feature and its prompt's
/// projected embedding (one prompt embedding per image).
pub fn agreement(
    generated: &[Vec<f64>],
    prompt_embeddings: &[Vec<f64>],
    extractor: &FeatureExtractor,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Input("agreement: empty image set".into()));
    }
    if generated.len() != prompt_embeddings.len() {
        return Err(Error::Input(format!(
            "agreement: {} images but {} prompts",
            generated.len(),
            prompt_embeddings.len()
        )));
    }
    let mut total = 0.0;
    for (img, emb) in generated.iter().zip(prompt_embeddings) {
        let f = extractor.image_features(img);
        let p = extractor.prompt_features(emb);
        total += cosine(&f, &p);
    }
    Ok(total / generated.len() as f64)
}

/// Mean pairwise (1 - cosine) among generated features; fewer than two
/// images gives 0 by definition.
pub fn diversity(generated: &[Vec<f64>], extractor: &FeatureExtractor) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Input("diversity: empty image set".into()));
    }
    if generated.len() < 2 {
        return Ok(0.0);
    }
    let feats: Vec<Vec<f64>> = generated
        .iter()
        .map(|i| extractor.image_features(i))
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            total += 1.0 - cosine(&feats[i], &feats[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Per-epoch generation metric record.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GenReport {
    pub fidelity: f64,
    pub agreement: f64,
    pub diversity: f64,
    pub fbd: f64,
}

impl GenReport {
    pub fn csv_header() -> &'static str {
        "epoch,fidelity,agreement,diversity,fbd"
    }

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{:.6},{:.6},{:.6},{:.6}",
            self.fidelity, self.agreement, self.diversity, self.fbd
        )
    }
}
