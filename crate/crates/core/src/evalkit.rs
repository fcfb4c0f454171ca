//! Word-discrimination evaluation and embedding projection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{derive_seed, Corpus, Split, WordId};
use crate::encoder::{embed_all, EncoderParams};
use crate::error::{Error, Result};
use crate::objectives::cosine_distance;

pub const ENROLL_COUNT: usize = 5;
/// Operating point, in false alarms per hour.
pub const TARGET_FA_PER_HOUR: f64 = 1.0;
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentSet {
    pub keyword: WordId,
    /// Segment indices of the enrolled instances.
    pub segments: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Picks `ENROLL_COUNT` instances of `keyword` from `split`.
///
/// Returns the sorted segment indices. At least one further instance must
/// remain for testing.
pub fn select_enrollment(corpus: &Corpus, split: Split, keyword: WordId, seed: u64) -> Result<Vec<usize>> {
    let mut pool: Vec<usize> = corpus
        .split_indices(split)
        .into_iter()
        .filter(|&i| corpus.segments[i].word == keyword)
        .collect();
    if pool.len() < ENROLL_COUNT + 1 {
        return Err(Error::invalid(format!(
            "keyword `{}` has {} instances in {split}, need at least {}",
            corpus.word_name(keyword),
            pool.len(),
            ENROLL_COUNT + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split as u64, keyword.0 as u64]));
    pool.shuffle(&mut rng);
    let mut chosen = pool[..ENROLL_COUNT].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Enrolls one keyword using precomputed embeddings indexed by segment.
pub fn enroll(
    corpus: &Corpus,
    split: Split,
    keyword: WordId,
    seed: u64,
    embedding_of: impl Fn(usize) -> Vec<f64>,
) -> Result<EnrollmentSet> {
    let segments = select_enrollment(corpus, split, keyword, seed)?;
    let embeddings = segments.iter().map(|&i| embedding_of(i)).collect();
    Ok(EnrollmentSet {
        keyword,
        segments,
        embeddings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredTrial {
    pub segment: usize,
    pub keyword: WordId,
    /// Mean cosine distance to the enrollment embeddings; lower is closer.
    pub score: f64,
    pub is_target: bool,
}

/// Scores every trial against every enrolled keyword.
///
/// `trials` pairs a segment index with its word and embedding.
pub fn score_trials(enrollments: &[EnrollmentSet], trials: &[(usize, WordId, &[f64])]) -> Vec<ScoredTrial> {
    let mut out = Vec::with_capacity(enrollments.len() * trials.len());
    for e in enrollments {
        for &(segment, word, emb) in trials {
            let score = e.embeddings.iter().map(|q| cosine_distance(q, emb)).sum::<f64>()
                / e.embeddings.len() as f64;
            out.push(ScoredTrial {
                segment,
                keyword: e.keyword,
                score,
                is_target: word == e.keyword,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub recall: f64,
    pub fa_per_hour: f64,
}

/// Detection curve over all distinct-score midpoints plus both infinities,
/// in increasing threshold order. A trial is accepted when
/// `score <= threshold`.
pub fn sweep(trials: &[ScoredTrial], hours: f64) -> Result<Vec<SweepPoint>> {
    if !(hours > 0.0) {
        return Err(Error::invalid(format!("test hours must be positive, got {hours}")));
    }
    let targets = trials.iter().filter(|t| t.is_target).count();
    if targets == 0 || targets == trials.len() {
        return Err(Error::invalid(
            "sweep needs at least one target and one non-target trial",
        ));
    }
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for segment {}", t.segment)));
    }
    let mut sorted: Vec<(f64, bool)> = trials.iter().map(|t| (t.score, t.is_target)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = vec![SweepPoint {
        threshold: f64::NEG_INFINITY,
        recall: 0.0,
        fa_per_hour: 0.0,
    }];
    let (mut hit, mut fa) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                hit += 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() {
            s + (sorted[i].0 - s) / 2.0
        } else {
            f64::INFINITY
        };
        points.push(SweepPoint {
            threshold,
            recall: hit as f64 / targets as f64,
            fa_per_hour: fa as f64 / hours,
        });
    }
    Ok(points)
}

/// Recall at the largest threshold whose false-alarm rate is at most
/// `target`, interpolated linearly toward the next point when `target` lies
/// strictly between two sweep points.
pub fn recall_at_fa(points: &[SweepPoint], target: f64) -> f64 {
    let Some(k) = points.iter().rposition(|p| p.fa_per_hour <= target) else {
        return 0.0;
    };
    let p = points[k];
    match points.get(k + 1) {
        Some(q) if p.fa_per_hour < target => {
            let w = (target - p.fa_per_hour) / (q.fa_per_hour - p.fa_per_hour);
            p.recall + w * (q.recall - p.recall)
        }
        _ => p.recall,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub fa_per_hour: f64,
    pub recall: f64,
    /// Largest sweep threshold with at most `fa_per_hour` false alarms.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub operating_point: OperatingPoint,
    pub total_test_hours: f64,
    pub num_target_trials: usize,
    pub num_nontarget_trials: usize,
    /// Target acceptance per keyword at the operating-point threshold.
    pub per_keyword_recall: BTreeMap<String, f64>,
    /// Written separately as CSV.
    #[serde(skip)]
    pub sweep: Vec<SweepPoint>,
}

/// Builds the full report from scored trials.
pub fn report(corpus: &Corpus, split: Split, trials: &[ScoredTrial], hours: f64) -> Result<EvalReport> {
    let points = sweep(trials, hours)?;
    let recall = recall_at_fa(&points, TARGET_FA_PER_HOUR);
    let threshold = points
        .iter()
        .rev()
        .find(|p| p.fa_per_hour <= TARGET_FA_PER_HOUR)
        .map_or(f64::NEG_INFINITY, |p| p.threshold);
    let mut per_kw: BTreeMap<WordId, (usize, usize)> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.is_target) {
        let e = per_kw.entry(t.keyword).or_default();
        e.1 += 1;
        if t.score <= threshold {
            e.0 += 1;
        }
    }
    let num_target_trials = trials.iter().filter(|t| t.is_target).count();
    Ok(EvalReport {
        split,
        operating_point: OperatingPoint {
            fa_per_hour: TARGET_FA_PER_HOUR,
            recall,
            threshold,
        },
        total_test_hours: hours,
        num_target_trials,
        num_nontarget_trials: trials.len() - num_target_trials,
        per_keyword_recall: per_kw
            .into_iter()
            .map(|(w, (hit, n))| (corpus.word_name(w).to_string(), hit as f64 / n as f64))
            .collect(),
        sweep: points,
    })
}

/// Enrolls every keyword of `split`, scores the remaining segments, and
/// sweeps. Test hours cover the trial pool only.
pub fn evaluate_split(params: &EncoderParams, corpus: &Corpus, split: Split, seed: u64) -> Result<EvalReport> {
    let keywords = corpus.keywords(split);
    if keywords.is_empty() {
        return Err(Error::invalid(format!("split {split} has no keywords")));
    }
    let indices = corpus.split_indices(split);
    let seqs: Vec<_> = indices.iter().map(|&i| &corpus.segments[i].frames).collect();
    let embs = embed_all(params, &seqs, EMBED_CHUNK)?;
    let position: BTreeMap<usize, usize> = indices.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let enrollments = keywords
        .iter()
        .map(|&kw| enroll(corpus, split, kw, seed, |i| embs[position[&i]].clone()))
        .collect::<Result<Vec<_>>>()?;
    let enrolled: std::collections::HashSet<usize> =
        enrollments.iter().flat_map(|e| e.segments.iter().copied()).collect();
    let pool: Vec<(usize, WordId, &[f64])> = indices
        .iter()
        .enumerate()
        .filter(|(_, i)| !enrolled.contains(i))
        .map(|(k, &i)| (i, corpus.segments[i].word, embs[k].as_slice()))
        .collect();
    let hours = pool
        .iter()
        .map(|&(i, _, _)| corpus.segments[i].duration_seconds())
        .sum::<f64>()
        / 3600.0;
    let trials = score_trials(&enrollments, &pool);
    report(corpus, split, &trials, hours)
}

pub fn save_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    std::fs::write(json_path, serde_json::to_string_pretty(report)? + "\n")?;
    let mut buf = Vec::new();
    write_sweep_csv(&report.sweep, &mut buf)?;
    std::fs::write(csv_path, buf)?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], mut w: W) -> Result<()> {
    writeln!(w, "threshold,recall,fa_per_hour")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.recall, p.fa_per_hour)?;
    }
    Ok(())
}

const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 100_000;

/// Top principal direction of a symmetric PSD matrix by power iteration.
/// Returns `None` when the remaining variance is negligible next to `scale`.
fn leading_eigen(cov: &[Vec<f64>], scale: f64) -> Option<(f64, Vec<f64>)> {
    let d = cov.len();
    if scale == 0.0 {
        return None;
    }
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
        let norm = dot(&w, &w).sqrt();
        if norm <= scale * 1e-10 {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = norm;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    sign_normalize(&mut v);
    Some((lambda, v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn sign_normalize(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Principal directions and their variances, as returned by [`principal_axes`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Up to two unit directions; missing ones are zero vectors.
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
}

/// Top two principal axes by power iteration with deflation.
pub fn principal_axes(points: &[Vec<f64>]) -> Result<Pca> {
    if points.len() < 3 {
        return Err(Error::invalid(format!(
            "projection needs at least 3 points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("projection points must share a non-zero dimension"));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / (n - 1.0);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let Some((lambda, v)) = leading_eigen(&cov, trace) else {
            break;
        };
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        variances[k] = lambda;
        axes[k] = v;
    }
    Ok(Pca {
        mean,
        axes,
        variances,
    })
}

/// Mean-centred coordinates on the top two principal axes.
pub fn project2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let pca = principal_axes(points)?;
    Ok(points
        .iter()
        .map(|p| {
            let c: Vec<f64> = p.iter().zip(&pca.mean).map(|(x, m)| x - m).collect();
            [dot(&c, &pca.axes[0]), dot(&c, &pca.axes[1])]
        })
        .collect())
}

pub fn write_projection_csv<W: Write>(coords: &[[f64; 2]], words: &[&str], mut w: W) -> Result<()> {
    if coords.len() != words.len() {
        return Err(Error::invalid("one word label per projected point"));
    }
    writeln!(w, "x,y,word")?;
    for (c, word) in coords.iter().zip(words) {
        writeln!(w, "{},{},{}", c[0], c[1], word)?;
    }
    Ok(())
}
