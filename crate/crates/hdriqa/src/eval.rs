//! Correlation metrics, the content-disjoint split protocol, and the
//! evaluation harness.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr_io::DatasetManifest;
use crate::util::{derive_seed, median};

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min_len {
        return Err(Error::invalid(format!(
            "need at least {min_len} samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite values in metric input"));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Fractional ranks with ties assigned the average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numeric(
            "correlation undefined for a constant vector",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank-order correlation (average ranks for ties).
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::numeric("srcc undefined for a constant vector"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::numeric("plcc undefined for a constant vector"));
    }
    pearson(x, y)
}

/// Root mean square error.
pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    let n = x.len() as f64;
    let ss: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / n).sqrt())
}

/// Kendall tau-b (tie corrected), computed with the merge-sort discordance
/// count: O(n log n). The unit tests hold this against O(n²) pair
/// enumeration.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    if is_constant(x) || is_constant(y) {
        return Err(Error::numeric("krcc undefined for an all-tied vector"));
    }
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap()
            .then(y[a].partial_cmp(&y[b]).unwrap())
    });

    let tie_pairs = |counts: &[usize]| -> f64 {
        counts.iter().map(|&t| (t * (t - 1) / 2) as f64).sum()
    };

    // group sizes of ties in x, and joint ties in (x, y)
    let mut x_groups = Vec::new();
    let mut xy_groups = Vec::new();
    {
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            x_groups.push(j - i + 1);
            let mut k = i;
            while k <= j {
                let mut m = k;
                while m + 1 <= j && y[idx[m + 1]] == y[idx[k]] {
                    m += 1;
                }
                xy_groups.push(m - k + 1);
                k = m + 1;
            }
            i = j + 1;
        }
    }
    let mut y_groups = Vec::new();
    {
        let mut ys: Vec<f64> = y.to_vec();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && ys[j + 1] == ys[i] {
                j += 1;
            }
            y_groups.push(j - i + 1);
            i = j + 1;
        }
    }

    // discordant pairs: exchanges needed to sort y in x-order (merge sort)
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    fn count_swaps(v: &mut [f64], buf: &mut [f64]) -> f64 {
        let n = v.len();
        if n < 2 {
            return 0.0;
        }
        let mid = n / 2;
        let (left, right) = v.split_at_mut(mid);
        let mut swaps = count_swaps(left, buf) + count_swaps(right, buf);
        let (mut i, mut j, mut k) = (0, 0, 0);
        while i < left.len() && j < right.len() {
            if right[j] < left[i] {
                swaps += (left.len() - i) as f64;
                buf[k] = right[j];
                j += 1;
            } else {
                buf[k] = left[i];
                i += 1;
            }
            k += 1;
        }
        buf[k..k + left.len() - i].copy_from_slice(&left[i..]);
        buf[k + left.len() - i..n].copy_from_slice(&right[j..]);
        v.copy_from_slice(&buf[..n]);
        swaps
    }
    let discordant = count_swaps(&mut ys, &mut buf);

    let tot = (n * (n - 1) / 2) as f64;
    let xtie = tie_pairs(&x_groups);
    let ytie = tie_pairs(&y_groups);
    let ntie = tie_pairs(&xy_groups);
    let denom = ((tot - xtie) * (tot - ytie)).sqrt();
    if denom == 0.0 {
        return Err(Error::numeric("krcc undefined for an all-tied vector"));
    }
    Ok((tot - xtie - ytie + ntie - 2.0 * discordant) / denom)
}

// ---------------------------------------------------------------------------
// Split protocol
// ---------------------------------------------------------------------------

/// One train/test partition of content ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Content-disjoint random splits: all distortions of one reference land on
/// the same side of every split. Deterministic for a given seed, with
/// per-iteration seeds derived from the master so parallel evaluation
/// agrees with serial.
pub fn make_splits(
    manifest: &DatasetManifest,
    train_fraction: f64,
    iterations: usize,
    seed: u64,
) -> Result<Vec<Split>> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(Error::invalid(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let contents = manifest.content_ids();
    let n = contents.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 distinct contents to split, got {n}"
        )));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut splits = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, it as u64));
        let mut shuffled = contents.clone();
        shuffled.shuffle(&mut rng);
        let (train, test) = shuffled.split_at(n_train);
        splits.push(Split {
            train: train.to_vec(),
            test: test.to_vec(),
        });
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// A trained model able to score a distorted image file.
pub trait ScorePredictor: Send + Sync {
    fn score(&self, distorted: &Path) -> Result<f64>;
}

/// A training procedure the harness can re-run per split.
pub trait SplitTrainer: Sync {
    fn train(
        &self,
        manifest: &DatasetManifest,
        train_contents: &[String],
        seed: u64,
    ) -> Result<Box<dyn ScorePredictor>>;
}

/// The four correlation/error figures of one iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub srcc: f64,
    pub krcc: f64,
    pub plcc: f64,
    pub rmse: f64,
}

/// Per-iteration metrics plus their medians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iterations: Vec<IterationMetrics>,
    pub median: IterationMetrics,
}

impl MetricsReport {
    fn from_iterations(iterations: Vec<IterationMetrics>) -> Result<Self> {
        if iterations.is_empty() {
            return Err(Error::invalid("no iterations to report"));
        }
        let collect = |f: fn(&IterationMetrics) -> f64| -> Vec<f64> {
            iterations.iter().map(f).collect()
        };
        let median = IterationMetrics {
            srcc: median(&collect(|m| m.srcc)),
            krcc: median(&collect(|m| m.krcc)),
            plcc: median(&collect(|m| m.plcc)),
            rmse: median(&collect(|m| m.rmse)),
        };
        Ok(MetricsReport { iterations, median })
    }

    /// Plain-text table, medians last.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>5} {:>8} {:>8} {:>8} {:>10}\n",
            "iter", "SRCC", "KRCC", "PLCC", "RMSE"
        ));
        for (i, m) in self.iterations.iter().enumerate() {
            out.push_str(&format!(
                "{:>5} {:>8.4} {:>8.4} {:>8.4} {:>10.4}\n",
                i, m.srcc, m.krcc, m.plcc, m.rmse
            ));
        }
        out.push_str(&format!(
            "{:>5} {:>8.4} {:>8.4} {:>8.4} {:>10.4}\n",
            "med",
            self.median.srcc,
            self.median.krcc,
            self.median.plcc,
            self.median.rmse
        ));
        out
    }
}

fn score_entries(
    predictor: &dyn ScorePredictor,
    manifest: &DatasetManifest,
    contents: &[String],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for e in manifest.entries_for_contents(contents) {
        predicted.push(predictor.score(&e.distorted)?);
        actual.push(e.dmos);
    }
    Ok((predicted, actual))
}

fn metrics_for(predicted: &[f64], actual: &[f64]) -> Result<IterationMetrics> {
    Ok(IterationMetrics {
        srcc: srcc(predicted, actual)?,
        krcc: krcc(predicted, actual)?,
        plcc: plcc(predicted, actual)?,
        rmse: rmse(predicted, actual)?,
    })
}

/// The split protocol: per split, train on the train contents, score the
/// test images, compute the four metrics; report per-iteration values and
/// their medians. Pass fewer splits for a reduced-iterations run.
pub fn run_evaluation(
    trainer: &dyn SplitTrainer,
    manifest: &DatasetManifest,
    splits: &[Split],
    seed: u64,
) -> Result<MetricsReport> {
    let mut iterations = Vec::with_capacity(splits.len());
    for (i, split) in splits.iter().enumerate() {
        let with_split = |e: Error| Error::invalid(format!("split {i}: {e}"));
        let predictor = trainer
            .train(manifest, &split.train, derive_seed(seed, i as u64))
            .map_err(with_split)?;
        let (predicted, actual) =
            score_entries(predictor.as_ref(), manifest, &split.test).map_err(with_split)?;
        iterations.push(metrics_for(&predicted, &actual).map_err(with_split)?);
    }
    MetricsReport::from_iterations(iterations)
}

/// Cross-dataset protocol: train once per cycle on the union of the train
/// manifests, evaluate on the union of the test manifests, report the
/// median over `cycles` training cycles.
pub fn cross_dataset_eval(
    trainer: &dyn SplitTrainer,
    train_manifests: &[DatasetManifest],
    test_manifests: &[DatasetManifest],
    cycles: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let train_union = merge_manifests(train_manifests)?;
    let test_union = merge_manifests(test_manifests)?;
    for e in &test_union.entries {
        if train_union.entries.iter().any(|t| t.distorted == e.distorted) {
            return Err(Error::invalid(format!(
                "distorted path {} appears in both train and test unions",
                e.distorted.display()
            )));
        }
    }
    let train_contents = train_union.content_ids();
    let test_contents = test_union.content_ids();
    let mut iterations = Vec::with_capacity(cycles);
    for c in 0..cycles {
        let predictor = trainer.train(&train_union, &train_contents, derive_seed(seed, c as u64))?;
        let (predicted, actual) = score_entries(predictor.as_ref(), &test_union, &test_contents)?;
        iterations.push(metrics_for(&predicted, &actual)?);
    }
    MetricsReport::from_iterations(iterations)
}

/// Concatenate manifests; content ids are prefixed per source so contents
/// from different datasets can never collide.
fn merge_manifests(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(Error::invalid("no manifests to merge"));
    }
    let mut entries = Vec::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, m) in manifests.iter().enumerate() {
        lo = lo.min(m.dmos_range[0]);
        hi = hi.max(m.dmos_range[1]);
        for e in &m.entries {
            let mut e = e.clone();
            e.content = format!("d{i}:{}", e.content);
            entries.push(e);
        }
    }
    let merged = DatasetManifest {
        dmos_range: [lo, hi],
        entries,
    };
    merged.validate(false)?;
    Ok(merged)
}
