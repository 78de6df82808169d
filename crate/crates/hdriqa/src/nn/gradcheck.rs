//! Finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::optim::ParamSet;

/// Worst observed mismatch for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub samples: usize,
}

/// Comparison of analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    /// Parameters whose error exceeds the tolerance.
    pub fn flagged(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err >= self.tolerance)
            .collect()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>10} {:>14}", "parameter", "samples", "max rel err")?;
        for e in &self.entries {
            let mark = if e.max_rel_err >= self.tolerance { "  FAIL" } else { "" };
            writeln!(
                f,
                "{:<24} {:>10} {:>14.3e}{}",
                e.name, e.samples, e.max_rel_err, mark
            )?;
        }
        writeln!(
            f,
            "overall max {:.3e} (tolerance {:.1e}) -> {}",
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compare the analytic gradients stored in `params` (the caller runs its
/// backward pass first) against central finite differences of `loss`.
///
/// For each parameter up to `samples_per_param` elements are probed
/// (0 means every element). The step is `max(1e-5, 1e-7 * |theta|)` per
/// element; the relative error denominator is floored at 1e-6 so that noise
/// on near-zero gradients does not read as failure.
pub fn gradient_check(
    params: &mut ParamSet,
    loss: impl Fn(&ParamSet) -> Result<f64>,
    samples_per_param: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(names.len());

    for name in names {
        let numel = params.get(&name).value.numel();
        let analytic = params.get(&name).grad.clone();
        let indices: Vec<usize> = if samples_per_param == 0 || numel <= samples_per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, samples_per_param).into_vec()
        };

        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let theta = params.get(&name).value.data()[i];
            let h = 1e-5_f64.max(1e-7 * theta.abs());

            params.get_mut(&name).value.data_mut()[i] = theta + h;
            let plus = loss(params)?;
            params.get_mut(&name).value.data_mut()[i] = theta - h;
            let minus = loss(params)?;
            params.get_mut(&name).value.data_mut()[i] = theta;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name,
            max_rel_err: max_rel,
            samples: indices.len(),
        });
    }

    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{dense, dense_backward, l1_loss};
    use crate::nn::optim::glorot_uniform;
    use crate::nn::tensor::Tensor;

    fn dense_loss(params: &ParamSet, x: &Tensor, target: &Tensor) -> Result<f64> {
        let y = dense(x, params.value("w"), params.value("b"))?;
        Ok(l1_loss(&y, target)?.0)
    }

    #[test]
    fn single_dense_layer_below_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        params.insert("w", glorot_uniform(&[3, 5], &mut rng), true);
        params.insert("b", glorot_uniform(&[3], &mut rng), true);
        let x = glorot_uniform(&[5], &mut rng);
        let target = glorot_uniform(&[3], &mut rng);

        // analytic pass
        let y = dense(&x, params.value("w"), params.value("b")).unwrap();
        let (_, dl_dy) = l1_loss(&y, &target).unwrap();
        let (_, gw, gb) = dense_backward(&x, params.value("w"), &dl_dy).unwrap();
        params.get_mut("w").grad = gw;
        params.get_mut("b").grad = gb;

        let report =
            gradient_check(&mut params, |p| dense_loss(p, &x, &target), 0, 1e-6, 0).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParamSet::new();
        params.insert("w", glorot_uniform(&[3, 5], &mut rng), true);
        params.insert("b", glorot_uniform(&[3], &mut rng), true);
        let x = glorot_uniform(&[5], &mut rng);
        let target = glorot_uniform(&[3], &mut rng);

        let y = dense(&x, params.value("w"), params.value("b")).unwrap();
        let (_, dl_dy) = l1_loss(&y, &target).unwrap();
        let (_, gw, gb) = dense_backward(&x, params.value("w"), &dl_dy).unwrap();
        params.get_mut("w").grad = gw.map(|g| g * 1.5 + 0.01); // corrupt
        params.get_mut("b").grad = gb;

        let report =
            gradient_check(&mut params, |p| dense_loss(p, &x, &target), 0, 1e-4, 0).unwrap();
        assert!(!report.passed());
        assert!(report.flagged().iter().any(|e| e.name == "w"));
        assert!(report.flagged().iter().all(|e| e.name != "b"));
    }
}
