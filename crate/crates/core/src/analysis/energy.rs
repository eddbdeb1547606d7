use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::sde::derive_task_seed;
use crate::StreamRng;

/// Minimum sample count per side accepted by [`energy_test`].
pub const MIN_TEST_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    /// V-statistic `2E|X−Y| − E|X−X'| − E|Y−Y'|`.
    pub statistic: f64,
    /// Basic (reverse-percentile) bootstrap interval at 95%.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Permutation p-value, `(1 + #{null ≥ observed}) / (1 + permutations)`.
    pub p_value: f64,
    /// 99% quantile of the permutation null.
    pub null_q99: f64,
    pub permutations: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl EnergyTest {
    pub fn passes_null(&self, level: f64) -> bool {
        self.p_value > level
    }

    pub fn ci_contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

/// `Σ_{i<j} |a_i − a_j|` for sorted input.
fn pair_sum_sorted(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn energy_1d(x: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let sx = pair_sum_sorted(&sorted(x.to_vec()));
    let sy = pair_sum_sorted(&sorted(y.to_vec()));
    let pooled = sorted(x.iter().chain(y).copied().collect());
    let cross = pair_sum_sorted(&pooled) - sx - sy;
    2.0 * cross / (n * m) - 2.0 * sx / (n * n) - 2.0 * sy / (m * m)
}

fn mean_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    // Row sums are collected before the final sum so the result does not
    // depend on how rayon splits the work.
    let rows: Vec<f64> = a
        .par_iter()
        .map(|p| {
            b.iter()
                .map(|q| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

fn energy_rows(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    if x.first().is_some_and(|r| r.len() == 1) {
        let xs: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let ys: Vec<f64> = y.iter().map(|r| r[0]).collect();
        return energy_1d(&xs, &ys);
    }
    2.0 * mean_distance(x, y) - mean_distance(x, x) - mean_distance(y, y)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Energy distance between two samples stored one draw per row.
pub fn energy_distance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64, AnalysisError> {
    if x.ncols() != y.ncols() {
        return Err(AnalysisError::Domain(format!(
            "sample dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(AnalysisError::InsufficientSamples { need: 1, got: 0 });
    }
    Ok(energy_rows(&rows(x), &rows(y)))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Two-sample energy test: statistic, permutation p-value and a bootstrap
/// interval. Each replicate draws from its own derived stream.
pub fn energy_test(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    permutations: usize,
    bootstrap: usize,
    seed: u64,
) -> Result<EnergyTest, AnalysisError> {
    let got = x.nrows().min(y.nrows());
    if got < MIN_TEST_SAMPLES {
        return Err(AnalysisError::InsufficientSamples {
            need: MIN_TEST_SAMPLES,
            got,
        });
    }
    let statistic = energy_distance(x, y)?;
    let (xr, yr) = (rows(x), rows(y));
    let n = xr.len();
    let pooled: Vec<Vec<f64>> = xr.iter().chain(&yr).cloned().collect();

    let mut null: Vec<f64> = (0..permutations)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::seed_from_u64(derive_task_seed(seed, 10, i as u64));
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(&mut rng);
            let a: Vec<Vec<f64>> = idx[..n].iter().map(|&k| pooled[k].clone()).collect();
            let b: Vec<Vec<f64>> = idx[n..].iter().map(|&k| pooled[k].clone()).collect();
            energy_rows(&a, &b)
        })
        .collect();
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    null.sort_by(f64::total_cmp);

    let mut boot: Vec<f64> = (0..bootstrap)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::seed_from_u64(derive_task_seed(seed, 11, i as u64));
            let a: Vec<Vec<f64>> = (0..xr.len()).map(|_| xr[rng.random_range(0..xr.len())].clone()).collect();
            let b: Vec<Vec<f64>> = (0..yr.len()).map(|_| yr[rng.random_range(0..yr.len())].clone()).collect();
            energy_rows(&a, &b)
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = if boot.is_empty() {
        (statistic, statistic)
    } else {
        (
            2.0 * statistic - quantile(&boot, 0.975),
            2.0 * statistic - quantile(&boot, 0.025),
        )
    };
    Ok(EnergyTest {
        statistic,
        ci_low,
        ci_high,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        null_q99: if null.is_empty() { f64::NAN } else { quantile(&null, 0.99) },
        permutations,
        bootstrap,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn normal(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = StreamRng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| shift + rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn fast_path_matches_direct_sum() {
        let x = normal(300, 1, 0.0, 1);
        let y = normal(200, 1, 0.4, 2);
        let (xr, yr) = (rows(&x), rows(&y));
        let direct = 2.0 * mean_distance(&xr, &yr) - mean_distance(&xr, &xr) - mean_distance(&yr, &yr);
        let fast = energy_distance(&x, &y).unwrap();
        assert!((direct - fast).abs() < 1e-12, "{direct} vs {fast}");
    }

    #[test]
    fn known_value_for_point_masses() {
        // δ_0 against δ_1: 2·1 − 0 − 0.
        let x = DMatrix::from_element(5, 2, 0.0);
        let mut y = DMatrix::from_element(4, 2, 0.0);
        y.column_mut(0).fill(1.0);
        assert!((energy_distance(&x, &y).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn null_case_ci_covers_zero() {
        let t = energy_test(&normal(10_000, 1, 0.0, 3), &normal(10_000, 1, 0.0, 4), 200, 200, 9).unwrap();
        assert!(t.ci_contains_zero(), "{t:?}");
        assert!(t.passes_null(0.01));
    }

    #[test]
    fn shifted_case_exceeds_null_quantile() {
        let t = energy_test(&normal(10_000, 1, 0.0, 5), &normal(10_000, 1, 1.0, 6), 200, 50, 9).unwrap();
        assert!(t.statistic > t.null_q99);
        assert!(!t.passes_null(0.01));
        assert!(!t.ci_contains_zero());
    }

    #[test]
    fn small_samples_rejected() {
        let r = energy_test(&normal(10, 1, 0.0, 1), &normal(10, 1, 0.0, 2), 10, 10, 0);
        assert!(matches!(r, Err(AnalysisError::InsufficientSamples { .. })));
    }

    #[test]
    fn two_dimensional_test_is_deterministic() {
        let x = normal(1000, 2, 0.0, 7);
        let y = normal(1000, 2, 0.0, 8);
        let a = energy_test(&x, &y, 20, 10, 4).unwrap();
        let b = energy_test(&x, &y, 20, 10, 4).unwrap();
        assert_eq!(a, b);
    }
}
