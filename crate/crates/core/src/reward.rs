//! Enrollment/diversity reward and the evaluation metrics.
//!
//! All entropies use the natural logarithm with `0 · ln 0 = 0`. Zero total
//! enrollment makes the utility and fairness ratios `0/0`; both are defined
//! as 0 there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RankingInstance, N_RACE};

/// Enrollments above this exponent are capped when forming nDCG gains `2^e − 1`.
pub const NDCG_GAIN_CAP: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda: f64,
}

impl RewardConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and nonnegative"));
        }
        Ok(Self { lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub utility: f64,
    pub fairness: f64,
    pub reward: f64,
}

fn check_enrollments(e: &[f64]) -> Result<()> {
    if e.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation("enrollment must be finite and nonnegative".into()));
    }
    Ok(())
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::Validation(format!("K={k} must be in 1..={len}")));
    }
    Ok(())
}

/// Normalized enrollment margin of the first `k` sites over the rest.
pub fn utility(e_ordered: &[f64], k: usize) -> Result<f64> {
    check_enrollments(e_ordered)?;
    check_k(e_ordered.len(), k)?;
    let total: f64 = e_ordered.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let top: f64 = e_ordered[..k].iter().sum();
    let rest: f64 = e_ordered[k..].iter().sum();
    Ok((top - rest) / total)
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Enrollment-weighted mean of race distributions, or `None` if total weight is 0.
pub fn pooled_distribution(weights: &[f64], races: &[[f64; N_RACE]]) -> Option<[f64; N_RACE]> {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return None;
    }
    let mut pooled = [0.0; N_RACE];
    for (w, r) in weights.iter().zip(races) {
        for (p, v) in pooled.iter_mut().zip(r) {
            *p += w * v;
        }
    }
    Some(pooled.map(|v| v / total))
}

/// Slack on race rows in the reward; published distributions are rounded to
/// three decimals and can miss 1 by a few thousandths.
const RACE_ROW_TOL: f64 = 1e-2;

fn check_races(races: &[[f64; N_RACE]]) -> Result<()> {
    for r in races {
        let s: f64 = r.iter().sum();
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (s - 1.0).abs() > RACE_ROW_TOL {
            return Err(Error::Validation(format!("race row {r:?} is not a distribution")));
        }
    }
    Ok(())
}

/// Entropy of the racial mix of the patients enrolled by the first `k` sites.
pub fn fairness_entropy(e_ordered: &[f64], race_ordered: &[[f64; N_RACE]], k: usize) -> Result<f64> {
    check_enrollments(e_ordered)?;
    check_k(e_ordered.len(), k)?;
    if race_ordered.len() != e_ordered.len() {
        return Err(Error::Dimension("enrollment and race lengths differ".into()));
    }
    check_races(&race_ordered[..k])?;
    Ok(pooled_distribution(&e_ordered[..k], &race_ordered[..k])
        .map(|p| entropy(&p))
        .unwrap_or(0.0))
}

pub fn reward(
    e_ordered: &[f64],
    race_ordered: &[[f64; N_RACE]],
    k: usize,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    let utility = utility(e_ordered, k)?;
    let fairness = fairness_entropy(e_ordered, race_ordered, k)?;
    Ok(RewardBreakdown {
        utility,
        fairness,
        reward: utility + config.lambda * fairness,
    })
}

/// Reward of a ranking given as site indices into unordered labels.
pub fn reward_for_order(
    order: &[usize],
    enrollments: &[f64],
    races: &[[f64; N_RACE]],
    k: usize,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    let e: Vec<f64> = order.iter().map(|&i| enrollments[i]).collect();
    let r: Vec<[f64; N_RACE]> = order.iter().map(|&i| races[i]).collect();
    reward(&e, &r, k, config)
}

/// Shortfall of the selected sites' enrollment against the best possible K.
pub fn relative_error(selected: &[usize], enrollments: &[f64]) -> f64 {
    let mut sorted = enrollments.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let best: f64 = sorted[..selected.len()].iter().sum();
    if best == 0.0 {
        return 0.0;
    }
    let got: f64 = selected.iter().map(|&i| enrollments[i]).sum();
    (best - got) / best
}

fn gain(e: f64) -> f64 {
    e.min(NDCG_GAIN_CAP).exp2() - 1.0
}

fn dcg(e: &[f64]) -> f64 {
    e.iter()
        .enumerate()
        .map(|(j, &v)| gain(v) / ((j + 2) as f64).log2())
        .sum()
}

/// nDCG@k of enrollments listed in model order against their descending sort.
///
/// Gains are `2^e − 1` with the exponent capped at [`NDCG_GAIN_CAP`]. If every
/// enrollment is zero the ideal DCG is zero and the ranking counts as perfect.
pub fn ndcg(model_order: &[f64], k: usize) -> f64 {
    let k = k.min(model_order.len());
    let mut ideal = model_order.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal[..k]);
    if idcg == 0.0 {
        return 1.0;
    }
    dcg(&model_order[..k]) / idcg
}

/// Diversity of a selection: entropy of the enrollment-weighted race mix.
pub fn population_entropy(selected: &[usize], instance: &RankingInstance) -> f64 {
    let e: Vec<f64> = selected
        .iter()
        .map(|&i| instance.sites[i].enrollment as f64)
        .collect();
    let r: Vec<[f64; N_RACE]> = selected.iter().map(|&i| instance.sites[i].race).collect();
    pooled_distribution(&e, &r).map(|p| entropy(&p)).unwrap_or(0.0)
}

/// Flat record written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lambda: f64,
    pub relative_error_mean: f64,
    pub relative_error_ci: f64,
    pub ndcg_mean: f64,
    pub ndcg_ci: f64,
    pub entropy_mean: f64,
}

/// Mean and 95% normal-approximation half-width.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}
