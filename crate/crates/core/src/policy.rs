//! Stochastic top-K ranking policy over site scores.
//!
//! Sites are drawn one at a time without replacement, each with probability
//! proportional to `exp(q)` among those left (a Plackett–Luce draw). The
//! action is the unordered set of the first K draws. Its probability sums
//! over the K! orders of the set; [`estimate_combination_probability`]
//! replaces that sum by K! times one uniformly permuted term.
//!
//! Everything is computed in the log domain.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest K for which the K! enumeration is allowed.
pub const MAX_ENUMERABLE_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledRanking {
    /// All M site indices; the first K were drawn, the rest follow by descending score.
    pub order: Vec<usize>,
    /// The first K indices, sorted ascending.
    pub top_k: Vec<usize>,
    /// Log of the K!-scaled estimate evaluated at `perm_draw`.
    pub log_prob_estimate: f64,
    /// Uniform random permutation of positions `0..K` used by the estimate.
    pub perm_draw: Vec<usize>,
}

impl SampledRanking {
    pub fn k(&self) -> usize {
        self.top_k.len()
    }

    /// The first K sites reordered by `perm_draw`.
    pub fn permuted_prefix(&self) -> Vec<usize> {
        self.perm_draw.iter().map(|&p| self.order[p]).collect()
    }
}

/// Which order of the top-K set enters the log-probability used for gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientOrder {
    /// The order in which the sites were actually drawn. Gives an unbiased
    /// gradient of the expected reward.
    #[default]
    Drawn,
    /// The uniformly permuted order stored in `perm_draw`.
    Permuted,
}

fn check(q: &[f64], k: usize) -> Result<()> {
    if k == 0 || k > q.len() {
        return Err(Error::Validation(format!("K={k} must be in 1..={}", q.len())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// `ln Π_j exp(q[prefix_j]) / Σ_{not yet drawn} exp(q)` for a sequential draw
/// of `prefix` out of all `q.len()` sites.
pub fn log_prefix_probability(q: &[f64], prefix: &[usize]) -> f64 {
    let mut drawn = vec![false; q.len()];
    let mut total = 0.0;
    for &i in prefix {
        let lse = log_sum_exp(
            q.iter()
                .zip(&drawn)
                .filter(|(_, &d)| !d)
                .map(|(&v, _)| v),
        );
        total += q[i] - lse;
        drawn[i] = true;
    }
    total
}

/// Indices sorted by descending score, ties by lower index.
pub fn rank_by_score(q: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx
}

/// Draws K sites sequentially without replacement from `softmax(q)`.
pub fn sample_ranking<R: Rng + ?Sized>(q: &[f64], k: usize, rng: &mut R) -> Result<SampledRanking> {
    check(q, k)?;
    let m = q.len();
    let mut drawn = vec![false; m];
    let mut order = Vec::with_capacity(m);
    for _ in 0..k {
        let max = q
            .iter()
            .zip(&drawn)
            .filter(|(_, &d)| !d)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = q
            .iter()
            .zip(&drawn)
            .map(|(&v, &d)| if d { 0.0 } else { (v - max).exp() })
            .collect();
        let z: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * z;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if u < acc {
                break;
            }
        }
        let pick = pick.expect("at least one undrawn site");
        drawn[pick] = true;
        order.push(pick);
    }
    order.extend(rank_by_score(q).into_iter().filter(|&i| !drawn[i]));

    let mut perm_draw: Vec<usize> = (0..k).collect();
    perm_draw.shuffle(rng);
    let permuted: Vec<usize> = perm_draw.iter().map(|&p| order[p]).collect();
    let log_prob_estimate = ln_factorial(k) + log_prefix_probability(q, &permuted);

    let mut top_k = order[..k].to_vec();
    top_k.sort_unstable();
    Ok(SampledRanking {
        order,
        top_k,
        log_prob_estimate,
        perm_draw,
    })
}

fn for_each_permutation(items: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        f(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        for_each_permutation(items, start + 1, f);
        items.swap(start, i);
    }
}

/// Probability that the first K draws form exactly `combo`, summing all K! orders.
pub fn exact_combination_probability(q: &[f64], combo: &[usize], k: usize) -> Result<f64> {
    check(q, k)?;
    if combo.len() != k {
        return Err(Error::Validation(format!(
            "combination has {} sites, expected K={k}",
            combo.len()
        )));
    }
    if k > MAX_ENUMERABLE_K {
        return Err(Error::Validation(format!(
            "K={k} too large to enumerate (max {MAX_ENUMERABLE_K})"
        )));
    }
    let mut items = combo.to_vec();
    let mut terms = Vec::new();
    for_each_permutation(&mut items, 0, &mut |p| terms.push(log_prefix_probability(q, p)));
    Ok(log_sum_exp(terms.into_iter()).exp())
}

/// `K!` times the probability of one uniformly random order of the ranking's
/// top K. Unbiased for [`exact_combination_probability`].
pub fn estimate_combination_probability<R: Rng + ?Sized>(
    q: &[f64],
    ranking: &SampledRanking,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    check(q, k)?;
    let mut prefix = ranking.order[..k].to_vec();
    prefix.shuffle(rng);
    Ok((ln_factorial(k) + log_prefix_probability(q, &prefix)).exp())
}

/// Adds `scale · ∂/∂q log_prefix_probability(q, prefix)` into `grad`.
fn add_log_prefix_gradient(q: &[f64], prefix: &[usize], scale: f64, grad: &mut [f64]) {
    let mut drawn = vec![false; q.len()];
    for &i in prefix {
        let lse = log_sum_exp(
            q.iter()
                .zip(&drawn)
                .filter(|(_, &d)| !d)
                .map(|(&v, _)| v),
        );
        for (j, g) in grad.iter_mut().enumerate() {
            if !drawn[j] {
                *g -= scale * (q[j] - lse).exp();
            }
        }
        grad[i] += scale;
        drawn[i] = true;
    }
}

/// Gradient with respect to `q` of `(1/N) Σ_n R_n · log π̂(ranking_n)`.
///
/// Ascending this gradient increases expected reward.
pub fn policy_gradient_step(
    q: &[f64],
    samples: &[(SampledRanking, f64)],
    k: usize,
    order: GradientOrder,
) -> Result<Vec<f64>> {
    check(q, k)?;
    if samples.is_empty() {
        return Err(Error::Validation("policy gradient needs at least one sample".into()));
    }
    let n = samples.len() as f64;
    let mut grad = vec![0.0; q.len()];
    for (ranking, reward) in samples {
        if *reward == 0.0 {
            continue;
        }
        let prefix = match order {
            GradientOrder::Drawn => ranking.order[..k].to_vec(),
            GradientOrder::Permuted => ranking.permuted_prefix(),
        };
        add_log_prefix_gradient(q, &prefix, reward / n, &mut grad);
    }
    Ok(grad)
}

/// The K highest-scoring sites in rank order, ties broken by lower index.
pub fn select_topk_deterministic(q: &[f64], k: usize) -> Result<Vec<usize>> {
    check(q, k)?;
    let mut order = rank_by_score(q);
    order.truncate(k);
    Ok(order)
}
