//! Training, model selection, evaluation and λ sweeps.
//!
//! Each step takes one instance: score its M sites, draw N rankings from the
//! resulting policy, reward each, and push the policy-gradient seed back
//! through the scorer, fusion and encoders. After every epoch the model is
//! scored on the validation split with deterministic top-K selection and the
//! best epoch is kept.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::datagen::substream;
use crate::error::{Error, Result};
use crate::model::{DatasetManifest, Modality, RankingInstance, N_RACE};
use crate::network::{NetworkConfig, SiteSelector};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{
    log_prefix_probability, policy_gradient_step, rank_by_score, sample_ranking, GradientOrder,
};
use crate::reward::{
    mean_ci, ndcg, pooled_distribution, population_entropy, relative_error, reward_for_order, MetricReport,
    RewardConfig,
};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "fairsite-checkpoint/1";

/// Which masks the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    /// Masks as stored.
    #[default]
    Missing,
    /// Every modality with content is visible.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Policy gradient on the ranking reward.
    #[default]
    Reinforce,
    /// Squared-error regression of scores onto enrollment labels.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Exponential moving average of past sample rewards.
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub samples_per_trial: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: DatasetVariant,
    pub objective: Objective,
    pub baseline: Baseline,
    pub baseline_decay: f64,
    pub gradient_order: GradientOrder,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            learning_rate: 1e-5,
            lambda: 0.0,
            samples_per_trial: 4,
            test_fraction: 0.2,
            val_fraction: 0.1,
            seed: 0,
            variant: DatasetVariant::Missing,
            objective: Objective::Reinforce,
            baseline: Baseline::None,
            baseline_decay: 0.9,
            gradient_order: GradientOrder::Drawn,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        RewardConfig::new(self.lambda).map_err(|_| Error::config("lambda", "must be a finite value ≥ 0"))?;
        if self.samples_per_trial == 0 {
            return Err(Error::config("samples_per_trial", "must be at least 1"));
        }
        for (field, v) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, "must be in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::config("baseline_decay", "must be in [0, 1)"));
        }
        self.network.validate()
    }
}

/// Sets each site's mask according to `variant`.
pub fn apply_variant(instances: &mut [RankingInstance], variant: DatasetVariant) {
    if variant == DatasetVariant::Full {
        for site in instances.iter_mut().flat_map(|x| x.sites.iter_mut()) {
            site.mask = Modality::ALL.map(|m| site.has_content(m));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<RankingInstance>,
    pub val: Vec<RankingInstance>,
    pub test: Vec<RankingInstance>,
}

/// Splits by trial id so every copy of a trial lands in one split. The test
/// split takes `test_fraction` of trials; validation takes `val_fraction` of
/// the rest.
pub fn split_dataset<R: Rng + ?Sized>(
    instances: &[RankingInstance],
    test_fraction: f64,
    val_fraction: f64,
    rng: &mut R,
) -> Result<Split> {
    if instances.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let ids: BTreeSet<&str> = instances.iter().map(|x| x.trial.trial_id.as_str()).collect();
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(rng);
    let n = ids.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = ((n - n_test.min(n)) as f64 * val_fraction).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= n {
        return Err(Error::Validation(format!(
            "{n} trials are too few to populate train, validation and test splits"
        )));
    }
    let test: BTreeSet<&str> = ids[..n_test].iter().copied().collect();
    let val: BTreeSet<&str> = ids[n_test..n_test + n_val].iter().copied().collect();
    let mut split = Split::default();
    for x in instances {
        let id = x.trial.trial_id.as_str();
        let bucket = if test.contains(id) {
            &mut split.test
        } else if val.contains(id) {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.push(x.clone());
    }
    Ok(split)
}

/// Split using the configured fractions and the `seed`-derived split stream.
pub fn split_for(instances: &[RankingInstance], config: &TrainConfig) -> Result<Split> {
    split_dataset(
        instances,
        config.test_fraction,
        config.val_fraction,
        &mut substream(config.seed, 10),
    )
}

/// Reloadable trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub manifest_hash: String,
    pub dims: DatasetManifest,
    pub config: TrainConfig,
    pub validation_reward: f64,
    pub epoch: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_selector(net: &SiteSelector, config: &TrainConfig, validation_reward: f64, epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            manifest_hash: net.dims.dims_hash(),
            dims: net.dims.clone(),
            config: config.clone(),
            validation_reward,
            epoch,
            params: net.store.clone(),
        }
    }

    pub fn selector(&self) -> Result<SiteSelector> {
        SiteSelector::from_parts(&self.dims, &self.config.network, self.params.clone())
    }

    /// Errors unless the checkpoint was trained on data with `manifest`'s
    /// dimensions, or `force` is set.
    pub fn check_manifest(&self, manifest: &DatasetManifest, force: bool) -> Result<()> {
        let dataset = manifest.dims_hash();
        if self.manifest_hash != dataset && !force {
            return Err(Error::ManifestMismatch {
                checkpoint: self.manifest_hash.clone(),
                dataset,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        if ck.manifest_hash != ck.dims.dims_hash() {
            return Err(Error::Validation("checkpoint manifest hash does not match its dimensions".into()));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_reward: f64,
    pub train_loss: f64,
    pub validation_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn check_instances(instances: &[RankingInstance], dims: &DatasetManifest, what: &str) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::Validation(format!("{what} set is empty")));
    }
    if let Some(x) = instances.iter().find(|x| x.sites.len() != dims.m) {
        return Err(Error::Dimension(format!(
            "trial {} has {} sites, expected M={}",
            x.trial.trial_id,
            x.sites.len(),
            dims.m
        )));
    }
    Ok(())
}

/// Mean reward of deterministic top-K selection.
pub fn mean_topk_reward(net: &SiteSelector, instances: &[RankingInstance], lambda: f64) -> Result<f64> {
    let reward = RewardConfig::new(lambda)?;
    let k = net.dims.k;
    let mut total = 0.0;
    for x in instances {
        let order = rank_by_score(&net.scores(x)?);
        total += reward_for_order(&order, &x.enrollments(), &x.races(), k, &reward)?.reward;
    }
    Ok(total / instances.len() as f64)
}

fn numeric(epoch: usize, trial: &str, what: &str) -> Error {
    Error::Numeric(format!("epoch {epoch}, trial {trial}: {what}"))
}

/// Trains a fresh network on `train` and returns the epoch with the best
/// validation reward.
pub fn train(
    train: &[RankingInstance],
    val: &[RankingInstance],
    dims: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_instances(train, dims, "training")?;
    check_instances(val, dims, "validation")?;
    let reward = RewardConfig::new(config.lambda)?;
    let k = dims.k;
    let mut net = SiteSelector::new(dims, &config.network, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &net.store,
    );
    let mut rng = substream(config.seed, 20);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut baseline: Option<f64> = None;
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut reward_sum, mut loss_sum) = (0.0, 0.0);
        for &i in &order {
            let x = &train[i];
            let id = x.trial.trial_id.as_str();
            let (grads, step_reward, step_loss) = {
                let mut tape = Tape::new(&net.store);
                let q_var = net.forward(&mut tape, x)?;
                let q = tape.value(q_var).data().to_vec();
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(numeric(epoch, id, "non-finite scores"));
                }
                let e = x.enrollments();
                let (seed, step_reward, step_loss) = match config.objective {
                    Objective::Reinforce => {
                        let races = x.races();
                        let mut samples = Vec::with_capacity(config.samples_per_trial);
                        let mut rewards = Vec::with_capacity(config.samples_per_trial);
                        for _ in 0..config.samples_per_trial {
                            let ranking = sample_ranking(&q, k, &mut rng)?;
                            let r = reward_for_order(&ranking.order, &e, &races, k, &reward)?.reward;
                            rewards.push(r);
                            samples.push(ranking);
                        }
                        let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
                        let b = match config.baseline {
                            Baseline::None => 0.0,
                            Baseline::MovingAverage => baseline.unwrap_or(mean_r),
                        };
                        if config.baseline == Baseline::MovingAverage {
                            baseline = Some(match baseline {
                                None => mean_r,
                                Some(prev) => config.baseline_decay * prev + (1.0 - config.baseline_decay) * mean_r,
                            });
                        }
                        let weighted: Vec<_> = samples.into_iter().zip(rewards.iter().map(|r| r - b)).collect();
                        let loss = -weighted
                            .iter()
                            .map(|(s, a)| a * log_prefix_probability(&q, &s.order[..k]))
                            .sum::<f64>()
                            / weighted.len() as f64;
                        let grad_q = policy_gradient_step(&q, &weighted, k, config.gradient_order)?;
                        let seed: Vec<f64> = grad_q.into_iter().map(|g| -g).collect();
                        (seed, mean_r, loss)
                    }
                    Objective::Regression => {
                        let m = q.len() as f64;
                        let loss = q.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m;
                        let seed = q.iter().zip(&e).map(|(a, b)| 2.0 * (a - b) / m).collect();
                        let order = rank_by_score(&q);
                        let r = reward_for_order(&order, &e, &x.races(), k, &reward)?.reward;
                        (seed, r, loss)
                    }
                };
                if !step_loss.is_finite() || seed.iter().any(|v: &f64| !v.is_finite()) {
                    return Err(numeric(epoch, id, "non-finite loss"));
                }
                let grads = tape
                    .backward(q_var, Matrix::from_vec(q.len(), 1, seed))
                    .into_param_grads(&net.store);
                (grads, step_reward, step_loss)
            };
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(numeric(epoch, id, "non-finite gradient"));
            }
            adam.step(&mut net.store, &grads);
            if !net.store.all_finite() {
                return Err(numeric(epoch, id, "non-finite parameters after update"));
            }
            reward_sum += step_reward;
            loss_sum += step_loss;
        }
        let validation_reward = mean_topk_reward(&net, val, config.lambda)?;
        if !validation_reward.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: non-finite validation reward")));
        }
        let n = train.len() as f64;
        log.push(EpochLog {
            epoch,
            train_reward: reward_sum / n,
            train_loss: loss_sum / n,
            validation_reward,
        });
        if best.as_ref().is_none_or(|b| validation_reward > b.validation_reward) {
            best = Some(Checkpoint::from_selector(&net, config, validation_reward, epoch));
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        log,
    })
}

/// Where evaluation scores come from.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a> {
    Model(&'a SiteSelector),
    /// Scores equal the enrollment labels.
    Oracle,
    /// A uniformly random order per instance.
    Random { seed: u64 },
}

impl ScoreSource<'_> {
    fn scores(&self, index: usize, x: &RankingInstance) -> Result<Vec<f64>> {
        match self {
            ScoreSource::Model(net) => net.scores(x),
            ScoreSource::Oracle => Ok(x.enrollments()),
            ScoreSource::Random { seed } => {
                let mut rng = substream(*seed, 1000 + index as u64);
                let mut q: Vec<f64> = (0..x.sites.len()).map(|i| i as f64).collect();
                q.shuffle(&mut rng);
                Ok(q)
            }
        }
    }
}

/// Per-instance evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub trial_id: String,
    pub copy: u32,
    pub selected: Vec<usize>,
    pub relative_error: f64,
    pub ndcg: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Enrollment-weighted racial mix of everyone enrolled at the selected sites.
    pub selected_race: [f64; N_RACE],
    /// The same mix over every candidate site.
    pub candidate_race: [f64; N_RACE],
    pub instances: Vec<InstanceMetrics>,
}

fn evaluate_one(source: &ScoreSource<'_>, index: usize, x: &RankingInstance, k: usize) -> Result<InstanceMetrics> {
    let q = source.scores(index, x)?;
    let order = rank_by_score(&q);
    let selected = order[..k].to_vec();
    let e = x.enrollments();
    let model_order: Vec<f64> = order.iter().map(|&i| e[i]).collect();
    Ok(InstanceMetrics {
        trial_id: x.trial.trial_id.clone(),
        copy: x.copy,
        relative_error: relative_error(&selected, &e),
        ndcg: ndcg(&model_order, k),
        entropy: population_entropy(&selected, x),
        selected,
    })
}

/// Enrollment-weighted race mix over the chosen sites of every instance.
fn pooled_race<'a>(picks: impl Iterator<Item = (&'a RankingInstance, Vec<usize>)>) -> [f64; N_RACE] {
    let (mut w, mut r) = (Vec::new(), Vec::new());
    for (x, sites) in picks {
        for i in sites {
            w.push(x.sites[i].enrollment as f64);
            r.push(x.sites[i].race);
        }
    }
    pooled_distribution(&w, &r).unwrap_or([0.0; N_RACE])
}

/// Deterministic top-K evaluation. Instances are split across `threads`
/// workers; results are identical for any thread count.
pub fn evaluate(
    source: ScoreSource<'_>,
    instances: &[RankingInstance],
    k: usize,
    lambda: f64,
    threads: usize,
) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    if let Some(x) = instances.iter().find(|x| x.sites.len() < k || k == 0) {
        return Err(Error::Dimension(format!(
            "trial {} has {} sites, cannot select K={k}",
            x.trial.trial_id,
            x.sites.len()
        )));
    }
    let threads = threads.clamp(1, instances.len());
    let chunk = instances.len().div_ceil(threads);
    let results: Vec<Result<Vec<InstanceMetrics>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .enumerate()
            .map(|(c, xs)| {
                let source = &source;
                scope.spawn(move || {
                    xs.iter()
                        .enumerate()
                        .map(|(j, x)| evaluate_one(source, c * chunk + j, x, k))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut per = Vec::with_capacity(instances.len());
    for r in results {
        per.extend(r?);
    }

    let (re_mean, re_ci) = mean_ci(&per.iter().map(|m| m.relative_error).collect::<Vec<_>>());
    let (ndcg_mean, ndcg_ci) = mean_ci(&per.iter().map(|m| m.ndcg).collect::<Vec<_>>());
    let (entropy_mean, _) = mean_ci(&per.iter().map(|m| m.entropy).collect::<Vec<_>>());

    let selected_race = pooled_race(instances.iter().zip(&per).map(|(x, m)| (x, m.selected.clone())));
    let candidate_race = pooled_race(instances.iter().map(|x| (x, (0..x.sites.len()).collect())));

    Ok(Evaluation {
        report: MetricReport {
            lambda,
            relative_error_mean: re_mean,
            relative_error_ci: re_ci,
            ndcg_mean,
            ndcg_ci,
            entropy_mean,
        },
        selected_race,
        candidate_race,
        instances: per,
    })
}

/// Evaluates a checkpoint after checking it against the dataset manifest.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    instances: &[RankingInstance],
    force: bool,
    threads: usize,
) -> Result<Evaluation> {
    checkpoint.check_manifest(manifest, force)?;
    let net = checkpoint.selector()?;
    let mut xs = instances.to_vec();
    apply_variant(&mut xs, checkpoint.config.variant);
    evaluate(ScoreSource::Model(&net), &xs, manifest.k, checkpoint.config.lambda, threads)
}

/// One point of a relative-error versus entropy trade-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    #[serde(flatten)]
    pub report: MetricReport,
    pub selected_race: [f64; N_RACE],
    pub validation_reward: f64,
    pub epoch: usize,
}

/// Split, train and evaluate on the test split.
pub fn run_experiment(
    instances: &[RankingInstance],
    dims: &DatasetManifest,
    config: &TrainConfig,
    threads: usize,
) -> Result<(TrainOutcome, Evaluation)> {
    config.validate()?;
    let mut xs = instances.to_vec();
    apply_variant(&mut xs, config.variant);
    let split = split_for(&xs, config)?;
    let outcome = train(&split.train, &split.val, dims, config)?;
    let net = outcome.checkpoint.selector()?;
    let eval = evaluate(ScoreSource::Model(&net), &split.test, dims.k, config.lambda, threads)?;
    Ok((outcome, eval))
}

/// Trains and evaluates one model per λ with shared seed and splits. Points
/// are sorted by λ.
pub fn sweep_lambda(
    instances: &[RankingInstance],
    dims: &DatasetManifest,
    base: &TrainConfig,
    lambdas: &[f64],
    threads: usize,
) -> Result<Vec<TradeoffPoint>> {
    if lambdas.is_empty() {
        return Err(Error::config("lambdas", "at least one value is required"));
    }
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    lambdas
        .into_iter()
        .map(|lambda| {
            let config = TrainConfig { lambda, ..base.clone() };
            let (outcome, eval) = run_experiment(instances, dims, &config, threads)?;
            Ok(TradeoffPoint {
                report: eval.report,
                selected_race: eval.selected_race,
                validation_reward: outcome.checkpoint.validation_reward,
                epoch: outcome.checkpoint.epoch,
            })
        })
        .collect()
}
