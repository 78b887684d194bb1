//! Synthetic trial/site data.
//!
//! A pool of sites is built with a specialty, a racial distribution and
//! bigram-chain diagnosis and prescription histories. Trials are then run
//! one after another: each draws M sites from the pool, a labeler assigns
//! enrollments, and every drawn site's enrollment history grows by one row.
//! Finally each instance is copied with random per-site modality masks.
//!
//! Static site features are laid out as
//! `[specialty one-hot | race distribution | standard normal noise]`, and trial
//! features as `[target specialty one-hot | standard normal]`. The reduced
//! trial vector is the first `n_t_prime` trial features.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    DatasetManifest, HistoryEntry, Mask, Modality, RankingInstance, SiteRecord, TrialRecord, N_RACE,
};

/// Independent random stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    /// Enrollment of a site with all-zero inputs.
    pub intercept: f64,
    /// Multiplies `softplus(z) − ln 2`.
    pub scale: f64,
    /// Weight of the site-quality projection of the noise part of static features.
    pub quality: f64,
    /// Weight of the bilinear trial/site affinity.
    pub interaction: f64,
    /// Weight of the mean of the last [`MOMENTUM_WINDOW`] history enrollments.
    pub momentum: f64,
    /// Added when the site's specialty equals the trial's target specialty.
    pub specialty_bonus: f64,
    pub noise_sd: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            intercept: 8.0,
            scale: 6.0,
            quality: 1.5,
            interaction: 0.5,
            momentum: 0.05,
            specialty_bonus: 0.75,
            noise_sd: 0.1,
        }
    }
}

pub const MOMENTUM_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub pool_size: usize,
    pub n_trials: usize,
    pub dimensions: DatasetManifest,
    pub p_present: f64,
    pub copies_per_trial: usize,
    pub seed: u64,
    pub specialty_count: usize,
    /// Relative frequency of each specialty; empty means uniform.
    pub specialty_weights: Vec<f64>,
    pub race_prior_means: [f64; N_RACE],
    pub race_prior_stddevs: [f64; N_RACE],
    /// Dirichlet concentration of each bigram transition row.
    pub bigram_concentration: f64,
    /// Dirichlet concentration of each specialty's first-code distribution.
    pub initial_concentration: f64,
    pub labeler: LabelerConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pool_size: 500,
            n_trials: 300,
            dimensions: DatasetManifest::desk(),
            p_present: 0.8,
            copies_per_trial: 10,
            seed: 0,
            specialty_count: 4,
            specialty_weights: Vec::new(),
            race_prior_means: [0.60, 0.17, 0.13, 0.06, 0.025, 0.015],
            race_prior_stddevs: [0.30, 0.16, 0.16, 0.08, 0.03, 0.02],
            bigram_concentration: 0.3,
            initial_concentration: 0.2,
            labeler: LabelerConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dimensions;
        d.validate()?;
        if !(self.p_present > 0.0 && self.p_present <= 1.0) {
            return Err(Error::config("p_present", "must be in (0, 1]"));
        }
        if self.copies_per_trial == 0 {
            return Err(Error::config("copies_per_trial", "must be at least 1"));
        }
        if self.pool_size < d.m {
            return Err(Error::config(
                "pool_size",
                format!("pool of {} cannot supply M={} sites", self.pool_size, d.m),
            ));
        }
        if self.specialty_count == 0 {
            return Err(Error::config("specialty_count", "must be positive"));
        }
        if !self.specialty_weights.is_empty()
            && (self.specialty_weights.len() != self.specialty_count
                || self.specialty_weights.iter().any(|w| !(*w >= 0.0))
                || self.specialty_weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::config(
                "specialty_weights",
                "must be empty or specialty_count nonnegative weights with a positive sum",
            ));
        }
        if d.n_s < self.specialty_count + N_RACE {
            return Err(Error::config(
                "dimensions.n_s",
                format!("must hold specialty one-hot and race ({})", self.specialty_count + N_RACE),
            ));
        }
        if d.n_t < self.specialty_count {
            return Err(Error::config("dimensions.n_t", "must hold the specialty one-hot"));
        }
        if d.n_t_prime > d.n_t {
            return Err(Error::config("dimensions.n_t_prime", "must not exceed n_t"));
        }
        if self.race_prior_means.iter().any(|v| !(*v >= 0.0)) || self.race_prior_means.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("race_prior_means", "must be nonnegative with a positive sum"));
        }
        if self.race_prior_stddevs.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("race_prior_stddevs", "must be nonnegative"));
        }
        if !(self.bigram_concentration > 0.0) {
            return Err(Error::config("bigram_concentration", "must be positive"));
        }
        if !(self.initial_concentration > 0.0) {
            return Err(Error::config("initial_concentration", "must be positive"));
        }
        Ok(())
    }
}

/// Specialty-conditioned first-code distributions and a row-stochastic
/// transition matrix over code categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramTable {
    initial: Vec<Vec<f64>>,
    transition: Vec<Vec<f64>>,
}

const ROW_TOL: f64 = 1e-9;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::Validation(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|v| v / s).collect();
        }
    }
}

fn draw_categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

impl BigramTable {
    /// Validates and wraps explicit tables. `initial` has one row per specialty.
    pub fn new(initial: Vec<Vec<f64>>, transition: Vec<Vec<f64>>) -> Result<Self> {
        let n = transition.len();
        if n == 0 {
            return Err(Error::Validation("bigram table has no categories".into()));
        }
        for (i, row) in transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!("transition row {i} has {} entries, expected {n}", row.len())));
            }
            check_row(row, &format!("transition row {i}"))?;
        }
        for (s, row) in initial.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!("initial row {s} has {} entries, expected {n}", row.len())));
            }
            check_row(row, &format!("initial row {s}"))?;
        }
        Ok(Self { initial, transition })
    }

    /// Rows drawn from symmetric Dirichlet distributions.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        specialties: usize,
        categories: usize,
        initial_concentration: f64,
        concentration: f64,
    ) -> Result<Self> {
        let initial = (0..specialties)
            .map(|_| dirichlet(rng, initial_concentration, categories))
            .collect();
        let transition = (0..categories)
            .map(|_| dirichlet(rng, concentration, categories))
            .collect();
        Self::new(initial, transition)
    }

    pub fn categories(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self, specialty: usize) -> &[f64] {
        &self.initial[specialty]
    }
}

/// Draws a code sequence of exactly `length` categories.
pub fn sample_code_sequence<R: Rng + ?Sized>(
    table: &BigramTable,
    specialty: usize,
    length: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut seq = Vec::with_capacity(length);
    if length == 0 {
        return seq;
    }
    let mut cur = draw_categorical(rng, table.initial(specialty));
    seq.push(cur);
    while seq.len() < length {
        cur = draw_categorical(rng, &table.transition[cur]);
        seq.push(cur);
    }
    seq
}

fn one_hot_index(v: &[f64]) -> Option<usize> {
    v.iter().position(|&x| x == 1.0)
}

/// Specialty encoded in a site's static features.
pub fn site_specialty(site: &SiteRecord, specialty_count: usize) -> Option<usize> {
    site.static_features
        .as_deref()
        .and_then(|s| one_hot_index(&s[..specialty_count.min(s.len())]))
}

/// Per-group normal draws clipped at 0 and renormalized.
pub fn sample_race<R: Rng + ?Sized>(rng: &mut R, means: &[f64; N_RACE], sds: &[f64; N_RACE]) -> [f64; N_RACE] {
    let mut r = [0.0; N_RACE];
    for ((v, m), s) in r.iter_mut().zip(means).zip(sds) {
        let z: f64 = StandardNormal.sample(rng);
        *v = (m + s * z).max(0.0);
    }
    let total: f64 = r.iter().sum();
    if total > 0.0 {
        r.map(|v| v / total)
    } else {
        let t: f64 = means.iter().sum();
        means.map(|v| v / t)
    }
}

/// Code tables used for diagnoses and prescriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTables {
    pub diagnoses: BigramTable,
    pub prescriptions: BigramTable,
}

impl CodeTables {
    pub fn random<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        let d = &config.dimensions;
        Ok(Self {
            diagnoses: BigramTable::random(rng, config.specialty_count, d.n_d, config.initial_concentration, config.bigram_concentration)?,
            prescriptions: BigramTable::random(rng, config.specialty_count, d.n_p, config.initial_concentration, config.bigram_concentration)?,
        })
    }
}

/// Builds `pool_size` unlabeled sites with empty enrollment histories.
pub fn build_site_pool<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    tables: &CodeTables,
    rng: &mut R,
) -> Result<Vec<SiteRecord>> {
    config.validate()?;
    let d = &config.dimensions;
    let weights = if config.specialty_weights.is_empty() {
        vec![1.0; config.specialty_count]
    } else {
        config.specialty_weights.clone()
    };
    let width = (config.pool_size.max(1) - 1).to_string().len();
    let mut pool = Vec::with_capacity(config.pool_size);
    for i in 0..config.pool_size {
        let specialty = draw_categorical(rng, &weights);
        let race = sample_race(rng, &config.race_prior_means, &config.race_prior_stddevs);
        let mut static_features = vec![0.0; d.n_s];
        static_features[specialty] = 1.0;
        static_features[config.specialty_count..config.specialty_count + N_RACE].copy_from_slice(&race);
        for v in &mut static_features[config.specialty_count + N_RACE..] {
            *v = StandardNormal.sample(rng);
        }
        let diagnoses = sample_code_sequence(&tables.diagnoses, specialty, d.n_c, rng);
        let prescriptions = sample_code_sequence(&tables.prescriptions, specialty, d.n_c, rng);
        pool.push(SiteRecord {
            site_id: format!("site-{i:0width$}"),
            static_features: Some(static_features),
            diagnoses: Some(diagnoses),
            prescriptions: Some(prescriptions),
            enrollment_history: None,
            mask: [true, true, true, false],
            enrollment: 0,
            race,
        });
    }
    Ok(pool)
}

/// Random trials with a one-hot target specialty in the leading features.
pub fn generate_trials<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Vec<TrialRecord> {
    let d = &config.dimensions;
    let width = (config.n_trials.max(1) - 1).to_string().len();
    (0..config.n_trials)
        .map(|i| {
            let specialty = rng.random_range(0..config.specialty_count);
            let mut features = vec![0.0; d.n_t];
            features[specialty] = 1.0;
            for v in &mut features[config.specialty_count..] {
                *v = StandardNormal.sample(rng);
            }
            TrialRecord {
                trial_id: format!("trial-{i:0width$}"),
                reduced_features: features[..d.n_t_prime].to_vec(),
                features,
            }
        })
        .collect()
}

/// Assigns an enrollment to a site for a trial, given the site's history so far.
pub trait EnrollmentLabeler {
    fn label(&self, trial: &TrialRecord, site: &SiteRecord, rng: &mut ChaCha8Rng) -> i64;
}

impl<F> EnrollmentLabeler for F
where
    F: Fn(&TrialRecord, &SiteRecord, &mut ChaCha8Rng) -> i64,
{
    fn label(&self, trial: &TrialRecord, site: &SiteRecord, rng: &mut ChaCha8Rng) -> i64 {
        self(trial, site, rng)
    }
}

/// Parametric labeler:
/// `round(max(0, intercept + scale·(softplus(z) − ln 2)))` with
/// `z = quality·⟨w, noise⟩/√n + interaction·tᵀ P s/√(n_t n_s) + momentum·mean(last 3 enrollments)
///      + specialty_bonus·[specialty match] + noise_sd·ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricLabeler {
    pub config: LabelerConfig,
    pub specialty_count: usize,
    quality_weights: Vec<f64>,
    affinity: Vec<Vec<f64>>,
}

impl ParametricLabeler {
    pub fn new(config: LabelerConfig, specialty_count: usize, n_t: usize, n_s: usize, rng: &mut ChaCha8Rng) -> Self {
        let noise_dims = n_s.saturating_sub(specialty_count + N_RACE);
        let quality_weights = (0..noise_dims).map(|_| StandardNormal.sample(rng)).collect();
        let affinity = (0..n_t)
            .map(|_| (0..n_s).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Self {
            config,
            specialty_count,
            quality_weights,
            affinity,
        }
    }

    /// Latent score before the softplus link, without noise.
    pub fn latent(&self, trial: &TrialRecord, site: &SiteRecord) -> f64 {
        let c = &self.config;
        let mut z = 0.0;
        if let Some(s) = site.static_features.as_deref() {
            let noise = &s[(self.specialty_count + N_RACE).min(s.len())..];
            if !noise.is_empty() {
                let q: f64 = noise.iter().zip(&self.quality_weights).map(|(a, b)| a * b).sum();
                z += c.quality * q / (noise.len() as f64).sqrt();
            }
            let t = &trial.features;
            let mut bilinear = 0.0;
            for (ti, row) in t.iter().zip(&self.affinity) {
                if *ti != 0.0 {
                    bilinear += ti * crate::tensor::dot(row, s);
                }
            }
            z += c.interaction * bilinear / ((t.len() * s.len()) as f64).sqrt();
            let trial_spec = one_hot_index(&t[..self.specialty_count.min(t.len())]);
            if trial_spec.is_some() && trial_spec == site_specialty(site, self.specialty_count) {
                z += c.specialty_bonus;
            }
        }
        if let Some(h) = site.enrollment_history.as_deref().filter(|h| !h.is_empty()) {
            let recent = &h[h.len().saturating_sub(MOMENTUM_WINDOW)..];
            let mean = recent.iter().map(|r| r.enrollment as f64).sum::<f64>() / recent.len() as f64;
            z += c.momentum * mean;
        }
        z
    }

    fn link(&self, z: f64) -> i64 {
        let softplus = if z > 30.0 { z } else { z.exp().ln_1p() };
        let e = self.config.intercept + self.config.scale * (softplus - std::f64::consts::LN_2);
        e.max(0.0).round() as i64
    }
}

impl EnrollmentLabeler for ParametricLabeler {
    fn label(&self, trial: &TrialRecord, site: &SiteRecord, rng: &mut ChaCha8Rng) -> i64 {
        let eps: f64 = StandardNormal.sample(rng);
        self.link(self.latent(trial, site) + self.config.noise_sd * eps)
    }
}

/// The labeler used for generation, with coefficients drawn from `seed`.
pub fn default_labeler(config: &GeneratorConfig) -> ParametricLabeler {
    let d = &config.dimensions;
    let mut rng = substream(config.seed, 5);
    ParametricLabeler::new(config.labeler.clone(), config.specialty_count, d.n_t, d.n_s, &mut rng)
}

/// Runs trials in the given order, labeling M uniformly drawn pool sites per
/// trial and appending each result to the site's history (last `n_h` kept).
///
/// Each instance carries the sites as they were before the trial.
pub fn simulate_trials<L: EnrollmentLabeler + ?Sized>(
    pool: &mut [SiteRecord],
    trials: &[TrialRecord],
    labeler: &L,
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RankingInstance>> {
    let d = &config.dimensions;
    if pool.len() < d.m {
        return Err(Error::config(
            "pool_size",
            format!("pool of {} cannot supply M={} sites", pool.len(), d.m),
        ));
    }
    let mut out = Vec::with_capacity(trials.len());
    for trial in trials {
        let picks = index::sample(rng, pool.len(), d.m).into_vec();
        let mut sites = Vec::with_capacity(d.m);
        for &p in &picks {
            let mut snapshot = pool[p].clone();
            snapshot.enrollment_history = snapshot.enrollment_history.filter(|h| !h.is_empty());
            snapshot.mask = Modality::ALL.map(|m| snapshot.has_content(m));
            snapshot.enrollment = labeler.label(trial, &snapshot, rng).max(0);
            sites.push(snapshot);
        }
        for (&p, site) in picks.iter().zip(&sites) {
            let hist = pool[p].enrollment_history.get_or_insert_with(Vec::new);
            hist.push(HistoryEntry {
                trial: trial.reduced_features.clone(),
                enrollment: site.enrollment,
            });
            if hist.len() > d.n_h {
                hist.drain(..hist.len() - d.n_h);
            }
        }
        out.push(RankingInstance {
            trial: trial.clone(),
            copy: 0,
            sites,
        });
    }
    Ok(out)
}

/// Matches a trial to M sites from labeled candidates: the top-M by
/// enrollment, padded with random other pool sites assigned enrollment 0.
///
/// `labeled` holds `(pool index, enrollment)` pairs.
pub fn top_m_padded<R: Rng + ?Sized>(
    labeled: &[(usize, i64)],
    pool_size: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<(usize, i64)>> {
    if pool_size < m {
        return Err(Error::config("pool_size", format!("pool of {pool_size} cannot supply M={m} sites")));
    }
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.truncate(m);
    let mut taken = vec![false; pool_size];
    for &(i, _) in &sorted {
        taken[i] = true;
    }
    let mut rest: Vec<usize> = (0..pool_size).filter(|&i| !taken[i]).collect();
    rest.shuffle(rng);
    let need = m - sorted.len();
    sorted.extend(rest.into_iter().take(need).map(|i| (i, 0)));
    Ok(sorted)
}

/// Draws a mask with independent `Bernoulli(p_present)` bits for the
/// modalities in `available`, redrawing until at least one bit is set.
pub fn draw_mask<R: Rng + ?Sized>(available: &Mask, p_present: f64, rng: &mut R) -> Mask {
    assert!(available.iter().any(|&a| a), "site has no modality content");
    loop {
        let mut mask = [false; 4];
        for (m, &a) in mask.iter_mut().zip(available) {
            let draw = rng.random::<f64>() < p_present;
            *m = a && draw;
        }
        if mask.iter().any(|&b| b) {
            return mask;
        }
    }
}

/// Copies every instance `copies_per_trial` times with fresh per-site masks.
/// Hidden modality content stays in the record.
pub fn apply_missingness<R: Rng + ?Sized>(
    instances: &[RankingInstance],
    p_present: f64,
    copies_per_trial: usize,
    rng: &mut R,
) -> Vec<RankingInstance> {
    let mut out = Vec::with_capacity(instances.len() * copies_per_trial);
    for inst in instances {
        for copy in 0..copies_per_trial {
            let mut c = inst.clone();
            c.copy = copy as u32;
            for site in &mut c.sites {
                let available = Modality::ALL.map(|m| site.has_content(m));
                site.mask = draw_mask(&available, p_present, rng);
            }
            out.push(c);
        }
    }
    out
}

/// Full generation: pool, trials, sequential simulation, missingness.
pub fn generate(config: &GeneratorConfig) -> Result<(DatasetManifest, Vec<RankingInstance>)> {
    generate_with_labeler(config, &default_labeler(config))
}

pub fn generate_with_labeler<L: EnrollmentLabeler + ?Sized>(
    config: &GeneratorConfig,
    labeler: &L,
) -> Result<(DatasetManifest, Vec<RankingInstance>)> {
    config.validate()?;
    let tables = CodeTables::random(config, &mut substream(config.seed, 1))?;
    let mut pool = build_site_pool(config, &tables, &mut substream(config.seed, 2))?;
    let mut trial_rng = substream(config.seed, 3);
    let mut trials = generate_trials(config, &mut trial_rng);
    trials.shuffle(&mut trial_rng);
    let labeled = simulate_trials(&mut pool, &trials, labeler, config, &mut substream(config.seed, 4))?;
    let instances = apply_missingness(&labeled, config.p_present, config.copies_per_trial, &mut substream(config.seed, 6));
    let mut manifest = config.dimensions.clone();
    manifest.seed = config.seed;
    manifest.record_count = instances.len();
    Ok((manifest, instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_instance;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            pool_size: 40,
            n_trials: 12,
            copies_per_trial: 2,
            dimensions: DatasetManifest {
                n_c: 8,
                m: 6,
                k: 3,
                n_h: 3,
                ..DatasetManifest::desk()
            },
            seed: 17,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn identity_transition_gives_constant_sequence() {
        let n = 5;
        let transition = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let table = BigramTable::new(vec![vec![0.2; n]], transition).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let s = sample_code_sequence(&table, 0, 12, &mut rng);
            assert_eq!(s.len(), 12);
            assert!(s.iter().all(|&c| c == s[0]));
        }
        assert!(sample_code_sequence(&table, 0, 0, &mut rng).is_empty());
    }

    #[test]
    fn degenerate_rows_fail_at_construction() {
        assert!(BigramTable::new(vec![vec![0.5, 0.5]], vec![vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(BigramTable::new(vec![vec![0.5, 0.6]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn empirical_bigrams_match_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = BigramTable::random(&mut rng, 2, 4, 1.0, 1.0).unwrap();
        let n = table.categories();
        let mut counts = vec![vec![0usize; n]; n];
        let mut transitions = 0;
        while transitions < 100_000 {
            let s = sample_code_sequence(&table, transitions % 2, 101, &mut rng);
            for w in s.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
            transitions += 100;
        }
        for (i, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total < 1000 {
                continue;
            }
            let tv: f64 = row
                .iter()
                .zip(&table.transition()[i])
                .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.01, "row {i}: total variation {tv}");
        }
    }

    #[test]
    fn zero_variance_race_is_normalized_means() {
        let means = [3.0, 1.0, 1.0, 0.5, 0.25, 0.25];
        let r = sample_race(&mut ChaCha8Rng::seed_from_u64(0), &means, &[0.0; 6]);
        let t: f64 = means.iter().sum();
        assert_eq!(r, means.map(|v| v / t));

        let config = GeneratorConfig {
            pool_size: 6,
            race_prior_stddevs: [0.0; 6],
            ..small()
        };
        let tables = CodeTables::random(&config, &mut substream(1, 1)).unwrap();
        let pool = build_site_pool(&GeneratorConfig { pool_size: 6, ..config.clone() }, &tables, &mut substream(1, 2)).unwrap();
        let m = config.race_prior_means;
        let t: f64 = m.iter().sum();
        assert_eq!(pool[0].race, m.map(|v| v / t));
    }

    #[test]
    fn pool_is_deterministic_and_well_formed() {
        let config = small();
        let tables = CodeTables::random(&config, &mut substream(3, 1)).unwrap();
        let a = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        let b = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for s in &a {
            assert!(s.enrollment_history.is_none());
            assert_eq!(s.diagnoses.as_ref().unwrap().len(), 8);
            assert!(site_specialty(s, config.specialty_count).is_some());
            assert!((s.race.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_labeler_single_trial() {
        let config = small();
        let tables = CodeTables::random(&config, &mut substream(3, 1)).unwrap();
        let mut pool = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        let trials = generate_trials(&config, &mut substream(3, 3));
        let zero = |_: &TrialRecord, _: &SiteRecord, _: &mut ChaCha8Rng| 0i64;
        let out = simulate_trials(&mut pool, &trials[..1], &zero, &config, &mut substream(3, 4)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sites.len(), 6);
        assert!(out[0].sites.iter().all(|s| s.enrollment == 0));
        let with_history = pool.iter().filter(|s| s.enrollment_history.as_ref().is_some_and(|h| h.len() == 1)).count();
        assert_eq!(with_history, 6);
    }

    #[test]
    fn overlapping_site_carries_earlier_trial() {
        let config = GeneratorConfig {
            pool_size: 6,
            ..small()
        };
        let tables = CodeTables::random(&config, &mut substream(3, 1)).unwrap();
        let mut pool = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        let trials = generate_trials(&config, &mut substream(3, 3));
        // Pool of exactly M: every site is in both trials.
        let count = |t: &TrialRecord, s: &SiteRecord, _: &mut ChaCha8Rng| {
            (t.trial_id.len() + s.site_id.len()) as i64 + s.enrollment_history.as_ref().map_or(0, |h| h.len() as i64)
        };
        let out = simulate_trials(&mut pool, &trials[..2], &count, &config, &mut substream(3, 4)).unwrap();
        for first in &out[0].sites {
            assert!(first.enrollment_history.is_none());
            let second = out[1].sites.iter().find(|s| s.site_id == first.site_id).unwrap();
            let h = second.enrollment_history.as_ref().unwrap();
            assert_eq!(h.len(), 1);
            assert_eq!(h[0].trial, trials[0].reduced_features);
            assert_eq!(h[0].enrollment, first.enrollment);
            assert!(second.mask[3]);
        }
    }

    #[test]
    fn histories_are_truncated_to_most_recent() {
        let config = GeneratorConfig {
            pool_size: 6,
            n_trials: 5,
            ..small()
        };
        let tables = CodeTables::random(&config, &mut substream(3, 1)).unwrap();
        let mut pool = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        let trials = generate_trials(&config, &mut substream(3, 3));
        let labeler = |t: &TrialRecord, _: &SiteRecord, _: &mut ChaCha8Rng| t.trial_id[6..].parse::<i64>().unwrap();
        simulate_trials(&mut pool, &trials, &labeler, &config, &mut substream(3, 4)).unwrap();
        for s in &pool {
            let h = s.enrollment_history.as_ref().unwrap();
            assert_eq!(h.iter().map(|r| r.enrollment).collect::<Vec<_>>(), vec![2, 3, 4]);
        }
    }

    #[test]
    fn pool_smaller_than_m_is_an_error() {
        let config = small();
        let tables = CodeTables::random(&config, &mut substream(3, 1)).unwrap();
        let mut pool = build_site_pool(&config, &tables, &mut substream(3, 2)).unwrap();
        pool.truncate(3);
        let trials = generate_trials(&config, &mut substream(3, 3));
        let labeler = default_labeler(&config);
        assert!(simulate_trials(&mut pool, &trials, &labeler, &config, &mut substream(3, 4)).is_err());
    }

    #[test]
    fn top_m_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labeled = [(3, 10), (7, 25), (1, 4)];
        let got = top_m_padded(&labeled, 20, 5, &mut rng).unwrap();
        assert_eq!(&got[..3], &[(7, 25), (3, 10), (1, 4)]);
        assert!(got[3..].iter().all(|&(i, e)| e == 0 && ![3, 7, 1].contains(&i)));
        assert_ne!(got[3].0, got[4].0);
        let many: Vec<(usize, i64)> = (0..10).map(|i| (i, i as i64)).collect();
        let got = top_m_padded(&many, 20, 4, &mut rng).unwrap();
        assert_eq!(got.iter().map(|x| x.0).collect::<Vec<_>>(), vec![9, 8, 7, 6]);
    }

    #[test]
    fn mask_distribution_matches_conditioned_bernoulli() {
        let p = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let m = draw_mask(&[true; 4], p, &mut rng);
            let code = m.iter().enumerate().fold(0, |acc, (i, &b)| acc | ((b as usize) << i));
            counts[code] += 1;
        }
        assert_eq!(counts[0], 0);
        let norm = 1.0 - (1.0 - p).powi(4);
        for (code, &c) in counts.iter().enumerate().skip(1) {
            let ones = (code as u32).count_ones() as i32;
            let exact = p.powi(ones) * (1.0 - p).powi(4 - ones) / norm;
            let sd = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - exact).abs() < 5.0 * sd + 1e-4, "mask {code:04b}");
        }
        let per_bit = counts.iter().enumerate().filter(|(c, _)| c & 1 == 1).map(|(_, &v)| v).sum::<usize>();
        assert!((per_bit as f64 / n as f64 - p / norm).abs() < 0.005);
    }

    #[test]
    fn missingness_copies() {
        let config = small();
        let (_, base) = generate(&GeneratorConfig { copies_per_trial: 1, p_present: 1.0, ..config.clone() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ten = apply_missingness(&base, 0.8, 10, &mut rng);
        assert_eq!(ten.len(), 10 * base.len());
        let full = apply_missingness(&base, 1.0, 3, &mut rng);
        for (i, c) in full.iter().enumerate() {
            let src = &base[i / 3];
            assert_eq!(c.copy as usize, i % 3);
            assert_eq!(c.sites, src.sites);
        }
    }

    #[test]
    fn labeler_behaviour() {
        let config = GeneratorConfig {
            labeler: LabelerConfig { noise_sd: 0.0, ..LabelerConfig::default() },
            ..small()
        };
        let labeler = default_labeler(&config);
        let d = &config.dimensions;
        let trial = TrialRecord { trial_id: "t".into(), features: vec![0.0; d.n_t], reduced_features: vec![0.0; d.n_t_prime] };
        let mut site = SiteRecord {
            site_id: "s".into(),
            static_features: Some(vec![0.0; d.n_s]),
            diagnoses: None,
            prescriptions: None,
            enrollment_history: None,
            mask: [true, false, false, false],
            enrollment: 0,
            race: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(labeler.label(&trial, &site, &mut rng), config.labeler.intercept.round() as i64);

        let mut last = f64::NEG_INFINITY;
        for e in [0, 2, 5, 10, 20, 40] {
            site.enrollment_history = Some(vec![HistoryEntry { trial: vec![0.0; d.n_t_prime], enrollment: e }; 3]);
            let z = labeler.latent(&trial, &site);
            assert!(z > last);
            last = z;
        }

        let config = small();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_instances_validate() {
        let config = small();
        let (manifest, xs) = generate(&config).unwrap();
        assert_eq!(xs.len(), 12 * 2);
        assert_eq!(manifest.record_count, 24);
        for x in xs {
            for s in &x.sites {
                assert!(s.enrollment_history.as_ref().is_none_or(|h| h.len() <= 3));
            }
            validate_instance(x, &manifest).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig { p_present: 0.0, ..small() }.validate().is_err());
        assert!(GeneratorConfig { copies_per_trial: 0, ..small() }.validate().is_err());
        assert!(GeneratorConfig { pool_size: 3, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }
}
