//! Domain records shared by every stage: trials, candidate sites, ranking
//! instances and the dataset manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Racial groups carried by every site, in schema order.
pub const RACE_GROUPS: [&str; 6] = ["White", "Hispanic", "Black", "Asian", "Mixed", "Others"];
pub const N_RACE: usize = RACE_GROUPS.len();

pub const SCHEMA_VERSION: &str = "fairsite-dataset/1";

/// The four site feature groups, in mask order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Static,
    Diagnosis,
    Prescription,
    History,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Static,
        Modality::Diagnosis,
        Modality::Prescription,
        Modality::History,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Presence bits for `[static, diagnosis, prescription, history]`.
pub type Mask = [bool; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub features: Vec<f64>,
    pub reduced_features: Vec<f64>,
}

/// One past trial of a site: the reduced trial vector and what the site enrolled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub trial: Vec<f64>,
    pub enrollment: i64,
}

/// A candidate site as seen for one trial.
///
/// A modality field may hold content while its mask bit is false; the mask
/// alone decides what a model is allowed to read. Use [`SiteRecord::visible_static`]
/// and friends rather than the raw fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    #[serde(rename = "static")]
    pub static_features: Option<Vec<f64>>,
    pub diagnoses: Option<Vec<usize>>,
    pub prescriptions: Option<Vec<usize>>,
    pub enrollment_history: Option<Vec<HistoryEntry>>,
    pub mask: Mask,
    pub enrollment: i64,
    pub race: [f64; N_RACE],
}

impl SiteRecord {
    pub fn is_visible(&self, m: Modality) -> bool {
        self.mask[m.index()]
    }

    /// Whether the record carries content for `m`, regardless of the mask.
    pub fn has_content(&self, m: Modality) -> bool {
        match m {
            Modality::Static => self.static_features.is_some(),
            Modality::Diagnosis => self.diagnoses.as_ref().is_some_and(|d| !d.is_empty()),
            Modality::Prescription => self.prescriptions.as_ref().is_some_and(|p| !p.is_empty()),
            Modality::History => self
                .enrollment_history
                .as_ref()
                .is_some_and(|h| !h.is_empty()),
        }
    }

    pub fn visible_static(&self) -> Option<&[f64]> {
        self.mask[0].then_some(()).and(self.static_features.as_deref())
    }

    pub fn visible_diagnoses(&self) -> Option<&[usize]> {
        self.mask[1].then_some(()).and(self.diagnoses.as_deref())
    }

    pub fn visible_prescriptions(&self) -> Option<&[usize]> {
        self.mask[2].then_some(()).and(self.prescriptions.as_deref())
    }

    pub fn visible_history(&self) -> Option<&[HistoryEntry]> {
        self.mask[3].then_some(()).and(self.enrollment_history.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingInstance {
    #[serde(flatten)]
    pub trial: TrialRecord,
    /// Missingness-augmentation copy index; copies share `trial_id`.
    #[serde(default)]
    pub copy: u32,
    pub sites: Vec<SiteRecord>,
}

impl RankingInstance {
    pub fn m(&self) -> usize {
        self.sites.len()
    }

    pub fn enrollments(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.enrollment as f64).collect()
    }

    pub fn races(&self) -> Vec<[f64; N_RACE]> {
        self.sites.iter().map(|s| s.race).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_schema")]
    pub schema_version: String,
    pub n_t: usize,
    pub n_t_prime: usize,
    pub n_s: usize,
    pub n_c: usize,
    pub n_d: usize,
    pub n_p: usize,
    pub n_h: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub record_count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_schema() -> String {
    SCHEMA_VERSION.to_string()
}

impl DatasetManifest {
    /// Desk-scale dimensions.
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            n_t: 32,
            n_t_prime: 24,
            n_s: 16,
            n_c: 50,
            n_d: 20,
            n_p: 12,
            n_h: 8,
            m: 20,
            k: 10,
            record_count: 0,
            seed: 0,
        }
    }

    /// Dimensions of the original claims-based feature set.
    pub fn full_scale() -> Self {
        Self {
            n_t: 1827,
            n_t_prime: 1827,
            n_s: 669,
            n_c: 500,
            n_d: 260,
            n_p: 100,
            n_h: 50,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_t", self.n_t),
            ("n_t_prime", self.n_t_prime),
            ("n_s", self.n_s),
            ("n_c", self.n_c),
            ("n_d", self.n_d),
            ("n_p", self.n_p),
            ("n_h", self.n_h),
            ("M", self.m),
            ("K", self.k),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.k > self.m {
            return Err(Error::config("K", format!("K={} exceeds M={}", self.k, self.m)));
        }
        Ok(())
    }

    /// Hash of the dimensional part of the manifest; checkpoints carry it.
    pub fn dims_hash(&self) -> String {
        let key = format!(
            "{}|n_t={}|n_t_prime={}|n_s={}|n_c={}|n_d={}|n_p={}|n_h={}|M={}|K={}",
            self.schema_version,
            self.n_t,
            self.n_t_prime,
            self.n_s,
            self.n_c,
            self.n_d,
            self.n_p,
            self.n_h,
            self.m,
            self.k
        );
        hex::encode(Sha256::digest(key.as_bytes()))
    }
}

const RACE_TOL: f64 = 1e-6;
const PERCENT_TOL: f64 = 0.5;

/// Checks a trial against the manifest dimensions.
pub fn validate_trial(trial: &TrialRecord, manifest: &DatasetManifest) -> Result<()> {
    if trial.features.len() != manifest.n_t {
        return Err(Error::Dimension(format!(
            "trial {} has {} features, expected n_t={}",
            trial.trial_id,
            trial.features.len(),
            manifest.n_t
        )));
    }
    if trial.reduced_features.len() != manifest.n_t_prime {
        return Err(Error::Dimension(format!(
            "trial {} has {} reduced features, expected n_t_prime={}",
            trial.trial_id,
            trial.reduced_features.len(),
            manifest.n_t_prime
        )));
    }
    if !trial.features.iter().chain(&trial.reduced_features).all(|v| v.is_finite()) {
        return Err(Error::Validation(format!(
            "trial {} has non-finite features",
            trial.trial_id
        )));
    }
    Ok(())
}

fn normalize_race(race: [f64; N_RACE]) -> Result<[f64; N_RACE]> {
    if race.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!(
            "race distribution {race:?} has negative or non-finite entries"
        )));
    }
    let total: f64 = race.iter().sum();
    if (total - 1.0).abs() <= RACE_TOL && race.iter().all(|v| *v <= 1.0) {
        return Ok(race);
    }
    if (total - 100.0).abs() <= PERCENT_TOL && race.iter().all(|v| *v <= 100.0) {
        return Ok(race.map(|v| v / total));
    }
    Err(Error::Validation(format!(
        "race distribution {race:?} sums to {total}, neither a fraction nor a percentage"
    )))
}

/// Validates a site against the manifest, converting percentage race
/// distributions to fractions. Idempotent.
pub fn validate_site(mut site: SiteRecord, manifest: &DatasetManifest) -> Result<SiteRecord> {
    let id = site.site_id.clone();
    let fail = |reason: String| Error::Validation(format!("site {id}: {reason}"));

    if !site.mask.iter().any(|&b| b) {
        return Err(fail("no modality present".into()));
    }
    for m in Modality::ALL {
        if site.is_visible(m) && !site.has_content(m) {
            return Err(fail(format!("mask marks {m:?} present but it has no content")));
        }
    }
    if let Some(s) = &site.static_features {
        if s.len() != manifest.n_s {
            return Err(Error::Dimension(format!(
                "site {id}: static has {} features, expected n_s={}",
                s.len(),
                manifest.n_s
            )));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite static features".into()));
        }
    }
    for (name, codes, vocab) in [
        ("diagnoses", &site.diagnoses, manifest.n_d),
        ("prescriptions", &site.prescriptions, manifest.n_p),
    ] {
        if let Some(codes) = codes {
            if codes.len() > manifest.n_c {
                return Err(Error::Dimension(format!(
                    "site {id}: {name} has {} codes, at most n_c={} allowed",
                    codes.len(),
                    manifest.n_c
                )));
            }
            if let Some(bad) = codes.iter().find(|&&c| c >= vocab) {
                return Err(Error::Dimension(format!(
                    "site {id}: {name} code {bad} outside vocabulary of {vocab}"
                )));
            }
        }
    }
    if let Some(hist) = &site.enrollment_history {
        if hist.len() > manifest.n_h {
            return Err(Error::Dimension(format!(
                "site {id}: {} history rows, at most n_h={} allowed",
                hist.len(),
                manifest.n_h
            )));
        }
        for row in hist {
            if row.trial.len() != manifest.n_t_prime {
                return Err(Error::Dimension(format!(
                    "site {id}: history trial vector has {} entries, expected n_t_prime={}",
                    row.trial.len(),
                    manifest.n_t_prime
                )));
            }
            if row.enrollment < 0 {
                return Err(fail("negative enrollment in history".into()));
            }
            if !row.trial.iter().all(|v| v.is_finite()) {
                return Err(fail("non-finite history trial vector".into()));
            }
        }
    }
    if site.enrollment < 0 {
        return Err(fail(format!("negative enrollment {}", site.enrollment)));
    }
    site.race = normalize_race(site.race).map_err(|e| fail(e.to_string()))?;
    Ok(site)
}

/// Validates an instance: trial dimensions, site count, unique site ids, and every site.
pub fn validate_instance(
    mut inst: RankingInstance,
    manifest: &DatasetManifest,
) -> Result<RankingInstance> {
    validate_trial(&inst.trial, manifest)?;
    if inst.sites.len() != manifest.m {
        return Err(Error::Dimension(format!(
            "trial {} has {} sites, expected M={}",
            inst.trial.trial_id,
            inst.sites.len(),
            manifest.m
        )));
    }
    let mut ids: Vec<&str> = inst.sites.iter().map(|s| s.site_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!(
            "trial {} has duplicate site ids",
            inst.trial.trial_id
        )));
    }
    inst.sites = inst
        .sites
        .into_iter()
        .map(|s| validate_site(s, manifest))
        .collect::<Result<_>>()?;
    Ok(inst)
}
