//! The full scoring network: encoders, fusion and set scorer over one instance.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::datagen::substream;
use crate::encoders::{encode_site_var, encode_static_var, EncoderParams, StaticKind, DEFAULT_EMBEDDING_WIDTH};
use crate::error::{Error, Result};
use crate::fusion::{fuse_site_var, FusionKind, FusionParams, DEFAULT_HEADS};
use crate::model::{DatasetManifest, RankingInstance};
use crate::scorer::{score_sites_var, ScorerParams, DEFAULT_LAYERS};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embedding_width: usize,
    pub fusion: FusionKind,
    pub fusion_heads: usize,
    pub scorer_layers: usize,
    pub scorer_heads: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embedding_width: DEFAULT_EMBEDDING_WIDTH,
            fusion: FusionKind::Mcat,
            fusion_heads: DEFAULT_HEADS,
            scorer_layers: DEFAULT_LAYERS,
            scorer_heads: DEFAULT_HEADS,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_width == 0 {
            return Err(Error::config("network.embedding_width", "must be positive"));
        }
        if self.fusion_heads == 0 || self.embedding_width % self.fusion_heads != 0 {
            return Err(Error::config(
                "network.fusion_heads",
                "must be positive and divide embedding_width",
            ));
        }
        if self.scorer_heads == 0 || (2 * self.embedding_width) % self.scorer_heads != 0 {
            return Err(Error::config(
                "network.scorer_heads",
                "must be positive and divide 2 × embedding_width",
            ));
        }
        Ok(())
    }
}

/// Parameters and layout of the scoring network.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSelector {
    pub config: NetworkConfig,
    pub dims: DatasetManifest,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub fusion: FusionParams,
    pub scorer: ScorerParams,
}

impl SiteSelector {
    /// Fresh network. Each block draws its initial weights from its own
    /// substream of `seed`.
    pub fn new(dims: &DatasetManifest, config: &NetworkConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        config.validate()?;
        let stream = |i: u64| -> ChaCha8Rng { substream(seed, 100 + i) };
        let n = config.embedding_width;
        let mut store = ParamStore::new();
        let encoders = EncoderParams::new(&mut store, stream(0), dims, n);
        let fusion = FusionParams::new(&mut store, stream(1), config.fusion, n, config.fusion_heads);
        let scorer = ScorerParams::new(&mut store, stream(2), 2 * n, config.scorer_layers, config.scorer_heads);
        Ok(Self {
            config: config.clone(),
            dims: dims.clone(),
            store,
            encoders,
            fusion,
            scorer,
        })
    }

    /// Rebuilds the layout for `dims`/`config` and installs `store` after
    /// checking that every parameter name and shape matches.
    pub fn from_parts(dims: &DatasetManifest, config: &NetworkConfig, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(dims, config, 0)?;
        if net.store.len() != store.len() {
            return Err(Error::Dimension(format!(
                "parameter count {} does not match layout {}",
                store.len(),
                net.store.len()
            )));
        }
        for id in net.store.ids() {
            let (want, got) = (net.store.get(id), store.get(id));
            if net.store.name(id) != store.name(id) || want.shape() != got.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {} {:?} does not match layout {} {:?}",
                    store.name(id),
                    got.shape(),
                    net.store.name(id),
                    want.shape()
                )));
            }
        }
        if !store.all_finite() {
            return Err(Error::Numeric("stored parameters are not finite".into()));
        }
        net.store = store;
        Ok(net)
    }

    /// Builds the `M × 1` score node for `instance` on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, instance: &RankingInstance) -> Result<Var> {
        if instance.sites.is_empty() {
            return Err(Error::Validation("instance has no sites".into()));
        }
        let n = self.config.embedding_width;
        let trial = encode_static_var(tape, &instance.trial.features, &self.encoders, StaticKind::Trial)?;
        let mut rows = Vec::with_capacity(instance.sites.len());
        for site in &instance.sites {
            let emb = encode_site_var(tape, site, trial, &self.encoders)?;
            let fused = fuse_site_var(tape, &emb, &site.mask, &self.fusion, n)
                .map_err(|e| Error::Validation(format!("site {}: {e}", site.site_id)))?;
            rows.push(fused.h);
        }
        let h = tape.concat_rows(&rows);
        Ok(score_sites_var(tape, h, &self.scorer))
    }

    /// One score per site, in site order.
    pub fn scores(&self, instance: &RankingInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let q = self.forward(&mut tape, instance)?;
        let out = tape.value(q).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite score for trial {}",
                instance.trial.trial_id
            )));
        }
        Ok(out)
    }

    /// Fused trial-site representations, one row per site.
    pub fn representations(&self, instance: &RankingInstance) -> Result<Matrix> {
        let mut tape = Tape::new(&self.store);
        let n = self.config.embedding_width;
        let trial = encode_static_var(&mut tape, &instance.trial.features, &self.encoders, StaticKind::Trial)?;
        let mut rows = Vec::with_capacity(instance.sites.len());
        for site in &instance.sites {
            let emb = encode_site_var(&mut tape, site, trial, &self.encoders)?;
            rows.push(fuse_site_var(&mut tape, &emb, &site.mask, &self.fusion, n)?.h);
        }
        let h = tape.concat_rows(&rows);
        Ok(tape.value(h).clone())
    }
}
