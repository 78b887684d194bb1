//! Trial-site fusion of possibly-missing modality embeddings.
//!
//! MCAT: the trial embedding is the single query of a masked multi-head
//! cross-attention over the four modality slots. Masked slots receive weight
//! exactly zero. The attended vector `h′` is concatenated with the trial
//! embedding, giving `h = h′ ⊕ t_e` of width `2·n_emb`.
//!
//! The FC ablation instead concatenates the four slots (zeros when masked)
//! with the trial embedding and applies one rectified dense layer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoders::{ModalityEmbeddings, SiteEmbeddingVars};
use crate::error::{Error, Result};
use crate::model::Mask;
use crate::nn::{Dense, Init, MultiHeadAttention};
use crate::tensor::Matrix;

pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Mcat,
    Fc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusionParams {
    Mcat(MultiHeadAttention),
    Fc(Dense),
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, rng: ChaCha8Rng, kind: FusionKind, n_emb: usize, n_head: usize) -> Self {
        let mut init = Init::new(store, rng);
        match kind {
            FusionKind::Mcat => FusionParams::Mcat(MultiHeadAttention::new(&mut init, "fusion.mcat", n_emb, n_head)),
            FusionKind::Fc => FusionParams::Fc(Dense::new(&mut init, "fusion.fc", 5 * n_emb, n_emb)),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Mcat(_) => FusionKind::Mcat,
            FusionParams::Fc(_) => FusionKind::Fc,
        }
    }
}

/// Fused representation plus, for MCAT, each head's weights over the four slots.
pub struct FusedVar {
    pub h: Var,
    pub attention: Vec<Var>,
}

fn check_mask(mask: &Mask) -> Result<()> {
    if !mask.iter().any(|&b| b) {
        return Err(Error::Validation("no modality present".into()));
    }
    Ok(())
}

/// Stacks the four slots into a `4 × n_emb` memory, zeros where a slot is absent.
fn slot_matrix(tape: &mut Tape<'_>, slots: &[Option<Var>; 4], n_emb: usize) -> Var {
    let rows: Vec<Var> = slots
        .iter()
        .map(|s| s.unwrap_or_else(|| tape.input(Matrix::zeros(1, n_emb))))
        .collect();
    tape.concat_rows(&rows)
}

/// Fuses nodes already on the tape. `memory` is `4 × n_emb`.
pub fn fuse_memory(
    tape: &mut Tape<'_>,
    memory: Var,
    trial: Var,
    mask: &Mask,
    params: &FusionParams,
) -> Result<FusedVar> {
    check_mask(mask)?;
    match params {
        FusionParams::Mcat(att) => {
            let (h_prime, attention) = att.forward(tape, trial, memory, Some(mask));
            let h = tape.concat_cols(&[h_prime, trial]);
            Ok(FusedVar { h, attention })
        }
        FusionParams::Fc(dense) => {
            let mut parts = Vec::with_capacity(5);
            for (k, &visible) in mask.iter().enumerate() {
                let row = tape.slice_rows(memory, k, 1);
                parts.push(if visible {
                    row
                } else {
                    let n = tape.value(row).cols();
                    tape.input(Matrix::zeros(1, n))
                });
            }
            parts.push(trial);
            let cat = tape.concat_cols(&parts);
            let z = dense.forward(tape, cat);
            let h_prime = tape.relu(z);
            let h = tape.concat_cols(&[h_prime, trial]);
            Ok(FusedVar { h, attention: Vec::new() })
        }
    }
}

/// Fuses one site's encoder outputs (the training path).
pub fn fuse_site_var(
    tape: &mut Tape<'_>,
    emb: &SiteEmbeddingVars,
    mask: &Mask,
    params: &FusionParams,
    n_emb: usize,
) -> Result<FusedVar> {
    let memory = slot_matrix(tape, &emb.modalities, n_emb);
    fuse_memory(tape, memory, emb.trial, mask, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSiteRepr {
    pub h: Vec<f64>,
    /// MCAT only: per head, the weight of each of the four slots.
    pub attention: Vec<[f64; 4]>,
}

fn fuse_values(
    store: &ParamStore,
    emb: &ModalityEmbeddings,
    mask: &Mask,
    params: &FusionParams,
) -> Result<TrialSiteRepr> {
    let mut tape = Tape::new(store);
    let memory = tape.input(Matrix::from_rows(&emb.modalities));
    let trial = tape.input(Matrix::row_vector(emb.trial.clone()));
    let fused = fuse_memory(&mut tape, memory, trial, mask, params)?;
    let attention = fused
        .attention
        .iter()
        .map(|&w| {
            let d = tape.value(w).data();
            [d[0], d[1], d[2], d[3]]
        })
        .collect();
    Ok(TrialSiteRepr {
        h: tape.value(fused.h).data().to_vec(),
        attention,
    })
}

/// Masked cross-attention fusion. Content of masked slots is never weighted.
pub fn fuse_mcat(
    store: &ParamStore,
    emb: &ModalityEmbeddings,
    mask: &Mask,
    params: &FusionParams,
) -> Result<TrialSiteRepr> {
    if params.kind() != FusionKind::Mcat {
        return Err(Error::config("fusion", "parameters are not MCAT"));
    }
    fuse_values(store, emb, mask, params)
}

/// Fully connected ablation fusion. Masked slots are replaced by zeros.
pub fn fuse_fc(
    store: &ParamStore,
    emb: &ModalityEmbeddings,
    mask: &Mask,
    params: &FusionParams,
) -> Result<TrialSiteRepr> {
    if params.kind() != FusionKind::Fc {
        return Err(Error::config("fusion", "parameters are not FC"));
    }
    fuse_values(store, emb, mask, params)
}
