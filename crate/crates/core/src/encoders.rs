//! Modality encoders into the shared embedding space.
//!
//! Sequence modalities (diagnoses, prescriptions, enrollment history) go
//! through a bidirectional LSTM whose two final states are concatenated and
//! mapped by `max(0, h W + b) V + c`. Static site features and the trial
//! vector go through `max(0, x W + b) V + c` directly.
//!
//! Code sequences index rows of the input weight instead of building one-hot
//! matrices. History rows are the reduced trial vector followed by
//! `ln(1 + enrollment)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{DatasetManifest, HistoryEntry, Modality, SiteRecord, TrialRecord};
use crate::nn::{FeedForward, Init};
use crate::tensor::Matrix;

pub const DEFAULT_EMBEDDING_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Diagnosis,
    Prescription,
    History,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticKind {
    SiteStatic,
    Trial,
}

/// Input to a sequence encoder.
#[derive(Debug, Clone, Copy)]
pub enum SequenceInput<'a> {
    Codes(&'a [usize]),
    History(&'a [HistoryEntry]),
}

/// One direction of the recurrent layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    /// `input_dim × 4h` (for codes: vocabulary × 4h).
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceEncoder {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub head: FeedForward,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub diagnosis: SequenceEncoder,
    pub prescription: SequenceEncoder,
    pub history: SequenceEncoder,
    pub site_static: FeedForward,
    pub trial: FeedForward,
    pub n_emb: usize,
    pub n_s: usize,
    pub n_t: usize,
}

fn lstm_direction(init: &mut Init<'_>, name: &str, input_dim: usize, fan_in: usize, h: usize) -> LstmDirection {
    LstmDirection {
        input: init.weight_rows(&format!("{name}.input"), input_dim, fan_in, 4 * h),
        recurrent: init.weight(&format!("{name}.recurrent"), h, 4 * h),
        bias: init.zeros(&format!("{name}.bias"), 1, 4 * h),
    }
}

impl SequenceEncoder {
    fn new(init: &mut Init<'_>, name: &str, input_dim: usize, one_hot: bool, h: usize) -> Self {
        // A one-hot row activates a single input, so its fan-in is 1 in effect.
        let fan_in = if one_hot { h } else { input_dim };
        Self {
            forward: lstm_direction(init, &format!("{name}.fwd"), input_dim, fan_in, h),
            backward: lstm_direction(init, &format!("{name}.bwd"), input_dim, fan_in, h),
            head: FeedForward::new(init, &format!("{name}.head"), 2 * h, h, h),
            input_dim,
        }
    }
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, rng: ChaCha8Rng, dims: &DatasetManifest, n_emb: usize) -> Self {
        let mut init = Init::new(store, rng);
        Self {
            diagnosis: SequenceEncoder::new(&mut init, "enc.diagnosis", dims.n_d, true, n_emb),
            prescription: SequenceEncoder::new(&mut init, "enc.prescription", dims.n_p, true, n_emb),
            history: SequenceEncoder::new(&mut init, "enc.history", dims.n_t_prime + 1, false, n_emb),
            site_static: FeedForward::new(&mut init, "enc.static", dims.n_s, n_emb, n_emb),
            trial: FeedForward::new(&mut init, "enc.trial", dims.n_t, n_emb, n_emb),
            n_emb,
            n_s: dims.n_s,
            n_t: dims.n_t,
        }
    }

    fn sequence(&self, kind: SequenceKind) -> &SequenceEncoder {
        match kind {
            SequenceKind::Diagnosis => &self.diagnosis,
            SequenceKind::Prescription => &self.prescription,
            SequenceKind::History => &self.history,
        }
    }
}

/// History rows as a `T × (n_t′ + 1)` matrix.
pub fn history_matrix(rows: &[HistoryEntry]) -> Matrix {
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.trial.clone();
            v.push((r.enrollment.max(0) as f64).ln_1p());
            v
        })
        .collect();
    Matrix::from_rows(&data)
}

/// Encodes one sequence modality to a `1 × n_emb` node.
pub fn encode_sequence_var(
    tape: &mut Tape<'_>,
    kind: SequenceKind,
    input: SequenceInput<'_>,
    params: &EncoderParams,
) -> Result<Var> {
    let enc = params.sequence(kind);
    let gate_inputs = |tape: &mut Tape<'_>, dir: &LstmDirection| -> Result<Var> {
        let w = tape.param(dir.input);
        match input {
            SequenceInput::Codes(codes) => {
                if codes.is_empty() {
                    return Err(Error::Validation(format!("empty {kind:?} sequence")));
                }
                if let Some(bad) = codes.iter().find(|&&c| c >= enc.input_dim) {
                    return Err(Error::Dimension(format!(
                        "{kind:?} code {bad} outside vocabulary of {}",
                        enc.input_dim
                    )));
                }
                Ok(tape.gather_rows(w, codes))
            }
            SequenceInput::History(rows) => {
                if rows.is_empty() {
                    return Err(Error::Validation("empty enrollment history".into()));
                }
                let x = history_matrix(rows);
                if x.cols() != enc.input_dim {
                    return Err(Error::Dimension(format!(
                        "history row has {} entries, expected {}",
                        x.cols(),
                        enc.input_dim
                    )));
                }
                let x = tape.input(x);
                Ok(tape.matmul(x, w))
            }
        }
    };
    let mut finals = Vec::with_capacity(2);
    for (dir, reverse) in [(&enc.forward, false), (&enc.backward, true)] {
        let gates = gate_inputs(tape, dir)?;
        let rec = tape.param(dir.recurrent);
        let bias = tape.param(dir.bias);
        finals.push(tape.lstm(gates, rec, bias, reverse));
    }
    let summary = tape.concat_cols(&finals);
    Ok(enc.head.forward(tape, summary))
}

/// Encodes a static vector (site static features or the trial) to `1 × n_emb`.
pub fn encode_static_var(
    tape: &mut Tape<'_>,
    x: &[f64],
    params: &EncoderParams,
    which: StaticKind,
) -> Result<Var> {
    let (ff, dim) = match which {
        StaticKind::SiteStatic => (&params.site_static, params.n_s),
        StaticKind::Trial => (&params.trial, params.n_t),
    };
    if x.len() != dim {
        return Err(Error::Dimension(format!(
            "{which:?} input has {} features, expected {dim}",
            x.len()
        )));
    }
    let x = tape.input(Matrix::row_vector(x.to_vec()));
    Ok(ff.forward(tape, x))
}

pub fn encode_sequence(
    store: &ParamStore,
    kind: SequenceKind,
    input: SequenceInput<'_>,
    params: &EncoderParams,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let v = encode_sequence_var(&mut tape, kind, input, params)?;
    Ok(tape.value(v).data().to_vec())
}

pub fn encode_static(
    store: &ParamStore,
    x: &[f64],
    params: &EncoderParams,
    which: StaticKind,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let v = encode_static_var(&mut tape, x, params, which)?;
    Ok(tape.value(v).data().to_vec())
}

/// Per-site modality embeddings on a tape; `None` for masked modalities.
#[derive(Debug, Clone, Copy)]
pub struct SiteEmbeddingVars {
    pub modalities: [Option<Var>; 4],
    pub trial: Var,
}

/// Encodes every visible modality of `site`. Masked modalities are never read.
pub fn encode_site_var(
    tape: &mut Tape<'_>,
    site: &SiteRecord,
    trial: Var,
    params: &EncoderParams,
) -> Result<SiteEmbeddingVars> {
    let mut modalities = [None; 4];
    for m in Modality::ALL {
        let missing = || Error::Validation(format!("site {}: {m:?} marked present but empty", site.site_id));
        modalities[m.index()] = match m {
            Modality::Static => site
                .visible_static()
                .map(|x| encode_static_var(tape, x, params, StaticKind::SiteStatic))
                .transpose()?,
            Modality::Diagnosis => site
                .visible_diagnoses()
                .map(|c| encode_sequence_var(tape, SequenceKind::Diagnosis, SequenceInput::Codes(c), params))
                .transpose()?,
            Modality::Prescription => site
                .visible_prescriptions()
                .map(|c| encode_sequence_var(tape, SequenceKind::Prescription, SequenceInput::Codes(c), params))
                .transpose()?,
            Modality::History => site
                .visible_history()
                .map(|h| encode_sequence_var(tape, SequenceKind::History, SequenceInput::History(h), params))
                .transpose()?,
        };
        if site.is_visible(m) && modalities[m.index()].is_none() {
            return Err(missing());
        }
    }
    Ok(SiteEmbeddingVars { modalities, trial })
}

/// Plain-value embeddings; absent modalities hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbeddings {
    pub modalities: [Vec<f64>; 4],
    pub present: [bool; 4],
    pub trial: Vec<f64>,
}

pub fn encode_site(
    store: &ParamStore,
    site: &SiteRecord,
    trial: &TrialRecord,
    params: &EncoderParams,
) -> Result<ModalityEmbeddings> {
    let mut tape = Tape::new(store);
    let t = encode_static_var(&mut tape, &trial.features, params, StaticKind::Trial)?;
    let vars = encode_site_var(&mut tape, site, t, params)?;
    let zero = vec![0.0; params.n_emb];
    let modalities = vars
        .modalities
        .map(|v| v.map_or_else(|| zero.clone(), |v| tape.value(v).data().to_vec()));
    Ok(ModalityEmbeddings {
        modalities,
        present: vars.modalities.map(|v| v.is_some()),
        trial: tape.value(t).data().to_vec(),
    })
}
