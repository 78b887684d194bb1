//! Set scorer: post-norm transformer encoder layers over the M trial-site
//! representations followed by a rectified two-layer head, one score per site.
//!
//! There are no positional encodings, so permuting the input rows permutes the
//! scores the same way.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Init, MultiHeadAttention};
use crate::tensor::Matrix;

pub const DEFAULT_LAYERS: usize = 2;
pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: (ParamId, ParamId),
    pub feed_forward: FeedForward,
    pub norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub layers: Vec<EncoderLayer>,
    pub head: FeedForward,
    pub width: usize,
}

impl ScorerParams {
    pub fn new(store: &mut ParamStore, rng: ChaCha8Rng, width: usize, n_layers: usize, n_head: usize) -> Self {
        let mut init = Init::new(store, rng);
        let layers = (0..n_layers)
            .map(|i| {
                let name = format!("scorer.layer{i}");
                EncoderLayer {
                    attention: MultiHeadAttention::new(&mut init, &format!("{name}.attention"), width, n_head),
                    norm1: (
                        init.ones(&format!("{name}.norm1.gain"), width),
                        init.zeros(&format!("{name}.norm1.offset"), 1, width),
                    ),
                    feed_forward: FeedForward::new(&mut init, &format!("{name}.ff"), width, width, width),
                    norm2: (
                        init.ones(&format!("{name}.norm2.gain"), width),
                        init.zeros(&format!("{name}.norm2.offset"), 1, width),
                    ),
                }
            })
            .collect();
        let head = FeedForward::new(&mut init, "scorer.head", width, HEAD_HIDDEN, 1);
        Self { layers, head, width }
    }
}

/// Scores the rows of `h` (`M × width`); returns an `M × 1` node.
pub fn score_sites_var(tape: &mut Tape<'_>, h: Var, params: &ScorerParams) -> Var {
    let mut x = h;
    for layer in &params.layers {
        let (att, _) = layer.attention.forward(tape, x, x, None);
        let res = tape.add(x, att);
        let (g, b) = (tape.param(layer.norm1.0), tape.param(layer.norm1.1));
        let x1 = tape.layer_norm(res, g, b);
        let ff = layer.feed_forward.forward(tape, x1);
        let res = tape.add(x1, ff);
        let (g, b) = (tape.param(layer.norm2.0), tape.param(layer.norm2.1));
        x = tape.layer_norm(res, g, b);
    }
    params.head.forward(tape, x)
}

pub fn score_sites(store: &ParamStore, h: &Matrix, params: &ScorerParams) -> Result<Vec<f64>> {
    if h.rows() == 0 {
        return Err(Error::Validation("no sites to score".into()));
    }
    if h.cols() != params.width {
        return Err(Error::Dimension(format!(
            "representation width {} does not match scorer width {}",
            h.cols(),
            params.width
        )));
    }
    if !h.is_finite() {
        return Err(Error::Numeric("non-finite site representation".into()));
    }
    let mut tape = Tape::new(store);
    let x = tape.input(h.clone());
    let q = score_sites_var(&mut tape, x, params);
    Ok(tape.value(q).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn setup(width: usize) -> (ParamStore, ScorerParams) {
        let mut store = ParamStore::new();
        let p = ScorerParams::new(&mut store, ChaCha8Rng::seed_from_u64(3), width, DEFAULT_LAYERS, 4);
        (store, p)
    }

    fn random_h(rng: &mut ChaCha8Rng, m: usize, w: usize) -> Matrix {
        Matrix::from_vec(m, w, (0..m * w).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    #[test]
    fn single_site() {
        let (store, p) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = score_sites(&store, &random_h(&mut rng, 1, 8), &p).unwrap();
        assert_eq!(q.len(), 1);
        assert!(q[0].is_finite());
    }

    #[test]
    fn permutation_equivariant_and_duplicates_tie() {
        let (store, p) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let h = random_h(&mut rng, 6, 8);
            let q = score_sites(&store, &h, &p).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| h.row(i).to_vec()).collect();
            let qp = score_sites(&store, &Matrix::from_rows(&rows), &p).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                assert!((qp[j] - q[i]).abs() < 1e-12);
            }
        }
        let mut h = random_h(&mut rng, 4, 8);
        let row0 = h.row(0).to_vec();
        h.row_mut(3).copy_from_slice(&row0);
        let q = score_sites(&store, &h, &p).unwrap();
        assert!((q[0] - q[3]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let (store, p) = setup(8);
        assert!(score_sites(&store, &Matrix::zeros(0, 8), &p).is_err());
        assert!(score_sites(&store, &Matrix::zeros(2, 7), &p).is_err());
        let mut h = Matrix::zeros(2, 8);
        h.set(0, 0, f64::NAN);
        assert!(score_sites(&store, &h, &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, p) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_h(&mut rng, 3, 8);
        let probe = Matrix::from_vec(3, 1, vec![0.7, -1.1, 0.4]);
        let worst = gradcheck::check_params(
            &store,
            &probe,
            |tape| {
                let x = tape.input(h.clone());
                score_sites_var(tape, x, &p)
            },
            1e-5,
        );
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
