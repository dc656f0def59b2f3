//! Semantic transformation: projects visual features and label word
//! embeddings into a common relation space where subject + predicate is
//! pushed toward object by a translation-style L2 loss, and emits the
//! concatenated relation representation used by the rest of the model.

use crate::data::{DataError, Vocab};
use crate::tensor::{Tape, Tensor, TensorResult, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::BufRead;
use std::path::Path;

/// Entity and predicate word-embedding tables, |C| x E and |R| x E.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub entity: Tensor,
    pub predicate: Tensor,
    /// False when the table was loaded from a file (frozen by default).
    pub randomly_initialized: bool,
}

impl EmbeddingTable {
    /// Gaussian-initialized tables (sigma 0.1), used when no embedding file
    /// is configured. These train by default.
    pub fn random(entity_classes: usize, predicates: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut fill = |rows: usize| -> Tensor {
            let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(vec![rows, dim], data)
        };
        EmbeddingTable {
            entity: fill(entity_classes),
            predicate: fill(predicates),
            randomly_initialized: true,
        }
    }

    /// Reads a text embedding file (`word v1 ... vE` per line) and collects
    /// one row per vocabulary name, entities and predicates alike. Every
    /// name, including `bg`, must be present with the right width.
    pub fn load(path: &Path, vocab: &Vocab, dim: usize) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let mut rows: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().ok_or_else(|| DataError::Parse {
                line: lineno + 1,
                msg: "missing word".into(),
            })?;
            let vec: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vec = vec.map_err(|e| DataError::Parse {
                line: lineno + 1,
                msg: format!("bad float: {e}"),
            })?;
            if vec.len() != dim {
                return Err(DataError::Parse {
                    line: lineno + 1,
                    msg: format!("expected {dim} values, found {}", vec.len()),
                });
            }
            rows.insert(word.to_string(), vec);
        }
        let collect = |names: &[String]| -> Result<Tensor, DataError> {
            let mut data = Vec::with_capacity(names.len() * dim);
            for name in names {
                let row = rows.get(name).ok_or_else(|| DataError::Parse {
                    line: 0,
                    msg: format!("embedding for {name:?} not found"),
                })?;
                data.extend_from_slice(row);
            }
            Ok(Tensor::from_vec(vec![names.len(), dim], data))
        };
        Ok(EmbeddingTable {
            entity: collect(&vocab.entities)?,
            predicate: collect(&vocab.predicates)?,
            randomly_initialized: false,
        })
    }
}

/// Score-weighted mixture of label embeddings: `scores` (1 x n distribution)
/// times the n x E table. A one-hot score selects the exact row.
pub fn expected_embedding(tape: &mut Tape, scores: Var, table: Var) -> TensorResult<Var> {
    tape.matmul(scores, table)
}

/// Tape handles of the three translation weight matrices, each mapping a
/// concatenated [visual || embedded] row to the common relation space.
#[derive(Debug, Clone, Copy)]
pub struct SemanticVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

/// One side of the translation: `W · [visual || embedded]`.
pub fn role_term(tape: &mut Tape, w: Var, visual: Var, embedded: Var) -> TensorResult<Var> {
    let cat = tape.concat(&[visual, embedded], 1)?;
    tape.matmul(cat, w)
}

/// Translation loss: squared L2 distance between the object-role term and
/// the sum of the subject- and predicate-role terms. Zero exactly when
/// `W3 [f_j, v_o] = W1 [f_i, v_s] + W2 [f_ij, v_p]`.
#[allow(clippy::too_many_arguments)]
pub fn semantic_loss(
    tape: &mut Tape,
    f_i: Var,
    v_s: Var,
    f_ij: Var,
    v_p: Var,
    f_j: Var,
    v_o: Var,
    weights: &SemanticVars,
) -> TensorResult<Var> {
    let t1 = role_term(tape, weights.w1, f_i, v_s)?;
    let t2 = role_term(tape, weights.w2, f_ij, v_p)?;
    let t3 = role_term(tape, weights.w3, f_j, v_o)?;
    let sum = tape.add(t1, t2)?;
    let diff = tape.sub(t3, sum)?;
    Ok(tape.l2_sq(diff))
}

/// Transformed relation representation: the three role terms concatenated,
/// width exactly 3S.
#[allow(clippy::too_many_arguments)]
pub fn transform_relation(
    tape: &mut Tape,
    f_i: Var,
    v_s: Var,
    f_ij: Var,
    v_p: Var,
    f_j: Var,
    v_o: Var,
    weights: &SemanticVars,
) -> TensorResult<Var> {
    let t1 = role_term(tape, weights.w1, f_i, v_s)?;
    let t2 = role_term(tape, weights.w2, f_ij, v_p)?;
    let t3 = role_term(tape, weights.w3, f_j, v_o)?;
    tape.concat(&[t1, t2, t3], 1)
}

/// Element-wise sum of an entity's transformed relations; the empty sum is
/// a zero row of the given width.
pub fn relation_summary(tape: &mut Tape, thetas: &[Var], width: usize) -> TensorResult<Var> {
    if thetas.is_empty() {
        return Ok(tape.zeros(vec![1, width]));
    }
    tape.sum_all(thetas)
}
