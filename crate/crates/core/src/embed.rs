//! Input embedding streams and their fusion into the model input.
//!
//! The knowledge-graph embedding turns a fixed binary adjacency `A` (`V x V`)
//! into an `S x D` additive term through two learnable matrices:
//!
//! ```text
//! H        = A · W_l                      (V x D)
//! W_KGE    = W_p ⊙ (1_S ⊗ reduce_v H)     (S x D)
//! ```
//!
//! where `reduce_v` sums (or averages) over the node axis. The term depends
//! only on `A`, `W_l` and `W_p`, so it is computed once per forward pass and
//! shared by every item of a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Padding, ParamId, Real, Session, Tensor, Var};

/// Contraction over the node axis in the knowledge-graph embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgeReduce {
    #[default]
    Sum,
    Mean,
}

/// Learnable knowledge-graph embedding weights for one sequence length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KgeParams {
    /// `V x D`, shared by encoder and decoder.
    pub w_l: ParamId,
    /// `S x D` for sequence length `S`.
    pub w_p: ParamId,
    pub reduce: KgeReduce,
}

/// Builds `W_KGE` on the session tape.
pub fn build_kge<T: Real>(sess: &mut Session<'_, T>, adjacency: Var, params: KgeParams) -> Result<Var> {
    let w_l = sess.param(params.w_l);
    let w_p = sess.param(params.w_p);
    let (sa, sl, sp) = (
        sess.tape.shape(adjacency).to_vec(),
        sess.tape.shape(w_l).to_vec(),
        sess.tape.shape(w_p).to_vec(),
    );
    if sa.len() != 2 || sa[0] != sa[1] || sl.len() != 2 || sl[0] != sa[1] {
        return Err(Error::shape("build_kge", &sa, &sl));
    }
    if sp.len() != 2 || sp[1] != sl[1] {
        return Err(Error::shape("build_kge", &sl, &sp));
    }
    let hidden = sess.tape.matmul(adjacency, w_l)?;
    let mut pooled = sess.tape.sum_rows(hidden)?;
    if params.reduce == KgeReduce::Mean {
        pooled = sess.tape.scale(pooled, T::one() / T::of(sa[0].max(1) as f64));
    }
    sess.tape.mul(w_p, pooled)
}

/// Fixed sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/D))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/D))`.
pub fn positional_encoding<T: Real>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("model dimension must be even and positive, got {d_model}")));
    }
    Ok(Tensor::from_fn([len, d_model], |i| {
        let (pos, col) = (i / d_model, i % d_model);
        let pair = (col / 2 * 2) as f64;
        let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
        T::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Convolutional projection of `[S, M]` values to `[S, D]`.
pub fn value_embedding<T: Real>(sess: &mut Session<'_, T>, x: Var, kernel: ParamId, padding: Padding) -> Result<Var> {
    let k = sess.param(kernel);
    sess.tape.conv1d(x, k, padding)
}

/// Sum of one learnable table row per calendar mark.
pub fn temporal_embedding<T: Real>(sess: &mut Session<'_, T>, marks: &[Vec<usize>], tables: &[ParamId]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (f, &table) in tables.iter().enumerate() {
        let idx: Vec<usize> = marks
            .iter()
            .map(|row| {
                row.get(f)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("mark row has {} features, need {}", row.len(), tables.len())))
            })
            .collect::<Result<_>>()?;
        let t = sess.param(table);
        let rows = sess.tape.gather_rows(t, &idx)?;
        acc = Some(match acc {
            None => rows,
            Some(a) => sess.tape.add(a, rows)?,
        });
    }
    acc.ok_or_else(|| Error::Config("no temporal tables".into()))
}

/// Parameters of one embedding stack (encoder or decoder side).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataEmbedding {
    pub seq_len: usize,
    pub value_kernel: ParamId,
    pub temporal_tables: Vec<ParamId>,
    pub kge: Option<KgeParams>,
    pub padding: Padding,
}

impl DataEmbedding {
    /// `Z = VE(x) + PE + TE + W_KGE` (the last term only when `kge` is set).
    pub fn compose<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: &Tensor<T>,
        marks: &[Vec<usize>],
        positional: &Tensor<T>,
        adjacency: Option<Var>,
    ) -> Result<Var> {
        if x.shape().first() != Some(&self.seq_len) || marks.len() != self.seq_len {
            return Err(Error::shape("compose_input", x.shape(), &[self.seq_len, marks.len()]));
        }
        let xv = sess.tape.constant(x.clone());
        let ve = value_embedding(sess, xv, self.value_kernel, self.padding)?;
        if positional.shape() != sess.tape.shape(ve) {
            return Err(Error::shape("compose_input", positional.shape(), sess.tape.shape(ve)));
        }
        let pe = sess.tape.constant(positional.clone());
        let mut z = sess.tape.add(ve, pe)?;
        let te = temporal_embedding(sess, marks, &self.temporal_tables)?;
        z = sess.tape.add(z, te)?;
        if let Some(kge) = self.kge {
            let a = adjacency.ok_or_else(|| Error::Contract("knowledge-graph embedding needs an adjacency".into()))?;
            let w = build_kge(sess, a, kge)?;
            if sess.tape.shape(w) != sess.tape.shape(z) {
                return Err(Error::shape("compose_input", sess.tape.shape(w), sess.tape.shape(z)));
            }
            z = sess.tape.add(z, w)?;
        }
        Ok(z)
    }
}
