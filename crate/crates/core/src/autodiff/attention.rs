//! Single-head scaled dot-product self-attention on the tape.

use super::tape::Var;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Bound projection matrices, each `m × m`. Queries are `X·W_q` (row-vector
/// convention), likewise for keys, values and the output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

impl AttentionVars<'_> {
    fn check(&self, m: usize) -> Result<()> {
        for (name, w) in [("W_q", self.wq), ("W_k", self.wk), ("W_v", self.wv), ("W_o", self.wo)] {
            if w.dims() != (m, m) {
                return Err(Error::shape(
                    "attention_block",
                    format!("{name} is {:?}, expected {m}x{m}", w.dims()),
                ));
            }
        }
        Ok(())
    }
}

fn inv_sqrt(m: usize) -> Scalar {
    1.0 / (m as Scalar).sqrt()
}

/// Attention weights `softmax(Q·Kᵀ/√m)` for an `s × m` sequence.
pub fn attention_weights<'t>(x: Var<'t>, w: &AttentionVars<'t>) -> Result<Var<'t>> {
    let m = x.cols();
    w.check(m)?;
    let q = x.matmul(&w.wq)?;
    let k = x.matmul(&w.wk)?;
    Ok(q.matmul_t(&k)?.scale(inv_sqrt(m)).softmax_rows())
}

/// `softmax(Q·Kᵀ/√m)·V·W_o` over an `s × m` sequence; every row attends over
/// all `s` rows.
pub fn attention_block<'t>(x: Var<'t>, w: &AttentionVars<'t>) -> Result<Var<'t>> {
    let a = attention_weights(x, w)?;
    let v = x.matmul(&w.wv)?;
    a.matmul(&v)?.matmul(&w.wo)
}

/// Row 0 of [`attention_block`] applied to each sequence `[f_b; P]`, batched
/// over the rows `f_b` of `features` (`B × m`) with a shared prompt matrix
/// `P` (`n × m`, absent when `n = 0`).
///
/// Only the first position of each sequence is computed; the prompt rows'
/// keys and values are projected once for the whole batch.
pub fn prompted_attention_row0<'t>(
    features: Var<'t>,
    prompts: Option<Var<'t>>,
    w: &AttentionVars<'t>,
) -> Result<Var<'t>> {
    let m = features.cols();
    w.check(m)?;
    let q = features.matmul(&w.wq)?;
    let k_self = features.matmul(&w.wk)?;
    let v_self = features.matmul(&w.wv)?;
    let s_self = q.row_dot(&k_self)?;
    let mixed = match prompts {
        None => s_self.scale(inv_sqrt(m)).softmax_rows().mul_col(&v_self)?,
        Some(p) => {
            if p.cols() != m {
                return Err(Error::shape(
                    "prompted_attention",
                    format!("prompts have {} columns, features {m}", p.cols()),
                ));
            }
            let n = p.rows();
            let k_p = p.matmul(&w.wk)?;
            let v_p = p.matmul(&w.wv)?;
            let scores = s_self.concat_cols(&q.matmul_t(&k_p)?)?.scale(inv_sqrt(m));
            let a = scores.softmax_rows();
            let a_self = a.slice_cols(0, 1)?;
            let a_p = a.slice_cols(1, 1 + n)?;
            a_self.mul_col(&v_self)?.add(&a_p.matmul(&v_p)?)?
        }
    };
    mixed.matmul(&w.wo)
}

/// Row 0 of [`attention_weights`] for each `[f_b; P]`: a `B × (1+n)` matrix
/// whose first column is the weight on the feature itself.
pub fn prompted_attention_weights<'t>(
    features: Var<'t>,
    prompts: Option<Var<'t>>,
    w: &AttentionVars<'t>,
) -> Result<Var<'t>> {
    let m = features.cols();
    w.check(m)?;
    let q = features.matmul(&w.wq)?;
    let s_self = q.row_dot(&features.matmul(&w.wk)?)?;
    let scores = match prompts {
        None => s_self,
        Some(p) => s_self.concat_cols(&q.matmul_t(&p.matmul(&w.wk)?)?)?,
    };
    Ok(scores.scale(inv_sqrt(m)).softmax_rows())
}
