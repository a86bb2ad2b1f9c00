use rand::Rng;

use super::{Graph, Linear, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{CatrError, Result};

/// Scaled dot-product attention split over `heads`.
///
/// `q`: `[B, Lq, C]`, `k` and `v`: `[B, Lk, C]`, with `C` divisible by
/// `heads`. Scores are scaled by `1/sqrt(C / heads)`. Returns `[B, Lq, C]`.
pub fn attention_core(t: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (sq, sk, sv) = (t.shape(q).to_vec(), t.shape(k).to_vec(), t.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(CatrError::Dimension(format!(
            "attention: query {sq:?}, key {sk:?}, value {sv:?}"
        )));
    }
    let (b, lq, c) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || c % heads != 0 {
        return Err(CatrError::Config(format!("{c} channels cannot be split into {heads} heads")));
    }
    let dh = c / heads;
    let split = |t: &mut Tape, x: Var, len: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = t.reshape(x, &[b, len, heads, dh])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        t.reshape(x, &[b * heads, len, dh])
    };
    let qh = split(t, q, lq)?;
    let kh = split(t, k, lk)?;
    let vh = split(t, v, lk)?;
    let scores = t.matmul_t(qh, kh, false, true)?;
    let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = t.softmax(scores, 2)?;
    let out = t.matmul(probs, vh)?;
    if heads == 1 {
        return Ok(out);
    }
    let out = t.reshape(out, &[b, heads, lq, dh])?;
    let out = t.permute(out, &[0, 2, 1, 3])?;
    t.reshape(out, &[b, lq, c])
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CatrError::Config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `query`: `[B, Lq, C]`; `key`, `value`: `[B, Lk, C]`.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, key: Var, value: Var) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, key)?;
        let v = self.v.forward(g, value)?;
        let a = attention_core(g, q, k, v, self.heads)?;
        self.o.forward(g, a)
    }
}
