//! Order-aware self-attention and encoder cross-attention.

use crate::error::{Error, Result};
use crate::numerics::{AttnDropout, BinaryMask, ParamId, ParamSet, Real, RngStream, Tape, Tensor, Var};

/// Query/key/value/output projections, each `D × D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionSet {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl ProjectionSet {
    pub fn register<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut proj = |name: &str| {
            params.add(
                format!("{prefix}.{name}"),
                crate::numerics::init_projection(hidden, hidden, rng),
            )
        };
        Ok(ProjectionSet {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide hidden size {hidden}"
            )));
        }
        Ok(AttentionConfig {
            heads,
            head_dim: hidden / heads,
        })
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Projected keys and values, reusable across several query sets.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub k: Var,
    pub v: Var,
}

pub fn project_kv<T: Real>(tape: &mut Tape<'_, T>, source: Var, proj: &ProjectionSet) -> Result<KeyValues> {
    let wk = tape.param(proj.wk);
    let wv = tape.param(proj.wv);
    Ok(KeyValues {
        k: tape.matmul(source, wk)?,
        v: tape.matmul(source, wv)?,
    })
}

/// Attends `query` (unprojected) over already projected keys/values and
/// applies the output projection.
pub fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    query: Var,
    kv: KeyValues,
    mask: &BinaryMask,
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
    dropout: Option<AttnDropout<'_>>,
) -> Result<Var> {
    let wq = tape.param(proj.wq);
    let q = tape.matmul(query, wq)?;
    let a = tape.attention(q, kv.k, kv.v, mask, cfg.heads, dropout)?;
    let wo = tape.param(proj.wo);
    tape.matmul(a, wo)
}

/// Order-aware self-attention: scaled dot-product attention of `q` over
/// `k`/`v` restricted by a relative-order mask.
#[allow(clippy::too_many_arguments)]
pub fn osa<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &BinaryMask,
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
    dropout: Option<AttnDropout<'_>>,
) -> Result<Var> {
    let (qr, kr, vr) = (tape.value(q).rows(), tape.value(k).rows(), tape.value(v).rows());
    if kr != vr {
        return Err(Error::Shape {
            op: "osa keys/values",
            left: vec![kr],
            right: vec![vr],
        });
    }
    if mask.rows() != qr || mask.cols() != kr {
        return Err(Error::Shape {
            op: "osa mask",
            left: vec![qr, kr],
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let wk = tape.param(proj.wk);
    let wv = tape.param(proj.wv);
    let kv = KeyValues {
        k: tape.matmul(k, wk)?,
        v: tape.matmul(v, wv)?,
    };
    attend(tape, q, kv, mask, proj, cfg, dropout)
}

/// Mask letting every query row see exactly the valid (non-padding) keys.
pub fn padding_mask(rows: usize, valid: &[bool]) -> Result<BinaryMask> {
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidMask { row: 0 });
    }
    Ok(BinaryMask::key_padding(rows, valid.len(), valid))
}

/// Attention of `q` over encoder states, excluding padded source positions.
pub fn cross_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    memory: Var,
    pad_mask: &[bool],
    proj: &ProjectionSet,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let rows = tape.value(q).rows();
    let mask = padding_mask(rows, pad_mask)?;
    let kv = project_kv(tape, memory, proj)?;
    attend(tape, q, kv, &mask, proj, cfg, None)
}

/// Attention weights `[heads, m, n]` for inspection, computed outside the tape.
pub fn attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mask: &BinaryMask,
    cfg: &AttentionConfig,
) -> Result<Vec<T>> {
    mask.check_rows()?;
    let (m, n, d) = (q.rows(), k.rows(), q.cols());
    let mut out = vec![T::zero(); m * d];
    let mut probs = vec![T::zero(); cfg.heads * m * n];
    let v = Tensor::<T>::zeros(&[n, d]);
    crate::numerics::ops::attention_forward(
        q.data(),
        k.data(),
        v.data(),
        m,
        n,
        d,
        cfg.heads,
        mask,
        None,
        &mut out,
        &mut probs,
    );
    Ok(probs)
}
