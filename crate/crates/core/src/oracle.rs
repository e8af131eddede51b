//! Independent reference implementations used by the test suites and the
//! `selfcheck` command. Nothing here shares code with the production paths
//! beyond parameter storage.

use std::collections::HashMap;

use crate::data::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::inference::Scorer;
use crate::model::ModelConfig;
use crate::numerics::{BinaryMask, ParamSet, RngStream};
use crate::order::{DecodeOrder, RelativeOrderMasks};

/// All permutations of `1..=t` in lexicographic order.
pub fn permutations(t: usize) -> Vec<Vec<usize>> {
    fn go(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            cur.push(v);
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut (1..=t).collect(), &mut Vec::new(), &mut out);
    out
}

/// Masks built directly from the conditional sets `{z_1 .. z_{t-n}}`.
pub fn brute_force_masks(order: &DecodeOrder, streams: usize) -> RelativeOrderMasks {
    let z = order.z();
    let t_len = z.len();
    let context = |steps: isize| -> Vec<usize> {
        if steps <= 0 {
            Vec::new()
        } else {
            z[..steps as usize].to_vec()
        }
    };
    let main = BinaryMask::from_fn(t_len + 1, t_len + 1, |p, q| {
        if q == 0 {
            return true;
        }
        if p == 0 {
            return false;
        }
        // slot p was decoded at some step s; it sees everything decoded up
        // to and including s
        let s = z.iter().position(|&x| x == p).unwrap() + 1;
        context(s as isize).contains(&q)
    });
    let query = (1..=streams)
        .map(|n| {
            BinaryMask::from_fn(t_len, 2 * t_len + 1, |r, q| {
                let t = r + 1;
                q == 0 || q == t_len + t || (q <= t_len && context(t as isize - n as isize).contains(&q))
            })
        })
        .collect();
    RelativeOrderMasks {
        order: order.clone(),
        main,
        query,
    }
}

type Mat = Vec<Vec<f64>>;

struct Weights<'a> {
    params: &'a ParamSet<f64>,
}

impl Weights<'_> {
    fn mat(&self, name: &str) -> Result<Mat> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Consistency(format!("oracle: missing parameter {name}")))?;
        let t = self.params.value(id);
        if t.shape().len() == 1 {
            return Ok(vec![t.data().to_vec()]);
        }
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    fn vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.mat(name)?.concat())
    }
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / sd * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention where query `i` sees keys `0..limit(i)`.
fn mha(
    w: &Weights,
    prefix: &str,
    q_in: &Mat,
    kv_in: &Mat,
    heads: usize,
    limit: impl Fn(usize) -> usize,
) -> Result<Mat> {
    let q = mm(q_in, &w.mat(&format!("{prefix}.wq"))?);
    let k = mm(kv_in, &w.mat(&format!("{prefix}.wk"))?);
    let v = mm(kv_in, &w.mat(&format!("{prefix}.wv"))?);
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..q.len() {
            let n = limit(i);
            let s: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    Ok(mm(&out, &w.mat(&format!("{prefix}.wo"))?))
}

fn ffn(w: &Weights, prefix: &str, x: &Mat) -> Result<Mat> {
    let b1 = w.vec(&format!("{prefix}.b1"))?;
    let b2 = w.vec(&format!("{prefix}.b2"))?;
    let h: Mat = mm(x, &w.mat(&format!("{prefix}.w1"))?)
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
        .collect();
    Ok(mm(&h, &w.mat(&format!("{prefix}.w2"))?)
        .into_iter()
        .map(|r| r.iter().zip(&b2).map(|(a, b)| a + b).collect())
        .collect())
}

fn norm(w: &Weights, prefix: &str, x: &Mat) -> Result<Mat> {
    Ok(layer_norm(
        x,
        &w.vec(&format!("{prefix}.g"))?,
        &w.vec(&format!("{prefix}.b"))?,
    ))
}

fn embed(table: &Mat, pos: &Mat, ids: &[usize], positions: &[usize]) -> Mat {
    ids.iter()
        .zip(positions)
        .map(|(&i, &p)| table[i].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect()
}

fn encode(w: &Weights, cfg: &ModelConfig, src: &[usize]) -> Result<Mat> {
    let positions: Vec<usize> = (0..src.len()).collect();
    let mut x = embed(&w.mat("embed.tokens")?, &w.mat("embed.enc_pos")?, src, &positions);
    for k in 0..cfg.layers {
        let a = norm(w, &format!("enc.{k}.ln1"), &x)?;
        x = add(
            &x,
            &mha(w, &format!("enc.{k}.attn"), &a, &a, cfg.heads, |_| src.len())?,
        );
        let f = norm(w, &format!("enc.{k}.ln2"), &x)?;
        x = add(&x, &ffn(w, &format!("enc.{k}.ffn"), &f)?);
    }
    norm(w, "enc.ln", &x)
}

/// Logits of a plain causal decoder: for each step `t` the input is
/// `[<s>, y_1 .. y_{t-1}, placeholder(t)]` and the prediction is read from
/// the last row. Requires shared stream parameters; `logits[t-1]` has `V`
/// entries.
pub fn vanilla_decoder_logits(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    src: &[usize],
    y: &[usize],
) -> Result<Mat> {
    if !cfg.share_stream_params {
        return Err(Error::Config(
            "vanilla oracle needs shared stream parameters".into(),
        ));
    }
    let w = Weights { params };
    let memory = encode(&w, cfg, src)?;
    let tokens = w.mat("embed.tokens")?;
    let pos = w.mat("embed.dec_pos")?;
    let placeholder = w.mat("embed.placeholders")?[0].clone();
    let mut logits = Vec::with_capacity(y.len());
    for t in 1..=y.len() {
        let ids: Vec<usize> = std::iter::once(BOS).chain(y[..t - 1].iter().copied()).collect();
        let positions: Vec<usize> = (0..t).collect();
        let mut x = embed(&tokens, &pos, &ids, &positions);
        x.push(placeholder.iter().zip(&pos[t]).map(|(a, b)| a + b).collect());
        for k in 0..cfg.layers {
            let p = format!("dec.{k}.s0");
            let a = norm(&w, &format!("{p}.ln1"), &x)?;
            x = add(&x, &mha(&w, &format!("{p}.self"), &a, &a, cfg.heads, |i| i + 1)?);
            let c = norm(&w, &format!("{p}.ln2"), &x)?;
            x = add(
                &x,
                &mha(&w, &format!("{p}.cross"), &c, &memory, cfg.heads, |_| {
                    memory.len()
                })?,
            );
            let f = norm(&w, &format!("{p}.ln3"), &x)?;
            x = add(&x, &ffn(&w, &format!("{p}.ffn"), &f)?);
        }
        let last = norm(&w, "dec.ln", &vec![x[t].clone()])?;
        let out = if cfg.tie_embeddings {
            tokens
                .iter()
                .map(|e| e.iter().zip(&last[0]).map(|(a, b)| a * b).sum())
                .collect()
        } else {
            mm(&last, &w.mat("out.w")?).remove(0)
        };
        logits.push(out);
    }
    Ok(logits)
}

/// Summed negative log-likelihood of `y` under the vanilla decoder.
pub fn vanilla_nll(params: &ParamSet<f64>, cfg: &ModelConfig, src: &[usize], y: &[usize]) -> Result<f64> {
    let logits = vanilla_decoder_logits(params, cfg, src, y)?;
    Ok(logits
        .iter()
        .zip(y)
        .map(|(row, &tgt)| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            lse - row[tgt]
        })
        .sum())
}

/// Toy next-token model given by an explicit log-probability row per prefix.
/// Token [`EOS`] ends a sequence.
#[derive(Clone, Debug)]
pub struct PrefixTable {
    vocab: usize,
    rows: HashMap<Vec<usize>, Vec<f64>>,
}

impl PrefixTable {
    /// Fills the table for every `</s>`-free prefix shorter than `max_len`
    /// from unnormalized scores `f(prefix)`.
    pub fn from_fn(vocab: usize, max_len: usize, mut f: impl FnMut(&[usize]) -> Vec<f64>) -> Self {
        let mut rows = HashMap::new();
        let mut frontier = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in frontier {
                let s = f(&p);
                assert_eq!(s.len(), vocab);
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + s.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                rows.insert(p.clone(), s.iter().map(|x| x - lse).collect());
                for tok in (0..vocab).filter(|&t| t != EOS) {
                    let mut q = p.clone();
                    q.push(tok);
                    next.push(q);
                }
            }
            frontier = next;
        }
        PrefixTable { vocab, rows }
    }

    /// Scores drawn uniformly from `[-spread, spread]`.
    pub fn random(vocab: usize, max_len: usize, spread: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(vocab, max_len, |_| {
            (0..vocab).map(|_| (rng.uniform() * 2.0 - 1.0) * spread).collect()
        })
    }

    pub fn row(&self, prefix: &[usize]) -> Result<&Vec<f64>> {
        self.rows
            .get(prefix)
            .ok_or_else(|| Error::Consistency(format!("no table row for prefix {prefix:?}")))
    }

    /// `log P(tokens)` as the sum of per-prefix entries.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64> {
        (0..tokens.len())
            .map(|i| Ok(self.row(&tokens[..i])?[tokens[i]]))
            .sum()
    }
}

impl Scorer for PrefixTable {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn log_probs(&self, state: &Vec<usize>) -> Result<Vec<f64>> {
        self.row(state).cloned()
    }

    fn advance(&self, state: &Vec<usize>, token: usize) -> Result<Vec<usize>> {
        let mut s = state.clone();
        s.push(token);
        Ok(s)
    }
}

/// Every admissible output of a table, ranked by length-normalized score
/// (ties by token ids). Sequences ending in `</s>` with at least `min_len`
/// tokens before it are listed; only when none exists, the `</s>`-free
/// sequences of length `max_len`.
pub fn enumerate_ranked(
    table: &PrefixTable,
    min_len: usize,
    max_len: usize,
    gamma: f64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let content: Vec<usize> = (0..table.vocab).filter(|&t| t != EOS).collect();
    let mut finished = Vec::new();
    let mut truncated = Vec::new();
    let mut prefixes = vec![Vec::new()];
    for len in 0..max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            if len >= min_len {
                let mut y = p.clone();
                y.push(EOS);
                finished.push(y);
            }
            for &tok in &content {
                let mut y = p.clone();
                y.push(tok);
                next.push(y);
            }
        }
        prefixes = next;
    }
    truncated.extend(prefixes);
    let pool = if finished.is_empty() { truncated } else { finished };
    let mut scored = pool
        .into_iter()
        .map(|y| {
            let lp = table.log_prob(&y)?;
            let s = lp / (y.len() as f64).powf(gamma);
            Ok((y, s))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}
