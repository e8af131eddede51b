//! Left-to-right decoding with query stream 1: beam search, greedy search
//! and teacher-forced sequence scoring.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderCache, EncoderState, Model};
use crate::numerics::Real;
use crate::order::{build_masks, DecodeOrder};
use crate::training::Parallelism;

fn d_beam() -> usize {
    5
}
fn d_penalty() -> f64 {
    1.2
}
fn d_max_len() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    #[serde(default = "d_beam")]
    pub beam: usize,
    /// Exponent γ in `score = log P / |Y|^γ`.
    #[serde(default = "d_penalty")]
    pub length_penalty: f64,
    /// `</s>` is suppressed until a hypothesis holds this many tokens.
    #[serde(default)]
    pub min_len: usize,
    /// Maximum hypothesis length, `</s>` included.
    #[serde(default = "d_max_len")]
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: d_beam(),
            length_penalty: d_penalty(),
            min_len: 0,
            max_len: d_max_len(),
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "need 0 <= min_len <= max_len and max_len >= 1, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Config(
                "length_penalty must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A decoded candidate. `finished` holds when it ends in `</s>` or reached
/// `max_len`; `truncated` marks the latter without a `</s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub score: f64,
    pub finished: bool,
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens without the trailing `</s>`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Length-normalized score `logp / len^γ`.
pub fn length_normalized(logp: f64, len: usize, gamma: f64) -> f64 {
    logp / (len.max(1) as f64).powf(gamma)
}

/// Next-token log-probabilities over a prefix, as seen by the decoder.
pub trait Scorer {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    fn log_probs(&self, state: &Self::State) -> Result<Vec<f64>>;
    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State>;
    /// Tokens the search may emit.
    fn allowed(&self, _token: usize) -> bool {
        true
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Decodes one source with a model through its incremental cache.
pub struct ModelScorer<'a, T: Real> {
    model: &'a Model<T>,
    enc: EncoderState<T>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, source: &[usize]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            enc: model.encode(source)?,
        })
    }
}

impl<T: Real> Scorer for ModelScorer<'_, T> {
    type State = DecoderCache<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn start(&self) -> Result<DecoderCache<T>> {
        self.model.start_decoding(&self.enc)
    }

    fn log_probs(&self, state: &DecoderCache<T>) -> Result<Vec<f64>> {
        let logits: Vec<f64> = self.model.next_logits(state)?.iter().map(|x| x.f64()).collect();
        let lp = log_softmax(&logits);
        if lp.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "next-token distribution".into(),
            });
        }
        Ok(lp)
    }

    fn advance(&self, state: &DecoderCache<T>, token: usize) -> Result<DecoderCache<T>> {
        self.model.extend(state, token)
    }

    fn allowed(&self, token: usize) -> bool {
        !matches!(token, BOS | MASK | PAD)
    }
}

/// Orders by score descending, then token ids ascending.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

struct Live<S> {
    tokens: Vec<usize>,
    logp: f64,
    state: S,
}

/// Beam search from `<s>`. Returns up to `beam` hypotheses ranked by
/// length-normalized score. If no hypothesis emits `</s>` within `max_len`,
/// the best truncated ones are returned with `truncated` set.
pub fn beam_search<S: Scorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    if cfg.beam > vocab {
        return Err(Error::Config(format!(
            "beam {} exceeds vocabulary size {vocab}",
            cfg.beam
        )));
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        logp: 0.0,
        state: scorer.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let hyp = |tokens: Vec<usize>, logp: f64, truncated: bool| Hypothesis {
        score: length_normalized(logp, tokens.len(), cfg.length_penalty),
        tokens,
        logp,
        finished: true,
        truncated,
    };
    while !live.is_empty() && finished.len() < cfg.beam {
        let len = live[0].tokens.len();
        if len == cfg.max_len {
            break;
        }
        // (parent, token, cumulative logp)
        let mut cand: Vec<(usize, usize, f64)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.state)?;
            for (tok, &l) in lp.iter().enumerate() {
                if !scorer.allowed(tok) || (tok == EOS && len < cfg.min_len) || l == f64::NEG_INFINITY {
                    continue;
                }
                cand.push((i, tok, h.logp + l));
            }
        }
        let key = |&(i, tok, _): &(usize, usize, f64)| {
            let mut t = live[i].tokens.clone();
            t.push(tok);
            t
        };
        cand.sort_by(|a, b| rank(a.2, &key(a), b.2, &key(b)));
        let mut next = Vec::with_capacity(cfg.beam);
        for (r, c) in cand.iter().enumerate() {
            if c.1 == EOS {
                // only the top `beam` extensions may finish
                if r < cfg.beam {
                    finished.push(hyp(key(c), c.2, false));
                }
            } else if next.len() < cfg.beam {
                next.push(Live {
                    tokens: key(c),
                    logp: c.2,
                    state: scorer.advance(&live[c.0].state, c.1)?,
                });
            }
            if r + 1 >= cfg.beam && next.len() == cfg.beam {
                break;
            }
        }
        live = next;
    }
    let mut out = if finished.is_empty() {
        live.into_iter().map(|h| hyp(h.tokens, h.logp, true)).collect()
    } else {
        finished
    };
    out.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    out.truncate(cfg.beam);
    Ok(out)
}

/// Arg-max decoding (lowest token id on ties) until `</s>` or `max_len`.
pub fn greedy<S: Scorer>(
    scorer: &S,
    min_len: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let mut state = scorer.start()?;
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    while tokens.len() < max_len {
        let lp = scorer.log_probs(&state)?;
        let best = (0..lp.len())
            .filter(|&t| scorer.allowed(t) && !(t == EOS && tokens.len() < min_len))
            .fold(None, |acc: Option<usize>, t| match acc {
                Some(b) if lp[b] >= lp[t] => Some(b),
                _ => Some(t),
            })
            .ok_or(Error::Consistency("no token may be emitted".into()))?;
        tokens.push(best);
        logp += lp[best];
        if best == EOS {
            break;
        }
        state = scorer.advance(&state, best)?;
    }
    let truncated = tokens.last() != Some(&EOS);
    Ok(Hypothesis {
        score: length_normalized(logp, tokens.len(), length_penalty),
        tokens,
        logp,
        finished: true,
        truncated,
    })
}

/// Best beam hypothesis for each source; sources are decoded independently.
pub fn generate<T: Real>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    cfg: &BeamConfig,
    par: Parallelism,
) -> Result<Vec<Hypothesis>> {
    let one = |src: &Vec<usize>| -> Result<Hypothesis> {
        let scorer = ModelScorer::new(model, src)?;
        let mut hyps = beam_search(&scorer, cfg)?;
        Ok(hyps.swap_remove(0))
    };
    #[cfg(feature = "parallel")]
    if par == Parallelism::Parallel {
        use rayon::prelude::*;
        return sources.par_iter().map(one).collect();
    }
    let _ = par;
    sources.iter().map(one).collect()
}

/// `Σ_t log p(y_{z_t} | y_{z_{≤t−n}}, X)` from one teacher-forced pass.
pub fn score_sequence<T: Real>(
    model: &Model<T>,
    source: &[usize],
    target: &[usize],
    order: &DecodeOrder,
    stream: usize,
) -> Result<f64> {
    let streams = model.config().streams;
    if stream == 0 || stream > streams {
        return Err(Error::Config(format!("stream {stream} outside 1..={streams}")));
    }
    if target.is_empty() {
        return Err(Error::EmptySequence("target"));
    }
    let masks = build_masks(order, streams)?;
    let logits = model.forward(source, target, &masks)?;
    let l = &logits[stream - 1];
    let mut total = 0.0;
    for (t, &pos) in order.z().iter().enumerate() {
        let row: Vec<f64> = l.row(t).iter().map(|x| x.f64()).collect();
        total += log_softmax(&row)[target[pos - 1]];
    }
    if !total.is_finite() {
        return Err(Error::Numeric {
            op: "score_sequence".into(),
        });
    }
    Ok(total)
}
