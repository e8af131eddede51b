//! Left-to-right decoding with cached main-stream keys and values.

use std::sync::Arc;

use super::forward::EncoderState;
use super::Model;
use crate::attention::{attend, project_kv, KeyValues};
use crate::data::vocab::BOS;
use crate::error::{Error, Result};
use crate::numerics::{BinaryMask, Real, Tape, Tensor};

/// Projected keys and values.
type KeyValue<T> = (Tensor<T>, Tensor<T>);

/// Projected key/value rows accumulated slot by slot.
#[derive(Clone, Debug, PartialEq)]
struct Rows<T: Real> {
    k: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Rows<T> {
    fn tensors(&self, d: usize) -> KeyValue<T> {
        let n = self.k.len() / d;
        (
            Tensor::new(vec![n, d], self.k.clone()).expect("cached rows are whole"),
            Tensor::new(vec![n, d], self.v.clone()).expect("cached rows are whole"),
        )
    }
}

/// Decoder state after consuming `<s> y_1 .. y_len`. Extending returns a
/// new cache and leaves the original untouched, so one prefix can seed many
/// continuations.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache<T: Real> {
    tokens: Vec<usize>,
    enc: Arc<EncoderState<T>>,
    /// Per layer, projected memory keys/values for the main group and for
    /// query stream 1's group.
    mem: Arc<Vec<[KeyValue<T>; 2]>>,
    /// Per layer, main-slot keys/values under the main group's and stream
    /// 1's self-attention projections. The second entry stays empty when
    /// streams share parameters.
    slots: Vec<[Rows<T>; 2]>,
}

impl<T: Real> DecoderCache<T> {
    /// Target tokens consumed so far (without `<s>`).
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn encoder(&self) -> &EncoderState<T> {
        &self.enc
    }
}

impl<T: Real> Model<T> {
    /// Cache holding only `<s>`.
    pub fn start_decoding(&self, enc: &EncoderState<T>) -> Result<DecoderCache<T>> {
        let mut tape = Tape::new(&self.params);
        let mem = self.memory_from(&mut tape, enc)?;
        let g1 = self.cfg.group(1);
        let mut per_layer = Vec::with_capacity(self.cfg.layers);
        for blocks in &self.layout.dec {
            let a = project_kv(&mut tape, mem.h, &blocks[0].cross)?;
            let b = project_kv(&mut tape, mem.h, &blocks[g1].cross)?;
            per_layer.push([
                (tape.value(a.k).clone(), tape.value(a.v).clone()),
                (tape.value(b.k).clone(), tape.value(b.v).clone()),
            ]);
        }
        drop(tape);
        let empty = || Rows {
            k: Vec::new(),
            v: Vec::new(),
        };
        let cache = DecoderCache {
            tokens: Vec::new(),
            enc: Arc::new(enc.clone()),
            mem: Arc::new(per_layer),
            slots: (0..self.cfg.layers).map(|_| [empty(), empty()]).collect(),
        };
        self.push_slot(cache, BOS, 0)
    }

    /// Appends `token` as the next target token.
    pub fn extend(&self, cache: &DecoderCache<T>, token: usize) -> Result<DecoderCache<T>> {
        let slot = cache.tokens.len() + 1;
        if slot + 1 > self.cfg.max_positions {
            return Err(Error::Length {
                len: slot + 1,
                max: self.cfg.max_positions,
            });
        }
        if token >= self.cfg.vocab_size {
            return Err(Error::Consistency(format!("token id {token} outside vocabulary")));
        }
        let mut next = self.push_slot(cache.clone(), token, slot)?;
        next.tokens.push(token);
        Ok(next)
    }

    /// Runs the main stream for one new slot and stores its keys/values.
    fn push_slot(&self, mut cache: DecoderCache<T>, token: usize, slot: usize) -> Result<DecoderCache<T>> {
        let d = self.cfg.hidden;
        let g1 = self.cfg.group(1);
        let mut tape = Tape::new(&self.params);
        let (tok, pos) = (tape.param(self.layout.tokens), tape.param(self.layout.dec_pos));
        let e = tape.embedding(tok, &[token])?;
        let p = tape.embedding(pos, &[slot])?;
        let mut x = tape.add(e, p)?;
        let layers = self.layout.dec.len();
        for (k, blocks) in self.layout.dec.iter().enumerate() {
            let b0 = &blocks[0];
            let hn = self.norm(&mut tape, x, b0.ln1)?;
            for (which, gi) in [0, g1].into_iter().enumerate() {
                if which == 1 && gi == 0 {
                    continue;
                }
                let kv = project_kv(&mut tape, hn, &blocks[gi].self_attn)?;
                let rows = &mut cache.slots[k][which];
                rows.k.extend_from_slice(tape.value(kv.k).data());
                rows.v.extend_from_slice(tape.value(kv.v).data());
            }
            if k + 1 == layers {
                break;
            }
            let (ck, cv) = cache.slots[k][0].tensors(d);
            let kv = KeyValues {
                k: tape.constant(ck),
                v: tape.constant(cv),
            };
            let mask = BinaryMask::ones(1, slot + 1);
            let a = attend(&mut tape, hn, kv, &mask, &b0.self_attn, &self.attn, None)?;
            let x1 = tape.add(x, a)?;
            let (mk, mv) = &cache.mem[k][0];
            let mem_kv = KeyValues {
                k: tape.constant(mk.clone()),
                v: tape.constant(mv.clone()),
            };
            x = self.cross_and_ffn(
                &mut tape,
                x1,
                b0.ln2,
                &b0.cross,
                mem_kv,
                &cache.enc.pad_mask,
                b0.ln3,
                b0.ffn,
            )?;
        }
        Ok(cache)
    }

    /// Stream-1 logits for the next position given the cached prefix.
    pub fn next_logits(&self, cache: &DecoderCache<T>) -> Result<Vec<T>> {
        let d = self.cfg.hidden;
        let t = cache.tokens.len() + 1;
        if t + 1 > self.cfg.max_positions {
            return Err(Error::Length {
                len: t + 1,
                max: self.cfg.max_positions,
            });
        }
        let gi = self.cfg.group(1);
        let which = usize::from(gi != 0);
        let mut tape = Tape::new(&self.params);
        let mut g = self.placeholder_on(&mut tape, 1, &[t])?;
        for (k, blocks) in self.layout.dec.iter().enumerate() {
            let b = &blocks[gi];
            let gn = self.norm(&mut tape, g, b.ln1)?;
            let own = project_kv(&mut tape, gn, &b.self_attn)?;
            let (ck, cv) = cache.slots[k][which].tensors(d);
            let (ck, cv) = (tape.constant(ck), tape.constant(cv));
            let kv = KeyValues {
                k: tape.concat_rows(&[ck, own.k])?,
                v: tape.concat_rows(&[cv, own.v])?,
            };
            let mask = BinaryMask::ones(1, t + 1);
            let a = attend(&mut tape, gn, kv, &mask, &b.self_attn, &self.attn, None)?;
            let x = tape.add(g, a)?;
            let (mk, mv) = &cache.mem[k][which];
            let mem_kv = KeyValues {
                k: tape.constant(mk.clone()),
                v: tape.constant(mv.clone()),
            };
            g = self.cross_and_ffn(
                &mut tape,
                x,
                b.ln2,
                &b.cross,
                mem_kv,
                &cache.enc.pad_mask,
                b.ln3,
                b.ffn,
            )?;
        }
        let logits = self.output_logits(&mut tape, g)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Next-token logits for `prefix`, checking that `cache` holds exactly
    /// that prefix.
    pub fn incremental_step(&self, prefix: &[usize], cache: &DecoderCache<T>) -> Result<Vec<T>> {
        if cache.tokens != prefix {
            return Err(Error::Consistency(format!(
                "cache holds {:?} but prefix is {prefix:?}",
                cache.tokens
            )));
        }
        self.next_logits(cache)
    }
}
