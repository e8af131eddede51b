use super::{FfnIds, Model, NormIds};
use crate::attention::{attend, padding_mask, project_kv, KeyValues, ProjectionSet};
use crate::data::vocab::BOS;
use crate::error::{Error, Result};
use crate::numerics::ops::LAYER_NORM_EPS;
use crate::numerics::{AttnDropout, BinaryMask, Real, RngStream, Tape, Tensor, Var};
use crate::order::{DecodeOrder, RelativeOrderMasks};

/// Eval-mode encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T: Real> {
    pub h: Tensor<T>,
    pub pad_mask: Vec<bool>,
}

/// `logits[n - 1]` is the `[T, V]` matrix of query stream `n`, row `t - 1`
/// predicting `y_{z_t}`.
pub type StreamLogits<T> = Vec<Tensor<T>>;

/// Encoder output on a tape.
#[derive(Clone, Debug)]
pub struct Memory {
    pub h: Var,
    pub valid: Vec<bool>,
}

impl<T: Real> Model<T> {
    pub(crate) fn dropout<'a>(&self, rng: &'a mut Option<&mut RngStream>) -> Option<AttnDropout<'a>> {
        if self.cfg.dropout > 0.0 {
            rng.as_deref_mut().map(|r| AttnDropout {
                rate: self.cfg.dropout,
                rng: r,
            })
        } else {
            None
        }
    }

    pub(crate) fn norm(&self, tape: &mut Tape<'_, T>, x: Var, ids: NormIds) -> Result<Var> {
        let (g, b) = (tape.param(ids.g), tape.param(ids.b));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub(crate) fn ffn(&self, tape: &mut Tape<'_, T>, x: Var, ids: FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(ids.w1),
            tape.param(ids.b1),
            tape.param(ids.w2),
            tape.param(ids.b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    /// `x + cross(LN(x)) ` followed by `x + ffn(LN(x))`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cross_and_ffn(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        ln2: NormIds,
        cross: &ProjectionSet,
        mem_kv: KeyValues,
        mem_valid: &[bool],
        ln3: NormIds,
        ffn: FfnIds,
    ) -> Result<Var> {
        let rows = tape.value(x).rows();
        let c = self.norm(tape, x, ln2)?;
        let mask = padding_mask(rows, mem_valid)?;
        let c = attend(tape, c, mem_kv, &mask, cross, &self.attn, None)?;
        let x = tape.add(x, c)?;
        let f = self.norm(tape, x, ln3)?;
        let f = self.ffn(tape, f, ffn)?;
        tape.add(x, f)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_positions {
            return Err(Error::Length {
                len,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Consistency(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    pub fn encode_on(
        &self,
        tape: &mut Tape<'_, T>,
        src: &[usize],
        mut dropout: Option<&mut RngStream>,
    ) -> Result<Memory> {
        if src.is_empty() {
            return Err(Error::EmptySequence("source"));
        }
        self.check_len(src.len())?;
        self.check_tokens(src)?;
        let l = &self.layout;
        let (tok, pos) = (tape.param(l.tokens), tape.param(l.enc_pos));
        let e = tape.embedding(tok, src)?;
        let positions: Vec<usize> = (0..src.len()).collect();
        let p = tape.embedding(pos, &positions)?;
        let mut x = tape.add(e, p)?;
        let mask = BinaryMask::ones(src.len(), src.len());
        for layer in &l.enc {
            let a = self.norm(tape, x, layer.ln1)?;
            let kv = project_kv(tape, a, &layer.attn)?;
            let a = attend(
                tape,
                a,
                kv,
                &mask,
                &layer.attn,
                &self.attn,
                self.dropout(&mut dropout),
            )?;
            x = tape.add(x, a)?;
            let f = self.norm(tape, x, layer.ln2)?;
            let f = self.ffn(tape, f, layer.ffn)?;
            x = tape.add(x, f)?;
        }
        Ok(Memory {
            h: self.norm(tape, x, l.enc_ln)?,
            valid: vec![true; src.len()],
        })
    }

    /// Encodes `src` in eval mode.
    pub fn encode(&self, src: &[usize]) -> Result<EncoderState<T>> {
        let mut tape = Tape::new(&self.params);
        let m = self.encode_on(&mut tape, src, None)?;
        Ok(EncoderState {
            h: tape.value(m.h).clone(),
            pad_mask: m.valid,
        })
    }

    pub(crate) fn memory_from(&self, tape: &mut Tape<'_, T>, enc: &EncoderState<T>) -> Result<Memory> {
        if enc.h.rows() != enc.pad_mask.len() || enc.h.cols() != self.cfg.hidden {
            return Err(Error::Shape {
                op: "encoder state",
                left: enc.h.shape().to_vec(),
                right: vec![enc.pad_mask.len(), self.cfg.hidden],
            });
        }
        Ok(Memory {
            h: tape.constant(enc.h.clone()),
            valid: enc.pad_mask.clone(),
        })
    }

    /// Input row of the placeholder predicting position `pos` in stream `n`.
    pub(crate) fn placeholder_on(
        &self,
        tape: &mut Tape<'_, T>,
        n: usize,
        positions: &[usize],
    ) -> Result<Var> {
        let (ph, pos) = (
            tape.param(self.layout.placeholders),
            tape.param(self.layout.dec_pos),
        );
        let a = tape.embedding(ph, &vec![n - 1; positions.len()])?;
        let b = tape.embedding(pos, positions)?;
        tape.add(a, b)
    }

    /// Learned stream-`n` placeholder embedding plus the positional
    /// embedding of `z_t`.
    pub fn placeholder_embed(&self, t: usize, n: usize, order: &DecodeOrder) -> Result<Vec<T>> {
        if n == 0 || n > self.cfg.streams || t == 0 || t > order.len() {
            return Err(Error::Consistency(format!(
                "placeholder (t={t}, n={n}) outside T={} N={}",
                order.len(),
                self.cfg.streams
            )));
        }
        let pos = order.z()[t - 1];
        self.check_len(pos + 1)?;
        let mut tape = Tape::new(&self.params);
        let v = self.placeholder_on(&mut tape, n, &[pos])?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn output_logits(&self, tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
        let o = self.norm(tape, g, self.layout.dec_ln)?;
        match self.layout.out {
            Some(w) => {
                let w = tape.param(w);
                tape.matmul(o, w)
            }
            None => {
                let e = tape.param(self.layout.tokens);
                tape.matmul_nt(o, e)
            }
        }
    }

    /// Teacher-forced multi-stream decoder pass. Returns one `[T, V]` logit
    /// node per query stream.
    pub fn decode_on(
        &self,
        tape: &mut Tape<'_, T>,
        memory: &Memory,
        y: &[usize],
        masks: &RelativeOrderMasks,
        streams: usize,
        mut dropout: Option<&mut RngStream>,
    ) -> Result<Vec<Var>> {
        let t_len = y.len();
        if t_len == 0 {
            return Err(Error::EmptySequence("target"));
        }
        if masks.target_len() != t_len
            || masks.streams() < streams
            || streams == 0
            || streams > self.cfg.streams
        {
            return Err(Error::Consistency(format!(
                "masks for T={} N={} used with target length {t_len} and {streams} of {} streams",
                masks.target_len(),
                masks.streams(),
                self.cfg.streams
            )));
        }
        self.check_len(t_len + 1)?;
        self.check_tokens(y)?;
        let l = &self.layout;
        let slots: Vec<usize> = std::iter::once(BOS).chain(y.iter().copied()).collect();
        let positions: Vec<usize> = (0..=t_len).collect();
        let (tok, pos) = (tape.param(l.tokens), tape.param(l.dec_pos));
        let e = tape.embedding(tok, &slots)?;
        let p = tape.embedding(pos, &positions)?;
        let mut h = tape.add(e, p)?;
        let z = masks.order.z();
        let mut g = (1..=streams)
            .map(|n| self.placeholder_on(tape, n, z))
            .collect::<Result<Vec<_>>>()?;

        let groups = self.cfg.groups();
        for (k, blocks) in l.dec.iter().enumerate() {
            let last = k + 1 == l.dec.len();
            let b0 = &blocks[0];
            let hn = self.norm(tape, h, b0.ln1)?;
            let mut h_kv: Vec<Option<KeyValues>> = vec![None; groups];
            let mut mem_kv: Vec<Option<KeyValues>> = vec![None; groups];
            let mut needed: Vec<usize> = (1..=streams).map(|n| self.cfg.group(n)).collect();
            if !last {
                needed.push(0);
            }
            for &gi in &needed {
                if h_kv[gi].is_none() {
                    h_kv[gi] = Some(project_kv(tape, hn, &blocks[gi].self_attn)?);
                    mem_kv[gi] = Some(project_kv(tape, memory.h, &blocks[gi].cross)?);
                }
            }
            for n in 1..=streams {
                let gi = self.cfg.group(n);
                let b = &blocks[gi];
                let gn = self.norm(tape, g[n - 1], b.ln1)?;
                let own = project_kv(tape, gn, &b.self_attn)?;
                let hk = h_kv[gi].unwrap();
                let kv = KeyValues {
                    k: tape.concat_rows(&[hk.k, own.k])?,
                    v: tape.concat_rows(&[hk.v, own.v])?,
                };
                let a = attend(
                    tape,
                    gn,
                    kv,
                    &masks.query[n - 1],
                    &b.self_attn,
                    &self.attn,
                    self.dropout(&mut dropout),
                )?;
                let x = tape.add(g[n - 1], a)?;
                g[n - 1] = self.cross_and_ffn(
                    tape,
                    x,
                    b.ln2,
                    &b.cross,
                    mem_kv[gi].unwrap(),
                    &memory.valid,
                    b.ln3,
                    b.ffn,
                )?;
            }
            // The main stream after the last layer feeds nothing.
            if !last {
                let a = attend(
                    tape,
                    hn,
                    h_kv[0].unwrap(),
                    &masks.main,
                    &b0.self_attn,
                    &self.attn,
                    self.dropout(&mut dropout),
                )?;
                let x = tape.add(h, a)?;
                h = self.cross_and_ffn(
                    tape,
                    x,
                    b0.ln2,
                    &b0.cross,
                    mem_kv[0].unwrap(),
                    &memory.valid,
                    b0.ln3,
                    b0.ffn,
                )?;
            }
        }
        g.into_iter().map(|gn| self.output_logits(tape, gn)).collect()
    }

    /// Eval-mode teacher-forced decoder pass over all query streams.
    pub fn decoder_forward(
        &self,
        enc: &EncoderState<T>,
        y: &[usize],
        masks: &RelativeOrderMasks,
    ) -> Result<StreamLogits<T>> {
        let mut tape = Tape::new(&self.params);
        let mem = self.memory_from(&mut tape, enc)?;
        let logits = self.decode_on(&mut tape, &mem, y, masks, self.cfg.streams, None)?;
        Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Eval-mode pass for a single source/target pair.
    pub fn forward(&self, src: &[usize], y: &[usize], masks: &RelativeOrderMasks) -> Result<StreamLogits<T>> {
        let enc = self.encode(src)?;
        self.decoder_forward(&enc, y, masks)
    }
}
