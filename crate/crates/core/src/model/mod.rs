//! Transformer encoder and the multi-stream order-aware decoder.
//!
//! Parameter names:
//!
//! ```text
//! embed.tokens [V, D]   embed.enc_pos [P, D]   embed.dec_pos [P, D]
//! embed.placeholders [N, D]
//! enc.{k}.{ln1,ln2}.{g,b}  enc.{k}.attn.{wq,wk,wv,wo}  enc.{k}.ffn.{w1,b1,w2,b2}
//! enc.ln.{g,b}
//! dec.{k}.s{g}.{ln1,ln2,ln3}.{g,b}  dec.{k}.s{g}.{self,cross}.{wq,wk,wv,wo}
//! dec.{k}.s{g}.ffn.{w1,b1,w2,b2}
//! dec.ln.{g,b}   out.w [D, V] (untied only)
//! ```
//!
//! Group `s0` serves the main stream, `s{n}` query stream `n`; with shared
//! stream parameters only `s0` exists.

mod config;
mod forward;
mod incremental;

use std::path::Path;

pub use config::{read_manifest, write_manifest, ModelConfig, MAX_STREAMS};
pub use forward::{EncoderState, Memory, StreamLogits};
pub use incremental::DecoderCache;

use crate::attention::{AttentionConfig, ProjectionSet};
use crate::error::Result;
use crate::numerics::{checkpoint, init_normal, init_projection, ParamId, ParamSet, Real, RngStream, Tensor};

pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayer {
    pub ln1: NormIds,
    pub attn: ProjectionSet,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecBlock {
    pub ln1: NormIds,
    pub self_attn: ProjectionSet,
    pub ln2: NormIds,
    pub cross: ProjectionSet,
    pub ln3: NormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tokens: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub placeholders: ParamId,
    pub enc: Vec<EncLayer>,
    pub enc_ln: NormIds,
    /// `dec[k][group]`.
    pub dec: Vec<Vec<DecBlock>>,
    pub dec_ln: NormIds,
    pub out: Option<ParamId>,
}

/// Model parameters plus their configuration.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    cfg: ModelConfig,
    attn: AttentionConfig,
    params: ParamSet<T>,
    layout: Layout,
}

struct Builder<'a, T: Real> {
    params: &'a mut ParamSet<T>,
    rng: RngStream,
}

impl<T: Real> Builder<'_, T> {
    // Each parameter draws from its own stream keyed by name, so adding or
    // reordering parameters leaves the others unchanged.
    fn add(&mut self, name: String, f: impl FnOnce(&mut RngStream) -> Tensor<T>) -> Result<ParamId> {
        let mut r = self.rng.split(&name);
        self.params.add(name, f(&mut r))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            g: self.add(format!("{prefix}.g"), |_| Tensor::full(&[d], T::one()))?,
            b: self.add(format!("{prefix}.b"), |_| Tensor::zeros(&[d]))?,
        })
    }

    fn proj(&mut self, prefix: &str, d: usize) -> Result<ProjectionSet> {
        let mut p = |n: &str| self.add(format!("{prefix}.{n}"), |r| init_projection(d, d, r));
        Ok(ProjectionSet {
            wq: p("wq")?,
            wk: p("wk")?,
            wv: p("wv")?,
            wo: p("wo")?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.add(format!("{prefix}.w1"), |r| init_projection(d, f, r))?,
            b1: self.add(format!("{prefix}.b1"), |_| Tensor::zeros(&[f]))?,
            w2: self.add(format!("{prefix}.w2"), |r| init_projection(f, d, r))?,
            b2: self.add(format!("{prefix}.b2"), |_| Tensor::zeros(&[d]))?,
        })
    }
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let attn = AttentionConfig::new(cfg.hidden, cfg.heads)?;
        let (d, f, v, p) = (cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.max_positions);
        let mut params = ParamSet::new();
        let mut b = Builder {
            params: &mut params,
            rng: RngStream::new(seed).split("init"),
        };
        let tokens = b.add("embed.tokens".into(), |r| init_normal(&[v, d], EMBED_STD, r))?;
        let enc_pos = b.add("embed.enc_pos".into(), |r| init_normal(&[p, d], EMBED_STD, r))?;
        let dec_pos = b.add("embed.dec_pos".into(), |r| init_normal(&[p, d], EMBED_STD, r))?;
        let placeholders = b.add("embed.placeholders".into(), |r| {
            init_normal(&[cfg.streams, d], EMBED_STD, r)
        })?;
        let mut enc = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            enc.push(EncLayer {
                ln1: b.norm(&format!("enc.{k}.ln1"), d)?,
                attn: b.proj(&format!("enc.{k}.attn"), d)?,
                ln2: b.norm(&format!("enc.{k}.ln2"), d)?,
                ffn: b.ffn(&format!("enc.{k}.ffn"), d, f)?,
            });
        }
        let enc_ln = b.norm("enc.ln", d)?;
        let mut dec = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let mut groups = Vec::new();
            for g in 0..cfg.groups() {
                let pre = format!("dec.{k}.s{g}");
                groups.push(DecBlock {
                    ln1: b.norm(&format!("{pre}.ln1"), d)?,
                    self_attn: b.proj(&format!("{pre}.self"), d)?,
                    ln2: b.norm(&format!("{pre}.ln2"), d)?,
                    cross: b.proj(&format!("{pre}.cross"), d)?,
                    ln3: b.norm(&format!("{pre}.ln3"), d)?,
                    ffn: b.ffn(&format!("{pre}.ffn"), d, f)?,
                });
            }
            dec.push(groups);
        }
        let dec_ln = b.norm("dec.ln", d)?;
        let out = if cfg.tie_embeddings {
            None
        } else {
            Some(b.add("out.w".into(), |r| init_projection(d, v, r))?)
        };
        Ok(Model {
            cfg,
            attn,
            params,
            layout: Layout {
                tokens,
                enc_pos,
                dec_pos,
                placeholders,
                enc,
                enc_ln,
                dec,
                dec_ln,
                out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn attention_config(&self) -> &AttentionConfig {
        &self.attn
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Changes the training-time attention dropout rate.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.dropout = p;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            attn: self.attn,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Writes the parameters to `path` and the configuration manifest to
    /// `path` with a `.toml` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<_> = self
            .params
            .named_values()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f32>()))
            .collect();
        write_manifest(&path.with_extension("toml"), &self.cfg)?;
        checkpoint::save(path, &entries)
    }

    /// Loads a checkpoint written by [`Model::save`], validating it against
    /// its manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = read_manifest(&path.with_extension("toml"))?;
        let mut model = Model::new(cfg, 0)?;
        let entries = checkpoint::load(path)?
            .into_iter()
            .map(|(n, t)| (n, t.cast::<T>()))
            .collect();
        model.params.load_values(entries)?;
        Ok(model)
    }
}
