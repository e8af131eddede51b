//! Vocabulary, span-masking corruption, toy tasks and batching.

pub mod batch;
pub mod span;
pub mod synthetic;
pub mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, make_instance, Batch, BatchStream, Instance};
pub use span::{apply_span_mask, reconstruct, Replacement, SpanMaskSpec, SpanMasked};
pub use synthetic::{gen_synthetic, make_example, Task};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};

/// A source/target pair without the trailing `</s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Writes `source<TAB>target` lines of space-separated tokens.
pub fn write_tsv(path: &Path, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&vocab.decode(&ex.source));
        text.push('\t');
        text.push_str(&vocab.decode(&ex.target));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_tsv(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("{}:{}: missing tab", path.display(), n + 1)))?;
            let ex = Example {
                source: vocab.encode(src),
                target: vocab.encode(tgt),
            };
            if ex.source.is_empty() || ex.target.is_empty() {
                return Err(Error::Parse(format!("{}:{}: empty side", path.display(), n + 1)));
            }
            Ok(ex)
        })
        .collect()
}

/// Description of a generated dataset, stored beside its files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub seed: u64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_count: usize,
    pub valid_count: usize,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Span-masking examples from a corpus: each line is tokenized, cut into
/// chunks of whole windows, and corrupted independently.
pub fn pretraining_examples(
    lines: &[&str],
    vocab: &Vocabulary,
    spec: &SpanMaskSpec,
    windows_per_example: usize,
    rng: &mut crate::numerics::RngStream,
) -> Result<Vec<Example>> {
    spec.validate()?;
    let chunk = spec.window * windows_per_example.max(1);
    let mut out = Vec::new();
    for line in lines {
        let ids = vocab.encode(line);
        for piece in ids.chunks(chunk) {
            if piece.len() < spec.window {
                continue;
            }
            let m = apply_span_mask(piece, spec, vocab.len(), rng)?;
            out.push(Example {
                source: m.source,
                target: m.target,
            });
        }
    }
    Ok(out)
}
