//! Toy sequence-to-sequence tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{MASK, NUM_SPECIALS};
use super::Example;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Infill,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "infill" => Ok(Task::Infill),
            other => Err(Error::Parse(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Infill => "infill",
        })
    }
}

/// Builds one example of `task` from a token body.
pub fn make_example(task: Task, body: Vec<usize>, rng: &mut RngStream) -> Example {
    match task {
        Task::Copy => Example {
            target: body.clone(),
            source: body,
        },
        Task::Reverse => Example {
            target: body.iter().rev().copied().collect(),
            source: body,
        },
        Task::Infill => {
            let len = body.len();
            let gap = 1 + rng.below(len.div_ceil(3) as u64) as usize;
            let start = rng.below((len - gap + 1) as u64) as usize;
            let mut source = body[..start].to_vec();
            source.push(MASK);
            source.extend_from_slice(&body[start + gap..]);
            Example {
                source,
                target: body[start..start + gap].to_vec(),
            }
        }
    }
}

/// `count` examples with body lengths uniform in `len_range` (inclusive) and
/// tokens uniform over the non-special ids below `vocab_size`.
pub fn gen_synthetic(
    task: Task,
    vocab_size: usize,
    len_range: (usize, usize),
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Example>> {
    if vocab_size < 8 {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} below the minimum of 8"
        )));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid length range {lo}..={hi}")));
    }
    let regular = (vocab_size - NUM_SPECIALS) as u64;
    Ok((0..count)
        .map(|_| {
            let len = lo + rng.below((hi - lo + 1) as u64) as usize;
            let body = (0..len)
                .map(|_| NUM_SPECIALS + rng.below(regular) as usize)
                .collect();
            make_example(task, body, rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_definitions() {
        let mut rng = RngStream::new(0);
        let (a, b, c, d) = (5, 6, 7, 8);
        let ex = make_example(Task::Copy, vec![a, b, c], &mut rng);
        assert_eq!(ex.target, vec![a, b, c]);
        let ex = make_example(Task::Reverse, vec![a, b, c], &mut rng);
        assert_eq!(ex.target, vec![c, b, a]);
        for _ in 0..50 {
            let ex = make_example(Task::Infill, vec![a, b, c, d], &mut rng);
            let gap = ex.source.iter().position(|&t| t == MASK).unwrap();
            assert_eq!(ex.source.iter().filter(|&&t| t == MASK).count(), 1);
            let mut spliced = ex.source[..gap].to_vec();
            spliced.extend(&ex.target);
            spliced.extend(&ex.source[gap + 1..]);
            assert_eq!(spliced, vec![a, b, c, d]);
        }
    }

    #[test]
    fn generation_respects_ranges() {
        let mut rng = RngStream::new(3);
        let data = gen_synthetic(Task::Copy, 32, (4, 16), 500, &mut rng).unwrap();
        assert!(data.iter().all(|e| (4..=16).contains(&e.source.len())));
        assert!(data
            .iter()
            .flat_map(|e| &e.source)
            .all(|&t| (NUM_SPECIALS..32).contains(&t)));
        assert!(gen_synthetic(Task::Copy, 7, (1, 2), 1, &mut rng).is_err());
        assert_eq!("Reverse".parse::<Task>().unwrap(), Task::Reverse);
    }
}
