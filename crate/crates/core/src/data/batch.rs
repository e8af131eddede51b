use super::vocab::{EOS, PAD};
use super::Example;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::order::{sample_order, DecodeOrder, OrderDistribution};

/// One training pair with its sampled decode orders. Sequences carry their
/// trailing `</s>`; an empty target marks a padding instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub orders: Vec<DecodeOrder>,
}

/// Instances padded to common lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
    pub orders: Vec<Vec<DecodeOrder>>,
}

fn pad(rows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut ids = r.to_vec();
            ids.resize(width, PAD);
            let mask = (0..width).map(|i| i < r.len()).collect();
            (ids, mask)
        })
        .unzip()
}

impl Batch {
    pub fn from_instances(instances: &[Instance]) -> Result<Self> {
        for (i, inst) in instances.iter().enumerate() {
            if inst.orders.iter().any(|o| o.len() != inst.target.len()) {
                return Err(Error::Consistency(format!(
                    "instance {i}: order length differs from target"
                )));
            }
        }
        let srcs: Vec<&[usize]> = instances.iter().map(|i| i.source.as_slice()).collect();
        let tgts: Vec<&[usize]> = instances.iter().map(|i| i.target.as_slice()).collect();
        let (source, source_mask) = pad(&srcs);
        let (target, _) = pad(&tgts);
        Ok(Batch {
            source,
            source_mask,
            target,
            target_lens: instances.iter().map(|i| i.target.len()).collect(),
            orders: instances.iter().map(|i| i.orders.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded view of instance `i`.
    pub fn instance(&self, i: usize) -> Instance {
        let slen = self.source_mask[i].iter().filter(|&&v| v).count();
        Instance {
            source: self.source[i][..slen].to_vec(),
            target: self.target[i][..self.target_lens[i]].to_vec(),
            orders: self.orders[i].clone(),
        }
    }

    pub fn total_target_tokens(&self) -> usize {
        self.target_lens.iter().sum()
    }
}

/// Appends `</s>` to both sides and samples `r` orders for the target.
pub fn make_instance(
    ex: &Example,
    dist: OrderDistribution,
    r: usize,
    rng: &mut RngStream,
) -> Result<Instance> {
    let source: Vec<usize> = ex.source.iter().copied().chain([EOS]).collect();
    let target: Vec<usize> = ex.target.iter().copied().chain([EOS]).collect();
    let orders = (0..r)
        .map(|_| sample_order(dist, target.len(), rng))
        .collect::<Result<_>>()?;
    Ok(Instance {
        source,
        target,
        orders,
    })
}

/// Pull-based batch stream over one pass of a dataset.
pub struct BatchStream<'a> {
    examples: &'a [Example],
    visit: Vec<usize>,
    pos: usize,
    batch_size: usize,
    dist: OrderDistribution,
    orders_per_instance: usize,
    rng: RngStream,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        if self.pos >= self.visit.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.visit.len());
        let picked = &self.visit[self.pos..end];
        self.pos = end;
        let instances = picked
            .iter()
            .map(|&i| {
                make_instance(
                    &self.examples[i],
                    self.dist,
                    self.orders_per_instance,
                    &mut self.rng,
                )
            })
            .collect::<Result<Vec<_>>>();
        Some(instances.and_then(|inst| Batch::from_instances(&inst)))
    }
}

/// Batches of `batch_size` examples (the last may be smaller), each instance
/// carrying `r` freshly sampled orders. With `shuffle`, the visiting order is
/// a permutation drawn from `rng`.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    dist: OrderDistribution,
    r: usize,
    shuffle: bool,
    rng: RngStream,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if r == 0 {
        return Err(Error::Config(
            "at least one order per instance is required".into(),
        ));
    }
    dist.validate()?;
    let mut visit: Vec<usize> = (0..examples.len()).collect();
    let order_rng = rng.split("orders");
    if shuffle {
        let mut s = rng.split("shuffle");
        for i in (1..visit.len()).rev() {
            let j = s.below(i as u64 + 1) as usize;
            visit.swap(i, j);
        }
    }
    Ok(BatchStream {
        examples,
        visit,
        pos: 0,
        batch_size,
        dist,
        orders_per_instance: r,
        rng: order_rng,
    })
}
