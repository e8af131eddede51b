use crate::data::{Batch, Instance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Gradients, Real, RngStream, Tape, Var};
use crate::order::{build_masks, log_prior, Branch, OrderDistribution};

/// How per-instance work inside a batch is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

/// Loss of one batch. `total` is the optimized quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Mean per-token negative log-likelihood of each query stream.
    pub per_stream: Vec<f64>,
    pub loss_l2r: Option<f64>,
    pub loss_urp: Option<f64>,
    /// Number of sampled (instance, order) pairs per branch.
    pub count_l2r: usize,
    pub count_urp: usize,
    pub tokens_l2r: usize,
    pub tokens_urp: usize,
    /// Mean `log p(Z)` of the sampled orders; reported, not optimized.
    pub log_prior_mean: f64,
}

/// Per-instance summed negative log-likelihoods, `nll[r][n]`.
#[derive(Clone, Debug)]
pub(crate) struct InstanceNll {
    pub nll: Vec<Vec<f64>>,
    pub branches: Vec<Branch>,
    pub log_priors: Vec<f64>,
    pub tokens: usize,
}

/// Records one instance on `tape`: the encoder once, then the decoder for
/// each of its orders. Returns the per-(order, stream) summed NLL nodes.
pub fn instance_terms<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    inst: &Instance,
    mut dropout: Option<&mut RngStream>,
) -> Result<Vec<Vec<Var>>> {
    let streams = model.config().streams;
    let mem = model.encode_on(tape, &inst.source, dropout.as_deref_mut())?;
    inst.orders
        .iter()
        .map(|order| {
            let masks = build_masks(order, streams)?;
            let logits =
                model.decode_on(tape, &mem, &inst.target, &masks, streams, dropout.as_deref_mut())?;
            let targets: Vec<usize> = order.z().iter().map(|&p| inst.target[p - 1]).collect();
            logits
                .into_iter()
                .map(|l| tape.cross_entropy(l, &targets))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Normalizer `N · R · Σ tokens` of a batch.
fn normalizer(batch: &Batch, streams: usize) -> Result<f64> {
    let mut denom = 0.0;
    let mut r_seen = None;
    for i in 0..batch.len() {
        if batch.target_lens[i] == 0 {
            continue;
        }
        let r = batch.orders[i].len();
        if r == 0 || r_seen.is_some_and(|x| x != r) {
            return Err(Error::Consistency(format!(
                "instance {i} carries {r} orders; every instance needs the same positive count"
            )));
        }
        r_seen = Some(r);
        denom += (streams * r * batch.target_lens[i]) as f64;
    }
    if denom == 0.0 {
        return Err(Error::EmptySequence("batch has no target tokens"));
    }
    Ok(denom)
}

/// Builds the whole batch loss as one scalar node (sequential; used for
/// gradient checks).
pub fn batch_loss_on<T: Real>(tape: &mut Tape<'_, T>, model: &Model<T>, batch: &Batch) -> Result<Var> {
    let denom = normalizer(batch, model.config().streams)?;
    let mut parts = Vec::new();
    for i in 0..batch.len() {
        if batch.target_lens[i] == 0 {
            continue;
        }
        let terms = instance_terms(tape, model, &batch.instance(i), None)?;
        parts.extend(terms.into_iter().flatten());
    }
    let s = tape.sum(&parts)?;
    tape.scale(s, 1.0 / denom)
}

fn numeric_at(i: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} (instance {i})"),
        },
        other => other,
    }
}

fn run_instance<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    i: usize,
    dist: OrderDistribution,
    scale: f64,
    with_grad: bool,
    dropout: Option<&RngStream>,
) -> Result<(InstanceNll, Option<Gradients<T>>)> {
    let inst = batch.instance(i);
    let mut tape = Tape::new(model.params());
    let mut rng = dropout.map(|r| r.fork(i as u64));
    let terms = instance_terms(&mut tape, model, &inst, rng.as_mut()).map_err(|e| numeric_at(i, e))?;
    let nll = terms
        .iter()
        .map(|row| row.iter().map(|&v| tape.scalar(v).f64()).collect())
        .collect();
    let grads = if with_grad {
        let flat: Vec<Var> = terms.into_iter().flatten().collect();
        let s = tape.sum(&flat).map_err(|e| numeric_at(i, e))?;
        let s = tape.scale(s, scale).map_err(|e| numeric_at(i, e))?;
        Some(tape.backward(s))
    } else {
        None
    };
    Ok((
        InstanceNll {
            nll,
            branches: inst.orders.iter().map(|o| o.branch()).collect(),
            log_priors: inst.orders.iter().map(|o| log_prior(dist, o)).collect(),
            tokens: inst.target.len(),
        },
        grads,
    ))
}

#[cfg(feature = "parallel")]
fn map_instances<R: Send>(idx: &[usize], par: Parallelism, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match par {
        Parallelism::Parallel => idx.par_iter().map(|&i| f(i)).collect(),
        Parallelism::Sequential => idx.iter().map(|&i| f(i)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_instances<R: Send>(idx: &[usize], _par: Parallelism, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    idx.iter().map(|&i| f(i)).collect()
}

fn report(parts: &[InstanceNll], streams: usize, denom: f64) -> LossReport {
    let mut per_stream = vec![0.0; streams];
    let (mut sum_l2r, mut sum_urp) = (0.0, 0.0);
    let mut r = LossReport {
        total: 0.0,
        per_stream: Vec::new(),
        loss_l2r: None,
        loss_urp: None,
        count_l2r: 0,
        count_urp: 0,
        tokens_l2r: 0,
        tokens_urp: 0,
        log_prior_mean: 0.0,
    };
    let mut prior_sum = 0.0;
    let mut pairs = 0usize;
    for p in parts {
        for (row, (&branch, &lp)) in p.nll.iter().zip(p.branches.iter().zip(&p.log_priors)) {
            for (n, &v) in row.iter().enumerate() {
                per_stream[n] += v;
            }
            let mean_over_streams = row.iter().sum::<f64>() / streams as f64;
            match branch {
                Branch::L2R => {
                    sum_l2r += mean_over_streams;
                    r.count_l2r += 1;
                    r.tokens_l2r += p.tokens;
                }
                Branch::URP => {
                    sum_urp += mean_over_streams;
                    r.count_urp += 1;
                    r.tokens_urp += p.tokens;
                }
            }
            prior_sum += lp;
            pairs += 1;
        }
    }
    // per-stream normalizer is R · Σ tokens = denom / N
    let per = denom / streams as f64;
    r.per_stream = per_stream.iter().map(|s| s / per).collect();
    r.total = r.per_stream.iter().sum::<f64>() / streams as f64;
    r.loss_l2r = (r.tokens_l2r > 0).then(|| sum_l2r / r.tokens_l2r as f64);
    r.loss_urp = (r.tokens_urp > 0).then(|| sum_urp / r.tokens_urp as f64);
    r.log_prior_mean = if pairs > 0 { prior_sum / pairs as f64 } else { 0.0 };
    r
}

/// Loss of `batch` and, with `with_grad`, its gradient
/// `∂ total / ∂ θ`, summed over instances in index order.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    dist: OrderDistribution,
    par: Parallelism,
    with_grad: bool,
    dropout: Option<&RngStream>,
) -> Result<(LossReport, Option<Gradients<T>>)> {
    let streams = model.config().streams;
    let denom = normalizer(batch, streams)?;
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.target_lens[i] > 0).collect();
    let results = map_instances(&idx, par, |i| {
        run_instance(model, batch, i, dist, 1.0 / denom, with_grad, dropout)
    });
    let mut parts = Vec::with_capacity(results.len());
    let mut grads: Option<Gradients<T>> = None;
    for res in results {
        let (nll, g) = res?;
        parts.push(nll);
        if let Some(g) = g {
            match grads.as_mut() {
                Some(acc) => acc.merge(g),
                None => grads = Some(g),
            }
        }
    }
    let rep = report(&parts, streams, denom);
    if !rep.total.is_finite() {
        return Err(Error::Numeric {
            op: "batch loss".into(),
        });
    }
    Ok((rep, grads))
}
