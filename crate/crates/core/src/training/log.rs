//! Per-step loss log (CSV) and the per-branch loss split.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use super::StepRecord;
use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

/// Appends one row per optimizer step:
/// `step,epoch,total,stream_1..stream_N,loss_l2r,loss_urp,count_l2r,count_urp,tokens_l2r,tokens_urp,log_prior_mean`.
/// Branch losses are empty when the branch has no instances in the step.
pub struct LossLog {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
}

pub fn header(streams: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "total"].map(String::from).to_vec();
    h.extend((1..=streams).map(|n| format!("stream_{n}")));
    h.extend(
        [
            "loss_l2r",
            "loss_urp",
            "count_l2r",
            "count_urp",
            "tokens_l2r",
            "tokens_urp",
            "log_prior_mean",
        ]
        .map(String::from),
    );
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LossLog {
    pub fn create(path: &Path, streams: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(header(streams))
            .map_err(|e| csv_err(path, e))?;
        Ok(LossLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let r = &rec.report;
        let mut row = vec![rec.step.to_string(), rec.epoch.to_string(), r.total.to_string()];
        row.extend(r.per_stream.iter().map(|v| v.to_string()));
        row.extend([
            opt(r.loss_l2r),
            opt(r.loss_urp),
            r.count_l2r.to_string(),
            r.count_urp.to_string(),
            r.tokens_l2r.to_string(),
            r.tokens_urp.to_string(),
            r.log_prior_mean.to_string(),
        ]);
        self.writer
            .write_record(&row)
            .map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// One parsed log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub per_stream: Vec<f64>,
    pub loss_l2r: Option<f64>,
    pub loss_urp: Option<f64>,
    pub tokens_l2r: usize,
    pub tokens_urp: usize,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let head = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let streams = head.iter().filter(|h| h.starts_with("stream_")).count();
    if head.iter().collect::<Vec<_>>() != header(streams) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let bad = |what: &str| Error::Parse(format!("{}: bad {what}", path.display()));
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&head[i]));
            let o = |i: usize| {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    f(i).map(Some)
                }
            };
            let u = |i: usize| rec[i].parse::<u64>().map_err(|_| bad(&head[i]));
            let base = 3 + streams;
            Ok(LogRow {
                step: u(0)?,
                epoch: u(1)?,
                total: f(2)?,
                per_stream: (0..streams).map(|n| f(3 + n)).collect::<Result<_>>()?,
                loss_l2r: o(base)?,
                loss_urp: o(base + 1)?,
                tokens_l2r: u(base + 4)? as usize,
                tokens_urp: u(base + 5)? as usize,
            })
        })
        .collect()
}

/// Per-epoch token-weighted branch losses. Epochs without any instance of a
/// branch have no point on that curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSplit {
    pub l2r: Vec<(u64, f64)>,
    pub urp: Vec<(u64, f64)>,
}

pub fn loss_split(rows: &[LogRow]) -> LossSplit {
    let mut acc: BTreeMap<u64, [(f64, usize); 2]> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.epoch).or_default();
        if let Some(l) = r.loss_l2r {
            e[0].0 += l * r.tokens_l2r as f64;
            e[0].1 += r.tokens_l2r;
        }
        if let Some(l) = r.loss_urp {
            e[1].0 += l * r.tokens_urp as f64;
            e[1].1 += r.tokens_urp;
        }
    }
    let mut out = LossSplit::default();
    for (epoch, [l2r, urp]) in acc {
        if l2r.1 > 0 {
            out.l2r.push((epoch, l2r.0 / l2r.1 as f64));
        }
        if urp.1 > 0 {
            out.urp.push((epoch, urp.0 / urp.1 as f64));
        }
    }
    out
}

/// gnuplot-readable table `epoch loss_l2r loss_urp`, `NaN` marking a missing
/// point.
pub fn write_split_data(path: &Path, split: &LossSplit) -> Result<()> {
    let mut epochs: Vec<u64> = split.l2r.iter().chain(&split.urp).map(|p| p.0).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let find = |c: &[(u64, f64)], e| {
        c.iter()
            .find(|p| p.0 == e)
            .map_or("NaN".to_string(), |p| p.1.to_string())
    };
    let mut text = String::from("# epoch loss_l2r loss_urp\n");
    for e in epochs {
        text.push_str(&format!("{e} {} {}\n", find(&split.l2r, e), find(&split.urp, e)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
