//! Decode orders and the relative-order attention masks derived from them.
//!
//! Slot conventions used throughout the crate:
//!
//! * main stream: slots `0..=T`, slot 0 is the start token, slot `p ≥ 1`
//!   holds target token `y_p` at its natural position;
//! * query stream `n`: rows `t = 1..=T` are decode steps; columns `0..=T`
//!   address main-stream slots and columns `T+1..=2T` address this stream's
//!   placeholder slots, indexed by decode step.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{BinaryMask, RngStream};

/// Mixture component that produced an order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    L2R,
    URP,
}

/// A permutation `z` of target positions `1..=T`; `z[t-1]` is the absolute
/// position decoded at step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecodeOrder {
    z: Vec<usize>,
    branch: Branch,
}

impl DecodeOrder {
    pub fn new(z: Vec<usize>, branch: Branch) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::EmptySequence("decode order"));
        }
        let t = z.len();
        let mut seen = vec![false; t + 1];
        for &p in &z {
            if p == 0 || p > t || seen[p] {
                return Err(Error::Parse(format!("{z:?} is not a permutation of 1..={t}")));
            }
            seen[p] = true;
        }
        let order = DecodeOrder { z, branch };
        if branch == Branch::L2R && !order.is_identity() {
            return Err(Error::Consistency(
                "an L2R-branch order must be the identity".into(),
            ));
        }
        Ok(order)
    }

    pub fn identity(t: usize) -> Self {
        DecodeOrder {
            z: (1..=t).collect(),
            branch: Branch::L2R,
        }
    }

    /// Parses space- or comma-separated positions; the branch is L2R for the
    /// identity and URP otherwise.
    pub fn parse(s: &str) -> Result<Self> {
        let z = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|x| !x.is_empty())
            .map(|x| {
                x.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad position {x:?} in order")))
            })
            .collect::<Result<Vec<_>>>()?;
        let identity = z.iter().enumerate().all(|(i, &p)| p == i + 1);
        DecodeOrder::new(z, if identity { Branch::L2R } else { Branch::URP })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[usize] {
        &self.z
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn is_identity(&self) -> bool {
        self.z.iter().enumerate().all(|(i, &p)| p == i + 1)
    }

    /// Inverse permutation: `result[p]` is the step at which position `p`
    /// is decoded (`result[0]` is 0, the start token).
    pub fn step_index(&self) -> Vec<usize> {
        let mut inv = vec![0; self.z.len() + 1];
        for (t, &p) in self.z.iter().enumerate() {
            inv[p] = t + 1;
        }
        inv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OrderDistribution {
    /// Point mass on the identity order.
    L2R,
    /// Uniform over all `T!` permutations.
    URP,
    /// Identity with probability `alpha`, otherwise a URP draw.
    Alpha(f64),
}

impl Default for OrderDistribution {
    fn default() -> Self {
        OrderDistribution::Alpha(0.5)
    }
}

impl OrderDistribution {
    pub fn alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(OrderDistribution::Alpha(alpha))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OrderDistribution::Alpha(a) => OrderDistribution::alpha(a).map(|_| ()),
            _ => Ok(()),
        }
    }
}

impl FromStr for OrderDistribution {
    type Err = Error;

    /// `l2r`, `urp`, `alpha` (α = 0.5) or `alpha:<value>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2r" => Ok(OrderDistribution::L2R),
            "urp" => Ok(OrderDistribution::URP),
            "alpha" => Ok(OrderDistribution::default()),
            other => match other.strip_prefix("alpha:") {
                Some(v) => OrderDistribution::alpha(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad alpha in {s:?}")))?,
                ),
                None => Err(Error::Config(format!("unknown order distribution {s:?}"))),
            },
        }
    }
}

impl TryFrom<String> for OrderDistribution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OrderDistribution> for String {
    fn from(d: OrderDistribution) -> String {
        d.to_string()
    }
}

impl std::fmt::Display for OrderDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderDistribution::L2R => write!(f, "l2r"),
            OrderDistribution::URP => write!(f, "urp"),
            OrderDistribution::Alpha(a) => write!(f, "alpha:{a}"),
        }
    }
}

fn fisher_yates(t: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut z: Vec<usize> = (1..=t).collect();
    for i in (1..t).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        z.swap(i, j);
    }
    z
}

pub fn sample_order(dist: OrderDistribution, t: usize, rng: &mut RngStream) -> Result<DecodeOrder> {
    if t == 0 {
        return Err(Error::EmptySequence("sample_order"));
    }
    let urp = |rng: &mut RngStream| DecodeOrder {
        z: fisher_yates(t, rng),
        branch: Branch::URP,
    };
    Ok(match dist {
        OrderDistribution::L2R => DecodeOrder::identity(t),
        OrderDistribution::URP => urp(rng),
        OrderDistribution::Alpha(alpha) => {
            if rng.uniform() < alpha {
                DecodeOrder::identity(t)
            } else {
                urp(rng)
            }
        }
    })
}

fn ln_factorial(t: usize) -> f64 {
    (2..=t).map(|k| (k as f64).ln()).sum()
}

/// `log p(Z)` under `dist`; negative infinity for impossible orders.
pub fn log_prior(dist: OrderDistribution, order: &DecodeOrder) -> f64 {
    let t = order.len();
    let identity = order.is_identity();
    match dist {
        OrderDistribution::L2R => {
            if identity {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        OrderDistribution::URP => -ln_factorial(t),
        OrderDistribution::Alpha(alpha) => {
            let urp = (1.0 - alpha) * (-ln_factorial(t)).exp();
            let p = if identity { alpha + urp } else { urp };
            p.ln()
        }
    }
}

/// Attention masks for the main stream and `N` query streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativeOrderMasks {
    pub order: DecodeOrder,
    /// `(T+1) × (T+1)`.
    pub main: BinaryMask,
    /// `N` matrices of `T × (2T+1)`.
    pub query: Vec<BinaryMask>,
}

impl RelativeOrderMasks {
    pub fn target_len(&self) -> usize {
        self.order.len()
    }

    pub fn streams(&self) -> usize {
        self.query.len()
    }
}

pub fn build_masks(order: &DecodeOrder, streams: usize) -> Result<RelativeOrderMasks> {
    if streams == 0 {
        return Err(Error::Config("at least one query stream is required".into()));
    }
    let t = order.len();
    let step = order.step_index();
    // Main slot p sees the start token and every token decoded at or
    // before its own step.
    let main = BinaryMask::from_fn(t + 1, t + 1, |p, q| {
        q == 0 || (p >= 1 && q >= 1 && step[q] <= step[p])
    });
    let query = (1..=streams)
        .map(|n| {
            BinaryMask::from_fn(t, 2 * t + 1, |row, q| {
                let ts = row + 1;
                if q == 0 {
                    true
                } else if q <= t {
                    step[q] + n <= ts
                } else {
                    q == t + ts
                }
            })
        })
        .collect();
    Ok(RelativeOrderMasks {
        order: order.clone(),
        main,
        query,
    })
}

fn push_mask(out: &mut String, m: &BinaryMask) {
    for r in 0..m.rows() {
        let line: Vec<&str> = m.row(r).iter().map(|&b| if b { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

/// Text dump: `T N`, the order, then the main block and one block per
/// query stream separated by single blank lines.
pub fn dump_masks(masks: &RelativeOrderMasks) -> String {
    let mut out = String::new();
    let z: Vec<String> = masks.order.z().iter().map(|p| p.to_string()).collect();
    let _ = writeln!(out, "{} {}", masks.target_len(), masks.streams());
    let _ = writeln!(out, "{}", z.join(" "));
    push_mask(&mut out, &masks.main);
    for q in &masks.query {
        out.push('\n');
        push_mask(&mut out, q);
    }
    out
}

fn parse_bits(line: &str, cols: usize, lineno: usize) -> Result<Vec<u8>> {
    let bits: Vec<u8> = line
        .split(' ')
        .map(|b| match b {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(Error::Parse(format!("line {lineno}: bad mask entry {b:?}"))),
        })
        .collect::<Result<_>>()?;
    if bits.len() != cols {
        return Err(Error::Parse(format!(
            "line {lineno}: expected {cols} entries, found {}",
            bits.len()
        )));
    }
    Ok(bits)
}

/// Strict inverse of [`dump_masks`].
pub fn parse_masks(text: &str) -> Result<RelativeOrderMasks> {
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| Error::Parse("missing trailing newline".into()))?;
    let lines: Vec<&str> = body.split('\n').collect();
    let header: Vec<&str> = lines[0].split(' ').collect();
    let (t, n) = match header.as_slice() {
        [a, b] => (
            a.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad T {a:?}")))?,
            b.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad N {b:?}")))?,
        ),
        _ => return Err(Error::Parse("header must be \"T N\"".into())),
    };
    let expected = 2 + (t + 1) + n * (t + 1);
    if lines.len() != expected {
        return Err(Error::Parse(format!(
            "expected {expected} lines for T={t} N={n}, found {}",
            lines.len()
        )));
    }
    let order = DecodeOrder::parse(lines.get(1).copied().unwrap_or(""))?;
    if order.len() != t || lines[1].contains("  ") || lines[1] != lines[1].trim() {
        return Err(Error::Parse("order line does not match T".into()));
    }
    let mut cursor = 2;
    let read_block = |rows: usize, cols: usize, cursor: &mut usize| -> Result<BinaryMask> {
        let mut bits = Vec::with_capacity(rows);
        for _ in 0..rows {
            bits.push(parse_bits(lines[*cursor], cols, *cursor + 1)?);
            *cursor += 1;
        }
        Ok(BinaryMask::from_rows(&bits))
    };
    let main = read_block(t + 1, t + 1, &mut cursor)?;
    let mut query = Vec::with_capacity(n);
    for _ in 0..n {
        if !lines[cursor].is_empty() {
            return Err(Error::Parse(format!(
                "line {}: expected blank separator",
                cursor + 1
            )));
        }
        cursor += 1;
        query.push(read_block(t, 2 * t + 1, &mut cursor)?);
    }
    Ok(RelativeOrderMasks { order, main, query })
}

/// Largest `T` accepted by [`order_stats`].
pub const MAX_STATS_LEN: usize = 8;

/// One row of an empirical order-frequency table.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderFrequency {
    pub z: Vec<usize>,
    pub count: u64,
    pub frequency: f64,
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderStats {
    pub draws: u64,
    /// Orders with positive prior mass or at least one draw, lexicographic.
    pub rows: Vec<OrderFrequency>,
    /// Pearson statistic over orders with positive prior mass.
    pub chi_square: f64,
    pub df: usize,
    /// Upper 0.001 quantile of the chi-square law with `df` degrees of
    /// freedom (0 when `df = 0`).
    pub critical_001: f64,
    /// Draws that landed on an order of zero prior mass.
    pub impossible: u64,
}

impl OrderStats {
    pub fn passes(&self) -> bool {
        self.impossible == 0 && self.chi_square < self.critical_001.max(f64::MIN_POSITIVE)
    }
}

fn all_orders(t: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut z: Vec<usize> = (1..=t).collect();
    loop {
        out.push(z.clone());
        // next lexicographic permutation
        let Some(i) = (1..z.len()).rev().find(|&i| z[i - 1] < z[i]) else {
            return out;
        };
        let j = (i..z.len())
            .rev()
            .find(|&j| z[j] > z[i - 1])
            .expect("pivot has a successor");
        z.swap(i - 1, j);
        z[i..].reverse();
    }
}

/// Draws `draws` orders of length `t` and compares their frequencies with
/// the prior.
pub fn order_stats(dist: OrderDistribution, t: usize, draws: u64, rng: &mut RngStream) -> Result<OrderStats> {
    dist.validate()?;
    if t == 0 || t > MAX_STATS_LEN {
        return Err(Error::Config(format!(
            "order statistics need 1 <= T <= {MAX_STATS_LEN}, got {t}"
        )));
    }
    if draws == 0 {
        return Err(Error::Config("draws must be positive".into()));
    }
    let orders = all_orders(t);
    let index: std::collections::HashMap<Vec<usize>, usize> =
        orders.iter().cloned().enumerate().map(|(i, z)| (z, i)).collect();
    let mut counts = vec![0u64; orders.len()];
    for _ in 0..draws {
        let o = sample_order(dist, t, rng)?;
        counts[index[o.z()]] += 1;
    }
    let mut rows = Vec::new();
    let (mut chi, mut cells, mut impossible) = (0.0, 0usize, 0u64);
    for (z, &count) in orders.into_iter().zip(&counts) {
        let p = log_prior(dist, &DecodeOrder::new(z.clone(), Branch::URP)?).exp();
        if p > 0.0 {
            let e = p * draws as f64;
            chi += (count as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            impossible += count;
        }
        if p > 0.0 || count > 0 {
            rows.push(OrderFrequency {
                z,
                count,
                frequency: count as f64 / draws as f64,
                expected: p,
            });
        }
    }
    let df = cells.saturating_sub(1);
    let critical_001 = if df == 0 {
        0.0
    } else {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        ChiSquared::new(df as f64)
            .map_err(|e| Error::Config(e.to_string()))?
            .inverse_cdf(0.999)
    };
    Ok(OrderStats {
        draws,
        rows,
        chi_square: chi,
        df,
        critical_001,
        impossible,
    })
}
