//! Oracle suites shared by the `selfcheck` command and the acceptance
//! harness. Every suite is deterministic in its seed and reports one line.

use std::time::{Duration, Instant};

use crate::data::vocab::{EOS, MASK, NUM_SPECIALS};
use crate::data::{apply_span_mask, Batch, Instance, Replacement, SpanMaskSpec};
use crate::error::Result;
use crate::inference::{beam_search, greedy, BeamConfig};
use crate::model::{Model, ModelConfig};
use crate::numerics::gradcheck::sample_coords;
use crate::numerics::{grad_check, RngStream};
use crate::oracle::{brute_force_masks, enumerate_ranked, permutations, vanilla_decoder_logits, PrefixTable};
use crate::order::{build_masks, order_stats, sample_order, Branch, DecodeOrder, OrderDistribution};
use crate::training::batch_loss_on;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    /// `PASS name: detail`, without timing so logs stay byte-stable.
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteReport {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn random_tokens(len: usize, vocab: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..len)
        .map(|_| NUM_SPECIALS + rng.below((vocab - NUM_SPECIALS) as u64) as usize)
        .collect()
}

/// `build_masks` against the conditional-set oracle for every order with
/// `T <= max_t`.
pub fn mask_oracle(max_t: usize, streams: usize) -> SuiteReport {
    timed("mask-oracle", || {
        let (mut checked, mut bad) = (0, 0);
        for t in 1..=max_t {
            for z in permutations(t) {
                let order = DecodeOrder::new(z, Branch::URP)?;
                if build_masks(&order, streams)? != brute_force_masks(&order, streams) {
                    bad += 1;
                }
                checked += 1;
            }
        }
        Ok((
            bad == 0,
            format!("{checked} orders, T <= {max_t}, N = {streams}, {bad} mismatches"),
        ))
    })
}

/// Perturbs target tokens outside `y_{z_{<=t-n}}` and requires
/// `logits[n][t]` to stay bit-identical. As a control, perturbing a visible
/// token must change it.
pub fn leakage(seed: u64, cases: usize) -> SuiteReport {
    timed("leakage", || {
        let mut rng = RngStream::new(seed).split("leakage");
        let cfg = ModelConfig::tiny();
        let (mut perturbations, mut leaks, mut controls, mut dead) = (0, 0, 0, 0);
        for case in 0..cases {
            let model = Model::<f64>::new(cfg.clone(), rng.next_u64())?;
            let t_len = 1 + rng.below(5) as usize;
            let order = sample_order(OrderDistribution::URP, t_len, &mut rng)?;
            let n = 1 + case % 2;
            let t = 1 + rng.below(t_len as u64) as usize;
            let masks = build_masks(&order, 2)?;
            let src = random_tokens(1 + rng.below(6) as usize, cfg.vocab_size, &mut rng);
            let y = random_tokens(t_len, cfg.vocab_size, &mut rng);
            let base = model.forward(&src, &y, &masks)?;
            let row = base[n - 1].row(t - 1);
            let visible = &order.z()[..t.saturating_sub(n)];
            let bump = |v: usize| NUM_SPECIALS + (v - NUM_SPECIALS + 1) % (cfg.vocab_size - NUM_SPECIALS);
            for pos in 1..=t_len {
                let mut y2 = y.clone();
                y2[pos - 1] = bump(y2[pos - 1]);
                let out = model.forward(&src, &y2, &masks)?;
                let same = out[n - 1].row(t - 1) == row;
                if visible.contains(&pos) {
                    controls += 1;
                    dead += usize::from(same);
                } else {
                    perturbations += 1;
                    leaks += usize::from(!same);
                }
            }
        }
        Ok((
            leaks == 0 && dead == 0,
            format!(
                "{cases} cases, {perturbations} hidden perturbations, {leaks} leaks; {controls} visible controls, {dead} without effect"
            ),
        ))
    })
}

/// Identity-order single-stream logits against the independent causal
/// decoder on random small configurations.
pub fn vanilla_equivalence(seed: u64, configs: usize, tolerance: f64) -> SuiteReport {
    timed("vanilla-equivalence", || {
        let mut rng = RngStream::new(seed).split("vanilla");
        let mut worst = 0.0f64;
        for _ in 0..configs {
            let heads = [1, 2, 4][rng.below(3) as usize];
            let hidden = heads * [2, 4, 8][rng.below(3) as usize];
            let cfg = ModelConfig {
                layers: 1 + rng.below(3) as usize,
                hidden,
                ffn: hidden * (1 + rng.below(3) as usize),
                heads,
                vocab_size: 8 + rng.below(17) as usize,
                streams: 1,
                max_positions: 12,
                share_stream_params: true,
                tie_embeddings: rng.below(2) == 0,
                dropout: 0.0,
            };
            let model = Model::<f64>::new(cfg.clone(), rng.next_u64())?;
            let src = random_tokens(1 + rng.below(8) as usize, cfg.vocab_size, &mut rng);
            let y = random_tokens(1 + rng.below(8) as usize, cfg.vocab_size, &mut rng);
            let logits = model.forward(&src, &y, &build_masks(&DecodeOrder::identity(y.len()), 1)?)?;
            let oracle = vanilla_decoder_logits(model.params(), &cfg, &src, &y)?;
            for (t, row) in oracle.iter().enumerate() {
                for (v, &o) in row.iter().enumerate() {
                    worst = worst.max((logits[0].get(t, v) - o).abs());
                }
            }
        }
        Ok((
            worst <= tolerance,
            format!("{configs} configs, max |diff| {worst:.3e} (tolerance {tolerance:e})"),
        ))
    })
}

/// Finite differences through the whole batch loss of the tiny
/// configuration (T = 5, N = 2).
pub fn gradient_fidelity(seed: u64, coords: usize, tolerance: f64) -> SuiteReport {
    timed("gradient-fidelity", || {
        let mut rng = RngStream::new(seed).split("gradient");
        let model = Model::<f64>::new(ModelConfig::tiny(), rng.next_u64())?;
        let v = model.config().vocab_size;
        let inst = |rng: &mut RngStream| -> Result<Instance> {
            let mut target = random_tokens(4, v, rng);
            target.push(EOS);
            let mut source = random_tokens(3 + rng.below(3) as usize, v, rng);
            source.push(EOS);
            Ok(Instance {
                source,
                target,
                orders: vec![sample_order(OrderDistribution::URP, 5, rng)?],
            })
        };
        let batch = Batch::from_instances(&[inst(&mut rng)?, inst(&mut rng)?])?;
        let sample = sample_coords(model.params(), coords, &mut rng);
        let report = grad_check(
            model.params(),
            |t| batch_loss_on(t, &model, &batch),
            &sample,
            1e-5,
            tolerance,
        )?;
        let worst = report
            .worst
            .as_ref()
            .map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
        Ok((
            report.passed(),
            format!(
                "{} coordinates, max rel err {:.3e}{worst} (tolerance {tolerance:e}), {} failures",
                report.checked, report.max_rel_err, report.failures
            ),
        ))
    })
}

/// URP chi-square at T = 3 and the identity frequency under α = 0.5.
pub fn sampler_statistics(seed: u64, draws: u64) -> SuiteReport {
    timed("sampler-statistics", || {
        let base = RngStream::new(seed).split("sampler");
        let urp = order_stats(OrderDistribution::URP, 3, draws, &mut base.split("urp"))?;
        let mix = order_stats(OrderDistribution::Alpha(0.5), 3, draws, &mut base.split("alpha"))?;
        let ident = mix
            .rows
            .iter()
            .find(|r| r.z == [1, 2, 3])
            .map_or(0.0, |r| r.frequency);
        // α + (1 − α)/T! = 0.5 + 0.5/6
        let expected = 0.5 + 0.5 / 6.0;
        let ok = urp.passes() && (ident - expected).abs() <= 0.01;
        Ok((
            ok,
            format!(
                "URP chi-square {:.3} < {:.3} (df {}); alpha 0.5 identity frequency {ident:.4} (want {expected:.4} +- 0.01)",
                urp.chi_square, urp.critical_001, urp.df
            ),
        ))
    })
}

/// Exactly `span_len` masked tokens per window and the 80/10/10 split over
/// at least `min_masked` masked tokens.
pub fn span_statistics(seed: u64, min_masked: usize) -> SuiteReport {
    timed("span-statistics", || {
        let mut rng = RngStream::new(seed).split("span");
        let spec = SpanMaskSpec::default();
        let span = spec.span_len();
        let vocab = 1000;
        let (mut masked, mut windows, mut bad_windows) = (0usize, 0usize, 0usize);
        let mut counts = [0usize; 3];
        while masked < min_masked {
            let w = 1 + rng.below(4) as usize;
            let tokens = random_tokens(w * spec.window + rng.below(10) as usize, vocab, &mut rng);
            let m = apply_span_mask(&tokens, &spec, vocab, &mut rng)?;
            let full = tokens.len() / spec.window;
            if m.offsets.len() != full || m.target.len() != full * span || m.source.len() != tokens.len() {
                bad_windows += 1;
            }
            let mut inside = vec![false; tokens.len()];
            for (k, &off) in m.offsets.iter().enumerate() {
                let in_window = off >= k * spec.window && off + span <= (k + 1) * spec.window;
                if !in_window || m.target[k * span..(k + 1) * span] != tokens[off..off + span] {
                    bad_windows += 1;
                }
                inside[off..off + span].iter_mut().for_each(|x| *x = true);
                windows += 1;
            }
            if (0..tokens.len()).any(|i| !inside[i] && m.source[i] != tokens[i]) {
                bad_windows += 1;
            }
            for (i, r) in m.replacements.iter().enumerate() {
                let pos = m.offsets[i / span] + i % span;
                let idx = match r {
                    Replacement::Mask => 0,
                    Replacement::Random => 1,
                    Replacement::Keep => 2,
                };
                if (idx == 0) != (m.source[pos] == MASK) || (idx == 2 && m.source[pos] != tokens[pos]) {
                    bad_windows += 1;
                }
                counts[idx] += 1;
            }
            masked += m.target.len();
        }
        let fr: Vec<f64> = counts.iter().map(|&c| c as f64 / masked as f64).collect();
        let ok = bad_windows == 0
            && (fr[0] - 0.8).abs() <= 0.02
            && (fr[1] - 0.1).abs() <= 0.02
            && (fr[2] - 0.1).abs() <= 0.02;
        Ok((
            ok,
            format!(
                "{windows} windows of {} with {span} masked each ({bad_windows} bad); mask/random/keep {:.4}/{:.4}/{:.4} over {masked} tokens",
                spec.window, fr[0], fr[1], fr[2]
            ),
        ))
    })
}

/// Toy tables with a hand-chosen best path, `V = 3, 5`, `max_len = 4`.
pub fn hand_scored_tables() -> Vec<PrefixTable> {
    vec![
        PrefixTable::from_fn(3, 4, |p| match p {
            [] => vec![0.0, -3.0, 2.0],
            [2] => vec![2.0, -3.0, 0.0],
            [2, 0] => vec![-1.0, 3.0, -1.0],
            _ => vec![0.0, 0.0, 0.0],
        }),
        PrefixTable::from_fn(5, 4, |p| match p {
            [] => vec![1.0, -2.0, 0.0, 2.5, 0.5],
            [3] => vec![0.0, -1.0, 0.5, 0.0, 3.0],
            [3, 4] => vec![0.0, 0.0, 3.5, 1.0, 0.0],
            [3, 4, 2] => vec![0.0, 4.0, 0.0, 0.0, 0.0],
            _ => vec![0.0, 0.5, 0.0, 0.0, 0.0],
        }),
    ]
}

/// Beam search against exhaustive enumeration on hand-scored tables for
/// beams 1-3, and beam 1 against greedy on random tables.
pub fn beam_oracle(seed: u64, random_tables: usize) -> SuiteReport {
    timed("beam-oracle", || {
        let mut mismatches = 0;
        let mut runs = 0;
        for table in hand_scored_tables() {
            for gamma in [0.0, 1.2] {
                let best = enumerate_ranked(&table, 0, 4, gamma)?.remove(0);
                for beam in 1..=3 {
                    let cfg = BeamConfig {
                        beam,
                        length_penalty: gamma,
                        min_len: 0,
                        max_len: 4,
                    };
                    let h = beam_search(&table, &cfg)?.remove(0);
                    runs += 1;
                    if h.tokens != best.0 || (h.score - best.1).abs() > 1e-12 {
                        mismatches += 1;
                    }
                }
            }
        }
        let mut rng = RngStream::new(seed).split("beam");
        let mut greedy_diff = 0;
        for case in 0..random_tables {
            let v = 3 + case % 3;
            let max_len = 1 + case % 4;
            let table = PrefixTable::random(v, max_len, 3.0, &mut rng);
            let cfg = BeamConfig {
                beam: 1,
                length_penalty: 1.2,
                min_len: case % 2,
                max_len,
            };
            let g = greedy(&table, cfg.min_len, max_len, 1.2)?;
            if beam_search(&table, &cfg)? != [g] {
                greedy_diff += 1;
            }
        }
        Ok((
            mismatches == 0 && greedy_diff == 0,
            format!(
                "{runs} hand-scored runs, {mismatches} differ from enumeration; beam 1 vs greedy on {random_tables} random tables, {greedy_diff} differ"
            ),
        ))
    })
}

/// The suites run by `selfcheck`, in order.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    let suites: Vec<Box<dyn Fn() -> SuiteReport + Send + Sync>> = vec![
        Box::new(|| mask_oracle(5, 2)),
        Box::new(move || leakage(seed, 200)),
        Box::new(move || vanilla_equivalence(seed, 20, 1e-5)),
        Box::new(move || gradient_fidelity(seed, 200, 1e-4)),
        Box::new(move || sampler_statistics(seed, 60_000)),
        Box::new(move || span_statistics(seed, 100_000)),
        Box::new(move || beam_oracle(seed, 200)),
    ];
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        suites.par_iter().map(|f| f()).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        suites.iter().map(|f| f()).collect()
    }
}
