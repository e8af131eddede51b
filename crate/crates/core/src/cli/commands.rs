use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::config::{from_table, overlay, take_table, to_table, write_resolved};
use crate::data::vocab::{EOS, NUM_SPECIALS};
use crate::data::{
    gen_synthetic, pretraining_examples, read_tsv, write_tsv, DatasetManifest, Example, SpanMaskSpec, Task,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::inference::{generate, greedy, score_sequence, BeamConfig, ModelScorer};
use crate::metrics::{exact_match, rouge_l, token_accuracy};
use crate::model::{Model, ModelConfig};
use crate::numerics::RngStream;
use crate::order::{
    build_masks, dump_masks, order_stats, parse_masks, sample_order, DecodeOrder, OrderDistribution,
};
use crate::training::{
    loss_split, read_loss_log, train, write_split_data, Control, Parallelism, TrainingConfig,
};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling_config(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

fn d_task() -> Task {
    Task::Copy
}
fn d_vocab() -> usize {
    32
}
fn d_min_len() -> usize {
    4
}
fn d_max_len() -> usize {
    16
}
fn d_train_count() -> usize {
    20_000
}
fn d_valid_count() -> usize {
    500
}
fn d_corpus_min() -> usize {
    64
}
fn d_corpus_max() -> usize {
    256
}

/// `gen-data` keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    #[serde(default = "d_task")]
    pub task: Task,
    /// Total vocabulary size, specials included.
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_min_len")]
    pub min_len: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_train_count")]
    pub train_count: usize,
    #[serde(default = "d_valid_count")]
    pub valid_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Lines of toy pre-training text written to `corpus.txt` (none when 0).
    #[serde(default)]
    pub corpus_lines: usize,
    #[serde(default = "d_corpus_min")]
    pub corpus_min_len: usize,
    #[serde(default = "d_corpus_max")]
    pub corpus_max_len: usize,
}

/// Toy text from a sparse first-order chain: each token usually continues
/// with one of three fixed successors.
fn toy_corpus(
    vocab: &Vocabulary,
    lines: usize,
    (lo, hi): (usize, usize),
    rng: &mut RngStream,
) -> Vec<String> {
    let regular = vocab.len() - NUM_SPECIALS;
    let draw = |rng: &mut RngStream| NUM_SPECIALS + rng.below(regular as u64) as usize;
    let succ: Vec<[usize; 3]> = (0..vocab.len())
        .map(|_| [draw(rng), draw(rng), draw(rng)])
        .collect();
    (0..lines)
        .map(|_| {
            let len = lo + rng.below((hi - lo + 1) as u64) as usize;
            let mut ids = vec![draw(rng)];
            while ids.len() < len {
                let prev = *ids.last().expect("non-empty");
                let next = if rng.uniform() < 0.9 {
                    succ[prev][rng.below(3) as usize]
                } else {
                    draw(rng)
                };
                ids.push(next);
            }
            vocab.decode(&ids)
        })
        .collect()
}

pub fn gen_data(table: Table) -> Result<()> {
    let cfg: GenDataConfig = from_table(table)?;
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "bad length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.corpus_lines > 0 && (cfg.corpus_min_len == 0 || cfg.corpus_min_len > cfg.corpus_max_len) {
        return Err(Error::Config("bad corpus length range".into()));
    }
    let vocab = Vocabulary::synthetic(cfg.vocab_size)?;
    let base = RngStream::new(cfg.seed);
    let range = (cfg.min_len, cfg.max_len);
    let train = gen_synthetic(
        cfg.task,
        cfg.vocab_size,
        range,
        cfg.train_count,
        &mut base.split("train"),
    )?;
    let valid = gen_synthetic(
        cfg.task,
        cfg.vocab_size,
        range,
        cfg.valid_count,
        &mut base.split("valid"),
    )?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    write_tsv(&dir.join("train.tsv"), &train, &vocab)?;
    write_tsv(&dir.join("valid.tsv"), &valid, &vocab)?;
    DatasetManifest {
        task: cfg.task,
        seed: cfg.seed,
        vocab_size: cfg.vocab_size,
        min_len: cfg.min_len,
        max_len: cfg.max_len,
        train_count: cfg.train_count,
        valid_count: cfg.valid_count,
    }
    .save(&dir.join("manifest.toml"))?;
    if cfg.corpus_lines > 0 {
        let lines = toy_corpus(
            &vocab,
            cfg.corpus_lines,
            (cfg.corpus_min_len, cfg.corpus_max_len),
            &mut base.split("corpus"),
        );
        write_text(&dir.join("corpus.txt"), &(lines.join("\n") + "\n"))?;
    }
    write_resolved(&dir.join("config.toml"), &cfg)?;
    eprintln!(
        "wrote {} train / {} valid {} examples to {}",
        train.len(),
        valid.len(),
        cfg.task,
        dir.display()
    );
    Ok(())
}

/// Architecture for a fresh model: the tiny preset overlaid with the user's
/// `[model]` keys. `vocab_size` comes from the vocabulary and
/// `max_positions` defaults to the longest sequence plus `<s>` and `</s>`.
fn resolve_model(user: Table, vocab: &Vocabulary, data: &[Example]) -> Result<ModelConfig> {
    let longest = data
        .iter()
        .map(|e| e.source.len().max(e.target.len()))
        .max()
        .unwrap_or(1);
    let mut base = to_table(&ModelConfig::tiny())?;
    base.insert("vocab_size".into(), Value::Integer(vocab.len() as i64));
    base.insert("max_positions".into(), Value::Integer(longest as i64 + 2));
    if let Some(v) = user.get("vocab_size") {
        if v.as_integer() != Some(vocab.len() as i64) {
            return Err(Error::Config(format!(
                "model.vocab_size {v} does not match the vocabulary ({} entries)",
                vocab.len()
            )));
        }
    }
    let cfg: ModelConfig = from_table(overlay(base, user))?;
    cfg.validate()?;
    Ok(cfg)
}

fn d_log_every() -> u64 {
    100
}

/// Keys shared by `pretrain` and `finetune` besides their data sources.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub out_dir: PathBuf,
    /// Seed of the parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub train: TrainingConfig,
    #[serde(default)]
    pub model: Table,
}

fn run_training(run: &TrainRun, model: &mut Model<f32>, data: &[Example], vocab: &Vocabulary) -> Result<()> {
    let dir = &run.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    eprintln!(
        "training on {} examples, {} parameters",
        data.len(),
        model.params().iter().map(|p| p.value.len()).sum::<usize>()
    );
    let every = run.log_every.max(1);
    let out = train(model, data, &run.train, Some(dir), |rec, _| {
        if rec.step % every == 0 {
            eprintln!(
                "step {} epoch {} loss {:.4} lr {:.2e} grad-norm {:.3}",
                rec.step, rec.epoch, rec.report.total, rec.lr, rec.grad_norm
            );
        }
        Ok(Control::Continue)
    })?;
    eprintln!(
        "finished {} steps, {} epochs; checkpoints in {}",
        out.steps,
        out.epochs_completed,
        dir.display()
    );
    Ok(())
}

fn d_vocab_max() -> usize {
    1000
}
fn d_one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainData {
    /// Plain text, one document per line.
    pub corpus: PathBuf,
    /// Existing vocabulary; built from the corpus when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "d_vocab_max")]
    pub vocab_max: usize,
    #[serde(default = "d_one")]
    pub windows_per_example: usize,
    #[serde(default)]
    pub span: SpanMaskSpec,
}

fn split_run<D: for<'de> Deserialize<'de>>(mut table: Table) -> Result<(D, TrainRun)> {
    let mut run = Table::new();
    for key in ["out_dir", "init_seed", "log_every", "train", "model"] {
        if let Some(v) = table.remove(key) {
            run.insert(key.into(), v);
        }
    }
    Ok((from_table(table)?, from_table(run)?))
}

fn resolved_with_model<D: Serialize>(data: &D, run: &TrainRun, model: &ModelConfig) -> Result<Table> {
    let mut t = to_table(data)?;
    let mut r = to_table(run)?;
    r.insert("model".into(), Value::Table(to_table(model)?));
    t.extend(r);
    Ok(t)
}

pub fn pretrain(table: Table) -> Result<()> {
    let (data_cfg, run): (PretrainData, TrainRun) = split_run(table)?;
    let text = read_text(&data_cfg.corpus)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = match &data_cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::from_corpus(lines.iter().copied(), data_cfg.vocab_max)?,
    };
    let mut rng = RngStream::new(run.train.seed).split("span");
    let data = pretraining_examples(
        &lines,
        &vocab,
        &data_cfg.span,
        data_cfg.windows_per_example,
        &mut rng,
    )?;
    if data.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no line fills a {}-token window",
            data_cfg.corpus.display(),
            data_cfg.span.window
        )));
    }
    let mcfg = resolve_model(run.model.clone(), &vocab, &data)?;
    write_resolved(
        &run.out_dir.join("config.toml"),
        &resolved_with_model(&data_cfg, &run, &mcfg)?,
    )?;
    let mut model = Model::<f32>::new(mcfg, run.init_seed)?;
    run_training(&run, &mut model, &data, &vocab)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneData {
    pub train_data: PathBuf,
    #[serde(default)]
    pub valid_data: Option<PathBuf>,
    pub vocab: PathBuf,
    /// Checkpoint to start from; its architecture is kept and only
    /// `model.dropout` may be overridden.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub rouge_l_f: f64,
}

/// Greedy decoding of `data` scored against its targets.
pub fn evaluate(model: &Model<f32>, data: &[Example], max_len: usize) -> Result<EvalReport> {
    let hyps = data
        .iter()
        .map(|e| {
            let mut src = e.source.clone();
            src.push(EOS);
            let scorer = ModelScorer::new(model, &src)?;
            Ok(greedy(&scorer, 0, max_len, 0.0)?.content().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[usize], &[usize])> = hyps
        .iter()
        .zip(data)
        .map(|(h, e)| (h.as_slice(), e.target.as_slice()))
        .collect();
    let rouge = pairs
        .iter()
        .map(|(c, r)| rouge_l(c, r).map(|x| x.f))
        .sum::<Result<f64>>()?
        / pairs.len().max(1) as f64;
    Ok(EvalReport {
        count: pairs.len(),
        token_accuracy: token_accuracy(&pairs)?,
        exact_match: exact_match(&pairs)?,
        rouge_l_f: rouge,
    })
}

pub fn finetune(table: Table) -> Result<()> {
    let (data_cfg, run): (FinetuneData, TrainRun) = split_run(table)?;
    let vocab = Vocabulary::load(&data_cfg.vocab)?;
    let data = read_tsv(&data_cfg.train_data, &vocab)?;
    let valid = match &data_cfg.valid_data {
        Some(p) => Some(read_tsv(p, &vocab)?),
        None => None,
    };
    let mut model = match &data_cfg.init {
        Some(p) => {
            let mut m = Model::<f32>::load(p)?;
            let mut user = run.model.clone();
            let dropout = user.remove("dropout");
            if let Some(k) = user.keys().next() {
                return Err(Error::Config(format!(
                    "model.{k} cannot change when starting from a checkpoint"
                )));
            }
            if let Some(d) = dropout {
                m.set_dropout(
                    d.as_float()
                        .ok_or_else(|| Error::Config("model.dropout must be a number".into()))?,
                )?;
            }
            if m.config().vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary has {} entries, {} has {}",
                    m.config().vocab_size,
                    data_cfg.vocab.display(),
                    vocab.len()
                )));
            }
            m
        }
        None => Model::<f32>::new(resolve_model(run.model.clone(), &vocab, &data)?, run.init_seed)?,
    };
    write_resolved(
        &run.out_dir.join("config.toml"),
        &resolved_with_model(&data_cfg, &run, model.config())?,
    )?;
    run_training(&run, &mut model, &data, &vocab)?;
    if let Some(valid) = valid {
        let max_len = model.config().max_positions - 1;
        let report = evaluate(&model, &valid, max_len)?;
        eprintln!(
            "valid: token accuracy {:.4}, exact match {:.4}, ROUGE-L {:.4} over {}",
            report.token_accuracy, report.exact_match, report.rouge_l_f, report.count
        );
        write_resolved(&run.out_dir.join("metrics.toml"), &report)?;
    }
    Ok(())
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    /// One source per line.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Appends a tab and the hypothesis log-probability to each line.
    #[serde(default)]
    pub with_score: bool,
    #[serde(default = "d_true")]
    pub parallel: bool,
    pub beam: BeamConfig,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

pub fn generate_cmd(mut table: Table) -> Result<()> {
    let model_path = table
        .get("checkpoint")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("checkpoint is required".into()))?
        .to_string();
    let model = Model::<f32>::load(Path::new(&model_path))?;
    let mut beam = to_table(&BeamConfig {
        max_len: model.config().max_positions - 1,
        ..Default::default()
    })?;
    beam.extend(take_table(&mut table, "beam")?);
    table.insert("beam".into(), Value::Table(beam));
    let cfg: GenerateConfig = from_table(table)?;
    cfg.beam.validate()?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config("vocabulary and checkpoint disagree on size".into()));
    }
    let sources = read_lines(&cfg.input)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut ids = vocab.encode(l);
            if ids.is_empty() {
                return Err(Error::Parse(format!(
                    "{}:{}: empty source",
                    cfg.input.display(),
                    i + 1
                )));
            }
            ids.push(EOS);
            Ok(ids)
        })
        .collect::<Result<Vec<_>>>()?;
    write_resolved(&sibling_config(&cfg.output), &cfg)?;
    let par = if cfg.parallel {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    };
    let hyps = generate(&model, &sources, &cfg.beam, par)?;
    let mut out = String::new();
    let mut truncated = 0;
    for h in &hyps {
        truncated += usize::from(h.truncated);
        out.push_str(&vocab.decode(h.content()));
        if cfg.with_score {
            write!(out, "\t{}", h.logp).expect("string write");
        }
        out.push('\n');
    }
    write_text(&cfg.output, &out)?;
    eprintln!("decoded {} sources ({truncated} hit max_len)", hyps.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FixedOrder {
    #[default]
    L2r,
    R2l,
}

fn d_stream() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    /// `source<TAB>target[<TAB>order]`; the optional third column is a
    /// space-separated permutation of `1..=T` where `T` counts `</s>`.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Order used for lines without an explicit one.
    #[serde(default)]
    pub order: FixedOrder,
    #[serde(default = "d_stream")]
    pub stream: usize,
}

pub fn score_cmd(table: Table) -> Result<()> {
    let cfg: ScoreConfig = from_table(table)?;
    let model = Model::<f32>::load(&cfg.checkpoint)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let mut out = String::new();
    for (i, line) in read_lines(&cfg.input)?.iter().enumerate() {
        let at = |m: &str| Error::Parse(format!("{}:{}: {m}", cfg.input.display(), i + 1));
        let mut cols = line.split('\t');
        let (Some(src), Some(tgt)) = (cols.next(), cols.next()) else {
            return Err(at("expected source<TAB>target"));
        };
        let mut src = vocab.encode(src);
        let mut tgt = vocab.encode(tgt);
        src.push(EOS);
        tgt.push(EOS);
        let order = match cols.next() {
            Some(z) => DecodeOrder::parse(z).map_err(|e| at(&e.to_string()))?,
            None => match cfg.order {
                FixedOrder::L2r => DecodeOrder::identity(tgt.len()),
                FixedOrder::R2l => DecodeOrder::parse(
                    &(1..=tgt.len())
                        .rev()
                        .map(|p| p.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                )?,
            },
        };
        if order.len() != tgt.len() {
            return Err(at(&format!(
                "order has {} positions, target {}",
                order.len(),
                tgt.len()
            )));
        }
        let lp = score_sequence(&model, &src, &tgt, &order, cfg.stream)?;
        writeln!(out, "{lp}").expect("string write");
    }
    write_resolved(&sibling_config(&cfg.output), &cfg)?;
    write_text(&cfg.output, &out)
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskDumpArgs {
    pub len: Option<usize>,
    pub order: Option<String>,
    pub dist: Option<String>,
    pub streams: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Builds the requested masks and returns their text dump.
pub fn mask_dump(args: &MaskDumpArgs) -> Result<String> {
    let order = match (&args.order, &args.dist) {
        (Some(z), None) => {
            let o = DecodeOrder::parse(z)?;
            if args.len.is_some_and(|t| t != o.len()) {
                return Err(Error::Config("--len disagrees with --order".into()));
            }
            o
        }
        (None, Some(d)) => {
            let dist: OrderDistribution = d.parse()?;
            let t = args
                .len
                .ok_or_else(|| Error::Config("--dist needs --len".into()))?;
            sample_order(dist, t, &mut RngStream::new(args.seed).split("mask-dump"))?
        }
        (None, None) => DecodeOrder::identity(
            args.len
                .ok_or_else(|| Error::Config("give --order, or --len with an optional --dist".into()))?,
        ),
        (Some(_), Some(_)) => return Err(Error::Config("--order and --dist are exclusive".into())),
    };
    let text = dump_masks(&build_masks(&order, args.streams)?);
    match &args.out {
        Some(p) => {
            write_text(p, &text)?;
            write_resolved(&sibling_config(p), args)?;
        }
        None => eprintln!(
            "{}",
            toml::to_string(args).map_err(|e| Error::Config(e.to_string()))?
        ),
    }
    Ok(text)
}

/// Re-parses a dump and checks it against the conditional-set oracle and
/// against its own re-serialization.
pub fn verify_mask_file(path: &Path) -> Result<()> {
    let text = read_text(path)?;
    let masks = parse_masks(&text)?;
    if dump_masks(&masks) != text {
        return Err(Error::Consistency(format!(
            "{}: dump is not canonical",
            path.display()
        )));
    }
    let expected = crate::oracle::brute_force_masks(&masks.order, masks.streams());
    if masks != expected {
        return Err(Error::Consistency(format!(
            "{}: masks differ from the conditional-set oracle",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderStatsArgs {
    pub dist: String,
    pub len: usize,
    pub draws: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn order_stats_cmd(args: &OrderStatsArgs) -> Result<String> {
    let dist: OrderDistribution = args.dist.parse()?;
    let stats = order_stats(
        dist,
        args.len,
        args.draws,
        &mut RngStream::new(args.seed).split("order-stats"),
    )?;
    let mut text = String::from("# order count frequency expected\n");
    for r in &stats.rows {
        let z: Vec<String> = r.z.iter().map(|p| p.to_string()).collect();
        writeln!(
            text,
            "{} {} {:.6} {:.6}",
            z.join(","),
            r.count,
            r.frequency,
            r.expected
        )
        .expect("string write");
    }
    writeln!(
        text,
        "# draws {} chi_square {:.6} df {} critical_0.001 {:.6} impossible {}",
        stats.draws, stats.chi_square, stats.df, stats.critical_001, stats.impossible
    )
    .expect("string write");
    if let Some(p) = &args.out {
        write_text(p, &text)?;
        write_resolved(&sibling_config(p), args)?;
    }
    Ok(text)
}

/// Writes `loss_split.dat`, `loss_curves.dat` and a gnuplot script into
/// `out_dir`.
pub fn plot(log: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_loss_log(log)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let split = out_dir.join("loss_split.dat");
    write_split_data(&split, &loss_split(&rows))?;
    let streams = rows.first().map_or(0, |r| r.per_stream.len());
    let mut curves = String::from("# step total");
    for n in 1..=streams {
        write!(curves, " stream_{n}").expect("string write");
    }
    curves.push('\n');
    for r in &rows {
        write!(curves, "{} {}", r.step, r.total).expect("string write");
        for v in &r.per_stream {
            write!(curves, " {v}").expect("string write");
        }
        curves.push('\n');
    }
    let curves_path = out_dir.join("loss_curves.dat");
    write_text(&curves_path, &curves)?;
    let script = "set terminal pngcairo size 900,400\n\
                  set output 'loss.png'\n\
                  set multiplot layout 1,2\n\
                  set xlabel 'epoch'\nset ylabel 'loss'\n\
                  plot 'loss_split.dat' using 1:2 with linespoints title 'loss-L2R', \
                  '' using 1:3 with linespoints title 'loss-URP'\n\
                  set xlabel 'step'\n\
                  plot 'loss_curves.dat' using 1:2 with lines title 'total'\n\
                  unset multiplot\n";
    let script_path = out_dir.join("loss.gp");
    write_text(&script_path, script)?;
    Ok(vec![split, curves_path, script_path])
}
