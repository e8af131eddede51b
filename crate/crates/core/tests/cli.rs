use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use permdec::model::{Model, ModelConfig};
use permdec::oracle::brute_force_masks;
use permdec::order::{dump_masks, parse_masks, DecodeOrder};

fn permdec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permdec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = permdec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    permdec(dir, args).status.code().unwrap()
}

fn gen_small(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data",
            "out_dir=data",
            "vocab_size=16",
            "min_len=3",
            "max_len=8",
            "train_count=3000",
            "valid_count=100",
            "corpus_lines=1000",
            "corpus_max_len=128",
            "seed=3",
        ],
    );
}

#[test]
fn pretrain_writes_parseable_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    assert_eq!(
        fs::read_to_string(d.join("data/corpus.txt"))
            .unwrap()
            .lines()
            .count(),
        1000
    );
    ok(
        d,
        &[
            "pretrain",
            "corpus=data/corpus.txt",
            "out_dir=pre",
            "train.max_steps=200",
            "train.batch_size=4",
            "train.lr=1e-3",
        ],
    );
    let m = Model::<f32>::load(&d.join("pre/last.ckpt")).unwrap();
    assert_eq!(m.config().max_positions, 66);
    let rows = permdec::training::read_loss_log(&d.join("pre/loss.csv")).unwrap();
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r.total.is_finite()));
    assert!(d.join("pre/epoch-0.ckpt").exists());
    let resolved = fs::read_to_string(d.join("pre/config.toml")).unwrap();
    assert!(resolved.contains("max_steps = 200") && resolved.contains("[span]"));
}

#[test]
fn finetune_generate_and_score_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    ok(
        d,
        &[
            "finetune",
            "train_data=data/train.tsv",
            "valid_data=data/valid.tsv",
            "vocab=data/vocab.txt",
            "out_dir=ft",
            "train.epochs=100",
            "train.max_steps=1200",
            "train.batch_size=16",
            "train.lr=3e-3",
            "train.warmup=100",
        ],
    );
    let valid = fs::read_to_string(d.join("data/valid.tsv")).unwrap();
    let sources: Vec<&str> = valid.lines().map(|l| l.split('\t').next().unwrap()).collect();
    fs::write(d.join("src.txt"), sources.join("\n") + "\n").unwrap();
    ok(
        d,
        &[
            "generate",
            "checkpoint=ft/last.ckpt",
            "vocab=data/vocab.txt",
            "input=src.txt",
            "output=hyp.txt",
            "with_score=true",
            "beam.beam=3",
        ],
    );
    let hyp = fs::read_to_string(d.join("hyp.txt")).unwrap();
    let lines: Vec<(&str, f64)> = hyp
        .lines()
        .map(|l| {
            let (h, s) = l.split_once('\t').unwrap();
            (h, s.parse().unwrap())
        })
        .collect();
    assert_eq!(lines.len(), sources.len());
    let copied = lines.iter().zip(&sources).filter(|((h, _), s)| h == *s).count();
    assert!(copied * 100 >= 99 * sources.len(), "{copied}/{}", sources.len());
    assert!(d.join("hyp.txt.config.toml").exists());

    let pairs: String = sources
        .iter()
        .zip(&lines)
        .map(|(s, (h, _))| format!("{s}\t{h}\n"))
        .collect();
    fs::write(d.join("pairs.tsv"), pairs).unwrap();
    ok(
        d,
        &[
            "score",
            "checkpoint=ft/last.ckpt",
            "vocab=data/vocab.txt",
            "input=pairs.tsv",
            "output=scores.txt",
        ],
    );
    let scores: Vec<f64> = fs::read_to_string(d.join("scores.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    for ((_, g), s) in lines.iter().zip(&scores) {
        assert!((g - s).abs() < 1e-4, "{g} vs {s}");
        assert!(*s <= 0.0);
    }
    let metrics = fs::read_to_string(d.join("ft/metrics.toml")).unwrap();
    assert!(metrics.contains("exact_match"));
}

#[test]
fn mask_dump_matches_oracle_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "mask-dump",
            "--order",
            "2 1 3",
            "--streams",
            "2",
            "--out",
            "m.txt",
        ],
    );
    let text = fs::read_to_string(d.join("m.txt")).unwrap();
    let oracle = brute_force_masks(&DecodeOrder::parse("2 1 3").unwrap(), 2);
    assert_eq!(parse_masks(&text).unwrap(), oracle);
    assert_eq!(dump_masks(&parse_masks(&text).unwrap()), text);
    ok(d, &["mask-dump", "--verify", "m.txt"]);
    assert!(d.join("m.txt.config.toml").exists());

    let one = ok(d, &["mask-dump", "--len", "1", "--streams", "1"]);
    let m = parse_masks(&one).unwrap();
    assert_eq!(m.main.rows(), 2);
    assert_eq!(m.main.allowed(0).collect::<Vec<_>>(), vec![0]);
    assert_eq!(m.main.allowed(1).collect::<Vec<_>>(), vec![0, 1]);

    let sampled = ok(d, &["mask-dump", "--len", "4", "--dist", "urp", "--seed", "9"]);
    assert_eq!(
        sampled,
        ok(d, &["mask-dump", "--len", "4", "--dist", "urp", "--seed", "9"])
    );

    // flip one entry of a valid dump
    let tampered = text.replacen("1 0 1 0 0 1 0", "1 1 1 0 0 1 0", 1);
    assert_ne!(tampered, text);
    fs::write(d.join("bad.txt"), tampered).unwrap();
    assert_eq!(code(d, &["mask-dump", "--verify", "bad.txt"]), 2);
    assert_eq!(code(d, &["mask-dump", "--order", "1 1 3"]), 2);
}

#[test]
fn order_stats_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let l2r = ok(
        d,
        &["order-stats", "--dist", "l2r", "--len", "3", "--draws", "500"],
    );
    let rows: Vec<&str> = l2r.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows, vec!["1,2,3 500 1.000000 1.000000"]);
    let urp = ok(
        d,
        &[
            "order-stats",
            "--dist",
            "urp",
            "--len",
            "3",
            "--seed",
            "1",
            "--out",
            "s.txt",
        ],
    );
    assert_eq!(urp, fs::read_to_string(d.join("s.txt")).unwrap());
    let last = urp.lines().last().unwrap();
    let field = |k: &str| -> f64 {
        let parts: Vec<&str> = last.split_whitespace().collect();
        let i = parts.iter().position(|p| *p == k).unwrap();
        parts[i + 1].parse().unwrap()
    };
    assert!(field("chi_square") < field("critical_0.001"));
    assert_eq!(field("df"), 5.0);
    let alpha = ok(
        d,
        &["order-stats", "--dist", "alpha:0.5", "--len", "3", "--seed", "2"],
    );
    let ident: f64 = alpha
        .lines()
        .find(|l| l.starts_with("1,2,3 "))
        .unwrap()
        .split(' ')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!((ident - (0.5 + 0.5 / 6.0)).abs() <= 0.01);
}

#[test]
fn selfcheck_prints_one_passing_line_per_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["selfcheck", "--seed", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{out}");
    assert_eq!(out, ok(dir.path(), &["selfcheck", "--seed", "1"]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["no-such-command"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["gen-data", "out_dir=x", "colour=blue"]), 1);
    assert_eq!(code(d, &["gen-data", "out_dir=x", "train.lr"]), 1);
    assert_eq!(code(d, &["gen-data", "out_dir=x", "vocab_size=4"]), 1);
    assert_eq!(code(d, &["pretrain", "corpus=missing.txt", "out_dir=p"]), 2);
    fs::write(d.join("bad.tsv"), "w5 w6\n").unwrap();
    fs::write(d.join("v.txt"), "w5\nw6\n").unwrap();
    assert_eq!(
        code(d, &["finetune", "train_data=bad.tsv", "vocab=v.txt", "out_dir=f"]),
        2
    );

    // a checkpoint holding NaN weights makes training fail numerically
    let mut m = Model::<f32>::new(ModelConfig::tiny(), 0).unwrap();
    let id = m.params().id("embed.tokens").unwrap();
    m.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
    m.save(&d.join("nan.ckpt")).unwrap();
    let vocab: String = (5..20).map(|i| format!("w{i}\n")).collect();
    fs::write(d.join("vocab20.txt"), vocab).unwrap();
    fs::write(d.join("ok.tsv"), "w5 w6\tw5 w6\n").unwrap();
    assert_eq!(
        code(
            d,
            &[
                "finetune",
                "train_data=ok.tsv",
                "vocab=vocab20.txt",
                "init=nan.ckpt",
                "out_dir=f"
            ]
        ),
        3
    );
}

#[test]
fn config_file_with_overrides_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "out_dir = \"data\"\ntask = \"infill\"\nvocab_size = 20\ntrain_count = 64\nvalid_count = 8\n",
    )
    .unwrap();
    ok(d, &["gen-data", "-c", "run.toml", "task=reverse", "seed=4"]);
    let resolved = fs::read_to_string(d.join("data/config.toml")).unwrap();
    assert!(resolved.contains("task = \"reverse\"") && resolved.contains("seed = 4"));
    ok(
        d,
        &[
            "finetune",
            "train_data=data/train.tsv",
            "vocab=data/vocab.txt",
            "out_dir=ft",
            "train.epochs=2",
            "train.batch_size=8",
            "train.order=urp",
        ],
    );
    ok(d, &["plot", "--log", "ft/loss.csv"]);
    let split = fs::read_to_string(d.join("ft/loss_split.dat")).unwrap();
    assert!(split.starts_with("# epoch loss_l2r loss_urp\n1 NaN "));
    assert_eq!(split.lines().count(), 3);
    assert!(d.join("ft/loss_curves.dat").exists() && d.join("ft/loss.gp").exists());
}
