use permdec::data::{gen_synthetic, make_instance, Batch, Example, Instance, Task};
use permdec::model::{Model, ModelConfig};
use permdec::numerics::gradcheck::sample_coords;
use permdec::numerics::{grad_check, RngStream};
use permdec::oracle::vanilla_nll;
use permdec::order::{DecodeOrder, OrderDistribution};
use permdec::training::{
    batch_loss, batch_loss_on, read_loss_log, train, Control, Parallelism, TrainingConfig,
};
use permdec::Error;

fn batch(examples: &[Example], dist: OrderDistribution, r: usize, seed: u64) -> Batch {
    let mut rng = RngStream::new(seed);
    let inst: Vec<Instance> = examples
        .iter()
        .map(|e| make_instance(e, dist, r, &mut rng).unwrap())
        .collect();
    Batch::from_instances(&inst).unwrap()
}

fn examples(n: usize, vocab: usize, seed: u64) -> Vec<Example> {
    gen_synthetic(Task::Reverse, vocab, (2, 4), n, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn single_stream_l2r_loss_matches_vanilla_cross_entropy() {
    let mut cfg = ModelConfig::tiny();
    cfg.streams = 1;
    let m = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let ex = examples(4, cfg.vocab_size, 1);
    let b = batch(&ex, OrderDistribution::L2R, 1, 2);
    let (rep, _) = batch_loss(
        &m,
        &b,
        OrderDistribution::L2R,
        Parallelism::Sequential,
        false,
        None,
    )
    .unwrap();
    let mut nll = 0.0;
    let mut tokens = 0;
    for i in 0..b.len() {
        let inst = b.instance(i);
        nll += vanilla_nll(m.params(), &cfg, &inst.source, &inst.target).unwrap();
        tokens += inst.target.len();
    }
    let oracle = nll / tokens as f64;
    assert!((rep.total - oracle).abs() < 1e-6, "{} vs {oracle}", rep.total);
    assert!((rep.per_stream[0] - oracle).abs() < 1e-6);
    assert_eq!(rep.loss_l2r, Some(rep.total));
    assert_eq!(rep.loss_urp, None);
    assert_eq!(rep.log_prior_mean, 0.0);
}

#[test]
fn total_is_mean_of_streams_and_branches_split() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let ex = examples(8, 20, 2);
    let dist = OrderDistribution::Alpha(0.5);
    let b = batch(&ex, dist, 2, 3);
    let (rep, _) = batch_loss(&m, &b, dist, Parallelism::Sequential, false, None).unwrap();
    assert!((rep.total - (rep.per_stream[0] + rep.per_stream[1]) / 2.0).abs() < 1e-12);
    assert_eq!(rep.count_l2r + rep.count_urp, 16);
    let tokens: usize = (0..b.len()).map(|i| b.target_lens[i]).sum();
    assert_eq!(rep.tokens_l2r + rep.tokens_urp, 2 * tokens);
    let weighted = rep.loss_l2r.unwrap_or(0.0) * rep.tokens_l2r as f64
        + rep.loss_urp.unwrap_or(0.0) * rep.tokens_urp as f64;
    assert!((weighted / (2 * tokens) as f64 - rep.total).abs() < 1e-12);
}

#[test]
fn single_token_targets_give_equal_stream_losses() {
    let mut m = Model::<f64>::new(ModelConfig::tiny(), 5).unwrap();
    let id = m.params().id("embed.placeholders").unwrap();
    let ph = &mut m.params_mut().get_mut(id).value;
    let row = ph.row(0).to_vec();
    ph.data_mut()[16..].copy_from_slice(&row);
    let inst = Instance {
        source: vec![6, 7, 1],
        target: vec![1],
        orders: vec![DecodeOrder::identity(1)],
    };
    let b = Batch::from_instances(&[inst]).unwrap();
    let (rep, _) = batch_loss(
        &m,
        &b,
        OrderDistribution::URP,
        Parallelism::Sequential,
        false,
        None,
    )
    .unwrap();
    assert_eq!(rep.per_stream[0], rep.per_stream[1]);
}

#[test]
fn padding_instances_do_not_change_the_loss() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 6).unwrap();
    let ex = examples(3, 20, 4);
    let dist = OrderDistribution::URP;
    let b = batch(&ex, dist, 1, 5);
    let mut inst: Vec<Instance> = (0..b.len()).map(|i| b.instance(i)).collect();
    let (a, ga) = batch_loss(&m, &b, dist, Parallelism::Sequential, true, None).unwrap();
    inst.push(Instance {
        source: vec![6, 6, 6, 6, 6, 6, 1],
        target: vec![],
        orders: vec![],
    });
    let padded = Batch::from_instances(&inst).unwrap();
    let (p, gp) = batch_loss(&m, &padded, dist, Parallelism::Sequential, true, None).unwrap();
    assert_eq!(a, p);
    let (ga, gp) = (ga.unwrap(), gp.unwrap());
    for i in 0..m.params().len() {
        let id = permdec::numerics::ParamId(i);
        assert_eq!(ga.get(id), gp.get(id));
    }
}

#[test]
fn vocabulary_relabeling_leaves_loss_unchanged() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let ex = examples(4, 20, 6);
    // swap two regular symbols everywhere, including embedding rows
    let (a, b_) = (7usize, 13usize);
    let swap = |t: usize| {
        if t == a {
            b_
        } else if t == b_ {
            a
        } else {
            t
        }
    };
    let ex2: Vec<Example> = ex
        .iter()
        .map(|e| Example {
            source: e.source.iter().map(|&t| swap(t)).collect(),
            target: e.target.iter().map(|&t| swap(t)).collect(),
        })
        .collect();
    let mut m2 = m.clone();
    let id = m2.params().id("embed.tokens").unwrap();
    let emb = &mut m2.params_mut().get_mut(id).value;
    let (ra, rb) = (emb.row(a).to_vec(), emb.row(b_).to_vec());
    emb.data_mut()[a * 16..(a + 1) * 16].copy_from_slice(&rb);
    emb.data_mut()[b_ * 16..(b_ + 1) * 16].copy_from_slice(&ra);
    let dist = OrderDistribution::URP;
    let (l1, _) = batch_loss(
        &m,
        &batch(&ex, dist, 1, 9),
        dist,
        Parallelism::Sequential,
        false,
        None,
    )
    .unwrap();
    let (l2, _) = batch_loss(
        &m2,
        &batch(&ex2, dist, 1, 9),
        dist,
        Parallelism::Sequential,
        false,
        None,
    )
    .unwrap();
    assert!((l1.total - l2.total).abs() < 1e-12);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 8).unwrap();
    let ex = examples(16, 20, 7);
    let dist = OrderDistribution::default();
    let b = batch(&ex, dist, 2, 8);
    let (rs, gs) = batch_loss(&m, &b, dist, Parallelism::Sequential, true, None).unwrap();
    let (rp, gp) = batch_loss(&m, &b, dist, Parallelism::Parallel, true, None).unwrap();
    assert_eq!(rs, rp);
    let (gs, gp) = (gs.unwrap(), gp.unwrap());
    for i in 0..m.params().len() {
        let id = permdec::numerics::ParamId(i);
        assert_eq!(gs.get(id), gp.get(id));
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f64>::new(cfg, 9).unwrap();
    let inst = Instance {
        source: vec![6, 9, 12, 1],
        target: vec![8, 15, 11, 19, 1],
        orders: vec![DecodeOrder::parse("3 1 5 2 4").unwrap()],
    };
    let b = Batch::from_instances(&[inst]).unwrap();
    let coords = sample_coords(m.params(), 60, &mut RngStream::new(1));
    let report = grad_check(m.params(), |t| batch_loss_on(t, &m, &b), &coords, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn nan_parameters_are_numeric_errors() {
    let mut m = Model::<f32>::new(ModelConfig::tiny(), 10).unwrap();
    let id = m.params().id("dec.0.s0.ffn.b1").unwrap();
    m.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
    let b = batch(&examples(2, 20, 1), OrderDistribution::L2R, 1, 1);
    let err = batch_loss(
        &m,
        &b,
        OrderDistribution::L2R,
        Parallelism::Sequential,
        false,
        None,
    )
    .unwrap_err();
    match err {
        Error::Numeric { op } => assert!(op.contains("instance 0"), "{op}"),
        e => panic!("{e}"),
    }
}

fn copy_data(n: usize, seed: u64) -> Vec<Example> {
    gen_synthetic(Task::Copy, 20, (2, 6), n, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    let init = m.clone();
    let cfg = TrainingConfig {
        max_steps: Some(0),
        ..Default::default()
    };
    let out = train(&mut m, &copy_data(10, 1), &cfg, Some(dir.path()), |_, _| {
        Ok(Control::Continue)
    })
    .unwrap();
    assert_eq!(out.steps, 0);
    let back = Model::<f32>::load(&dir.path().join("epoch-0.ckpt")).unwrap();
    assert_eq!(back.params().named_values(), init.params().named_values());
    assert!(read_loss_log(&dir.path().join("loss.csv")).unwrap().is_empty());
}

#[test]
fn training_is_deterministic_and_checkpoints_each_epoch() {
    let data = copy_data(40, 2);
    let run = |dir: &std::path::Path| {
        let mut cfg_m = ModelConfig::tiny();
        cfg_m.dropout = 0.1;
        let mut m = Model::<f32>::new(cfg_m, 3).unwrap();
        let cfg = TrainingConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 2,
            ..Default::default()
        };
        train(&mut m, &data, &cfg, Some(dir), |_, _| Ok(Control::Continue)).unwrap();
        std::fs::read(dir.join("loss.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = run(a.path());
    assert_eq!(la, run(b.path()));
    for e in 0..=2 {
        assert!(a.path().join(format!("epoch-{e}.ckpt")).exists());
    }
    let rows = read_loss_log(&a.path().join("loss.csv")).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.last().unwrap().epoch, 2);
}

#[test]
fn divergence_aborts_training() {
    let mut m = Model::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let id = m.params().id("embed.tokens").unwrap();
    m.params_mut().get_mut(id).value.scale_assign(1e6);
    let cfg = TrainingConfig {
        batch_size: 4,
        ..Default::default()
    };
    let err = train(&mut m, &copy_data(8, 3), &cfg, None, |_, _| Ok(Control::Continue)).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

/// Mean of each 10-step window over the first 50 steps is non-increasing.
#[test]
fn copy_task_loss_falls_over_first_fifty_steps() {
    let data = copy_data(400, 5);
    let mut passing = 0;
    for seed in 0..10 {
        let mut m = Model::<f32>::new(ModelConfig::tiny(), seed).unwrap();
        let cfg = TrainingConfig {
            lr: 3e-3,
            batch_size: 8,
            max_steps: Some(50),
            seed,
            ..Default::default()
        };
        let mut losses = Vec::new();
        train(&mut m, &data, &cfg, None, |r, _| {
            losses.push(r.report.total);
            Ok(Control::Continue)
        })
        .unwrap();
        let means: Vec<f64> = losses
            .chunks(10)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        if means.windows(2).all(|w| w[1] <= w[0]) {
            passing += 1;
        }
    }
    assert!(passing >= 9, "only {passing}/10 seeds decreased");
}
