use permdec::model::{Model, ModelConfig};
use permdec::numerics::{RngStream, Tensor};
use permdec::oracle::{permutations, vanilla_decoder_logits};
use permdec::order::{build_masks, DecodeOrder};
use permdec::Error;

fn random_tokens(len: usize, vocab: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..len)
        .map(|_| 5 + rng.below((vocab - 5) as u64) as usize)
        .collect()
}

fn softmax_sum(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).sum()
}

#[test]
fn encoder_shape_positions_and_determinism() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 1).unwrap();
    assert_eq!(m.encode(&[7]).unwrap().h.shape(), &[1, 16]);
    let a = m.encode(&[7, 9, 11]).unwrap();
    let b = m.encode(&[9, 7, 11]).unwrap();
    assert_ne!(a.h, b.h);
    assert_eq!(m.encode(&[7, 9, 11]).unwrap(), a);
    let long = vec![6; 17];
    assert!(matches!(m.encode(&long), Err(Error::Length { len: 17, max: 16 })));
}

#[test]
fn identity_order_single_stream_matches_vanilla_decoder() {
    let mut rng = RngStream::new(42);
    for case in 0..5 {
        let mut cfg = ModelConfig::tiny();
        cfg.streams = 1;
        cfg.tie_embeddings = case % 2 == 0;
        let m = Model::<f64>::new(cfg.clone(), case).unwrap();
        let src = random_tokens(1 + rng.below(6) as usize, cfg.vocab_size, &mut rng);
        let y = random_tokens(1 + rng.below(6) as usize, cfg.vocab_size, &mut rng);
        let masks = build_masks(&DecodeOrder::identity(y.len()), 1).unwrap();
        let logits = m.forward(&src, &y, &masks).unwrap();
        let oracle = vanilla_decoder_logits(m.params(), &cfg, &src, &y).unwrap();
        for (t, row) in oracle.iter().enumerate() {
            for (v, &o) in row.iter().enumerate() {
                assert!((logits[0].get(t, v) - o).abs() < 1e-9, "case {case} t {t}");
            }
        }
    }
}

#[test]
fn stream_distributions_normalize() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 2).unwrap();
    let masks = build_masks(&DecodeOrder::parse("3 1 4 2").unwrap(), 2).unwrap();
    let logits = m.forward(&[6, 7, 8], &[9, 10, 11, 12], &masks).unwrap();
    for l in &logits {
        for t in 0..4 {
            assert!((softmax_sum(l.row(t)) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn logits_never_see_tokens_outside_their_context() {
    let cfg = ModelConfig::tiny();
    let m = Model::<f32>::new(cfg.clone(), 5).unwrap();
    let mut rng = RngStream::new(9);
    for t_len in 1..=4 {
        for z in permutations(t_len) {
            let order = DecodeOrder::new(z.clone(), permdec::order::Branch::URP).unwrap();
            let masks = build_masks(&order, 2).unwrap();
            let src = random_tokens(3, cfg.vocab_size, &mut rng);
            let y = random_tokens(t_len, cfg.vocab_size, &mut rng);
            let base = m.forward(&src, &y, &masks).unwrap();
            for n in 1..=2 {
                for t in 1..=t_len {
                    let mut y2 = y.clone();
                    for (step, &pos) in z.iter().enumerate() {
                        if step + 1 + n > t {
                            y2[pos - 1] = 5 + (y2[pos - 1] - 5 + 1) % (cfg.vocab_size - 5);
                        }
                    }
                    let out = m.forward(&src, &y2, &masks).unwrap();
                    assert_eq!(
                        out[n - 1].row(t - 1),
                        base[n - 1].row(t - 1),
                        "z {z:?} n {n} t {t}"
                    );
                }
            }
        }
    }
}

#[test]
fn single_token_target_is_identical_across_streams() {
    let mut m = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    let masks = build_masks(&DecodeOrder::identity(1), 2).unwrap();
    assert_eq!(masks.query[0], masks.query[1]);
    // Streams differ only through their placeholder rows; equalize them.
    let id = m.params().id("embed.placeholders").unwrap();
    let ph = &mut m.params_mut().get_mut(id).value;
    let first = ph.row(0).to_vec();
    ph.data_mut()[16..32].copy_from_slice(&first);
    let logits = m.forward(&[6, 7], &[8], &masks).unwrap();
    assert_eq!(logits[0], logits[1]);
}

#[test]
fn placeholders_are_additive() {
    let m = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
    let order = DecodeOrder::parse("2 3 1").unwrap();
    let a = m.placeholder_embed(1, 1, &order).unwrap();
    let b = m.placeholder_embed(2, 1, &order).unwrap();
    let c = m.placeholder_embed(1, 2, &order).unwrap();
    let p = m.params();
    let pos = p.value(p.id("embed.dec_pos").unwrap());
    let ph = p.value(p.id("embed.placeholders").unwrap());
    for j in 0..16 {
        assert!(((a[j] - b[j]) - (pos.get(2, j) - pos.get(3, j))).abs() < 1e-12);
        assert!(((c[j] - a[j]) - (ph.get(1, j) - ph.get(0, j))).abs() < 1e-12);
    }
    assert_eq!(a, m.placeholder_embed(1, 1, &order).unwrap());
    assert!(m.placeholder_embed(1, 3, &order).is_err());
}

fn incremental_matches_full(cfg: ModelConfig, seed: u64) {
    let m = Model::<f32>::new(cfg.clone(), seed).unwrap();
    let mut rng = RngStream::new(seed);
    let src = random_tokens(4, cfg.vocab_size, &mut rng);
    let y = random_tokens(6, cfg.vocab_size, &mut rng);
    let masks = build_masks(&DecodeOrder::identity(6), cfg.streams).unwrap();
    let full = m.forward(&src, &y, &masks).unwrap();
    let enc = m.encode(&src).unwrap();
    let mut cache = m.start_decoding(&enc).unwrap();
    for t in 0..6 {
        let step = m.incremental_step(&y[..t], &cache).unwrap();
        for (v, &s) in step.iter().enumerate() {
            assert!((s - full[0].get(t, v)).abs() < 1e-5);
        }
        cache = m.extend(&cache, y[t]).unwrap();
    }
}

#[test]
fn incremental_steps_match_teacher_forcing() {
    incremental_matches_full(ModelConfig::tiny(), 11);
    let mut cfg = ModelConfig::tiny();
    cfg.share_stream_params = false;
    cfg.tie_embeddings = false;
    cfg.layers = 3;
    incremental_matches_full(cfg, 12);
}

#[test]
fn cache_is_functional() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 6).unwrap();
    let enc = m.encode(&[6, 7, 8]).unwrap();
    let root = m.extend(&m.start_decoding(&enc).unwrap(), 9).unwrap();
    let snapshot = root.clone();
    let a = m.extend(&root, 10).unwrap();
    let b = m.extend(&root, 11).unwrap();
    assert_eq!(root, snapshot);
    assert_eq!(a.tokens(), &[9, 10]);
    assert_eq!(b.tokens(), &[9, 11]);
    assert_eq!(m.next_logits(&root).unwrap(), m.next_logits(&snapshot).unwrap());
    assert!(matches!(
        m.incremental_step(&[9, 10], &b),
        Err(Error::Consistency(_))
    ));
    // Empty prefix conditions only on <s> and the source.
    let first = m.next_logits(&m.start_decoding(&enc).unwrap()).unwrap();
    let masks = build_masks(&DecodeOrder::identity(1), 2).unwrap();
    let full = m.decoder_forward(&enc, &[12], &masks).unwrap();
    assert_eq!(Tensor::new(vec![1, 20], first).unwrap().row(0), full[0].row(0));
}

#[test]
fn mismatched_masks_are_rejected() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 7).unwrap();
    let masks = build_masks(&DecodeOrder::identity(3), 2).unwrap();
    assert!(matches!(
        m.forward(&[6], &[7, 8], &masks),
        Err(Error::Consistency(_))
    ));
    let one = build_masks(&DecodeOrder::identity(2), 1).unwrap();
    assert!(matches!(
        m.forward(&[6], &[7, 8], &one),
        Err(Error::Consistency(_))
    ));
}
