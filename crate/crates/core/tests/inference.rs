use permdec::data::vocab::EOS;
use permdec::inference::{beam_search, generate, greedy, score_sequence, BeamConfig, ModelScorer, Scorer};
use permdec::model::{Model, ModelConfig};
use permdec::numerics::RngStream;
use permdec::oracle::{enumerate_ranked, permutations, PrefixTable};
use permdec::order::DecodeOrder;
use permdec::training::Parallelism;
use permdec::Error;

fn cfg(beam: usize, gamma: f64, min_len: usize, max_len: usize) -> BeamConfig {
    BeamConfig {
        beam,
        length_penalty: gamma,
        min_len,
        max_len,
    }
}

/// Three symbols, `1` is `</s>`; one path dominates every step.
fn dominant_path() -> PrefixTable {
    PrefixTable::from_fn(3, 4, |p| match p {
        [] => vec![0.0, -3.0, 2.0],
        [2] => vec![2.0, -3.0, 0.0],
        [2, 0] => vec![-1.0, 3.0, -1.0],
        _ => vec![0.0, 0.0, 0.0],
    })
}

/// The greedy first choice leads to a flat continuation; the runner-up
/// leads to a confident one.
fn garden_path() -> PrefixTable {
    PrefixTable::from_fn(3, 4, |p| match p {
        [] => vec![0.3, -4.0, 0.0],
        [0] => vec![0.0, 0.0, 0.0],
        [2] => vec![-3.0, -3.0, 4.0],
        [2, 2] => vec![-3.0, 5.0, -3.0],
        _ => vec![0.0, 0.0, 0.0],
    })
}

#[test]
fn hand_scored_table_matches_enumeration_for_beams_one_to_three() {
    let t = dominant_path();
    for gamma in [0.0, 1.2] {
        let best = &enumerate_ranked(&t, 0, 4, gamma).unwrap()[0];
        assert_eq!(best.0, vec![2, 0, EOS]);
        for b in 1..=3 {
            let h = &beam_search(&t, &cfg(b, gamma, 0, 4)).unwrap()[0];
            assert_eq!(h.tokens, best.0, "beam {b}");
            assert!((h.score - best.1).abs() < 1e-12);
            assert!(!h.truncated);
        }
    }
}

#[test]
fn wider_beam_escapes_the_garden_path() {
    let t = garden_path();
    let best = &enumerate_ranked(&t, 0, 4, 1.2).unwrap()[0];
    assert_eq!(best.0, vec![2, 2, EOS]);
    let b1 = &beam_search(&t, &cfg(1, 1.2, 0, 4)).unwrap()[0];
    assert_eq!(b1.tokens[0], 0);
    for b in 2..=3 {
        assert_eq!(beam_search(&t, &cfg(b, 1.2, 0, 4)).unwrap()[0].tokens, best.0);
    }
}

#[test]
fn beam_one_is_greedy_and_no_beam_beats_enumeration() {
    let mut rng = RngStream::new(11);
    for case in 0..300 {
        let v = 3 + case % 3;
        let max_len = 1 + case % 4;
        let min_len = case % 2;
        let t = PrefixTable::random(v, max_len, 3.0, &mut rng);
        let g = greedy(&t, min_len, max_len, 1.2).unwrap();
        let b1 = beam_search(&t, &cfg(1, 1.2, min_len, max_len)).unwrap();
        assert_eq!(b1.len(), 1);
        assert_eq!(b1[0], g);
        let ranked = enumerate_ranked(&t, min_len, max_len, 1.2).unwrap();
        for b in 1..=v {
            for h in beam_search(&t, &cfg(b, 1.2, min_len, max_len)).unwrap() {
                assert!((t.log_prob(&h.tokens).unwrap() - h.logp).abs() < 1e-12);
                assert!(h.tokens.len() <= max_len && h.content().len() >= min_len.min(max_len));
                assert!(!h.content().contains(&EOS));
                if !h.truncated {
                    assert!(h.score <= ranked[0].1 + 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_penalty_ranks_by_log_probability() {
    let mut rng = RngStream::new(3);
    for _ in 0..50 {
        let t = PrefixTable::random(4, 3, 2.0, &mut rng);
        let hyps = beam_search(&t, &cfg(4, 0.0, 0, 3)).unwrap();
        for h in &hyps {
            assert_eq!(h.score, h.logp);
        }
        assert!(hyps.windows(2).all(|w| w[0].logp >= w[1].logp));
    }
}

#[test]
fn length_limits_are_honoured() {
    let t = PrefixTable::from_fn(3, 3, |_| vec![0.0, 5.0, 0.0]);
    let h = &beam_search(&t, &cfg(2, 1.2, 2, 3)).unwrap()[0];
    assert_eq!(h.tokens.len(), 3);
    assert_eq!(h.tokens[2], EOS);
    let trunc = beam_search(&t, &cfg(2, 1.2, 3, 3)).unwrap();
    assert!(trunc.iter().all(|h| h.truncated && h.tokens.len() == 3));
    assert!(matches!(
        beam_search(&t, &cfg(4, 1.2, 0, 3)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        beam_search(&t, &cfg(1, 1.2, 4, 3)),
        Err(Error::Config(_))
    ));
}

#[test]
fn equal_scores_break_ties_by_token_ids() {
    let t = PrefixTable::from_fn(4, 2, |p| match p {
        [] => vec![0.0, -50.0, 0.0, 0.0],
        _ => vec![-50.0, 0.0, -50.0, -50.0],
    });
    let hyps = beam_search(&t, &cfg(3, 1.0, 1, 2)).unwrap();
    let toks: Vec<_> = hyps.iter().map(|h| h.tokens.clone()).collect();
    assert_eq!(toks, vec![vec![0, EOS], vec![2, EOS], vec![3, EOS]]);
}

fn trained_like(seed: u64) -> Model<f64> {
    Model::new(ModelConfig::tiny(), seed).unwrap()
}

#[test]
fn identity_score_equals_summed_incremental_log_probs() {
    let m = trained_like(1);
    let src = vec![6, 7, 8, EOS];
    let y = vec![9, 10, 11, EOS];
    let scorer = ModelScorer::new(&m, &src).unwrap();
    let mut st = scorer.start().unwrap();
    let mut sum = 0.0;
    for &tok in &y {
        sum += scorer.log_probs(&st).unwrap()[tok];
        st = scorer.advance(&st, tok).unwrap();
    }
    let s = score_sequence(&m, &src, &y, &DecodeOrder::identity(4), 1).unwrap();
    assert!((s - sum).abs() < 1e-9, "{s} vs {sum}");
    for z in permutations(4) {
        let o = DecodeOrder::new(z, permdec::order::Branch::URP).unwrap();
        for n in 1..=2 {
            assert!(score_sequence(&m, &src, &y, &o, n).unwrap() <= 0.0);
        }
    }
}

#[test]
fn single_token_score_is_order_and_stream_free() {
    let mut m = trained_like(2);
    let id = m.params().id("embed.placeholders").unwrap();
    let ph = &mut m.params_mut().get_mut(id).value;
    let row = ph.row(0).to_vec();
    ph.data_mut()[16..].copy_from_slice(&row);
    let s1 = score_sequence(&m, &[6, EOS], &[EOS], &DecodeOrder::identity(1), 1).unwrap();
    let s2 = score_sequence(&m, &[6, EOS], &[EOS], &DecodeOrder::identity(1), 2).unwrap();
    assert_eq!(s1, s2);
    assert!(score_sequence(&m, &[6], &[], &DecodeOrder::identity(1), 1).is_err());
    assert!(matches!(
        score_sequence(&m, &[6], &[7], &DecodeOrder::identity(1), 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn model_beam_one_is_greedy_and_decoding_is_deterministic() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    for src in [vec![6, 7, EOS], vec![9, 9, 12, 15, EOS]] {
        let scorer = ModelScorer::new(&m, &src).unwrap();
        let g = greedy(&scorer, 0, 6, 1.2).unwrap();
        assert_eq!(beam_search(&scorer, &cfg(1, 1.2, 0, 6)).unwrap()[0], g);
        let b = beam_search(&scorer, &cfg(4, 1.2, 2, 6)).unwrap();
        assert_eq!(b, beam_search(&scorer, &cfg(4, 1.2, 2, 6)).unwrap());
        assert!(b
            .iter()
            .all(|h| h.tokens.iter().all(|&t| t != 0 && t != 2 && t != 3)));
    }
}

#[test]
fn parallel_generation_matches_sequential() {
    let m = Model::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let sources: Vec<Vec<usize>> = (0..8).map(|i| vec![5 + i, 6 + i, EOS]).collect();
    let c = cfg(3, 1.2, 0, 5);
    assert_eq!(
        generate(&m, &sources, &c, Parallelism::Parallel).unwrap(),
        generate(&m, &sources, &c, Parallelism::Sequential).unwrap()
    );
}
