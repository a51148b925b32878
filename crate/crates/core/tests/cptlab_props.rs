use std::sync::Arc;

use boundary_lab::cptlab::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn vocab(n: usize) -> Arc<Vocab> {
    let mut v = Vocab::new();
    for i in 1..n {
        v.intern(&format!("w{i}"));
    }
    Arc::new(v)
}

fn random_model(rng: &mut impl Rng, v: &Arc<Vocab>, order: usize, n_seqs: usize) -> ToyLM {
    let mut m = ToyLM::new(order, rng.random_range(0.01..1.0), v.clone()).unwrap();
    for _ in 0..n_seqs {
        let seq: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(1..v.len() as u32)).collect();
        m.add_plain(&seq);
    }
    m
}

fn random_seq(rng: &mut impl Rng, v: &Vocab) -> Seq {
    let tokens = (0..rng.random_range(1..10)).map(|_| rng.random_range(1..v.len() as u32)).collect();
    Seq { tokens, domain: Domain::Music }
}

#[test]
fn weights_monotone_in_reference_probability() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let v = vocab(12);
    let qrm = random_model(&mut rng, &v, 2, 40);
    for _ in 0..1000 {
        let s = random_seq(&mut rng, &v);
        let w = qrm_weights(&s, &qrm, false).unwrap();
        for i in 0..s.tokens.len() {
            for j in 0..s.tokens.len() {
                let (pi, pj) = ((-w.qrm_nll[i]).exp(), (-w.qrm_nll[j]).exp());
                if pi > pj {
                    assert!(w.weights[i] > w.weights[j]);
                }
            }
        }
    }
}

#[test]
fn weighted_ce_matches_brute_force() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let v = vocab(9);
    let m = random_model(&mut rng, &v, 3, 30);
    for _ in 0..100 {
        let s = random_seq(&mut rng, &v);
        let mut ws = WeightedTokenSeq::plain(&s);
        ws.weights = (0..s.tokens.len()).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut brute = 0.0;
        for i in 0..s.tokens.len() {
            let ctx: Vec<u32> = (0..2).map(|k| if i + k >= 2 { s.tokens[i + k - 2] } else { BOS }).collect();
            brute -= ws.weights[i] * m.prob(&ctx, s.tokens[i]).ln();
        }
        brute /= s.tokens.len() as f64;
        assert!((weighted_ce(&ws, &m) - brute).abs() < 1e-12);
    }
}

#[test]
fn kl_nonnegative_and_matches_direct_sum() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
    let v = vocab(7);
    for _ in 0..1000 {
        let (a, b) = (random_model(&mut rng, &v, 2, 10), random_model(&mut rng, &v, 2, 10));
        let s = random_seq(&mut rng, &v);
        let kl = brm_kl(&a, &b, &s).unwrap();
        assert!(kl >= 0.0);
        let mut direct = 0.0;
        for i in 0..s.tokens.len() {
            let ctx = a.context(&s.tokens, i);
            for t in 0..v.len() as u32 {
                let (p, q) = (b.prob(&ctx, t), a.prob(&ctx, t));
                direct += p * (p / q).ln();
            }
        }
        assert!((kl - direct / s.tokens.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn accumulation_is_order_independent() {
    let c = build_corpora(4, &CorpusConfig::default()).unwrap();
    let cfg = CptConfig { objective: Objective::SoftScore, ratio: 1.0, ..Default::default() };
    let qrm = train_qrm(&c, &cfg).unwrap();
    let brm = train_brm(&c, &cfg).unwrap();
    let (ma, a) = train_toy(&c, &qrm, &brm, &cfg).unwrap();
    let mut shuffled = c.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    shuffled.music_train.shuffle(&mut rng);
    let (mb, b) = train_toy(&shuffled, &qrm, &brm, &cfg).unwrap();
    assert!((a.music_dev_loss - b.music_dev_loss).abs() < 1e-9);
    assert_eq!(a.probe_accuracy, b.probe_accuracy);
    for s in c.music_dev.iter().take(50) {
        for i in 0..s.tokens.len() {
            let ctx = ma.context(&s.tokens, i);
            assert!((ma.prob(&ctx, s.tokens[i]) - mb.prob(&ctx, s.tokens[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = CptConfig { objective: Objective::HardFilter, kl_coeff: 0.5, ..Default::default() };
    let corpus = CorpusConfig::default();
    assert_eq!(run_seed(2, &corpus, &cfg).unwrap(), run_seed(2, &corpus, &cfg).unwrap());
}

#[test]
fn sweep_minimum_music_loss_at_full_ratio() {
    let ratios = [0.2, 0.6, 1.0];
    let pts = mixture_sweep(&ratios, &[0], &CorpusConfig::default(), &CptConfig::default()).unwrap();
    let min = pts.iter().map(|p| p.music_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(pts[2].music_loss, min);
    assert!(mixture_sweep(&[0.5, 0.2], &[0], &CorpusConfig::default(), &CptConfig::default()).is_err());
}

#[test]
fn invalid_inputs_rejected() {
    let c = build_corpora(0, &CorpusConfig { n_general: 0, ..Default::default() }).unwrap();
    let cfg = CptConfig::default();
    let qrm = train_qrm(&c, &cfg).unwrap();
    let mut empty = c.clone();
    empty.music_train.clear();
    assert!(train_toy(&empty, &qrm, &qrm, &cfg).is_err());
    assert!(CptConfig { ratio: 0.0, ..Default::default() }.validate().is_err());
    assert!(CorpusConfig { noise_rate: 1.0, ..Default::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn distributions_sum_to_one(seed in 0u64..500, order in 1usize..4, c0 in 0u32..6, c1 in 0u32..6) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(6);
        let m = random_model(&mut rng, &v, order, 8);
        let ctx: Vec<u32> = [c0, c1].into_iter().take(order - 1).collect();
        let d = m.dist(&ctx);
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(d.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn weight_times_nll_is_one(seed in 0u64..500) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(8);
        let qrm = random_model(&mut rng, &v, 2, 12);
        let s = random_seq(&mut rng, &v);
        let w = qrm_weights(&s, &qrm, false).unwrap();
        prop_assert_eq!(w.weights.len(), s.tokens.len());
        for (c, x) in w.qrm_nll.iter().zip(&w.weights) {
            if *c > NLL_CLAMP {
                prop_assert!((c * x - 1.0).abs() < 1e-9);
            }
        }
        let n = qrm_weights(&s, &qrm, true).unwrap();
        prop_assert!((n.weights.iter().sum::<f64>() / n.weights.len() as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_zero_iff_equal(seed in 0u64..300) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = vocab(6);
        let a = random_model(&mut rng, &v, 2, 6);
        let s = random_seq(&mut rng, &v);
        prop_assert!(brm_kl(&a, &a, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn spearman_bounded(xs in proptest::collection::vec(-10.0f64..10.0, 3..20)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        if let Ok(r) = spearman(&xs, &xs) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }
}
