mod common;

use common::*;
use mfparse::eval::PunctMode;
use mfparse::pipeline::parse_corpus;
use mfparse::trainer::checkpoint;
use mfparse::trainer::{evaluate, train, TrainConfig};
use mfparse::tree::DecodeConfig;
use mfparse::Variant;

fn short(variant: Variant, iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(variant);
    c.max_iterations = iterations;
    c.eval_every = iterations;
    c
}

#[test]
fn one_sentence_is_memorized() {
    let data = toy_treebank();
    let one = vec![data.iter().max_by_key(|s| s.len()).unwrap().clone()];
    for v in Variant::ALL {
        let mut c = short(v, 200);
        c.eval_every = 50;
        let out = train(&one, &one, &c).unwrap();
        let score = evaluate(&out.params, &one, true, &PunctMode::None).unwrap();
        assert_eq!(score.uas, 100.0, "{}", v);
    }
}

#[test]
fn history_has_one_record_per_iteration() {
    let data = toy_treebank();
    let out = train(&data, &data[..5], &short(Variant::Single2O, 12)).unwrap();
    assert_eq!(out.history.len(), 12);
    for (idx, r) in out.history.iter().enumerate() {
        assert_eq!(r.iteration, idx + 1);
        assert!(r.loss.is_finite() && r.loss >= 0.0);
        assert!(r.tokens > 0 && r.sentences > 0);
    }
    assert!(out.history.last().unwrap().dev.is_some());
    assert!(!out.stopped_early);
}

#[test]
fn same_seed_same_model() {
    let data = toy_treebank();
    let a = train(&data, &[], &short(Variant::Local2O, 8)).unwrap();
    let b = train(&data, &[], &short(Variant::Local2O, 8)).unwrap();
    assert_eq!(checkpoint::to_bytes(&a.params), checkpoint::to_bytes(&b.params));
    assert_eq!(a.history, b.history);
    let mut other = short(Variant::Local2O, 8);
    other.seed += 1;
    let c = train(&data, &[], &other).unwrap();
    assert_ne!(checkpoint::to_bytes(&a.params), checkpoint::to_bytes(&c.params));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = toy_treebank();
    let out = train(&data, &[], &short(Variant::Single2O, 5)).unwrap();
    let dir = std::env::temp_dir().join(format!("mfparse-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.bin");
    checkpoint::save(&out.params, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), checkpoint::to_bytes(&out.params));
    let cfg = DecodeConfig::default();
    assert_eq!(
        parse_corpus(&back, &data, cfg).unwrap().0,
        parse_corpus(&out.params, &data, cfg).unwrap().0
    );
    let bytes = checkpoint::to_bytes(&out.params);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    assert!(checkpoint::from_bytes(b"not a model").is_err());
}

#[test]
fn second_order_without_iterations_is_first_order() {
    let data = toy_treebank();
    for (second, first) in [(Variant::Local2O, Variant::Local1O), (Variant::Single2O, Variant::Single1O)] {
        let mut c2 = short(second, 10);
        c2.iterations = 0;
        let a = train(&data, &data[..10], &c2).unwrap();
        let b = train(&data, &data[..10], &short(first, 10)).unwrap();
        assert_eq!(checkpoint::to_bytes(&a.params), checkpoint::to_bytes(&b.params), "{}", second);
        let cfg = DecodeConfig::default();
        assert_eq!(
            parse_corpus(&a.params, &data, cfg).unwrap().0,
            parse_corpus(&b.params, &data, cfg).unwrap().0
        );
    }
}
