#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mfparse::conllu::{read_conllu, Sentence, Token};
use mfparse::pipeline::{sentence_gradient, sentence_loss};
use mfparse::scorer::{Activation, DropoutConfig, ModelConfig, ModelDims, ModelParams, Vocab};
use mfparse::Formulation;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_DENOM_FLOOR: f64 = 1e-4;

pub fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{}", env!("CARGO_MANIFEST_DIR"), name)
}

pub fn toy_treebank() -> Vec<Sentence> {
    read_conllu(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy.conllu")).expect("bundled treebank")
}

/// Uniformly random head array that forms a tree over `n` words.
pub fn random_tree<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut heads = vec![0; n];
    for (pos, &w) in order.iter().enumerate() {
        heads[w - 1] = if pos == 0 { 0 } else { order[rng.random_range(0..pos)] };
    }
    heads
}

const FORMS: [&str; 6] = ["a", "dog", "sees", "the", "cat", ","];
const TAGS: [&str; 4] = ["DET", "NOUN", "VERB", "PUNCT"];
const LABELS: [&str; 3] = ["det", "nsubj", "root"];

pub fn random_sentence<R: Rng>(n: usize, rng: &mut R) -> Sentence {
    let heads = random_tree(n, rng);
    Sentence::from_tokens(
        heads
            .iter()
            .map(|&h| {
                Token::new(
                    FORMS[rng.random_range(0..FORMS.len())],
                    TAGS[rng.random_range(0..TAGS.len())],
                    h,
                    LABELS[rng.random_range(0..LABELS.len())],
                )
            })
            .collect(),
    )
}

pub fn tiny_vocab() -> Vocab {
    let s = Sentence::from_tokens(
        FORMS
            .iter()
            .zip(TAGS.iter().cycle())
            .zip(LABELS.iter().cycle())
            .enumerate()
            .map(|(i, ((f, t), l))| Token::new(f, t, i, l))
            .collect(),
    );
    Vocab::from_corpus(&[s]).expect("vocabulary")
}

pub fn tiny_params(formulation: Formulation, iterations: usize, activation: Activation, seed: u64) -> ModelParams {
    let config = ModelConfig {
        dims: ModelDims {
            word: 4,
            pos: 3,
            hidden: 4,
            edge: 4,
            label: 3,
            binary: 4,
        },
        formulation,
        iterations,
        activation,
    };
    ModelParams::new(config, tiny_vocab(), seed).expect("parameters")
}

/// Central differences of the sentence loss over every parameter coordinate.
pub fn numeric_gradient(params: &ModelParams, sentence: &Sentence, lambda: f64) -> Vec<f64> {
    let base = params.to_flat();
    (0..base.len())
        .into_par_iter()
        .map_init(
            || params.clone(),
            |p, i| {
                let mut x = base.clone();
                x[i] = base[i] + FD_STEP;
                p.set_flat(&x);
                let plus = sentence_loss(p, sentence, lambda).expect("loss").total;
                x[i] = base[i] - FD_STEP;
                p.set_flat(&x);
                let minus = sentence_loss(p, sentence, lambda).expect("loss").total;
                (plus - minus) / (2.0 * FD_STEP)
            },
        )
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_DENOM_FLOOR)
}

/// Largest relative error between analytic and numeric gradients.
pub fn gradient_check(params: &ModelParams, sentence: &Sentence, lambda: f64) -> f64 {
    let (_, grads) = sentence_gradient(params, sentence, lambda, DropoutConfig::off(), 0).expect("gradient");
    let analytic = grads.to_flat();
    let numeric = numeric_gradient(params, sentence, lambda);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

pub fn linf(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
