//! Per-sentence glue between the scorer, inference, losses and decoding.

use rayon::prelude::*;

use crate::conllu::{Prediction, Sentence};
use crate::decoder;
use crate::error::{Error, Result};
use crate::scorer::{label_distribution, DropoutConfig, Gradients, ModelParams, Session};
use crate::trainer::loss::{GoldTree, InferenceLoss};
use crate::tree::{decode_with_stats, DecodeConfig, DecodeStats, DependencyTree};

/// Gold heads and label ids; unknown labels are an error.
pub fn gold_tree(params: &ModelParams, sentence: &Sentence) -> Result<GoldTree> {
    let labels = sentence
        .tokens
        .iter()
        .map(|t| {
            params
                .vocab
                .label_id(&t.gold_label)
                .ok_or_else(|| Error::Invalid(format!("label {:?} is not in the model inventory", t.gold_label)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GoldTree {
        heads: sentence.gold_heads(),
        labels,
    })
}

/// Loss breakdown of one sentence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub edge: f64,
    pub label: f64,
}

/// Loss and parameter gradient of one sentence through the unrolled
/// inference. Dropout masks are drawn from `seed`.
pub fn sentence_gradient(
    params: &ModelParams,
    sentence: &Sentence,
    lambda: f64,
    dropout: DropoutConfig,
    seed: u64,
) -> Result<(LossValue, Gradients)> {
    let gold = gold_tree(params, sentence)?;
    let enc = params.vocab.encode(sentence);
    let iterations = params.config.iterations;
    let with_binary = iterations > 0;
    let mut session = Session::with_dropout(params, dropout, seed);
    let vars = session.score(&enc, with_binary);
    let scores = session.score_tensors(&vars);
    let op = InferenceLoss::new(scores, gold, params.config.formulation, iterations, lambda, with_binary);
    let value = LossValue {
        total: op.state().total,
        edge: op.state().edge,
        label: op.state().label,
    };
    let output = op.output();
    let mut inputs = vec![vars.edge, vars.label];
    if let (Some(sib), Some(gp)) = (vars.sib, vars.gp) {
        inputs.push(sib);
        inputs.push(gp);
    }
    let loss = session.tape.custom(inputs, output, Box::new(op));
    let grads = session.tape.backward(loss);
    Ok((value, session.param_grads(&grads)))
}

/// Loss value only (no tape bookkeeping beyond the forward pass).
pub fn sentence_loss(params: &ModelParams, sentence: &Sentence, lambda: f64) -> Result<LossValue> {
    let gold = gold_tree(params, sentence)?;
    let scores = params.scores(sentence);
    let s = crate::trainer::loss::sentence_loss(
        &scores,
        &gold,
        params.config.formulation,
        params.config.iterations,
        lambda,
    );
    Ok(LossValue {
        total: s.total,
        edge: s.edge,
        label: s.label,
    })
}

/// Scores, runs inference and decodes one sentence.
pub fn predict(
    params: &ModelParams,
    sentence: &Sentence,
    config: DecodeConfig,
    stats: &mut DecodeStats,
) -> Result<DependencyTree> {
    let scores = params.scores(sentence);
    let posterior = decoder::mfvi(&scores, params.config.formulation, params.config.iterations);
    let p_label = label_distribution(&scores.label);
    decode_with_stats(posterior.final_q(), &p_label, config, stats)
}

/// Decodes every sentence in parallel; output order follows the input.
pub fn parse_corpus(
    params: &ModelParams,
    sentences: &[Sentence],
    config: DecodeConfig,
) -> Result<(Vec<DependencyTree>, DecodeStats)> {
    let results = sentences
        .par_iter()
        .map(|s| {
            let mut stats = DecodeStats::default();
            predict(params, s, config, &mut stats).map(|t| (t, stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = DecodeStats::default();
    let trees = results
        .into_iter()
        .map(|(t, s)| {
            total.decoded += s.decoded;
            total.mst_invocations += s.mst_invocations;
            t
        })
        .collect();
    Ok((trees, total))
}

pub fn to_prediction(params: &ModelParams, tree: &DependencyTree) -> Prediction {
    Prediction {
        heads: tree.heads.clone(),
        labels: Some(tree.labels.iter().map(|&l| params.vocab.labels[l].clone()).collect()),
    }
}
