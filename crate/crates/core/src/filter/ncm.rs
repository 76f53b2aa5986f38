//! Neural confidence measure: a binary classifier over per-token top-K
//! joint logits and the beam score, predicting WER=0 vs WER>0.
//!
//! Architecture: two 64-unit tanh dense layers per token, single-head
//! self-attention over token positions summed into one vector, beam score
//! concatenated, two more 64-unit tanh dense layers, and a 2-class output.
//! Trained with binary cross-entropy, Adam at 1e-3 with 0.5 decay every 500
//! steps, batch size 32, on an 80:20 train/validation split with early
//! stopping on validation loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::{DecodeRecord, Hypothesis, TOP_K};
use crate::error::{Error, Result};
use crate::filter::{Decision, FilteredSet};
use crate::numerics::{adam_step, AdamState, Gradients, Graph, ParamStore, Tensor, Var};
use crate::rng::{self, Domain};

const HIDDEN: usize = 64;
/// Positive class index: predicted WER=0.
const CLASS_WER_ZERO: usize = 1;

/// Per-utterance classifier input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcmInput {
    /// One row of TOP_K logit values per emitted token.
    pub topk: Vec<Vec<f64>>,
    pub beam_score: f64,
}

impl NcmInput {
    pub fn from_hypothesis(hypothesis: &Hypothesis) -> Self {
        let topk = hypothesis
            .topk_logits
            .iter()
            .map(|row| {
                let mut vals: Vec<f64> = row.iter().map(|t| t.logit).collect();
                while vals.len() < TOP_K {
                    vals.push(*vals.last().unwrap_or(&0.0));
                }
                vals.truncate(TOP_K);
                vals
            })
            .collect();
        NcmInput {
            topk,
            beam_score: hypothesis.beam_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcmModel {
    params: BTreeMap<String, Tensor>,
}

const NCM_PARAM_SPECS: &[(&str, usize, usize)] = &[
    ("d1a.w", TOP_K, HIDDEN),
    ("d1a.b", 1, HIDDEN),
    ("d1b.w", HIDDEN, HIDDEN),
    ("d1b.b", 1, HIDDEN),
    ("attn.wq", HIDDEN, HIDDEN),
    ("attn.wk", HIDDEN, HIDDEN),
    ("attn.wv", HIDDEN, HIDDEN),
    ("d2a.w", HIDDEN + 1, HIDDEN),
    ("d2a.b", 1, HIDDEN),
    ("d2b.w", HIDDEN, HIDDEN),
    ("d2b.b", 1, HIDDEN),
    ("out.w", HIDDEN, 2),
    ("out.b", 1, 2),
];

impl NcmModel {
    pub fn init(seed: u64) -> Self {
        let mut params = BTreeMap::new();
        for (i, (name, rows, cols)) in NCM_PARAM_SPECS.iter().enumerate() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&[*cols])
            } else {
                let mut rng = rng::stream(seed, Domain::NcmInit, &[i as u64]);
                let normal = Normal::new(0.0, 1.0 / (*rows as f64).sqrt()).expect("valid sigma");
                Tensor::from_vec(
                    &[*rows, *cols],
                    (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
                )
                .expect("finite init")
            };
            params.insert(name.to_string(), t);
        }
        NcmModel { params }
    }

    fn get(&self, name: &str) -> &Tensor {
        &self.params[name]
    }
}

impl ParamStore for NcmModel {
    fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }
}

/// Build the forward graph for one input; returns 1x2 class log-probs.
fn sample_graph(model: &NcmModel, input: &NcmInput) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let n = input.topk.len();

    let pooled = if n > 0 {
        let x = g.constant(Tensor::from_rows(&input.topk)?);
        let d1a_w = g.param("d1a.w", model.get("d1a.w").clone());
        let d1a_b = g.param("d1a.b", model.get("d1a.b").clone());
        let d1b_w = g.param("d1b.w", model.get("d1b.w").clone());
        let d1b_b = g.param("d1b.b", model.get("d1b.b").clone());
        let h0 = g.matmul(x, d1a_w)?;
        let h0b = g.add_row(h0, d1a_b)?;
        let h1 = g.tanh(h0b);
        let h2 = g.matmul(h1, d1b_w)?;
        let h2b = g.add_row(h2, d1b_b)?;
        let tokens = g.tanh(h2b);

        let wq = g.param("attn.wq", model.get("attn.wq").clone());
        let wk = g.param("attn.wk", model.get("attn.wk").clone());
        let wv = g.param("attn.wv", model.get("attn.wv").clone());
        let q = g.matmul(tokens, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        let kt = g.transpose(k);
        let scores_raw = g.matmul(q, kt)?;
        let scores = g.scale(scores_raw, 1.0 / (HIDDEN as f64).sqrt());
        let attn_log = g.log_softmax(scores);
        let attn = g.exp(attn_log);
        let attended = g.matmul(attn, v)?;
        let ones = g.constant(Tensor::full(&[1, n], 1.0));
        g.matmul(ones, attended)?
    } else {
        g.constant(Tensor::zeros(&[1, HIDDEN]))
    };

    let score = g.constant(Tensor::from_vec(&[1, 1], vec![input.beam_score])?);
    let with_score = g.concat_cols(pooled, score)?;

    let d2a_w = g.param("d2a.w", model.get("d2a.w").clone());
    let d2a_b = g.param("d2a.b", model.get("d2a.b").clone());
    let d2b_w = g.param("d2b.w", model.get("d2b.w").clone());
    let d2b_b = g.param("d2b.b", model.get("d2b.b").clone());
    let out_w = g.param("out.w", model.get("out.w").clone());
    let out_b = g.param("out.b", model.get("out.b").clone());

    let h0 = g.matmul(with_score, d2a_w)?;
    let h0b = g.add_row(h0, d2a_b)?;
    let h1 = g.tanh(h0b);
    let h2 = g.matmul(h1, d2b_w)?;
    let h2b = g.add_row(h2, d2b_b)?;
    let h3 = g.tanh(h2b);
    let l0 = g.matmul(h3, out_w)?;
    let logits = g.add_row(l0, out_b)?;
    let logp = g.log_softmax(logits);
    Ok((g, logp))
}

/// Class posterior [P(WER>0), P(WER=0)].
pub fn ncm_predict(model: &NcmModel, input: &NcmInput) -> Result<[f64; 2]> {
    let (g, logp) = sample_graph(model, input)?;
    let v = g.value(logp);
    Ok([v.data()[0].exp(), v.data()[1].exp()])
}

/// Cross-entropy of one sample; returns (loss, gradients).
fn sample_loss(model: &NcmModel, input: &NcmInput, wer_zero: bool) -> Result<(f64, Gradients)> {
    let (mut g, logp) = sample_graph(model, input)?;
    let mut one_hot = Tensor::zeros(&[1, 2]);
    one_hot.data_mut()[if wer_zero { CLASS_WER_ZERO } else { 0 }] = 1.0;
    let oh = g.constant(one_hot);
    let picked = g.mul(logp, oh)?;
    let s = g.sum_all(picked);
    let loss = g.scale(s, -1.0);
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcmTrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every_steps: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
}

impl Default for NcmTrainConfig {
    fn default() -> Self {
        NcmTrainConfig {
            learning_rate: 1e-3,
            decay_rate: 0.5,
            decay_every_steps: 500,
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NcmTrainOutcome {
    pub model: NcmModel,
    pub validation_accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train on (input, wer==0) pairs; 80:20 split, early stopping on
/// validation loss, deterministic given `seed`.
pub fn ncm_train(
    examples: &[(NcmInput, bool)],
    config: &NcmTrainConfig,
    seed: u64,
) -> Result<NcmTrainOutcome> {
    let n_pos = examples.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == examples.len() {
        return Err(Error::Training(
            "ncm_train: need both WER=0 and WER>0 examples".into(),
        ));
    }
    if examples.len() < 5 {
        return Err(Error::Training("ncm_train: too few examples".into()));
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::stream(seed, Domain::NcmShuffle, &[0]));
    let n_val = (examples.len() / 5).max(1);
    let (train_idx, val_idx) = order.split_at(examples.len() - n_val);
    let mut train_idx = train_idx.to_vec();

    let mut model = NcmModel::init(seed);
    let mut adam = AdamState::new(config.learning_rate);
    let names = model.param_names();

    let mut best: Option<(f64, NcmModel)> = None;
    let mut since_best = 0usize;
    let mut epoch_losses = Vec::new();

    for epoch in 0..config.max_epochs {
        train_idx.shuffle(&mut rng::stream(seed, Domain::NcmShuffle, &[1 + epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let mut grads = Gradients::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (input, label) = &examples[i];
                let (loss, g) = sample_loss(&model, input, *label)?;
                batch_loss += loss;
                grads.add_assign(&g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            epoch_loss += batch_loss;
            adam.learning_rate = config.learning_rate
                * config
                    .decay_rate
                    .powi((adam.step / config.decay_every_steps) as i32);
            adam_step(&mut model, &names, &grads, &mut adam)?;
        }
        epoch_losses.push(epoch_loss / train_idx.len() as f64);

        let mut val_loss = 0.0;
        for &i in val_idx {
            let (input, label) = &examples[i];
            let p = ncm_predict(&model, input)?;
            let target = if *label { p[CLASS_WER_ZERO] } else { p[0] };
            val_loss -= target.max(1e-300).ln();
        }
        val_loss /= val_idx.len() as f64;
        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }

    let model = best.expect("at least one epoch ran").1;
    let mut correct = 0usize;
    for &i in val_idx {
        let (input, label) = &examples[i];
        let p = ncm_predict(&model, input)?;
        if (p[CLASS_WER_ZERO] > p[0]) == *label {
            correct += 1;
        }
    }
    Ok(NcmTrainOutcome {
        model,
        validation_accuracy: correct as f64 / val_idx.len() as f64,
        epoch_losses,
    })
}

/// Keep records the classifier predicts as WER=0.
pub fn ncm_filter(model: &NcmModel, records: &[DecodeRecord]) -> Result<FilteredSet> {
    let decisions: Result<Vec<Decision>> = records
        .iter()
        .map(|r| {
            let p = ncm_predict(model, &NcmInput::from_hypothesis(&r.hypothesis))?;
            Ok(Decision {
                utterance_id: r.utterance_id.clone(),
                method: "ncm".into(),
                score: p[CLASS_WER_ZERO],
                kept: p[CLASS_WER_ZERO] > p[0],
                flagged: false,
            })
        })
        .collect();
    Ok(FilteredSet::from_decisions(decisions?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Positives: dominant first logit and strong beam score. Negatives:
    /// flat logits and weak beam score.
    fn separable_examples(n: usize, seed: u64) -> Vec<(NcmInput, bool)> {
        let mut rng = rng::from_seed_word(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let tokens = rng.gen_range(2..=5);
                let topk: Vec<Vec<f64>> = (0..tokens)
                    .map(|_| {
                        if positive {
                            vec![
                                4.0 + rng.gen_range(-0.3..0.3),
                                0.5 + rng.gen_range(-0.2..0.2),
                                0.0,
                                -0.5,
                            ]
                        } else {
                            let base = rng.gen_range(0.8..1.4);
                            vec![base, base - 0.1, base - 0.2, base - 0.3]
                        }
                    })
                    .collect();
                let beam_score = if positive {
                    rng.gen_range(-2.0..-0.5)
                } else {
                    rng.gen_range(-9.0..-5.0)
                };
                (NcmInput { topk, beam_score }, positive)
            })
            .collect()
    }

    #[test]
    fn separable_data_reaches_high_validation_accuracy() {
        let examples = separable_examples(300, 3);
        let out = ncm_train(&examples, &NcmTrainConfig::default(), 11).unwrap();
        assert!(
            out.validation_accuracy >= 0.95,
            "val acc {}",
            out.validation_accuracy
        );
    }

    #[test]
    fn label_shuffled_data_stays_near_chance() {
        let mut examples = separable_examples(400, 5);
        let mut rng = rng::from_seed_word(99);
        for (_, label) in examples.iter_mut() {
            *label = rng.gen::<bool>();
        }
        let out = ncm_train(&examples, &NcmTrainConfig::default(), 11).unwrap();
        assert!(
            (out.validation_accuracy - 0.5).abs() <= 0.1,
            "val acc {}",
            out.validation_accuracy
        );
    }

    #[test]
    fn training_loss_non_increasing_on_separable_data() {
        let examples = separable_examples(200, 7);
        let config = NcmTrainConfig {
            max_epochs: 10,
            patience: 10,
            ..Default::default()
        };
        let out = ncm_train(&examples, &config, 2).unwrap();
        for pair in out.epoch_losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn single_class_data_is_training_error() {
        let examples: Vec<(NcmInput, bool)> = separable_examples(20, 1)
            .into_iter()
            .map(|(x, _)| (x, true))
            .collect();
        assert!(matches!(
            ncm_train(&examples, &NcmTrainConfig::default(), 0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let examples = separable_examples(100, 2);
        let config = NcmTrainConfig {
            max_epochs: 3,
            ..Default::default()
        };
        let a = ncm_train(&examples, &config, 4).unwrap();
        let b = ncm_train(&examples, &config, 4).unwrap();
        assert_eq!(a.model, b.model);
    }

    fn constant_model(bias: [f64; 2]) -> NcmModel {
        let mut model = NcmModel::init(0);
        for name in model.param_names() {
            let t = model.param_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let b = model.param_mut("out.b").unwrap();
        b.data_mut().copy_from_slice(&bias);
        model
    }

    fn toy_records(n: usize) -> Vec<DecodeRecord> {
        (0..n)
            .map(|i| {
                let mut h = Hypothesis::empty();
                h.tokens = vec![0];
                h.token_logps = vec![-0.2];
                h.topk_logits = vec![vec![
                    crate::decode::TopLogit { id: 0, logit: 1.0 },
                    crate::decode::TopLogit { id: 1, logit: 0.5 },
                    crate::decode::TopLogit { id: 2, logit: 0.1 },
                    crate::decode::TopLogit { id: 3, logit: 0.0 },
                ]];
                h.beam_score = -1.0;
                DecodeRecord {
                    utterance_id: format!("u{i}"),
                    speaker_id: "s".into(),
                    hypothesis: h,
                }
            })
            .collect()
    }

    #[test]
    fn constant_class_models_keep_all_or_none() {
        let records = toy_records(5);
        let keep_all = ncm_filter(&constant_model([0.0, 10.0]), &records).unwrap();
        assert_eq!(keep_all.kept.len(), 5);
        let keep_none = ncm_filter(&constant_model([10.0, 0.0]), &records).unwrap();
        assert!(keep_none.kept.is_empty());
    }

    #[test]
    fn verdicts_equal_posterior_argmax_and_shift_invariance() {
        let examples = separable_examples(120, 9);
        let out = ncm_train(
            &examples,
            &NcmTrainConfig {
                max_epochs: 5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let records = toy_records(8);
        let set = ncm_filter(&out.model, &records).unwrap();
        for (r, d) in records.iter().zip(&set.decisions) {
            let p = ncm_predict(&out.model, &NcmInput::from_hypothesis(&r.hypothesis)).unwrap();
            assert_eq!(d.kept, p[1] > p[0]);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = NcmModel::init(3);
        let input = NcmInput {
            topk: vec![vec![1.0, 0.5, 0.2, 0.1], vec![0.9, 0.8, 0.1, 0.0]],
            beam_score: -2.5,
        };
        let err = crate::numerics::grad_check(
            |m: &NcmModel| sample_loss(m, &input, true),
            &mut model,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
