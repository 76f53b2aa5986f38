//! Greedy and beam-search transducer decoding.
//!
//! The beam is step-synchronous: at every step each surviving hypothesis
//! either takes blank (advancing a frame, or finishing on the last one) or
//! emits a token, and finished hypotheses keep competing for beam slots.
//! Hypotheses with identical token sequences are merged by log-sum-exp.
//!
//! Pruning: at width 1 a single global slot survives, so the search commits
//! to the argmax transition at every step and reproduces greedy decoding
//! exactly. At width >= 2 the top `width` hypotheses survive per
//! (frame, emission-depth) stratum, so deep emission branches are not
//! starved by shallow blank-heavy ones.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::DropoutPolicy;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{
    encoder_forward, joint_logits, prediction_start, prediction_step, ModelParams, PredState,
};
use crate::numerics::{log_softmax_vec, log_sum_exp, Tensor};

/// Non-blank emissions allowed per frame; guarantees termination.
pub const EMISSION_CAP: usize = 3;

/// Logits kept per emitted token as confidence-classifier features.
pub const TOP_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopLogit {
    pub id: TokenId,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Total log-probability (log-sum-exp over merged alignments).
    pub log_prob: f64,
    /// Log posterior of each emitted token, from the best merged path.
    pub token_logps: Vec<f64>,
    /// Top-K joint logits at each emission, sorted by descending logit.
    pub topk_logits: Vec<Vec<TopLogit>>,
    /// Final beam score; equals `log_prob` at finalization.
    pub beam_score: f64,
}

impl Hypothesis {
    pub fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            token_logps: Vec::new(),
            topk_logits: Vec::new(),
            beam_score: 0.0,
        }
    }
}

/// Sum of per-token log posteriors; 0 for an empty hypothesis.
pub fn confidence_score(hypothesis: &Hypothesis) -> f64 {
    hypothesis.token_logps.iter().sum()
}

fn top_k_of(logits: &[f64]) -> Vec<TopLogit> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(TOP_K);
    idx.into_iter()
        .map(|i| TopLogit {
            id: i,
            logit: logits[i],
        })
        .collect()
}

/// Time-synchronous argmax decoding: advance on blank, emit the argmax
/// non-blank otherwise, at most [`EMISSION_CAP`] emissions per frame.
pub fn greedy_decode(params: &ModelParams, features: &Tensor) -> Result<Hypothesis> {
    Ok(greedy_decode_with_alignment(params, features)?.0)
}

/// Greedy decoding plus the (t, u) lattice nodes visited, one per joint
/// evaluation; the entropy-minimization baseline trains along this path.
pub fn greedy_decode_with_alignment(
    params: &ModelParams,
    features: &Tensor,
) -> Result<(Hypothesis, Vec<(usize, usize)>)> {
    let enc = encoder_forward(params, features, None)?;
    let blank = params.dims.blank_id();
    let mut state = prediction_start(params)?;
    let mut hyp = Hypothesis::empty();
    let mut path = Vec::new();

    for t in 0..enc.rows() {
        let mut emits = 0;
        loop {
            path.push((t, hyp.tokens.len()));
            let logits = joint_logits(params, enc.row(t), state.output())?;
            let logps = log_softmax_vec(&logits);
            let argmax = logps
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(blank);
            if argmax == blank || emits == EMISSION_CAP {
                hyp.log_prob += logps[blank];
                break;
            }
            hyp.tokens.push(argmax);
            hyp.token_logps.push(logps[argmax]);
            hyp.topk_logits.push(top_k_of(&logits));
            hyp.log_prob += logps[argmax];
            state = prediction_step(params, &state, argmax)?;
            emits += 1;
        }
    }
    hyp.beam_score = hyp.log_prob;
    Ok((hyp, path))
}

struct BeamHyp {
    tokens: Vec<TokenId>,
    log_prob: f64,
    token_logps: Vec<f64>,
    topk_logits: Vec<Vec<TopLogit>>,
    state: PredState,
    t: usize,
    emits: usize,
    done: bool,
}

impl BeamHyp {
    fn into_hypothesis(self) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens,
            log_prob: self.log_prob,
            token_logps: self.token_logps,
            topk_logits: self.topk_logits,
            beam_score: self.log_prob,
        }
    }
}

#[derive(PartialEq, Eq, Hash)]
struct MergeKey {
    tokens: Vec<TokenId>,
    t: usize,
    emits: usize,
    done: bool,
}

fn merge_into(pool: &mut HashMap<MergeKey, BeamHyp>, hyp: BeamHyp) {
    let key = MergeKey {
        tokens: hyp.tokens.clone(),
        t: hyp.t,
        emits: hyp.emits,
        done: hyp.done,
    };
    match pool.get_mut(&key) {
        Some(existing) => {
            let merged = log_sum_exp(existing.log_prob, hyp.log_prob);
            // Keep the stronger branch's per-token metadata.
            if hyp.log_prob > existing.log_prob {
                *existing = hyp;
            }
            existing.log_prob = merged;
        }
        None => {
            pool.insert(key, hyp);
        }
    }
}

fn hyp_order(a: &BeamHyp, b: &BeamHyp) -> std::cmp::Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(b.tokens.len().cmp(&a.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
        .then(a.t.cmp(&b.t))
}

fn prune(pool: HashMap<MergeKey, BeamHyp>, width: usize) -> Vec<BeamHyp> {
    let mut hyps: Vec<BeamHyp> = pool.into_values().collect();
    hyps.sort_by(hyp_order);
    if width == 1 {
        hyps.truncate(1);
        return hyps;
    }
    let mut counts: HashMap<(usize, usize, bool), usize> = HashMap::new();
    hyps.retain(|h| {
        let c = counts.entry((h.t, h.emits, h.done)).or_insert(0);
        *c += 1;
        *c <= width
    });
    hyps
}

/// Transducer beam search; hypotheses are returned best-first. Optional
/// dropout perturbs the encoder (fresh masks per call seed), which is how
/// the DUST filter generates alternative hypotheses.
pub fn beam_search(
    params: &ModelParams,
    features: &Tensor,
    width: usize,
    dropout: Option<(&DropoutPolicy, u64)>,
) -> Result<Vec<Hypothesis>> {
    if width < 1 {
        return Err(Error::Contract("beam_search: width must be >= 1".into()));
    }
    let enc = encoder_forward(params, features, dropout)?;
    let t_len = enc.rows();
    let blank = params.dims.blank_id();

    let mut beam = vec![BeamHyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        token_logps: Vec::new(),
        topk_logits: Vec::new(),
        state: prediction_start(params)?,
        t: 0,
        emits: 0,
        done: false,
    }];

    let max_steps = t_len * (EMISSION_CAP + 1) + 1;
    for _ in 0..max_steps {
        if beam.iter().all(|h| h.done) {
            break;
        }
        let mut pool: HashMap<MergeKey, BeamHyp> = HashMap::new();
        for hyp in beam {
            if hyp.done {
                merge_into(&mut pool, hyp);
                continue;
            }
            let logits = joint_logits(params, enc.row(hyp.t), hyp.state.output())?;
            let logps = log_softmax_vec(&logits);

            // Blank: advance a frame, or finish on the last one.
            merge_into(
                &mut pool,
                BeamHyp {
                    tokens: hyp.tokens.clone(),
                    log_prob: hyp.log_prob + logps[blank],
                    token_logps: hyp.token_logps.clone(),
                    topk_logits: hyp.topk_logits.clone(),
                    state: hyp.state.clone(),
                    t: hyp.t + 1,
                    emits: 0,
                    done: hyp.t + 1 == t_len,
                },
            );

            if hyp.emits < EMISSION_CAP {
                let topk = top_k_of(&logits);
                for k in 0..blank {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    let mut token_logps = hyp.token_logps.clone();
                    token_logps.push(logps[k]);
                    let mut topk_logits = hyp.topk_logits.clone();
                    topk_logits.push(topk.clone());
                    merge_into(
                        &mut pool,
                        BeamHyp {
                            tokens,
                            log_prob: hyp.log_prob + logps[k],
                            token_logps,
                            topk_logits,
                            state: prediction_step(params, &hyp.state, k)?,
                            t: hyp.t,
                            emits: hyp.emits + 1,
                            done: false,
                        },
                    );
                }
            }
        }
        beam = prune(pool, width);
    }

    let mut out: Vec<Hypothesis> = beam
        .into_iter()
        .filter(|h| h.done)
        .map(BeamHyp::into_hypothesis)
        .collect();
    if out.is_empty() {
        return Err(Error::Numeric("beam_search: no finished hypothesis".into()));
    }
    out.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.tokens.cmp(&b.tokens))
    });
    out.truncate(width);
    Ok(out)
}

// ── Decode dump ─────────────────────────────────────────────────────────

/// One line of a decode dump: the utterance and its best hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub hypothesis: Hypothesis,
}

pub fn save_decode_dump(records: &[DecodeRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_decode_dump(path: &Path) -> Result<Vec<DecodeRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DecodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_lattice, ModelDims};

    fn toy_features(t: usize, f: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::from_seed_word(seed);
        Tensor::from_vec(&[t, f], (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn blank_dominant_model_decodes_empty() {
        let mut params = ModelParams::init(ModelDims::tiny(3, 2), 1);
        let blank = params.dims.blank_id();
        params.joint_b2.data_mut()[blank] = 50.0;
        let hyp = greedy_decode(&params, &toy_features(4, 3, 2)).unwrap();
        assert!(hyp.tokens.is_empty());
        assert_eq!(confidence_score(&hyp), 0.0);
    }

    #[test]
    fn constant_token_model_matches_hand_trace() {
        // Joint output depends only on the output bias, which favors token
        // 0: greedy emits the cap per frame then advances, so 2 frames give
        // 2 * EMISSION_CAP copies of token 0.
        let dims = ModelDims::tiny(3, 2);
        let mut params = ModelParams::init(dims, 1);
        params.joint_w2 = Tensor::zeros(&[dims.joint_hidden, dims.n_classes()]);
        params.joint_b2 = Tensor::from_vec(&[3], vec![3.0, 0.0, 0.0]).unwrap();
        let hyp = greedy_decode(&params, &toy_features(2, 3, 2)).unwrap();
        assert_eq!(hyp.tokens, vec![0; 2 * EMISSION_CAP]);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in 0..50 {
            let params = ModelParams::init(ModelDims::tiny(4, 3), seed);
            let feats = toy_features(3 + (seed % 3) as usize, 4, 100 + seed);
            let greedy = greedy_decode(&params, &feats).unwrap();
            let beam = beam_search(&params, &feats, 1, None).unwrap();
            assert_eq!(beam[0].tokens, greedy.tokens, "seed {seed}");
        }
    }

    #[test]
    fn wider_beams_never_score_worse() {
        for seed in 0..20 {
            let params = ModelParams::init(ModelDims::tiny(4, 3), 200 + seed);
            let feats = toy_features(4, 4, 300 + seed);
            let mut last = f64::NEG_INFINITY;
            for width in 1..=4 {
                let best = beam_search(&params, &feats, width, None).unwrap()[0].log_prob;
                assert!(
                    best >= last - 1e-12,
                    "seed {seed} width {width}: {best} < {last}"
                );
                last = best;
            }
        }
    }

    #[test]
    fn beam_top_score_at_least_best_exhaustive_path() {
        // Exhaustive DFS over all capped alignments (independent oracle).
        fn best_path(
            params: &ModelParams,
            enc: &Tensor,
            t: usize,
            emits: usize,
            state: &PredState,
            acc: f64,
        ) -> f64 {
            let logits = joint_logits(params, enc.row(t), state.output()).unwrap();
            let logps = log_softmax_vec(&logits);
            let blank = params.dims.blank_id();
            let mut best = f64::NEG_INFINITY;
            let blank_acc = acc + logps[blank];
            if t + 1 == enc.rows() {
                best = best.max(blank_acc);
            } else {
                best = best.max(best_path(params, enc, t + 1, 0, state, blank_acc));
            }
            if emits < EMISSION_CAP {
                for k in 0..blank {
                    let next = prediction_step(params, state, k).unwrap();
                    best = best.max(best_path(
                        params,
                        enc,
                        t,
                        emits + 1,
                        &next,
                        acc + logps[k],
                    ));
                }
            }
            best
        }

        for seed in 0..25 {
            let params = ModelParams::init(ModelDims::tiny(3, 2), 400 + seed);
            let feats = toy_features(3, 3, 500 + seed);
            let enc = encoder_forward(&params, &feats, None).unwrap();
            let start = prediction_start(&params).unwrap();
            let oracle = best_path(&params, &enc, 0, 0, &start, 0.0);
            let beam = beam_search(&params, &feats, 4, None).unwrap();
            assert!(
                beam[0].log_prob >= oracle - 1e-9,
                "seed {seed}: {} < {oracle}",
                beam[0].log_prob
            );
        }
    }

    #[test]
    fn decoding_is_deterministic_without_dropout() {
        let params = ModelParams::init(ModelDims::tiny(4, 3), 9);
        let feats = toy_features(5, 4, 9);
        let a = beam_search(&params, &feats, 4, None).unwrap();
        let b = beam_search(&params, &feats, 4, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_top1_logit_is_the_emitted_token() {
        for seed in 0..10 {
            let params = ModelParams::init(ModelDims::tiny(3, 3), 600 + seed);
            let hyp = greedy_decode(&params, &toy_features(5, 3, 700 + seed)).unwrap();
            for (tok, topk) in hyp.tokens.iter().zip(&hyp.topk_logits) {
                // The emitted token maximizes the posterior; blank did not,
                // so the top non-blank logit is the emitted one. With K=4 of
                // |V|+1=4 classes the list holds all classes, led by the
                // argmax unless blank outranked it (it cannot have).
                assert_eq!(topk[0].id, *tok);
            }
        }
    }

    #[test]
    fn confidence_score_sums_token_logps() {
        let mut h = Hypothesis::empty();
        h.token_logps = vec![-0.1, -0.2];
        assert!((confidence_score(&h) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn greedy_score_is_sum_of_chosen_transitions_and_matches_lattice() {
        // Recompute the greedy path score from the training lattice of its
        // own hypothesis: token transitions at (t, u) plus blank transitions.
        let params = ModelParams::init(ModelDims::tiny(3, 3), 13);
        let feats = toy_features(4, 3, 14);
        let (hyp, path) = greedy_decode_with_alignment(&params, &feats).unwrap();
        let lattice = forward_lattice(&params, &feats, &hyp.tokens, None).unwrap();
        let blank = lattice.blank_id();
        let mut score = 0.0;
        let mut token_logps = Vec::new();
        let mut emitted = 0usize;
        for (i, &(t, u)) in path.iter().enumerate() {
            // This step emitted iff the next path entry kept the same t with
            // u+1 (or it was an emission recorded in order).
            let next = path.get(i + 1);
            let is_emit = matches!(next, Some(&(nt, nu)) if nt == t && nu == u + 1);
            if is_emit {
                let lp = lattice.node(t, u)[hyp.tokens[emitted]];
                token_logps.push(lp);
                score += lp;
                emitted += 1;
            } else {
                score += lattice.node(t, u)[blank];
            }
        }
        assert!((score - hyp.log_prob).abs() < 1e-12);
        for (a, b) in hyp.token_logps.iter().zip(&token_logps) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(hyp.log_prob <= 0.0);
    }

    #[test]
    fn width_zero_is_contract_error() {
        let params = ModelParams::init(ModelDims::tiny(3, 2), 1);
        assert!(matches!(
            beam_search(&params, &toy_features(2, 3, 1), 0, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        let params = ModelParams::init(ModelDims::tiny(3, 3), 21);
        let hyp = greedy_decode(&params, &toy_features(5, 3, 22)).unwrap();
        let records = vec![DecodeRecord {
            utterance_id: "u1".into(),
            speaker_id: "s1".into(),
            hypothesis: hyp,
        }];
        save_decode_dump(&records, &path).unwrap();
        assert_eq!(load_decode_dump(&path).unwrap(), records);
    }
}
