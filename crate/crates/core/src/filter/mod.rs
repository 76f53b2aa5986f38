//! Pseudo-label quality filters: confidence thresholding (CT), dropout
//! disagreement (DUST), a neural confidence measure (NCM), and the
//! ground-truth WER=0 oracle used only for ablations.

mod ncm;

pub use ncm::{ncm_filter, ncm_predict, ncm_train, NcmInput, NcmModel, NcmTrainConfig};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{DropoutPolicy, DropoutScope};
use crate::corpus::{TokenId, UnlabelledView, Utterance};
use crate::decode::{beam_search, confidence_score, greedy_decode, DecodeRecord};
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::model::ModelParams;
use crate::rng;

/// Per-utterance verdict with the score that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub utterance_id: String,
    pub method: String,
    pub score: f64,
    pub kept: bool,
    /// Set when the verdict came from a degenerate case (e.g. an empty
    /// DUST reference decode).
    pub flagged: bool,
}

/// Kept ids plus the full decision record, one per input utterance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilteredSet {
    pub kept: Vec<String>,
    pub decisions: Vec<Decision>,
}

impl FilteredSet {
    pub fn from_decisions(decisions: Vec<Decision>) -> Self {
        let kept = decisions
            .iter()
            .filter(|d| d.kept)
            .map(|d| d.utterance_id.clone())
            .collect();
        FilteredSet { kept, decisions }
    }

    pub fn keep_all(ids: impl Iterator<Item = String>) -> Self {
        FilteredSet::from_decisions(
            ids.map(|utterance_id| Decision {
                utterance_id,
                method: "none".into(),
                score: 0.0,
                kept: true,
                flagged: false,
            })
            .collect(),
        )
    }

    pub fn contains(&self, id: &str) -> bool {
        self.kept.iter().any(|k| k == id)
    }
}

pub fn save_decisions(set: &FilteredSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for d in &set.decisions {
        serde_json::to_writer(&mut w, d).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_decisions(path: &Path) -> Result<FilteredSet> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut decisions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Decision = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        decisions.push(d);
    }
    Ok(FilteredSet::from_decisions(decisions))
}

// ── Confidence thresholding ─────────────────────────────────────────────

/// Calibrate the CT threshold on (confidence score, WER) pairs: WER=0 is
/// the positive class; candidate thresholds are midpoints of sorted unique
/// scores; the winner maximizes sqrt(sensitivity * specificity), ties going
/// to the lower threshold (keeping more data).
pub fn ct_calibrate(calibration: &[(f64, f64)]) -> Result<f64> {
    let positives: Vec<f64> = calibration
        .iter()
        .filter(|(_, w)| *w == 0.0)
        .map(|(s, _)| *s)
        .collect();
    let negatives: Vec<f64> = calibration
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(s, _)| *s)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Calibration(
            "ct_calibrate: need both WER=0 and WER>0 examples".into(),
        ));
    }

    let mut unique: Vec<f64> = calibration.iter().map(|(s, _)| *s).collect();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    unique.dedup();
    if unique.len() < 2 {
        return Err(Error::Calibration(
            "ct_calibrate: all scores identical".into(),
        ));
    }

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY); // (gmean, threshold)
    for pair in unique.windows(2) {
        let threshold = (pair[0] + pair[1]) / 2.0;
        let tp = positives.iter().filter(|&&s| s >= threshold).count() as f64;
        let tn = negatives.iter().filter(|&&s| s < threshold).count() as f64;
        let sensitivity = tp / positives.len() as f64;
        let specificity = tn / negatives.len() as f64;
        let gmean = (sensitivity * specificity).sqrt();
        if gmean > best.0 {
            best = (gmean, threshold);
        }
    }
    Ok(best.1)
}

/// Keep hypotheses whose summed token log-softmax score clears the
/// calibrated threshold.
pub fn ct_filter(records: &[DecodeRecord], threshold: f64) -> FilteredSet {
    FilteredSet::from_decisions(
        records
            .iter()
            .map(|r| {
                let score = confidence_score(&r.hypothesis);
                Decision {
                    utterance_id: r.utterance_id.clone(),
                    method: "ct".into(),
                    score,
                    kept: score >= threshold,
                    flagged: false,
                }
            })
            .collect(),
    )
}

// ── DUST ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DustConfig {
    pub n_hyps: usize,
    pub dropout_rate: f64,
    pub threshold: f64,
}

impl Default for DustConfig {
    fn default() -> Self {
        DustConfig {
            n_hyps: 5,
            dropout_rate: 0.2,
            threshold: 0.1,
        }
    }
}

/// Verdict for one utterance given its clean decode and dropout decodes:
/// reject if any normalized edit distance exceeds the threshold. Returns
/// (max normalized distance, kept).
fn dust_decision(reference: &[TokenId], dropout_decodes: &[Vec<TokenId>], threshold: f64) -> (f64, bool) {
    let mut max_norm: f64 = 0.0;
    for hyp in dropout_decodes {
        let d = edit_distance(reference, hyp).distance as f64 / reference.len() as f64;
        max_norm = max_norm.max(d);
    }
    (max_norm, max_norm <= threshold)
}

/// Dropout-disagreement filter: decode each utterance once clean and
/// `n_hyps` times with encoder dropout enabled; reject when any perturbed
/// decode drifts beyond the threshold (normalized by the clean decode's
/// length). Empty clean decodes are rejected outright and flagged.
pub fn dust_filter(
    params: &ModelParams,
    view: &UnlabelledView,
    config: &DustConfig,
    seed: u64,
) -> Result<FilteredSet> {
    if config.n_hyps < 1 {
        return Err(Error::Contract("dust_filter: n_hyps must be >= 1".into()));
    }
    if config.threshold < 0.0 {
        return Err(Error::Contract("dust_filter: threshold must be >= 0".into()));
    }
    let policy = DropoutPolicy::new(config.dropout_rate, DropoutScope::encoder_only());
    let decisions: Result<Vec<Decision>> = view
        .items
        .par_iter()
        .map(|item| {
            let clean = greedy_decode(params, item.features)?;
            if clean.tokens.is_empty() {
                return Ok(Decision {
                    utterance_id: item.id.to_string(),
                    method: "dust".into(),
                    score: f64::INFINITY,
                    kept: false,
                    flagged: true,
                });
            }
            let mut decodes = Vec::with_capacity(config.n_hyps);
            for k in 0..config.n_hyps {
                let hyp_seed = rng::combine(&[seed, item.ordinal, k as u64]);
                let hyp = greedy_decode_with_dropout(params, item.features, &policy, hyp_seed)?;
                decodes.push(hyp);
            }
            let (score, kept) = dust_decision(&clean.tokens, &decodes, config.threshold);
            Ok(Decision {
                utterance_id: item.id.to_string(),
                method: "dust".into(),
                score,
                kept,
                flagged: false,
            })
        })
        .collect();
    Ok(FilteredSet::from_decisions(decisions?))
}

fn greedy_decode_with_dropout(
    params: &ModelParams,
    features: &crate::numerics::Tensor,
    policy: &DropoutPolicy,
    seed: u64,
) -> Result<Vec<TokenId>> {
    // Width-1 beam with encoder dropout == greedy over the perturbed
    // encoder.
    let hyps = beam_search(params, features, 1, Some((policy, seed)))?;
    Ok(hyps[0].tokens.clone())
}

// ── Oracle (ground-truth WER=0) ─────────────────────────────────────────

/// Verdicts from pre-computed decodes and privileged references: keep iff
/// the hypothesis matches the reference exactly.
pub fn oracle_filter_records(
    records: &[DecodeRecord],
    references: &BTreeMap<String, Vec<TokenId>>,
) -> Result<FilteredSet> {
    let decisions: Result<Vec<Decision>> = records
        .iter()
        .map(|r| {
            let reference = references.get(&r.utterance_id).ok_or_else(|| {
                Error::Contract(format!("oracle_filter: no reference for {}", r.utterance_id))
            })?;
            let distance = edit_distance(reference, &r.hypothesis.tokens).distance;
            Ok(Decision {
                utterance_id: r.utterance_id.clone(),
                method: "oracle".into(),
                score: distance as f64,
                kept: distance == 0,
                flagged: false,
            })
        })
        .collect();
    Ok(FilteredSet::from_decisions(decisions?))
}

/// Ablation-only filter: decode with the beam and keep utterances the model
/// recognises exactly, judged against ground-truth transcripts. Requires
/// privileged `Utterance` access; adaptation code cannot call this from an
/// unlabelled view.
pub fn oracle_filter(
    params: &ModelParams,
    utterances: &[&Utterance],
    beam_width: usize,
) -> Result<FilteredSet> {
    let records: Result<Vec<DecodeRecord>> = utterances
        .par_iter()
        .map(|u| {
            let hyps = beam_search(params, &u.features, beam_width, None)?;
            Ok(DecodeRecord {
                utterance_id: u.id.clone(),
                speaker_id: u.speaker_id.clone(),
                hypothesis: hyps.into_iter().next().unwrap(),
            })
        })
        .collect();
    let references: BTreeMap<String, Vec<TokenId>> = utterances
        .iter()
        .map(|u| (u.id.clone(), u.reference().to_vec()))
        .collect();
    oracle_filter_records(&records?, &references)
}

// ── Calibration decodes ─────────────────────────────────────────────────

/// A calibration example: the decode of an utterance with known reference,
/// plus its WER. Assembled server-side (references allowed) to calibrate CT
/// and train the NCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibRecord {
    pub record: DecodeRecord,
    pub wer: f64,
}

pub fn calibration_records(
    params: &ModelParams,
    utterances: &[&Utterance],
    beam_width: usize,
) -> Result<Vec<CalibRecord>> {
    utterances
        .par_iter()
        .map(|u| {
            let hyps = beam_search(params, &u.features, beam_width, None)?;
            let reference = u.reference();
            let wer = if reference.is_empty() {
                return Err(Error::Contract(format!("empty reference for {}", u.id)));
            } else {
                edit_distance(reference, &hyps[0].tokens).distance as f64
                    / reference.len() as f64
                    * 100.0
            };
            Ok(CalibRecord {
                record: DecodeRecord {
                    utterance_id: u.id.clone(),
                    speaker_id: u.speaker_id.clone(),
                    hypothesis: hyps.into_iter().next().unwrap(),
                },
                wer,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::Hypothesis;
    use crate::model::ModelDims;

    fn record(id: &str, token_logps: Vec<f64>) -> DecodeRecord {
        let mut h = Hypothesis::empty();
        h.tokens = vec![0; token_logps.len()];
        h.token_logps = token_logps;
        DecodeRecord {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            hypothesis: h,
        }
    }

    #[test]
    fn ct_calibrate_separable_example() {
        // Scores [-1,-2,-3,-4], labels [pos,pos,neg,neg]: the best band is
        // (-3,-2); midpoints give -2.5 with gmean 1.
        let calib = vec![(-1.0, 0.0), (-2.0, 0.0), (-3.0, 20.0), (-4.0, 50.0)];
        let t = ct_calibrate(&calib).unwrap();
        assert!((t + 2.5).abs() < 1e-12, "{t}");
    }

    #[test]
    fn ct_calibrate_interleaved_has_gmean_below_one() {
        let calib = vec![(-1.0, 0.0), (-2.0, 10.0), (-3.0, 0.0), (-4.0, 10.0)];
        let t = ct_calibrate(&calib).unwrap();
        // Threshold -2.5 keeps {-1,-2}: sens 1/2, spec 1/2 -> gmean 1/2.
        // Other candidates do no better; lower-threshold tie-break wins.
        assert!((t + 3.5).abs() < 1e-12, "{t}");
    }

    #[test]
    fn ct_calibrate_single_class_is_error() {
        let calib = vec![(-1.0, 0.0), (-2.0, 0.0)];
        assert!(matches!(ct_calibrate(&calib), Err(Error::Calibration(_))));
    }

    #[test]
    fn ct_calibrate_is_duplication_invariant() {
        let base = vec![(-1.0, 0.0), (-2.0, 0.0), (-3.0, 20.0), (-4.0, 50.0)];
        let mut doubled = base.clone();
        doubled.extend(base.clone());
        assert_eq!(ct_calibrate(&base).unwrap(), ct_calibrate(&doubled).unwrap());
    }

    #[test]
    fn ct_filter_extreme_thresholds() {
        let records = vec![record("a", vec![-0.1]), record("b", vec![-2.0])];
        let all = ct_filter(&records, f64::NEG_INFINITY);
        assert_eq!(all.kept.len(), 2);
        let none = ct_filter(&records, f64::INFINITY);
        assert!(none.kept.is_empty());
        assert_eq!(none.decisions.len(), 2);
    }

    #[test]
    fn ct_filter_matches_hand_application() {
        let records = vec![
            record("a", vec![-0.1, -0.1]), // -0.2
            record("b", vec![-0.5]),       // -0.5
            record("c", vec![]),           // 0.0
        ];
        let set = ct_filter(&records, -0.3);
        assert_eq!(set.kept, vec!["a".to_string(), "c".to_string()]);
    }

    #[test]
    fn dust_decision_examples() {
        // All hypotheses equal the reference: kept at any threshold.
        let reference = vec![1, 2, 3, 4, 5];
        let same = vec![reference.clone(); 5];
        let (score, kept) = dust_decision(&reference, &same, 0.0);
        assert_eq!(score, 0.0);
        assert!(kept);

        // One of five differs by one token on a 5-token reference:
        // 0.2 > 0.1 -> rejected.
        let mut one_off = same.clone();
        one_off[3] = vec![1, 2, 9, 4, 5];
        let (score, kept) = dust_decision(&reference, &one_off, 0.1);
        assert!((score - 0.2).abs() < 1e-12);
        assert!(!kept);

        // Infinite threshold keeps everything.
        let (_, kept) = dust_decision(&reference, &one_off, f64::INFINITY);
        assert!(kept);
    }

    #[test]
    fn dust_filter_rate_zero_keeps_everything_and_zero_threshold_semantics() {
        let config = crate::corpus::CorpusConfig {
            n_pretrain_speakers: 1,
            n_perso_speakers: 1,
            pretrain_utts_per_speaker: 2,
            heldin_utts_per_speaker: 6,
            heldout_utts_per_speaker: 1,
            ..Default::default()
        };
        let corpus = crate::corpus::generate_corpus(&config, 3).unwrap();
        let params = ModelParams::init(
            ModelDims::tiny(config.feature_dim, corpus.vocabulary.size()),
            1,
        );
        let view = crate::corpus::hide_references_for(
            &corpus,
            "spk00",
            &crate::corpus::Split::heldin(),
        );

        // Dropout rate 0: perturbed decodes equal the clean decode, so with
        // threshold 0 everything decodable is kept (or flagged if empty).
        let set = dust_filter(
            &params,
            &view,
            &DustConfig {
                n_hyps: 2,
                dropout_rate: 0.0,
                threshold: 0.0,
            },
            7,
        )
        .unwrap();
        for d in &set.decisions {
            assert!(d.kept || d.flagged, "{d:?}");
        }

        // With real dropout, threshold 0 keeps exactly the utterances whose
        // perturbed decodes all equal the clean decode (score 0).
        let set = dust_filter(&params, &view, &DustConfig::default(), 7).unwrap();
        for d in &set.decisions {
            if !d.flagged {
                assert_eq!(d.kept, d.score <= 0.1);
            }
        }
    }

    #[test]
    fn dust_empty_reference_is_flagged_rejection() {
        let config = crate::corpus::CorpusConfig {
            n_pretrain_speakers: 1,
            n_perso_speakers: 1,
            pretrain_utts_per_speaker: 2,
            heldin_utts_per_speaker: 4,
            heldout_utts_per_speaker: 1,
            ..Default::default()
        };
        let corpus = crate::corpus::generate_corpus(&config, 5).unwrap();
        let mut params = ModelParams::init(
            ModelDims::tiny(config.feature_dim, corpus.vocabulary.size()),
            1,
        );
        let blank = params.dims.blank_id();
        params.joint_b2.data_mut()[blank] = 50.0; // decode everything to empty
        let view = crate::corpus::hide_references_for(
            &corpus,
            "spk00",
            &crate::corpus::Split::heldin(),
        );
        let set = dust_filter(&params, &view, &DustConfig::default(), 1).unwrap();
        assert!(set.kept.is_empty());
        assert!(set.decisions.iter().all(|d| d.flagged));
    }

    #[test]
    fn oracle_records_keep_exact_matches_only() {
        let refs: BTreeMap<String, Vec<TokenId>> = [
            ("a".to_string(), vec![1, 2]),
            ("b".to_string(), vec![3]),
            ("c".to_string(), vec![4, 5]),
        ]
        .into();
        let mut r_a = record("a", vec![-0.1, -0.1]);
        r_a.hypothesis.tokens = vec![1, 2];
        let mut r_b = record("b", vec![-0.1]);
        r_b.hypothesis.tokens = vec![9];
        let mut r_c = record("c", vec![]);
        r_c.hypothesis.tokens = vec![];
        let set = oracle_filter_records(&[r_a, r_b, r_c], &refs).unwrap();
        assert_eq!(set.kept, vec!["a".to_string()]);
        // Verdict agrees with wer == 0 per utterance.
        for d in &set.decisions {
            assert_eq!(d.kept, d.score == 0.0);
        }
    }

    #[test]
    fn oracle_filter_on_model_agrees_with_recomputed_wer() {
        let config = crate::corpus::CorpusConfig {
            n_pretrain_speakers: 1,
            n_perso_speakers: 1,
            pretrain_utts_per_speaker: 2,
            heldin_utts_per_speaker: 8,
            heldout_utts_per_speaker: 1,
            ..Default::default()
        };
        let corpus = crate::corpus::generate_corpus(&config, 9).unwrap();
        let params = ModelParams::init(
            ModelDims::tiny(config.feature_dim, corpus.vocabulary.size()),
            2,
        );
        let utts = corpus.utterances_of("spk00", &crate::corpus::Split::heldin());
        let set = oracle_filter(&params, &utts, 2).unwrap();
        for (u, d) in utts.iter().zip(&set.decisions) {
            let hyp = beam_search(&params, &u.features, 2, None).unwrap();
            let dist = edit_distance(u.reference(), &hyp[0].tokens).distance;
            assert_eq!(d.kept, dist == 0);
        }
    }

    #[test]
    fn decisions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        let set = FilteredSet::from_decisions(vec![
            Decision {
                utterance_id: "a".into(),
                method: "ct".into(),
                score: -0.5,
                kept: true,
                flagged: false,
            },
            Decision {
                utterance_id: "b".into(),
                method: "ct".into(),
                score: -2.0,
                kept: false,
                flagged: false,
            },
        ]);
        save_decisions(&set, &path).unwrap();
        assert_eq!(load_decisions(&path).unwrap(), set);
    }
}
