//! WER/WERR scoring, per-speaker and per-split reports, curve smoothing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, TokenId, Utterance};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Levenshtein outcome split into edit kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

/// Token-level edit distance with substitution/deletion/insertion counts
/// recovered by backtrace (ties prefer diagonal, then deletion).
pub fn edit_distance(reference: &[TokenId], hypothesis: &[TokenId]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }

    let mut counts = EditCounts {
        distance: dp[idx(n, m)],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + cost {
                if cost == 1 {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus-level WER percent: pooled edits over pooled reference length.
pub fn wer(pairs: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
    let total_ref: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if total_ref == 0 {
        return Err(Error::Contract("wer: zero reference tokens".into()));
    }
    let total_dist: usize = pairs
        .iter()
        .map(|(r, h)| edit_distance(r, h).distance)
        .sum();
    Ok(total_dist as f64 / total_ref as f64 * 100.0)
}

/// Relative word error rate reduction, percent.
pub fn werr(baseline_wer: f64, new_wer: f64) -> Result<f64> {
    if baseline_wer <= 0.0 {
        return Err(Error::Contract("werr: baseline WER must be > 0".into()));
    }
    Ok((baseline_wer - new_wer) / baseline_wer * 100.0)
}

/// Exponential moving average: s0 = x0, s_t = w*s_{t-1} + (1-w)*x_t.
pub fn ema_smooth(series: &[f64], weight: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&weight), "weight must be in [0,1)");
    let mut out = Vec::with_capacity(series.len());
    let mut prev = match series.first() {
        Some(&x) => x,
        None => return out,
    };
    out.push(prev);
    for &x in &series[1..] {
        prev = weight * prev + (1.0 - weight) * x;
        out.push(prev);
    }
    out
}

/// One scored cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerCell {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
    pub wer_percent: f64,
}

impl WerCell {
    fn from_counts(counts: &[EditCounts], n_ref: usize) -> Self {
        let (mut s, mut d, mut i) = (0, 0, 0);
        for c in counts {
            s += c.substitutions;
            d += c.deletions;
            i += c.insertions;
        }
        WerCell {
            substitutions: s,
            deletions: d,
            insertions: i,
            reference_tokens: n_ref,
            wer_percent: (s + d + i) as f64 / n_ref as f64 * 100.0,
        }
    }
}

/// Per (method, speaker, split) cells plus pooled per (method, split)
/// aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub per_speaker: BTreeMap<(String, String, String), WerCell>,
    pub aggregate: BTreeMap<(String, String), WerCell>,
}

const REPORT_SPLITS: [Split; 3] = [Split::HeldinA, Split::HeldinB, Split::Heldout];

/// Decode every personalisation utterance under each method's checkpoint
/// and score against privileged references. `checkpoints` maps a method
/// name to per-speaker parameters (the pretrained baseline passes the same
/// parameters for every speaker).
pub fn report(
    corpus: &Corpus,
    checkpoints: &BTreeMap<String, BTreeMap<String, ModelParams>>,
    beam_width: usize,
) -> Result<WerReport> {
    let mut per_speaker = BTreeMap::new();
    let mut aggregate = BTreeMap::new();
    for (method, by_speaker) in checkpoints {
        for split in REPORT_SPLITS {
            let split_name = split.to_string();
            let mut agg_counts: Vec<EditCounts> = Vec::new();
            let mut agg_ref = 0usize;
            let mut any_speaker = false;
            for speaker in corpus.personalisation_speakers() {
                let Some(params) = by_speaker.get(speaker) else {
                    continue;
                };
                let utts = corpus.utterances_of(speaker, &[split]);
                if utts.is_empty() {
                    continue;
                }
                any_speaker = true;
                let scored = score_utterances(params, &utts, beam_width)?;
                let n_ref: usize = utts.iter().map(|u| u.reference().len()).sum();
                per_speaker.insert(
                    (method.clone(), speaker.to_string(), split_name.clone()),
                    WerCell::from_counts(&scored, n_ref),
                );
                agg_counts.extend(scored);
                agg_ref += n_ref;
            }
            if any_speaker {
                aggregate.insert(
                    (method.clone(), split_name),
                    WerCell::from_counts(&agg_counts, agg_ref),
                );
            }
        }
    }
    Ok(WerReport {
        per_speaker,
        aggregate,
    })
}

fn score_utterances(
    params: &ModelParams,
    utterances: &[&Utterance],
    beam_width: usize,
) -> Result<Vec<EditCounts>> {
    use rayon::prelude::*;
    utterances
        .par_iter()
        .map(|u| {
            let hyps = beam_search(params, &u.features, beam_width, None)?;
            Ok(edit_distance(u.reference(), &hyps[0].tokens))
        })
        .collect()
}

/// Aggregate WER of one parameter set on the given utterances.
pub fn evaluate_wer(
    params: &ModelParams,
    utterances: &[&Utterance],
    beam_width: usize,
) -> Result<f64> {
    let counts = score_utterances(params, utterances, beam_width)?;
    let n_ref: usize = utterances.iter().map(|u| u.reference().len()).sum();
    if n_ref == 0 {
        return Err(Error::Contract("evaluate_wer: zero reference tokens".into()));
    }
    let dist: usize = counts.iter().map(|c| c.distance).sum();
    Ok(dist as f64 / n_ref as f64 * 100.0)
}

impl WerReport {
    /// Table-2-shaped CSV: one row per (method, split) aggregate.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("method,split,wer_percent,substitutions,deletions,insertions,reference_tokens\n");
        for ((method, split), cell) in &self.aggregate {
            let _ = writeln!(
                out,
                "{method},{split},{:.4},{},{},{},{}",
                cell.wer_percent,
                cell.substitutions,
                cell.deletions,
                cell.insertions,
                cell.reference_tokens
            );
        }
        out
    }

    /// Per-speaker bar-chart CSV: one row per (method, speaker, split).
    pub fn per_speaker_csv(&self) -> String {
        let mut out = String::from("method,speaker,split,wer_percent,reference_tokens\n");
        for ((method, speaker, split), cell) in &self.per_speaker {
            let _ = writeln!(
                out,
                "{method},{speaker},{split},{:.4},{}",
                cell.wer_percent, cell.reference_tokens
            );
        }
        out
    }

    /// Markdown aggregate table for human diffing.
    pub fn markdown(&self) -> String {
        let mut methods: Vec<&String> = self.aggregate.keys().map(|(m, _)| m).collect();
        methods.dedup();
        let mut out = String::from("| method | heldin_A | heldin_B | heldout |\n|---|---|---|---|\n");
        for m in methods {
            let cell = |split: &str| {
                self.aggregate
                    .get(&(m.clone(), split.to_string()))
                    .map_or("-".to_string(), |c| format!("{:.2}", c.wer_percent))
            };
            let _ = writeln!(
                out,
                "| {m} | {} | {} | {} |",
                cell("heldin_A"),
                cell("heldin_B"),
                cell("heldout")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_zero_distance() {
        assert_eq!(edit_distance(&[1, 2], &[1, 2]).distance, 0);
    }

    #[test]
    fn table_carrier_sentence_hand_dp() {
        // "send a message to anne hathaway" vs "send message to ann hathaway":
        // one deletion ("a") and one substitution (anne -> ann).
        let reference = [0, 1, 2, 3, 4, 5];
        let hypothesis = [0, 2, 3, 9, 5];
        let c = edit_distance(&reference, &hypothesis);
        assert_eq!(c.distance, 2);
        assert_eq!(c.deletions, 1);
        assert_eq!(c.substitutions, 1);
        assert_eq!(c.insertions, 0);
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let c = edit_distance(&[], &[1, 2, 3]);
        assert_eq!(c.distance, 3);
        assert_eq!(c.insertions, 3);
    }

    #[test]
    fn distance_matches_exhaustive_recursion_small() {
        fn naive(a: &[TokenId], b: &[TokenId]) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            let cost = usize::from(a[0] != b[0]);
            (naive(&a[1..], &b[1..]) + cost)
                .min(naive(&a[1..], b) + 1)
                .min(naive(a, &b[1..]) + 1)
        }
        // Sweep of short sequences over a 3-token alphabet.
        let seqs: Vec<Vec<TokenId>> = (0..=3usize)
            .flat_map(|len| {
                (0..3usize.pow(len as u32)).map(move |mut n| {
                    (0..len)
                        .map(|_| {
                            let d = n % 3;
                            n /= 3;
                            d
                        })
                        .collect()
                })
            })
            .collect();
        for a in &seqs {
            for b in &seqs {
                assert_eq!(edit_distance(a, b).distance, naive(a, b), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn distance_is_symmetric_and_triangular() {
        let seqs: Vec<Vec<TokenId>> = vec![
            vec![],
            vec![0],
            vec![1, 2],
            vec![0, 1, 2],
            vec![2, 2, 1, 0],
            vec![0, 0, 0, 1, 2],
        ];
        for a in &seqs {
            for b in &seqs {
                let ab = edit_distance(a, b).distance;
                assert_eq!(ab, edit_distance(b, a).distance);
                for c in &seqs {
                    let ac = edit_distance(a, c).distance;
                    let cb = edit_distance(c, b).distance;
                    assert!(ab <= ac + cb);
                }
            }
        }
    }

    #[test]
    fn wer_examples() {
        let r1: Vec<TokenId> = vec![1, 2, 3];
        assert_eq!(wer(&[(&r1, &r1)]).unwrap(), 0.0);

        let reference: Vec<TokenId> = vec![0, 1, 2, 3, 4, 5];
        let hypothesis: Vec<TokenId> = vec![0, 2, 3, 9, 5];
        let w = wer(&[(&reference, &hypothesis)]).unwrap();
        assert!((w - 33.333333333333336).abs() < 1e-9);

        // All-empty hypotheses: pure deletions, 100%.
        let empty: Vec<TokenId> = vec![];
        assert_eq!(wer(&[(&r1, &empty)]).unwrap(), 100.0);

        assert!(matches!(wer(&[(&empty, &r1)]), Err(Error::Contract(_))));
    }

    #[test]
    fn wer_is_order_invariant() {
        let a: Vec<TokenId> = vec![1, 2, 3];
        let b: Vec<TokenId> = vec![1, 2];
        let c: Vec<TokenId> = vec![1, 9, 3];
        let w1 = wer(&[(&a, &b), (&a, &c)]).unwrap();
        let w2 = wer(&[(&a, &c), (&a, &b)]).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn werr_reproduces_reported_reductions() {
        // Published WER pairs read as inputs.
        let apps = werr(22.66, 18.73).unwrap();
        assert!((apps - 17.34).abs() < 0.01, "{apps}");
        let dictation = werr(9.43, 8.67).unwrap();
        assert!((dictation - 8.06).abs() < 0.01, "{dictation}");
        assert_eq!(werr(5.0, 5.0).unwrap(), 0.0);
        assert!(matches!(werr(0.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn werr_sign_tracks_improvement() {
        assert!(werr(10.0, 9.0).unwrap() > 0.0);
        assert!(werr(10.0, 11.0).unwrap() < 0.0);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_smooth(&[], 0.6), Vec::<f64>::new());
        assert_eq!(ema_smooth(&[2.0, 2.0, 2.0], 0.6), vec![2.0, 2.0, 2.0]);
        let s = ema_smooth(&[0.0, 1.0], 0.6);
        assert!((s[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ema_matches_direct_recursion() {
        let xs = [3.0, -1.0, 0.5, 2.5, 2.5, -4.0];
        let w = 0.6;
        let smoothed = ema_smooth(&xs, w);
        let mut prev = xs[0];
        for (i, &x) in xs.iter().enumerate() {
            if i > 0 {
                prev = w * prev + (1.0 - w) * x;
            }
            assert!((smoothed[i] - prev).abs() < 1e-15);
        }
    }
}
