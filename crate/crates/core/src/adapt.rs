//! The unsupervised personalisation loop: filter once, then N rounds of
//! pseudo-labelling and M epochs of perturbed training, plus the NST and
//! entropy-minimization baselines and LHUC-only training.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{spec_augment, AugmentPolicy, DropoutPolicy, DropoutScope};
use crate::corpus::{TokenId, UnlabelledUtterance, UnlabelledView};
use crate::decode::{beam_search, greedy_decode_with_alignment};
use crate::error::{Error, Result};
use crate::filter::{
    ct_filter, dust_filter, ncm_filter, DustConfig, FilteredSet, NcmModel,
};
use crate::model::{
    forward_lattice_graph, trainable_subset, transducer_loss_on_graph, ModelParams, TrainableMode,
};
use crate::numerics::{adam_step, AdamState, Gradients, Var};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Consistency constraint: augmented pseudo-labelling and augmented,
    /// dropout-perturbed training.
    #[serde(rename = "cc")]
    Cc,
    /// Noisy student: clean pseudo-labelling, augmented training.
    #[serde(rename = "nst")]
    Nst,
    /// Entropy minimization along the current greedy decode.
    #[serde(rename = "em")]
    Em,
    /// Consistency constraint updating only LHUC amplitudes.
    #[serde(rename = "cc_lhuc")]
    CcLhuc,
    /// Entropy minimization without any data filtering.
    #[serde(rename = "em_only")]
    EmOnly,
}

impl Method {
    pub fn all() -> [Method; 5] {
        [Method::Cc, Method::Nst, Method::Em, Method::CcLhuc, Method::EmOnly]
    }

    fn is_entropy(self) -> bool {
        matches!(self, Method::Em | Method::EmOnly)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Cc => "cc",
            Method::Nst => "nst",
            Method::Em => "em",
            Method::CcLhuc => "cc_lhuc",
            Method::EmOnly => "em_only",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(Method::Cc),
            "nst" => Ok(Method::Nst),
            "em" => Ok(Method::Em),
            "cc_lhuc" => Ok(Method::CcLhuc),
            "em_only" => Ok(Method::EmOnly),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (valid: cc, nst, em, cc_lhuc, em_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub method: Method,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment: AugmentPolicy,
    pub dropout: DropoutPolicy,
    pub trainable: TrainableMode,
    pub beam_width: usize,
    pub seed: u64,
}

impl AdaptationConfig {
    /// Method defaults: N=10 rounds, M=3 epochs, batch 16, beam 4, dropout
    /// 0.1 during training. LHUC-only training uses a larger rate.
    pub fn for_method(method: Method, feature_dim: usize, seed: u64) -> Self {
        let trainable = if method == Method::CcLhuc {
            TrainableMode::LhucOnly
        } else {
            TrainableMode::Full
        };
        let learning_rate = if method == Method::CcLhuc { 1e-1 } else { 1e-3 };
        AdaptationConfig {
            method,
            rounds: 10,
            epochs_per_round: 3,
            learning_rate,
            batch_size: 16,
            augment: AugmentPolicy::default_for_dims(feature_dim),
            dropout: DropoutPolicy::new(0.1, DropoutScope::all()),
            trainable,
            beam_width: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 || self.epochs_per_round < 1 {
            return Err(Error::Config("rounds and epochs_per_round must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    #[serde(rename = "augmented")]
    Augmented,
    #[serde(rename = "clean")]
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub utterance_id: String,
    pub ordinal: u64,
    pub tokens: Vec<TokenId>,
    pub round: usize,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelledSet {
    pub labels: Vec<PseudoLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: usize,
    pub mean_loss: f64,
    /// Fraction of pseudo-labels that changed vs the previous round
    /// (1.0 for the first round: every label is new).
    pub churn: f64,
    pub wer_heldin: Option<f64>,
    pub wer_heldout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundLog {
    pub entries: Vec<RoundEntry>,
}

impl RoundLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,loss,wer_heldin,wer_heldout,churn\n");
        for e in &self.entries {
            let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
            out.push_str(&format!(
                "{},{:.6},{},{},{:.4}\n",
                e.round,
                e.mean_loss,
                fmt(e.wer_heldin),
                fmt(e.wer_heldout),
                e.churn
            ));
        }
        out
    }
}

// ── Seed schedule ───────────────────────────────────────────────────────

/// Domain word separating pseudo-labelling from training augmentation.
pub const SEED_USE_LABEL: u64 = 0xA1;
pub const SEED_USE_TRAIN: u64 = 0xA2;

/// Seed for the SpecAugment applied when pseudo-labelling `ordinal` in
/// `round`.
pub fn label_seed(base: u64, round: usize, ordinal: u64) -> u64 {
    rng::combine(&[base, SEED_USE_LABEL, round as u64, ordinal])
}

/// Seed for the SpecAugment applied when training on `ordinal` in
/// (`round`, `epoch`); never collides with the same round's label seed.
pub fn train_seed(base: u64, round: usize, epoch: usize, ordinal: u64) -> u64 {
    rng::combine(&[base, SEED_USE_TRAIN, round as u64, epoch as u64, ordinal])
}

fn dropout_seed(base: u64, round: usize, epoch: usize, ordinal: u64) -> u64 {
    rng::derive_seed(base, Domain::TrainDropout, &[round as u64, epoch as u64, ordinal])
}

// ── Filtering plan ──────────────────────────────────────────────────────

/// A calibrated filter choice, ready to apply to an unlabelled view. The
/// oracle filter cannot appear here: it needs reference transcripts, so the
/// caller runs it against the corpus and passes `Precomputed`.
#[derive(Debug, Clone)]
pub enum FilterPlan {
    None,
    Ct { threshold: f64 },
    Dust(DustConfig),
    Ncm(NcmModel),
    Precomputed(FilteredSet),
}

impl FilterPlan {
    pub fn name(&self) -> &'static str {
        match self {
            FilterPlan::None => "none",
            FilterPlan::Ct { .. } => "ct",
            FilterPlan::Dust(_) => "dust",
            FilterPlan::Ncm(_) => "ncm",
            FilterPlan::Precomputed(_) => "precomputed",
        }
    }
}

/// Run the chosen filter over the view with the given parameters.
pub fn apply_filter(
    params: &ModelParams,
    view: &UnlabelledView,
    plan: &FilterPlan,
    beam_width: usize,
    seed: u64,
) -> Result<FilteredSet> {
    match plan {
        FilterPlan::None => Ok(FilteredSet::keep_all(
            view.items.iter().map(|i| i.id.to_string()),
        )),
        FilterPlan::Ct { threshold } => {
            let records = decode_view(params, view, beam_width)?;
            Ok(ct_filter(&records, *threshold))
        }
        FilterPlan::Dust(config) => {
            let dust_seed = rng::derive_seed(seed, Domain::DustDropout, &[]);
            dust_filter(params, view, config, dust_seed)
        }
        FilterPlan::Ncm(model) => {
            let records = decode_view(params, view, beam_width)?;
            ncm_filter(model, &records)
        }
        FilterPlan::Precomputed(set) => Ok(set.clone()),
    }
}

fn decode_view(
    params: &ModelParams,
    view: &UnlabelledView,
    beam_width: usize,
) -> Result<Vec<crate::decode::DecodeRecord>> {
    view.items
        .par_iter()
        .map(|item| {
            let hyps = beam_search(params, item.features, beam_width, None)?;
            Ok(crate::decode::DecodeRecord {
                utterance_id: item.id.to_string(),
                speaker_id: item.speaker_id.to_string(),
                hypothesis: hyps.into_iter().next().unwrap(),
            })
        })
        .collect()
}

// ── Pseudo-labelling ────────────────────────────────────────────────────

/// Decode pseudo-labels for the kept utterances with the current model.
/// Consistency methods perturb the features first (fresh seed per
/// utterance per round); NST labels on clean features.
pub fn pseudo_label(
    params: &ModelParams,
    view: &UnlabelledView,
    filtered: &FilteredSet,
    method: Method,
    augment: &AugmentPolicy,
    base_seed: u64,
    round: usize,
    beam_width: usize,
) -> Result<PseudoLabelledSet> {
    let items: Vec<&UnlabelledUtterance> = view
        .items
        .iter()
        .filter(|i| filtered.contains(i.id))
        .collect();
    if items.is_empty() {
        return Err(Error::Adaptation(
            "pseudo_label: empty filtered set; relax the filter".into(),
        ));
    }
    let labels: Result<Vec<PseudoLabel>> = items
        .par_iter()
        .map(|item| {
            let (features, source) = if method == Method::Nst {
                (item.features.clone(), LabelSource::Clean)
            } else {
                let seed = label_seed(base_seed, round, item.ordinal);
                (spec_augment(item.features, augment, seed), LabelSource::Augmented)
            };
            let hyps = beam_search(params, &features, beam_width, None)?;
            Ok(PseudoLabel {
                utterance_id: item.id.to_string(),
                ordinal: item.ordinal,
                tokens: hyps[0].tokens.clone(),
                round,
                source,
            })
        })
        .collect();
    Ok(PseudoLabelledSet { labels: labels? })
}

fn label_churn(current: &PseudoLabelledSet, previous: Option<&PseudoLabelledSet>) -> f64 {
    let Some(prev) = previous else {
        return 1.0;
    };
    let prev_map: BTreeMap<u64, &Vec<TokenId>> =
        prev.labels.iter().map(|l| (l.ordinal, &l.tokens)).collect();
    let changed = current
        .labels
        .iter()
        .filter(|l| prev_map.get(&l.ordinal).map_or(true, |t| *t != &l.tokens))
        .count();
    changed as f64 / current.labels.len() as f64
}

// ── Personalisation loop ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PersonaliseOutcome {
    pub params: ModelParams,
    pub round_log: RoundLog,
    /// Parameters after each round, for post-hoc per-round evaluation.
    pub round_params: Vec<ModelParams>,
    pub filtered: FilteredSet,
}

/// Algorithm: filter once with the incoming model, then run N rounds of
/// {pseudo-label with the current model; M epochs of minibatch training}.
/// Works entirely on the unlabelled view; reference transcripts are
/// unreachable from here.
pub fn personalise(
    params0: &ModelParams,
    view: &UnlabelledView,
    config: &AdaptationConfig,
    filter_plan: &FilterPlan,
) -> Result<PersonaliseOutcome> {
    config.validate()?;
    let filtered = apply_filter(params0, view, filter_plan, config.beam_width, config.seed)?;
    if filtered.kept.is_empty() {
        return Err(Error::Adaptation(format!(
            "personalise: filter {:?} kept no utterances; relax the filter",
            filter_plan.name()
        )));
    }

    let mut params = params0.clone();
    let mut adam = AdamState::new(config.learning_rate.max(f64::MIN_POSITIVE));
    let trainable = trainable_subset(&params, config.trainable);
    let mut round_log = RoundLog::default();
    let mut round_params = Vec::with_capacity(config.rounds);
    let mut previous_labels: Option<PseudoLabelledSet> = None;

    let items: BTreeMap<u64, &UnlabelledUtterance> = view
        .items
        .iter()
        .filter(|i| filtered.contains(i.id))
        .map(|i| (i.ordinal, i))
        .collect();

    for round in 0..config.rounds {
        let labels = if config.method.is_entropy() {
            decode_entropy_targets(&params, &items, round)?
        } else {
            pseudo_label(
                &params,
                view,
                &filtered,
                config.method,
                &config.augment,
                config.seed,
                round,
                config.beam_width,
            )?
        };
        let churn = label_churn(&labels, previous_labels.as_ref());

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for epoch in 0..config.epochs_per_round {
            let mut order: Vec<usize> = (0..labels.labels.len()).collect();
            {
                use rand::seq::SliceRandom;
                let mut shuffle_rng = rng::stream(
                    config.seed,
                    Domain::TrainShuffle,
                    &[round as u64, epoch as u64],
                );
                order.shuffle(&mut shuffle_rng);
            }
            for batch in order.chunks(config.batch_size) {
                let mut grads = Gradients::new();
                for &li in batch {
                    let label = &labels.labels[li];
                    let item = items[&label.ordinal];
                    let (loss, g) =
                        utterance_loss(&params, item, label, config, round, epoch)?;
                    if !loss.is_finite() {
                        return Err(Error::Adaptation(format!(
                            "personalise diverged: non-finite loss at round {round} epoch {epoch} on {}",
                            label.utterance_id
                        )));
                    }
                    loss_sum += loss;
                    loss_count += 1;
                    grads.add_assign(&g)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                // learning_rate == 0 is the documented zero-step case.
                if config.learning_rate > 0.0 {
                    adam_step(&mut params, &trainable, &grads, &mut adam)?;
                }
            }
        }

        round_log.entries.push(RoundEntry {
            round,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            churn,
            wer_heldin: None,
            wer_heldout: None,
        });
        round_params.push(params.clone());
        previous_labels = Some(labels);
    }

    Ok(PersonaliseOutcome {
        params,
        round_log,
        round_params,
        filtered,
    })
}

/// One utterance's training loss and gradients under the configured method.
fn utterance_loss(
    params: &ModelParams,
    item: &UnlabelledUtterance,
    label: &PseudoLabel,
    config: &AdaptationConfig,
    round: usize,
    epoch: usize,
) -> Result<(f64, Gradients)> {
    if config.method.is_entropy() {
        // Clean features; minimize posterior entropy along the decode path.
        let path = decode_path(params, item)?;
        let mut lg = forward_lattice_graph(params, item.features, &label.tokens, None)?;
        let (loss, var) = entropy_on_graph(&mut lg, &path)?;
        let grads = lg.graph.backward(var)?;
        return Ok((loss, grads));
    }

    let seed = train_seed(config.seed, round, epoch, item.ordinal);
    let features = spec_augment(item.features, &config.augment, seed);
    let drop_seed = dropout_seed(config.seed, round, epoch, item.ordinal);
    let dropout = (config.dropout.rate > 0.0).then_some((&config.dropout, drop_seed));
    let mut lg = forward_lattice_graph(params, &features, &label.tokens, dropout)?;
    let (loss, var) = transducer_loss_on_graph(&mut lg, &label.tokens)?;
    let grads = lg.graph.backward(var)?;
    Ok((loss, grads))
}

/// Entropy-minimization targets: the clean greedy decode per utterance.
fn decode_entropy_targets(
    params: &ModelParams,
    items: &BTreeMap<u64, &UnlabelledUtterance>,
    round: usize,
) -> Result<PseudoLabelledSet> {
    let labels: Result<Vec<PseudoLabel>> = items
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|item| {
            let (hyp, _) = greedy_decode_with_alignment(params, item.features)?;
            Ok(PseudoLabel {
                utterance_id: item.id.to_string(),
                ordinal: item.ordinal,
                tokens: hyp.tokens,
                round,
                source: LabelSource::Clean,
            })
        })
        .collect();
    Ok(PseudoLabelledSet { labels: labels? })
}

fn decode_path(
    params: &ModelParams,
    item: &UnlabelledUtterance,
) -> Result<Vec<(usize, usize)>> {
    Ok(greedy_decode_with_alignment(params, item.features)?.1)
}

/// Mean entropy of the lattice posteriors along the decode path, as a graph
/// node: -1/n * sum over path rows of sum_k p ln p.
fn entropy_on_graph(
    lg: &mut crate::model::LatticeGraph,
    path: &[(usize, usize)],
) -> Result<(f64, Var)> {
    let idx: Vec<usize> = path.iter().map(|&(t, u)| t * lg.u_len + u).collect();
    let sel = lg.graph.gather_rows(lg.lattice, &idx)?;
    let p = lg.graph.exp(sel);
    let plp = lg.graph.mul(p, sel)?;
    let s = lg.graph.sum_all(plp);
    let loss = lg.graph.scale(s, -1.0 / idx.len() as f64);
    Ok((lg.graph.value(loss).data()[0], loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, hide_references_for, CorpusConfig, Split};
    use crate::model::{ModelDims, PARAM_NAMES};
    use crate::numerics::ParamStore;

    fn tiny_setup(seed: u64) -> (crate::corpus::Corpus, ModelParams) {
        let config = CorpusConfig {
            n_pretrain_speakers: 1,
            n_perso_speakers: 1,
            pretrain_utts_per_speaker: 3,
            heldin_utts_per_speaker: 6,
            heldout_utts_per_speaker: 2,
            ..Default::default()
        };
        let corpus = generate_corpus(&config, seed).unwrap();
        let dims = ModelDims::tiny(config.feature_dim, corpus.vocabulary.size());
        let params = ModelParams::init(dims, seed);
        (corpus, params)
    }

    fn tiny_config(method: Method, rounds: usize, epochs: usize, lr: f64) -> AdaptationConfig {
        AdaptationConfig {
            method,
            rounds,
            epochs_per_round: epochs,
            learning_rate: lr,
            batch_size: 4,
            augment: AugmentPolicy::zero(),
            dropout: DropoutPolicy::new(0.0, DropoutScope::all()),
            trainable: TrainableMode::Full,
            beam_width: 2,
            seed: 7,
        }
    }

    #[test]
    fn seed_schedule_separates_label_and_train_uses() {
        for round in 0..5 {
            for epoch in 0..5 {
                for ordinal in 0..20 {
                    assert_ne!(
                        label_seed(3, round, ordinal),
                        train_seed(3, round, epoch, ordinal)
                    );
                }
            }
        }
    }

    #[test]
    fn seed_schedule_is_collision_free_across_a_corpus() {
        let mut seen = std::collections::HashSet::new();
        for round in 0..20 {
            for ordinal in 0..2000 {
                assert!(seen.insert(label_seed(9, round, ordinal)));
            }
            for epoch in 0..5 {
                for ordinal in 0..2000 {
                    assert!(seen.insert(train_seed(9, round, epoch, ordinal)));
                }
            }
        }
    }

    #[test]
    fn seed_schedule_is_deterministic() {
        assert_eq!(label_seed(1, 2, 3), label_seed(1, 2, 3));
        assert_eq!(train_seed(1, 2, 3, 4), train_seed(1, 2, 3, 4));
    }

    #[test]
    fn nst_labels_with_zero_augment_equal_clean_decode() {
        let (corpus, params) = tiny_setup(3);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let filtered = FilteredSet::keep_all(view.items.iter().map(|i| i.id.to_string()));
        let labels = pseudo_label(
            &params,
            &view,
            &filtered,
            Method::Nst,
            &AugmentPolicy::zero(),
            1,
            0,
            2,
        )
        .unwrap();
        for (label, item) in labels.labels.iter().zip(&view.items) {
            let clean = beam_search(&params, item.features, 2, None).unwrap();
            assert_eq!(label.tokens, clean[0].tokens);
            assert_eq!(label.source, LabelSource::Clean);
        }
    }

    #[test]
    fn pseudo_labels_are_reproducible() {
        let (corpus, params) = tiny_setup(4);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let filtered = FilteredSet::keep_all(view.items.iter().map(|i| i.id.to_string()));
        let policy = AugmentPolicy::default_for_dims(16);
        let a = pseudo_label(&params, &view, &filtered, Method::Cc, &policy, 5, 2, 2).unwrap();
        let b = pseudo_label(&params, &view, &filtered, Method::Cc, &policy, 5, 2, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_filtered_set_is_adaptation_error() {
        let (corpus, params) = tiny_setup(5);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let filtered = FilteredSet::default();
        assert!(matches!(
            pseudo_label(
                &params,
                &view,
                &filtered,
                Method::Cc,
                &AugmentPolicy::zero(),
                1,
                0,
                2
            ),
            Err(Error::Adaptation(_))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let (corpus, params) = tiny_setup(6);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let config = tiny_config(Method::Cc, 1, 1, 0.0);
        let out = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.round_log.entries.len(), 1);
    }

    #[test]
    fn round_log_has_exactly_n_entries_and_first_churn_is_one() {
        let (corpus, params) = tiny_setup(7);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let config = tiny_config(Method::Cc, 3, 1, 1e-3);
        let out = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        assert_eq!(out.round_log.entries.len(), 3);
        assert_eq!(out.round_params.len(), 3);
        assert_eq!(out.round_log.entries[0].churn, 1.0);
    }

    #[test]
    fn self_training_loss_decreases_without_perturbation_on_one_utterance() {
        // With zero augmentation and dropout, round-1 training fits the
        // label the model itself produced: per-epoch loss must fall.
        let (corpus, params) = tiny_setup(8);
        let corpus_view = hide_references_for(&corpus, "spk00", &[Split::HeldinA]);
        let one = UnlabelledView {
            vocab_size: corpus_view.vocab_size,
            blank_id: corpus_view.blank_id,
            items: corpus_view.items.into_iter().take(1).collect(),
        };
        let mut config = tiny_config(Method::Cc, 1, 6, 5e-3);
        config.batch_size = 1;
        let out = personalise(&params, &one, &config, &FilterPlan::None).unwrap();
        // Re-run with per-epoch granularity: epochs of one utterance each;
        // compare the first and last epoch mean losses via a second run
        // configured as 6 rounds x 1 epoch (labels refresh, but with no
        // perturbation and a converging model they stabilize).
        let config2 = tiny_config(Method::Cc, 6, 1, 5e-3);
        let out2 = personalise(&params, &one, &config2, &FilterPlan::None).unwrap();
        let losses: Vec<f64> = out2.round_log.entries.iter().map(|e| e.mean_loss).collect();
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "{losses:?}"
        );
        assert!(out.round_log.entries[0].mean_loss.is_finite());
    }

    #[test]
    fn churn_reaches_zero_once_converged() {
        let (corpus, params) = tiny_setup(9);
        let view = hide_references_for(&corpus, "spk00", &[Split::HeldinA]);
        let config = tiny_config(Method::Cc, 8, 2, 5e-3);
        let out = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        let final_churn = out.round_log.entries.last().unwrap().churn;
        assert_eq!(final_churn, 0.0, "{:?}", out.round_log.entries);
    }

    #[test]
    fn personalise_is_bitwise_reproducible() {
        let (corpus, params) = tiny_setup(10);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let mut config = tiny_config(Method::Cc, 2, 2, 1e-3);
        config.augment = AugmentPolicy::default_for_dims(16);
        config.dropout = DropoutPolicy::new(0.1, DropoutScope::all());
        let a = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        let b = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.round_log, b.round_log);
    }

    #[test]
    fn personalise_never_reads_reference_transcripts() {
        let (corpus, params) = tiny_setup(11);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        for method in Method::all() {
            let mut config = tiny_config(method, 2, 1, 1e-3);
            if method == Method::CcLhuc {
                config.trainable = TrainableMode::LhucOnly;
            }
            let before = crate::corpus::audit::reference_reads();
            personalise(&params, &view, &config, &FilterPlan::None).unwrap();
            let after = crate::corpus::audit::reference_reads();
            assert_eq!(before, after, "method {method} read references");
        }
    }

    #[test]
    fn lhuc_only_training_freezes_everything_else() {
        let (corpus, params) = tiny_setup(12);
        let view = hide_references_for(&corpus, "spk00", &Split::heldin());
        let mut config = tiny_config(Method::CcLhuc, 2, 2, 1e-2);
        config.trainable = TrainableMode::LhucOnly;
        let out = personalise(&params, &view, &config, &FilterPlan::None).unwrap();
        for name in PARAM_NAMES {
            let before = params.param(name).unwrap();
            let after = out.params.param(name).unwrap();
            if name.contains("lhuc") {
                assert_ne!(before, after, "{name} should have trained");
            } else {
                assert_eq!(before, after, "{name} must be untouched");
            }
        }
    }

    #[test]
    fn entropy_method_does_not_increase_mean_entropy_in_one_round() {
        let (corpus, params) = tiny_setup(13);
        let view = hide_references_for(&corpus, "spk00", &[Split::HeldinA]);
        let mut config = tiny_config(Method::EmOnly, 1, 1, 1e-4);
        config.batch_size = 64; // single batch
        let out = personalise(&params, &view, &config, &FilterPlan::None).unwrap();

        // Recompute mean path entropy before and after the single step.
        let mean_entropy = |p: &ModelParams| -> f64 {
            let mut total = 0.0;
            let mut n = 0;
            for item in &view.items {
                let (hyp, path) = greedy_decode_with_alignment(p, item.features).unwrap();
                let lat =
                    crate::model::forward_lattice(p, item.features, &hyp.tokens, None).unwrap();
                for (t, u) in path {
                    let row = lat.node(t, u);
                    total -= row.iter().map(|lp| lp.exp() * lp).sum::<f64>();
                    n += 1;
                }
            }
            total / n as f64
        };
        let before = mean_entropy(&params);
        let after = mean_entropy(&out.params);
        assert!(after <= before + 1e-9, "{before} -> {after}");
    }

    #[test]
    fn round_log_csv_shape() {
        let log = RoundLog {
            entries: vec![RoundEntry {
                round: 0,
                mean_loss: 1.5,
                churn: 1.0,
                wer_heldin: Some(25.0),
                wer_heldout: None,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("round,loss,wer_heldin,wer_heldout,churn\n"));
        assert!(csv.contains("0,1.500000,25.0000,,1.0000"));
    }
}
