//! High-level flows shared by the CLI and the acceptance suite: supervised
//! pre-training on the pretrain split, filter calibration, per-speaker
//! personalisation, per-round WER back-fill, and the rounds-by-epochs sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{personalise, AdaptationConfig, FilterPlan, Method, PersonaliseOutcome};
use crate::augment::{spec_augment, AugmentPolicy, DropoutPolicy, DropoutScope};
use crate::corpus::{hide_references_for, Corpus, Split, Utterance};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::eval::{ema_smooth, evaluate_wer, werr};
use crate::filter::{
    calibration_records, ct_calibrate, ncm_train, oracle_filter, DustConfig, NcmInput,
    NcmModel, NcmTrainConfig,
};
use crate::model::{
    forward_lattice_graph, transducer_loss_on_graph, ModelDims, ModelParams, TrainableMode,
};
use crate::numerics::{adam_step, AdamState, Gradients};
use crate::rng::{self, Domain};

// ── Pre-training ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once validation WER (percent) reaches this target.
    pub target_wer: f64,
    /// Pretrain-split utterances reserved for validation.
    pub validation_utterances: usize,
    /// Pretrain-split utterances reserved for CT/NCM calibration.
    pub calibration_utterances: usize,
    pub augment: AugmentPolicy,
    pub dropout: DropoutPolicy,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn default_for(feature_dim: usize, seed: u64) -> Self {
        PretrainConfig {
            learning_rate: 2e-3,
            batch_size: 16,
            max_epochs: 60,
            target_wer: 5.0,
            validation_utterances: 120,
            calibration_utterances: 400,
            augment: AugmentPolicy::default_for_dims(feature_dim),
            dropout: DropoutPolicy::new(0.1, DropoutScope::all()),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_wer: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<PretrainEpoch>,
    pub reached_target: bool,
}

/// Pretrain-split partition: training utterances, a validation slice, and
/// a calibration slice (all in corpus order, trailing slices reserved).
pub fn partition_pretrain<'a>(
    corpus: &'a Corpus,
    config: &PretrainConfig,
) -> (Vec<&'a Utterance>, Vec<&'a Utterance>, Vec<&'a Utterance>) {
    let all = corpus.split_utterances(Split::Pretrain);
    let n = all.len();
    let n_calib = config.calibration_utterances.min(n / 2);
    let n_val = config.validation_utterances.min((n - n_calib) / 2);
    let train_end = n - n_calib - n_val;
    (
        all[..train_end].to_vec(),
        all[train_end..train_end + n_val].to_vec(),
        all[train_end + n_val..].to_vec(),
    )
}

/// Supervised pre-training on the pretrain split (references permitted
/// here: this phase is not unsupervised). Stops at the validation target.
pub fn pretrain(corpus: &Corpus, config: &PretrainConfig) -> Result<PretrainOutcome> {
    let (train, validation, _) = partition_pretrain(corpus, config);
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config("pretrain: empty train or validation slice".into()));
    }
    let dims = ModelDims::desk(corpus.feature_dim(), corpus.vocabulary.size());
    let mut params = ModelParams::init(dims, config.seed);
    let mut adam = AdamState::new(config.learning_rate);
    let trainable = crate::model::trainable_subset(&params, TrainableMode::Full);

    let references: Vec<Vec<usize>> = train.iter().map(|u| u.reference().to_vec()).collect();
    let mut curve = Vec::new();
    let mut reached_target = false;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng =
                rng::stream(config.seed, Domain::PretrainShuffle, &[epoch as u64]);
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            // Per-utterance losses are independent; compute them in
            // parallel and apply the averaged gradient sequentially.
            let results: Result<Vec<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let u = train[i];
                    let aug_seed = rng::derive_seed(
                        config.seed,
                        Domain::PretrainAugment,
                        &[epoch as u64, u.ordinal],
                    );
                    let feats = spec_augment(&u.features, &config.augment, aug_seed);
                    let drop_seed = rng::derive_seed(
                        config.seed,
                        Domain::PretrainDropout,
                        &[epoch as u64, u.ordinal],
                    );
                    let dropout =
                        (config.dropout.rate > 0.0).then_some((&config.dropout, drop_seed));
                    let mut lg = forward_lattice_graph(&params, &feats, &references[i], dropout)?;
                    let (loss, var) = transducer_loss_on_graph(&mut lg, &references[i])?;
                    let grads = lg.graph.backward(var)?;
                    Ok((loss, grads))
                })
                .collect();
            let mut grads = Gradients::new();
            let mut n = 0usize;
            for (loss, g) in results? {
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "pretrain diverged at epoch {epoch}"
                    )));
                }
                loss_sum += loss;
                grads.add_assign(&g)?;
                n += 1;
            }
            grads.scale(1.0 / n as f64);
            adam_step(&mut params, &trainable, &grads, &mut adam)?;
        }

        let validation_wer = evaluate_wer(&params, &validation, 1)?;
        curve.push(PretrainEpoch {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            validation_wer,
        });
        if validation_wer <= config.target_wer {
            reached_target = true;
            break;
        }
    }

    Ok(PretrainOutcome {
        params,
        curve,
        reached_target,
    })
}

// ── Filter calibration ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FilterCalibration {
    pub ct_threshold: f64,
    pub ncm: NcmModel,
    pub ncm_validation_accuracy: f64,
}

/// Calibrate CT and train the NCM on beam decodes of the held-back
/// calibration slice of the pretrain split.
pub fn calibrate_filters(
    params: &ModelParams,
    corpus: &Corpus,
    pretrain_config: &PretrainConfig,
    beam_width: usize,
    seed: u64,
) -> Result<FilterCalibration> {
    let (_, _, calibration) = partition_pretrain(corpus, pretrain_config);
    if calibration.is_empty() {
        return Err(Error::Config("calibrate_filters: empty calibration slice".into()));
    }
    let records = calibration_records(params, &calibration, beam_width)?;
    let ct_pairs: Vec<(f64, f64)> = records
        .iter()
        .map(|c| (crate::decode::confidence_score(&c.record.hypothesis), c.wer))
        .collect();
    let ct_threshold = ct_calibrate(&ct_pairs)?;

    let examples: Vec<(NcmInput, bool)> = records
        .iter()
        .map(|c| (NcmInput::from_hypothesis(&c.record.hypothesis), c.wer == 0.0))
        .collect();
    let outcome = ncm_train(&examples, &NcmTrainConfig::default(), seed)?;
    Ok(FilterCalibration {
        ct_threshold,
        ncm: outcome.model,
        ncm_validation_accuracy: outcome.validation_accuracy,
    })
}

// ── Per-speaker personalisation ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ct")]
    Ct,
    #[serde(rename = "dust")]
    Dust,
    #[serde(rename = "ncm")]
    Ncm,
    #[serde(rename = "oracle")]
    Oracle,
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FilterKind::None),
            "ct" => Ok(FilterKind::Ct),
            "dust" => Ok(FilterKind::Dust),
            "ncm" => Ok(FilterKind::Ncm),
            "oracle" => Ok(FilterKind::Oracle),
            other => Err(Error::Config(format!(
                "unknown filter {other:?} (valid: none, ct, dust, ncm, oracle)"
            ))),
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FilterKind::None => "none",
            FilterKind::Ct => "ct",
            FilterKind::Dust => "dust",
            FilterKind::Ncm => "ncm",
            FilterKind::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

/// Materialize a filter plan for one speaker. The oracle variant reads
/// references here (ablation context), so `personalise` itself stays
/// reference-free.
pub fn build_filter_plan(
    kind: FilterKind,
    params: &ModelParams,
    corpus: &Corpus,
    speaker: &str,
    calibration: Option<&FilterCalibration>,
    dust: &DustConfig,
    beam_width: usize,
) -> Result<FilterPlan> {
    match kind {
        FilterKind::None => Ok(FilterPlan::None),
        FilterKind::Dust => Ok(FilterPlan::Dust(*dust)),
        FilterKind::Ct => {
            let calib = calibration.ok_or_else(|| {
                Error::Contract("ct filter requires calibration".into())
            })?;
            Ok(FilterPlan::Ct {
                threshold: calib.ct_threshold,
            })
        }
        FilterKind::Ncm => {
            let calib = calibration.ok_or_else(|| {
                Error::Contract("ncm filter requires calibration".into())
            })?;
            Ok(FilterPlan::Ncm(calib.ncm.clone()))
        }
        FilterKind::Oracle => {
            let utts = corpus.utterances_of(speaker, &Split::heldin());
            let set = oracle_filter(params, &utts, beam_width)?;
            Ok(FilterPlan::Precomputed(set))
        }
    }
}

/// Run the full unsupervised loop for one speaker.
pub fn personalise_speaker(
    corpus: &Corpus,
    pretrained: &ModelParams,
    speaker: &str,
    config: &AdaptationConfig,
    filter_kind: FilterKind,
    calibration: Option<&FilterCalibration>,
    dust: &DustConfig,
) -> Result<PersonaliseOutcome> {
    let plan = build_filter_plan(
        filter_kind,
        pretrained,
        corpus,
        speaker,
        calibration,
        dust,
        config.beam_width,
    )?;
    let view = hide_references_for(corpus, speaker, &Split::heldin());
    personalise(pretrained, &view, config, &plan)
}

/// Fill per-round held-in/held-out WER columns from the round checkpoints
/// (privileged evaluation, after the unsupervised loop finished).
pub fn fill_round_wers(
    corpus: &Corpus,
    speaker: &str,
    outcome: &mut PersonaliseOutcome,
    beam_width: usize,
) -> Result<()> {
    let heldin = corpus.utterances_of(speaker, &Split::heldin());
    let heldout = corpus.utterances_of(speaker, &[Split::Heldout]);
    for (entry, params) in outcome
        .round_log
        .entries
        .iter_mut()
        .zip(&outcome.round_params)
    {
        entry.wer_heldin = Some(evaluate_wer(params, &heldin, beam_width)?);
        if !heldout.is_empty() {
            entry.wer_heldout = Some(evaluate_wer(params, &heldout, beam_width)?);
        }
    }
    Ok(())
}

// ── Sweep (rounds x epochs grid) ────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub epochs_choices: Vec<usize>,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub beam_width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            methods: vec![Method::Cc, Method::Nst],
            epochs_choices: vec![1, 3, 5],
            rounds: 20,
            seeds: vec![0],
            beam_width: 4,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub epochs_per_round: usize,
    pub seed: u64,
    pub round: usize,
    pub split: String,
    pub wer: f64,
    pub werr: f64,
    pub werr_smoothed: f64,
}

/// Filter used for each method in comparisons: the proposed method runs on
/// NCM-filtered data, NST on unfiltered data.
pub fn comparison_filter(method: Method) -> FilterKind {
    match method {
        Method::Cc | Method::CcLhuc | Method::Em => FilterKind::Ncm,
        Method::Nst | Method::EmOnly => FilterKind::None,
    }
}

/// Grid over methods x epochs-per-round x seeds, tracking pooled WERR per
/// round on held-in and held-out data, with EMA(0.6)-smoothed series.
pub fn sweep(
    corpus: &Corpus,
    pretrained: &ModelParams,
    calibration: &FilterCalibration,
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let speakers: Vec<String> = corpus
        .personalisation_speakers()
        .into_iter()
        .map(String::from)
        .collect();
    let heldin: BTreeMap<&str, Vec<&Utterance>> = speakers
        .iter()
        .map(|s| (s.as_str(), corpus.utterances_of(s, &Split::heldin())))
        .collect();
    let heldout: BTreeMap<&str, Vec<&Utterance>> = speakers
        .iter()
        .map(|s| (s.as_str(), corpus.utterances_of(s, &[Split::Heldout])))
        .collect();

    let pooled_wer = |by_speaker: &BTreeMap<&str, Vec<&Utterance>>,
                      params_of: &dyn Fn(&str) -> ModelParams|
     -> Result<f64> {
        let mut dist = 0usize;
        let mut n_ref = 0usize;
        for speaker in &speakers {
            let params = params_of(speaker);
            let utts = &by_speaker[speaker.as_str()];
            let counts: Result<Vec<usize>> = utts
                .par_iter()
                .map(|u| {
                    let hyps = beam_search(&params, &u.features, config.beam_width, None)?;
                    Ok(crate::eval::edit_distance(u.reference(), &hyps[0].tokens).distance)
                })
                .collect();
            dist += counts?.iter().sum::<usize>();
            n_ref += utts.iter().map(|u| u.reference().len()).sum::<usize>();
        }
        Ok(dist as f64 / n_ref as f64 * 100.0)
    };

    let base_heldin = pooled_wer(&heldin, &|_| pretrained.clone())?;
    let base_heldout = pooled_wer(&heldout, &|_| pretrained.clone())?;

    let mut rows = Vec::new();
    for &method in &config.methods {
        let filter_kind = comparison_filter(method);
        for &epochs in &config.epochs_choices {
            for &seed in &config.seeds {
                // Personalise every speaker, keeping per-round params.
                let outcomes: Result<Vec<PersonaliseOutcome>> = speakers
                    .par_iter()
                    .map(|speaker| {
                        let mut acfg =
                            AdaptationConfig::for_method(method, corpus.feature_dim(), seed);
                        acfg.rounds = config.rounds;
                        acfg.epochs_per_round = epochs;
                        acfg.learning_rate = config.learning_rate;
                        acfg.batch_size = config.batch_size;
                        acfg.beam_width = config.beam_width;
                        personalise_speaker(
                            corpus,
                            pretrained,
                            speaker,
                            &acfg,
                            filter_kind,
                            Some(calibration),
                            &DustConfig::default(),
                        )
                    })
                    .collect();
                let outcomes = outcomes?;
                let by_speaker: BTreeMap<&str, &PersonaliseOutcome> = speakers
                    .iter()
                    .map(String::as_str)
                    .zip(outcomes.iter())
                    .collect();

                let mut series: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for round in 0..config.rounds {
                    let params_of = |speaker: &str| -> ModelParams {
                        by_speaker[speaker].round_params[round].clone()
                    };
                    let w_in = pooled_wer(&heldin, &params_of)?;
                    let w_out = pooled_wer(&heldout, &params_of)?;
                    series.entry("heldin").or_default().push(w_in);
                    series.entry("heldout").or_default().push(w_out);
                }
                for (split, wers) in series {
                    let baseline = if split == "heldin" {
                        base_heldin
                    } else {
                        base_heldout
                    };
                    let werrs: Vec<f64> = wers
                        .iter()
                        .map(|&w| werr(baseline, w))
                        .collect::<Result<_>>()?;
                    let smoothed = ema_smooth(&werrs, 0.6);
                    for round in 0..config.rounds {
                        rows.push(SweepRow {
                            method,
                            epochs_per_round: epochs,
                            seed,
                            round,
                            split: split.to_string(),
                            wer: wers[round],
                            werr: werrs[round],
                            werr_smoothed: smoothed[round],
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("method,epochs_per_round,seed,round,split,wer,werr,werr_smoothed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.method, r.epochs_per_round, r.seed, r.round, r.split, r.wer, r.werr, r.werr_smoothed
        ));
    }
    out
}
