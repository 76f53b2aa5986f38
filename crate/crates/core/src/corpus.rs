//! Synthetic multi-speaker corpus with controlled per-speaker domain shift.
//!
//! Each vocabulary token owns a prototype vector in feature space. An
//! utterance is a concatenation of per-token segments (prototype plus noise),
//! passed through the speaker's affine transform. Three small command
//! grammars feed the splits: two held-in grammars used (unlabelled) during
//! personalisation and one held-out grammar never seen by adaptation.
//!
//! Reference transcripts are stored but type-gated: adaptation code receives
//! an [`UnlabelledView`] that carries no references, and every privileged
//! read through [`Utterance::reference`] is counted in [`audit`] so tests can
//! assert the unsupervised contract.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Tensor};
use crate::rng::{self, Domain};

pub type TokenId = usize;

/// Privileged-access accounting for reference transcripts.
pub mod audit {
    use std::sync::atomic::{AtomicU64, Ordering};

    static REF_READS: AtomicU64 = AtomicU64::new(0);

    pub(super) fn record_read() {
        REF_READS.fetch_add(1, Ordering::Relaxed);
    }

    /// Total number of reference-transcript reads in this process.
    pub fn reference_reads() -> u64 {
        REF_READS.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "heldin_A")]
    HeldinA,
    #[serde(rename = "heldin_B")]
    HeldinB,
    #[serde(rename = "heldout")]
    Heldout,
}

impl Split {
    pub fn heldin() -> [Split; 2] {
        [Split::HeldinA, Split::HeldinB]
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Pretrain => "pretrain",
            Split::HeldinA => "heldin_A",
            Split::HeldinB => "heldin_B",
            Split::Heldout => "heldout",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "heldin_A" => Ok(Split::HeldinA),
            "heldin_B" => Ok(Split::HeldinB),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Ordered word list; the transducer blank is the extra id `size()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if tokens.len() < 2 {
            return Err(Error::Config("vocabulary needs at least 2 tokens".into()));
        }
        for t in &tokens {
            if !seen.insert(t.clone()) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Blank id sits one past the last real token.
    pub fn blank_id(&self) -> TokenId {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    /// Corpus-unique index used by seed schedules.
    pub ordinal: u64,
    pub speaker_id: String,
    pub split: Split,
    /// T x F feature matrix.
    pub features: Tensor,
    reference: Vec<TokenId>,
}

impl Utterance {
    pub fn new(
        id: String,
        ordinal: u64,
        speaker_id: String,
        split: Split,
        features: Tensor,
        reference: Vec<TokenId>,
    ) -> Self {
        Utterance {
            id,
            ordinal,
            speaker_id,
            split,
            features,
            reference,
        }
    }

    /// Privileged accessor: evaluation, oracle filtering, and supervised
    /// pre-training only. Every call is counted in [`audit`].
    pub fn reference(&self) -> &[TokenId] {
        audit::record_read();
        &self.reference
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// F x F scaled rotation (nonsingular by construction).
    pub affine_transform: Tensor,
    /// Length-F bias.
    pub bias: Tensor,
    pub noise_sigma: f64,
    /// True for speakers reserved for personalisation.
    pub personalisation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    pub utterances: Vec<Utterance>,
    pub profiles: Vec<SpeakerProfile>,
}

impl Corpus {
    pub fn speakers(&self, personalisation: bool) -> Vec<&str> {
        self.profiles
            .iter()
            .filter(|p| p.personalisation == personalisation)
            .map(|p| p.speaker_id.as_str())
            .collect()
    }

    pub fn personalisation_speakers(&self) -> Vec<&str> {
        self.speakers(true)
    }

    pub fn utterances_of(&self, speaker_id: &str, splits: &[Split]) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker_id == speaker_id && splits.contains(&u.split))
            .collect()
    }

    pub fn split_utterances(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.cols())
    }
}

/// Features-only record exposed to adaptation code.
#[derive(Debug, Clone, Serialize)]
pub struct UnlabelledUtterance<'a> {
    pub id: &'a str,
    pub ordinal: u64,
    pub speaker_id: &'a str,
    pub split: Split,
    pub features: &'a Tensor,
}

/// Features-only view of a corpus; carries no reference transcripts.
#[derive(Debug, Clone, Serialize)]
pub struct UnlabelledView<'a> {
    pub vocab_size: usize,
    pub blank_id: TokenId,
    pub items: Vec<UnlabelledUtterance<'a>>,
}

impl<'a> UnlabelledView<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Strip references from a corpus.
pub fn hide_references(corpus: &Corpus) -> UnlabelledView<'_> {
    view_of(corpus, |_| true)
}

/// Features-only view of one speaker's utterances in the given splits.
pub fn hide_references_for<'a>(
    corpus: &'a Corpus,
    speaker_id: &str,
    splits: &[Split],
) -> UnlabelledView<'a> {
    view_of(corpus, |u| {
        u.speaker_id == speaker_id && splits.contains(&u.split)
    })
}

fn view_of<'a>(corpus: &'a Corpus, keep: impl Fn(&Utterance) -> bool) -> UnlabelledView<'a> {
    UnlabelledView {
        vocab_size: corpus.vocabulary.size(),
        blank_id: corpus.vocabulary.blank_id(),
        items: corpus
            .utterances
            .iter()
            .filter(|u| keep(u))
            .map(|u| UnlabelledUtterance {
                id: &u.id,
                ordinal: u.ordinal,
                speaker_id: &u.speaker_id,
                split: u.split,
                features: &u.features,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_pretrain_speakers: usize,
    pub n_perso_speakers: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub pretrain_utts_per_speaker: usize,
    pub heldin_utts_per_speaker: usize,
    pub heldout_utts_per_speaker: usize,
    /// Global scale on per-speaker domain shift.
    pub shift_magnitude: f64,
    /// Per-frame noise around token prototypes, before the speaker transform.
    pub proto_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_pretrain_speakers: 8,
            n_perso_speakers: 12,
            vocab_size: 40,
            feature_dim: 16,
            pretrain_utts_per_speaker: 150,
            heldin_utts_per_speaker: 120,
            heldout_utts_per_speaker: 40,
            shift_magnitude: 1.0,
            proto_noise: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pretrain_speakers < 1 || self.n_perso_speakers < 1 {
            return Err(Error::Config("need at least one speaker per group".into()));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config("vocab_size must be >= 8".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.shift_magnitude < 0.0 || self.proto_noise < 0.0 {
            return Err(Error::Config("noise knobs must be non-negative".into()));
        }
        Ok(())
    }
}

// ── Grammars ────────────────────────────────────────────────────────────

/// Mild per-speaker variation applied to pretrain speakers, independent of
/// the shift knob so the pretrain distribution stays put.
const PRETRAIN_VARIATION: f64 = 0.1;
const MAX_ROTATION_RAD: f64 = 0.6;
const BIAS_SCALE: f64 = 0.25;
const SPEAKER_NOISE: f64 = 0.08;
const MAX_NOISE_SIGMA: f64 = 1.0;
const MIN_TOKEN_FRAMES: usize = 3;
const MAX_TOKEN_FRAMES: usize = 8;

#[derive(Clone, Copy)]
enum Item {
    Word(&'static str),
    /// Slot filled with 1..=max content words of the grammar.
    Slot { max: usize },
}

struct Grammar {
    templates: &'static [&'static [Item]],
}

use Item::{Slot, Word};

const APPS_TEMPLATES: &[&[Item]] = &[
    &[Word("open"), Slot { max: 2 }],
    &[Word("launch"), Slot { max: 2 }],
    &[Word("install"), Slot { max: 2 }],
    &[Word("close"), Slot { max: 1 }],
    &[Word("update"), Slot { max: 1 }],
];

const CONTACTS_TEMPLATES: &[&[Item]] = &[
    &[Word("call"), Slot { max: 2 }],
    &[Word("text"), Slot { max: 1 }],
    &[Word("dial"), Slot { max: 1 }],
    &[Word("send"), Word("message"), Word("to"), Slot { max: 2 }],
];

const DICTATION_TEMPLATES: &[&[Item]] = &[
    &[Word("set"), Word("alarm"), Word("for"), Slot { max: 1 }],
    &[Word("what"), Word("time"), Word("is"), Word("it")],
    &[Word("play"), Slot { max: 2 }],
    &[Word("stop"), Word("the"), Word("timer")],
    &[Word("weather"), Word("today")],
    &[Word("set"), Word("timer"), Word("for"), Slot { max: 1 }],
];

const CARRIER_WORDS: &[&str] = &[
    "open", "launch", "install", "close", "update", // apps
    "call", "text", "dial", "send", "message", "to", // contacts
    "set", "alarm", "for", "what", "time", "is", "it", "play", "stop", "the", "timer",
    "weather", "today", // dictation
];

const SYLLABLES: &[&str] = &[
    "ba", "do", "ki", "lu", "men", "ra", "so", "ti", "vo", "zen", "pa", "ne", "gor", "mi", "ul",
];

fn grammar_for(split: Split) -> Grammar {
    match split {
        Split::HeldinA => Grammar {
            templates: APPS_TEMPLATES,
        },
        Split::HeldinB => Grammar {
            templates: CONTACTS_TEMPLATES,
        },
        Split::Heldout => Grammar {
            templates: DICTATION_TEMPLATES,
        },
        Split::Pretrain => unreachable!("pretrain cycles the three grammars"),
    }
}

/// Build the vocabulary: fixed carrier words plus generated pseudowords.
fn build_vocabulary(config: &CorpusConfig, seed: u64) -> Result<Vocabulary> {
    let n_content = config
        .vocab_size
        .checked_sub(CARRIER_WORDS.len())
        .unwrap_or(0);
    if n_content < 6 {
        return Err(Error::Config(format!(
            "vocabulary too small for grammars: need >= {} tokens, got {}",
            CARRIER_WORDS.len() + 6,
            config.vocab_size
        )));
    }
    let mut rng = rng::stream(seed, Domain::CorpusVocab, &[0]);
    let mut tokens: Vec<String> = CARRIER_WORDS.iter().map(|s| s.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    while tokens.len() < config.vocab_size {
        let n_syll = rng.gen_range(2..=3);
        let word: String = (0..n_syll)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
            .collect();
        if seen.insert(word.clone()) {
            tokens.push(word);
        }
    }
    Vocabulary::new(tokens)
}

/// Content ids for each grammar: the generated (non-carrier) tokens are dealt
/// round-robin to apps / contacts / dictation so the pools are disjoint.
fn content_pools(vocab: &Vocabulary) -> [Vec<TokenId>; 3] {
    let mut pools: [Vec<TokenId>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, id) in (CARRIER_WORDS.len()..vocab.size()).enumerate() {
        pools[i % 3].push(id);
    }
    pools
}

fn pool_index(split: Split) -> usize {
    match split {
        Split::HeldinA => 0,
        Split::HeldinB => 1,
        Split::Heldout => 2,
        Split::Pretrain => unreachable!(),
    }
}

/// Per-token prototype vectors (|V| x F), derived from the corpus seed alone.
pub fn token_prototypes(config: &CorpusConfig, seed: u64) -> Result<Tensor> {
    let mut rng = rng::stream(seed, Domain::CorpusVocab, &[1]);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let data = (0..config.vocab_size * config.feature_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    Tensor::from_vec(&[config.vocab_size, config.feature_dim], data)
}

fn sample_sentence(split: Split, pools: &[Vec<TokenId>; 3], vocab: &Vocabulary, rng: &mut impl Rng) -> Vec<TokenId> {
    let grammar = grammar_for(split);
    let template = grammar.templates[rng.gen_range(0..grammar.templates.len())];
    let pool = &pools[pool_index(split)];
    let mut out = Vec::new();
    for item in template {
        match item {
            Word(w) => out.push(vocab.id_of(w).expect("carrier word in vocabulary")),
            Slot { max } => {
                let n = rng.gen_range(1..=*max);
                for _ in 0..n {
                    out.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
        }
    }
    out
}

/// Scaled-rotation speaker transform, smooth in the magnitude `m` so that
/// displacement grows monotonically with the shift knob.
fn speaker_profile(
    speaker_id: String,
    personalisation: bool,
    magnitude: f64,
    feature_dim: usize,
    seed: u64,
    speaker_index: u64,
) -> SpeakerProfile {
    let mut rng = rng::stream(seed, Domain::CorpusSpeaker, &[speaker_index]);
    let f = feature_dim;

    // Disjoint random planes, one Givens rotation each; angles scale with m.
    let mut axes: Vec<usize> = (0..f).collect();
    axes.shuffle(&mut rng);
    let mut rot = Tensor::zeros(&[f, f]);
    for i in 0..f {
        rot.data_mut()[i * f + i] = 1.0;
    }
    for pair in axes.chunks(2) {
        if pair.len() < 2 {
            break;
        }
        let (a, b) = (pair[0], pair[1]);
        let theta = magnitude * rng.gen_range(-MAX_ROTATION_RAD..MAX_ROTATION_RAD);
        let (c, s) = (theta.cos(), theta.sin());
        // Apply the plane rotation to rot in place (right-multiplication).
        for r in 0..f {
            let va = rot.at(r, a);
            let vb = rot.at(r, b);
            rot.data_mut()[r * f + a] = c * va - s * vb;
            rot.data_mut()[r * f + b] = s * va + c * vb;
        }
    }
    let scale = (1.0 + magnitude * rng.gen_range(-0.3..0.3)).clamp(0.2, 3.0);
    let affine = rot.scale(scale);

    let normal = Normal::new(0.0, BIAS_SCALE).expect("valid sigma");
    let bias_data: Vec<f64> = (0..f).map(|_| magnitude * normal.sample(&mut rng)).collect();
    let bias = Tensor::from_vec(&[f], bias_data).expect("finite bias");
    let noise_sigma = (magnitude * SPEAKER_NOISE).clamp(0.0, MAX_NOISE_SIGMA);

    SpeakerProfile {
        speaker_id,
        affine_transform: affine,
        bias,
        noise_sigma,
        personalisation,
    }
}

/// Shift magnitude for personalisation speaker `k` of `n`: spread over
/// [0.4, 1.6] x shift_magnitude so per-speaker pseudo-label quality varies.
fn perso_magnitude(config: &CorpusConfig, k: usize) -> f64 {
    let n = config.n_perso_speakers;
    let spread = if n <= 1 {
        1.0
    } else {
        0.4 + 1.2 * (k as f64) / ((n - 1) as f64)
    };
    config.shift_magnitude * spread
}

fn synth_utterance(
    reference: &[TokenId],
    prototypes: &Tensor,
    profile: &SpeakerProfile,
    proto_noise: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &tok in reference {
        let dur = rng.gen_range(MIN_TOKEN_FRAMES..=MAX_TOKEN_FRAMES);
        for _ in 0..dur {
            let row: Vec<f64> = prototypes
                .row(tok)
                .iter()
                .map(|&p| p + proto_noise * normal.sample(rng))
                .collect();
            rows.push(row);
        }
    }
    let raw = Tensor::from_rows(&rows).expect("finite features");
    // x -> A x + b + sigma * eps, applied row-wise.
    let transformed = matmul(&raw, &profile.affine_transform.transpose()).expect("shape");
    let mut out = transformed;
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += profile.bias.data()[j] + profile.noise_sigma * normal.sample(rng);
        }
    }
    out
}

/// Generate a full corpus, deterministically from (config, seed).
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocabulary = build_vocabulary(config, seed)?;
    let prototypes = token_prototypes(config, seed)?;
    let pools = content_pools(&vocabulary);

    let mut profiles = Vec::new();
    let mut utterances = Vec::new();
    let mut ordinal: u64 = 0;

    for k in 0..config.n_pretrain_speakers {
        let speaker_id = format!("pre{k:02}");
        let profile = speaker_profile(
            speaker_id.clone(),
            false,
            PRETRAIN_VARIATION,
            config.feature_dim,
            seed,
            k as u64,
        );
        let mut rng = rng::stream(seed, Domain::CorpusUtterance, &[k as u64, 0]);
        for i in 0..config.pretrain_utts_per_speaker {
            // Cycle the three grammars so pre-training covers all of them.
            let split_for_text = match i % 3 {
                0 => Split::HeldinA,
                1 => Split::HeldinB,
                _ => Split::Heldout,
            };
            let reference = sample_sentence(split_for_text, &pools, &vocabulary, &mut rng);
            let features =
                synth_utterance(&reference, &prototypes, &profile, config.proto_noise, &mut rng);
            utterances.push(Utterance::new(
                format!("{speaker_id}_pretrain_{i:04}"),
                ordinal,
                speaker_id.clone(),
                Split::Pretrain,
                features,
                reference,
            ));
            ordinal += 1;
        }
        profiles.push(profile);
    }

    for k in 0..config.n_perso_speakers {
        let speaker_id = format!("spk{k:02}");
        let profile = speaker_profile(
            speaker_id.clone(),
            true,
            perso_magnitude(config, k),
            config.feature_dim,
            seed,
            1000 + k as u64,
        );
        let mut rng = rng::stream(seed, Domain::CorpusUtterance, &[1000 + k as u64, 0]);
        let half = config.heldin_utts_per_speaker / 2;
        let plan = [
            (Split::HeldinA, half),
            (Split::HeldinB, config.heldin_utts_per_speaker - half),
            (Split::Heldout, config.heldout_utts_per_speaker),
        ];
        for (split, count) in plan {
            for i in 0..count {
                let reference = sample_sentence(split, &pools, &vocabulary, &mut rng);
                let features = synth_utterance(
                    &reference,
                    &prototypes,
                    &profile,
                    config.proto_noise,
                    &mut rng,
                );
                utterances.push(Utterance::new(
                    format!("{speaker_id}_{split}_{i:04}"),
                    ordinal,
                    speaker_id.clone(),
                    split,
                    features,
                    reference,
                ));
                ordinal += 1;
            }
        }
        profiles.push(profile);
    }

    Ok(Corpus {
        vocabulary,
        utterances,
        profiles,
    })
}

// ── Serialization ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    vocabulary: Vocabulary,
    profiles: Vec<SpeakerProfile>,
}

const CORPUS_FORMAT: &str = "perso-corpus";
const CORPUS_VERSION: u32 = 1;

/// Write a corpus as UTF-8 JSON lines: one header line, one line per
/// utterance.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        vocabulary: corpus.vocabulary.clone(),
        profiles: corpus.profiles.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    for u in &corpus.utterances {
        serde_json::to_writer(&mut w, u).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a corpus written by [`save_corpus`]. Malformed lines report their
/// 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            msg: "empty file, expected header".into(),
        })?
        .map_err(Error::Io)?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "unsupported corpus format {}/{}",
                header.format, header.version
            ),
        });
    }

    let mut utterances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        utterances.push(u);
    }
    Ok(Corpus {
        vocabulary: header.vocabulary,
        utterances,
        profiles: header.profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_pretrain_speakers: 2,
            n_perso_speakers: 3,
            pretrain_utts_per_speaker: 12,
            heldin_utts_per_speaker: 10,
            heldout_utts_per_speaker: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        let a = generate_corpus(&config, 5).unwrap();
        let b = generate_corpus(&config, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&config, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_speaker_features_equal_prototype_concatenation() {
        let config = CorpusConfig {
            proto_noise: 0.0,
            ..small_config()
        };
        let prototypes = token_prototypes(&config, 3).unwrap();
        let vocab = build_vocabulary(&config, 3).unwrap();
        let mut identity = Tensor::zeros(&[config.feature_dim, config.feature_dim]);
        for i in 0..config.feature_dim {
            identity.data_mut()[i * config.feature_dim + i] = 1.0;
        }
        let profile = SpeakerProfile {
            speaker_id: "id".into(),
            affine_transform: identity,
            bias: Tensor::zeros(&[config.feature_dim]),
            noise_sigma: 0.0,
            personalisation: false,
        };
        let reference = vec![0, 3, vocab.size() - 1];
        let mut rng = rng::stream(9, Domain::CorpusUtterance, &[7]);
        let features = synth_utterance(&reference, &prototypes, &profile, 0.0, &mut rng);
        // Every frame must equal its token's prototype exactly.
        let mut r = 0;
        for &tok in &reference {
            while r < features.rows() {
                let row = features.row(r);
                if row != prototypes.row(tok) {
                    break;
                }
                r += 1;
            }
        }
        assert_eq!(r, features.rows(), "some frame differs from its prototype");
        assert!(features.rows() >= reference.len() * MIN_TOKEN_FRAMES);
        assert!(features.rows() <= reference.len() * MAX_TOKEN_FRAMES);
    }

    #[test]
    fn heldin_lengths_and_frame_bounds_hold_corpus_wide() {
        let corpus = generate_corpus(&small_config(), 11).unwrap();
        for u in &corpus.utterances {
            let len = u.reference().len();
            if matches!(u.split, Split::HeldinA | Split::HeldinB) {
                assert!((2..=5).contains(&len), "{}: len {}", u.id, len);
            }
            assert!(u.frames() >= len * MIN_TOKEN_FRAMES);
            assert!(u.frames() <= len * MAX_TOKEN_FRAMES);
            assert!(u.features.is_finite());
        }
    }

    #[test]
    fn speaker_groups_are_disjoint() {
        let corpus = generate_corpus(&small_config(), 1).unwrap();
        let pre: std::collections::HashSet<_> = corpus.speakers(false).into_iter().collect();
        let per: std::collections::HashSet<_> = corpus.speakers(true).into_iter().collect();
        assert!(pre.is_disjoint(&per));
        for u in &corpus.utterances {
            let is_pre = u.split == Split::Pretrain;
            assert_eq!(pre.contains(u.speaker_id.as_str()), is_pre);
        }
    }

    #[test]
    fn heldout_sentences_never_appear_in_heldin() {
        let corpus = generate_corpus(&small_config(), 13).unwrap();
        let heldin: std::collections::HashSet<Vec<TokenId>> = corpus
            .utterances
            .iter()
            .filter(|u| matches!(u.split, Split::HeldinA | Split::HeldinB))
            .map(|u| u.reference().to_vec())
            .collect();
        for u in corpus.split_utterances(Split::Heldout) {
            assert!(!heldin.contains(u.reference()), "{} leaked", u.id);
        }
    }

    #[test]
    fn displacement_is_monotone_in_shift_magnitude() {
        // Mean nearest-prototype distance of personalisation frames grows
        // with the shift knob, at a fixed seed.
        let mut last = 0.0;
        for &mag in &[0.25, 0.5, 1.0, 2.0] {
            let config = CorpusConfig {
                shift_magnitude: mag,
                ..small_config()
            };
            let corpus = generate_corpus(&config, 21).unwrap();
            let prototypes = token_prototypes(&config, 21).unwrap();
            let mut total = 0.0;
            let mut n = 0usize;
            for u in &corpus.utterances {
                if u.split == Split::Pretrain {
                    continue;
                }
                for r in 0..u.features.rows() {
                    let row = u.features.row(r);
                    let mut best = f64::INFINITY;
                    for p in 0..prototypes.rows() {
                        let d: f64 = row
                            .iter()
                            .zip(prototypes.row(p))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        best = best.min(d);
                    }
                    total += best.sqrt();
                    n += 1;
                }
            }
            let mean = total / n as f64;
            assert!(mean > last, "magnitude {mag}: {mean} <= {last}");
            last = mean;
        }
    }

    #[test]
    fn vocabulary_too_small_is_config_error() {
        let config = CorpusConfig {
            vocab_size: 10,
            ..small_config()
        };
        assert!(matches!(
            generate_corpus(&config, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn view_matches_corpus_and_hides_references() {
        let corpus = generate_corpus(&small_config(), 2).unwrap();
        let view = hide_references(&corpus);
        assert_eq!(view.len(), corpus.utterances.len());
        let json = serde_json::to_string(&view).unwrap();
        assert!(!json.contains("reference"));
        // Per-record check on the serialized form.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for item in value["items"].as_array().unwrap() {
            assert!(item.get("reference").is_none());
            assert!(item.get("features").is_some());
        }
    }

    #[test]
    fn privileged_accessor_counts_reads() {
        let corpus = generate_corpus(&small_config(), 2).unwrap();
        let before = audit::reference_reads();
        let _ = corpus.utterances[0].reference();
        assert_eq!(audit::reference_reads(), before + 1);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&small_config(), 17).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn empty_corpus_is_a_valid_header_only_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let corpus = Corpus {
            vocabulary: Vocabulary::new(vec!["a".into(), "b".into()]).unwrap(),
            utterances: vec![],
            profiles: vec![],
        };
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert!(loaded.utterances.is_empty());
    }

    #[test]
    fn truncated_file_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let corpus = generate_corpus(&small_config(), 3).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        std::fs::write(&path, &text[..cut]).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
