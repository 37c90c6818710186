//! Speakers, conversation pairs, splits and few-shot episodes.

mod store;
mod synth;

pub use store::CorpusMeta;
pub use synth::{
    similarity_diagnostics, style_correlation, GraphModel, SimilarityDiagnostics, SynthConfig,
    SyntheticCorpus,
};

use crate::error::{Error, Result};
use crate::social::{SocialGraph, SpeakerId};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id usable by ordinary words.
pub const FIRST_WORD: u32 = 3;

pub const DEFAULT_MAX_LEN: usize = 80;
pub const DEFAULT_SHOTS: usize = 10;

/// Non-empty token sequence of ordinary words.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Utterance(Vec<u32>);

impl Utterance {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::format("utterance", "empty token sequence"));
        }
        if tokens.len() > max_len {
            return Err(Error::format(
                "utterance",
                format!("length {} exceeds max_len {max_len}", tokens.len()),
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size || t < FIRST_WORD) {
            return Err(Error::Vocabulary {
                token: t,
                vocab_size,
            });
        }
        Ok(Self(tokens))
    }

    /// Wraps tokens that are already known to be valid.
    pub(crate) fn from_trusted(tokens: Vec<u32>) -> Self {
        debug_assert!(!tokens.is_empty());
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub speaker: SpeakerId,
    pub query: Utterance,
    pub response: Utterance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One split: its speakers, their samples and the graph visible to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    split: Split,
    speakers: Vec<SpeakerId>,
    samples: BTreeMap<SpeakerId, Vec<ConversationSample>>,
    graph: SocialGraph,
    vocab_size: usize,
    max_len: usize,
}

impl Dataset {
    pub fn new(
        split: Split,
        samples: BTreeMap<SpeakerId, Vec<ConversationSample>>,
        graph: SocialGraph,
        vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        for (&s, list) in &samples {
            if s.index() >= graph.num_speakers() {
                return Err(Error::InvalidSpeaker {
                    speaker: s,
                    num_speakers: graph.num_speakers(),
                });
            }
            for sample in list {
                if sample.speaker != s {
                    return Err(Error::format(
                        "dataset",
                        format!("sample of speaker {} filed under {s}", sample.speaker),
                    ));
                }
                for u in [&sample.query, &sample.response] {
                    Utterance::new(u.tokens().to_vec(), vocab_size, max_len)?;
                }
            }
        }
        Ok(Self {
            split,
            speakers: samples.keys().copied().collect(),
            samples,
            graph,
            vocab_size,
            max_len,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Speakers of this split, ascending.
    pub fn speakers(&self) -> &[SpeakerId] {
        &self.speakers
    }

    pub fn graph(&self) -> &SocialGraph {
        &self.graph
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn contains(&self, s: SpeakerId) -> bool {
        self.samples.contains_key(&s)
    }

    pub fn samples_of(&self, s: SpeakerId) -> Option<&[ConversationSample]> {
        self.samples.get(&s).map(Vec::as_slice)
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &ConversationSample> {
        self.samples.values().flatten()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }
}

/// One few-shot task. Sample identity is the position within the speaker's
/// sample list, so duplicated text on both sides is allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub speaker: SpeakerId,
    pub support: Vec<ConversationSample>,
    pub query: Vec<ConversationSample>,
    pub support_positions: Vec<usize>,
    pub query_positions: Vec<usize>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

/// Draws `2k` distinct samples of `s` and splits them into support and query.
pub fn build_episode<R: Rng + ?Sized>(
    d: &Dataset,
    s: SpeakerId,
    k: usize,
    rng: &mut R,
) -> Result<Episode> {
    let list = d.samples_of(s).ok_or(Error::InvalidSpeaker {
        speaker: s,
        num_speakers: d.graph().num_speakers(),
    })?;
    if k == 0 {
        return Err(Error::Config("episode needs k >= 1".into()));
    }
    if list.len() < 2 * k {
        return Err(Error::InsufficientSamples {
            speaker: s,
            have: list.len(),
            need: 2 * k,
        });
    }
    let picked = index::sample(rng, list.len(), 2 * k).into_vec();
    let (sup, qu) = picked.split_at(k);
    Ok(Episode {
        speaker: s,
        support: sup.iter().map(|&i| list[i].clone()).collect(),
        query: qu.iter().map(|&i| list[i].clone()).collect(),
        support_positions: sup.to_vec(),
        query_positions: qu.to_vec(),
    })
}

/// Uniform sample of `batch_size` distinct speakers.
pub fn speaker_batch<R: Rng + ?Sized>(
    d: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<SpeakerId>> {
    let n = d.speakers().len();
    if batch_size > n || batch_size == 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} not in 1..={n} speakers"
        )));
    }
    Ok(index::sample(rng, n, batch_size)
        .into_iter()
        .map(|i| d.speakers()[i])
        .collect())
}

/// All three splits of one corpus. The train graph is induced on the train
/// speakers; the valid and test graphs contain every speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub meta: CorpusMeta,
}

impl Corpus {
    /// Assembles the splits from a full graph and per-speaker samples.
    /// Train speakers must be exactly `0..n_train`.
    pub fn assemble(
        full_graph: SocialGraph,
        mut samples: BTreeMap<SpeakerId, Vec<ConversationSample>>,
        splits: &SplitAssignment,
        meta: CorpusMeta,
    ) -> Result<Self> {
        splits.validate(full_graph.num_speakers())?;
        let mut take = |ids: &[SpeakerId]| -> Result<BTreeMap<SpeakerId, Vec<ConversationSample>>> {
            let mut out = BTreeMap::new();
            for &s in ids {
                let list = samples.remove(&s).unwrap_or_default();
                if list.is_empty() {
                    return Err(Error::format("corpus", format!("speaker {s} has no samples")));
                }
                out.insert(s, list);
            }
            Ok(out)
        };
        let train_samples = take(&splits.train)?;
        let valid_samples = take(&splits.valid)?;
        let test_samples = take(&splits.test)?;
        if let Some(s) = samples.keys().next() {
            return Err(Error::format(
                "corpus",
                format!("samples for speaker {s} not assigned to any split"),
            ));
        }
        let train_graph = full_graph.induced_prefix(splits.train.len());
        let (v, l) = (meta.vocab_size, meta.max_len);
        Ok(Self {
            train: Dataset::new(Split::Train, train_samples, train_graph, v, l)?,
            valid: Dataset::new(Split::Valid, valid_samples, full_graph.clone(), v, l)?,
            test: Dataset::new(Split::Test, test_samples, full_graph, v, l)?,
            meta,
        })
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn assignment(&self) -> SplitAssignment {
        SplitAssignment {
            train: self.train.speakers().to_vec(),
            valid: self.valid.speakers().to_vec(),
            test: self.test.speakers().to_vec(),
        }
    }

    /// Speaker of any split → its samples.
    pub fn samples_of(&self, s: SpeakerId) -> Option<&[ConversationSample]> {
        self.train
            .samples_of(s)
            .or_else(|| self.valid.samples_of(s))
            .or_else(|| self.test.samples_of(s))
    }
}

/// Speaker ids per split (the `splits.json` payload).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<SpeakerId>,
    pub valid: Vec<SpeakerId>,
    pub test: Vec<SpeakerId>,
}

impl SplitAssignment {
    pub fn validate(&self, num_speakers: usize) -> Result<()> {
        let mut seen = vec![false; num_speakers];
        for (name, ids) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            for &s in ids {
                if s.index() >= num_speakers {
                    return Err(Error::InvalidSpeaker {
                        speaker: s,
                        num_speakers,
                    });
                }
                if std::mem::replace(&mut seen[s.index()], true) {
                    return Err(Error::format(
                        "splits",
                        format!("speaker {s} listed twice (second time in {name})"),
                    ));
                }
            }
        }
        let mut train = self.train.clone();
        train.sort_unstable();
        if train.iter().enumerate().any(|(i, s)| s.index() != i) {
            return Err(Error::format(
                "splits",
                "train speakers must be exactly 0..n_train",
            ));
        }
        Ok(())
    }
}
