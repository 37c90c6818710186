use crate::social::SpeakerId;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("speaker {speaker} is out of range for a graph of {num_speakers} speakers")]
    InvalidSpeaker {
        speaker: SpeakerId,
        num_speakers: usize,
    },
    #[error("cannot sample negatives: graph has {0} speaker(s), need at least 2")]
    InsufficientPopulation(usize),
    #[error("speaker {speaker} has {have} samples, need at least {need}")]
    InsufficientSamples {
        speaker: SpeakerId,
        have: usize,
        need: usize,
    },
    #[error("speaker {0} has no neighbors to aggregate")]
    NoNeighbors(SpeakerId),
    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    Vocabulary { token: u32, vocab_size: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("hypotheses ({hypotheses}) and references ({references}) are not aligned")]
    Alignment { hypotheses: usize, references: usize },
    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),
    #[error("incompatible {field}: expected {expected}, found {found}")]
    Incompatible {
        field: String,
        expected: String,
        found: String,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("speaker {speaker}: {source}")]
    Speaker {
        speaker: SpeakerId,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn for_speaker(self, speaker: SpeakerId) -> Self {
        match self {
            e @ Error::Speaker { .. } => e,
            e => Error::Speaker {
                speaker,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
