//! Dataset directory layout: `samples.jsonl`, `graph.tsv`, `splits.json`,
//! `meta.json`.

use super::{ConversationSample, Corpus, SplitAssignment, Utterance};
use crate::error::{Error, Result};
use crate::social::{SocialGraph, SpeakerId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub vocab_size: usize,
    /// Shots per support / query set.
    pub k: usize,
    pub max_len: usize,
    pub num_speakers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hash of the generating configuration, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    #[serde(flatten)]
    meta: CorpusMeta,
    dataset_hash: String,
}

impl Corpus {
    fn samples_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for d in [&self.train, &self.valid, &self.test] {
            for s in d.all_samples() {
                serde_json::to_writer(&mut out, s)?;
                out.push(b'\n');
            }
        }
        Ok(out)
    }

    fn graph_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.test.graph().write_edge_list(&mut out)?;
        Ok(out)
    }

    /// SHA-256 over the serialized samples, graph, split assignment and meta.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.samples_bytes()?);
        h.update(self.graph_bytes()?);
        h.update(serde_json::to_vec(&self.assignment())?);
        h.update(serde_json::to_vec(&self.meta)?);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes the directory layout, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SAMPLES_FILE), self.samples_bytes()?)?;
        fs::write(dir.join(GRAPH_FILE), self.graph_bytes()?)?;
        let mut w = BufWriter::new(File::create(dir.join(SPLITS_FILE))?);
        serde_json::to_writer_pretty(&mut w, &self.assignment())?;
        w.flush()?;
        let hash = self.content_hash()?;
        let meta = MetaFile {
            meta: self.meta.clone(),
            dataset_hash: hash.clone(),
        };
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(hash)
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_file: MetaFile = serde_json::from_reader(open(dir, META_FILE)?)?;
        let meta = meta_file.meta;
        let splits: SplitAssignment = serde_json::from_reader(open(dir, SPLITS_FILE)?)?;
        let graph = SocialGraph::read_edge_list(meta.num_speakers, open(dir, GRAPH_FILE)?)?;

        let mut samples: BTreeMap<SpeakerId, Vec<ConversationSample>> = BTreeMap::new();
        for (lineno, line) in open(dir, SAMPLES_FILE)?.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: ConversationSample = serde_json::from_str(&line).map_err(|e| {
                Error::format(SAMPLES_FILE, format!("line {}: {e}", lineno + 1))
            })?;
            let check = |u: &Utterance| {
                Utterance::new(u.tokens().to_vec(), meta.vocab_size, meta.max_len)
                    .map_err(|e| Error::format(SAMPLES_FILE, format!("line {}: {e}", lineno + 1)))
            };
            check(&raw.query)?;
            check(&raw.response)?;
            samples.entry(raw.speaker).or_default().push(raw);
        }
        let corpus = Corpus::assemble(graph, samples, &splits, meta)?;
        let hash = corpus.content_hash()?;
        if hash != meta_file.dataset_hash {
            return Err(Error::Incompatible {
                field: "dataset_hash".into(),
                expected: meta_file.dataset_hash,
                found: hash,
            });
        }
        Ok(corpus)
    }
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>> {
    let path = dir.join(name);
    File::open(&path)
        .map(BufReader::new)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
