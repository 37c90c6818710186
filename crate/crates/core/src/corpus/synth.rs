//! Synthetic corpus with graph-correlated speaker styles.
//!
//! Vocabulary layout above the special tokens: Zipf-weighted function words,
//! then `num_topics` clusters of topic words, then style words. Queries are
//! drawn from one topic; responses mix function words, words copied from the
//! query's topic and style words whose distribution depends on the speaker's
//! (diffused) style vector.

use super::{ConversationSample, Corpus, CorpusMeta, SplitAssignment, Utterance, FIRST_WORD};
use crate::error::{Error, Result};
use crate::metrics::{toksim, IdfTable, StopWords};
use crate::social::{SocialGraph, SpeakerId};
use crate::tensor::Mat;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphModel {
    ErdosRenyi,
    PreferentialAttachment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub num_valid: usize,
    pub samples_per_train: usize,
    pub samples_per_heldout: usize,
    pub vocab_size: usize,
    pub avg_degree: f64,
    pub graph: GraphModel,
    pub style_dim: usize,
    pub diffusion_rounds: usize,
    /// Inverse temperature of the style-word distribution.
    pub style_strength: f64,
    pub num_function_words: usize,
    pub num_topics: usize,
    pub topic_size: usize,
    pub query_len: (usize, usize),
    pub response_len: (usize, usize),
    pub p_function: f64,
    pub p_copy: f64,
    pub k: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_test: 60,
            num_valid: 30,
            samples_per_train: 40,
            samples_per_heldout: 20,
            vocab_size: 200,
            avg_degree: 6.0,
            graph: GraphModel::ErdosRenyi,
            style_dim: 8,
            diffusion_rounds: 3,
            style_strength: 3.0,
            num_function_words: 20,
            num_topics: 8,
            topic_size: 6,
            query_len: (4, 8),
            response_len: (6, 12),
            p_function: 0.3,
            p_copy: 0.2,
            k: super::DEFAULT_SHOTS,
            max_len: super::DEFAULT_MAX_LEN,
        }
    }
}

impl SynthConfig {
    pub fn num_speakers(&self) -> usize {
        self.num_train + self.num_test + self.num_valid
    }

    fn first_topic_word(&self) -> usize {
        FIRST_WORD as usize + self.num_function_words
    }

    fn first_style_word(&self) -> usize {
        self.first_topic_word() + self.num_topics * self.topic_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return fail("k must be >= 1".into());
        }
        for (name, n) in [
            ("samples_per_train", self.samples_per_train),
            ("samples_per_heldout", self.samples_per_heldout),
        ] {
            if n < 2 * self.k {
                return fail(format!("{name} = {n} is below 2k = {}", 2 * self.k));
            }
        }
        if self.num_train < 2 {
            return fail("need at least 2 training speakers".into());
        }
        if self.num_function_words == 0 || self.num_topics == 0 || self.topic_size == 0 {
            return fail("function words, topics and topic size must be non-zero".into());
        }
        if self.first_style_word() >= self.vocab_size {
            return fail(format!(
                "vocab_size {} leaves no style words (need > {})",
                self.vocab_size,
                self.first_style_word()
            ));
        }
        for (name, (lo, hi)) in [("query_len", self.query_len), ("response_len", self.response_len)] {
            if lo == 0 || lo > hi || hi > self.max_len {
                return fail(format!("{name} ({lo}, {hi}) must satisfy 1 <= lo <= hi <= max_len"));
            }
        }
        if !(0.0..=1.0).contains(&(self.p_function + self.p_copy)) || self.p_function < 0.0 || self.p_copy < 0.0 {
            return fail("p_function and p_copy must be non-negative and sum to <= 1".into());
        }
        if self.style_dim == 0 || !self.style_strength.is_finite() || self.avg_degree < 0.0 {
            return fail("style_dim, style_strength and avg_degree out of range".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Generates with a fresh ChaCha stream and records the seed in the meta.
    pub fn generate(&self, seed: u64) -> Result<SyntheticCorpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = generate_synthetic(self, &mut rng)?;
        out.corpus.meta.seed = Some(seed);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Diffused style vector per global speaker id.
    pub styles: Vec<Vec<f64>>,
}

fn random_graph<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SocialGraph> {
    let n = cfg.num_speakers();
    let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
    let key = |a: usize, b: usize| (a.min(b) as u32, a.max(b) as u32);
    match cfg.graph {
        GraphModel::ErdosRenyi => {
            let p = (cfg.avg_degree / (n - 1) as f64).min(1.0);
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(p) {
                        edges.insert(key(a, b));
                    }
                }
            }
        }
        GraphModel::PreferentialAttachment => {
            let m = ((cfg.avg_degree / 2.0).round() as usize).max(1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            // endpoint multiset: a node appears once per incident edge
            let mut ends: Vec<usize> = Vec::new();
            let seed_size = (m + 1).min(n);
            for i in 0..seed_size {
                for j in i + 1..seed_size {
                    edges.insert(key(order[i], order[j]));
                    ends.extend([order[i], order[j]]);
                }
            }
            for &v in &order[seed_size..] {
                let mut targets = BTreeSet::new();
                while targets.len() < m.min(ends.len()) {
                    targets.insert(ends[rng.gen_range(0..ends.len())]);
                }
                for t in targets {
                    edges.insert(key(v, t));
                    ends.extend([v, t]);
                }
            }
        }
    }
    // every speaker gets at least one training neighbor
    let mut has_train = vec![false; n];
    for &(a, b) in &edges {
        if (b as usize) < cfg.num_train {
            has_train[a as usize] = true;
        }
        if (a as usize) < cfg.num_train {
            has_train[b as usize] = true;
        }
    }
    for v in 0..n {
        if !has_train[v] {
            let mut u = rng.gen_range(0..cfg.num_train - 1);
            if u >= v && v < cfg.num_train {
                u += 1;
            }
            if u == v {
                u = (u + 1) % cfg.num_train;
            }
            edges.insert(key(u, v));
            has_train[v] = true;
            if v < cfg.num_train {
                has_train[u] = true;
            }
        }
    }
    SocialGraph::from_edges(
        n,
        edges.into_iter().map(|(a, b)| (SpeakerId(a), SpeakerId(b))),
    )
}

/// `z ← (z + Σ_{u∈N} z_u) / (1 + |N|)`, applied synchronously `rounds` times.
pub(crate) fn diffuse(styles: &mut [Vec<f64>], graph: &SocialGraph, rounds: usize) {
    for _ in 0..rounds {
        let prev = styles.to_vec();
        for (s, z) in styles.iter_mut().enumerate() {
            let neigh = graph.neighbors(SpeakerId(s as u32)).expect("in range");
            for u in neigh {
                for (a, b) in z.iter_mut().zip(&prev[u.index()]) {
                    *a += b;
                }
            }
            let c = 1.0 + neigh.len() as f64;
            z.iter_mut().for_each(|a| *a /= c);
        }
    }
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("non-empty")
}

pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let n = cfg.num_speakers();
    let graph = random_graph(cfg, rng)?;

    let mut styles: Vec<Vec<f64>> = (0..n)
        .map(|_| Mat::randn(1, cfg.style_dim, 1.0, rng).into_data())
        .collect();
    diffuse(&mut styles, &graph, cfg.diffusion_rounds);

    let first_topic = cfg.first_topic_word();
    let first_style = cfg.first_style_word();
    let num_style = cfg.vocab_size - first_style;
    let emission = Mat::randn(num_style, cfg.style_dim, 1.0, rng);
    let function_dist = zipf(cfg.num_function_words);
    let function_word = |rng: &mut R| FIRST_WORD + function_dist.sample(rng) as u32;
    let topic_word = |t: usize, rng: &mut R| (first_topic + t * cfg.topic_size + rng.gen_range(0..cfg.topic_size)) as u32;

    let mut samples: BTreeMap<SpeakerId, Vec<ConversationSample>> = BTreeMap::new();
    for (s, z) in styles.iter().enumerate() {
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let logits: Vec<f64> = (0..num_style)
            .map(|w| cfg.style_strength * emission.row(w).iter().zip(z).map(|(e, x)| e * x).sum::<f64>() / norm)
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let style_dist = WeightedIndex::new(logits.iter().map(|l| (l - top).exp()))
            .map_err(|e| Error::Numeric(format!("style distribution of speaker {s}: {e}")))?;

        let count = if s < cfg.num_train {
            cfg.samples_per_train
        } else {
            cfg.samples_per_heldout
        };
        let speaker = SpeakerId(s as u32);
        let list = (0..count)
            .map(|_| {
                let topic = rng.gen_range(0..cfg.num_topics);
                let ql = rng.gen_range(cfg.query_len.0..=cfg.query_len.1);
                let query: Vec<u32> = (0..ql)
                    .map(|_| {
                        if rng.gen_bool(0.7) {
                            topic_word(topic, rng)
                        } else {
                            function_word(rng)
                        }
                    })
                    .collect();
                let rl = rng.gen_range(cfg.response_len.0..=cfg.response_len.1);
                let response: Vec<u32> = (0..rl)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        if u < cfg.p_function {
                            function_word(rng)
                        } else if u < cfg.p_function + cfg.p_copy {
                            query[rng.gen_range(0..query.len())]
                        } else {
                            (first_style + style_dist.sample(rng)) as u32
                        }
                    })
                    .collect();
                ConversationSample {
                    speaker,
                    query: Utterance::from_trusted(query),
                    response: Utterance::from_trusted(response),
                }
            })
            .collect();
        samples.insert(speaker, list);
    }

    let ids = |r: std::ops::Range<usize>| r.map(|i| SpeakerId(i as u32)).collect::<Vec<_>>();
    let t0 = cfg.num_train;
    let v0 = t0 + cfg.num_test;
    let splits = SplitAssignment {
        train: ids(0..t0),
        test: ids(t0..v0),
        valid: ids(v0..n),
    };
    let meta = CorpusMeta {
        vocab_size: cfg.vocab_size,
        k: cfg.k,
        max_len: cfg.max_len,
        num_speakers: n,
        seed: None,
        config_hash: Some(cfg.hash()),
    };
    let corpus = Corpus::assemble(graph, samples, &splits, meta)?;
    Ok(SyntheticCorpus { corpus, styles })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Mean Pearson correlation of style vectors across edges and across as many
/// uniformly drawn non-adjacent pairs.
pub fn style_correlation<R: Rng + ?Sized>(
    styles: &[Vec<f64>],
    graph: &SocialGraph,
    rng: &mut R,
) -> (f64, f64) {
    let edges: Vec<_> = graph.edges().collect();
    if edges.is_empty() {
        return (0.0, 0.0);
    }
    let edge = edges
        .iter()
        .map(|(a, b)| pearson(&styles[a.index()], &styles[b.index()]))
        .sum::<f64>()
        / edges.len() as f64;
    let randoms = random_pairs(graph, edges.len(), rng);
    let random = randoms
        .iter()
        .map(|(a, b)| pearson(&styles[a.index()], &styles[b.index()]))
        .sum::<f64>()
        / randoms.len().max(1) as f64;
    (edge, random)
}

fn random_pairs<R: Rng + ?Sized>(graph: &SocialGraph, count: usize, rng: &mut R) -> Vec<(SpeakerId, SpeakerId)> {
    let n = graph.num_speakers();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count {
        attempts += 1;
        let a = SpeakerId(rng.gen_range(0..n) as u32);
        let b = SpeakerId(rng.gen_range(0..n) as u32);
        if a != b && !graph.contains_edge(a, b) {
            out.push((a, b));
        }
    }
    out
}

/// Mean TokSim between the pooled responses of neighboring speakers versus
/// random non-adjacent pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDiagnostics {
    pub neighbor: f64,
    pub random: f64,
    pub gap: f64,
    pub pairs: usize,
}

pub fn similarity_diagnostics<R: Rng + ?Sized>(corpus: &Corpus, rng: &mut R) -> SimilarityDiagnostics {
    let graph = corpus.test.graph();
    let responses = || corpus.train.all_samples().map(|s| s.response.tokens());
    let idf = IdfTable::from_documents(responses(), corpus.meta.vocab_size);
    let stop = StopWords::top_fraction(responses(), 0.01);
    let history: Vec<Vec<u32>> = (0..graph.num_speakers())
        .map(|s| {
            corpus
                .samples_of(SpeakerId(s as u32))
                .unwrap_or(&[])
                .iter()
                .flat_map(|x| x.response.tokens().iter().copied())
                .collect()
        })
        .collect();
    let sim = |pairs: &[(SpeakerId, SpeakerId)]| {
        pairs
            .iter()
            .map(|(a, b)| toksim(&history[a.index()], &history[b.index()], &idf, &stop))
            .sum::<f64>()
            / pairs.len().max(1) as f64
    };
    let edges: Vec<_> = graph.edges().collect();
    let randoms = random_pairs(graph, edges.len(), rng);
    let neighbor = sim(&edges);
    let random = sim(&randoms);
    SimilarityDiagnostics {
        neighbor,
        random,
        gap: neighbor - random,
        pairs: edges.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_train: 60,
            num_test: 10,
            num_valid: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_infeasible_configs() {
        let bad = SynthConfig {
            samples_per_heldout: 19,
            ..SynthConfig::default()
        };
        assert!(matches!(bad.generate(0), Err(Error::Config(_))));
        let tiny_vocab = SynthConfig {
            vocab_size: 60,
            ..SynthConfig::default()
        };
        assert!(matches!(tiny_vocab.generate(0), Err(Error::Config(_))));
    }

    #[test]
    fn splits_and_sizes() {
        let cfg = small();
        let c = cfg.generate(1).unwrap().corpus;
        assert_eq!(c.train.speakers().len(), 60);
        assert_eq!(c.test.speakers().len(), 10);
        assert_eq!(c.valid.speakers().len(), 6);
        assert_eq!(c.train.graph().num_speakers(), 60);
        assert_eq!(c.test.graph().num_speakers(), 76);
        let train: BTreeSet<_> = c.train.speakers().iter().collect();
        assert!(c.test.speakers().iter().all(|s| !train.contains(s)));
        assert!(c.valid.speakers().iter().all(|s| !train.contains(s)));
        for &s in c.test.speakers() {
            assert_eq!(c.test.samples_of(s).unwrap().len(), 20);
            let n = c.test.graph().neighbors(s).unwrap();
            assert!(n.iter().any(|u| u.index() < 60), "speaker {s} lacks a train neighbor");
        }
        for &s in c.train.speakers() {
            assert_eq!(c.train.samples_of(s).unwrap().len(), 40);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = small();
        let a = cfg.generate(4).unwrap();
        let b = cfg.generate(4).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.corpus.content_hash().unwrap(), b.corpus.content_hash().unwrap());
        let c = cfg.generate(5).unwrap();
        assert_ne!(a.corpus.content_hash().unwrap(), c.corpus.content_hash().unwrap());
    }

    #[test]
    fn preferential_attachment_graph() {
        let cfg = SynthConfig {
            graph: GraphModel::PreferentialAttachment,
            ..small()
        };
        let c = cfg.generate(2).unwrap().corpus;
        let g = c.test.graph();
        let avg = 2.0 * g.num_edges() as f64 / g.num_speakers() as f64;
        assert!((4.0..=8.0).contains(&avg), "average degree {avg}");
        let max_deg = (0..g.num_speakers()).map(|s| g.degree(SpeakerId(s as u32)).unwrap()).max().unwrap();
        assert!(max_deg > 12, "hub degree {max_deg}");
    }

    #[test]
    fn diffusion_converges_to_mean_on_connected_graph() {
        let n = 6;
        let g = SocialGraph::from_edges(
            n,
            (0..n).map(|i| (SpeakerId(i as u32), SpeakerId(((i + 1) % n) as u32))),
        )
        .unwrap();
        let mut styles: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, -(i as f64) * 2.0]).collect();
        // regular graph: the averaging operator preserves the mean
        diffuse(&mut styles, &g, 400);
        for z in &styles {
            assert!((z[0] - 2.5).abs() < 1e-9 && (z[1] + 5.0).abs() < 1e-9, "{z:?}");
        }
    }

    #[test]
    fn style_locality_depends_on_diffusion() {
        let base = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let iid = SynthConfig {
            diffusion_rounds: 0,
            ..base.clone()
        }
        .generate(3)
        .unwrap();
        let (e, r) = style_correlation(&iid.styles, iid.corpus.test.graph(), &mut rng);
        assert!((e - r).abs() < 0.05, "edge {e} random {r}");
        let smooth = SynthConfig {
            diffusion_rounds: 1,
            ..base
        }
        .generate(3)
        .unwrap();
        let (e, r) = style_correlation(&smooth.styles, smooth.corpus.test.graph(), &mut rng);
        assert!(e > r + 0.1, "edge {e} random {r}");
    }

    #[test]
    fn iid_styles_give_no_similarity_gap() {
        let cfg = SynthConfig {
            diffusion_rounds: 0,
            ..SynthConfig::default()
        };
        let c = cfg.generate(8).unwrap().corpus;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = similarity_diagnostics(&c, &mut rng);
        assert!(d.gap.abs() < 0.02, "{d:?}");
    }

    #[test]
    fn default_config_similarity_gap() {
        let c = SynthConfig::default().generate(0).unwrap().corpus;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = similarity_diagnostics(&c, &mut rng);
        eprintln!("{d:?}");
        assert!(d.gap >= 0.05, "{d:?}");
    }

    #[test]
    fn round_trips_through_directory() {
        let c = small().generate(9).unwrap().corpus;
        let dir = tempfile::tempdir().unwrap();
        let hash = c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash().unwrap(), hash);
        assert_eq!(back.meta.seed, Some(9));
    }

    #[test]
    fn tampered_directory_is_rejected() {
        let c = small().generate(9).unwrap().corpus;
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let path = dir.path().join(super::super::store::SAMPLES_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(Corpus::load(dir.path()).is_err());
    }
}
