//! Experiment orchestration shared by the command-line tool and the
//! acceptance suite: run configuration, training, evaluation of unseen
//! speakers, the γ-probe and the ablation matrix.

use crate::aggregator::{task_representation, AggregatorInit};
use crate::checkpoint::{Checkpoint, Provenance};
use crate::corpus::{build_episode, Corpus, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::meta::{
    newcomer_rows, outer_step, policy_graph, standalone_embedding, test_adapt_generate, DecodeConfig,
    MetaConfig, MetaState, Mode, NeighborPolicy, StepMetrics,
};
use crate::metrics::{gamma_probe, EvalEntry, EvalReport, GammaProbe, IdfTable, StopWords, DEFAULT_MARGINS};
use crate::model::{ModelConfig, TaskSlot};
use crate::social::SpeakerId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// d=64, 2+2 layers.
    Desk,
    /// d=32, 1+1 layers.
    Compact,
    /// d=512, 6+6 layers.
    FullScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub task_slot: TaskSlot,
    pub aggregator_init: AggregatorInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Compact,
            task_slot: TaskSlot::Encoder,
            aggregator_init: AggregatorInit::default(),
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Compact => ModelConfig::compact(vocab_size),
            Preset::FullScale => ModelConfig::full_scale(vocab_size),
        };
        cfg.task_slot = self.task_slot;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub margins: Vec<f64>,
    /// Share of the most frequent training-response tokens treated as
    /// stopwords by the consistency metrics.
    pub stopword_fraction: f64,
    /// Evaluate only the first `n` speakers of the split.
    pub max_speakers: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            margins: DEFAULT_MARGINS.to_vec(),
            stopword_fraction: 0.01,
            max_speakers: None,
        }
    }
}

/// Outer steps of the default run.
pub const DESK_STEPS: usize = 1200;
/// Outer learning rate of the default run.
pub const DESK_BETA: f64 = 3e-3;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub data_seed: u64,
    pub model: ModelSection,
    pub meta: MetaConfig,
    pub steps: usize,
    pub seed: u64,
    pub eval: EvalConfig,
    /// Write a checkpoint every `n` steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            data_seed: 0,
            model: ModelSection::default(),
            meta: MetaConfig {
                beta: DESK_BETA,
                ..MetaConfig::default()
            },
            steps: DESK_STEPS,
            seed: 0,
            eval: EvalConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.meta.validate()?;
        self.model.build(self.data.vocab_size).validate()?;
        if self.meta.k != self.data.k {
            return Err(Error::Config(format!(
                "meta.k = {} differs from data.k = {}",
                self.meta.k, self.data.k
            )));
        }
        if !(0.0..1.0).contains(&self.eval.stopword_fraction) {
            return Err(Error::Config("eval.stopword_fraction must lie in [0, 1)".into()));
        }
        if self.eval.decode.top_k == 0 || self.eval.decode.max_len == 0 {
            return Err(Error::Config("eval.decode needs top_k >= 1 and max_len >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        c.meta.mode = mode;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_PROBE: u64 = 3;

/// Fresh state for a run.
pub fn init_state(corpus: &Corpus, cfg: &RunConfig) -> Result<MetaState> {
    let mc = cfg.model.build(corpus.meta.vocab_size);
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut st = MetaState::new(mc, corpus.train.speakers(), &mut rng)?;
    if cfg.model.aggregator_init != AggregatorInit::Glorot {
        st.aggregator = cfg.model.aggregator_init.build(st.aggregator.dim(), &mut rng);
    }
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub curve: Vec<f64>,
    pub first_window: f64,
    pub last_window: f64,
    pub wall_secs: f64,
    pub checksum: String,
}

/// Mean of the first and last `w` entries.
pub fn window_means(curve: &[f64], w: usize) -> (f64, f64) {
    let w = w.min(curve.len()).max(1);
    if curve.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let head = curve[..w].iter().sum::<f64>() / w as f64;
    let tail = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub metrics: StepMetrics,
    pub wall_secs: f64,
}

/// Runs `cfg.steps` outer steps from a fresh state. `on_step` sees every
/// step's metrics and the state after it.
pub fn train(
    corpus: &Corpus,
    cfg: &RunConfig,
    on_step: &mut dyn FnMut(&StepRecord, &MetaState) -> Result<()>,
) -> Result<(MetaState, TrainSummary)> {
    cfg.validate()?;
    let mut state = init_state(corpus, cfg)?;
    let mut rng = stream(cfg.seed, STREAM_TRAIN);
    let t0 = Instant::now();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let m = outer_step(&mut state, &corpus.train, &cfg.meta, &mut rng).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("training step {step}: {msg}")),
            other => Error::Config(format!("training step {step}: {other}")),
        })?;
        curve.push(m.mean_query_loss);
        let rec = StepRecord {
            metrics: m,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        on_step(&rec, &state)?;
    }
    let (first_window, last_window) = window_means(&curve, 50);
    let summary = TrainSummary {
        steps: cfg.steps,
        curve,
        first_window,
        last_window,
        wall_secs: t0.elapsed().as_secs_f64(),
        checksum: state.checksum(),
    };
    Ok((state, summary))
}

pub fn provenance(cfg: &RunConfig, dataset_hash: &str) -> Provenance {
    Provenance {
        config: serde_json::to_value(cfg).expect("serializable"),
        config_hash: cfg.hash(),
        dataset_hash: dataset_hash.to_string(),
        seed: cfg.seed,
    }
}

pub fn checkpoint(state: &MetaState, cfg: &RunConfig, dataset_hash: &str) -> Checkpoint {
    Checkpoint::from_state(state, provenance(cfg, dataset_hash))
}

/// Refuses a checkpoint trained on different data.
pub fn check_dataset(ck: &Checkpoint, dataset_hash: &str) -> Result<()> {
    if ck.dataset_hash != dataset_hash {
        return Err(Error::Incompatible {
            field: "dataset hash".into(),
            expected: ck.dataset_hash.clone(),
            found: dataset_hash.to_string(),
        });
    }
    Ok(())
}

/// One speaker's adaptation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerResult {
    pub speaker: SpeakerId,
    pub shots: usize,
    pub pre_query_loss: f64,
    pub query_loss: f64,
    pub generations: Vec<Vec<u32>>,
    /// Refined task representation, when the mode has one.
    pub h: Option<Vec<f64>>,
    /// Embedding fitted from zero on the support set alone.
    pub standalone: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: Mode,
    pub policy: NeighborPolicy,
    pub split: Split,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Refined representations of the evaluated speakers against the stored
    /// rows of training speakers; absent when the mode has no aggregator.
    pub gamma: Option<GammaProbe>,
    /// Embeddings fitted from zero on support sets alone, on both sides.
    pub comparator_gamma: GammaProbe,
    pub mean_pre_loss: f64,
    pub mean_post_loss: f64,
    pub speakers: Vec<SpeakerResult>,
    pub checksum_before: String,
    pub checksum_after: String,
}

/// IDF table and stopword list from the training responses.
pub fn consistency_tables(corpus: &Corpus, stopword_fraction: f64) -> (IdfTable, StopWords) {
    let docs: Vec<&[u32]> = corpus.train.all_samples().map(|s| s.response.tokens()).collect();
    let idf = IdfTable::from_documents(docs.iter().copied(), corpus.meta.vocab_size);
    let stop = if stopword_fraction > 0.0 {
        StopWords::top_fraction(docs.iter().copied(), stopword_fraction)
    } else {
        StopWords::new([])
    };
    (idf, stop)
}

/// Adapts to every speaker of `split` (new rows are never written back),
/// generates for each query, and scores the generations.
pub fn evaluate(state: &MetaState, corpus: &Corpus, cfg: &RunConfig, split: Split) -> Result<EvalOutcome> {
    cfg.validate()?;
    let data = corpus.split(split);
    let checksum_before = state.checksum();
    let (idf, stop) = consistency_tables(corpus, cfg.eval.stopword_fraction);
    let full = data.graph();
    let extra = match cfg.meta.neighbor_policy {
        NeighborPolicy::All => newcomer_rows(&state.table, full)?,
        NeighborPolicy::TrainOnly => BTreeMap::new(),
    };
    let mut rng = stream(cfg.seed, STREAM_EVAL);
    let limit = cfg.eval.max_speakers.unwrap_or(usize::MAX);
    let mut entries = Vec::new();
    let mut results = Vec::new();
    let mut refined = BTreeMap::new();
    let mut standalone = BTreeMap::new();
    for &s in data.speakers().iter().take(limit) {
        let ep = build_episode(data, s, cfg.meta.k, &mut rng)?;
        let g = policy_graph(full, &corpus.train, s, cfg.meta.neighbor_policy);
        let out = test_adapt_generate(state, &ep, &g, &extra, &cfg.meta, cfg.eval.decode, &mut rng)?;
        let history: Vec<u32> = ep.support.iter().flat_map(|x| x.response.tokens().iter().copied()).collect();
        for (q, gen) in ep.query.iter().zip(&out.generations) {
            entries.push(EvalEntry {
                hypothesis: gen.tokens().to_vec(),
                reference: q.response.tokens().to_vec(),
                history: history.clone(),
            });
        }
        if let Some(h) = &out.h {
            refined.insert(s, h.clone());
        }
        let alone = standalone_embedding(&state.model, &ep.support, &cfg.meta).map_err(|e| e.for_speaker(s))?;
        standalone.insert(s, alone.clone());
        results.push(SpeakerResult {
            speaker: s,
            shots: ep.support.len(),
            pre_query_loss: out.pre_query_loss,
            query_loss: out.query_loss,
            generations: out.generations.iter().map(|u| u.tokens().to_vec()).collect(),
            h: out.h.clone(),
            standalone: alone,
        });
    }
    if results.is_empty() {
        return Err(Error::Config(format!("split {split} has no speakers to evaluate")));
    }
    let report = EvalReport::compute(&entries, &idf, &stop)?;
    let rows = table_rows(state);
    let gamma = if refined.is_empty() {
        None
    } else {
        Some(gamma_probe(&refined, &rows, full, &cfg.eval.margins, &mut stream(cfg.seed, STREAM_PROBE))?)
    };
    let train_standalone = standalone_train_embeddings(state, corpus, &cfg.meta)?;
    let comparator_gamma = gamma_probe(
        &standalone,
        &train_standalone,
        full,
        &cfg.eval.margins,
        &mut stream(cfg.seed, STREAM_PROBE),
    )?;
    let n = results.len() as f64;
    Ok(EvalOutcome {
        mode: cfg.meta.mode,
        policy: cfg.meta.neighbor_policy,
        split,
        config_hash: cfg.hash(),
        dataset_hash: corpus.content_hash()?,
        seed: cfg.seed,
        report,
        gamma,
        comparator_gamma,
        mean_pre_loss: results.iter().map(|r| r.pre_query_loss).sum::<f64>() / n,
        mean_post_loss: results.iter().map(|r| r.query_loss).sum::<f64>() / n,
        speakers: results,
        checksum_before,
        checksum_after: state.checksum(),
    })
}

/// Refined representations of every training speaker from the stored
/// rows. Speakers the mode cannot represent (isolated, without a self
/// embedding) are left out.
pub fn refined_train_representations(
    state: &MetaState,
    corpus: &Corpus,
    mode: Mode,
) -> Result<BTreeMap<SpeakerId, Vec<f64>>> {
    let g = corpus.train.graph();
    let mut out = BTreeMap::new();
    for &u in corpus.train.speakers() {
        match task_representation(mode.kind(), &state.aggregator, &state.table, g, u, mode.self_emb()) {
            Ok(h) => {
                out.insert(u, h);
            }
            Err(Error::NoNeighbors(_)) => {}
            Err(e) => return Err(e.for_speaker(u)),
        }
    }
    Ok(out)
}

/// Support-only embeddings of every training speaker, each fitted on the
/// speaker's first `k` samples.
pub fn standalone_train_embeddings(
    state: &MetaState,
    corpus: &Corpus,
    cfg: &MetaConfig,
) -> Result<BTreeMap<SpeakerId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for &u in corpus.train.speakers() {
        let samples = corpus.train.samples_of(u).unwrap_or(&[]);
        let support = &samples[..cfg.k.min(samples.len())];
        if support.is_empty() {
            continue;
        }
        out.insert(u, standalone_embedding(&state.model, support, cfg).map_err(|e| e.for_speaker(u))?);
    }
    Ok(out)
}

fn table_rows(state: &MetaState) -> BTreeMap<SpeakerId, Vec<f64>> {
    state.table.iter().map(|(s, r)| (s, r.to_vec())).collect()
}

/// γ-probe of the training speakers' refined representations against the
/// stored rows.
pub fn probe_train(state: &MetaState, corpus: &Corpus, cfg: &RunConfig) -> Result<GammaProbe> {
    let h = refined_train_representations(state, corpus, cfg.meta.mode)?;
    let rows = table_rows(state);
    gamma_probe(&h, &rows, corpus.train.graph(), &cfg.eval.margins, &mut stream(cfg.seed, STREAM_PROBE))
}

/// One trained-and-evaluated variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub train: Option<TrainSummary>,
    pub eval: Option<EvalOutcome>,
    pub error: Option<String>,
}

/// Trains and evaluates every variant for every seed. A failing variant is
/// recorded and the matrix continues.
pub fn ablate(
    corpus: &Corpus,
    base: &RunConfig,
    modes: &[Mode],
    seeds: &[u64],
    on_row: &mut dyn FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let dataset_hash = corpus.content_hash().unwrap_or_default();
    let mut rows = Vec::new();
    for &seed in seeds {
        for &mode in modes {
            let cfg = base.with_mode(mode).with_seed(seed);
            let run = || -> Result<(TrainSummary, EvalOutcome)> {
                let (state, summary) = train(corpus, &cfg, &mut |_, _| Ok(()))?;
                let eval = evaluate(&state, corpus, &cfg, Split::Test)?;
                Ok((summary, eval))
            };
            let row = match run() {
                Ok((t, e)) => AblationRow {
                    mode,
                    seed,
                    config_hash: cfg.hash(),
                    dataset_hash: dataset_hash.clone(),
                    train: Some(t),
                    eval: Some(e),
                    error: None,
                },
                Err(e) => {
                    log::error!("variant {mode} seed {seed} failed: {e}");
                    AblationRow {
                        mode,
                        seed,
                        config_hash: cfg.hash(),
                        dataset_hash: dataset_hash.clone(),
                        train: None,
                        eval: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            on_row(&row);
            rows.push(row);
        }
    }
    rows
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-variant medians over seeds, in the order variants first appear.
pub fn median_reports(rows: &[AblationRow]) -> Vec<(Mode, EvalReport)> {
    let mut order: Vec<Mode> = Vec::new();
    for r in rows {
        if !order.contains(&r.mode) {
            order.push(r.mode);
        }
    }
    order
        .into_iter()
        .filter_map(|m| {
            let reps: Vec<&EvalReport> = rows
                .iter()
                .filter(|r| r.mode == m)
                .filter_map(|r| r.eval.as_ref().map(|e| &e.report))
                .collect();
            if reps.is_empty() {
                return None;
            }
            let med = |f: &dyn Fn(&EvalReport) -> f64| median(reps.iter().map(|r| f(r)).collect());
            Some((
                m,
                EvalReport {
                    bleu: [0, 1, 2, 3].map(|i| med(&|r| r.bleu[i])),
                    dist1: med(&|r| r.dist1),
                    dist2: med(&|r| r.dist2),
                    toksim: med(&|r| r.toksim),
                    grd_f1: med(&|r| r.grd_f1),
                    samples: reps[0].samples,
                },
            ))
        })
        .collect()
}

/// Human-readable comparison with one row per variant. Rows from different
/// datasets are refused.
pub fn ablation_table(rows: &[AblationRow]) -> Result<String> {
    if let Some(first) = rows.first() {
        if let Some(r) = rows.iter().find(|r| r.dataset_hash != first.dataset_hash) {
            return Err(Error::Incompatible {
                field: "dataset hash".into(),
                expected: first.dataset_hash.clone(),
                found: r.dataset_hash.clone(),
            });
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{:<20} {}\n", "variant", EvalReport::table_header()));
    for (m, rep) in median_reports(rows) {
        out.push_str(&format!("{:<20} {}\n", m.label(), rep.table_row(m.name())));
    }
    for r in rows.iter().filter(|r| r.error.is_some()) {
        out.push_str(&format!(
            "{:<20} failed (seed {}): {}\n",
            r.mode.label(),
            r.seed,
            r.error.as_deref().unwrap_or("")
        ));
    }
    Ok(out)
}
