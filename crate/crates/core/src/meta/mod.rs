//! Meta-training: per-speaker inner-loop adaptation of the conversation
//! model, outer-loop Adam updates of the model, aggregator and embedding
//! table, the test-time procedure, and the ablation modes.

pub mod sine;

use crate::aggregator::{
    fit_task_embedding, ta_backward, task_representation, AggregatorKind, AggregatorParameters,
    EmbeddingRows, Overlay, TaSpec, TaskEmbeddingTable,
};
use crate::corpus::{build_episode, speaker_batch, ConversationSample, Dataset, Episode, Utterance};
use crate::error::{Error, Result};
use crate::model::{GradRequest, LossGrad, Model, ModelConfig};
use crate::params::ParamVec;
use crate::social::{SocialGraph, SpeakerId};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// A model trainable by gradient-based meta-learning.
pub trait Learner: Sized {
    type Sample;

    fn params(&self) -> &ParamVec;
    fn with_params(&self, params: ParamVec) -> Self;
    fn loss(&self, h: Option<&[f64]>, batch: &[Self::Sample]) -> Result<f64>;
    fn loss_grad(&self, h: Option<&[f64]>, batch: &[Self::Sample], want: GradRequest) -> Result<LossGrad>;
    /// Gradient plus `H_φφ·v` and `H_hφ·v`.
    fn hvp(&self, h: Option<&[f64]>, batch: &[Self::Sample], v: &ParamVec) -> Result<(LossGrad, ParamVec, Vec<f64>)>;
}

fn refs(batch: &[ConversationSample]) -> Vec<&ConversationSample> {
    batch.iter().collect()
}

impl Learner for Model {
    type Sample = ConversationSample;

    fn params(&self) -> &ParamVec {
        Model::params(self)
    }

    fn with_params(&self, params: ParamVec) -> Self {
        Model::with_params(self, params)
    }

    fn loss(&self, h: Option<&[f64]>, batch: &[ConversationSample]) -> Result<f64> {
        self.nll_loss(h, &refs(batch))
    }

    fn loss_grad(&self, h: Option<&[f64]>, batch: &[ConversationSample], want: GradRequest) -> Result<LossGrad> {
        self.nll_grad(h, &refs(batch), want)
    }

    fn hvp(&self, h: Option<&[f64]>, batch: &[ConversationSample], v: &ParamVec) -> Result<(LossGrad, ParamVec, Vec<f64>)> {
        self.nll_hvp(h, &refs(batch), v)
    }
}

/// `inner_steps` plain SGD steps at rate `alpha` on the support loss, with
/// `h` held fixed. The input learner is not modified.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    h: Option<&[f64]>,
    support: &[L::Sample],
    alpha: f64,
    steps: usize,
) -> Result<L> {
    Ok(inner_trajectory(learner, h, support, alpha, steps)?
        .pop()
        .map_or_else(|| learner.with_params(learner.params().clone()), |p| learner.with_params(p)))
}

/// Parameters after each inner step, starting with the initial ones.
fn inner_trajectory<L: Learner>(
    learner: &L,
    h: Option<&[f64]>,
    support: &[L::Sample],
    alpha: f64,
    steps: usize,
) -> Result<Vec<ParamVec>> {
    let mut traj = vec![learner.params().clone()];
    let mut cur = learner.with_params(learner.params().clone());
    for step in 0..steps {
        let g = cur.loss_grad(h, support, GradRequest::PARAMS)?;
        let mut p = cur.params().clone();
        p.axpy(-alpha, g.params.as_ref().expect("requested"));
        if !p.all_finite() {
            return Err(Error::Numeric(format!("inner step {step} produced non-finite parameters")));
        }
        cur = learner.with_params(p.clone());
        traj.push(p);
    }
    Ok(traj)
}

/// Query loss after adaptation and its gradient with respect to the
/// initial parameters and `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub query_loss: f64,
    pub params: ParamVec,
    /// Empty when no `h` was given.
    pub h: Vec<f64>,
}

/// First-order: the gradient at the adapted parameters. Second-order:
/// reverse accumulation through every inner step with Hessian-vector
/// products, including the path from `h` through the inner updates.
pub fn meta_gradient<L: Learner>(
    learner: &L,
    h: Option<&[f64]>,
    support: &[L::Sample],
    query: &[L::Sample],
    alpha: f64,
    steps: usize,
    first_order: bool,
) -> Result<MetaGradient> {
    let traj = inner_trajectory(learner, h, support, alpha, steps)?;
    let adapted = learner.with_params(traj.last().expect("non-empty").clone());
    let want = GradRequest {
        params: true,
        h: h.is_some(),
    };
    let q = adapted.loss_grad(h, query, want)?;
    let mut u = q.params.expect("requested");
    let mut gh = q.h.unwrap_or_default();
    if !first_order {
        for p in traj[..steps].iter().rev() {
            let (_, hv, hhv) = learner.with_params(p.clone()).hvp(h, support, &u)?;
            u.axpy(-alpha, &hv);
            for (a, b) in gh.iter_mut().zip(&hhv) {
                *a -= alpha * b;
            }
        }
    }
    Ok(MetaGradient {
        query_loss: q.loss,
        params: u,
        h: gh,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    NoNs,
    NoGcn,
    NoNsNoGcn,
    NoSelfEmb,
    NoTa,
    TaAsBase,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Full,
        Mode::NoNs,
        Mode::NoGcn,
        Mode::NoNsNoGcn,
        Mode::NoSelfEmb,
        Mode::NoTa,
        Mode::TaAsBase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoNs => "no_ns",
            Mode::NoGcn => "no_gcn",
            Mode::NoNsNoGcn => "no_ns_no_gcn",
            Mode::NoSelfEmb => "no_self_emb",
            Mode::NoTa => "no_ta",
            Mode::TaAsBase => "ta_as_base",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Full => "Ours",
            Mode::NoNs => "-NS Loss",
            Mode::NoGcn => "-GCN",
            Mode::NoNsNoGcn => "-NS Loss -GCN",
            Mode::NoSelfEmb => "Ours-SelfEmb",
            Mode::NoTa => "PAML (no TA)",
            Mode::TaAsBase => "TA as MAML's base",
        }
    }

    pub fn uses_ta(self) -> bool {
        self != Mode::NoTa
    }

    pub fn kind(self) -> AggregatorKind {
        match self {
            Mode::NoGcn | Mode::NoNsNoGcn => AggregatorKind::Mean,
            _ => AggregatorKind::Gcn,
        }
    }

    pub fn self_emb(self) -> bool {
        self != Mode::NoSelfEmb
    }

    pub fn uses_ns(self) -> bool {
        !matches!(self, Mode::NoNs | Mode::NoNsNoGcn | Mode::NoTa)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// Which speakers a newcomer may aggregate from at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborPolicy {
    /// Only edges to training speakers.
    TrainOnly,
    /// Every edge of the stored graph; other newcomers contribute their
    /// initial rows.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub k: usize,
    pub k_ns: usize,
    pub fit_steps: usize,
    pub fit_lr: f64,
    pub first_order: bool,
    pub mode: Mode,
    /// Keep each training speaker's first support/query split for the
    /// whole run instead of redrawing it at every visit.
    pub fixed_partition: bool,
    pub neighbor_policy: NeighborPolicy,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 3e-4,
            lambda: 1.0,
            inner_steps: 3,
            meta_batch: 8,
            k: 10,
            k_ns: 5,
            fit_steps: 5,
            fit_lr: 0.01,
            first_order: true,
            mode: Mode::Full,
            fixed_partition: false,
            neighbor_policy: NeighborPolicy::TrainOnly,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.meta_batch == 0 || self.k == 0 || self.k_ns == 0 {
            return bad("meta_batch, k and k_ns must be >= 1");
        }
        if !(self.fit_lr >= 0.0 && self.fit_lr.is_finite()) {
            return bad("fit_lr must be finite and >= 0");
        }
        if self.mode == Mode::TaAsBase && !self.first_order {
            return bad("ta_as_base is only implemented with first_order = true");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }

    fn ta_spec(&self) -> TaSpec {
        TaSpec {
            kind: self.mode.kind(),
            self_emb: self.mode.self_emb(),
            lambda: if self.mode.uses_ns() { self.lambda } else { 0.0 },
        }
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&MetaConfig> for Adam {
    fn from(c: &MetaConfig) -> Self {
        Self {
            lr: c.beta,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// Adam moments for a list of matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamVec,
    pub v: ParamVec,
}

impl AdamState {
    pub fn new(like: &ParamVec) -> Self {
        Self {
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamVec, grad: &ParamVec, cfg: &Adam) {
        self.t += 1;
        for ((p, g), (m, v)) in params
            .0
            .iter_mut()
            .zip(&grad.0)
            .zip(self.m.0.iter_mut().zip(self.v.0.iter_mut()))
        {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, cfg);
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &Adam) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}

/// Lazy Adam moments for one table row; `t` counts this row's updates.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMoments {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Everything the outer loop updates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub model: Model,
    pub aggregator: AggregatorParameters,
    pub table: TaskEmbeddingTable,
    pub model_opt: AdamState,
    pub agg_opt: AdamState,
    pub row_opt: BTreeMap<SpeakerId, RowMoments>,
    pub step: u64,
    /// Fixed support/query positions per speaker when partitions are kept.
    pub partitions: BTreeMap<SpeakerId, (Vec<usize>, Vec<usize>)>,
}

impl MetaState {
    /// Fresh model, Glorot aggregator and `N(0, 1/d)` rows for the given
    /// training speakers.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, train_speakers: &[SpeakerId], rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let model = Model::new(cfg, rng)?;
        let aggregator = AggregatorParameters::random(d, rng);
        let table = TaskEmbeddingTable::random(d, train_speakers, rng);
        Ok(Self::from_parts(model, aggregator, table))
    }

    pub fn from_parts(model: Model, aggregator: AggregatorParameters, table: TaskEmbeddingTable) -> Self {
        let model_opt = AdamState::new(model.params());
        let agg_opt = AdamState::new(&aggregator.0);
        Self {
            model,
            aggregator,
            table,
            model_opt,
            agg_opt,
            row_opt: BTreeMap::new(),
            step: 0,
            partitions: BTreeMap::new(),
        }
    }

    /// SHA-256 over model, aggregator and table.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.model.params().checksum());
        h.update(self.aggregator.0.checksum());
        h.update(self.table.checksum());
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.model.params().all_finite()
            && self.aggregator.0.all_finite()
            && self.table.iter().all(|(_, r)| r.iter().all(|x| x.is_finite()))
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub speakers: Vec<SpeakerId>,
    pub query_losses: Vec<f64>,
    pub mean_query_loss: f64,
    /// Mean over the batch; 0 when the term is off.
    pub ns_loss: f64,
}

/// Result of one episode: gradients and diagnostics.
struct EpisodeOutcome {
    query_loss: f64,
    ns_loss: f64,
    g_model: ParamVec,
    g_agg: Option<ParamVec>,
    g_rows: BTreeMap<SpeakerId, Vec<f64>>,
    fitted: Option<Vec<f64>>,
    h: Option<Vec<f64>>,
    adapted: Model,
    /// Aggregator weights after the inner loop (changed only when the TA
    /// is part of the inner loop).
    #[cfg_attr(not(test), allow(dead_code))]
    adapted_agg: AggregatorParameters,
}

/// Rows and weights of the task aggregator as adapted inside the inner loop.
struct TaView<'a> {
    agg: AggregatorParameters,
    rows: Overlay<'a, TaskEmbeddingTable>,
}

#[allow(clippy::too_many_arguments)]
fn run_episode<R: Rng + ?Sized>(
    state: &MetaState,
    cfg: &MetaConfig,
    graph: &SocialGraph,
    base_rows: Overlay<'_, TaskEmbeddingTable>,
    s: SpeakerId,
    support: &[ConversationSample],
    query: &[ConversationSample],
    negative_pool: Option<&SocialGraph>,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let model = &state.model;
    if !cfg.mode.uses_ta() {
        let adapted = inner_adapt(model, None, support, cfg.alpha, cfg.inner_steps)?;
        let mg = meta_gradient(model, None, support, query, cfg.alpha, cfg.inner_steps, cfg.first_order)?;
        return Ok(EpisodeOutcome {
            query_loss: mg.query_loss,
            ns_loss: 0.0,
            g_model: mg.params,
            g_agg: None,
            g_rows: BTreeMap::new(),
            fitted: None,
            h: None,
            adapted,
            adapted_agg: state.aggregator.clone(),
        });
    }
    let spec = cfg.ta_spec();
    let mut view = TaView {
        agg: state.aggregator.clone(),
        rows: base_rows,
    };
    let mut fitted = None;
    if spec.self_emb {
        let init = view
            .rows
            .row(s)
            .ok_or_else(|| Error::Config(format!("no task embedding row for speaker {s}")))?
            .to_vec();
        let v = fit_task_embedding(model, &init, &refs(support), cfg.fit_steps, cfg.fit_lr)?;
        view.rows.extra.insert(s, v.clone());
        fitted = Some(v);
    }
    let negatives = match (spec.lambda > 0.0, negative_pool) {
        (true, Some(pool)) => pool.sample_negatives(s, cfg.k_ns, rng)?,
        _ => Vec::new(),
    };
    let (adapted, h) = if cfg.mode == Mode::TaAsBase {
        let mut cur = model.clone();
        for step in 0..cfg.inner_steps {
            let h = task_representation(spec.kind, &view.agg, &view.rows, graph, s, spec.self_emb)?;
            let g = cur.loss_grad(Some(&h), support, GradRequest::BOTH)?;
            let inner_spec = TaSpec { lambda: 0.0, ..spec };
            let tg = ta_backward(inner_spec, &view.agg, &view.rows, graph, s, &[], g.h.as_ref().expect("requested"))?;
            let mut p = cur.params().clone();
            p.axpy(-cfg.alpha, g.params.as_ref().expect("requested"));
            if tg.agg.len() == view.agg.0.len() {
                view.agg.0.axpy(-cfg.alpha, &tg.agg);
            }
            for (u, gr) in tg.rows {
                let mut r = view.rows.row(u).expect("read during backward").to_vec();
                r.iter_mut().zip(&gr).for_each(|(x, d)| *x -= cfg.alpha * d);
                view.rows.extra.insert(u, r);
            }
            if !p.all_finite() || !view.agg.0.all_finite() {
                return Err(Error::Numeric(format!("inner step {step} produced non-finite parameters")));
            }
            cur = cur.with_params(p);
        }
        let h = task_representation(spec.kind, &view.agg, &view.rows, graph, s, spec.self_emb)?;
        (cur, h)
    } else {
        let h = task_representation(spec.kind, &view.agg, &view.rows, graph, s, spec.self_emb)?;
        (inner_adapt(model, Some(&h), support, cfg.alpha, cfg.inner_steps)?, h)
    };
    let (query_loss, g_model, g_h) = if cfg.mode == Mode::TaAsBase {
        let q = adapted.loss_grad(Some(&h), query, GradRequest::BOTH)?;
        (q.loss, q.params.expect("requested"), q.h.expect("requested"))
    } else {
        let mg = meta_gradient(model, Some(&h), support, query, cfg.alpha, cfg.inner_steps, cfg.first_order)?;
        (mg.query_loss, mg.params, mg.h)
    };
    let tg = ta_backward(spec, &view.agg, &view.rows, graph, s, &negatives, &g_h)?;
    Ok(EpisodeOutcome {
        adapted_agg: view.agg,
        query_loss,
        ns_loss: tg.ns_loss,
        g_model,
        g_agg: (spec.kind == AggregatorKind::Gcn).then_some(tg.agg),
        g_rows: tg.rows,
        fitted,
        h: Some(h),
        adapted,
    })
}

fn episode_for<R: Rng + ?Sized>(
    state: &mut MetaState,
    data: &Dataset,
    s: SpeakerId,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<Episode> {
    if !cfg.fixed_partition {
        return build_episode(data, s, cfg.k, rng);
    }
    if let Some((sup, qu)) = state.partitions.get(&s) {
        let list = data.samples_of(s).expect("checked when drawn");
        return Ok(Episode {
            speaker: s,
            support: sup.iter().map(|&i| list[i].clone()).collect(),
            query: qu.iter().map(|&i| list[i].clone()).collect(),
            support_positions: sup.clone(),
            query_positions: qu.clone(),
        });
    }
    let ep = build_episode(data, s, cfg.k, rng)?;
    state
        .partitions
        .insert(s, (ep.support_positions.clone(), ep.query_positions.clone()));
    Ok(ep)
}

/// One meta-update over a freshly drawn batch of training speakers.
pub fn outer_step<R: Rng + ?Sized>(
    state: &mut MetaState,
    train: &Dataset,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    cfg.validate()?;
    let batch = speaker_batch(train, cfg.meta_batch, rng)?;
    outer_step_on(state, train, &batch, cfg, rng)
}

/// One meta-update over the given speakers, processed in order against a
/// frozen snapshot; gradients are averaged and applied together.
pub fn outer_step_on<R: Rng + ?Sized>(
    state: &mut MetaState,
    train: &Dataset,
    batch: &[SpeakerId],
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<StepMetrics> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty speaker batch".into()));
    }
    let graph = train.graph();
    let scale = 1.0 / batch.len() as f64;
    let mut g_model = state.model.params().zeros_like();
    let mut g_agg = state.aggregator.0.zeros_like();
    let mut g_rows: BTreeMap<SpeakerId, Vec<f64>> = BTreeMap::new();
    let mut fitted_rows = BTreeMap::new();
    let mut losses = Vec::with_capacity(batch.len());
    let mut ns_total = 0.0;
    for &s in batch {
        let ep = episode_for(state, train, s, cfg, rng).map_err(|e| e.for_speaker(s))?;
        let out = run_episode(
            state,
            cfg,
            graph,
            Overlay::new(&state.table),
            s,
            &ep.support,
            &ep.query,
            Some(graph),
            rng,
        )
        .map_err(|e| e.for_speaker(s))?;
        g_model.axpy(scale, &out.g_model);
        if let Some(ga) = &out.g_agg {
            g_agg.axpy(scale, ga);
        }
        for (u, gr) in out.g_rows {
            let acc = g_rows.entry(u).or_insert_with(|| vec![0.0; gr.len()]);
            acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += scale * b);
        }
        if let Some(v) = out.fitted {
            fitted_rows.insert(s, v);
        }
        losses.push(out.query_loss);
        ns_total += out.ns_loss;
    }
    let step = state.step;
    if !g_model.all_finite() || !g_agg.all_finite() || g_rows.values().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite meta-gradient at outer step {step}")));
    }
    for (s, v) in fitted_rows {
        state.table.set_row(s, v)?;
    }
    let adam = Adam::from(cfg);
    let mut params = state.model.params().clone();
    state.model_opt.step(&mut params, &g_model, &adam);
    *state.model.params_mut() = params;
    if cfg.mode.uses_ta() && cfg.mode.kind() == AggregatorKind::Gcn {
        state.agg_opt.step(&mut state.aggregator.0, &g_agg, &adam);
    }
    for (u, gr) in &g_rows {
        let row = state
            .table
            .row_mut(*u)
            .ok_or_else(|| Error::Config(format!("gradient for missing table row {u}")))?;
        let mom = state.row_opt.entry(*u).or_insert_with(|| RowMoments {
            t: 0,
            m: vec![0.0; gr.len()],
            v: vec![0.0; gr.len()],
        });
        mom.t += 1;
        adam_update(row, gr, &mut mom.m, &mut mom.v, mom.t, &adam);
    }
    if !state.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at outer step {step}")));
    }
    state.step += 1;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(StepMetrics {
        step,
        speakers: batch.to_vec(),
        query_losses: losses,
        mean_query_loss: mean,
        ns_loss: ns_total * scale,
    })
}

/// Graph seen by newcomer `s` under `policy`.
pub fn policy_graph(
    full: &SocialGraph,
    train: &Dataset,
    s: SpeakerId,
    policy: NeighborPolicy,
) -> SocialGraph {
    match policy {
        NeighborPolicy::All => full.clone(),
        NeighborPolicy::TrainOnly => {
            full.filter_edges(|a, b| (a == s || train.contains(a)) && (b == s || train.contains(b)))
        }
    }
}

/// Initial rows for every speaker of `full` that has none in the table.
pub fn newcomer_rows(table: &TaskEmbeddingTable, full: &SocialGraph) -> Result<BTreeMap<SpeakerId, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for i in 0..full.num_speakers() {
        let s = SpeakerId(i as u32);
        if !table.contains(s) {
            out.insert(s, table.initial_row(full, s)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { top_k: 5, max_len: 20 }
    }
}

/// Outcome of adapting to one (possibly unseen) speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct TestOutcome {
    pub speaker: SpeakerId,
    /// Row fitted on the support set, when the mode fits one.
    pub fitted: Option<Vec<f64>>,
    pub h: Option<Vec<f64>>,
    pub generations: Vec<Utterance>,
    pub pre_query_loss: f64,
    pub query_loss: f64,
}

/// Test-time procedure: fit, aggregate and adapt exactly as in training,
/// then decode every query. Takes the state by shared reference.
///
/// `graph` is the neighborhood structure to aggregate over; `extra_rows`
/// supplies rows for speakers missing from the table.
#[allow(clippy::too_many_arguments)]
pub fn test_adapt_generate<R: Rng + ?Sized>(
    state: &MetaState,
    episode: &Episode,
    graph: &SocialGraph,
    extra_rows: &BTreeMap<SpeakerId, Vec<f64>>,
    cfg: &MetaConfig,
    decode: DecodeConfig,
    rng: &mut R,
) -> Result<TestOutcome> {
    cfg.validate()?;
    let s = episode.speaker;
    let mut inner = || -> Result<TestOutcome> {
        let mut rows = Overlay::new(&state.table);
        rows.extra = extra_rows.clone();
        if cfg.mode.uses_ta() && rows.row(s).is_none() {
            let init = state.table.initial_row(graph, s)?;
            rows.extra.insert(s, init);
        }
        let out = run_episode(state, cfg, graph, rows, s, &episode.support, &episode.query, None, rng)?;
        let pre = state.model.loss(out.h.as_deref(), &episode.query)?;
        let mut generations = Vec::with_capacity(episode.query.len());
        for q in &episode.query {
            generations.push(out.adapted.decode_topk(out.h.as_deref(), &q.query, decode.top_k, decode.max_len, rng)?);
        }
        Ok(TestOutcome {
            speaker: s,
            fitted: out.fitted,
            h: out.h,
            generations,
            pre_query_loss: pre,
            query_loss: out.query_loss,
        })
    };
    inner().map_err(|e| e.for_speaker(s))
}

/// Embedding fitted from zero on the support set alone, with no graph
/// information: the speaker-embedding comparator for the γ-probe.
pub fn standalone_embedding(model: &Model, support: &[ConversationSample], cfg: &MetaConfig) -> Result<Vec<f64>> {
    let zero = vec![0.0; model.config().d_model];
    fit_task_embedding(model, &zero, &refs(support), cfg.fit_steps, cfg.fit_lr)
}

/// Rows of the table as a dense matrix, for diagnostics.
pub fn table_matrix(table: &TaskEmbeddingTable) -> Mat {
    table.to_parts().1
}
