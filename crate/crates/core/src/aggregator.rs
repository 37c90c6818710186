//! Task aggregator: per-speaker task embeddings, a two-layer neighbor-mean
//! GCN producing the task representation `h_s`, and the negative-sampling
//! structural loss.
//!
//! Row-vector convention throughout: a layer computes `x·W + b`.

use crate::corpus::ConversationSample;
use crate::error::{Error, Result};
use crate::model::{GradRequest, Model};
use crate::params::{checksum_of, ParamVec};
use crate::social::{SocialGraph, SpeakerId};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

/// Read access to task-embedding rows.
pub trait EmbeddingRows {
    fn dim(&self) -> usize;
    fn row(&self, s: SpeakerId) -> Option<&[f64]>;
}

/// Trainable per-speaker embeddings. Rows exist for every training speaker;
/// rows for newcomers are allocated on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbeddingTable {
    dim: usize,
    rows: BTreeMap<SpeakerId, Vec<f64>>,
}

impl TaskEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// Rows drawn from `N(0, 1/dim)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, speakers: &[SpeakerId], rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let rows = speakers
            .iter()
            .map(|&s| (s, Mat::randn(1, dim, std, rng).into_data()))
            .collect();
        Self { dim, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, s: SpeakerId) -> bool {
        self.rows.contains_key(&s)
    }

    pub fn speakers(&self) -> impl Iterator<Item = SpeakerId> + '_ {
        self.rows.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SpeakerId, &[f64])> {
        self.rows.iter().map(|(&s, r)| (s, r.as_slice()))
    }

    pub fn row_mut(&mut self, s: SpeakerId) -> Option<&mut Vec<f64>> {
        self.rows.get_mut(&s)
    }

    pub fn set_row(&mut self, s: SpeakerId, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Incompatible {
                field: format!("embedding row of speaker {s}"),
                expected: self.dim.to_string(),
                found: v.len().to_string(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding row for speaker {s}")));
        }
        self.rows.insert(s, v);
        Ok(())
    }

    /// Mean of the neighbors' existing rows, or zeros when none exist.
    pub fn initial_row(&self, graph: &SocialGraph, s: SpeakerId) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for u in graph.neighbors(s)? {
            if let Some(r) = self.rows.get(u) {
                acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        Ok(acc)
    }

    /// SHA-256 over speaker ids and row values.
    pub fn checksum(&self) -> String {
        let mats: Vec<Mat> = self
            .rows
            .iter()
            .map(|(s, r)| {
                let mut data = vec![s.0 as f64];
                data.extend_from_slice(r);
                Mat::row_vector(data)
            })
            .collect();
        checksum_of(mats.iter())
    }

    /// Speaker ids with the matching row-major matrix.
    pub fn to_parts(&self) -> (Vec<SpeakerId>, Mat) {
        let ids: Vec<SpeakerId> = self.rows.keys().copied().collect();
        let data = self.rows.values().flatten().copied().collect();
        (ids.clone(), Mat::from_vec(ids.len(), self.dim, data))
    }

    pub fn from_parts(ids: &[SpeakerId], m: &Mat) -> Result<Self> {
        if ids.len() != m.rows() {
            return Err(Error::Incompatible {
                field: "embedding table rows".into(),
                expected: ids.len().to_string(),
                found: m.rows().to_string(),
            });
        }
        let mut t = Self::new(m.cols());
        for (i, &s) in ids.iter().enumerate() {
            if t.rows.insert(s, m.row(i).to_vec()).is_some() {
                return Err(Error::Format {
                    what: "embedding table".into(),
                    detail: format!("speaker {s} listed twice"),
                });
            }
        }
        Ok(t)
    }
}

impl EmbeddingRows for TaskEmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, s: SpeakerId) -> Option<&[f64]> {
        self.rows.get(&s).map(Vec::as_slice)
    }
}

/// Rows of `base` with some rows replaced or added.
pub struct Overlay<'a, B: EmbeddingRows + ?Sized> {
    pub base: &'a B,
    pub extra: BTreeMap<SpeakerId, Vec<f64>>,
}

impl<'a, B: EmbeddingRows + ?Sized> Overlay<'a, B> {
    pub fn new(base: &'a B) -> Self {
        Self {
            base,
            extra: BTreeMap::new(),
        }
    }
}

impl<B: EmbeddingRows + ?Sized> EmbeddingRows for Overlay<'_, B> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn row(&self, s: SpeakerId) -> Option<&[f64]> {
        self.extra.get(&s).map(Vec::as_slice).or_else(|| self.base.row(s))
    }
}

/// Records every row id read through it.
pub struct Traced<'a, B: EmbeddingRows + ?Sized> {
    inner: &'a B,
    log: RefCell<BTreeSet<SpeakerId>>,
}

impl<'a, B: EmbeddingRows + ?Sized> Traced<'a, B> {
    pub fn new(inner: &'a B) -> Self {
        Self {
            inner,
            log: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn reads(&self) -> BTreeSet<SpeakerId> {
        self.log.borrow().clone()
    }
}

impl<B: EmbeddingRows + ?Sized> EmbeddingRows for Traced<'_, B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn row(&self, s: SpeakerId) -> Option<&[f64]> {
        self.log.borrow_mut().insert(s);
        self.inner.row(s)
    }
}

/// `W1, b1, W2, b2`, each `W` square.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParameters(pub ParamVec);

impl AggregatorParameters {
    /// Glorot-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self(ParamVec(vec![
            Mat::randn(dim, dim, std, rng),
            Mat::zeros(1, dim),
            Mat::randn(dim, dim, std, rng),
            Mat::zeros(1, dim),
        ]))
    }

    pub fn identity(dim: usize) -> Self {
        Self(ParamVec(vec![
            Mat::identity(dim),
            Mat::zeros(1, dim),
            Mat::identity(dim),
            Mat::zeros(1, dim),
        ]))
    }

    pub fn dim(&self) -> usize {
        self.0 .0[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let want = [(d, d), (1, d), (d, d), (1, d)];
        if self.0.shapes() != want {
            return Err(Error::Incompatible {
                field: "aggregator shapes".into(),
                expected: format!("{want:?}"),
                found: format!("{:?}", self.0.shapes()),
            });
        }
        if !self.0.all_finite() {
            return Err(Error::Numeric("non-finite aggregator parameter".into()));
        }
        Ok(())
    }
}

/// Starting point for the aggregator weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorInit {
    /// `N(0, 1/d)` weights, zero biases.
    Glorot,
    /// Identity weights, zero biases: the GCN starts as a rectified
    /// neighborhood mean.
    #[default]
    Identity,
}

impl AggregatorInit {
    pub fn build<R: Rng + ?Sized>(self, dim: usize, rng: &mut R) -> AggregatorParameters {
        match self {
            AggregatorInit::Glorot => AggregatorParameters::random(dim, rng),
            AggregatorInit::Identity => AggregatorParameters::identity(dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Two-layer neighbor-mean GCN.
    Gcn,
    /// Plain mean of the embeddings (no learned weights).
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsConfig {
    pub k_ns: usize,
    pub lambda: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self { k_ns: 5, lambda: 1.0 }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_ns == 0 || !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "k_ns must be >= 1 and lambda >= 0 (got {} and {})",
                self.k_ns, self.lambda
            )));
        }
        Ok(())
    }
}

/// What the aggregation reads for speaker `s`.
struct Plan {
    /// Layer-2 inputs: N_s, plus s when self_emb.
    outer: Vec<SpeakerId>,
    /// Layer-1 neighborhood of each outer node (itself included, s excluded
    /// when !self_emb).
    inner: Vec<Vec<SpeakerId>>,
}

fn plan(g: &SocialGraph, s: SpeakerId, self_emb: bool, kind: AggregatorKind) -> Result<Plan> {
    let ns = g.neighbors(s)?;
    if !self_emb && ns.is_empty() {
        return Err(Error::NoNeighbors(s));
    }
    let mut outer: Vec<SpeakerId> = ns.to_vec();
    if self_emb {
        outer.push(s);
        outer.sort_unstable();
    }
    let inner = match kind {
        AggregatorKind::Mean => Vec::new(),
        AggregatorKind::Gcn => outer
            .iter()
            .map(|&u| {
                let mut m: Vec<SpeakerId> = g
                    .neighbors(u)
                    .expect("valid")
                    .iter()
                    .copied()
                    .chain(std::iter::once(u))
                    .filter(|&w| self_emb || w != s)
                    .collect();
                m.sort_unstable();
                m
            })
            .collect(),
    };
    Ok(Plan { outer, inner })
}

/// Tape-side handles for one aggregation.
struct Built {
    h: Var,
    rows: BTreeMap<SpeakerId, Var>,
}

fn fetch<'a, E: EmbeddingRows + ?Sized>(rows: &'a E, s: SpeakerId) -> Result<&'a [f64]> {
    rows.row(s)
        .ok_or_else(|| Error::Config(format!("no task embedding row for speaker {s}")))
}

fn row_var<E: EmbeddingRows + ?Sized>(
    t: &mut Tape,
    vars: &mut BTreeMap<SpeakerId, Var>,
    rows: &E,
    s: SpeakerId,
    trainable: bool,
) -> Result<Var> {
    if let Some(&v) = vars.get(&s) {
        return Ok(v);
    }
    let r = fetch(rows, s)?;
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite embedding row for speaker {s}")));
    }
    let v = t.leaf(Mat::row_vector(r.to_vec()), trainable);
    vars.insert(s, v);
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn build<E: EmbeddingRows + ?Sized>(
    t: &mut Tape,
    agg: Option<&[Var]>,
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    self_emb: bool,
    kind: AggregatorKind,
    trainable_rows: bool,
) -> Result<Built> {
    let p = plan(g, s, self_emb, kind)?;
    let mut vars = BTreeMap::new();
    let h = match kind {
        AggregatorKind::Mean => {
            let parts = p
                .outer
                .iter()
                .map(|&u| row_var(t, &mut vars, rows, u, trainable_rows))
                .collect::<Result<Vec<_>>>()?;
            let m = t.concat_rows(&parts);
            t.mean_rows(m)
        }
        AggregatorKind::Gcn => {
            let w = agg.expect("gcn needs weights");
            let mut firsts = Vec::with_capacity(p.outer.len());
            for nb in &p.inner {
                let parts = nb
                    .iter()
                    .map(|&u| row_var(t, &mut vars, rows, u, trainable_rows))
                    .collect::<Result<Vec<_>>>()?;
                let m = t.concat_rows(&parts);
                firsts.push(t.mean_rows(m));
            }
            let x = t.concat_rows(&firsts);
            let x = t.matmul(x, w[0]);
            let x = t.add_row(x, w[1]);
            let x = t.relu(x);
            let m = t.mean_rows(x);
            let y = t.matmul(m, w[2]);
            t.add_row(y, w[3])
        }
    };
    Ok(Built { h, rows: vars })
}

fn agg_vars(t: &mut Tape, agg: &AggregatorParameters, trainable: bool) -> Vec<Var> {
    agg.0 .0.iter().map(|m| t.leaf(m.clone(), trainable)).collect()
}

fn check_dims<E: EmbeddingRows + ?Sized>(agg: Option<&AggregatorParameters>, rows: &E) -> Result<()> {
    if let Some(a) = agg {
        a.validate()?;
        if a.dim() != rows.dim() {
            return Err(Error::Incompatible {
                field: "aggregator width".into(),
                expected: rows.dim().to_string(),
                found: a.dim().to_string(),
            });
        }
    }
    Ok(())
}

/// Two-layer GCN representation of `s`; no ReLU on the output.
pub fn aggregate<E: EmbeddingRows + ?Sized>(
    agg: &AggregatorParameters,
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    self_emb: bool,
) -> Result<Vec<f64>> {
    check_dims(Some(agg), rows)?;
    let mut t = Tape::new();
    let w = agg_vars(&mut t, agg, false);
    let b = build(&mut t, Some(&w), rows, g, s, self_emb, AggregatorKind::Gcn, false)?;
    Ok(t.value(b.h).data().to_vec())
}

/// Mean of the embeddings of `N_s` (plus `s` when `self_emb`).
pub fn aggregate_mean_ablation<E: EmbeddingRows + ?Sized>(
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    self_emb: bool,
) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let b = build(&mut t, None, rows, g, s, self_emb, AggregatorKind::Mean, false)?;
    Ok(t.value(b.h).data().to_vec())
}

/// Either aggregation, by kind.
pub fn task_representation<E: EmbeddingRows + ?Sized>(
    kind: AggregatorKind,
    agg: &AggregatorParameters,
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    self_emb: bool,
) -> Result<Vec<f64>> {
    match kind {
        AggregatorKind::Gcn => aggregate(agg, rows, g, s, self_emb),
        AggregatorKind::Mean => aggregate_mean_ablation(rows, g, s, self_emb),
    }
}

fn ns_term<E: EmbeddingRows + ?Sized>(
    t: &mut Tape,
    h: Var,
    vars: &mut BTreeMap<SpeakerId, Var>,
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    negatives: &[SpeakerId],
    trainable: bool,
) -> Result<Var> {
    let mut terms = Vec::new();
    let neigh = g.neighbors(s)?;
    if !neigh.is_empty() {
        let parts = neigh
            .iter()
            .map(|&u| row_var(t, vars, rows, u, trainable))
            .collect::<Result<Vec<_>>>()?;
        let m = t.concat_rows(&parts);
        let sc = t.matmul_t(m, h);
        let ls = t.log_sigmoid(sc);
        terms.push(t.sum(ls));
    }
    if !negatives.is_empty() {
        let parts = negatives
            .iter()
            .map(|&u| row_var(t, vars, rows, u, trainable))
            .collect::<Result<Vec<_>>>()?;
        let m = t.concat_rows(&parts);
        let sc = t.matmul_t(m, h);
        let sc = t.neg(sc);
        let ls = t.log_sigmoid(sc);
        terms.push(t.sum(ls));
    }
    let total = match terms.as_slice() {
        [] => {
            let z = t.constant(Mat::scalar(0.0));
            return Ok(z);
        }
        [a] => *a,
        [a, b] => t.add(*a, *b),
        _ => unreachable!(),
    };
    let loss = t.neg(total);
    if !t.value(loss).item().is_finite() {
        return Err(Error::Numeric(format!("non-finite negative-sampling loss for speaker {s}")));
    }
    Ok(loss)
}

/// `−( Σ_{i∈N_s} ln σ(v_i·h) + Σ_j ln σ(−v_j·h) )`.
pub fn ns_loss<E: EmbeddingRows + ?Sized>(
    h: &[f64],
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    negatives: &[SpeakerId],
) -> Result<f64> {
    let mut t = Tape::new();
    let hv = t.constant(Mat::row_vector(h.to_vec()));
    let mut vars = BTreeMap::new();
    let l = ns_term(&mut t, hv, &mut vars, rows, g, s, negatives, false)?;
    Ok(t.value(l).item())
}

/// Gradient of `ns_loss` with respect to `h` and to each referenced row.
pub fn ns_loss_grad<E: EmbeddingRows + ?Sized>(
    h: &[f64],
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    negatives: &[SpeakerId],
) -> Result<(f64, Vec<f64>, BTreeMap<SpeakerId, Vec<f64>>)> {
    let mut t = Tape::new();
    let hv = t.param(Mat::row_vector(h.to_vec()));
    let mut vars = BTreeMap::new();
    let l = ns_term(&mut t, hv, &mut vars, rows, g, s, negatives, true)?;
    let value = t.value(l).item();
    let mut gr = t.backward(l);
    let gh = gr.take_or_zeros(hv, 1, h.len()).into_data();
    let rows_g = vars
        .into_iter()
        .map(|(u, v)| (u, gr.take_or_zeros(v, 1, h.len()).into_data()))
        .collect();
    Ok((value, gh, rows_g))
}

/// Settings of one task-representation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaSpec {
    pub kind: AggregatorKind,
    pub self_emb: bool,
    /// Weight of the negative-sampling term; 0 drops it.
    pub lambda: f64,
}

/// Gradients of `h·g_h + λ·L_ns` for one speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct TaGrad {
    pub h: Vec<f64>,
    pub ns_loss: f64,
    /// Zero-sized when the aggregation has no weights.
    pub agg: ParamVec,
    pub rows: BTreeMap<SpeakerId, Vec<f64>>,
}

/// Back-propagates an upstream gradient `g_h` on the task representation
/// (and the weighted negative-sampling loss) into the aggregator weights and
/// the embedding rows read.
pub fn ta_backward<E: EmbeddingRows + ?Sized>(
    spec: TaSpec,
    agg: &AggregatorParameters,
    rows: &E,
    g: &SocialGraph,
    s: SpeakerId,
    negatives: &[SpeakerId],
    g_h: &[f64],
) -> Result<TaGrad> {
    let gcn = spec.kind == AggregatorKind::Gcn;
    check_dims(gcn.then_some(agg), rows)?;
    let mut t = Tape::new();
    let w = agg_vars(&mut t, agg, true);
    let b = build(&mut t, Some(&w), rows, g, s, spec.self_emb, spec.kind, true)?;
    let h_val = t.value(b.h).data().to_vec();
    let upstream = t.constant(Mat::row_vector(g_h.to_vec()));
    let mut objective = t.dot(b.h, upstream);
    let mut vars = b.rows;
    let mut ns_value = 0.0;
    if spec.lambda > 0.0 {
        let ns = ns_term(&mut t, b.h, &mut vars, rows, g, s, negatives, true)?;
        ns_value = t.value(ns).item();
        let ns = t.scale(ns, spec.lambda);
        objective = t.add(objective, ns);
    }
    let mut gr = t.backward(objective);
    let agg_g = if gcn {
        ParamVec(
            w.iter()
                .zip(&agg.0 .0)
                .map(|(&v, m)| gr.take_or_zeros(v, m.rows(), m.cols()))
                .collect(),
        )
    } else {
        ParamVec(Vec::new())
    };
    let d = rows.dim();
    let rows_g = vars
        .into_iter()
        .map(|(u, v)| (u, gr.take_or_zeros(v, 1, d).into_data()))
        .collect();
    Ok(TaGrad {
        h: h_val,
        ns_loss: ns_value,
        agg: agg_g,
        rows: rows_g,
    })
}

/// Gradient descent on `v` alone, with `v` fed to the frozen model as the
/// task representation.
pub fn fit_task_embedding(
    model: &Model,
    init: &[f64],
    support: &[&ConversationSample],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Config("fit_task_embedding needs a non-empty support set".into()));
    }
    if init.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite initial task embedding".into()));
    }
    let mut v = init.to_vec();
    for step in 0..steps {
        let g = model.nll_grad(Some(&v), support, GradRequest::H)?;
        let gh = g.h.expect("requested");
        for (x, d) in v.iter_mut().zip(&gh) {
            *x -= lr * d;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("task embedding diverged at step {step}")));
        }
    }
    Ok(v)
}
