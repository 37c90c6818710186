//! Sine-wave regression: a small MLP meta-trained on tasks
//! `y = A·sin(x − φ)` as a sanity harness for the meta-learning loop.

use super::{inner_adapt, meta_gradient, Adam, AdamState, Learner};
use crate::error::{Error, Result};
use crate::model::{GradRequest, LossGrad};
use crate::params::ParamVec;
use crate::scalar::{Dual, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    /// Amplitude in `[0.1, 5]`, phase in `[0, π]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            amplitude: rng.gen_range(0.1..=5.0),
            phase: rng.gen_range(0.0..=std::f64::consts::PI),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }

    /// `n` points with `x` uniform in `[−5, 5]`.
    pub fn points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(f64, f64)> {
        let u = Uniform::new_inclusive(-5.0, 5.0);
        (0..n)
            .map(|_| {
                let x = u.sample(rng);
                (x, self.eval(x))
            })
            .collect()
    }
}

/// Fully connected ReLU network with scalar input and output.
#[derive(Clone, Debug, PartialEq)]
pub struct SineMlp {
    params: ParamVec,
}

impl SineMlp {
    /// Layer widths `1 → hidden… → 1`; weights `N(0, 1/fan_in)`.
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut mats = Vec::new();
        for w in dims.windows(2) {
            mats.push(Mat::randn(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), rng));
            mats.push(Mat::zeros(1, w[1]));
        }
        Self { params: ParamVec(mats) }
    }

    pub fn predict(&self, x: f64) -> f64 {
        let mut t = Tape::<f64>::new();
        let p: Vec<Var> = self.params.0.iter().map(|m| t.constant(m.clone())).collect();
        let xv = t.constant(Mat::scalar(x));
        let out = forward(&mut t, &p, xv);
        t.value(out).item()
    }

    fn build<S: Scalar>(t: &mut Tape<S>, p: &[Var], batch: &[(f64, f64)]) -> Var {
        let xs = t.constant(Mat::from_vec(batch.len(), 1, batch.iter().map(|b| S::from_f64(b.0)).collect()));
        let ys = t.constant(Mat::from_vec(batch.len(), 1, batch.iter().map(|b| S::from_f64(b.1)).collect()));
        let pred = forward(t, p, xs);
        let d = t.sub(pred, ys);
        let sq = t.mul(d, d);
        let s = t.sum(sq);
        t.scale(s, S::from_f64(1.0 / batch.len() as f64))
    }
}

fn forward<S: Scalar>(t: &mut Tape<S>, p: &[Var], x: Var) -> Var {
    let layers = p.len() / 2;
    let mut a = x;
    for l in 0..layers {
        a = t.matmul(a, p[2 * l]);
        a = t.add_row(a, p[2 * l + 1]);
        if l + 1 < layers {
            a = t.relu(a);
        }
    }
    a
}

impl Learner for SineMlp {
    type Sample = (f64, f64);

    fn params(&self) -> &ParamVec {
        &self.params
    }

    fn with_params(&self, params: ParamVec) -> Self {
        Self { params }
    }

    fn loss(&self, _h: Option<&[f64]>, batch: &[(f64, f64)]) -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let p: Vec<Var> = self.params.0.iter().map(|m| t.constant(m.clone())).collect();
        let l = Self::build(&mut t, &p, batch);
        Ok(t.value(l).item())
    }

    fn loss_grad(&self, _h: Option<&[f64]>, batch: &[(f64, f64)], want: GradRequest) -> Result<LossGrad> {
        let mut t = Tape::<f64>::new();
        let p: Vec<Var> = self.params.0.iter().map(|m| t.leaf(m.clone(), want.params)).collect();
        let l = Self::build(&mut t, &p, batch);
        let loss = t.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite sine loss".into()));
        }
        let mut g = t.backward(l);
        let params = want.params.then(|| {
            ParamVec(
                p.iter()
                    .zip(&self.params.0)
                    .map(|(&v, m)| g.take_or_zeros(v, m.rows(), m.cols()))
                    .collect(),
            )
        });
        Ok(LossGrad {
            loss,
            params,
            h: want.h.then(Vec::new),
        })
    }

    fn hvp(&self, _h: Option<&[f64]>, batch: &[(f64, f64)], v: &ParamVec) -> Result<(LossGrad, ParamVec, Vec<f64>)> {
        let mut t = Tape::<Dual>::new();
        let p: Vec<Var> = self
            .params
            .0
            .iter()
            .zip(&v.0)
            .map(|(m, dv)| {
                let data = m.data().iter().zip(dv.data()).map(|(&a, &b)| Dual::new(a, b)).collect();
                t.param(Mat::from_vec(m.rows(), m.cols(), data))
            })
            .collect();
        let l = Self::build(&mut t, &p, batch);
        let loss = t.value(l).item().re;
        let mut g = t.backward(l);
        let mut grad = Vec::new();
        let mut hv = Vec::new();
        for (&var, m) in p.iter().zip(&self.params.0) {
            let gm = g.take_or_zeros(var, m.rows(), m.cols());
            grad.push(Mat::from_vec(m.rows(), m.cols(), gm.data().iter().map(|x| x.re).collect()));
            hv.push(Mat::from_vec(m.rows(), m.cols(), gm.data().iter().map(|x| x.eps).collect()));
        }
        Ok((
            LossGrad {
                loss,
                params: Some(ParamVec(grad)),
                h: Some(Vec::new()),
            },
            ParamVec(hv),
            Vec::new(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineConfig {
    pub hidden: Vec<usize>,
    pub outer_steps: usize,
    pub meta_batch: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub heldout_tasks: usize,
}

impl Default for SineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![40, 40],
            outer_steps: 2000,
            meta_batch: 10,
            k: 10,
            alpha: 0.01,
            beta: 1e-3,
            inner_steps: 1,
            first_order: true,
            heldout_tasks: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineReport {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    /// Fraction of held-out tasks whose query loss dropped after adaptation.
    pub improved: f64,
    pub train_curve: Vec<f64>,
}

/// Meta-trains a fresh network and measures adaptation on held-out tasks.
pub fn run_sine<R: Rng + ?Sized>(cfg: &SineConfig, rng: &mut R) -> Result<(SineMlp, SineReport)> {
    if cfg.k == 0 || cfg.meta_batch == 0 || cfg.heldout_tasks == 0 {
        return Err(Error::Config("k, meta_batch and heldout_tasks must be >= 1".into()));
    }
    let mut net = SineMlp::new(&cfg.hidden, rng);
    let mut opt = AdamState::new(net.params());
    let adam = Adam::with_lr(cfg.beta);
    let mut curve = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let mut g = net.params().zeros_like();
        let mut total = 0.0;
        for _ in 0..cfg.meta_batch {
            let task = SineTask::sample(rng);
            let support = task.points(cfg.k, rng);
            let query = task.points(cfg.k, rng);
            let mg = meta_gradient(&net, None, &support, &query, cfg.alpha, cfg.inner_steps, cfg.first_order)?;
            g.axpy(1.0 / cfg.meta_batch as f64, &mg.params);
            total += mg.query_loss;
        }
        let mut p = net.params().clone();
        opt.step(&mut p, &g, &adam);
        if !p.all_finite() {
            return Err(Error::Numeric(format!("sine meta-training diverged at step {step}")));
        }
        net = net.with_params(p);
        curve.push(total / cfg.meta_batch as f64);
    }
    let mut pre = Vec::with_capacity(cfg.heldout_tasks);
    let mut post = Vec::with_capacity(cfg.heldout_tasks);
    for _ in 0..cfg.heldout_tasks {
        let task = SineTask::sample(rng);
        let support = task.points(cfg.k, rng);
        let query = task.points(cfg.k, rng);
        pre.push(net.loss(None, &query)?);
        let adapted = inner_adapt(&net, None, &support, cfg.alpha, cfg.inner_steps)?;
        post.push(adapted.loss(None, &query)?);
    }
    let improved = pre.iter().zip(&post).filter(|(a, b)| b < a).count() as f64 / pre.len() as f64;
    Ok((
        net,
        SineReport {
            pre,
            post,
            improved,
            train_curve: curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn second_order_matches_finite_differences_on_small_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SineMlp::new(&[8, 8], &mut rng);
        assert!(net.params().num_scalars() <= 100);
        // zero biases put points with an all-off first layer exactly on a kink
        for b in [1, 3, 5] {
            net.params.0[b] = Mat::randn(1, net.params.0[b].cols(), 0.3, &mut rng);
        }
        let task = SineTask::sample(&mut rng);
        let support = task.points(10, &mut rng);
        let query = task.points(10, &mut rng);
        let alpha = 0.05;
        let steps = 2;
        let mg = meta_gradient(&net, None, &support, &query, alpha, steps, false).unwrap();
        let fo = meta_gradient(&net, None, &support, &query, alpha, steps, true).unwrap();
        let objective = |p: &ParamVec| {
            let a = inner_adapt(&net.with_params(p.clone()), None, &support, alpha, steps).unwrap();
            a.loss(None, &query).unwrap()
        };
        let flat = net.params().flatten();
        let fd: Vec<f64> = (0..flat.len())
            .map(|i| {
                let eps = 1e-6;
                let mut a = flat.clone();
                a[i] += eps;
                let mut b = flat.clone();
                b[i] -= eps;
                (objective(&net.params().unflatten_like(&a)) - objective(&net.params().unflatten_like(&b))) / (2.0 * eps)
            })
            .collect();
        let exact = mg.params.flatten();
        let diff: f64 = exact.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-3, "relative error {}", diff / norm);
        let fo_diff: f64 = fo.params.flatten().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(fo_diff > diff);
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = SineMlp::new(&[6], &mut rng);
        let batch = SineTask::sample(&mut rng).points(8, &mut rng);
        let v = net.params().unflatten_like(&Mat::randn(1, net.params().num_scalars(), 1.0, &mut rng).into_data());
        let (_, hv, _) = net.hvp(None, &batch, &v).unwrap();
        let eps = 1e-6;
        let mut a = net.params().clone();
        a.axpy(eps, &v);
        let mut b = net.params().clone();
        b.axpy(-eps, &v);
        let ga = net.with_params(a).loss_grad(None, &batch, GradRequest::PARAMS).unwrap().params.unwrap();
        let gb = net.with_params(b).loss_grad(None, &batch, GradRequest::PARAMS).unwrap().params.unwrap();
        let mut fd = ga;
        fd.axpy(-1.0, &gb);
        fd.scale(1.0 / (2.0 * eps));
        let mut d = fd.clone();
        d.axpy(-1.0, &hv);
        assert!(d.norm() / fd.norm() < 1e-5);
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = SineConfig {
            outer_steps: 20,
            heldout_tasks: 5,
            ..SineConfig::default()
        };
        let (a, ra) = run_sine(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, rb) = run_sine(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_eq!(ra, rb);
    }
}
