//! The two-phase episodic loop and its outer update.
//!
//! An episode runs N labelled SGD steps on the support set, then I
//! label-free steps on the target inputs driven by the learned critic.
//! Every inner step is recorded on the tape, so the outer loss at the far
//! end differentiates through the whole chain back to the initial
//! parameters, the critic, and the task embedder.
//!
//! Divergence is caught at step boundaries: any inner loss, outer loss, or
//! updated parameter that is non-finite or beyond [`DIVERGE_LIMIT`] in
//! magnitude stops the episode with [`Error::Divergence`] before the bad
//! values can propagate.

use crate::config::{derive_seed, MetaConfig, OuterOpt, SeedStream};
use crate::critic::{assemble_features, critic_forward, init_critic, CriticSpec};
use crate::embed::{embed_task, init_embedder};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{forward, init_params};
use crate::params::{grad, ParameterSet};
use crate::tensor::{grad_tensors, Tape, Tensor};

/// Magnitude bound on losses and parameters; crossing it counts as
/// divergence even before reaching infinity.
pub const DIVERGE_LIMIT: f64 = 1e30;

/// Per-step learning rates for an inner phase.
#[derive(Clone, Copy)]
pub enum InnerRates<'a> {
    /// The same scalar rate at every step.
    Fixed(f64),
    /// One learned scalar per (step, parameter tensor), stored under
    /// `s{step}.{param}`. Updates multiply by the tensor, so outer
    /// gradients flow into the table.
    Learned(&'a ParameterSet),
}

/// Fresh rate table for a phase: entry `s{i}.{name}` for each step i and
/// each tensor in `layout`, all initialized to `init`.
pub fn init_inner_lr(layout: &crate::params::ParamLayout, steps: usize, init: f64) -> ParameterSet {
    let mut table = ParameterSet::new();
    for i in 0..steps {
        for (name, _) in layout.iter() {
            table
                .push(format!("s{i}.{name}"), Tensor::scalar(init))
                .expect("layout names are unique per step");
        }
    }
    table
}

/// One gradient phase: `steps` SGD updates of `theta` against `loss_of`,
/// recording every intermediate parameter set. `step_base` offsets the
/// step index reported on divergence so the two phases number contiguously.
fn descend(
    theta0: &ParameterSet,
    steps: usize,
    rates: InnerRates,
    step_base: usize,
    create_graph: bool,
    loss_label: &str,
    mut loss_of: impl FnMut(&ParameterSet) -> Result<Tensor>,
) -> Result<(ParameterSet, PhaseTrace)> {
    let mut thetas = vec![theta0.clone()];
    let mut losses = Vec::with_capacity(steps);
    let mut cur = theta0.clone();
    for i in 0..steps {
        let step = step_base + i;
        let loss = loss_of(&cur)?;
        let value = loss.item()?;
        if !value.is_finite() || value.abs() > DIVERGE_LIMIT {
            return Err(Error::Divergence {
                step,
                what: format!("{loss_label} = {value}"),
            });
        }
        losses.push(value);
        let grads = grad(&loss, &cur, create_graph)?;
        cur = take_step(&cur, &grads, rates, i)?;
        check_magnitudes(&cur, step)?;
        thetas.push(cur.clone());
    }
    Ok((cur, PhaseTrace { thetas, losses }))
}

fn take_step(
    theta: &ParameterSet,
    grads: &ParameterSet,
    rates: InnerRates,
    step: usize,
) -> Result<ParameterSet> {
    theta.map(|name, t| {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("take_step: missing gradient for `{name}`")))?;
        let update = match rates {
            InnerRates::Fixed(a) => g.mul_scalar(a),
            InnerRates::Learned(table) => {
                let key = format!("s{step}.{name}");
                let lr = table.get(&key).ok_or_else(|| {
                    Error::contract(format!("take_step: rate table has no entry `{key}`"))
                })?;
                g.mul(&lr.scalar_expand(g.shape())?)?
            }
        };
        t.sub(&update)
    })
}

fn check_magnitudes(params: &ParameterSet, step: usize) -> Result<()> {
    for (name, t) in params.iter() {
        for &v in t.data().iter() {
            if !v.is_finite() || v.abs() > DIVERGE_LIMIT {
                return Err(Error::Divergence {
                    step,
                    what: format!("parameter `{name}` reached {v}"),
                });
            }
        }
    }
    Ok(())
}

/// Intermediate parameters and per-step loss values from one inner phase.
/// `thetas` includes the starting point, so it has `losses.len() + 1`
/// entries.
pub struct PhaseTrace {
    pub thetas: Vec<ParameterSet>,
    pub losses: Vec<f64>,
}

/// N support steps: cross-entropy on the labelled support set.
pub fn adapt_support(
    theta0: &ParameterSet,
    x_s: &Tensor,
    y_s: &[usize],
    rates: InnerRates,
    steps: usize,
) -> Result<(ParameterSet, PhaseTrace)> {
    descend(theta0, steps, rates, 0, true, "support loss", |theta| {
        forward(x_s, theta)?.softmax_cross_entropy(y_s)
    })
}

/// Critic inputs that stay fixed across an episode's target phase.
pub struct CriticContext<'a> {
    pub w: &'a ParameterSet,
    pub phi: &'a ParameterSet,
    pub flags: crate::critic::CriticFeatureFlags,
    pub spec: &'a CriticSpec,
}

/// I target steps: descend the critic's scalar output. No target labels
/// are touched. The task embedding, when enabled, is computed once from
/// the raw inputs and reused at every step since it does not depend on
/// the adapting parameters.
pub fn adapt_target(
    theta_n: &ParameterSet,
    x_t: &Tensor,
    x_s: &Tensor,
    ctx: &CriticContext,
    rates: InnerRates,
    steps: usize,
    step_base: usize,
) -> Result<(ParameterSet, PhaseTrace)> {
    let emb = if ctx.flags.use_task_embedding {
        Some(embed_task(x_s, Some(x_t), ctx.phi)?)
    } else {
        None
    };
    descend(
        theta_n,
        steps,
        rates,
        step_base,
        true,
        "critic loss",
        |theta| {
            let logits = forward(x_t, theta)?;
            let f = assemble_features(&logits, theta, emb.as_ref(), &ctx.flags)?;
            critic_forward(&f, ctx.w, ctx.spec)
        },
    )
}

/// Everything recorded while adapting through one episode.
pub struct AdaptTrace {
    /// theta_0 .. theta_{N+I}.
    pub thetas: Vec<ParameterSet>,
    pub support_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
    /// Target logits at theta_N, before any critic step.
    pub logits_pre: Tensor,
    /// Target logits at theta_{N+I}; equals `logits_pre` when I = 0.
    pub logits_post: Tensor,
}

/// Tracked parameter groups threaded through one episode.
pub struct EpisodeModel<'a> {
    pub theta: &'a ParameterSet,
    pub critic: &'a ParameterSet,
    pub embedder: &'a ParameterSet,
    pub lr_support: Option<&'a ParameterSet>,
    pub lr_target: Option<&'a ParameterSet>,
}

impl<'a> EpisodeModel<'a> {
    fn support_rates(&self, cfg: &MetaConfig) -> Result<InnerRates<'a>> {
        rates_for(cfg.learnable_inner_lr, self.lr_support, cfg.support_lr, "support")
    }

    fn target_rates(&self, cfg: &MetaConfig) -> Result<InnerRates<'a>> {
        rates_for(cfg.learnable_inner_lr, self.lr_target, cfg.target_lr, "target")
    }
}

fn rates_for<'a>(
    learnable: bool,
    table: Option<&'a ParameterSet>,
    fixed: f64,
    phase: &str,
) -> Result<InnerRates<'a>> {
    if !learnable {
        return Ok(InnerRates::Fixed(fixed));
    }
    table.map(InnerRates::Learned).ok_or_else(|| {
        Error::contract(format!(
            "learnable_inner_lr is set but the {phase} rate table is missing"
        ))
    })
}

/// Runs both phases. Target labels are not an input: adaptation is
/// entirely label-free past the support set.
pub fn run_adaptation(
    model: &EpisodeModel,
    x_s: &Tensor,
    y_s: &[usize],
    x_t: &Tensor,
    cfg: &MetaConfig,
) -> Result<AdaptTrace> {
    let n = cfg.support_steps;
    let i = cfg.target_steps;
    let (theta_n, sup) = adapt_support(model.theta, x_s, y_s, model.support_rates(cfg)?, n)?;
    let logits_pre = forward(x_t, &theta_n)?;
    let mut thetas = sup.thetas;
    let (critic_losses, logits_post) = if i == 0 {
        (Vec::new(), logits_pre.clone())
    } else {
        let spec = cfg.critic_spec();
        let ctx = CriticContext {
            w: model.critic,
            phi: model.embedder,
            flags: cfg.flags,
            spec: &spec,
        };
        let (theta_end, tgt) = adapt_target(&theta_n, x_t, x_s, &ctx, model.target_rates(cfg)?, i, n)?;
        thetas.extend(tgt.thetas.into_iter().skip(1));
        (tgt.losses, forward(x_t, &theta_end)?)
    };
    Ok(AdaptTrace {
        thetas,
        support_losses: sup.losses,
        critic_losses,
        logits_pre,
        logits_post,
    })
}

/// Cross-entropy and accuracy of `theta` on the labelled target set.
pub fn episode_outer_loss(
    theta: &ParameterSet,
    x_t: &Tensor,
    y_t: &[usize],
) -> Result<(Tensor, f64)> {
    let logits = forward(x_t, theta)?;
    let loss = logits.softmax_cross_entropy(y_t)?;
    Ok((loss, accuracy(&logits, y_t)?))
}

/// Row-wise argmax. Ties break toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = logits.dim2()?;
    if c == 0 {
        return Err(Error::contract("argmax_rows: zero classes"));
    }
    let data = logits.data();
    Ok((0..n)
        .map(|r| {
            let row = &data[r * c..(r + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.dim2()?;
    if n != labels.len() {
        return Err(Error::contract(format!(
            "accuracy: {n} logit rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::contract("accuracy: empty target set"));
    }
    let picks = argmax_rows(logits)?;
    let hits = picks.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / n as f64)
}

/// One episode end to end: adaptation plus the labelled outer loss.
pub struct EpisodeRun {
    pub trace: AdaptTrace,
    pub outer_loss: Tensor,
    pub outer_value: f64,
    pub acc_pre: f64,
    pub acc_post: f64,
}

pub fn run_episode(model: &EpisodeModel, ep: &Episode, cfg: &MetaConfig) -> Result<EpisodeRun> {
    let trace = run_adaptation(
        model,
        ep.support_inputs(),
        ep.support_labels(),
        ep.target_inputs(),
        cfg,
    )?;
    let y_t = ep.target_labels();
    let outer_loss = trace.logits_post.softmax_cross_entropy(y_t)?;
    let outer_value = outer_loss.item()?;
    if !outer_value.is_finite() || outer_value.abs() > DIVERGE_LIMIT {
        return Err(Error::Divergence {
            step: cfg.support_steps + cfg.target_steps,
            what: format!("outer loss = {outer_value}"),
        });
    }
    let acc_pre = accuracy(&trace.logits_pre, y_t)?;
    let acc_post = accuracy(&trace.logits_post, y_t)?;
    Ok(EpisodeRun {
        trace,
        outer_loss,
        outer_value,
        acc_pre,
        acc_post,
    })
}

/// Outer-optimizer state for one parameter group.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
enum OptState {
    Sgd,
    Adam { t: u64, groups: Vec<Moments> },
}

/// Master copies of every trainable group plus outer-optimizer state.
pub struct MetaState {
    pub theta: ParameterSet,
    pub critic: ParameterSet,
    pub embedder: ParameterSet,
    pub lr_support: Option<ParameterSet>,
    pub lr_target: Option<ParameterSet>,
    pub input_dim: usize,
    opt: OptState,
}

/// Width of the critic's per-row feature vector under `cfg.flags`.
pub fn feature_dim(cfg: &MetaConfig, input_dim: usize) -> Result<usize> {
    let mut d = 0;
    if cfg.flags.use_predictions {
        d += cfg.n_way;
    }
    if cfg.flags.use_params {
        d += cfg.model_spec(input_dim)?.param_count();
    }
    if cfg.flags.use_task_embedding {
        d += cfg.embed_dim;
    }
    Ok(d)
}

impl MetaState {
    /// Fresh state with all groups drawn from streams of `cfg.seed`.
    pub fn init(cfg: &MetaConfig, input_dim: usize) -> Result<MetaState> {
        cfg.validate()?;
        let model_spec = cfg.model_spec(input_dim)?;
        let theta = init_params(&model_spec, derive_seed(cfg.seed, SeedStream::ThetaInit, 0))?;
        let critic = init_critic(
            feature_dim(cfg, input_dim)?,
            &cfg.critic_spec(),
            derive_seed(cfg.seed, SeedStream::CriticInit, 0),
        )?;
        let embedder = init_embedder(
            &cfg.embedder_spec(input_dim)?,
            derive_seed(cfg.seed, SeedStream::EmbedInit, 0),
        )?;
        let (lr_support, lr_target) = if cfg.learnable_inner_lr {
            let layout = theta.layout();
            (
                Some(init_inner_lr(&layout, cfg.support_steps, cfg.support_lr)),
                Some(init_inner_lr(&layout, cfg.target_steps, cfg.target_lr)),
            )
        } else {
            (None, None)
        };
        Ok(MetaState {
            theta,
            critic,
            embedder,
            lr_support,
            lr_target,
            input_dim,
            opt: match cfg.outer_opt {
                OuterOpt::Sgd => OptState::Sgd,
                OuterOpt::Adam => OptState::Adam {
                    t: 0,
                    groups: Vec::new(),
                },
            },
        })
    }

    /// Rebuilds state around externally supplied groups (checkpoint load).
    /// Optimizer moments restart at zero.
    pub fn from_groups(
        cfg: &MetaConfig,
        input_dim: usize,
        theta: ParameterSet,
        critic: ParameterSet,
        embedder: ParameterSet,
        lr_support: Option<ParameterSet>,
        lr_target: Option<ParameterSet>,
    ) -> MetaState {
        MetaState {
            theta,
            critic,
            embedder,
            lr_support,
            lr_target,
            input_dim,
            opt: match cfg.outer_opt {
                OuterOpt::Sgd => OptState::Sgd,
                OuterOpt::Adam => OptState::Adam {
                    t: 0,
                    groups: Vec::new(),
                },
            },
        }
    }

    fn groups(&self) -> Vec<&ParameterSet> {
        let mut g = vec![&self.theta, &self.critic, &self.embedder];
        g.extend(self.lr_support.iter());
        g.extend(self.lr_target.iter());
        g
    }

    fn set_groups(&mut self, updated: Vec<ParameterSet>) {
        let mut it = updated.into_iter();
        self.theta = it.next().expect("theta group");
        self.critic = it.next().expect("critic group");
        self.embedder = it.next().expect("embedder group");
        if self.lr_support.is_some() {
            self.lr_support = it.next();
        }
        if self.lr_target.is_some() {
            self.lr_target = it.next();
        }
    }
}

/// Batch-level numbers from one outer step, averaged over episodes.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub outer_loss: f64,
    pub acc_pre: f64,
    pub acc_post: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One outer update across a batch of episodes.
///
/// Each episode gets a fresh tape; gradients of every group are summed in
/// episode-index order (the batch objective is the sum, so the effective
/// step scales with batch size) and applied by the configured optimizer.
/// A divergence inside episode b is reported with that index attached, and
/// the state is left untouched.
pub fn meta_step(
    state: &mut MetaState,
    episodes: &[Episode],
    cfg: &MetaConfig,
) -> Result<StepMetrics> {
    if episodes.is_empty() {
        return Err(Error::contract("meta_step: empty episode batch"));
    }
    // Cheap clones: tensors share their storage. Keeps `state.opt` free to
    // borrow mutably during the update.
    let masters: Vec<ParameterSet> = state.groups().into_iter().cloned().collect();
    let layouts: Vec<_> = masters.iter().map(|p| p.layout()).collect();
    let mut grad_sums: Vec<Vec<f64>> = layouts.iter().map(|l| vec![0.0; l.total()]).collect();
    let mut loss_sum = 0.0;
    let mut pre_sum = 0.0;
    let mut post_sum = 0.0;

    for (b, ep) in episodes.iter().enumerate() {
        let tape = Tape::new();
        let tracked: Vec<ParameterSet> = masters.iter().map(|p| p.tracked(&tape)).collect();
        let model = EpisodeModel {
            theta: &tracked[0],
            critic: &tracked[1],
            embedder: &tracked[2],
            lr_support: state.lr_support.is_some().then(|| &tracked[3]),
            lr_target: state
                .lr_target
                .is_some()
                .then(|| &tracked[3 + state.lr_support.is_some() as usize]),
        };
        let run = run_episode(&model, ep, cfg).map_err(|e| match e {
            Error::Divergence { step, what } => Error::Divergence {
                step,
                what: format!("episode {b}: {what}"),
            },
            other => other,
        })?;

        let wrt: Vec<&Tensor> = tracked.iter().flat_map(|g| g.iter().map(|(_, t)| t)).collect();
        let grads = grad_tensors(&run.outer_loss, &wrt, false)?;
        let mut gi = 0;
        for (group, sums) in tracked.iter().zip(grad_sums.iter_mut()) {
            let mut at = 0;
            for (_, t) in group.iter() {
                let g = &grads[gi];
                gi += 1;
                for (slot, &v) in sums[at..at + t.len()].iter_mut().zip(g.data().iter()) {
                    *slot += v;
                }
                at += t.len();
            }
        }
        loss_sum += run.outer_value;
        pre_sum += run.acc_pre;
        post_sum += run.acc_post;
    }

    for sums in &grad_sums {
        for &v in sums {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: cfg.support_steps + cfg.target_steps,
                    what: "non-finite outer gradient".into(),
                });
            }
        }
    }

    let lr = cfg.outer_lr;
    let updated: Vec<ParameterSet> = match &mut state.opt {
        OptState::Sgd => masters
            .iter()
            .zip(&grad_sums)
            .zip(&layouts)
            .map(|((p, g), l)| {
                let mut data = p.flat_data();
                for (x, gv) in data.iter_mut().zip(g) {
                    *x -= lr * gv;
                }
                ParameterSet::from_flat_data(l, &data)
            })
            .collect::<Result<_>>()?,
        OptState::Adam { t, groups } => {
            if groups.is_empty() {
                *groups = layouts
                    .iter()
                    .map(|l| Moments {
                        m: vec![0.0; l.total()],
                        v: vec![0.0; l.total()],
                    })
                    .collect();
            }
            *t += 1;
            let tt = *t as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(tt);
            let bc2 = 1.0 - ADAM_BETA2.powi(tt);
            masters
                .iter()
                .zip(&grad_sums)
                .zip(groups.iter_mut())
                .zip(&layouts)
                .map(|(((p, g), mo), l)| {
                    let mut data = p.flat_data();
                    for j in 0..data.len() {
                        mo.m[j] = ADAM_BETA1 * mo.m[j] + (1.0 - ADAM_BETA1) * g[j];
                        mo.v[j] = ADAM_BETA2 * mo.v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mhat = mo.m[j] / bc1;
                        let vhat = mo.v[j] / bc2;
                        data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                    ParameterSet::from_flat_data(l, &data)
                })
                .collect::<Result<_>>()?
        }
    };
    state.set_groups(updated);

    let e = episodes.len() as f64;
    Ok(StepMetrics {
        outer_loss: loss_sum / e,
        acc_pre: pre_sum / e,
        acc_post: post_sum / e,
    })
}

/// Detached target logits and class picks, before and after the target
/// phase. Adaptation never sees the target labels.
pub struct Prediction {
    pub logits_pre: Tensor,
    pub logits_post: Tensor,
    pub classes_pre: Vec<usize>,
    pub classes_post: Vec<usize>,
}

pub fn predict(state: &MetaState, ep: &Episode, cfg: &MetaConfig) -> Result<Prediction> {
    let tape = Tape::new();
    let theta = state.theta.tracked(&tape);
    let critic = state.critic.tracked(&tape);
    let embedder = state.embedder.tracked(&tape);
    let lr_s = state.lr_support.as_ref().map(|p| p.tracked(&tape));
    let lr_t = state.lr_target.as_ref().map(|p| p.tracked(&tape));
    let model = EpisodeModel {
        theta: &theta,
        critic: &critic,
        embedder: &embedder,
        lr_support: lr_s.as_ref(),
        lr_target: lr_t.as_ref(),
    };
    let trace = run_adaptation(
        &model,
        ep.support_inputs(),
        ep.support_labels(),
        ep.target_inputs(),
        cfg,
    )?;
    prediction_from(&trace.logits_pre, &trace.logits_post)
}

/// Critic-free reference path: support adaptation only at the fixed
/// support rate; no critic or embedder code reachable. With
/// `target_steps = 0` and fixed rates configured, [`predict`] matches this
/// bitwise.
pub fn predict_support_only(
    theta: &ParameterSet,
    ep: &Episode,
    cfg: &MetaConfig,
) -> Result<Prediction> {
    let tape = Tape::new();
    let theta = theta.tracked(&tape);
    let rates = InnerRates::Fixed(cfg.support_lr);
    let (theta_n, _) = adapt_support(
        &theta,
        ep.support_inputs(),
        ep.support_labels(),
        rates,
        cfg.support_steps,
    )?;
    let logits = forward(ep.target_inputs(), &theta_n)?;
    prediction_from(&logits, &logits)
}

fn prediction_from(pre: &Tensor, post: &Tensor) -> Result<Prediction> {
    Ok(Prediction {
        logits_pre: pre.detached(),
        logits_post: post.detached(),
        classes_pre: argmax_rows(pre)?,
        classes_post: argmax_rows(post)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FamilyConfig;
    use crate::episodes::{gen_blob_pool, sample_episode};

    fn tiny_cfg() -> MetaConfig {
        let mut cfg = MetaConfig::defaults(FamilyConfig::Blob {
            dim: 4,
            separation: 5.0,
        });
        cfg.train_classes = 6;
        cfg.val_classes = 6;
        cfg.test_classes = 6;
        cfg.n_way = 3;
        cfg.k_shot = 1;
        cfg.n_target = 6;
        cfg.hidden = vec![6];
        cfg.embed_dim = 4;
        cfg.relation_hidden = 5;
        cfg.critic_channels = 2;
        cfg.critic_fc_width = 6;
        cfg.support_steps = 2;
        cfg.target_steps = 1;
        cfg.support_lr = 0.05;
        cfg.target_lr = 0.05;
        cfg.outer_lr = 0.01;
        cfg.meta_batch = 2;
        cfg.outer_opt = OuterOpt::Sgd;
        cfg.validate().unwrap();
        cfg
    }

    fn episode(cfg: &MetaConfig, seed: u64) -> Episode {
        let pool = gen_blob_pool(cfg.train_classes, 4, 5.0, 11).unwrap();
        sample_episode(&pool, cfg.n_way, cfg.k_shot, cfg.n_target, seed).unwrap()
    }

    fn scalar_param(tape: &Tape, v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("x", Tensor::scalar(v)).unwrap();
        p.tracked(tape)
    }

    fn quadratic(center: f64) -> impl FnMut(&ParameterSet) -> Result<Tensor> {
        move |p: &ParameterSet| {
            let d = p.get("x").unwrap().sub(&Tensor::scalar(center))?;
            d.mul(&d)
        }
    }

    #[test]
    fn zero_steps_return_the_start_bitwise() {
        let tape = Tape::new();
        let theta = scalar_param(&tape, 0.7);
        let (end, trace) =
            descend(&theta, 0, InnerRates::Fixed(0.1), 0, false, "loss", quadratic(0.0)).unwrap();
        assert!(end.bitwise_eq(&theta));
        assert_eq!(trace.thetas.len(), 1);
        assert!(trace.losses.is_empty());
    }

    #[test]
    fn one_quadratic_step_lands_exactly() {
        let tape = Tape::new();
        let theta = scalar_param(&tape, 0.0);
        let (end, _) =
            descend(&theta, 1, InnerRates::Fixed(0.1), 0, false, "loss", quadratic(1.0)).unwrap();
        // grad at 0 is -2, so one step of 0.1 lands on 0.2 exactly
        assert_eq!(end.get("x").unwrap().item().unwrap().to_bits(), 0.2f64.to_bits());
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let tape = Tape::new();
        let theta = scalar_param(&tape, 3.0);
        let (_, trace) =
            descend(&theta, 6, InnerRates::Fixed(0.2), 0, false, "loss", quadratic(1.0)).unwrap();
        for w in trace.losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", trace.losses);
        }
    }

    #[test]
    fn hypergradient_through_one_step_matches_the_chain_rule() {
        let tape = Tape::new();
        let theta0 = scalar_param(&tape, 0.0);
        let (theta1, _) =
            descend(&theta0, 1, InnerRates::Fixed(0.1), 0, true, "loss", quadratic(1.0)).unwrap();
        let x1 = theta1.get("x").unwrap();
        assert!((x1.item().unwrap() - 0.2).abs() < 1e-15);
        let d = x1.sub(&Tensor::scalar(0.5)).unwrap();
        let outer = d.mul(&d).unwrap();
        let hyper = grad(&outer, &theta0, false).unwrap();
        // d/dtheta0 of (theta1 - 0.5)^2 with theta1 = theta0 - 0.1 * 2(theta0 - 1):
        // 2 (0.2 - 0.5) (1 - 0.2) = -0.48
        assert!((hyper.get("x").unwrap().item().unwrap() + 0.48).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln_n_way() {
        let mut p = ParameterSet::new();
        p.push("layer0.w", Tensor::zeros(&[2, 5])).unwrap();
        p.push("layer0.b", Tensor::zeros(&[1, 5])).unwrap();
        let x = Tensor::from_vec(&[10, 2], vec![0.3; 20]).unwrap();
        let y: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let (loss, _) = episode_outer_loss(&p, &x, &y).unwrap();
        assert!((loss.item().unwrap() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn outer_loss_hand_case() {
        let logits = Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        let loss = logits.softmax_cross_entropy(&[0, 1]).unwrap().item().unwrap();
        let expected = ((1.0 + (-1.0f64).exp()).ln() + (1.0 + (-3.0f64).exp()).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn argmax_ties_break_toward_the_lowest_class() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1]);
    }

    #[test]
    fn adaptation_trace_has_one_theta_per_step() {
        let cfg = tiny_cfg();
        let ep = episode(&cfg, 0);
        let state = MetaState::init(&cfg, 4).unwrap();
        let tape = Tape::new();
        let theta = state.theta.tracked(&tape);
        let critic = state.critic.tracked(&tape);
        let embedder = state.embedder.tracked(&tape);
        let model = EpisodeModel {
            theta: &theta,
            critic: &critic,
            embedder: &embedder,
            lr_support: None,
            lr_target: None,
        };
        let trace = run_adaptation(
            &model,
            ep.support_inputs(),
            ep.support_labels(),
            ep.target_inputs(),
            &cfg,
        )
        .unwrap();
        assert_eq!(trace.thetas.len(), cfg.support_steps + cfg.target_steps + 1);
        assert_eq!(trace.support_losses.len(), cfg.support_steps);
        assert_eq!(trace.critic_losses.len(), cfg.target_steps);
    }

    #[test]
    fn without_target_steps_the_critic_stays_out_of_the_graph() {
        let mut cfg = tiny_cfg();
        cfg.target_steps = 0;
        let mut state = MetaState::init(&cfg, 4).unwrap();
        let theta_before = state.theta.clone();
        let critic_before = state.critic.clone();
        let embedder_before = state.embedder.clone();
        meta_step(&mut state, &[episode(&cfg, 1)], &cfg).unwrap();
        assert!(!state.theta.bitwise_eq(&theta_before));
        assert!(state.critic.bitwise_eq(&critic_before));
        assert!(state.embedder.bitwise_eq(&embedder_before));
    }

    #[test]
    fn batch_objective_is_the_sum_over_episodes() {
        let cfg = tiny_cfg();
        let mut doubled = cfg.clone();
        doubled.outer_lr = 2.0 * cfg.outer_lr;
        let ep = episode(&cfg, 2);
        let mut a = MetaState::init(&cfg, 4).unwrap();
        let mut b = MetaState::init(&doubled, 4).unwrap();
        meta_step(&mut a, &[ep.clone(), ep.clone()], &cfg).unwrap();
        meta_step(&mut b, &[ep], &doubled).unwrap();
        assert!(a.theta.bitwise_eq(&b.theta));
        assert!(a.critic.bitwise_eq(&b.critic));
        assert!(a.embedder.bitwise_eq(&b.embedder));
    }

    #[test]
    fn single_episode_metrics_match_a_direct_run() {
        let cfg = tiny_cfg();
        let ep = episode(&cfg, 3);
        let mut state = MetaState::init(&cfg, 4).unwrap();

        let tape = Tape::new();
        let theta = state.theta.tracked(&tape);
        let critic = state.critic.tracked(&tape);
        let embedder = state.embedder.tracked(&tape);
        let model = EpisodeModel {
            theta: &theta,
            critic: &critic,
            embedder: &embedder,
            lr_support: None,
            lr_target: None,
        };
        let run = run_episode(&model, &ep, &cfg).unwrap();

        let metrics = meta_step(&mut state, &[ep], &cfg).unwrap();
        assert_eq!(metrics.outer_loss.to_bits(), run.outer_value.to_bits());
        assert_eq!(metrics.acc_pre, run.acc_pre);
        assert_eq!(metrics.acc_post, run.acc_post);
    }

    #[test]
    fn maml_reduction_predicts_bitwise_identically() {
        let mut cfg = tiny_cfg();
        cfg.target_steps = 0;
        let state = MetaState::init(&cfg, 4).unwrap();
        for seed in 0..5 {
            let ep = episode(&cfg, seed);
            let full = predict(&state, &ep, &cfg).unwrap();
            let bare = predict_support_only(&state.theta, &ep, &cfg).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&full.logits_post), bits(&bare.logits_post));
            assert_eq!(full.classes_post, bare.classes_post);
            assert_eq!(bits(&full.logits_pre), bits(&full.logits_post));
        }
    }

    #[test]
    fn target_labels_cannot_influence_adaptation() {
        let mut cfg = tiny_cfg();
        cfg.flags = crate::critic::CriticFeatureFlags {
            use_predictions: true,
            use_params: true,
            use_task_embedding: true,
        };
        cfg.target_steps = 2;
        let state = MetaState::init(&cfg, 4).unwrap();
        let ep = episode(&cfg, 4);
        let mut shuffled: Vec<usize> = ep.target_labels().to_vec();
        shuffled.rotate_left(1);
        let ep2 = Episode::from_parts(
            ep.support_inputs().clone(),
            ep.support_labels().to_vec(),
            ep.target_inputs().clone(),
            shuffled,
            ep.class_ids().to_vec(),
            ep.split(),
        )
        .unwrap();

        let adapted_theta = |e: &Episode| {
            let tape = Tape::new();
            let theta = state.theta.tracked(&tape);
            let critic = state.critic.tracked(&tape);
            let embedder = state.embedder.tracked(&tape);
            let model = EpisodeModel {
                theta: &theta,
                critic: &critic,
                embedder: &embedder,
                lr_support: None,
                lr_target: None,
            };
            let trace = run_adaptation(
                &model,
                e.support_inputs(),
                e.support_labels(),
                e.target_inputs(),
                &cfg,
            )
            .unwrap();
            (trace.thetas.last().unwrap().detached(), trace.logits_post.detached())
        };
        let (ta, la) = adapted_theta(&ep);
        let (tb, lb) = adapted_theta(&ep2);
        assert!(ta.bitwise_eq(&tb));
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb));
    }

    #[test]
    fn divergence_reports_the_episode_and_leaves_state_untouched() {
        let mut cfg = tiny_cfg();
        cfg.support_lr = 1e305;
        let mut state = MetaState::init(&cfg, 4).unwrap();
        let theta_before = state.theta.clone();
        let err = meta_step(&mut state, &[episode(&cfg, 5)], &cfg).unwrap_err();
        match &err {
            Error::Divergence { what, .. } => assert!(what.contains("episode 0"), "{what}"),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(state.theta.bitwise_eq(&theta_before));
    }

    #[test]
    fn first_adam_step_is_rate_bounded() {
        let mut cfg = tiny_cfg();
        cfg.outer_opt = OuterOpt::Adam;
        let mut state = MetaState::init(&cfg, 4).unwrap();
        let before = state.theta.flat_data();
        meta_step(&mut state, &[episode(&cfg, 6)], &cfg).unwrap();
        let after = state.theta.flat_data();
        let deltas: Vec<f64> = before.iter().zip(&after).map(|(a, b)| (b - a).abs()).collect();
        let max = deltas.iter().cloned().fold(0.0, f64::max);
        assert!(max <= cfg.outer_lr * 1.0000001, "max delta {max}");
        assert!(max > 0.5 * cfg.outer_lr, "max delta {max}");
    }

    #[test]
    fn empty_batches_are_rejected() {
        let cfg = tiny_cfg();
        let mut state = MetaState::init(&cfg, 4).unwrap();
        assert!(meta_step(&mut state, &[], &cfg).is_err());
    }

    #[test]
    fn learnable_rates_receive_outer_updates() {
        let mut cfg = tiny_cfg();
        cfg.learnable_inner_lr = true;
        let mut state = MetaState::init(&cfg, 4).unwrap();
        let lr_s_before = state.lr_support.clone().unwrap();
        let lr_t_before = state.lr_target.clone().unwrap();
        assert_eq!(
            lr_s_before.get("s0.layer0.w").unwrap().item().unwrap(),
            cfg.support_lr
        );
        meta_step(&mut state, &[episode(&cfg, 7)], &cfg).unwrap();
        assert!(!state.lr_support.as_ref().unwrap().bitwise_eq(&lr_s_before));
        assert!(!state.lr_target.as_ref().unwrap().bitwise_eq(&lr_t_before));
    }

    #[test]
    fn missing_rate_table_is_a_contract_error() {
        let mut cfg = tiny_cfg();
        cfg.learnable_inner_lr = true;
        let state = MetaState::init(&cfg, 4).unwrap();
        let tape = Tape::new();
        let theta = state.theta.tracked(&tape);
        let critic = state.critic.tracked(&tape);
        let embedder = state.embedder.tracked(&tape);
        let model = EpisodeModel {
            theta: &theta,
            critic: &critic,
            embedder: &embedder,
            lr_support: None,
            lr_target: None,
        };
        let ep = episode(&cfg, 8);
        assert!(run_episode(&model, &ep, &cfg).is_err());
    }

    #[test]
    fn feature_dim_counts_active_blocks() {
        let mut cfg = tiny_cfg();
        assert_eq!(feature_dim(&cfg, 4).unwrap(), 3);
        cfg.flags.use_params = true;
        assert_eq!(feature_dim(&cfg, 4).unwrap(), 3 + 51);
        cfg.flags.use_task_embedding = true;
        assert_eq!(feature_dim(&cfg, 4).unwrap(), 3 + 51 + 4);
    }

    #[test]
    fn meta_training_is_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut state = MetaState::init(&cfg, 4).unwrap();
            for s in 0..3 {
                let eps: Vec<Episode> = (0..cfg.meta_batch)
                    .map(|b| episode(&cfg, derive_seed(cfg.seed, SeedStream::TrainEpisode, (s * cfg.meta_batch + b) as u64)))
                    .collect();
                meta_step(&mut state, &eps, &cfg).unwrap();
            }
            state
        };
        let a = run();
        let b = run();
        assert!(a.theta.bitwise_eq(&b.theta));
        assert!(a.critic.bitwise_eq(&b.critic));
        assert!(a.embedder.bitwise_eq(&b.embedder));
    }
}
