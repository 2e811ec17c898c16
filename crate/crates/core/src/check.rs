//! Gradient verification suites shared by the CLI's grad-check command and
//! the test suite.
//!
//! Each check builds a scalar loss two ways: reverse-mode gradients from
//! the tape, and a central-finite-difference oracle that re-evaluates the
//! loss under perturbed parameters. The reported number is
//! ‖ad − fd‖₂ / max(‖fd‖₂, 1e-12) over all checked parameters.
//!
//! The episode-level checks differentiate the outer loss through full
//! N-support + 1-target inner loops, so they exercise gradients of
//! gradients: the finite difference re-runs the whole adaptation, while
//! reverse mode must propagate through the taped inner updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FamilyConfig, MetaConfig};
use crate::critic::CriticFeatureFlags;
use crate::episodes::{gen_blob_pool, sample_episode, Episode, Split};
use crate::error::{Error, Result};
use crate::meta::{run_episode, EpisodeModel, MetaState};
use crate::model::forward;
use crate::params::{finite_diff_oracle, grad, ParameterSet};
use crate::tensor::{Tape, Tensor};

const PRIMITIVE_EPS: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;
const EPISODE_EPS: f64 = 1e-6;
const EPISODE_TOL: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    debug_assert_eq!(ad.len(), fd.len());
    let diff: f64 = ad
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Compares tape gradients against the finite-difference oracle for a loss
/// defined by `build`, which must work on tracked and untracked parameters
/// alike.
fn fd_vs_ad(
    name: &str,
    params: &ParameterSet,
    eps: f64,
    tol: f64,
    build: impl Fn(&ParameterSet) -> Result<Tensor>,
) -> Result<CheckReport> {
    let tape = Tape::new();
    let tracked = params.tracked(&tape);
    let loss = build(&tracked)?;
    let ad = grad(&loss, &tracked, false)?;
    let fd = finite_diff_oracle(|p| build(p)?.item(), params, eps)?;
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: rel_err(&ad.flat_data(), &fd.flat_data()),
        tolerance: tol,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Values bounded away from zero on both sides, for relu and division.
fn rand_signed(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64, max_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.random_range(min_abs..max_abs);
            if rng.random::<f64>() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

fn pair(a: Tensor, b: Tensor) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.push("a", a).unwrap();
    p.push("b", b).unwrap();
    p
}

fn single(a: Tensor) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.push("a", a).unwrap();
    p
}

fn sq_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.mul(t)?.sum())
}

fn get<'p>(p: &'p ParameterSet, name: &str) -> Result<&'p Tensor> {
    p.get(name)
        .ok_or_else(|| Error::contract(format!("check: missing parameter `{name}`")))
}

/// First-order checks of every differentiable primitive, plus a
/// closed-form second-derivative check.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    let ab = pair(rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("add", &ab, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.add(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("sub", &ab, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.sub(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("mul", &ab, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.mul(get(p, "b")?)?)
    })?);

    let div = pair(
        rand_tensor(r, &[3, 4], -1.0, 1.0),
        rand_signed(r, &[3, 4], 0.7, 1.7),
    );
    out.push(fd_vs_ad("div", &div, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.div(get(p, "b")?)?)
    })?);

    let a = single(rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("mul_scalar", &a, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.mul_scalar(1.7))
    })?);

    let off = single(rand_signed(r, &[3, 4], 0.3, 1.3));
    out.push(fd_vs_ad("relu", &off, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.relu())
    })?);

    let e = single(rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("exp", &e, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.exp())
    })?);

    let l = single(rand_tensor(r, &[3, 4], 0.5, 2.0));
    out.push(fd_vs_ad("log", &l, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.log())
    })?);

    let mm = pair(rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0));
    out.push(fd_vs_ad("matmul", &mm, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.matmul(get(p, "b")?)?)
    })?);

    let pm = single(rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("permute", &pm, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        let a = get(p, "a")?;
        sq_sum(&a.permute(&[1, 0])?.matmul(a)?)
    })?);

    let rs = pair(rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[6, 2], -1.0, 1.0));
    out.push(fd_vs_ad("reshape", &rs, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.reshape(&[2, 6])?.matmul(get(p, "b")?)?)
    })?);

    let sl = single(rand_tensor(r, &[4, 5], -1.0, 1.0));
    out.push(fd_vs_ad("slice", &sl, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.slice(1, 1, 3)?)
    })?);
    out.push(fd_vs_ad("embed", &sl, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        let padded = get(p, "a")?.embed(0, 2, 7)?;
        sq_sum(&padded.slice(0, 1, 4)?)
    })?);

    out.push(fd_vs_ad("sum", &sl, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        let s = get(p, "a")?.sum();
        s.mul(&s)
    })?);
    out.push(fd_vs_ad("mean", &sl, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        let s = get(p, "a")?.mean()?;
        s.mul(&s)
    })?);

    let se = pair(rand_tensor(r, &[1, 1], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0));
    out.push(fd_vs_ad("scalar_expand", &se, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.scalar_expand(&[2, 3])?.mul(get(p, "b")?)?)
    })?);

    let br = pair(rand_tensor(r, &[1, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("broadcast_row", &br, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.broadcast_row(3)?.mul(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("sum_rows", &br, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "b")?.sum_rows()?)
    })?);

    let bc = pair(rand_tensor(r, &[3, 1], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0));
    out.push(fd_vs_ad("broadcast_col", &bc, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.broadcast_col(4)?.mul(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("sum_cols", &bc, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "b")?.sum_cols()?)
    })?);

    let rp = pair(rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[6, 2], -1.0, 1.0));
    out.push(fd_vs_ad("repeat_rows", &rp, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.repeat_rows(2)?.mul(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("tile_rows", &rp, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.tile_rows(2)?.mul(get(p, "b")?)?)
    })?);
    out.push(fd_vs_ad("group_sum_rows", &rp, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "b")?.group_sum_rows(2)?)
    })?);
    out.push(fd_vs_ad("fold_rows", &rp, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "b")?.fold_rows(2)?)
    })?);

    let gl = single(rand_tensor(r, &[4, 3], -1.0, 1.0));
    out.push(fd_vs_ad("gather_label", &gl, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.gather_label(&[2, 0, 1, 1])?)
    })?);

    let sm = single(rand_tensor(r, &[4, 3], -1.0, 1.0));
    out.push(fd_vs_ad("softmax", &sm, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.softmax()?)
    })?);
    out.push(fd_vs_ad("softmax_cross_entropy", &sm, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        get(p, "a")?.softmax_cross_entropy(&[2, 0, 1, 1])
    })?);

    let conv = pair(
        rand_tensor(r, &[2, 2, 9], -1.0, 1.0),
        rand_tensor(r, &[3, 2, 2], -1.0, 1.0),
    );
    out.push(fd_vs_ad("conv1d_dilated", &conv, PRIMITIVE_EPS, PRIMITIVE_TOL, |p| {
        sq_sum(&get(p, "a")?.conv1d_dilated(get(p, "b")?, 2)?)
    })?);

    let net = crate::model::ModelSpec::new(4, vec![6], 3)?;
    let theta = crate::model::init_params(&net, seed ^ 0x5eed)?;
    let x = rand_tensor(r, &[5, 4], -1.0, 1.0);
    let labels = [0usize, 2, 1, 0, 2];
    out.push(fd_vs_ad(
        "mlp cross entropy",
        &theta,
        PRIMITIVE_EPS,
        PRIMITIVE_TOL,
        |p| forward(&x, p)?.softmax_cross_entropy(&labels),
    )?);

    out.push(second_derivative_check()?);
    Ok(out)
}

/// d²(x³)/dx² at x = 2 is exactly 12: differentiates the tape's own
/// backward pass.
pub fn second_derivative_check() -> Result<CheckReport> {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(2.0));
    let y = x.mul(&x)?.mul(&x)?;
    let mut p = ParameterSet::new();
    p.push("x", x)?;
    let g = grad(&y, &p, true)?;
    let gx = g.get("x").expect("gradient for x");
    let g2 = grad(gx, &p, false)?;
    let got = g2.get("x").expect("second gradient for x").item()?;
    Ok(CheckReport {
        name: "second derivative of x^3".to_string(),
        max_rel_err: (got - 12.0).abs() / 12.0,
        tolerance: 1e-12,
    })
}

/// Small episode instances for hypergradient checking. Parameter counts
/// stay well under the acceptance caps (base ≤ 300, critic ≤ 500).
fn instance_config(i: usize, seed: u64) -> MetaConfig {
    let flag_cycle = [
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (false, true, false),
        (false, false, true),
        (true, true, true),
    ];
    let (use_predictions, use_params, use_task_embedding) = flag_cycle[i % flag_cycle.len()];
    let dim = 3 + i % 3;
    let mut cfg = MetaConfig::defaults(FamilyConfig::Blob {
        dim,
        separation: 2.0,
    });
    cfg.seed = crate::config::derive_seed(seed, crate::config::SeedStream::ThetaInit, i as u64);
    cfg.n_way = 3;
    cfg.k_shot = 1 + i % 2;
    cfg.n_target = 3 + i % 3;
    cfg.hidden = if i.is_multiple_of(2) { vec![6] } else { vec![5, 4] };
    cfg.embed_dim = 3;
    cfg.relation_hidden = 4;
    cfg.critic_channels = 2;
    cfg.critic_fc_width = 6;
    cfg.critic_min_len = 32;
    cfg.support_steps = (i % 3).min(2);
    cfg.target_steps = 1;
    cfg.support_lr = 0.05;
    cfg.target_lr = 0.05;
    cfg.learnable_inner_lr = i % 8 == 7;
    cfg.train_classes = 4;
    cfg.val_classes = 3;
    cfg.test_classes = 3;
    cfg.flags = CriticFeatureFlags {
        use_predictions,
        use_params,
        use_task_embedding,
    };
    cfg
}

fn group_prefixes(state: &MetaState) -> Vec<(&'static str, ParameterSet)> {
    let mut groups = vec![
        ("theta", state.theta.clone()),
        ("critic", state.critic.clone()),
        ("embedder", state.embedder.clone()),
    ];
    if let Some(t) = &state.lr_support {
        groups.push(("lr_support", t.clone()));
    }
    if let Some(t) = &state.lr_target {
        groups.push(("lr_target", t.clone()));
    }
    groups
}

fn combine(groups: &[(&'static str, ParameterSet)]) -> ParameterSet {
    let mut all = ParameterSet::new();
    for (prefix, set) in groups {
        for (name, t) in set.iter() {
            all.push(format!("{prefix}.{name}"), t.clone())
                .expect("prefixed names stay unique");
        }
    }
    all
}

fn split_group(all: &ParameterSet, prefix: &str) -> ParameterSet {
    let mut out = ParameterSet::new();
    let dotted = format!("{prefix}.");
    for (name, t) in all.iter() {
        if let Some(rest) = name.strip_prefix(&dotted) {
            out.push(rest, t.clone()).expect("names stay unique");
        }
    }
    out
}

/// Nudges every parameter by a small seeded offset. Freshly initialized
/// biases are exactly zero, and with the parameter feature enabled those
/// zeros reach the critic's convolutions verbatim, parking pre-activations
/// exactly on relu corners where the adaptation map is not differentiable.
/// Checking at a generic nearby point keeps the comparison meaningful.
fn jitter(set: &ParameterSet, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    set.map(|_, t| {
        let noise: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-0.02..0.02)).collect();
        t.add(&Tensor::from_vec(t.shape(), noise)?)
    })
    .expect("jitter preserves shapes")
}

/// Outer loss of one full episode as a function of every trainable group.
fn episode_loss(all: &ParameterSet, ep: &Episode, cfg: &MetaConfig) -> Result<Tensor> {
    let theta = split_group(all, "theta");
    let critic = split_group(all, "critic");
    let embedder = split_group(all, "embedder");
    let lr_support = cfg.learnable_inner_lr.then(|| split_group(all, "lr_support"));
    let lr_target = cfg.learnable_inner_lr.then(|| split_group(all, "lr_target"));
    let model = EpisodeModel {
        theta: &theta,
        critic: &critic,
        embedder: &embedder,
        lr_support: lr_support.as_ref(),
        lr_target: lr_target.as_ref(),
    };
    Ok(run_episode(&model, ep, cfg)?.outer_loss)
}

/// Hypergradient checks: for `instances` random episode setups, gradients
/// of the outer loss w.r.t. initial parameters, critic, embedder (and rate
/// tables when learned) against central finite differences. The finite
/// difference re-runs the full inner loop per probe, so this validates
/// differentiation through the adaptation itself.
pub fn hypergradient_suite(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let cfg = instance_config(i, seed);
        cfg.validate()?;
        let dim = cfg.family.dim();
        let pool = gen_blob_pool(
            cfg.train_classes,
            dim,
            2.0,
            crate::config::derive_seed(seed, crate::config::SeedStream::TrainPool, i as u64),
        )?
        .with_split(Split::MetaTrain);
        let ep = sample_episode(
            &pool,
            cfg.n_way,
            cfg.k_shot,
            cfg.n_target,
            crate::config::derive_seed(seed, crate::config::SeedStream::TrainEpisode, i as u64),
        )?;
        let state = MetaState::init(&cfg, dim)?;
        let groups = group_prefixes(&state);
        let all = jitter(
            &combine(&groups),
            crate::config::derive_seed(seed, crate::config::SeedStream::InspectEpisode, i as u64),
        );

        let tape = Tape::new();
        let tracked = all.tracked(&tape);
        let loss = episode_loss(&tracked, &ep, &cfg)?;
        let ad = grad(&loss, &tracked, false)?;
        // The probe itself runs inner SGD, so each evaluation needs its own
        // tape even though only the scalar value is kept.
        let fd = finite_diff_oracle(
            |p| {
                let probe_tape = Tape::new();
                episode_loss(&p.tracked(&probe_tape), &ep, &cfg)?.item()
            },
            &all,
            EPISODE_EPS,
        )?;

        out.push(CheckReport {
            name: format!("episode hypergradients #{i}"),
            max_rel_err: rel_err(&ad.flat_data(), &fd.flat_data()),
            tolerance: EPISODE_TOL,
        });
    }
    Ok(out)
}

