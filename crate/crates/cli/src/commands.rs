//! One function per subcommand. Each returns the process exit code, or an
//! error that main maps to one (config problems exit 2, everything else 1).

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use sca_core::check::{hypergradient_suite, primitive_suite, second_derivative_check, CheckReport};
use sca_core::config::{derive_seed, parse_config, SeedStream};
use sca_core::episodes::{sample_episode, Split};
use sca_core::harness::{build_pools, evaluate, metrics_csv, train as train_run, Checkpoint};
use sca_core::meta::predict;
use sca_core::{Error, Result};

use crate::svg;
use crate::Scale;

/// Names of the three artifacts a training run leaves in --out.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub fn train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let text = fs::read_to_string(config_path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;

    let pools = build_pools(&cfg)?;
    let run = train_run(&cfg, &pools)?;

    // Artifacts are written even when the run diverged: the kept checkpoint
    // is the last good state and the log shows where things went wrong.
    run.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(METRICS_FILE), metrics_csv(&run.log))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    for name in [CHECKPOINT_FILE, METRICS_FILE, CONFIG_FILE] {
        println!("wrote {}", out.join(name).display());
    }
    println!(
        "kept outer step {} (validation accuracy {:.4} before target phase, {:.4} after)",
        run.checkpoint.outer_step, run.checkpoint.val_acc_pre, run.checkpoint.val_acc_post
    );
    if let Some(what) = run.diverged {
        eprintln!("error: {what}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    ckpt_path: &Path,
    split: &str,
    episodes: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<ExitCode> {
    let split = Split::parse(split)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let state = ckpt.state()?;
    let pools = build_pools(cfg)?;
    let base = seed.unwrap_or(cfg.seed);
    let stream = match split {
        Split::MetaTrain => SeedStream::TrainEpisode,
        Split::MetaVal => SeedStream::ValEpisode,
        Split::MetaTest => SeedStream::TestEpisode,
    };

    let rep = evaluate(&state, cfg, pools.pool(split), episodes, base, stream)?;

    let mut csv = String::from("# eval v1\nepisode,seed,acc_pre,acc_post\n");
    for e in 0..rep.episodes() {
        csv.push_str(&format!(
            "{e},{},{},{}\n",
            derive_seed(base, stream, e as u64),
            rep.acc_pre[e],
            rep.acc_post[e]
        ));
    }
    fs::write(out, csv)?;

    println!(
        "{} accuracy over {} episodes (base seed {base})",
        split.as_str(),
        rep.episodes()
    );
    println!("  before target phase: {:.4} ± {:.4}", rep.mean_pre, rep.half_pre);
    println!("  after target phase:  {:.4} ± {:.4}", rep.mean_post, rep.half_post);
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(scale: Scale, seed: u64) -> Result<ExitCode> {
    let instances = match scale {
        Scale::Small => 8,
        Scale::Medium => 24,
    };
    let mut reports = primitive_suite(seed)?;
    reports.push(second_derivative_check()?);
    reports.extend(hypergradient_suite(seed, instances)?);

    let mut all_ok = true;
    for r in &reports {
        all_ok &= r.passed();
        println!("{}", report_line(r));
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.3e}", reports.len());
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check tolerance exceeded");
        Ok(ExitCode::FAILURE)
    }
}

fn report_line(r: &CheckReport) -> String {
    let status = if r.passed() { "ok  " } else { "FAIL" };
    format!(
        "{status} {:<40} max rel err {:.3e} (tol {:.0e})",
        r.name, r.max_rel_err, r.tolerance
    )
}

pub fn inspect_critic(
    ckpt_path: &Path,
    episode_seed: u64,
    steps: usize,
    out: &Path,
) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let state = ckpt.state()?;
    // Same networks, but the target phase replays for the requested number
    // of steps instead of the trained configuration's.
    let mut cfg = ckpt.config.clone();
    cfg.target_steps = steps;

    let pools = build_pools(&ckpt.config)?;
    let ep = sample_episode(
        pools.pool(Split::MetaTest),
        cfg.n_way,
        cfg.k_shot,
        cfg.n_target,
        derive_seed(episode_seed, SeedStream::InspectEpisode, 0),
    )?;
    let pred = predict(&state, &ep, &cfg)?;
    let before = row_probabilities(&pred.logits_pre)?;
    let after = row_probabilities(&pred.logits_post)?;
    let labels = ep.target_labels();

    fs::create_dir_all(out)?;
    let csv_path = out.join("probabilities.csv");
    fs::write(&csv_path, probabilities_csv(labels, &before, &after))?;
    let svg_path = out.join("probabilities.svg");
    fs::write(&svg_path, svg::grouped_bars(cfg.n_way, labels, &before, &after))?;

    let (example, shift) = largest_argmax_shift(&before, &after);
    println!(
        "episode seed {episode_seed}, {} target examples, {steps} critic-driven steps",
        labels.len()
    );
    println!("largest argmax-class probability shift: {shift:.4} (example {example})");
    println!("wrote {}", csv_path.display());
    println!("wrote {}", svg_path.display());
    Ok(ExitCode::SUCCESS)
}

fn row_probabilities(logits: &sca_core::Tensor) -> Result<Vec<Vec<f64>>> {
    let probs = logits.softmax()?;
    let n = probs.rows()?;
    let c = probs.shape()[1];
    let data = probs.data();
    Ok((0..n).map(|i| data[i * c..(i + 1) * c].to_vec()).collect())
}

/// Over all examples, the largest |after - before| of the probability of
/// the class the adapted model settles on.
fn largest_argmax_shift(before: &[Vec<f64>], after: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, 0.0);
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        let top = a
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let shift = (a[top] - b[top]).abs();
        if shift > best.1 {
            best = (i, shift);
        }
    }
    best
}

fn probabilities_csv(labels: &[usize], before: &[Vec<f64>], after: &[Vec<f64>]) -> String {
    let n_way = before.first().map_or(0, Vec::len);
    let mut s = String::from("# inspect v1\nexample,label,phase");
    for c in 0..n_way {
        s.push_str(&format!(",p{c}"));
    }
    s.push('\n');
    for (i, label) in labels.iter().enumerate() {
        for (phase, probs) in [("before", &before[i]), ("after", &after[i])] {
            s.push_str(&format!("{i},{label},{phase}"));
            for p in probs.iter() {
                s.push_str(&format!(",{p}"));
            }
            s.push('\n');
        }
    }
    s
}
