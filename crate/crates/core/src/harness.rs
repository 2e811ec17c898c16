//! Training driver, evaluation, and checkpoint files.
//!
//! Everything here is deterministic: episode seeds are derived from the
//! config seed per stream and index, the validation set is the same fixed
//! collection of episodes at every cadence point, and evaluation runs
//! episodes in seed order. Two runs with the same config produce identical
//! logs and checkpoints byte for byte.
//!
//! Checkpoint files are a plain-text manifest (version line, scalars,
//! config echo, per-group layouts) followed by a `[payload]` marker and the
//! raw parameter values as little-endian 64-bit floats in manifest order.

use std::path::Path;

use crate::config::{derive_seed, FamilyConfig, MetaConfig, SeedStream};
use crate::episodes::{
    gen_ambiguous_pool, gen_blob_pool, load_image_pool, sample_episode, ClassPool, Episode,
    PoolSet, Split,
};
use crate::error::{Error, Result};
use crate::meta::{accuracy, meta_step, predict, MetaState};
use crate::params::{ParamLayout, ParameterSet};

/// Builds the three split pools described by the config.
pub fn build_pools(cfg: &MetaConfig) -> Result<PoolSet> {
    cfg.validate()?;
    let seeds = [
        derive_seed(cfg.seed, SeedStream::TrainPool, 0),
        derive_seed(cfg.seed, SeedStream::ValPool, 0),
        derive_seed(cfg.seed, SeedStream::TestPool, 0),
    ];
    let counts = [cfg.train_classes, cfg.val_classes, cfg.test_classes];
    let splits = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];
    let mut pools: Vec<ClassPool> = Vec::with_capacity(3);
    let mut id_base = 0;
    for i in 0..3 {
        let pool = match &cfg.family {
            FamilyConfig::Blob { dim, separation } => {
                gen_blob_pool(counts[i], *dim, *separation, seeds[i])?
            }
            FamilyConfig::Ambiguous {
                signal_dims,
                spurious_dims,
            } => gen_ambiguous_pool(counts[i], *signal_dims, *spurious_dims, seeds[i])?,
            FamilyConfig::Image { root, size } => {
                load_image_pool(&root.join(splits[i].as_str()), splits[i], *size)?
            }
        };
        let pool = pool.with_split(splits[i]).with_id_base(id_base);
        if pool.n_classes() < cfg.n_way {
            return Err(Error::Capacity(format!(
                "{} pool has {} classes, need n_way = {}",
                splits[i].as_str(),
                pool.n_classes(),
                cfg.n_way
            )));
        }
        id_base += pool.n_classes() as u64;
        pools.push(pool);
    }
    let test = pools.pop().unwrap();
    let val = pools.pop().unwrap();
    let train = pools.pop().unwrap();
    PoolSet::new(train, val, test)
}

/// Per-episode accuracies with normal-approximation 95% intervals
/// (half-width 1.96·σ/√E, sample standard deviation, 0 when E = 1).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub acc_pre: Vec<f64>,
    pub acc_post: Vec<f64>,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub half_pre: f64,
    pub half_post: f64,
}

impl EvalReport {
    pub fn from_accuracies(acc_pre: Vec<f64>, acc_post: Vec<f64>) -> Result<EvalReport> {
        if acc_pre.is_empty() || acc_pre.len() != acc_post.len() {
            return Err(Error::contract(
                "EvalReport: need one pre and one post accuracy per episode",
            ));
        }
        let (mean_pre, half_pre) = mean_halfwidth(&acc_pre);
        let (mean_post, half_post) = mean_halfwidth(&acc_post);
        Ok(EvalReport {
            acc_pre,
            acc_post,
            mean_pre,
            mean_post,
            half_pre,
            half_post,
        })
    }

    pub fn episodes(&self) -> usize {
        self.acc_pre.len()
    }
}

fn mean_halfwidth(xs: &[f64]) -> (f64, f64) {
    let e = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / e;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (e - 1.0);
    (mean, 1.96 * var.sqrt() / e.sqrt())
}

/// Runs `n_episodes` episodes drawn from `pool` with seeds
/// `derive_seed(base_seed, stream, 0..n)` and reports pre/post accuracy.
/// Episodes are independent; they run in seed order so the report is
/// reproducible.
pub fn evaluate(
    state: &MetaState,
    cfg: &MetaConfig,
    pool: &ClassPool,
    n_episodes: usize,
    base_seed: u64,
    stream: SeedStream,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::contract("evaluate: need at least one episode"));
    }
    let mut pre = Vec::with_capacity(n_episodes);
    let mut post = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let ep = sample_episode(
            pool,
            cfg.n_way,
            cfg.k_shot,
            cfg.n_target,
            derive_seed(base_seed, stream, e as u64),
        )?;
        let p = predict(state, &ep, cfg)?;
        pre.push(accuracy(&p.logits_pre, ep.target_labels())?);
        post.push(accuracy(&p.logits_post, ep.target_labels())?);
    }
    EvalReport::from_accuracies(pre, post)
}

/// One metrics-log line. `train` is (outer loss, pre acc, post acc) for the
/// step's batch; `val` is (pre, post) mean accuracy when this step ran a
/// validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub outer_step: usize,
    pub train: Option<(f64, f64, f64)>,
    pub val: Option<(f64, f64)>,
}

/// Renders the metrics log as CSV. Missing values are empty fields; the
/// schema is versioned in the leading comment.
pub fn metrics_csv(log: &[LogRow]) -> String {
    let mut s = String::from(
        "# metrics v1\nouter_step,train_loss,train_acc_pre,train_acc_post,val_acc_pre,val_acc_post\n",
    );
    for row in log {
        let (tl, tp, ta) = match row.train {
            Some((l, p, a)) => (l.to_string(), p.to_string(), a.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        let (vp, va) = match row.val {
            Some((p, a)) => (p.to_string(), a.to_string()),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!("{},{tl},{tp},{ta},{vp},{va}\n", row.outer_step));
    }
    s
}

/// Result of a training run. On divergence the run stops early,
/// `diverged` carries the diagnostic, and `checkpoint` holds the last good
/// state; otherwise `checkpoint` is the best-by-validation-accuracy state
/// seen at any cadence point.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub diverged: Option<String>,
}

/// Meta-trains from a fresh initialization.
///
/// Every `eval_interval` steps (and at the final step) the fixed validation
/// episode set is scored; the checkpoint with the highest post-phase
/// validation accuracy is retained. `outer_steps = 0` returns the
/// initialization checkpoint, scored once for the record.
pub fn train(cfg: &MetaConfig, pools: &PoolSet) -> Result<TrainRun> {
    cfg.validate()?;
    let mut state = MetaState::init(cfg, pools.dim())?;
    let mut log: Vec<LogRow> = Vec::new();
    let val_pool = pools.pool(Split::MetaVal);

    if cfg.outer_steps == 0 {
        let rep = evaluate(
            &state,
            cfg,
            val_pool,
            cfg.val_episodes,
            cfg.seed,
            SeedStream::ValEpisode,
        )?;
        log.push(LogRow {
            outer_step: 0,
            train: None,
            val: Some((rep.mean_pre, rep.mean_post)),
        });
        return Ok(TrainRun {
            checkpoint: Checkpoint::from_state(cfg, &state, 0, rep.mean_pre, rep.mean_post),
            log,
            diverged: None,
        });
    }

    let mut best: Option<Checkpoint> = None;
    for s in 1..=cfg.outer_steps {
        let episodes: Vec<Episode> = (0..cfg.meta_batch)
            .map(|b| {
                sample_episode(
                    pools.pool(Split::MetaTrain),
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.n_target,
                    derive_seed(
                        cfg.seed,
                        SeedStream::TrainEpisode,
                        ((s - 1) * cfg.meta_batch + b) as u64,
                    ),
                )
            })
            .collect::<Result<_>>()?;

        match meta_step(&mut state, &episodes, cfg) {
            Ok(m) => {
                let val = if s % cfg.eval_interval == 0 || s == cfg.outer_steps {
                    let rep = evaluate(
                        &state,
                        cfg,
                        val_pool,
                        cfg.val_episodes,
                        cfg.seed,
                        SeedStream::ValEpisode,
                    )?;
                    let better = best
                        .as_ref()
                        .is_none_or(|b| rep.mean_post > b.val_acc_post);
                    if better {
                        best = Some(Checkpoint::from_state(
                            cfg,
                            &state,
                            s,
                            rep.mean_pre,
                            rep.mean_post,
                        ));
                    }
                    Some((rep.mean_pre, rep.mean_post))
                } else {
                    None
                };
                log.push(LogRow {
                    outer_step: s,
                    train: Some((m.outer_loss, m.acc_pre, m.acc_post)),
                    val,
                });
            }
            Err(Error::Divergence { step, what }) => {
                // State is untouched by a failed step: score and keep it.
                let msg = format!("diverged at outer step {s}, inner step {step}: {what}");
                let rep = evaluate(
                    &state,
                    cfg,
                    val_pool,
                    cfg.val_episodes,
                    cfg.seed,
                    SeedStream::ValEpisode,
                )?;
                return Ok(TrainRun {
                    checkpoint: Checkpoint::from_state(cfg, &state, s - 1, rep.mean_pre, rep.mean_post),
                    log,
                    diverged: Some(msg),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        checkpoint: best.expect("final step always evaluates"),
        log,
        diverged: None,
    })
}

// ── checkpoint files ──

const CKPT_VERSION: &str = "# checkpoint v1";
const PAYLOAD_MARKER: &[u8] = b"[payload]\n";

/// A full parameter snapshot plus the config that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: MetaConfig,
    pub input_dim: usize,
    pub outer_step: usize,
    pub val_acc_pre: f64,
    pub val_acc_post: f64,
    /// (group name, parameters) in file order: theta, critic, embedder,
    /// then the rate tables when the config learns them.
    pub groups: Vec<(String, ParameterSet)>,
}

impl Checkpoint {
    pub fn from_state(
        cfg: &MetaConfig,
        state: &MetaState,
        outer_step: usize,
        val_acc_pre: f64,
        val_acc_post: f64,
    ) -> Checkpoint {
        let mut groups = vec![
            ("theta".to_string(), state.theta.detached()),
            ("critic".to_string(), state.critic.detached()),
            ("embedder".to_string(), state.embedder.detached()),
        ];
        if let Some(t) = &state.lr_support {
            groups.push(("lr_support".to_string(), t.detached()));
        }
        if let Some(t) = &state.lr_target {
            groups.push(("lr_target".to_string(), t.detached()));
        }
        Checkpoint {
            config: cfg.clone(),
            input_dim: state.input_dim,
            outer_step,
            val_acc_pre,
            val_acc_post,
            groups,
        }
    }

    fn group(&self, name: &str) -> Option<&ParameterSet> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    /// Reconstructs run state. Group layouts are re-derived from the
    /// embedded config and must match the stored ones, so a hand-edited
    /// file cannot smuggle in mismatched shapes.
    pub fn state(&self) -> Result<MetaState> {
        let cfg = &self.config;
        let model_layout = cfg.model_spec(self.input_dim)?.layout();
        let critic_layout = cfg.critic_spec().layout();
        let embed_layout = cfg.embedder_spec(self.input_dim)?.layout();
        let fetch = |name: &str, expect: Option<&ParamLayout>| -> Result<ParameterSet> {
            let p = self
                .group(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing group `{name}`")))?;
            if let Some(l) = expect {
                if p.layout() != *l {
                    return Err(Error::Checkpoint(format!(
                        "group `{name}` does not match the configuration's layout"
                    )));
                }
            }
            Ok(p.clone())
        };
        let theta = fetch("theta", Some(&model_layout))?;
        let critic = fetch("critic", Some(&critic_layout))?;
        let embedder = fetch("embedder", Some(&embed_layout))?;
        let (lr_support, lr_target) = if cfg.learnable_inner_lr {
            (Some(fetch("lr_support", None)?), Some(fetch("lr_target", None)?))
        } else {
            (None, None)
        };
        Ok(MetaState::from_groups(
            cfg,
            self.input_dim,
            theta,
            critic,
            embedder,
            lr_support,
            lr_target,
        ))
    }

    /// As [`state`](Checkpoint::state), but rejects the load when the
    /// stored config differs from `running`.
    pub fn state_for(&self, running: &MetaConfig) -> Result<MetaState> {
        if self.config != *running {
            return Err(Error::Checkpoint(
                "stored configuration does not match the running configuration".into(),
            ));
        }
        self.state()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(CKPT_VERSION);
        text.push('\n');
        text.push_str(&format!("input_dim = {}\n", self.input_dim));
        text.push_str(&format!("outer_step = {}\n", self.outer_step));
        text.push_str(&format!("val_acc_pre = {}\n", self.val_acc_pre));
        text.push_str(&format!("val_acc_post = {}\n", self.val_acc_post));
        text.push_str("[config]\n");
        text.push_str(&self.config.to_text());
        for (name, params) in &self.groups {
            text.push_str(&format!("[layout {name}]\n"));
            for (pname, shape) in params.layout().iter() {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                text.push_str(&format!("{pname} {}\n", dims.join(" ")));
            }
        }
        let mut bytes = text.into_bytes();
        bytes.extend_from_slice(PAYLOAD_MARKER);
        for (_, params) in &self.groups {
            for v in params.flat_data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let marker_at = find_marker(&bytes).ok_or_else(|| {
            Error::Checkpoint(format!("{}: no [payload] marker", path.display()))
        })?;
        let manifest = std::str::from_utf8(&bytes[..marker_at])
            .map_err(|_| Error::Checkpoint(format!("{}: manifest is not UTF-8", path.display())))?;
        let payload = &bytes[marker_at + PAYLOAD_MARKER.len()..];

        let mut lines = manifest.lines();
        if lines.next() != Some(CKPT_VERSION) {
            return Err(Error::Checkpoint(format!(
                "{}: not a recognized checkpoint (expected `{CKPT_VERSION}`)",
                path.display()
            )));
        }

        let mut input_dim: Option<usize> = None;
        let mut outer_step: Option<usize> = None;
        let mut val_acc_pre: Option<f64> = None;
        let mut val_acc_post: Option<f64> = None;
        let mut config_text = String::new();
        type NamedLayout = (String, Vec<(String, Vec<usize>)>);
        let mut layouts: Vec<NamedLayout> = Vec::new();
        enum Section {
            Head,
            Config,
            Layout,
        }
        let mut section = Section::Head;
        for line in lines {
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(Error::Checkpoint(format!("bad section line `{line}`")));
                };
                if name == "config" {
                    section = Section::Config;
                } else if let Some(group) = name.strip_prefix("layout ") {
                    layouts.push((group.to_string(), Vec::new()));
                    section = Section::Layout;
                } else {
                    return Err(Error::Checkpoint(format!("unknown section `[{name}]`")));
                }
                continue;
            }
            match section {
                Section::Head => {
                    let Some((k, v)) = line.split_once('=') else {
                        return Err(Error::Checkpoint(format!("bad manifest line `{line}`")));
                    };
                    let (k, v) = (k.trim(), v.trim());
                    let parse_err =
                        || Error::Checkpoint(format!("cannot parse `{v}` for `{k}`"));
                    match k {
                        "input_dim" => input_dim = Some(v.parse().map_err(|_| parse_err())?),
                        "outer_step" => outer_step = Some(v.parse().map_err(|_| parse_err())?),
                        "val_acc_pre" => val_acc_pre = Some(v.parse().map_err(|_| parse_err())?),
                        "val_acc_post" => val_acc_post = Some(v.parse().map_err(|_| parse_err())?),
                        other => {
                            return Err(Error::Checkpoint(format!("unknown manifest key `{other}`")))
                        }
                    }
                }
                Section::Config => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
                Section::Layout => {
                    let mut parts = line.split_whitespace();
                    let Some(pname) = parts.next() else {
                        continue;
                    };
                    let shape: Vec<usize> = parts
                        .map(|p| p.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| {
                            Error::Checkpoint(format!("bad layout line `{line}`"))
                        })?;
                    layouts.last_mut().expect("inside a layout section").1.push((
                        pname.to_string(),
                        shape,
                    ));
                }
            }
        }

        let missing = |k: &str| Error::Checkpoint(format!("manifest is missing `{k}`"));
        let input_dim = input_dim.ok_or_else(|| missing("input_dim"))?;
        let outer_step = outer_step.ok_or_else(|| missing("outer_step"))?;
        let val_acc_pre = val_acc_pre.ok_or_else(|| missing("val_acc_pre"))?;
        let val_acc_post = val_acc_post.ok_or_else(|| missing("val_acc_post"))?;
        let config = crate::config::parse_config(&config_text)?;

        let total: usize = layouts
            .iter()
            .flat_map(|(_, l)| l.iter())
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "{}: payload holds {} bytes, layouts require {}",
                path.display(),
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut groups = Vec::with_capacity(layouts.len());
        for (gname, entries) in layouts {
            let layout = ParamLayout::from_entries(entries);
            let flat: Vec<f64> = (&mut values).take(layout.total()).collect();
            groups.push((gname, ParameterSet::from_flat_data(&layout, &flat)?));
        }
        Ok(Checkpoint {
            config,
            input_dim,
            outer_step,
            val_acc_pre,
            val_acc_post,
            groups,
        })
    }
}

fn find_marker(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < PAYLOAD_MARKER.len() {
        return None;
    }
    (0..=bytes.len() - PAYLOAD_MARKER.len())
        .find(|&i| &bytes[i..i + PAYLOAD_MARKER.len()] == PAYLOAD_MARKER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OuterOpt;

    fn tiny_cfg() -> MetaConfig {
        let mut cfg = MetaConfig::defaults(FamilyConfig::Blob {
            dim: 3,
            separation: 5.0,
        });
        cfg.train_classes = 6;
        cfg.val_classes = 6;
        cfg.test_classes = 6;
        cfg.n_way = 2;
        cfg.k_shot = 1;
        cfg.n_target = 4;
        cfg.hidden = vec![5];
        cfg.embed_dim = 3;
        cfg.relation_hidden = 4;
        cfg.critic_channels = 2;
        cfg.critic_fc_width = 4;
        cfg.support_steps = 1;
        cfg.target_steps = 1;
        cfg.meta_batch = 1;
        cfg.outer_steps = 4;
        cfg.eval_interval = 2;
        cfg.val_episodes = 3;
        cfg.test_episodes = 3;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn pools_carry_split_tags_and_the_family_dim() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        assert_eq!(pools.dim(), 3);
        assert_eq!(pools.pool(Split::MetaVal).split(), Split::MetaVal);
        assert_eq!(pools.pool(Split::MetaTest).n_classes(), 6);

        let mut cfg = tiny_cfg();
        cfg.family = FamilyConfig::Ambiguous {
            signal_dims: 2,
            spurious_dims: 2,
        };
        assert_eq!(build_pools(&cfg).unwrap().dim(), 4);
    }

    #[test]
    fn image_pools_read_per_split_directories() {
        let root = tempfile::tempdir().unwrap();
        for split in ["meta-train", "meta-val", "meta-test"] {
            for class in ["a", "b"] {
                let dir = root.path().join(split).join(class);
                std::fs::create_dir_all(&dir).unwrap();
                for i in 0..3 {
                    image::GrayImage::from_pixel(4, 4, image::Luma([i * 40]))
                        .save(dir.join(format!("{i}.png")))
                        .unwrap();
                }
            }
        }
        let mut cfg = tiny_cfg();
        cfg.family = FamilyConfig::Image {
            root: root.path().to_path_buf(),
            size: 4,
        };
        let pools = build_pools(&cfg).unwrap();
        assert_eq!(pools.dim(), 16);
        assert_eq!(pools.pool(Split::MetaTrain).n_classes(), 2);
        // ids stay disjoint across the three directories
        let ids: Vec<u64> = pools
            .pool(Split::MetaTest)
            .class_ids()
            .collect();
        assert_eq!(ids, vec![4, 5]);
    }

    #[test]
    fn half_width_is_zero_for_a_single_episode() {
        let rep = EvalReport::from_accuracies(vec![0.8], vec![0.9]).unwrap();
        assert_eq!(rep.half_pre, 0.0);
        assert_eq!(rep.half_post, 0.0);
        assert_eq!(rep.episodes(), 1);
    }

    #[test]
    fn half_width_hand_case() {
        let rep = EvalReport::from_accuracies(vec![0.5, 1.0], vec![0.5, 1.0]).unwrap();
        assert!((rep.mean_pre - 0.75).abs() < 1e-15);
        // sample std 0.25/sqrt(1/2)... : s = sqrt(0.125), half = 1.96 s / sqrt(2) = 0.49
        assert!((rep.half_pre - 0.49).abs() < 1e-12, "{}", rep.half_pre);
    }

    #[test]
    fn report_rejects_empty_or_mismatched_inputs() {
        assert!(EvalReport::from_accuracies(vec![], vec![]).is_err());
        assert!(EvalReport::from_accuracies(vec![0.5], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn untrained_networks_score_near_chance() {
        let mut cfg = tiny_cfg();
        cfg.n_way = 5;
        cfg.n_target = 15;
        cfg.support_steps = 0;
        cfg.target_steps = 0;
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let rep = evaluate(
            &state,
            &cfg,
            pools.pool(Split::MetaTest),
            100,
            cfg.seed,
            SeedStream::TestEpisode,
        )
        .unwrap();
        assert!(
            (rep.mean_pre - 0.2).abs() <= rep.half_pre.max(0.03),
            "mean {} half {}",
            rep.mean_pre,
            rep.half_pre
        );
    }

    #[test]
    fn evaluation_is_reproducible() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let pool = pools.pool(Split::MetaVal);
        let a = evaluate(&state, &cfg, pool, 5, cfg.seed, SeedStream::ValEpisode).unwrap();
        let b = evaluate(&state, &cfg, pool, 5, cfg.seed, SeedStream::ValEpisode).unwrap();
        assert_eq!(a.acc_pre, b.acc_pre);
        assert_eq!(a.acc_post, b.acc_post);
    }

    #[test]
    fn metrics_csv_leaves_missing_fields_empty() {
        let log = vec![
            LogRow {
                outer_step: 0,
                train: None,
                val: Some((0.5, 0.625)),
            },
            LogRow {
                outer_step: 1,
                train: Some((1.25, 0.5, 0.75)),
                val: None,
            },
        ];
        let csv = metrics_csv(&log);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# metrics v1");
        assert_eq!(
            lines[1],
            "outer_step,train_loss,train_acc_pre,train_acc_post,val_acc_pre,val_acc_post"
        );
        assert_eq!(lines[2], "0,,,,0.5,0.625");
        assert_eq!(lines[3], "1,1.25,0.5,0.75,,");
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let ckpt = Checkpoint::from_state(&cfg, &state, 3, 0.5, 0.625);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.input_dim, 3);
        assert_eq!(back.outer_step, 3);
        assert_eq!(back.val_acc_pre.to_bits(), 0.5f64.to_bits());
        assert_eq!(back.val_acc_post.to_bits(), 0.625f64.to_bits());
        let restored = back.state_for(&cfg).unwrap();
        assert!(restored.theta.bitwise_eq(&state.theta));
        assert!(restored.critic.bitwise_eq(&state.critic));
        assert!(restored.embedder.bitwise_eq(&state.embedder));
    }

    #[test]
    fn learned_rate_tables_ride_along() {
        let mut cfg = tiny_cfg();
        cfg.learnable_inner_lr = true;
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        Checkpoint::from_state(&cfg, &state, 0, 0.0, 0.0)
            .save(&path)
            .unwrap();
        let restored = Checkpoint::load(&path).unwrap().state().unwrap();
        assert!(restored
            .lr_support
            .as_ref()
            .unwrap()
            .bitwise_eq(state.lr_support.as_ref().unwrap()));
        assert!(restored
            .lr_target
            .as_ref()
            .unwrap()
            .bitwise_eq(state.lr_target.as_ref().unwrap()));
    }

    #[test]
    fn mismatched_configs_refuse_to_load_state() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let ckpt = Checkpoint::from_state(&cfg, &state, 0, 0.0, 0.0);
        let mut other = cfg.clone();
        other.support_lr = 0.999;
        match ckpt.state_for(&other) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("configuration"), "{msg}"),
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("mismatched config must not load"),
        }
    }

    #[test]
    fn truncated_payloads_are_detected() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        let state = MetaState::init(&cfg, pools.dim()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        Checkpoint::from_state(&cfg, &state, 0, 0.0, 0.0)
            .save(&path)
            .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("payload"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn unrelated_files_are_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_checkpoint.txt");
        std::fs::write(&path, "hello\n[payload]\n").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("recognized"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        std::fs::write(&path, "no marker here").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn zero_outer_steps_return_the_scored_initialization() {
        let mut cfg = tiny_cfg();
        cfg.outer_steps = 0;
        let pools = build_pools(&cfg).unwrap();
        let run = train(&cfg, &pools).unwrap();
        assert!(run.diverged.is_none());
        assert_eq!(run.log.len(), 1);
        assert_eq!(run.log[0].outer_step, 0);
        assert!(run.log[0].train.is_none());
        assert!(run.log[0].val.is_some());
        assert_eq!(run.checkpoint.outer_step, 0);
        let fresh = MetaState::init(&cfg, pools.dim()).unwrap();
        assert!(run.checkpoint.state().unwrap().theta.bitwise_eq(&fresh.theta));
    }

    #[test]
    fn training_twice_gives_identical_logs_and_checkpoints() {
        let cfg = tiny_cfg();
        let pools = build_pools(&cfg).unwrap();
        let a = train(&cfg, &pools).unwrap();
        let b = train(&cfg, &pools).unwrap();
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        a.checkpoint.save(&pa).unwrap();
        b.checkpoint.save(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn the_kept_checkpoint_is_the_log_maximum() {
        let mut cfg = tiny_cfg();
        cfg.eval_interval = 1;
        cfg.outer_steps = 5;
        let pools = build_pools(&cfg).unwrap();
        let run = train(&cfg, &pools).unwrap();
        let best_row = run
            .log
            .iter()
            .filter_map(|r| r.val.map(|(_, post)| (r.outer_step, post)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!(run.checkpoint.val_acc_post.to_bits(), best_row.1.to_bits());
        assert_eq!(run.checkpoint.outer_step, best_row.0);
    }

    #[test]
    fn divergence_stops_the_run_and_keeps_the_last_good_state() {
        let mut cfg = tiny_cfg();
        cfg.support_steps = 0;
        cfg.target_steps = 0;
        cfg.outer_opt = OuterOpt::Sgd;
        cfg.outer_lr = 1e31;
        cfg.outer_steps = 8;
        cfg.eval_interval = 100;
        let pools = build_pools(&cfg).unwrap();
        let run = train(&cfg, &pools).unwrap();
        let msg = run.diverged.expect("the run must diverge");
        assert!(msg.contains("diverged at outer step"), "{msg}");
        assert_eq!(run.checkpoint.outer_step, run.log.len());
        assert!(run.checkpoint.state().is_ok());
    }
}
