//! Run configuration: one flat key=value record covering the episode
//! protocol, architectures, loop hyperparameters, and harness cadence.
//!
//! The text format is line-based: `key = value`, `#` lines are comments,
//! unknown or duplicate keys are rejected by name. [`MetaConfig::to_text`]
//! emits every resolved field in a fixed order and round-trips through
//! [`parse_config`] exactly; that echo is also what checkpoints embed and
//! compare against.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::critic::{CriticFeatureFlags, CriticSpec};
use crate::embed::EmbedderSpec;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Outer-loop optimizer choice. Adam is the default; plain SGD matches the
/// update equations literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterOpt {
    Adam,
    Sgd,
}

impl OuterOpt {
    fn as_str(&self) -> &'static str {
        match self {
            OuterOpt::Adam => "adam",
            OuterOpt::Sgd => "sgd",
        }
    }
}

/// Which task family the pools are built from.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyConfig {
    Blob {
        dim: usize,
        separation: f64,
    },
    Ambiguous {
        signal_dims: usize,
        spurious_dims: usize,
    },
    /// `root` must hold meta-train/, meta-val/, meta-test/ class directories.
    Image {
        root: PathBuf,
        size: usize,
    },
}

impl FamilyConfig {
    /// Feature dimension of the synthetic families; image pools report
    /// theirs after loading.
    pub fn dim(&self) -> usize {
        match self {
            FamilyConfig::Blob { dim, .. } => *dim,
            FamilyConfig::Ambiguous {
                signal_dims,
                spurious_dims,
            } => signal_dims + spurious_dims,
            FamilyConfig::Image { size, .. } => size * size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub seed: u64,
    pub family: FamilyConfig,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,

    pub n_way: usize,
    pub k_shot: usize,
    pub n_target: usize,

    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub relation_hidden: usize,
    pub critic_channels: usize,
    pub critic_fc_width: usize,
    pub critic_min_len: usize,

    /// N: SGD steps on the labelled support set.
    pub support_steps: usize,
    /// I: critic-driven steps on the unlabelled target set.
    pub target_steps: usize,
    pub support_lr: f64,
    pub target_lr: f64,
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub outer_opt: OuterOpt,
    pub flags: CriticFeatureFlags,
    pub learnable_inner_lr: bool,

    pub outer_steps: usize,
    pub eval_interval: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
}

impl MetaConfig {
    /// Defaults for a family; everything else is overridable per key.
    pub fn defaults(family: FamilyConfig) -> MetaConfig {
        MetaConfig {
            seed: 0,
            family,
            train_classes: 20,
            val_classes: 10,
            test_classes: 10,
            n_way: 5,
            k_shot: 1,
            n_target: 75,
            hidden: crate::model::DEFAULT_HIDDEN.to_vec(),
            embed_dim: crate::embed::DEFAULT_EMBED_DIM,
            relation_hidden: crate::embed::DEFAULT_RELATION_HIDDEN,
            critic_channels: 8,
            critic_fc_width: 32,
            critic_min_len: 32,
            support_steps: 5,
            target_steps: 1,
            support_lr: 0.1,
            target_lr: 0.1,
            outer_lr: 1e-3,
            meta_batch: 4,
            outer_opt: OuterOpt::Adam,
            flags: CriticFeatureFlags {
                use_predictions: true,
                use_params: false,
                use_task_embedding: false,
            },
            learnable_inner_lr: false,
            outer_steps: 500,
            eval_interval: 50,
            val_episodes: 200,
            test_episodes: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.into()));
        if self.n_way == 0 || self.k_shot == 0 || self.n_target == 0 {
            return bad("n_way, k_shot, n_target must be positive");
        }
        if self.meta_batch == 0 {
            return bad("meta_batch must be at least 1");
        }
        if self.support_steps > 0 && !(self.support_lr > 0.0 && self.support_lr.is_finite()) {
            return bad("support_lr must be positive while support_steps > 0");
        }
        if self.target_steps > 0 && !(self.target_lr > 0.0 && self.target_lr.is_finite()) {
            return bad("target_lr must be positive while target_steps > 0");
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("outer_lr must be positive");
        }
        if self.eval_interval == 0 || self.val_episodes == 0 || self.test_episodes == 0 {
            return bad("eval_interval, val_episodes, test_episodes must be positive");
        }
        // Image pools take their class counts from the directory tree, so
        // the *_classes keys only constrain the synthetic families.
        if !matches!(self.family, FamilyConfig::Image { .. })
            && (self.train_classes < self.n_way
                || self.val_classes < self.n_way
                || self.test_classes < self.n_way)
        {
            return bad("every split needs at least n_way classes");
        }
        self.flags
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        match &self.family {
            FamilyConfig::Blob { dim, separation } => {
                if *dim == 0 {
                    return bad("dim must be positive");
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return bad("separation must be a nonnegative number");
                }
            }
            FamilyConfig::Ambiguous {
                signal_dims,
                spurious_dims,
            } => {
                if *signal_dims == 0 || *spurious_dims == 0 {
                    return bad("signal_dims and spurious_dims must be positive");
                }
            }
            FamilyConfig::Image { size, .. } => {
                if *size == 0 {
                    return bad("image_size must be positive");
                }
            }
        }
        // architecture sanity mirrors the specs built from this config
        ModelSpec::new(self.family.dim().max(1), self.hidden.clone(), self.n_way)
            .map_err(|e| Error::Config(e.to_string()))?;
        EmbedderSpec::new(self.family.dim().max(1), self.embed_dim, self.relation_hidden)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.critic_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn critic_spec(&self) -> CriticSpec {
        CriticSpec {
            channels: self.critic_channels,
            fc_width: self.critic_fc_width,
            min_input_len: self.critic_min_len,
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec> {
        ModelSpec::new(input_dim, self.hidden.clone(), self.n_way)
    }

    pub fn embedder_spec(&self, input_dim: usize) -> Result<EmbedderSpec> {
        EmbedderSpec::new(input_dim, self.embed_dim, self.relation_hidden)
    }

    /// Full resolved record, fixed key order, reparseable by [`parse_config`].
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        let kv = &mut s;
        match &self.family {
            FamilyConfig::Blob { dim, separation } => {
                writeln!(kv, "family = blob").unwrap();
                writeln!(kv, "dim = {dim}").unwrap();
                writeln!(kv, "separation = {separation}").unwrap();
            }
            FamilyConfig::Ambiguous {
                signal_dims,
                spurious_dims,
            } => {
                writeln!(kv, "family = ambiguous").unwrap();
                writeln!(kv, "signal_dims = {signal_dims}").unwrap();
                writeln!(kv, "spurious_dims = {spurious_dims}").unwrap();
            }
            FamilyConfig::Image { root, size } => {
                writeln!(kv, "family = image").unwrap();
                writeln!(kv, "image_root = {}", root.display()).unwrap();
                writeln!(kv, "image_size = {size}").unwrap();
            }
        }
        writeln!(kv, "seed = {}", self.seed).unwrap();
        writeln!(kv, "train_classes = {}", self.train_classes).unwrap();
        writeln!(kv, "val_classes = {}", self.val_classes).unwrap();
        writeln!(kv, "test_classes = {}", self.test_classes).unwrap();
        writeln!(kv, "n_way = {}", self.n_way).unwrap();
        writeln!(kv, "k_shot = {}", self.k_shot).unwrap();
        writeln!(kv, "n_target = {}", self.n_target).unwrap();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(kv, "hidden = {}", hidden.join(",")).unwrap();
        writeln!(kv, "embed_dim = {}", self.embed_dim).unwrap();
        writeln!(kv, "relation_hidden = {}", self.relation_hidden).unwrap();
        writeln!(kv, "critic_channels = {}", self.critic_channels).unwrap();
        writeln!(kv, "critic_fc_width = {}", self.critic_fc_width).unwrap();
        writeln!(kv, "critic_min_len = {}", self.critic_min_len).unwrap();
        writeln!(kv, "support_steps = {}", self.support_steps).unwrap();
        writeln!(kv, "target_steps = {}", self.target_steps).unwrap();
        writeln!(kv, "support_lr = {}", self.support_lr).unwrap();
        writeln!(kv, "target_lr = {}", self.target_lr).unwrap();
        writeln!(kv, "outer_lr = {}", self.outer_lr).unwrap();
        writeln!(kv, "meta_batch = {}", self.meta_batch).unwrap();
        writeln!(kv, "outer_opt = {}", self.outer_opt.as_str()).unwrap();
        writeln!(kv, "use_predictions = {}", self.flags.use_predictions).unwrap();
        writeln!(kv, "use_params = {}", self.flags.use_params).unwrap();
        writeln!(kv, "use_task_embedding = {}", self.flags.use_task_embedding).unwrap();
        writeln!(kv, "learnable_inner_lr = {}", self.learnable_inner_lr).unwrap();
        writeln!(kv, "outer_steps = {}", self.outer_steps).unwrap();
        writeln!(kv, "eval_interval = {}", self.eval_interval).unwrap();
        writeln!(kv, "val_episodes = {}", self.val_episodes).unwrap();
        writeln!(kv, "test_episodes = {}", self.test_episodes).unwrap();
        s
    }
}

/// Parses the key=value format. Every key is optional except `family`;
/// family-specific keys are rejected under the wrong family.
pub fn parse_config(text: &str) -> Result<MetaConfig> {
    let mut seen: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if seen.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
        seen.push((key, value));
    }

    let take = |key: &str| -> Option<String> {
        seen.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
    };
    let family_name = take("family")
        .ok_or_else(|| Error::Config("missing required key `family`".into()))?;
    let family = match family_name.as_str() {
        "blob" => FamilyConfig::Blob {
            dim: parse_num(take("dim"), "dim", 8)?,
            separation: parse_num(take("separation"), "separation", 2.0)?,
        },
        "ambiguous" => FamilyConfig::Ambiguous {
            signal_dims: parse_num(take("signal_dims"), "signal_dims", 4)?,
            spurious_dims: parse_num(take("spurious_dims"), "spurious_dims", 4)?,
        },
        "image" => FamilyConfig::Image {
            root: PathBuf::from(take("image_root").ok_or_else(|| {
                Error::Config("family image requires `image_root`".into())
            })?),
            size: parse_num(take("image_size"), "image_size", 28)?,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown family `{other}` (expected blob, ambiguous, or image)"
            )))
        }
    };

    let mut cfg = MetaConfig::defaults(family);
    let family_keys: &[&str] = match cfg.family {
        FamilyConfig::Blob { .. } => &["dim", "separation"],
        FamilyConfig::Ambiguous { .. } => &["signal_dims", "spurious_dims"],
        FamilyConfig::Image { .. } => &["image_root", "image_size"],
    };

    for (key, value) in &seen {
        match key.as_str() {
            "family" => {}
            k if family_keys.contains(&k) => {}
            "dim" | "separation" | "signal_dims" | "spurious_dims" | "image_root"
            | "image_size" => {
                return Err(Error::Config(format!(
                    "key `{key}` does not apply to family `{family_name}`"
                )));
            }
            "seed" => cfg.seed = parse_val(value, key)?,
            "train_classes" => cfg.train_classes = parse_val(value, key)?,
            "val_classes" => cfg.val_classes = parse_val(value, key)?,
            "test_classes" => cfg.test_classes = parse_val(value, key)?,
            "n_way" => cfg.n_way = parse_val(value, key)?,
            "k_shot" => cfg.k_shot = parse_val(value, key)?,
            "n_target" => cfg.n_target = parse_val(value, key)?,
            "hidden" => {
                cfg.hidden = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::Config(format!("hidden: expected comma-separated widths, got `{value}`"))
                    })?;
            }
            "embed_dim" => cfg.embed_dim = parse_val(value, key)?,
            "relation_hidden" => cfg.relation_hidden = parse_val(value, key)?,
            "critic_channels" => cfg.critic_channels = parse_val(value, key)?,
            "critic_fc_width" => cfg.critic_fc_width = parse_val(value, key)?,
            "critic_min_len" => cfg.critic_min_len = parse_val(value, key)?,
            "support_steps" => cfg.support_steps = parse_val(value, key)?,
            "target_steps" => cfg.target_steps = parse_val(value, key)?,
            "support_lr" => cfg.support_lr = parse_val(value, key)?,
            "target_lr" => cfg.target_lr = parse_val(value, key)?,
            "outer_lr" => cfg.outer_lr = parse_val(value, key)?,
            "meta_batch" => cfg.meta_batch = parse_val(value, key)?,
            "outer_opt" => {
                cfg.outer_opt = match value.as_str() {
                    "adam" => OuterOpt::Adam,
                    "sgd" => OuterOpt::Sgd,
                    other => {
                        return Err(Error::Config(format!(
                            "outer_opt: expected adam or sgd, got `{other}`"
                        )))
                    }
                }
            }
            "use_predictions" => cfg.flags.use_predictions = parse_bool(value, key)?,
            "use_params" => cfg.flags.use_params = parse_bool(value, key)?,
            "use_task_embedding" => cfg.flags.use_task_embedding = parse_bool(value, key)?,
            "learnable_inner_lr" => cfg.learnable_inner_lr = parse_bool(value, key)?,
            "outer_steps" => cfg.outer_steps = parse_val(value, key)?,
            "eval_interval" => cfg.eval_interval = parse_val(value, key)?,
            "val_episodes" => cfg.val_episodes = parse_val(value, key)?,
            "test_episodes" => cfg.test_episodes = parse_val(value, key)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_val<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_num<T: std::str::FromStr>(value: Option<String>, key: &str, default: T) -> Result<T> {
    match value {
        None => Ok(default),
        Some(v) => parse_val(&v, key),
    }
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key `{key}`: expected true or false, got `{other}`"
        ))),
    }
}

/// Stream tags for deriving independent sub-seeds from the root seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    ThetaInit,
    CriticInit,
    EmbedInit,
    TrainPool,
    ValPool,
    TestPool,
    TrainEpisode,
    ValEpisode,
    TestEpisode,
    InspectEpisode,
}

/// SplitMix64-style mixing of (base, stream, index) into one seed; fixed
/// for the life of the checkpoint format.
pub fn derive_seed(base: u64, stream: SeedStream, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> MetaConfig {
        MetaConfig::defaults(FamilyConfig::Blob {
            dim: 8,
            separation: 5.0,
        })
    }

    #[test]
    fn defaults_validate() {
        base().validate().unwrap();
        MetaConfig::defaults(FamilyConfig::Ambiguous {
            signal_dims: 6,
            spurious_dims: 4,
        })
        .validate()
        .unwrap();
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = base();
        cfg.seed = 31;
        cfg.k_shot = 5;
        cfg.support_lr = 0.05;
        cfg.outer_opt = OuterOpt::Sgd;
        cfg.flags.use_params = true;
        cfg.learnable_inner_lr = true;
        let parsed = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_text(), cfg.to_text());
    }

    #[test]
    fn ambiguous_and_image_round_trip() {
        let mut cfg = MetaConfig::defaults(FamilyConfig::Ambiguous {
            signal_dims: 7,
            spurious_dims: 3,
        });
        cfg.n_target = 33;
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);

        let cfg = MetaConfig::defaults(FamilyConfig::Image {
            root: PathBuf::from("/data/shapes"),
            size: 20,
        });
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "# a comment\n\nfamily = blob\ndim = 4\nseparation = 2.5\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(
            cfg.family,
            FamilyConfig::Blob {
                dim: 4,
                separation: 2.5
            }
        );
        assert_eq!(cfg.n_way, 5);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = parse_config("family = blob\ndim = 4\nseparation = 1\nwat = 3\n").unwrap_err();
        assert!(err.to_string().contains("wat"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse_config("family = blob\ndim = 4\ndim = 5\nseparation = 1\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn family_is_required_and_checked() {
        assert!(parse_config("n_way = 5\n").is_err());
        assert!(parse_config("family = waves\n").is_err());
    }

    #[test]
    fn keys_from_another_family_are_rejected() {
        let err =
            parse_config("family = blob\ndim = 4\nseparation = 1\nsignal_dims = 2\n").unwrap_err();
        assert!(err.to_string().contains("does not apply"), "{err}");
    }

    #[test]
    fn malformed_values_name_the_key() {
        let err = parse_config("family = blob\ndim = four\nseparation = 1\n").unwrap_err();
        assert!(err.to_string().contains("dim"), "{err}");
        let err =
            parse_config("family = blob\ndim = 4\nseparation = 1\nuse_params = yep\n").unwrap_err();
        assert!(err.to_string().contains("use_params"), "{err}");
    }

    #[test]
    fn hidden_widths_parse_as_a_comma_list() {
        let text = "family = blob\ndim = 4\nseparation = 1\nhidden = 12, 7\n";
        assert_eq!(parse_config(text).unwrap().hidden, vec![12, 7]);
    }

    #[test]
    fn validation_rejects_inconsistent_settings() {
        let mut cfg = base();
        cfg.n_way = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.train_classes = 3; // fewer classes than n_way
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.support_steps = 1;
        cfg.support_lr = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.target_steps = 1;
        cfg.target_lr = -0.1;
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.flags = CriticFeatureFlags {
            use_predictions: false,
            use_params: false,
            use_task_embedding: false,
        };
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.family = FamilyConfig::Blob {
            dim: 0,
            separation: 1.0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn image_family_skips_class_count_checks() {
        let mut cfg = MetaConfig::defaults(FamilyConfig::Image {
            root: PathBuf::from("/data"),
            size: 8,
        });
        cfg.train_classes = 1; // ignored: the directory decides
        cfg.validate().unwrap();
    }

    #[test]
    fn derived_seeds_separate_streams_and_indices() {
        let s = |stream, i| derive_seed(7, stream, i);
        assert_eq!(
            s(SeedStream::TrainEpisode, 0),
            s(SeedStream::TrainEpisode, 0)
        );
        assert_ne!(
            s(SeedStream::TrainEpisode, 0),
            s(SeedStream::TrainEpisode, 1)
        );
        assert_ne!(s(SeedStream::TrainEpisode, 0), s(SeedStream::ValEpisode, 0));
        assert_ne!(
            derive_seed(7, SeedStream::ThetaInit, 0),
            derive_seed(8, SeedStream::ThetaInit, 0)
        );
    }

    #[test]
    fn family_dim_is_the_model_input_width() {
        assert_eq!(base().family.dim(), 8);
        assert_eq!(
            FamilyConfig::Ambiguous {
                signal_dims: 6,
                spurious_dims: 4
            }
            .dim(),
            10
        );
        assert_eq!(
            FamilyConfig::Image {
                root: PathBuf::from("/x"),
                size: 20
            }
            .dim(),
            400
        );
    }
}
