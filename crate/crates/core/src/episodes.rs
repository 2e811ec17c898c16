//! Episode construction: N-way K-shot tasks drawn from class pools.
//!
//! A pool maps class ids to generators (synthetic families) or stored
//! feature vectors (ingested images) and carries a split tag. Episodes
//! relabel their classes 0..n_way-1 and keep target labels behind a
//! dedicated accessor: inner-loop code never needs to touch them.
//!
//! Sampling is a pure function of (pool, sizes, seed). One seeded generator
//! drives, in fixed order: class selection, per-episode family context,
//! then per-class support and target draws.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── splits ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "meta-train" => Ok(Split::MetaTrain),
            "meta-val" => Ok(Split::MetaVal),
            "meta-test" => Ok(Split::MetaTest),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected meta-train, meta-val, or meta-test)"
            ))),
        }
    }
}

// ── ambiguous-family shape constants ──
// Signal class means and per-episode spurious patterns are drawn uniformly
// in [-SEP, SEP]^d. The spurious channel is low-noise and therefore the
// easier feature to latch onto from one support shot, which is the trap:
// its class assignment is scrambled on the target side.
const SIGNAL_SEP: f64 = 3.0;
const SIGNAL_NOISE: f64 = 1.0;
const SPURIOUS_SEP: f64 = 3.0;
const SPURIOUS_NOISE: f64 = 0.25;

#[derive(Debug, Clone)]
struct IngestedClass {
    name: String,
    paths: Vec<PathBuf>,
    examples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum PoolKind {
    Blob {
        dim: usize,
        means: Vec<Vec<f64>>,
    },
    Ambiguous {
        d_signal: usize,
        d_spurious: usize,
        signal_means: Vec<Vec<f64>>,
    },
    Ingested {
        dim: usize,
        classes: Vec<IngestedClass>,
    },
}

/// A set of classes sharing a split tag. Class ids are `id_base + local
/// index`; disjointness across the three splits is enforced by [`PoolSet`].
#[derive(Debug, Clone)]
pub struct ClassPool {
    kind: PoolKind,
    split: Split,
    id_base: u64,
}

impl ClassPool {
    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_id_base(mut self, id_base: u64) -> Self {
        self.id_base = id_base;
        self
    }

    pub fn n_classes(&self) -> usize {
        match &self.kind {
            PoolKind::Blob { means, .. } => means.len(),
            PoolKind::Ambiguous { signal_means, .. } => signal_means.len(),
            PoolKind::Ingested { classes, .. } => classes.len(),
        }
    }

    /// Feature dimension of every example vector.
    pub fn dim(&self) -> usize {
        match &self.kind {
            PoolKind::Blob { dim, .. } => *dim,
            PoolKind::Ambiguous {
                d_signal,
                d_spurious,
                ..
            } => d_signal + d_spurious,
            PoolKind::Ingested { dim, .. } => *dim,
        }
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_classes() as u64).map(move |i| self.id_base + i)
    }

    /// Plain-text index: one line per ingested example or per synthetic
    /// class generator. Columns are tab-separated: split, class id, source.
    pub fn manifest(&self) -> String {
        let mut out = String::from("# pool manifest v1\n# split\tclass_id\tsource\n");
        let split = self.split.as_str();
        match &self.kind {
            PoolKind::Blob { means, .. } => {
                for (i, mean) in means.iter().enumerate() {
                    writeln!(out, "{split}\t{}\tblob mean={mean:?} var=1", self.id_base + i as u64)
                        .expect("write to string");
                }
            }
            PoolKind::Ambiguous {
                d_spurious,
                signal_means,
                ..
            } => {
                for (i, mean) in signal_means.iter().enumerate() {
                    writeln!(
                        out,
                        "{split}\t{}\tambiguous signal_mean={mean:?} d_spurious={d_spurious}",
                        self.id_base + i as u64
                    )
                    .expect("write to string");
                }
            }
            PoolKind::Ingested { classes, .. } => {
                for (i, class) in classes.iter().enumerate() {
                    for path in &class.paths {
                        writeln!(
                            out,
                            "{split}\t{}\t{}",
                            self.id_base + i as u64,
                            path.display()
                        )
                        .expect("write to string");
                    }
                }
            }
        }
        out
    }
}

/// Isotropic unit-variance Gaussian classes with means drawn uniformly in
/// `[-separation, separation]^d`.
pub fn gen_blob_pool(n_classes: usize, d: usize, separation: f64, seed: u64) -> Result<ClassPool> {
    if n_classes == 0 || d == 0 {
        return Err(Error::contract(format!(
            "blob pool needs classes and dims, got {n_classes} classes, d={d}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::contract(format!("blob separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..n_classes)
        .map(|_| (0..d).map(|_| uniform(&mut rng, separation)).collect())
        .collect();
    Ok(ClassPool {
        kind: PoolKind::Blob { dim: d, means },
        split: Split::MetaTrain,
        id_base: 0,
    })
}

/// The transduction-sensitive family. Each class has a stable mean over the
/// first `d_signal` dims. The remaining `d_spurious` dims get a fresh
/// pattern per episode that tracks class labels perfectly in the support
/// set but is permuted across classes in the target set: a learner that
/// trusts it is wrong on targets, while the target inputs themselves reveal
/// the permutation.
pub fn gen_ambiguous_pool(
    n_classes: usize,
    d_signal: usize,
    d_spurious: usize,
    seed: u64,
) -> Result<ClassPool> {
    if d_spurious == 0 {
        return Err(Error::contract(
            "ambiguous pool: d_spurious must be positive, the family is undefined without it",
        ));
    }
    if n_classes == 0 || d_signal == 0 {
        return Err(Error::contract(format!(
            "ambiguous pool needs classes and signal dims, got {n_classes} classes, d_signal={d_signal}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal_means = (0..n_classes)
        .map(|_| (0..d_signal).map(|_| uniform(&mut rng, SIGNAL_SEP)).collect())
        .collect();
    Ok(ClassPool {
        kind: PoolKind::Ambiguous {
            d_signal,
            d_spurious,
            signal_means,
        },
        split: Split::MetaTrain,
        id_base: 0,
    })
}

/// Ingests `root/<class_name>/<image>.png` directories: decode, grayscale,
/// resize to `size`×`size`, scale to [0, 1], flatten. Classes and files are
/// ordered by name so the pool is reproducible.
pub fn load_image_pool(root: &Path, split: Split, size: usize) -> Result<ClassPool> {
    if size == 0 {
        return Err(Error::contract("image size must be positive"));
    }
    let mut class_dirs: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let path = entry?.path();
        if !path.is_dir() {
            return Err(Error::Ingest {
                path: path.display().to_string(),
                what: "expected a class directory".into(),
            });
        }
        class_dirs.push(path);
    }
    if class_dirs.is_empty() {
        return Err(Error::Capacity(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    class_dirs.sort();

    let mut classes = Vec::with_capacity(class_dirs.len());
    for dir in class_dirs {
        let mut paths: Vec<PathBuf> = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let is_png = path.is_file()
                && path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                return Err(Error::Ingest {
                    path: path.display().to_string(),
                    what: "not a png image".into(),
                });
            }
            paths.push(path);
        }
        if paths.is_empty() {
            return Err(Error::Capacity(format!(
                "class directory {} holds no images",
                dir.display()
            )));
        }
        paths.sort();
        let mut examples = Vec::with_capacity(paths.len());
        for path in &paths {
            let img = image::open(path).map_err(|e| Error::Ingest {
                path: path.display().to_string(),
                what: e.to_string(),
            })?;
            let gray = image::imageops::resize(
                &img.to_luma8(),
                size as u32,
                size as u32,
                FilterType::Triangle,
            );
            examples.push(gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect());
        }
        classes.push(IngestedClass {
            name: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            paths,
            examples,
        });
    }
    Ok(ClassPool {
        kind: PoolKind::Ingested {
            dim: size * size,
            classes,
        },
        split,
        id_base: 0,
    })
}

// ── episodes ──

/// One few-shot task. Support data drive the first adaptation phase; target
/// labels are reachable only through [`target_labels`](Episode::target_labels),
/// which belongs to the outer loss and evaluation.
#[derive(Debug, Clone)]
pub struct Episode {
    x_s: Tensor,
    y_s: Vec<usize>,
    x_t: Tensor,
    y_t: Vec<usize>,
    class_ids: Vec<u64>,
    split: Split,
}

impl Episode {
    pub fn support_inputs(&self) -> &Tensor {
        &self.x_s
    }

    pub fn support_labels(&self) -> &[usize] {
        &self.y_s
    }

    pub fn target_inputs(&self) -> &Tensor {
        &self.x_t
    }

    /// Held-out labels: used by the outer loss and by evaluation, never by
    /// the inner loop.
    pub fn target_labels(&self) -> &[usize] {
        &self.y_t
    }

    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    /// Global ids of the selected classes, indexed by episode label.
    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Assembles an episode from raw parts. Labels must lie in
    /// `0..class_ids.len()` and row counts must match the label vectors.
    pub fn from_parts(
        x_s: Tensor,
        y_s: Vec<usize>,
        x_t: Tensor,
        y_t: Vec<usize>,
        class_ids: Vec<u64>,
        split: Split,
    ) -> Result<Episode> {
        let n_way = class_ids.len();
        if n_way == 0 {
            return Err(Error::contract("from_parts: no classes"));
        }
        let (ns, ds) = x_s.dim2()?;
        let (nt, dt) = x_t.dim2()?;
        if ds != dt {
            return Err(Error::contract(format!(
                "from_parts: support dim {ds} vs target dim {dt}"
            )));
        }
        if ns != y_s.len() || nt != y_t.len() {
            return Err(Error::contract("from_parts: row/label count mismatch"));
        }
        if ns == 0 || nt == 0 {
            return Err(Error::contract("from_parts: empty support or target set"));
        }
        if y_s.iter().chain(&y_t).any(|&y| y >= n_way) {
            return Err(Error::contract(format!(
                "from_parts: label outside 0..{n_way}"
            )));
        }
        Ok(Episode {
            x_s,
            y_s,
            x_t,
            y_t,
            class_ids,
            split,
        })
    }
}

/// Draws one episode. Classes are sampled without replacement, examples
/// within a class without replacement, and target examples are spread as
/// evenly as possible (earlier episode labels get the remainder).
pub fn sample_episode(
    pool: &ClassPool,
    n_way: usize,
    k_shot: usize,
    n_target: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_target == 0 {
        return Err(Error::contract(format!(
            "episode sizes must be positive: n_way={n_way}, k_shot={k_shot}, n_target={n_target}"
        )));
    }
    if pool.n_classes() < n_way {
        return Err(Error::Capacity(format!(
            "pool has {} classes, episode needs {n_way}",
            pool.n_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample_distinct(&mut rng, pool.n_classes(), n_way);
    let base = n_target / n_way;
    let target_counts: Vec<usize> = (0..n_way).map(|c| base + usize::from(c < n_target % n_way)).collect();

    let d = pool.dim();
    let mut x_s = Vec::with_capacity(n_way * k_shot * d);
    let mut y_s = Vec::with_capacity(n_way * k_shot);
    let mut x_t = Vec::with_capacity(n_target * d);
    let mut y_t = Vec::with_capacity(n_target);

    match &pool.kind {
        PoolKind::Blob { means, .. } => {
            for (label, &class) in picked.iter().enumerate() {
                let mean = &means[class];
                for _ in 0..k_shot {
                    x_s.extend(mean.iter().map(|m| m + normal(&mut rng)));
                    y_s.push(label);
                }
                for _ in 0..target_counts[label] {
                    x_t.extend(mean.iter().map(|m| m + normal(&mut rng)));
                    y_t.push(label);
                }
            }
        }
        PoolKind::Ambiguous {
            d_spurious,
            signal_means,
            ..
        } => {
            // per-episode context: one spurious pattern per selected class,
            // and the permutation applied to them on the target side
            let patterns: Vec<Vec<f64>> = (0..n_way)
                .map(|_| (0..*d_spurious).map(|_| uniform(&mut rng, SPURIOUS_SEP)).collect())
                .collect();
            let perm = sample_distinct(&mut rng, n_way, n_way);
            for (label, &class) in picked.iter().enumerate() {
                let mean = &signal_means[class];
                for _ in 0..k_shot {
                    x_s.extend(mean.iter().map(|m| m + SIGNAL_NOISE * normal(&mut rng)));
                    x_s.extend(
                        patterns[label]
                            .iter()
                            .map(|p| p + SPURIOUS_NOISE * normal(&mut rng)),
                    );
                    y_s.push(label);
                }
                for _ in 0..target_counts[label] {
                    x_t.extend(mean.iter().map(|m| m + SIGNAL_NOISE * normal(&mut rng)));
                    x_t.extend(
                        patterns[perm[label]]
                            .iter()
                            .map(|p| p + SPURIOUS_NOISE * normal(&mut rng)),
                    );
                    y_t.push(label);
                }
            }
        }
        PoolKind::Ingested { classes, .. } => {
            for (label, &class) in picked.iter().enumerate() {
                let need = k_shot + target_counts[label];
                let have = classes[class].examples.len();
                if have < need {
                    return Err(Error::Capacity(format!(
                        "class `{}` has {have} examples, episode needs {need}",
                        classes[class].name
                    )));
                }
                let chosen = sample_distinct(&mut rng, have, need);
                for (j, &idx) in chosen.iter().enumerate() {
                    if j < k_shot {
                        x_s.extend_from_slice(&classes[class].examples[idx]);
                        y_s.push(label);
                    } else {
                        x_t.extend_from_slice(&classes[class].examples[idx]);
                        y_t.push(label);
                    }
                }
            }
        }
    }

    Ok(Episode {
        x_s: Tensor::from_vec(&[n_way * k_shot, d], x_s)?,
        y_s,
        x_t: Tensor::from_vec(&[n_target, d], x_t)?,
        y_t,
        class_ids: picked.iter().map(|&c| pool.id_base + c as u64).collect(),
        split: pool.split,
    })
}

/// The three disjoint splits a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct PoolSet {
    train: ClassPool,
    val: ClassPool,
    test: ClassPool,
}

impl PoolSet {
    pub fn new(train: ClassPool, val: ClassPool, test: ClassPool) -> Result<PoolSet> {
        let tags = [train.split(), val.split(), test.split()];
        if tags != [Split::MetaTrain, Split::MetaVal, Split::MetaTest] {
            return Err(Error::contract(format!(
                "pool set split tags {:?} out of order",
                tags.map(|s| s.as_str())
            )));
        }
        let ranges = [
            (train.id_base, train.n_classes() as u64),
            (val.id_base, val.n_classes() as u64),
            (test.id_base, test.n_classes() as u64),
        ];
        for (i, (a_base, a_len)) in ranges.iter().enumerate() {
            for (b_base, b_len) in ranges.iter().skip(i + 1) {
                if a_base < &(b_base + b_len) && b_base < &(a_base + a_len) {
                    return Err(Error::contract(
                        "pool class id ranges overlap across splits",
                    ));
                }
            }
        }
        Ok(PoolSet { train, val, test })
    }

    pub fn pool(&self, split: Split) -> &ClassPool {
        match split {
            Split::MetaTrain => &self.train,
            Split::MetaVal => &self.val,
            Split::MetaTest => &self.test,
        }
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn manifest(&self) -> String {
        let mut out = self.train.manifest();
        // drop the duplicate headers of the later splits
        for pool in [&self.val, &self.test] {
            out.push_str(pool.manifest().splitn(3, '\n').nth(2).unwrap_or(""));
        }
        out
    }
}

// ── sampling helpers ──

fn uniform(rng: &mut ChaCha8Rng, half_range: f64) -> f64 {
    if half_range == 0.0 {
        return 0.0;
    }
    rng.random_range(-half_range..half_range)
}

/// Standard normal via Box-Muller; two uniforms per value, fixed order.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
}

/// First `take` entries of a seeded partial Fisher-Yates shuffle of `0..n`.
fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, take: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}
