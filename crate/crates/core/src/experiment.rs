//! Experiment plumbing behind the command-line runner: flat config files,
//! training arms, checkpoint and ledger formats, and the five commands.
//!
//! Layout under the output root:
//!
//! ```text
//! data/train.csv  data/test.csv
//! runs/<arm>/seed-<n>/checkpoint.txt  ledger.jsonl  metrics.json  analysis/
//! comparison.txt  comparison.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{child_class_index, generate_synthetic, load_csv, Dataset, SyntheticSpec};
use crate::encoder::{encode_forward, train_observed, EncoderParams, IpTarget, Layer, PrototypeHead, TrainConfig};
use crate::eval::{
    build_identification_split, build_verification_pairs, cross_role_similarity, export_heatmap,
    project_prototypes_2d, prototype_similarity, rank1_identification, verification_accuracy,
    write_projection_csv, AgeGap, HeatmapFormat, RoleFilter, SimilarityReport,
};
use crate::losses::{MarginKind, SampleWeights};
use crate::math::Matrix;
use crate::parallel::Execution;
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "INTERPROTO_OUT";
pub const DEFAULT_OUT: &str = "interproto-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Ip,
    IpFull,
    Reweight,
    MarginUp,
    Oversample,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Baseline,
        Arm::Ip,
        Arm::IpFull,
        Arm::Reweight,
        Arm::MarginUp,
        Arm::Oversample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Ip => "ip",
            Arm::IpFull => "ip_full",
            Arm::Reweight => "reweight",
            Arm::MarginUp => "margin_up",
            Arm::Oversample => "oversample",
        }
    }

    /// Training configuration for this arm at `seed`.
    pub fn train_config(self, cfg: &ExperimentConfig, seed: u64, child_ids: &[usize]) -> TrainConfig {
        let mut t = cfg.train.clone();
        t.seed = seed;
        t.apply_ip_to = IpTarget::Off;
        match self {
            Arm::Ip => t.apply_ip_to = IpTarget::ChildOnly,
            Arm::IpFull => t.apply_ip_to = IpTarget::AllIdentities,
            Arm::Reweight => {
                t.margin.sample_weights = Some(SampleWeights {
                    child: cfg.reweight_child_weight,
                    adult: 1.0,
                })
            }
            Arm::MarginUp => {
                t.margin.class_margins = child_ids.iter().map(|&c| (c, cfg.margin_up_child_margin)).collect()
            }
            Arm::Oversample => t.oversample_rho = Some(cfg.oversample_rho),
            Arm::Baseline => {}
        }
        if t.apply_ip_to == IpTarget::Off {
            t.margin.lambda_ip = 0.0;
        }
        t
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown arm `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `draw` is ignored; the training set is draw 0 and the test set draw 1.
    pub data: SyntheticSpec,
    /// `seed`, `apply_ip_to` and the per-arm knobs are set by [`Arm::train_config`].
    pub train: TrainConfig,
    pub reweight_child_weight: f64,
    pub margin_up_child_margin: f64,
    pub oversample_rho: f64,
    pub gaps: Vec<AgeGap>,
    pub pairs_per_gap: usize,
    pub rank1_gap: AgeGap,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            reweight_child_weight: 2.0,
            margin_up_child_margin: 0.6,
            oversample_rho: 0.25,
            gaps: vec![AgeGap::MoreThan(20), AgeGap::MoreThan(30)],
            pairs_per_gap: 250,
            rank1_gap: AgeGap::MoreThan(20),
            seeds: vec![0, 1, 2],
            out_dir: None,
        }
    }
}

/// Every key accepted in a config file, in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "data.n_identities",
    "data.child_fraction",
    "data.adult_per_identity",
    "data.child_per_identity",
    "data.input_dim",
    "data.child_collapse",
    "data.noise",
    "data.seed",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.decay_epochs",
    "train.decay_factor",
    "train.momentum",
    "train.weight_decay",
    "train.hidden_dims",
    "train.embedding_dim",
    "loss.kind",
    "loss.scale",
    "loss.margin",
    "loss.lambda_ip",
    "arm.reweight_child_weight",
    "arm.margin_up_child_margin",
    "arm.oversample_rho",
    "eval.gaps",
    "eval.pairs_per_gap",
    "eval.rank1_gap",
    "seeds",
    "out_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Shortest representation that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Config(format!("line {}: {}", i + 1, bare(&e)));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected `key = value`, found `{line}`"))))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(Error::Config(format!("duplicate key `{key}`"))));
            }
            cfg.set(key, value.trim()).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), bare(&e))))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.n_identities" => self.data.n_identities = parse_value(key, value)?,
            "data.child_fraction" => self.data.child_fraction = parse_value(key, value)?,
            "data.adult_per_identity" => self.data.adult_per_identity = parse_value(key, value)?,
            "data.child_per_identity" => self.data.child_per_identity = parse_value(key, value)?,
            "data.input_dim" => self.data.input_dim = parse_value(key, value)?,
            "data.child_collapse" => self.data.child_collapse = parse_value(key, value)?,
            "data.noise" => self.data.noise = parse_value(key, value)?,
            "data.seed" => self.data.seed = parse_value(key, value)?,
            "train.epochs" => self.train.epochs = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "train.decay_epochs" => self.train.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => self.train.decay_factor = parse_value(key, value)?,
            "train.momentum" => self.train.momentum = parse_value(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(key, value)?,
            "train.hidden_dims" => self.train.hidden_dims = parse_list(key, value)?,
            "train.embedding_dim" => self.train.embedding_dim = parse_value(key, value)?,
            "loss.kind" => self.train.margin.kind = value.parse::<MarginKind>()?,
            "loss.scale" => self.train.margin.scale = parse_value(key, value)?,
            "loss.margin" => self.train.margin.margin = parse_value(key, value)?,
            "loss.lambda_ip" => self.train.margin.lambda_ip = parse_value(key, value)?,
            "arm.reweight_child_weight" => self.reweight_child_weight = parse_value(key, value)?,
            "arm.margin_up_child_margin" => self.margin_up_child_margin = parse_value(key, value)?,
            "arm.oversample_rho" => self.oversample_rho = parse_value(key, value)?,
            "eval.gaps" => self.gaps = parse_list(key, value)?,
            "eval.pairs_per_gap" => self.pairs_per_gap = parse_value(key, value)?,
            "eval.rank1_gap" => self.rank1_gap = value.parse()?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.train.margin;
        match key {
            "data.n_identities" => self.data.n_identities.to_string(),
            "data.child_fraction" => float(self.data.child_fraction),
            "data.adult_per_identity" => self.data.adult_per_identity.to_string(),
            "data.child_per_identity" => self.data.child_per_identity.to_string(),
            "data.input_dim" => self.data.input_dim.to_string(),
            "data.child_collapse" => float(self.data.child_collapse),
            "data.noise" => float(self.data.noise),
            "data.seed" => self.data.seed.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.learning_rate" => float(self.train.learning_rate),
            "train.decay_epochs" => join(&self.train.decay_epochs),
            "train.decay_factor" => float(self.train.decay_factor),
            "train.momentum" => float(self.train.momentum),
            "train.weight_decay" => float(self.train.weight_decay),
            "train.hidden_dims" => join(&self.train.hidden_dims),
            "train.embedding_dim" => self.train.embedding_dim.to_string(),
            "loss.kind" => m.kind.to_string(),
            "loss.scale" => float(m.scale),
            "loss.margin" => float(m.margin),
            "loss.lambda_ip" => float(m.lambda_ip),
            "arm.reweight_child_weight" => float(self.reweight_child_weight),
            "arm.margin_up_child_margin" => float(self.margin_up_child_margin),
            "arm.oversample_rho" => float(self.oversample_rho),
            "eval.gaps" => join(&self.gaps),
            "eval.pairs_per_gap" => self.pairs_per_gap.to_string(),
            "eval.rank1_gap" => self.rank1_gap.to_string(),
            "seeds" => join(&self.seeds),
            "out_dir" => self
                .out_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => unreachable!("key registry covers {key}"),
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(bare(&e));
        self.data.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if !(self.reweight_child_weight > 0.0 && self.reweight_child_weight.is_finite()) {
            return Err(Error::Config("arm.reweight_child_weight must be positive".into()));
        }
        if !(self.oversample_rho > 0.0 && self.oversample_rho.is_finite()) {
            return Err(Error::Config("arm.oversample_rho must be positive".into()));
        }
        let mut up = self.train.margin.clone();
        up.margin = self.margin_up_child_margin;
        up.validate().map_err(cfg_err)?;
        if self.gaps.is_empty() {
            return Err(Error::Config("eval.gaps must list at least one gap".into()));
        }
        if self.pairs_per_gap == 0 {
            return Err(Error::Config("eval.pairs_per_gap must be >= 1".into()));
        }
        check_distinct_seeds(&self.seeds)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    fn digest_of(&self, prefixes: &[&str]) -> String {
        let text: String = CONFIG_KEYS
            .iter()
            .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect();
        sha256_hex(text.as_bytes())
    }

    /// Digest of everything that shapes a trained model.
    pub fn training_digest(&self) -> String {
        self.digest_of(&["data.", "train.", "loss.", "arm."])
    }

    /// Digest of every key except the seed list and output location.
    pub fn digest(&self) -> String {
        self.digest_of(&["data.", "train.", "loss.", "arm.", "eval."])
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            draw: 0,
            ..self.data.clone()
        }
    }

    pub fn test_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            draw: 1,
            ..self.data.clone()
        }
    }
}

/// Message of `e` without the `config:` prefix.
fn bare(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn check_distinct_seeds(seeds: &[u64]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in seeds {
        if !seen.insert(s) {
            return Err(Error::Config(format!("seed {s} listed twice")));
        }
    }
    Ok(())
}

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out_root: PathBuf,
    /// Seeds given on the command line, or the config's list.
    pub seeds: Vec<u64>,
    seeds_from_flags: bool,
}

impl Context {
    /// `--out` wins over the config's `out_dir`, which wins over the
    /// environment variable, which wins over [`DEFAULT_OUT`].
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, seed_flags: Vec<u64>) -> Result<Self> {
        let env_root = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        Context::with_env(config, out, seed_flags, env_root)
    }

    pub fn with_env(
        config: ExperimentConfig,
        out: Option<PathBuf>,
        seed_flags: Vec<u64>,
        env_root: Option<PathBuf>,
    ) -> Result<Self> {
        check_distinct_seeds(&seed_flags)?;
        let out_root = out
            .or_else(|| config.out_dir.clone())
            .or(env_root)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let seeds_from_flags = !seed_flags.is_empty();
        let seeds = if seeds_from_flags { seed_flags } else { config.seeds.clone() };
        Ok(Context {
            config,
            out_root,
            seeds,
            seeds_from_flags,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_root.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }

    pub fn test_path(&self) -> PathBuf {
        self.data_dir().join("test.csv")
    }

    pub fn run_dir(&self, arm: Arm, seed: u64) -> PathBuf {
        self.out_root.join("runs").join(arm.name()).join(format!("seed-{seed}"))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes to `<path>.tmp` and renames over `path` once complete.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv(BufReader::new(file)).map_err(|e| match e {
        Error::Io { .. } => e,
        other => Error::Config(format!("{}: {other}", path.display())),
    })
}

const CHECKPOINT_MAGIC: &str = "interproto-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arm: Arm,
    pub seed: u64,
    pub training_digest: String,
    pub params: EncoderParams,
    pub head: PrototypeHead,
}

fn push_row(out: &mut String, values: &[f64]) {
    let row: Vec<String> = values.iter().map(|&v| float(v)).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

fn push_matrix(out: &mut String, m: &Matrix) {
    for i in 0..m.rows() {
        push_row(out, m.row(i));
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        let (i, l) = self.inner.next().ok_or(Error::Parse {
            line: self.line + 1,
            message: "unexpected end of checkpoint".into(),
        })?;
        self.line = i + 1;
        Ok(l)
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}`")));
        }
        Ok(parts.collect())
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?;
        let values: Vec<f64> = if line.is_empty() {
            Vec::new()
        } else {
            line.split(' ')
                .map(|t| t.parse().map_err(|_| self.err(format!("`{t}` is not a number"))))
                .collect::<Result<_>>()?
        };
        if values.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", values.len())));
        }
        Ok(values)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.floats(cols)?);
        }
        Matrix::from_vec(rows, cols, data)
    }

    fn index(&self, token: Option<&&str>) -> Result<usize> {
        token
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err("expected an integer"))
    }
}

impl Checkpoint {
    /// Line-oriented text; floats use the shortest exact representation so
    /// the same run yields the same bytes on every platform.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        out.push_str(&format!("arm {}\nseed {}\ntraining_digest {}\n", self.arm, self.seed, self.training_digest));
        out.push_str(&format!("layers {}\n", self.params.layers().len()));
        for layer in self.params.layers() {
            let (rows, cols) = layer.weight.shape();
            let act = if layer.relu { "relu" } else { "linear" };
            out.push_str(&format!("layer {rows} {cols} {act}\n"));
            push_matrix(&mut out, &layer.weight);
            out.push_str("bias\n");
            push_row(&mut out, &layer.bias);
        }
        let (d, n) = self.head.weights.shape();
        out.push_str(&format!("prototypes {d} {n}\n"));
        push_matrix(&mut out, &self.head.weights);
        let ids: Vec<String> = self.head.child_ids.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("child_ids {}\n", ids.join(" ")).replace(" \n", "\n"));
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut it = Lines {
            inner: text.lines().enumerate(),
            line: 0,
        };
        if it.next_line()? != CHECKPOINT_MAGIC {
            return Err(it.err(format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let arm: Arm = it.tagged("arm")?.join(" ").parse()?;
        let seed_tok = it.tagged("seed")?;
        let seed = it.index(seed_tok.first())? as u64;
        let training_digest = it.tagged("training_digest")?.join(" ");
        let layers_tok = it.tagged("layers")?;
        let n_layers = it.index(layers_tok.first())?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let head = it.tagged("layer")?;
            let rows = it.index(head.first())?;
            let cols = it.index(head.get(1))?;
            let relu = match head.get(2) {
                Some(&"relu") => true,
                Some(&"linear") => false,
                _ => return Err(it.err("expected `relu` or `linear`")),
            };
            let weight = it.matrix(rows, cols)?;
            it.tagged("bias")?;
            let bias = it.floats(rows)?;
            layers.push(Layer { weight, bias, relu });
        }
        let params = EncoderParams::new(layers)?;
        let shape = it.tagged("prototypes")?;
        let d = it.index(shape.first())?;
        let n = it.index(shape.get(1))?;
        let weights = it.matrix(d, n)?;
        let ids = it.tagged("child_ids")?;
        let child_ids = ids
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| it.err(format!("`{t}` is not an identity"))))
            .collect::<Result<Vec<usize>>>()?;
        if it.next_line()? != "end" {
            return Err(it.err("expected `end`"));
        }
        if d != params.output_dim() {
            return Err(Error::Shape(format!(
                "prototype dimension {d} differs from embedding dimension {}",
                params.output_dim()
            )));
        }
        if let Some(bad) = child_ids.iter().find(|&&c| c >= n) {
            return Err(Error::Shape(format!("child identity {bad} out of range for {n} prototypes")));
        }
        Ok(Checkpoint {
            arm,
            seed,
            training_digest,
            params,
            head: PrototypeHead { weights, child_ids },
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub n_identities: usize,
    pub n_child: usize,
    pub train_samples: usize,
    pub train_child_samples: usize,
    pub test_samples: usize,
    pub test_child_samples: usize,
}

impl fmt::Display for GenDataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "identities {}, child identities {}, train samples {} ({} child), test samples {} ({} child)",
            self.n_identities,
            self.n_child,
            self.train_samples,
            self.train_child_samples,
            self.test_samples,
            self.test_child_samples
        )
    }
}

/// Writes `data/train.csv` and `data/test.csv`. A single `--seed` replaces
/// the config's data seed.
pub fn cmd_gen_data(ctx: &Context) -> Result<GenDataSummary> {
    let mut cfg = ctx.config.clone();
    if ctx.seeds_from_flags {
        match ctx.seeds[..] {
            [s] => cfg.data.seed = s,
            _ => return Err(Error::InvalidArgument("gen-data takes at most one --seed".into())),
        }
    }
    let train = generate_synthetic(&cfg.train_spec())?;
    let test = generate_synthetic(&cfg.test_spec())?;
    write_atomic(&ctx.train_path(), &train.to_csv_bytes()?)?;
    write_atomic(&ctx.test_path(), &test.to_csv_bytes()?)?;
    Ok(GenDataSummary {
        n_identities: train.n_identities(),
        n_child: child_class_index(&train).len(),
        train_samples: train.len(),
        train_child_samples: train.child_count(),
        test_samples: test.len(),
        test_child_samples: test.child_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arm: Arm,
    pub seed: u64,
    pub run_id: String,
    pub final_total_loss: f64,
    pub child_mean_abs_cos: Option<f64>,
    pub run_dir: PathBuf,
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn json_line(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string(value).expect("json value serialises");
    s.push('\n');
    s
}

fn tagged_record<T: Serialize>(record: &str, value: &T) -> serde_json::Value {
    let mut v = serde_json::to_value(value).expect("record serialises");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("record".into(), record.into());
    }
    v
}

fn train_one(ctx: &Context, arm: Arm, seed: u64, dataset: &Dataset) -> Result<TrainSummary> {
    let child_ids = child_class_index(dataset);
    let tcfg = arm.train_config(&ctx.config, seed, &child_ids);
    let dir = ctx.run_dir(arm, seed);
    create_dir(&dir)?;
    let ledger_path = dir.join("ledger.jsonl");
    let ledger_tmp = tmp_path(&ledger_path);
    let mut ledger = fs::File::create(&ledger_tmp).map_err(|e| Error::io(&ledger_tmp, e))?;
    let header = serde_json::json!({
        "record": "header",
        "timestamp": unix_time(),
        "arm": arm.name(),
        "seed": seed,
        "training_digest": ctx.config.training_digest(),
        "train_config_digest": tcfg.digest(),
        "train_config": tcfg,
    });
    ledger
        .write_all(json_line(&header).as_bytes())
        .map_err(|e| Error::io(&ledger_tmp, e))?;

    let mut write_err = None;
    let outcome = train_observed(dataset, &tcfg, |rec| {
        if write_err.is_none() {
            let line = json_line(&tagged_record("epoch", rec));
            if let Err(e) = ledger.write_all(line.as_bytes()).and_then(|_| ledger.flush()) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&ledger_tmp, e));
    }
    let outcome = outcome.map_err(|e| Error::Precondition(format!("arm {arm} seed {seed}: {e}")))?;
    let mut fin = tagged_record("final", &outcome.ledger.final_metrics);
    fin["run_id"] = outcome.ledger.run_id.clone().into();
    ledger
        .write_all(json_line(&fin).as_bytes())
        .map_err(|e| Error::io(&ledger_tmp, e))?;
    drop(ledger);

    let checkpoint = Checkpoint {
        arm,
        seed,
        training_digest: ctx.config.training_digest(),
        params: outcome.params,
        head: outcome.head,
    };
    write_atomic(&dir.join("checkpoint.txt"), checkpoint.to_text().as_bytes())?;
    fs::rename(&ledger_tmp, &ledger_path).map_err(|e| Error::io(&ledger_path, e))?;
    Ok(TrainSummary {
        arm,
        seed,
        run_id: outcome.ledger.run_id,
        final_total_loss: outcome.ledger.final_metrics.total_loss,
        child_mean_abs_cos: outcome.ledger.final_metrics.child_mean_abs_cos,
        run_dir: dir,
    })
}

/// Trains `arm` once per seed; seeds run concurrently, each in its own directory.
pub fn cmd_train(ctx: &Context, arm: Arm, data: Option<&Path>) -> Result<Vec<TrainSummary>> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| ctx.train_path());
    let dataset = load_dataset(&path)?;
    Execution::default()
        .map(ctx.seeds.clone(), |seed| train_one(ctx, arm, seed, &dataset))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub arm: Arm,
    pub seed: u64,
    pub experiment_digest: String,
    pub training_digest: String,
    pub pairs_per_gap: usize,
    /// Keyed by gap (`"20"`, `"30"`, `"none"`).
    pub verification: BTreeMap<String, f64>,
    pub verification_threshold: BTreeMap<String, f64>,
    pub rank1_gap: String,
    pub rank1: f64,
    pub rank1_probes: usize,
    pub child_mean_abs_cos: Option<f64>,
}

/// Embeds `dataset` and runs both protocols. Pair and split sampling use `seed`.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    check_compatible(checkpoint, dataset)?;
    let (emb, _) = encode_forward(&checkpoint.params, &dataset.feature_matrix())?;
    let mut verification = BTreeMap::new();
    let mut verification_threshold = BTreeMap::new();
    for &gap in &cfg.gaps {
        let pairs = build_verification_pairs(dataset, gap, cfg.pairs_per_gap, seed)?;
        let report = verification_accuracy(&emb, &pairs)?;
        verification.insert(gap.to_string(), report.accuracy);
        verification_threshold.insert(gap.to_string(), report.threshold);
    }
    let split = build_identification_split(dataset, cfg.rank1_gap, seed)?;
    let rank1 = rank1_identification(&emb, &split)?;
    Ok(RunMetrics {
        arm: checkpoint.arm,
        seed: checkpoint.seed,
        experiment_digest: cfg.digest(),
        training_digest: checkpoint.training_digest.clone(),
        pairs_per_gap: cfg.pairs_per_gap,
        verification,
        verification_threshold,
        rank1_gap: cfg.rank1_gap.to_string(),
        rank1: rank1.accuracy,
        rank1_probes: split.probes.len(),
        child_mean_abs_cos: checkpoint.head.child_mean_abs_cos()?,
    })
}

fn check_compatible(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<()> {
    if checkpoint.params.input_dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            checkpoint.params.input_dim(),
            dataset.dim()
        )));
    }
    if checkpoint.head.weights.cols() != dataset.n_identities() {
        return Err(Error::Shape(format!(
            "checkpoint has {} prototypes, dataset has {} identities",
            checkpoint.head.weights.cols(),
            dataset.n_identities()
        )));
    }
    Ok(())
}

fn load_run(ctx: &Context, arm: Arm, seed: u64) -> Result<Checkpoint> {
    let path = ctx.run_dir(arm, seed).join("checkpoint.txt");
    let checkpoint = Checkpoint::load(&path)?;
    if checkpoint.training_digest != ctx.config.training_digest() {
        return Err(Error::Config(format!(
            "{} was trained under a different config (digest {}, current {})",
            path.display(),
            checkpoint.training_digest,
            ctx.config.training_digest()
        )));
    }
    Ok(checkpoint)
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serialises");
    bytes.push(b'\n');
    bytes
}

/// Writes `metrics.json` next to each seed's checkpoint.
pub fn cmd_eval(ctx: &Context, arm: Arm, data: Option<&Path>) -> Result<Vec<RunMetrics>> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| ctx.test_path());
    let dataset = load_dataset(&path)?;
    ctx.seeds
        .iter()
        .map(|&seed| {
            let checkpoint = load_run(ctx, arm, seed)?;
            let metrics = evaluate(&checkpoint, &dataset, &ctx.config, seed)?;
            write_atomic(&ctx.run_dir(arm, seed).join("metrics.json"), &pretty_json(&metrics))?;
            Ok(metrics)
        })
        .collect()
}

/// Files written into `analysis/` by [`cmd_analyze`].
pub const ANALYSIS_FILES: &[&str] = &[
    "child_adult.csv",
    "child_adult.pgm",
    "child_child.csv",
    "child_child.pgm",
    "projection.csv",
    "prototype_gram.csv",
    "prototype_gram.pgm",
    "summary.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub arm: Arm,
    pub seed: u64,
    pub training_digest: String,
    pub child_identities: Vec<usize>,
    pub child_prototype_mean_abs_cos: f64,
    pub child_intra_mean: f64,
    pub child_inter_mean: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn analyze(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<(BTreeMap<&'static str, Vec<u8>>, AnalysisSummary)> {
    check_compatible(checkpoint, dataset)?;
    let (emb, _) = encode_forward(&checkpoint.params, &dataset.feature_matrix())?;
    let child_ids = child_class_index(dataset);
    let child = SimilarityReport::build(&emb, &checkpoint.head.weights, dataset, RoleFilter::Child)?;
    let child_adult = cross_role_similarity(&emb, dataset, RoleFilter::Child, RoleFilter::Adult)?;
    let gram = prototype_similarity(&checkpoint.head, &child_ids)?;
    let points = project_prototypes_2d(&checkpoint.head, &child_ids)?;

    let mut files = BTreeMap::new();
    let rendered = child.rendered();
    files.insert("child_child.csv", export_heatmap(&rendered, HeatmapFormat::Csv)?);
    files.insert("child_child.pgm", export_heatmap(&rendered, HeatmapFormat::Pgm)?);
    files.insert("child_adult.csv", export_heatmap(&child_adult.matrix, HeatmapFormat::Csv)?);
    files.insert("child_adult.pgm", export_heatmap(&child_adult.matrix, HeatmapFormat::Pgm)?);
    files.insert("prototype_gram.csv", export_heatmap(&gram.matrix, HeatmapFormat::Csv)?);
    files.insert("prototype_gram.pgm", export_heatmap(&gram.matrix, HeatmapFormat::Pgm)?);
    let mut projection = Vec::new();
    write_projection_csv(&points, &mut projection).expect("writing to memory");
    files.insert("projection.csv", projection);

    let k = child.identities.len();
    let off_diag: Vec<f64> = (0..k)
        .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| child.inter[(a, b)])
        .collect();
    let summary = AnalysisSummary {
        arm: checkpoint.arm,
        seed: checkpoint.seed,
        training_digest: checkpoint.training_digest.clone(),
        child_identities: child.identities.clone(),
        child_prototype_mean_abs_cos: gram.mean_abs_off_diagonal,
        child_intra_mean: mean(&child.intra),
        child_inter_mean: mean(&off_diag),
    };
    files.insert("summary.json", pretty_json(&summary));
    debug_assert!(files.keys().copied().eq(ANALYSIS_FILES.iter().copied()));
    Ok((files, summary))
}

/// Writes heatmaps, the projection and a summary into each run's `analysis/`.
pub fn cmd_analyze(ctx: &Context, arm: Arm, data: Option<&Path>) -> Result<Vec<AnalysisSummary>> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| ctx.test_path());
    let dataset = load_dataset(&path)?;
    ctx.seeds
        .iter()
        .map(|&seed| {
            let checkpoint = load_run(ctx, arm, seed)?;
            let (files, summary) = analyze(&checkpoint, &dataset)?;
            let dir = ctx.run_dir(arm, seed).join("analysis");
            let tmp = tmp_path(&dir);
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            }
            create_dir(&tmp)?;
            for (name, bytes) in &files {
                let p = tmp.join(name);
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
            Ok(summary)
        })
        .collect()
}

/// Mean and sample standard deviation (`n - 1` denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub stdev: Option<f64>,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn of(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot aggregate zero values".into()));
        }
        let m = mean(&values);
        let stdev = (values.len() >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
            (ss / (values.len() - 1) as f64).sqrt()
        });
        Ok(Aggregate { mean: m, stdev, values })
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stdev {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4} ± n/a", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    /// Metric name to aggregate, in column order.
    pub metrics: Vec<(String, Aggregate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub experiment_digest: String,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: Vec<ArmRow>,
}

impl ComparisonReport {
    pub fn from_metrics(seeds: &[u64], runs: &BTreeMap<Arm, Vec<RunMetrics>>) -> Result<Self> {
        let mut digests = BTreeSet::new();
        for (arm, list) in runs {
            let have: BTreeSet<u64> = list.iter().map(|m| m.seed).collect();
            let want: BTreeSet<u64> = seeds.iter().copied().collect();
            if have != want {
                let missing: Vec<u64> = want.difference(&have).copied().collect();
                let extra: Vec<u64> = have.difference(&want).copied().collect();
                return Err(Error::Precondition(format!(
                    "arm {arm}: seed set differs (missing {missing:?}, unexpected {extra:?})"
                )));
            }
            digests.extend(list.iter().map(|m| m.experiment_digest.clone()));
        }
        if digests.len() > 1 {
            return Err(Error::Precondition(format!(
                "metrics come from different configs: {}",
                digests.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        let experiment_digest = digests.into_iter().next().ok_or_else(|| {
            Error::InvalidArgument("no runs to compare".into())
        })?;
        let first = runs.values().next().and_then(|l| l.first()).expect("non-empty runs");
        let gaps: Vec<String> = first.verification.keys().cloned().collect();
        let mut columns: Vec<String> = gaps.iter().map(|g| format!("verification_gap_{g}")).collect();
        columns.push(format!("rank1_gap_{}", first.rank1_gap));
        columns.push("child_mean_abs_cos".into());

        let mut rows = Vec::new();
        for (&arm, list) in runs {
            let mut ordered: Vec<&RunMetrics> = list.iter().collect();
            ordered.sort_by_key(|m| seeds.iter().position(|&s| s == m.seed));
            let mut metrics = Vec::new();
            for (g, col) in gaps.iter().zip(&columns) {
                let values = ordered
                    .iter()
                    .map(|m| {
                        m.verification.get(g).copied().ok_or_else(|| {
                            Error::Precondition(format!("arm {arm} seed {}: no verification at gap {g}", m.seed))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                metrics.push((col.clone(), Aggregate::of(values)?));
            }
            metrics.push((columns[gaps.len()].clone(), Aggregate::of(ordered.iter().map(|m| m.rank1).collect())?));
            let cos: Option<Vec<f64>> = ordered.iter().map(|m| m.child_mean_abs_cos).collect();
            let cos = cos.ok_or_else(|| Error::Precondition(format!("arm {arm}: fewer than two child prototypes")))?;
            metrics.push(("child_mean_abs_cos".into(), Aggregate::of(cos)?));
            rows.push(ArmRow { arm, metrics });
        }
        Ok(ComparisonReport {
            experiment_digest,
            seeds: seeds.to_vec(),
            columns,
            rows,
        })
    }

    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("arm".to_string()).chain(self.columns.iter().cloned()).collect()];
        for row in &self.rows {
            grid.push(
                std::iter::once(row.arm.to_string())
                    .chain(row.metrics.iter().map(|(_, a)| a.to_string()))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in grid.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        out.push_str(&format!("seeds: {}\n", join(&self.seeds)));
        out
    }
}

/// Aggregates `metrics.json` over seeds for each arm; with no arms given,
/// every arm directory present under `runs/` is used.
pub fn cmd_compare(ctx: &Context, arms: &[Arm]) -> Result<ComparisonReport> {
    let arms: Vec<Arm> = if arms.is_empty() {
        Arm::ALL
            .into_iter()
            .filter(|a| ctx.out_root.join("runs").join(a.name()).is_dir())
            .collect()
    } else {
        arms.to_vec()
    };
    if arms.is_empty() {
        return Err(Error::Precondition(format!(
            "no runs found under {}",
            ctx.out_root.join("runs").display()
        )));
    }
    let mut runs = BTreeMap::new();
    for arm in arms {
        let list = ctx
            .seeds
            .iter()
            .filter_map(|&seed| {
                let path = ctx.run_dir(arm, seed).join("metrics.json");
                path.exists().then(|| {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<RunMetrics>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        runs.insert(arm, list);
    }
    let report = ComparisonReport::from_metrics(&ctx.seeds, &runs)?;
    if report.experiment_digest != ctx.config.digest() {
        return Err(Error::Precondition(format!(
            "metrics were produced under config digest {}, current config is {}",
            report.experiment_digest,
            ctx.config.digest()
        )));
    }
    write_atomic(&ctx.out_root.join("comparison.txt"), report.render_table().as_bytes())?;
    write_atomic(&ctx.out_root.join("comparison.json"), &pretty_json(&report))?;
    Ok(report)
}
