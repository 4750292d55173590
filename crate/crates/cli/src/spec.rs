//! Declarative experiment configuration: TOML file, `--set` overrides and
//! the resolved spec hash.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hallucidet_core::data::SceneConfig;
use hallucidet_core::detector::{DecodeConfig, DetectorConfig};
use hallucidet_core::hallucinet::HalluciNetConfig;
use hallucidet_core::train::TrainConfig;
use hallucidet_core::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    #[default]
    Pretrain,
    Finetune,
    Hallucidet,
    Baseline,
    Recon,
    Eval,
    SweepFraction,
    SweepLambda,
    SweepCapacity,
    Report,
    Panel,
}

impl Command {
    pub const ALL: [Command; 11] = [
        Self::Pretrain,
        Self::Finetune,
        Self::Hallucidet,
        Self::Baseline,
        Self::Recon,
        Self::Eval,
        Self::SweepFraction,
        Self::SweepLambda,
        Self::SweepCapacity,
        Self::Report,
        Self::Panel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Hallucidet => "hallucidet",
            Self::Baseline => "baseline",
            Self::Recon => "recon",
            Self::Eval => "eval",
            Self::SweepFraction => "sweep-fraction",
            Self::SweepLambda => "sweep-lambda",
            Self::SweepCapacity => "sweep-capacity",
            Self::Report => "report",
            Self::Panel => "panel",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_train: 400, n_test: 100 }
    }
}

/// Translator architecture: a named preset or explicit widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    pub preset: String,
    pub widths: Vec<usize>,
    pub use_attention: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self { preset: "tiny".into(), widths: Vec::new(), use_attention: true }
    }
}

impl NetSpec {
    pub fn resolve(&self) -> CliResult<HalluciNetConfig> {
        let mut cfg = if self.widths.is_empty() {
            HalluciNetConfig::preset(&self.preset)?
        } else {
            HalluciNetConfig::new(self.widths.clone(), true)?
        };
        cfg.use_attention = self.use_attention;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        if self.widths.is_empty() {
            self.preset.clone()
        } else {
            self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicSpec {
    pub sigma: f64,
    pub bins: usize,
}

impl Default for ClassicSpec {
    fn default() -> Self {
        Self {
            sigma: hallucidet_core::classic::DEFAULT_SIGMA,
            bins: hallucidet_core::classic::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub fractions: Vec<f64>,
    /// `[lambda_cls, lambda_reg, lambda_star]` triples.
    pub lambdas: Vec<[f64; 3]>,
    pub presets: Vec<String>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.3, 0.5, 1.0],
            lambdas: vec![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.01, 0.1, 0.1], [0.1, 0.01, 0.01]],
            presets: HalluciNetConfig::PRESETS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SweepSpec {
    pub fn lambda_weights(&self) -> CliResult<Vec<LossWeights>> {
        if self.lambdas.is_empty() {
            return Err(CliError::Config("sweep.lambdas is empty".into()));
        }
        self.lambdas
            .iter()
            .map(|[c, r, s]| Ok(LossWeights::new(*c, *r, *s)?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSpec {
    pub n_samples: usize,
    /// Row chains: `rgb` (ground truth), `gray`, a classical key,
    /// `finetune`, `hallucidet` or `recon`.
    pub rows: Vec<String>,
}

impl Default for PanelSpec {
    fn default() -> Self {
        Self {
            n_samples: 8,
            rows: ["rgb", "gray", "invert", "hallucidet"].map(String::from).to_vec(),
        }
    }
}

/// Thresholds enforced in `--check` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSpec {
    pub min_modality_gap: f64,
    pub min_gain_over_gray: f64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self { min_modality_gap: 0.15, min_gain_over_gray: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub command: Command,
    /// Defaults to `{command}-{hash prefix}`.
    pub run_id: String,
    pub seeds: Vec<u64>,
    /// Methods for `baseline` / `eval`; `all` expands to every classical key.
    pub methods: Vec<String>,
    /// Translator checkpoint evaluated by `eval` in addition to `methods`.
    pub checkpoint: String,
    /// Detector used by `eval`; empty means the cached pretrained detector.
    pub detector_checkpoint: String,
    pub check: bool,
    pub scene: SceneConfig,
    pub dataset: DatasetSpec,
    pub detector: DetectorConfig,
    pub net: NetSpec,
    pub decode: DecodeConfig,
    pub classic: ClassicSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub hallucidet: TrainConfig,
    pub recon: TrainConfig,
    pub sweep: SweepSpec,
    pub panel: PanelSpec,
    pub thresholds: CheckSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let detector_weights = LossWeights::new(1.0, 0.1, 1.0).expect("valid weights");
        Self {
            schema_version: SCHEMA_VERSION,
            command: Command::default(),
            run_id: String::new(),
            seeds: vec![0, 1, 2],
            methods: vec!["invert".into()],
            checkpoint: String::new(),
            detector_checkpoint: String::new(),
            check: false,
            scene: SceneConfig::default(),
            dataset: DatasetSpec::default(),
            detector: DetectorConfig::default(),
            net: NetSpec::default(),
            decode: DecodeConfig::default(),
            classic: ClassicSpec::default(),
            pretrain: TrainConfig { epochs: 20, weights: detector_weights, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 10, weights: detector_weights, ..TrainConfig::default() },
            hallucidet: TrainConfig { epochs: 10, ..TrainConfig::default() },
            recon: TrainConfig { epochs: 10, ..TrainConfig::default() },
            sweep: SweepSpec::default(),
            panel: PanelSpec::default(),
            thresholds: CheckSpec::default(),
        }
    }
}

fn to_toml(spec: &ExperimentSpec) -> CliResult<toml::Value> {
    toml::Value::try_from(spec).map_err(|e| CliError::Config(format!("cannot encode spec: {e}")))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies a dotted `section.key=value` override.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: {k} is not inside a table")))?;
        if i + 1 == keys.len() {
            table.insert((*k).to_string(), parse_value(raw.trim()));
            return Ok(());
        }
        node = table
            .entry((*k).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// Builds a spec from defaults, an optional TOML file and overrides, in
/// that order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> CliResult<ExperimentSpec> {
    let mut root = to_toml(&ExperimentSpec::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut root, toml::Value::Table(table));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let spec: ExperimentSpec = root
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

impl ExperimentSpec {
    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds is empty".into()));
        }
        if self.seeds.iter().any(|s| *s > i64::MAX as u64) {
            return Err(CliError::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        if self.dataset.n_train == 0 || self.dataset.n_test == 0 {
            return Err(CliError::Config("dataset sizes must be positive".into()));
        }
        self.scene.validate()?;
        self.detector.validate()?;
        self.net.resolve()?;
        for t in [&self.pretrain, &self.finetune, &self.hallucidet, &self.recon] {
            t.validate()?;
        }
        if self.sweep.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::Config(format!("sweep.fractions {:?} outside (0, 1]", self.sweep.fractions)));
        }
        self.sweep.lambda_weights()?;
        for p in &self.sweep.presets {
            HalluciNetConfig::preset(p)?;
        }
        if !self.run_id.is_empty()
            && !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(CliError::Config(format!("run_id {:?} has unsupported characters", self.run_id)));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("cannot encode spec: {e}")))
    }

    /// SHA-256 of the canonical JSON of everything except `run_id` and the
    /// `check` flag, which do not influence any metric.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.run_id.clear();
        canon.check = false;
        hash_json(&serde_json::to_value(&canon).expect("spec serializes"))
    }

    pub fn run_id(&self) -> String {
        if self.run_id.is_empty() {
            format!("{}-{}", self.command, &self.hash()[..12])
        } else {
            self.run_id.clone()
        }
    }

    pub fn detector_label(&self) -> String {
        format!("fcos-w{}-d{}", self.detector.width, self.detector.depth)
    }
}

/// Hex SHA-256 of a JSON value (serde_json maps are ordered by key).
pub fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}
