//! Job configuration files.
//!
//! Configs are TOML. Unknown keys anywhere are rejected, relative paths
//! resolve against the config file's directory, and every referenced path
//! must exist when the config is loaded.

use std::fmt;
use std::path::{Path, PathBuf};

use hookscope::attribution::{LrpRules, RuleKind, Target};
use hookscope::DType;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Attribute,
    Probe,
    Patch,
    Maximise,
    Prune,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Attribute => "attribute",
            Command::Probe => "probe",
            Command::Patch => "patch",
            Command::Maximise => "maximise",
            Command::Prune => "prune",
            Command::Bench => "bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub command: Command,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Compute dtype; `f32` unless given.
    #[serde(default)]
    pub dtype: Option<DType>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub attribute: Option<AttributeConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub patch: Option<PatchConfig>,
    #[serde(default)]
    pub maximise: Option<MaximiseConfig>,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub output: String,
    pub index: usize,
}

impl TargetConfig {
    pub fn target(&self) -> Target {
        Target::index(&self.output, self.index)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub pattern: String,
    pub rule: String,
}

pub fn lrp_rules(rules: &[RuleConfig]) -> Result<LrpRules, Failure> {
    if rules.is_empty() {
        return Ok(LrpRules::uniform(RuleKind::Epsilon(hookscope::attribution::DEFAULT_EPSILON)));
    }
    let mut out = LrpRules::new();
    for r in rules {
        let kind: RuleKind = r.rule.parse().map_err(|e| Failure::config(format!("rule {:?}: {e}", r.rule)))?;
        out = out.assign(&r.pattern, kind).map_err(|e| Failure::config(format!("pattern {:?}: {e}", r.pattern)))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Saliency,
    GradientXInput,
    IntegratedGradients,
    Conductance,
    GradCam,
    GuidedBackprop,
    Lrp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub inputs: PathBuf,
    pub method: AttributionMethod,
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    /// Layer for conductance and grad-CAM.
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub rules: Vec<RuleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub inputs: PathBuf,
    pub targets: PathBuf,
    #[serde(default = "default_target_key")]
    pub target_key: String,
    /// All modules when empty.
    #[serde(default)]
    pub sites: Vec<String>,
    #[serde(default = "default_ridge")]
    pub lambda: f64,
    #[serde(default = "yes")]
    pub baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchModeConfig {
    Gradient,
    Relevance,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub clean: PathBuf,
    pub corrupt: PathBuf,
    pub target: TargetConfig,
    /// All modules when empty.
    #[serde(default)]
    pub sites: Vec<String>,
    #[serde(default = "default_patch_mode")]
    pub mode: PatchModeConfig,
    #[serde(default)]
    pub rules: Vec<RuleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaximiseConfig {
    pub site: String,
    pub index: usize,
    /// Per-sample input shape, for single-input models.
    #[serde(default)]
    pub shape: Vec<usize>,
    /// Starting point; overrides `shape` and `init_scale`.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceSource {
    /// `|w|` per weight, row norm per unit.
    Magnitude,
    /// `|w ⊙ ∂F/∂w|` per weight, `|h ⊙ ∂F/∂h|` per unit.
    Gradient,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityConfig {
    Weight,
    Unit,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub inputs: PathBuf,
    pub sparsity: f64,
    #[serde(default = "default_relevance")]
    pub relevance: RelevanceSource,
    #[serde(default = "default_granularity")]
    pub granularity: GranularityConfig,
    /// Required for gradient relevance.
    #[serde(default)]
    pub target: Option<TargetConfig>,
    /// Modules whose units may be pruned; every linear or convolutional
    /// module except those producing outputs when empty.
    #[serde(default)]
    pub units: Vec<String>,
    #[serde(default)]
    pub include_bias: bool,
    /// Regression labels for reporting task loss before and after.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_target_key")]
    pub label_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTask {
    /// Integrated gradients for one target.
    Ig,
    /// Integrated gradients for several targets in one vector-seeded pass.
    IgMulti,
    /// The same targets, one scalar backward at a time.
    IgLoop,
    Lrp,
    Caching,
    Intervention,
}

impl BenchTask {
    pub fn name(self) -> &'static str {
        match self {
            BenchTask::Ig => "ig",
            BenchTask::IgMulti => "ig_multi",
            BenchTask::IgLoop => "ig_loop",
            BenchTask::Lrp => "lrp",
            BenchTask::Caching => "caching",
            BenchTask::Intervention => "intervention",
        }
    }
}

impl std::str::FromStr for BenchTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let all = [
            BenchTask::Ig,
            BenchTask::IgMulti,
            BenchTask::IgLoop,
            BenchTask::Lrp,
            BenchTask::Caching,
            BenchTask::Intervention,
        ];
        all.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown bench task {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub width: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub tasks: Vec<BenchTask>,
    pub models: Vec<ModelSize>,
    pub batches: Vec<usize>,
    #[serde(default = "default_bench_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_bench_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_targets")]
    pub targets: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_csv")]
    pub csv: String,
}

fn yes() -> bool {
    true
}
fn default_target_key() -> String {
    "y".into()
}
fn default_ridge() -> f64 {
    hookscope::latent::DEFAULT_RIDGE
}
fn default_patch_mode() -> PatchModeConfig {
    PatchModeConfig::Gradient
}
fn default_lr() -> f64 {
    0.1
}
fn default_iters() -> usize {
    100
}
fn default_l2() -> f64 {
    0.01
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_relevance() -> RelevanceSource {
    RelevanceSource::Gradient
}
fn default_granularity() -> GranularityConfig {
    GranularityConfig::Weight
}
fn default_bench_steps() -> Vec<usize> {
    vec![32]
}
fn default_bench_seeds() -> Vec<u64> {
    vec![0]
}
fn default_targets() -> usize {
    8
}
fn default_repeats() -> usize {
    5
}
fn default_warmup() -> usize {
    1
}
fn default_csv() -> String {
    "bench.csv".into()
}

fn resolve(base: &Path, p: &mut PathBuf) -> Result<(), Failure> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if !p.exists() {
        return Err(Failure::config(format!("path does not exist: {}", p.display())));
    }
    Ok(())
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) -> Result<(), Failure> {
    match p {
        Some(p) => resolve(base, p),
        None => Ok(()),
    }
}

impl JobConfig {
    pub fn parse(text: &str, base: &Path) -> Result<JobConfig, Failure> {
        let mut cfg: JobConfig = toml::from_str(text).map_err(|e| Failure::config(e.to_string()))?;
        cfg.validate(base)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<JobConfig, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        JobConfig::parse(&text, base)
    }

    pub fn dtype(&self) -> DType {
        self.dtype.unwrap_or(DType::F32)
    }

    fn validate(&mut self, base: &Path) -> Result<(), Failure> {
        let present = [
            (Command::Attribute, self.attribute.is_some()),
            (Command::Probe, self.probe.is_some()),
            (Command::Patch, self.patch.is_some()),
            (Command::Maximise, self.maximise.is_some()),
            (Command::Prune, self.prune.is_some()),
            (Command::Bench, self.bench.is_some()),
        ];
        for (c, here) in present {
            if c == self.command && !here {
                return Err(Failure::config(format!("missing [{c}] section")));
            }
            if c != self.command && here {
                return Err(Failure::config(format!("[{c}] section given for command {}", self.command)));
            }
        }
        if self.command != Command::Bench {
            match &mut self.model {
                Some(m) => resolve(base, m)?,
                None => return Err(Failure::config("missing model path")),
            }
        }
        if let Some(a) = &mut self.attribute {
            resolve(base, &mut a.inputs)?;
            resolve_opt(base, &mut a.baseline)?;
            if a.targets.is_empty() {
                return Err(Failure::config("attribute needs at least one target"));
            }
            let needs_site = matches!(a.method, AttributionMethod::Conductance | AttributionMethod::GradCam);
            if needs_site && a.site.is_none() {
                return Err(Failure::config("this method needs a site"));
            }
            if a.steps == Some(0) {
                return Err(Failure::config("steps must be positive"));
            }
            lrp_rules(&a.rules)?;
        }
        if let Some(p) = &mut self.probe {
            resolve(base, &mut p.inputs)?;
            resolve(base, &mut p.targets)?;
            if !(p.lambda >= 0.0) {
                return Err(Failure::config("lambda must be non-negative"));
            }
        }
        if let Some(p) = &mut self.patch {
            resolve(base, &mut p.clean)?;
            resolve(base, &mut p.corrupt)?;
            lrp_rules(&p.rules)?;
        }
        if let Some(m) = &mut self.maximise {
            resolve_opt(base, &mut m.init)?;
            if m.init.is_none() && m.shape.is_empty() {
                return Err(Failure::config("maximise needs a shape or an init file"));
            }
        }
        if let Some(p) = &mut self.prune {
            resolve(base, &mut p.inputs)?;
            resolve_opt(base, &mut p.labels)?;
            if !(0.0..=1.0).contains(&p.sparsity) {
                return Err(Failure::config("sparsity must lie in [0, 1]"));
            }
            if p.relevance == RelevanceSource::Gradient && p.target.is_none() {
                return Err(Failure::config("gradient relevance needs a target"));
            }
        }
        if let Some(b) = &self.bench {
            let empty = b.tasks.is_empty() || b.models.is_empty() || b.batches.is_empty();
            if empty || b.steps.is_empty() || b.seeds.is_empty() {
                return Err(Failure::config("bench tasks, models, batches, steps and seeds must be non-empty"));
            }
            if b.repeats < 3 {
                return Err(Failure::config("bench repeats must be at least 3"));
            }
            if b.csv.contains(['/', '\\']) {
                return Err(Failure::config("bench csv must be a file name inside the output directory"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_missing_paths_are_config_errors() {
        let dir = std::env::temp_dir();
        let typo = "command = \"bench\"\nsed = 3\n";
        assert!(JobConfig::parse(typo, &dir).unwrap_err().is_config());
        let missing =
            "command = \"probe\"\nmodel = \"/nonexistent/model.hsm\"\n[probe]\ninputs = \"a\"\ntargets = \"b\"\n";
        assert!(JobConfig::parse(missing, &dir).unwrap_err().is_config());
        let wrong_section = "command = \"bench\"\n[probe]\ninputs = \"a\"\ntargets = \"b\"\n";
        assert!(JobConfig::parse(wrong_section, &dir).is_err());
    }

    #[test]
    fn bench_defaults() {
        let text =
            "command = \"bench\"\n[bench]\ntasks = [\"ig\"]\nbatches = [1]\nmodels = [{ width = 8, depth = 2 }]\n";
        let cfg = JobConfig::parse(text, Path::new(".")).unwrap();
        let b = cfg.bench.unwrap();
        assert_eq!((b.repeats, b.warmup, b.targets), (5, 1, 8));
        assert_eq!(cfg.dtype.unwrap_or(DType::F32), DType::F32);
    }
}
