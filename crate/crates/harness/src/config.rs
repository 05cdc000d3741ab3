//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use shrinkage_core::data::CovarianceSpec;
use shrinkage_core::distributed::{DLambdaSource, EstimatorKind, EstimatorSpec, PcgConfig};
use shrinkage_core::sketching::IhsVariant;
use shrinkage_core::trajectory::{LineSearchConfig, StoppingRule};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Resolvent,
    Newton,
    InexactNewton,
    Ihs,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Resolvent => "resolvent",
            ExperimentKind::Newton => "newton",
            ExperimentKind::InexactNewton => "inexact-newton",
            ExperimentKind::Ihs => "ihs",
        }
    }

    /// Whether the y-axis is a log10 optimality gap.
    pub fn plots_gap(self) -> bool {
        self != ExperimentKind::Resolvent
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ridge,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Identity,
    RandomGram,
    PowerLaw,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Row count. Resolvent experiments draw `agents × local-samples` rows
    /// instead and ignore it.
    #[serde(default)]
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceKind,
    /// Multiplier for `identity` and `random-gram`.
    #[serde(default = "one")]
    pub scale: f64,
    /// Decay exponent for `power-law`.
    #[serde(default = "two")]
    pub exponent: f64,
    /// Standard deviation of the additive noise on planted targets.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticConfig {
    pub fn covariance_spec(&self) -> CovarianceSpec {
        match self.covariance {
            CovarianceKind::Identity => CovarianceSpec::IdentityScaled(self.scale),
            CovarianceKind::RandomGram => CovarianceSpec::RandomGram { scale: self.scale },
            CovarianceKind::PowerLaw => CovarianceSpec::PowerLaw {
                exponent: self.exponent,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataConfig {
    /// LIBSVM file, relative to the config file.
    pub libsvm: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Ridge on one-hot encoded labels instead of the raw label column.
    #[serde(default)]
    pub one_hot: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum DLambdaConfig {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct StoppingConfig {
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            gap_tol: default_gap_tol(),
            max_rounds: default_max_rounds(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct LineSearchToml {
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "half")]
    pub shrink: f64,
    #[serde(default = "default_halvings")]
    pub max_halvings: u32,
    #[serde(default = "one")]
    pub eta0: f64,
}

impl Default for LineSearchToml {
    fn default() -> Self {
        Self {
            c1: default_c1(),
            shrink: half(),
            max_halvings: default_halvings(),
            eta0: one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PcgToml {
    #[serde(default = "default_pcg_tol")]
    pub tol: f64,
    #[serde(default = "default_pcg_iters")]
    pub max_iterations: usize,
}

impl Default for PcgToml {
    fn default() -> Self {
        Self {
            tol: default_pcg_tol(),
            max_iterations: default_pcg_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

/// File layout. Everything except `experiment`, `data` and `lambda` has a
/// default.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct RawConfig {
    experiment: ExperimentKind,
    lambda: f64,
    data: DataConfig,
    #[serde(default = "default_loss")]
    loss: LossKind,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_agents")]
    agents: usize,
    sketch_size: Option<usize>,
    #[serde(default = "yes")]
    refresh_sketch: bool,
    estimators: Option<Vec<String>>,
    d_lambda: Option<DLambdaConfig>,
    #[serde(default)]
    determinantal_global: bool,
    #[serde(default)]
    fresh_batches: bool,
    local_samples: Option<Vec<usize>>,
    #[serde(default)]
    stopping: StoppingConfig,
    #[serde(default)]
    line_search: LineSearchToml,
    #[serde(default)]
    pcg: PcgToml,
    #[serde(default)]
    output: OutputConfig,
}

/// How the shrinkage estimator obtains its effective dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DLambdaChoice {
    /// From the population covariance (synthetic) or the full-data Gram
    /// matrix (files).
    Exact,
    LocalEmpirical,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodSpec {
    Distributed(EstimatorKind),
    Ihs(IhsVariant),
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Distributed(k) => k.name(),
            MethodSpec::Ihs(v) => v.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Libsvm(PathBuf),
    Synthetic(SyntheticConfig),
}

/// Validated experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub lambda: f64,
    pub data: DataSource,
    pub standardize: bool,
    pub one_hot: bool,
    pub loss: LossKind,
    pub trials: usize,
    pub seed: u64,
    pub agents: usize,
    pub sketch_size: usize,
    pub refresh_sketch: bool,
    pub methods: Vec<MethodSpec>,
    pub d_lambda: DLambdaChoice,
    pub determinantal_global: bool,
    pub fresh_batches: bool,
    pub local_samples: Vec<usize>,
    pub stopping: StoppingRule,
    pub line_search: LineSearchConfig,
    pub pcg: PcgConfig,
    pub output: OutputConfig,
}

fn field(name: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config(format!("{name}: {}", message.into()))
}

impl ExperimentConfig {
    /// Parses and validates config text. Relative paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Self::validate(raw, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn validate(raw: RawConfig, base_dir: &Path) -> Result<Self, HarnessError> {
        if !(raw.lambda > 0.0 && raw.lambda.is_finite()) {
            return Err(field("lambda", format!("must be positive, got {}", raw.lambda)));
        }
        if raw.trials == 0 {
            return Err(field("trials", "must be at least 1"));
        }
        let data = match (raw.data.libsvm, raw.data.synthetic) {
            (Some(p), None) => DataSource::Libsvm(if p.is_absolute() { p } else { base_dir.join(p) }),
            (None, Some(s)) => {
                if s.n == 0 && raw.experiment != ExperimentKind::Resolvent {
                    return Err(field("data.synthetic.n", "must be at least 1"));
                }
                if s.d == 0 {
                    return Err(field("data.synthetic.d", "must be at least 1"));
                }
                if !(s.scale > 0.0) {
                    return Err(field("data.synthetic.scale", "must be positive"));
                }
                if !(s.noise >= 0.0) {
                    return Err(field("data.synthetic.noise", "must be non-negative"));
                }
                DataSource::Synthetic(s)
            }
            (None, None) => {
                return Err(field(
                    "data",
                    "needs exactly one of `libsvm` or `synthetic`, found neither",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(field(
                    "data",
                    "needs exactly one of `libsvm` or `synthetic`, found both",
                ))
            }
        };
        if raw.agents == 0 {
            return Err(field("agents", "must be at least 1"));
        }

        let names = raw.estimators.unwrap_or_else(|| default_estimators(raw.experiment));
        if names.is_empty() {
            return Err(field("estimators", "at least one estimator is required"));
        }
        let mut methods = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let m = match raw.experiment {
                ExperimentKind::Ihs => IhsVariant::parse(name).map(MethodSpec::Ihs),
                _ => EstimatorKind::parse(name).map(MethodSpec::Distributed),
            }
            .ok_or_else(|| field(&format!("estimators[{i}]"), format!("unknown estimator `{name}`")))?;
            let allowed = match (raw.experiment, m) {
                (ExperimentKind::Newton, MethodSpec::Distributed(k)) => {
                    !matches!(k, EstimatorKind::FirstAgent | EstimatorKind::Identity)
                }
                (ExperimentKind::Resolvent, MethodSpec::Distributed(k)) => {
                    !matches!(k, EstimatorKind::FirstAgent | EstimatorKind::Identity)
                }
                _ => true,
            };
            if !allowed {
                return Err(field(
                    &format!("estimators[{i}]"),
                    format!("`{name}` is only valid for inexact-newton"),
                ));
            }
            if methods.contains(&m) {
                return Err(field(&format!("estimators[{i}]"), format!("`{name}` listed twice")));
            }
            methods.push(m);
        }

        let d_lambda = match raw.d_lambda {
            None => {
                if raw.experiment == ExperimentKind::Resolvent {
                    DLambdaChoice::Exact
                } else {
                    DLambdaChoice::LocalEmpirical
                }
            }
            Some(DLambdaConfig::Fixed(v)) if v >= 0.0 && v.is_finite() => DLambdaChoice::Fixed(v),
            Some(DLambdaConfig::Fixed(v)) => return Err(field("d-lambda", format!("must be non-negative, got {v}"))),
            Some(DLambdaConfig::Named(s)) => match s.as_str() {
                "exact" => DLambdaChoice::Exact,
                "local-empirical" => DLambdaChoice::LocalEmpirical,
                other => {
                    return Err(field(
                        "d-lambda",
                        format!("expected `exact`, `local-empirical` or a number, got `{other}`"),
                    ))
                }
            },
        };
        if raw.experiment == ExperimentKind::Resolvent && d_lambda == DLambdaChoice::LocalEmpirical {
            return Err(field("d-lambda", "resolvent experiments take `exact` or a number"));
        }

        let local_samples = match (raw.experiment, raw.local_samples) {
            (ExperimentKind::Resolvent, None) => {
                return Err(field("local-samples", "required for resolvent experiments"))
            }
            (ExperimentKind::Resolvent, Some(v)) if v.is_empty() || v.contains(&0) => {
                return Err(field("local-samples", "must be a non-empty list of positive counts"))
            }
            (_, v) => v.unwrap_or_default(),
        };

        if raw.loss == LossKind::Logistic && matches!(raw.experiment, ExperimentKind::Resolvent | ExperimentKind::Ihs) {
            return Err(field(
                "loss",
                format!(
                    "logistic loss is not available for {} experiments",
                    raw.experiment.name()
                ),
            ));
        }
        if raw.data.one_hot && (raw.loss != LossKind::Ridge || !matches!(data, DataSource::Libsvm(_))) {
            return Err(field("data.one-hot", "only applies to ridge loss on LIBSVM data"));
        }
        if raw.fresh_batches && raw.loss != LossKind::Logistic {
            return Err(field("fresh-batches", "only applies to logistic loss"));
        }

        let sketch_size = match (raw.experiment, raw.sketch_size) {
            (ExperimentKind::Ihs, None) => return Err(field("sketch-size", "required for ihs experiments")),
            (ExperimentKind::Ihs, Some(0)) => return Err(field("sketch-size", "must be at least 1")),
            (_, s) => s.unwrap_or(0),
        };

        if !(raw.stopping.gap_tol >= 0.0) {
            return Err(field("stopping.gap-tol", "must be non-negative"));
        }
        if raw.stopping.max_rounds == 0 {
            return Err(field("stopping.max-rounds", "must be at least 1"));
        }
        let line_search = LineSearchConfig {
            c1: raw.line_search.c1,
            shrink: raw.line_search.shrink,
            max_halvings: raw.line_search.max_halvings,
            eta0: raw.line_search.eta0,
        };
        line_search
            .validate()
            .map_err(|e| field("line-search", e.to_string()))?;
        if !(raw.pcg.tol > 0.0) {
            return Err(field("pcg.tol", "must be positive"));
        }
        if raw.pcg.max_iterations == 0 {
            return Err(field("pcg.max-iterations", "must be at least 1"));
        }

        Ok(Self {
            experiment: raw.experiment,
            lambda: raw.lambda,
            data,
            standardize: raw.data.standardize,
            one_hot: raw.data.one_hot,
            loss: raw.loss,
            trials: raw.trials,
            seed: raw.seed,
            agents: raw.agents,
            sketch_size,
            refresh_sketch: raw.refresh_sketch,
            methods,
            d_lambda,
            determinantal_global: raw.determinantal_global,
            fresh_batches: raw.fresh_batches,
            local_samples,
            stopping: StoppingRule {
                gap_tol: raw.stopping.gap_tol,
                max_rounds: raw.stopping.max_rounds,
            },
            line_search,
            pcg: PcgConfig {
                tol: raw.pcg.tol,
                max_iterations: raw.pcg.max_iterations,
            },
            output: raw.output,
        })
    }

    /// Estimator spec for a distributed method once the exact effective
    /// dimension (if needed) is known.
    pub fn estimator_spec(&self, kind: EstimatorKind, exact_d_lambda: Option<f64>) -> EstimatorSpec {
        let source = match self.d_lambda {
            DLambdaChoice::LocalEmpirical => DLambdaSource::LocalEmpirical,
            DLambdaChoice::Fixed(v) => DLambdaSource::Fixed(v),
            DLambdaChoice::Exact => DLambdaSource::Exact(exact_d_lambda.unwrap_or(0.0)),
        };
        EstimatorSpec {
            kind,
            d_lambda_source: source,
        }
    }

    pub fn method_names(&self) -> Vec<&'static str> {
        self.methods.iter().map(MethodSpec::name).collect()
    }
}

fn default_estimators(kind: ExperimentKind) -> Vec<String> {
    let names: &[&str] = match kind {
        ExperimentKind::Resolvent | ExperimentKind::Newton => &["shrinkage", "average", "determinantal"],
        ExperimentKind::InexactNewton => &["shrinkage", "average", "first-agent", "identity"],
        ExperimentKind::Ihs => &["plain", "shrinkage-exact", "shrinkage-approx"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

fn default_loss() -> LossKind {
    LossKind::Ridge
}
fn default_covariance() -> CovarianceKind {
    CovarianceKind::Identity
}
fn default_trials() -> usize {
    10
}
fn default_agents() -> usize {
    1
}
fn default_noise() -> f64 {
    0.1
}
fn default_gap_tol() -> f64 {
    1e-10
}
fn default_max_rounds() -> usize {
    100
}
fn default_c1() -> f64 {
    1e-4
}
fn default_halvings() -> u32 {
    30
}
fn default_pcg_tol() -> f64 {
    1e-10
}
fn default_pcg_iters() -> usize {
    200
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, HarnessError> {
        ExperimentConfig::parse(text, Path::new("/base"))
    }

    const MINIMAL: &str = r#"
experiment = "newton"
lambda = 0.01
[data.synthetic]
n = 1000
d = 10
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.trials, 10);
        assert_eq!(c.seed, 0);
        assert_eq!(c.loss, LossKind::Ridge);
        assert_eq!(c.d_lambda, DLambdaChoice::LocalEmpirical);
        assert_eq!(c.method_names(), vec!["shrinkage", "average", "determinantal"]);
        assert_eq!(c.stopping, StoppingRule::default());
        assert_eq!(c.line_search, LineSearchConfig::default());
        assert_eq!(c.pcg, PcgConfig::default());
    }

    #[test]
    fn relative_libsvm_path_resolves_against_config_dir() {
        let c = parse("experiment = \"newton\"\nlambda = 0.1\n[data]\nlibsvm = \"x.libsvm\"\n").unwrap();
        assert_eq!(c.data, DataSource::Libsvm(PathBuf::from("/base/x.libsvm")));
    }

    fn config_error(text: &str) -> String {
        match parse(text) {
            Err(HarnessError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert!(config_error("lambda = 0.1\n[data.synthetic]\nn=1\nd=1\n").contains("experiment"));
        assert!(config_error("experiment = \"newton\"\n[data.synthetic]\nn=1\nd=1\n").contains("lambda"));
        assert!(config_error(&MINIMAL.replace("0.01", "-1.0")).starts_with("lambda"));
        assert!(config_error(&format!("trials = 0\n{MINIMAL}")).starts_with("trials"));
        assert!(config_error(&format!("estimators = []\n{MINIMAL}")).starts_with("estimators"));
        assert!(
            config_error(&format!("estimators = [\"average\", \"bogus\"]\n{MINIMAL}")).starts_with("estimators[1]")
        );
        assert!(config_error(&format!("estimators = [\"first-agent\"]\n{MINIMAL}")).starts_with("estimators[0]"));
        assert!(config_error(&format!("d-lambda = \"guess\"\n{MINIMAL}")).starts_with("d-lambda"));
        assert!(config_error(&format!("colour = 1\n{MINIMAL}")).contains("colour"));
        assert!(
            config_error("experiment = \"newton\"\nlambda = 0.1\n[data]\nstandardize = true\n").starts_with("data")
        );
        assert!(config_error(
            "experiment = \"newton\"\nlambda = 0.1\n[data]\nlibsvm = \"a\"\n[data.synthetic]\nn = 1\nd = 1\n"
        )
        .starts_with("data"));
        assert!(config_error(&MINIMAL.replace("newton", "ihs")).starts_with("sketch-size"));
        assert!(config_error(&MINIMAL.replace("newton", "resolvent")).starts_with("local-samples"));
        assert!(config_error(&format!("fresh-batches = true\n{MINIMAL}")).starts_with("fresh-batches"));
        assert!(config_error(&format!("{MINIMAL}[line-search]\nshrink = 2.0\n")).starts_with("line-search"));
    }

    #[test]
    fn fixed_d_lambda_is_numeric() {
        let c = parse(&format!("d-lambda = 3.5\n{MINIMAL}")).unwrap();
        assert_eq!(c.d_lambda, DLambdaChoice::Fixed(3.5));
    }
}
