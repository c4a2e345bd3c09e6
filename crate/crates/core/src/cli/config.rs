//! Run configuration: a single JSON document with every default materialized
//! in the resolved echo.

use std::fmt;
use std::marker::PhantomData;
use std::path::PathBuf;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::condexp::{BasisFamily, EstimatorKind, RegressionSpec};
use crate::error::BsdeError;
use crate::problems::{builtin, BsdeProblem, Params};
use crate::schemes::{PicardConfig, SchemeConfig, SchemeKind, WeightVariant};

/// Sections that may be written either as a bare name or as an object.
trait FromName: Sized {
    fn from_name(name: &str) -> Result<Self, String>;
}

fn name_or_map<'de, T, D>(d: D) -> Result<T, D::Error>
where
    T: Deserialize<'de> + FromName,
    D: Deserializer<'de>,
{
    struct NameOrMap<T>(PhantomData<T>);

    impl<'de, T: Deserialize<'de> + FromName> Visitor<'de> for NameOrMap<T> {
        type Value = T;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a name or an object")
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<T, E> {
            T::from_name(v).map_err(E::custom)
        }

        fn visit_map<M: MapAccess<'de>>(self, map: M) -> Result<T, M::Error> {
            T::deserialize(de::value::MapAccessDeserializer::new(map))
        }
    }

    d.deserialize_any(NameOrMap(PhantomData))
}

fn variant<T: for<'de> Deserialize<'de>>(name: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl FromName for ProblemSection {
    fn from_name(name: &str) -> Result<Self, String> {
        Ok(Self {
            name: name.to_string(),
            params: Params::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub kind: SchemeKind,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub weight_variant: WeightVariant,
    #[serde(default)]
    pub mesh_ratio_limit: Option<f64>,
}

impl FromName for SchemeSection {
    fn from_name(name: &str) -> Result<Self, String> {
        Ok(Self {
            kind: variant(name)?,
            picard: PicardConfig::default(),
            weight_variant: WeightVariant::default(),
            mesh_ratio_limit: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorName {
    Exact,
    Lsmc,
    Nested,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub kind: EstimatorName,
    #[serde(default)]
    pub params: EstimatorParams,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            kind: EstimatorName::Lsmc,
            params: EstimatorParams::default(),
        }
    }
}

impl FromName for EstimatorSection {
    fn from_name(name: &str) -> Result<Self, String> {
        Ok(Self {
            kind: variant(name)?,
            params: EstimatorParams::default(),
        })
    }
}

pub const DEFAULT_INNER: usize = 64;

fn default_p() -> f64 {
    2.0
}

fn default_horizon() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(deserialize_with = "name_or_map")]
    pub problem: ProblemSection,
    #[serde(deserialize_with = "name_or_map")]
    pub scheme: SchemeSection,
    #[serde(default, deserialize_with = "name_or_map")]
    pub estimator: EstimatorSection,
    pub ladder: Vec<usize>,
    pub fine_n: usize,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// A configuration problem located at a field and, when found, a line.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Line of the key at the end of `field` (dotted, with `[k]` indices), or of
/// its nearest ancestor present in the text.
fn locate(text: &str, field: &str) -> Option<usize> {
    let mut pos = 0;
    let mut found = None;
    for seg in field.split('.') {
        let key = seg.split('[').next().unwrap_or("");
        if key.is_empty() {
            continue;
        }
        match text[pos..].find(&format!("\"{key}\"")) {
            Some(off) => {
                pos += off;
                found = Some(pos);
            }
            None => break,
        }
    }
    found.map(|at| text[..at].matches('\n').count() + 1)
}

/// Parse `text`, reporting the field path and line of the first error.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<RunConfig, _> = serde_path_to_error::deserialize(&mut de);
    let cfg = parsed.map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let line = match inner.line() {
            0 => locate(text, &field),
            l => Some(l),
        };
        let message = inner.to_string();
        let message = match message.rfind(" at line ") {
            Some(cut) => message[..cut].to_string(),
            None => message,
        };
        ConfigError {
            field,
            line,
            message,
        }
    })?;
    de.end().map_err(|e| ConfigError {
        field: ".".into(),
        line: Some(e.line()),
        message: "trailing characters after the configuration".into(),
    })?;
    Ok(cfg)
}

/// A validated configuration with its problem and estimator built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub problem: BsdeProblem,
    pub estimator: EstimatorKind,
    pub scheme: SchemeConfig,
}

fn fail(text: &str, field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        line: locate(text, field),
        message: message.into(),
    }
}

impl RunConfig {
    /// Semantic checks; fills every estimator default so the echo is complete.
    pub fn resolve(mut self, text: &str) -> Result<Resolved, ConfigError> {
        if self.n_paths == 0 {
            return Err(fail(text, "n_paths", "must be at least 1"));
        }
        if !(self.p >= 2.0) || !self.p.is_finite() {
            return Err(fail(text, "p", format!("norm order must be >= 2, got {}", self.p)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(fail(text, "horizon", format!("must be positive, got {}", self.horizon)));
        }
        if self.fine_n == 0 {
            return Err(fail(text, "fine_n", "must be at least 1"));
        }
        if self.ladder.is_empty() {
            return Err(fail(text, "ladder", "needs at least one level"));
        }
        for (k, &n) in self.ladder.iter().enumerate() {
            if n == 0 || self.fine_n % n != 0 {
                return Err(fail(
                    text,
                    &format!("ladder[{k}]"),
                    format!("level {n} does not divide fine_n = {}", self.fine_n),
                ));
            }
        }
        let picard = self.scheme.picard;
        if let Err(e) = picard.validate() {
            return Err(fail(text, "scheme.picard", e.to_string()));
        }
        if let Some(limit) = self.scheme.mesh_ratio_limit {
            if !(limit >= 1.0) {
                return Err(fail(text, "scheme.mesh_ratio_limit", "must be >= 1"));
            }
        }

        let problem = builtin(&self.problem.name, self.horizon, &self.problem.params).map_err(|e| {
            let field = match &e {
                BsdeError::UnknownProblem(_) => "problem.name".to_string(),
                BsdeError::MissingParam { .. } => "problem".to_string(),
                _ => "problem.params".to_string(),
            };
            fail(text, &field, e.to_string())
        })?;

        let estimator = self.resolve_estimator(text)?;
        if let Err(e) = estimator.validate() {
            return Err(fail(text, "estimator.params", e.to_string()));
        }
        if matches!(estimator, EstimatorKind::Exact) && problem.exact.is_none() {
            return Err(fail(
                text,
                "estimator.kind",
                format!("`{}` has no closed-form conditional expectations", problem.name),
            ));
        }
        match self.scheme.kind {
            SchemeKind::Malliavin => {
                let gen = &problem.generator;
                if !gen.is_deterministic || gen.linear.is_none() || problem.terminal.d_xi.is_none() {
                    return Err(fail(
                        text,
                        "scheme.kind",
                        format!(
                            "the Malliavin scheme needs a deterministic linear generator and D ξ; `{}` lacks one",
                            problem.name
                        ),
                    ));
                }
            }
            SchemeKind::Implicit if !problem.generator.lipschitz.is_finite() => {
                return Err(fail(text, "scheme.kind", "the implicit scheme needs a finite Lipschitz constant"));
            }
            _ => {}
        }
        let scheme = SchemeConfig {
            picard,
            weight_variant: self.scheme.weight_variant,
            mesh_ratio_limit: self.scheme.mesh_ratio_limit,
        };
        Ok(Resolved {
            config: self,
            problem,
            estimator,
            scheme,
        })
    }

    fn resolve_estimator(&mut self, text: &str) -> Result<EstimatorKind, ConfigError> {
        let params = &mut self.estimator.params;
        let reject = |name: &str, present: bool, kind: &str| {
            if present {
                Err(fail(
                    text,
                    &format!("estimator.params.{name}"),
                    format!("does not apply to the {kind} estimator"),
                ))
            } else {
                Ok(())
            }
        };
        match self.estimator.kind {
            EstimatorName::Exact => {
                reject("degree", params.degree.is_some(), "exact")?;
                reject("ridge", params.ridge.is_some(), "exact")?;
                reject("basis", params.basis.is_some(), "exact")?;
                reject("inner", params.inner.is_some(), "exact")?;
                Ok(EstimatorKind::Exact)
            }
            EstimatorName::Lsmc => {
                reject("inner", params.inner.is_some(), "lsmc")?;
                let d = RegressionSpec::default();
                let spec = RegressionSpec {
                    degree: *params.degree.get_or_insert(d.degree),
                    ridge: *params.ridge.get_or_insert(d.ridge),
                    basis: *params.basis.get_or_insert(d.basis),
                };
                Ok(EstimatorKind::Regression(spec))
            }
            EstimatorName::Nested => {
                reject("degree", params.degree.is_some(), "nested")?;
                reject("ridge", params.ridge.is_some(), "nested")?;
                reject("basis", params.basis.is_some(), "nested")?;
                Ok(EstimatorKind::NestedMc {
                    inner: *params.inner.get_or_insert(DEFAULT_INNER),
                })
            }
        }
    }
}
