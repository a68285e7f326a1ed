//! Declarative barrier specifications.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{parse_barrier, ParseError};

pub const DEFAULT_STALENESS_TIMEOUT: f64 = 0.2;

fn default_staleness() -> f64 {
    DEFAULT_STALENESS_TIMEOUT
}

/// One tunable parameter. A missing `default` makes the parameter required
/// at instantiation; missing bounds are unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub name: String,
    pub default: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl ParamDecl {
    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

/// Binds state component `x[state]` to component `component` of the channel
/// named by the instantiation parameter `channel`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelBinding {
    pub state: usize,
    pub channel: String,
    pub component: usize,
}

/// A shareable safety function: expression, parameters, channel wiring and
/// filter/condition settings. Field order is the canonical document order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    pub name: String,
    pub version: String,
    pub description: String,
    pub state_dim: usize,
    pub expression: String,
    pub param_schema: Vec<ParamDecl>,
    pub channel_bindings: Vec<ChannelBinding>,
    pub alpha_gain: f64,
    #[serde(default)]
    pub margin: f64,
    #[serde(default = "default_staleness")]
    pub staleness_timeout: f64,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("malformed barrier spec at {path}: {message}")]
pub struct SpecFormatError {
    pub path: String,
    pub message: String,
}

impl BarrierSpec {
    pub fn from_json(text: &str) -> Result<BarrierSpec, SpecFormatError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| SpecFormatError { path: e.path().to_string(), message: e.into_inner().to_string() })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("specs always serialize");
        s.push('\n');
        s
    }

    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.param_schema.iter().find(|p| p.name == name)
    }

    /// Channel parameter names in first-use order.
    pub fn channel_params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for b in &self.channel_bindings {
            if !out.contains(&b.channel.as_str()) {
                out.push(&b.channel);
            }
        }
        out
    }

    pub fn defaults(&self) -> BTreeMap<String, f64> {
        self.param_schema.iter().filter_map(|p| p.default.map(|d| (p.name.clone(), d))).collect()
    }

    /// `name@version`
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecViolation {
    Name(String),
    Version { version: String, reason: String },
    StateDim,
    Expression(ParseError),
    StateIndex { index: usize, dim: usize },
    Unbound { index: usize },
    DuplicateBinding { index: usize },
    BindingOutOfRange { index: usize, dim: usize },
    ChannelParamName(String),
    UnknownParam(String),
    ParamName(String),
    DuplicateParam(String),
    ParamRange { name: String, detail: String },
    Gain(f64),
    Margin(f64),
    Staleness(f64),
    Tag(String),
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::Name(n) => write!(f, "name `{n}` is not an identifier"),
            SpecViolation::Version { version, reason } => write!(f, "version `{version}` is not semver: {reason}"),
            SpecViolation::StateDim => write!(f, "state_dim must be at least 1"),
            SpecViolation::Expression(e) => write!(f, "expression does not parse: {e}"),
            SpecViolation::StateIndex { index, dim } => {
                write!(f, "expression references x[{index}] but state_dim is {dim}")
            }
            SpecViolation::Unbound { index } => write!(f, "x[{index}] has no channel binding"),
            SpecViolation::DuplicateBinding { index } => write!(f, "x[{index}] has more than one channel binding"),
            SpecViolation::BindingOutOfRange { index, dim } => {
                write!(f, "channel binding for x[{index}] is out of range for state_dim {dim}")
            }
            SpecViolation::ChannelParamName(n) => write!(f, "channel parameter `{n}` is not an identifier"),
            SpecViolation::UnknownParam(p) => write!(f, "expression references p.{p} which is not in param_schema"),
            SpecViolation::ParamName(p) => write!(f, "parameter name `{p}` is not an identifier"),
            SpecViolation::DuplicateParam(p) => write!(f, "parameter `{p}` is declared twice"),
            SpecViolation::ParamRange { name, detail } => write!(f, "parameter `{name}`: {detail}"),
            SpecViolation::Gain(k) => write!(f, "alpha_gain must be positive and finite, got {k}"),
            SpecViolation::Margin(m) => write!(f, "margin must be non-negative and finite, got {m}"),
            SpecViolation::Staleness(t) => write!(f, "staleness_timeout must be positive and finite, got {t}"),
            SpecViolation::Tag(t) => write!(f, "tag `{t}` must be non-empty without whitespace"),
        }
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Check every spec invariant, collecting all violations.
pub fn validate_spec(spec: &BarrierSpec) -> Result<(), Vec<SpecViolation>> {
    let mut v = Vec::new();
    if !is_identifier(&spec.name) {
        v.push(SpecViolation::Name(spec.name.clone()));
    }
    if let Err(e) = semver::Version::parse(&spec.version) {
        v.push(SpecViolation::Version { version: spec.version.clone(), reason: e.to_string() });
    }
    let dim = spec.state_dim;
    if dim == 0 {
        v.push(SpecViolation::StateDim);
    }

    let mut declared = BTreeSet::new();
    for p in &spec.param_schema {
        if !is_identifier(&p.name) {
            v.push(SpecViolation::ParamName(p.name.clone()));
        }
        if !declared.insert(p.name.as_str()) {
            v.push(SpecViolation::DuplicateParam(p.name.clone()));
        }
        let range = |detail: String| SpecViolation::ParamRange { name: p.name.clone(), detail };
        for (label, bound) in [("min", p.min), ("max", p.max), ("default", p.default)] {
            if bound.is_some_and(|b| !b.is_finite()) {
                v.push(range(format!("{label} must be finite")));
            }
        }
        if let (Some(lo), Some(hi)) = (p.min, p.max) {
            if lo > hi {
                v.push(range(format!("min {lo} exceeds max {hi}")));
            }
        }
        if let Some(d) = p.default {
            if d.is_finite() && !p.contains(d) {
                v.push(range(format!(
                    "default {d} outside [{}, {}]",
                    p.min.map_or("-inf".into(), |m| m.to_string()),
                    p.max.map_or("inf".into(), |m| m.to_string())
                )));
            }
        }
    }

    let mut bound: BTreeMap<usize, usize> = BTreeMap::new();
    for b in &spec.channel_bindings {
        if b.state >= dim {
            v.push(SpecViolation::BindingOutOfRange { index: b.state, dim });
        }
        *bound.entry(b.state).or_default() += 1;
        if !is_identifier(&b.channel) {
            v.push(SpecViolation::ChannelParamName(b.channel.clone()));
        }
    }
    for (&index, &count) in &bound {
        if count > 1 && index < dim {
            v.push(SpecViolation::DuplicateBinding { index });
        }
    }

    match parse_barrier(&spec.expression) {
        Err(e) => v.push(SpecViolation::Expression(e)),
        Ok(expr) => {
            for index in expr.state_indices() {
                if index >= dim {
                    v.push(SpecViolation::StateIndex { index, dim });
                }
            }
            for p in expr.param_names() {
                if !declared.contains(p.as_str()) {
                    v.push(SpecViolation::UnknownParam(p));
                }
            }
        }
    }
    // The filter assembles the full state vector, so every component needs a source.
    for index in 0..dim {
        if !bound.contains_key(&index) {
            v.push(SpecViolation::Unbound { index });
        }
    }

    if !(spec.alpha_gain > 0.0 && spec.alpha_gain.is_finite()) {
        v.push(SpecViolation::Gain(spec.alpha_gain));
    }
    if !(spec.margin >= 0.0 && spec.margin.is_finite()) {
        v.push(SpecViolation::Margin(spec.margin));
    }
    if !(spec.staleness_timeout > 0.0 && spec.staleness_timeout.is_finite()) {
        v.push(SpecViolation::Staleness(spec.staleness_timeout));
    }
    for t in &spec.tags {
        if t.is_empty() || t.chars().any(char::is_whitespace) {
            v.push(SpecViolation::Tag(t.clone()));
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

const BATTERY_MIN: &str = include_str!("../../specs/battery_min.json");
const SPEED_LIMIT: &str = include_str!("../../specs/speed_limit.json");
const HUMAN_DISTANCE: &str = include_str!("../../specs/human_distance.json");

/// The shipped documents as `(name, text)`.
pub fn builtin_spec_documents() -> [(&'static str, &'static str); 3] {
    [("battery_min", BATTERY_MIN), ("human_distance", HUMAN_DISTANCE), ("speed_limit", SPEED_LIMIT)]
}

pub fn builtin_specs() -> Vec<BarrierSpec> {
    builtin_spec_documents()
        .iter()
        .map(|(_, text)| BarrierSpec::from_json(text).expect("shipped specs are well-formed"))
        .collect()
}

pub fn builtin_spec(name: &str) -> Option<BarrierSpec> {
    builtin_specs().into_iter().find(|s| s.name == name)
}

/// In-memory set of specs, keyed by name and version.
#[derive(Debug, Clone, Default)]
pub struct BarrierLibrary {
    specs: BTreeMap<String, BTreeMap<semver::Version, Arc<BarrierSpec>>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LibraryError {
    #[error("spec {id} is invalid: {}", .violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid { id: String, violations: Vec<SpecViolation> },
    #[error("malformed spec reference `{0}` (expected NAME or NAME@VERSION)")]
    Reference(String),
    #[error("unknown spec `{0}`")]
    Unknown(String),
}

impl BarrierLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut lib = Self::new();
        for s in builtin_specs() {
            lib.insert(s).expect("shipped specs validate");
        }
        lib
    }

    pub fn insert(&mut self, spec: BarrierSpec) -> Result<Arc<BarrierSpec>, LibraryError> {
        validate_spec(&spec).map_err(|violations| LibraryError::Invalid { id: spec.id(), violations })?;
        let version = semver::Version::parse(&spec.version).expect("validated");
        let spec = Arc::new(spec);
        self.specs.entry(spec.name.clone()).or_default().insert(version, spec.clone());
        Ok(spec)
    }

    /// Look up `NAME` (latest version) or `NAME@VERSION`.
    pub fn resolve(&self, reference: &str) -> Result<Arc<BarrierSpec>, LibraryError> {
        let (name, version) = match reference.split_once('@') {
            Some((n, v)) => {
                let v = semver::Version::parse(v).map_err(|_| LibraryError::Reference(reference.to_owned()))?;
                (n, Some(v))
            }
            None => (reference, None),
        };
        let versions = self.specs.get(name).ok_or_else(|| LibraryError::Unknown(reference.to_owned()))?;
        let found = match version {
            Some(v) => versions.get(&v),
            None => versions.values().next_back(),
        };
        found.cloned().ok_or_else(|| LibraryError::Unknown(reference.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn human() -> BarrierSpec {
        builtin_spec("human_distance").unwrap()
    }

    #[test]
    fn shipped_specs_validate() {
        let specs = builtin_specs();
        assert_eq!(specs.len(), 3);
        for s in &specs {
            assert_eq!(validate_spec(s), Ok(()), "{}", s.name);
        }
    }

    #[test]
    fn shipped_documents_are_canonical() {
        for (name, text) in builtin_spec_documents() {
            let spec = BarrierSpec::from_json(text).unwrap();
            assert_eq!(spec.name, name);
            assert_eq!(spec.to_json(), text, "{name} is not in canonical form");
        }
    }

    #[test]
    fn out_of_range_state_reference() {
        let mut s = human();
        s.state_dim = 2;
        s.expression = "x[0] + x[3]".into();
        s.channel_bindings.truncate(2);
        let errs = validate_spec(&s).unwrap_err();
        assert!(errs.contains(&SpecViolation::StateIndex { index: 3, dim: 2 }), "{errs:?}");
    }

    #[test]
    fn default_outside_range() {
        let mut s = human();
        s.param_schema[0].default = Some(-1.0);
        s.param_schema[0].min = Some(0.0);
        let errs = validate_spec(&s).unwrap_err();
        assert!(matches!(&errs[..], [SpecViolation::ParamRange { name, .. }] if name == "dmin"), "{errs:?}");
    }

    #[test]
    fn collects_every_violation() {
        let mut s = human();
        s.name = "human distance".into();
        s.version = "1.0".into();
        s.expression = "x[0] + p.unknown".into();
        s.alpha_gain = 0.0;
        s.margin = -1.0;
        s.staleness_timeout = 0.0;
        s.channel_bindings.push(ChannelBinding { state: 0, channel: "robot".into(), component: 0 });
        s.channel_bindings.push(ChannelBinding { state: 9, channel: "robot".into(), component: 0 });
        s.tags.push("two words".into());
        let errs = validate_spec(&s).unwrap_err();
        assert_eq!(errs.len(), 9, "{errs:#?}");
    }

    #[test]
    fn unbound_and_bad_expression() {
        let mut s = human();
        s.channel_bindings.retain(|b| b.state != 1);
        assert_eq!(validate_spec(&s), Err(vec![SpecViolation::Unbound { index: 1 }]));
        let mut s = human();
        s.expression = "foo(x[0])".into();
        assert!(matches!(&validate_spec(&s).unwrap_err()[..], [SpecViolation::Expression(_)]));
    }

    #[test]
    fn format_errors_locate_the_field() {
        let err = BarrierSpec::from_json(r#"{"name": "a", "version": 3}"#).unwrap_err();
        assert_eq!(err.path, "version");
    }

    #[test]
    fn library_resolves_latest_version() {
        let mut lib = BarrierLibrary::with_builtins();
        let mut newer = human();
        newer.version = "1.10.0".into();
        lib.insert(newer).unwrap();
        assert_eq!(lib.resolve("human_distance").unwrap().version, "1.10.0");
        assert_eq!(lib.resolve("human_distance@1.0.0").unwrap().version, "1.0.0");
        assert!(matches!(lib.resolve("human_distance@2.0.0"), Err(LibraryError::Unknown(_))));
        assert!(matches!(lib.resolve("human_distance@x"), Err(LibraryError::Reference(_))));
        let mut bad = human();
        bad.alpha_gain = -1.0;
        assert!(matches!(lib.insert(bad), Err(LibraryError::Invalid { .. })));
    }
}
