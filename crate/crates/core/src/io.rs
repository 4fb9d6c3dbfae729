//! Plain-text formats.
//!
//! Key-value files hold one `key = value` pair per line; blank lines and
//! lines starting with `#` are ignored. Rule files use dotted keys, e.g.
//!
//! ```text
//! rule.gopt.kind = truncated
//! rule.gopt.tau = 0.8125
//! rule.gopt.lambda.kind = pooled
//! rule.gopt.lambda.coef = 0.41,0.77
//! rule.gopt.lambda.part.0.kind = moment
//! rule.gopt.lambda.part.0.lo = -2.5,0,-2.49
//! ```
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a rule
//! read back evaluates bit-for-bit like the one written.
//!
//! Data files are CSV with a header row. A schema sidecar (also key-value)
//! names the columns:
//!
//! ```text
//! problem = ate_binary
//! first_phase = y,t,z1
//! second_phase = x
//! pilot = r1
//! second = r2
//! ```
//!
//! Missing second-phase cells are empty fields.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::eif::{Problem, ProblemKind};
use crate::error::{Error, Result};
use crate::moments::{BasisSpec, MomentModel};
use crate::pipeline::EstimateReport;
use crate::rule::{Lambda, SamplingRule};

/// Ordered key-value pairs; later duplicates are rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(Self { map })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse(format!("missing key '{key}'")))
    }

    pub fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| Error::Parse(format!("key '{key}' = '{raw}': {e}")))
    }

    pub fn numbers(&self, key: &str) -> Result<Vec<f64>> {
        parse_floats(self.require(key)?).map_err(|e| Error::Parse(format!("key '{key}': {e}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn parse_floats(s: &str) -> Result<Vec<f64>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("'{}': {e}", x.trim())))
        })
        .collect()
}

pub fn join_floats(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x}")).collect();
    parts.join(",")
}

fn write_lambda(kv: &mut KeyValues, prefix: &str, lambda: &Lambda) {
    match lambda {
        Lambda::Constant(c) => {
            kv.insert(format!("{prefix}.kind"), "constant");
            kv.insert(format!("{prefix}.value"), format!("{c}"));
        }
        Lambda::Table(values) => {
            kv.insert(format!("{prefix}.kind"), "table");
            kv.insert(format!("{prefix}.values"), join_floats(values));
        }
        Lambda::Moment(model) => {
            kv.insert(format!("{prefix}.kind"), "moment");
            write_model(kv, prefix, model);
        }
        Lambda::Pooled { parts, coef } => {
            kv.insert(format!("{prefix}.kind"), "pooled");
            kv.insert(format!("{prefix}.coef"), join_floats(coef));
            kv.insert(format!("{prefix}.parts"), parts.len().to_string());
            for (k, part) in parts.iter().enumerate() {
                write_lambda(kv, &format!("{prefix}.part.{k}"), part);
            }
        }
    }
}

/// Writes a moment model's basis ranges and coefficients under `prefix`.
pub fn write_model(kv: &mut KeyValues, prefix: &str, model: &MomentModel) {
    kv.insert(format!("{prefix}.lo"), join_floats(&model.basis.lo));
    kv.insert(format!("{prefix}.hi"), join_floats(&model.basis.hi));
    kv.insert(format!("{prefix}.gamma1"), join_floats(&model.gamma1));
    kv.insert(format!("{prefix}.gamma2"), join_floats(&model.gamma2));
}

pub fn read_model(kv: &KeyValues, prefix: &str) -> Result<MomentModel> {
    let basis = BasisSpec {
        lo: kv.numbers(&format!("{prefix}.lo"))?,
        hi: kv.numbers(&format!("{prefix}.hi"))?,
    };
    let gamma1 = kv.numbers(&format!("{prefix}.gamma1"))?;
    let gamma2 = kv.numbers(&format!("{prefix}.gamma2"))?;
    if basis.lo.len() != basis.hi.len() || gamma1.len() != basis.len() || gamma2.len() != basis.len() {
        return Err(Error::Parse(format!("model '{prefix}' has inconsistent dimensions")));
    }
    Ok(MomentModel { basis, gamma1, gamma2 })
}

fn read_lambda(kv: &KeyValues, prefix: &str) -> Result<Lambda> {
    Ok(match kv.require(&format!("{prefix}.kind"))? {
        "constant" => Lambda::Constant(kv.number(&format!("{prefix}.value"))?),
        "table" => Lambda::Table(kv.numbers(&format!("{prefix}.values"))?),
        "moment" => Lambda::Moment(Arc::new(read_model(kv, prefix)?)),
        "pooled" => {
            let count: usize = kv.number(&format!("{prefix}.parts"))?;
            let coef = kv.numbers(&format!("{prefix}.coef"))?;
            if coef.len() != count {
                return Err(Error::Parse(format!("'{prefix}' has {count} parts but {} coefficients", coef.len())));
            }
            let parts = (0..count)
                .map(|k| read_lambda(kv, &format!("{prefix}.part.{k}")))
                .collect::<Result<Vec<_>>>()?;
            Lambda::Pooled { parts, coef }
        }
        other => return Err(Error::Parse(format!("'{prefix}': unknown score kind '{other}'"))),
    })
}

pub fn write_rule(kv: &mut KeyValues, prefix: &str, rule: &SamplingRule) {
    match rule {
        SamplingRule::Uniform(c) => {
            kv.insert(format!("{prefix}.kind"), "uniform");
            kv.insert(format!("{prefix}.value"), format!("{c}"));
        }
        SamplingRule::Truncated { lambda, tau } => {
            kv.insert(format!("{prefix}.kind"), "truncated");
            kv.insert(format!("{prefix}.tau"), format!("{tau}"));
            write_lambda(kv, &format!("{prefix}.lambda"), lambda);
        }
        SamplingRule::Mixture {
            base,
            components,
            weights,
        } => {
            kv.insert(format!("{prefix}.kind"), "mixture");
            kv.insert(format!("{prefix}.weights"), join_floats(weights));
            write_rule(kv, &format!("{prefix}.base"), base);
            for (k, c) in components.iter().enumerate() {
                write_rule(kv, &format!("{prefix}.component.{k}"), c);
            }
        }
    }
}

pub fn read_rule(kv: &KeyValues, prefix: &str) -> Result<SamplingRule> {
    Ok(match kv.require(&format!("{prefix}.kind"))? {
        "uniform" => SamplingRule::Uniform(kv.number(&format!("{prefix}.value"))?),
        "truncated" => SamplingRule::Truncated {
            lambda: read_lambda(kv, &format!("{prefix}.lambda"))?,
            tau: kv.number(&format!("{prefix}.tau"))?,
        },
        "mixture" => {
            let weights = kv.numbers(&format!("{prefix}.weights"))?;
            let base = read_rule(kv, &format!("{prefix}.base"))?;
            let components = (0..weights.len())
                .map(|k| read_rule(kv, &format!("{prefix}.component.{k}")))
                .collect::<Result<Vec<_>>>()?;
            SamplingRule::mixture(base, components, weights)?
        }
        other => return Err(Error::Parse(format!("'{prefix}': unknown rule kind '{other}'"))),
    })
}

/// Column roles of a CSV data file.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub problem: Problem,
    pub first_phase: Vec<String>,
    pub second_phase: Vec<String>,
    pub pilot: Option<String>,
    pub second: Option<String>,
}

fn names(s: &str) -> Vec<String> {
    s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let kind = ProblemKind::parse(kv.require("problem")?)?;
        let first_phase = names(kv.require("first_phase")?);
        let second_phase = names(kv.require("second_phase")?);
        if first_phase.is_empty() || second_phase.is_empty() {
            return Err(Error::Parse("schema needs first_phase and second_phase columns".into()));
        }
        let dim = match kv.get("dim") {
            Some(d) => d.parse().map_err(|e| Error::Parse(format!("dim: {e}")))?,
            None => match kind {
                ProblemKind::Mean | ProblemKind::AteBinary => 1,
                ProblemKind::ClassificationTriple => 3,
                ProblemKind::MultiMean | ProblemKind::LinearCoef => second_phase.len(),
                ProblemKind::AteMulti => {
                    return Err(Error::Parse("ate_multi schemas must state 'dim' (arms − 1)".into()));
                }
            },
        };
        let mut problem = Problem::new(kind, dim)?;
        if let Some(p) = kv.get("known_propensity") {
            problem = problem.with_known_propensity(parse_floats(p)?)?;
        }
        Ok(Self {
            problem,
            first_phase,
            second_phase,
            pilot: kv.get("pilot").map(str::to_string),
            second: kv.get("second").map(str::to_string),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Rows read from a CSV according to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub v: Vec<Vec<f64>>,
    /// `None` where any second-phase cell is empty.
    pub u: Vec<Option<Vec<f64>>>,
    pub r1: Option<Vec<bool>>,
    pub r2: Option<Vec<bool>>,
}

fn parse_indicator(s: &str, row: usize, col: &str) -> Result<bool> {
    match s.trim() {
        "1" | "1.0" | "true" => Ok(true),
        "0" | "0.0" | "false" | "" => Ok(false),
        other => Err(Error::Parse(format!("row {row}, column '{col}': indicator '{other}'"))),
    }
}

pub fn read_csv(path: &Path, schema: &Schema) -> Result<CsvData> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("column '{name}' is not in the data header")))
    };
    let vcols = schema.first_phase.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let ucols = schema.second_phase.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let pcol = schema.pilot.as_deref().map(find).transpose()?;
    let scol = schema.second.as_deref().map(find).transpose()?;
    let mut out = CsvData {
        v: Vec::new(),
        u: Vec::new(),
        r1: pcol.map(|_| Vec::new()),
        r2: scol.map(|_| Vec::new()),
    };
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize| rec.get(c).unwrap_or("").trim();
        let num = |c: usize| -> Result<f64> {
            cell(c)
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}, column '{}': {e}", row + 1, header[c])))
        };
        out.v.push(vcols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
        let u = if ucols.iter().any(|&c| cell(c).is_empty()) {
            None
        } else {
            Some(ucols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?)
        };
        out.u.push(u);
        if let (Some(c), Some(r1)) = (pcol, out.r1.as_mut()) {
            r1.push(parse_indicator(cell(c), row + 1, &header[c])?);
        }
        if let (Some(c), Some(r2)) = (scol, out.r2.as_mut()) {
            r2.push(parse_indicator(cell(c), row + 1, &header[c])?);
        }
    }
    if out.v.is_empty() {
        return Err(Error::Parse("data file has no rows".into()));
    }
    Ok(out)
}

/// `# key = value` lines echoing an effective configuration.
pub fn comment_block(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

/// Estimate reports as CSV rows, one per component.
pub fn reports_csv(header: &str, reports: &[EstimateReport]) -> String {
    let mut out = String::from(header);
    out.push_str("component,estimator,rule,estimate,se,ci_lo,ci_hi,sampled_fraction\n");
    for r in reports {
        for j in 0..r.theta.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                j + 1,
                r.kind.name(),
                r.rule,
                r.theta[j],
                r.se[j],
                r.ci[j].0,
                r.ci[j].1,
                r.sampled_fraction
            );
        }
    }
    out
}

/// Rules designed from a pilot sample, with the fitted conditional-mean
/// models needed at estimation time.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleFile {
    pub problem: Problem,
    pub varpi: f64,
    pub kappa: f64,
    pub models: Vec<MomentModel>,
    pub rules: Vec<(String, SamplingRule)>,
}

impl RuleFile {
    pub fn rule(&self, name: &str) -> Option<&SamplingRule> {
        self.rules.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("problem", self.problem.kind.name());
        kv.insert("dim", self.problem.dim.to_string());
        if let Some(p) = &self.problem.known_propensity {
            kv.insert("known_propensity", join_floats(p));
        }
        kv.insert("varpi", format!("{}", self.varpi));
        kv.insert("kappa", format!("{}", self.kappa));
        kv.insert("models", self.models.len().to_string());
        for (j, m) in self.models.iter().enumerate() {
            write_model(&mut kv, &format!("model.{j}"), m);
        }
        let names: Vec<&str> = self.rules.iter().map(|(n, _)| n.as_str()).collect();
        kv.insert("rules", names.join(","));
        for (name, rule) in &self.rules {
            write_rule(&mut kv, &format!("rule.{name}"), rule);
        }
        kv
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut problem = Problem::new(ProblemKind::parse(kv.require("problem")?)?, kv.number("dim")?)?;
        if let Some(p) = kv.get("known_propensity") {
            problem = problem.with_known_propensity(parse_floats(p)?)?;
        }
        let count: usize = kv.number("models")?;
        if count != problem.dim {
            return Err(Error::Parse(format!("{count} models for a {}-dimensional problem", problem.dim)));
        }
        let models = (0..count)
            .map(|j| read_model(&kv, &format!("model.{j}")))
            .collect::<Result<Vec<_>>>()?;
        let rules = names(kv.require("rules")?)
            .into_iter()
            .map(|name| {
                let rule = read_rule(&kv, &format!("rule.{name}"))?;
                Ok((name, rule))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            problem,
            varpi: kv.number("varpi")?,
            kappa: kv.number("kappa")?,
            models,
            rules,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MomentModel {
        MomentModel {
            basis: BasisSpec {
                lo: vec![-2.5, 0.0],
                hi: vec![2.5, 1.0],
            },
            gamma1: vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
            gamma2: vec![1.0 / 3.0, 0.7, -0.8, 0.9, 1e-17, -2.0],
        }
    }

    #[test]
    fn key_values_parse_and_reject_duplicates() {
        let kv = KeyValues::parse("# c\n a = 1 \n\nb=x,y\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("x,y"));
        assert!(KeyValues::parse("a=1\na=2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }

    #[test]
    fn nested_rule_round_trips_exactly() {
        let m = Arc::new(model());
        let comp = SamplingRule::Truncated {
            lambda: Lambda::Pooled {
                parts: vec![Lambda::Moment(m.clone()), Lambda::Constant(0.3)],
                coef: vec![0.25, 1.0 / 7.0],
            },
            tau: 0.123456789,
        };
        let rule = SamplingRule::mixture(
            SamplingRule::Uniform(0.3),
            vec![comp, SamplingRule::Truncated { lambda: Lambda::Table(vec![1.0, 3.0]), tau: 4.0 }],
            vec![0.6, 0.1],
        )
        .unwrap();
        let mut kv = KeyValues::default();
        write_rule(&mut kv, "rule.x", &rule);
        let back = read_rule(&KeyValues::parse(&kv.to_text()).unwrap(), "rule.x").unwrap();
        assert_eq!(back, rule);
    }

    #[test]
    fn schema_defaults() {
        let s = Schema::parse("problem = linear_coef\nfirst_phase = y,z\nsecond_phase = x1,x2\n").unwrap();
        assert_eq!(s.problem.dim, 2);
        assert!(s.pilot.is_none());
        assert!(Schema::parse("problem = ate_multi\nfirst_phase = y,t\nsecond_phase = x\n").is_err());
    }
}
