//! The `feature(component)` model grammar.
//!
//! ```text
//! formula := [label ':'] term ('+' term)*
//! term    := feature '(' component ['%' split '%' level] ['$'] (',' name '=' number)* ')'
//! ```
//!
//! Whitespace is insignificant everywhere, so `KC. . Default.` and
//! `KC..Default.` name the same column. Feature names are case-insensitive.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnMap, Component};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Intercept,
    Lineafm,
    Linesuc,
    Linefail,
    Logitdec,
    Recency,
    Ppe,
    Base4,
}

/// A nonlinear parameter with its search box and starting value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub lower: f64,
    pub upper: f64,
    pub start: f64,
}

const fn param(name: &'static str, lower: f64, upper: f64, start: f64) -> ParamSpec {
    ParamSpec {
        name,
        lower,
        upper,
        start,
    }
}

const LOGITDEC_PARAMS: [ParamSpec; 1] = [param("w", 1e-3, 1.0, 0.9)];
const RECENCY_PARAMS: [ParamSpec; 1] = [param("d", 0.0, 3.0, 0.5)];
const PPE_PARAMS: [ParamSpec; 4] = [
    param("x", 0.0, 2.0, 0.6),
    param("c", 0.0, 1.0, 0.1),
    param("b", 0.0, 1.0, 0.04),
    param("m", 0.0, 1.0, 0.08),
];
const BASE4_PARAMS: [ParamSpec; 4] = [
    param("x", 0.0, 1.0, 0.3),
    param("c", 0.0, 1.0, 0.3),
    param("d", 0.0, 1.0, 0.3),
    param("s0", 0.1, 3600.0, 10.0),
];

impl Feature {
    pub const ALL: [Feature; 8] = [
        Feature::Intercept,
        Feature::Lineafm,
        Feature::Linesuc,
        Feature::Linefail,
        Feature::Logitdec,
        Feature::Recency,
        Feature::Ppe,
        Feature::Base4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Intercept => "intercept",
            Feature::Lineafm => "lineafm",
            Feature::Linesuc => "linesuc",
            Feature::Linefail => "linefail",
            Feature::Logitdec => "logitdec",
            Feature::Recency => "recency",
            Feature::Ppe => "ppe",
            Feature::Base4 => "base4",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name().eq_ignore_ascii_case(name))
    }

    /// Counting features may be split by comparison and fitted per level.
    pub fn is_counting(self) -> bool {
        matches!(self, Feature::Lineafm | Feature::Linesuc | Feature::Linefail)
    }

    pub fn params(self) -> &'static [ParamSpec] {
        match self {
            Feature::Logitdec => &LOGITDEC_PARAMS,
            Feature::Recency => &RECENCY_PARAMS,
            Feature::Ppe => &PPE_PARAMS,
            Feature::Base4 => &BASE4_PARAMS,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitLevel {
    Same,
    Different,
}

impl SplitLevel {
    pub fn name(self) -> &'static str {
        match self {
            SplitLevel::Same => "Same",
            SplitLevel::Different => "Different",
        }
    }
}

pub const COMPARISON_SPLIT: &str = "Comparison";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub feature: Feature,
    pub component: Component,
    /// One coefficient per level of the component (`$`).
    pub per_level: bool,
    /// Restrict counting to earlier trials carrying this comparison tag.
    pub split: Option<SplitLevel>,
    /// Nonlinear parameters pinned in the formula; the rest are fitted.
    pub fixed_params: BTreeMap<String, f64>,
}

impl Term {
    pub fn new(feature: Feature, component: Component) -> Self {
        Term {
            feature,
            component,
            per_level: feature == Feature::Intercept,
            split: None,
            fixed_params: BTreeMap::new(),
        }
    }

    pub fn split(mut self, level: SplitLevel) -> Self {
        self.split = Some(level);
        self
    }

    pub fn pin(mut self, name: &str, value: f64) -> Self {
        self.fixed_params.insert(name.to_owned(), value);
        self
    }

    /// Whether the term expands to one column per component level.
    pub fn expands_levels(&self) -> bool {
        self.feature == Feature::Intercept || self.per_level
    }

    /// Identity of the term without pinned parameters, used for column names.
    pub fn label(&self, columns: &ColumnMap) -> String {
        let mut out = format!("{}({}", self.feature.name(), columns.component_name(self.component));
        if let Some(level) = self.split {
            out.push('%');
            out.push_str(COMPARISON_SPLIT);
            out.push('%');
            out.push_str(level.name());
        }
        if self.per_level && self.feature != Feature::Intercept {
            out.push('$');
        }
        out.push(')');
        out
    }

    pub fn render(&self, columns: &ColumnMap) -> String {
        let mut out = self.label(columns);
        if !self.fixed_params.is_empty() {
            out.pop();
            // declaration order, not map order
            for spec in self.feature.params() {
                if let Some(v) = self.fixed_params.get(spec.name) {
                    out.push_str(&format!(", {}={}", spec.name, v));
                }
            }
            out.push(')');
        }
        out
    }

    fn identity(&self) -> (Feature, Component, Option<SplitLevel>) {
        (self.feature, self.component, self.split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: Option<String>,
    pub terms: Vec<Term>,
}

/// Position of one free nonlinear parameter inside a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeParam {
    pub term: usize,
    pub param: usize,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        ModelSpec { name: None, terms }
    }

    /// Free nonlinear parameters in term order, then declaration order.
    pub fn free_params(&self) -> Vec<FreeParam> {
        let mut out = Vec::new();
        for (term_idx, term) in self.terms.iter().enumerate() {
            for (param_idx, spec) in term.feature.params().iter().enumerate() {
                if !term.fixed_params.contains_key(spec.name) {
                    out.push(FreeParam {
                        term: term_idx,
                        param: param_idx,
                    });
                }
            }
        }
        out
    }

    pub fn param_spec(&self, p: FreeParam) -> ParamSpec {
        self.terms[p.term].feature.params()[p.param]
    }

    pub fn has_nonlinear_terms(&self) -> bool {
        self.terms.iter().any(|t| !t.feature.params().is_empty())
    }

    /// Check the structural invariants that the parser enforces.
    pub fn validate(&self) -> Result<(), ParseError> {
        if self.terms.is_empty() {
            return Err(ParseError::new(0, "model has no terms"));
        }
        for (i, term) in self.terms.iter().enumerate() {
            if term.split.is_some() && !term.feature.is_counting() {
                return Err(ParseError::new(
                    0,
                    format!("`{}` cannot take a comparison split", term.feature.name()),
                ));
            }
            if term.per_level && !term.feature.is_counting() && term.feature != Feature::Intercept {
                return Err(ParseError::new(
                    0,
                    format!(
                        "`$` is only supported on counting features, not `{}`",
                        term.feature.name()
                    ),
                ));
            }
            for (name, &value) in &term.fixed_params {
                check_param(term.feature, name, value, 0)?;
            }
            if self.terms[..i].iter().any(|t| t.identity() == term.identity()) {
                return Err(ParseError::new(0, format!("duplicate term `{}`", term.feature.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at offset {offset}: {message}")]
pub struct ParseError {
    /// Byte offset into the original formula.
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError {
            offset,
            message: message.into(),
        }
    }
}

fn check_param(feature: Feature, name: &str, value: f64, offset: usize) -> Result<(), ParseError> {
    let spec = feature
        .params()
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ParseError::new(offset, format!("`{}` has no parameter `{name}`", feature.name())))?;
    if !(spec.lower..=spec.upper).contains(&value) {
        return Err(ParseError::new(
            offset,
            format!("{name}={value} outside [{}, {}]", spec.lower, spec.upper),
        ));
    }
    Ok(())
}

struct Cursor<'a> {
    chars: Vec<(usize, char)>,
    pos: usize,
    end_offset: usize,
    _src: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str, start: usize) -> Self {
        let chars = src[start..]
            .char_indices()
            .filter(|(_, c)| !c.is_whitespace())
            .map(|(i, c)| (i + start, c))
            .collect();
        Cursor {
            chars,
            pos: 0,
            end_offset: src.len(),
            _src: src,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn offset(&self) -> usize {
        self.chars.get(self.pos).map_or(self.end_offset, |&(i, _)| i)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        self.pos += 1;
        c
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(ParseError::new(
                self.offset(),
                format!("expected `{want}`, found `{c}`"),
            )),
            None => Err(ParseError::new(
                self.offset(),
                format!("expected `{want}`, found end of input"),
            )),
        }
    }

    /// Consume characters until one of `stops` (exclusive).
    fn take_until(&mut self, stops: &[char]) -> (usize, String) {
        let start = self.offset();
        let mut out = String::new();
        while let Some(c) = self.peek() {
            if stops.contains(&c) {
                break;
            }
            out.push(c);
            self.pos += 1;
        }
        (start, out)
    }
}

const RESERVED: [char; 7] = ['(', ')', '%', '$', ',', '+', '='];

/// Parse a formula, resolving component names through `columns`.
pub fn parse_model(text: &str, columns: &ColumnMap) -> Result<ModelSpec, ParseError> {
    let (name, body_start) = match (text.find(':'), text.find('(')) {
        (Some(colon), paren) if paren.is_none_or(|p| colon < p) => {
            let label = text[..colon].trim();
            (Some(label.to_owned()).filter(|l| !l.is_empty()), colon + 1)
        }
        _ => (None, 0),
    };
    let mut cur = Cursor::new(text, body_start);
    let mut terms: Vec<Term> = Vec::new();
    loop {
        let term_offset = cur.offset();
        let term = parse_term(&mut cur, columns)?;
        if terms.iter().any(|t| t.identity() == term.identity()) {
            return Err(ParseError::new(
                term_offset,
                format!("duplicate term `{}`", term.label(columns)),
            ));
        }
        terms.push(term);
        match cur.bump() {
            None => break,
            Some('+') => continue,
            Some(c) => {
                cur.pos -= 1;
                return Err(ParseError::new(
                    cur.offset(),
                    format!("expected `+` or end of formula, found `{c}`"),
                ));
            }
        }
    }
    Ok(ModelSpec { name, terms })
}

fn parse_term(cur: &mut Cursor<'_>, columns: &ColumnMap) -> Result<Term, ParseError> {
    let (feature_offset, feature_name) = cur.take_until(&RESERVED);
    if feature_name.is_empty() {
        return Err(match cur.peek() {
            None => ParseError::new(feature_offset, "expected a term, found end of input"),
            Some(c) => ParseError::new(feature_offset, format!("expected a feature name, found `{c}`")),
        });
    }
    let feature = Feature::from_name(&feature_name)
        .ok_or_else(|| ParseError::new(feature_offset, format!("unknown feature `{feature_name}`")))?;
    cur.expect('(')?;

    let (component_offset, component_name) = cur.take_until(&RESERVED);
    if component_name.is_empty() {
        return Err(ParseError::new(component_offset, "missing component"));
    }
    let component = columns
        .resolve_component(&component_name)
        .ok_or_else(|| ParseError::new(component_offset, format!("unknown component `{component_name}`")))?;
    let mut term = Term::new(feature, component);

    let mut dollar = cur.peek() == Some('$');
    if dollar {
        cur.bump();
    }
    if cur.peek() == Some('%') {
        let split_offset = cur.offset();
        cur.bump();
        let (var_offset, variable) = cur.take_until(&RESERVED);
        if variable != COMPARISON_SPLIT {
            return Err(ParseError::new(
                var_offset,
                format!("unknown split variable `{variable}`"),
            ));
        }
        cur.expect('%')?;
        let (level_offset, level) = cur.take_until(&RESERVED);
        let level = match level.as_str() {
            "Same" => SplitLevel::Same,
            "Different" => SplitLevel::Different,
            other => {
                return Err(ParseError::new(
                    level_offset,
                    format!("unknown comparison level `{other}`"),
                ));
            }
        };
        if !feature.is_counting() {
            return Err(ParseError::new(
                split_offset,
                format!("`{}` cannot take a comparison split", feature.name()),
            ));
        }
        term.split = Some(level);
        if cur.peek() == Some('$') {
            if dollar {
                return Err(ParseError::new(cur.offset(), "repeated `$`"));
            }
            dollar = true;
            cur.bump();
        }
    }
    if dollar {
        if !feature.is_counting() && feature != Feature::Intercept {
            return Err(ParseError::new(
                component_offset,
                format!("`$` is only supported on counting features, not `{}`", feature.name()),
            ));
        }
        term.per_level = true;
    }

    while cur.peek() == Some(',') {
        cur.bump();
        let (name_offset, name) = cur.take_until(&RESERVED);
        if name.is_empty() {
            return Err(ParseError::new(name_offset, "expected a parameter name"));
        }
        cur.expect('=')?;
        let (value_offset, raw) = cur.take_until(&['(', ')', ',', '%', '$', '=']);
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ParseError::new(value_offset, format!("invalid number `{raw}`")))?;
        check_param(feature, &name, value, name_offset)?;
        if term.fixed_params.insert(name.clone(), value).is_some() {
            return Err(ParseError::new(name_offset, format!("parameter `{name}` given twice")));
        }
    }
    cur.expect(')')?;
    Ok(term)
}

/// Canonical single-line formula.
pub fn render_model(spec: &ModelSpec, columns: &ColumnMap) -> String {
    let body = spec
        .terms
        .iter()
        .map(|t| t.render(columns))
        .collect::<Vec<_>>()
        .join("+");
    match &spec.name {
        Some(name) => format!("{name}: {body}"),
        None => body,
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_model(self, &ColumnMap::default()))
    }
}

/// The named models compared in the result tables, with the default
/// column names.
pub mod catalog {
    const BASE: &str = "logitdec(Anon.Student.Id)+intercept(Problem.Name)";
    const AFM: &str = "lineafm(KC..Default.)";
    const PFA: &str = "linesuc(KC..Default.)+linefail(KC..Default.)";
    const A_AFM: &str = "lineafm(KC..Default.%Comparison%Same)+lineafm(KC..Default.%Comparison%Different)";
    const A_PFA: &str = "linesuc(KC..Default.%Comparison%Same)+linefail(KC..Default.%Comparison%Same)+\
                         linesuc(KC..Default.%Comparison%Different)+linefail(KC..Default.%Comparison%Different)";

    pub const NAMES: [&str; 12] = [
        "AFM",
        "PFA",
        "AFM+recency",
        "PFA+recency",
        "AFM+ppe",
        "PFA+ppe",
        "AFM+base4",
        "PFA+base4",
        "a-AFM",
        "a-PFA",
        "a-AFM+recency",
        "a-AFM+ppe",
    ];

    /// Formula for a catalog model name (case-insensitive).
    pub fn formula(name: &str) -> Option<String> {
        let canonical = NAMES.iter().find(|n| n.eq_ignore_ascii_case(name.trim()))?;
        let (core, extra) = match canonical.split_once('+') {
            Some((core, extra)) => (core, Some(extra)),
            None => (*canonical, None),
        };
        let counts = match core {
            "AFM" => AFM,
            "PFA" => PFA,
            "a-AFM" => A_AFM,
            "a-PFA" => A_PFA,
            _ => return None,
        };
        let mut out = format!("{canonical}: {BASE}+{counts}");
        if let Some(extra) = extra {
            out.push_str(&format!("+{extra}(KC..Default.)"));
        }
        Some(out)
    }
}
