//! Logic-form retrieval.
//!
//! A question is planned into a short sequence of operator steps. Each step
//! is executed in order and its result recorded as a `(subquery, answer)`
//! pair; the resulting [`History`] is far smaller than a full context bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, Purpose};
use crate::prompts;
use crate::retrieval::{retrieve, QueryRepresentation, RetrievalConfig, RetrievalError};
use crate::store::GraphStore;
use crate::tokens::count_tokens;

pub const PLAN_OPEN: &str = "<<<PLAN";
pub const PLAN_CLOSE: &str = "PLAN>>>";

#[derive(Debug, Error)]
pub enum LogicError {
    /// Unparseable completion, unknown operator, bad reference or too many steps.
    #[error("plan decomposition failed: {0}")]
    DecompositionFailed(String),
    /// Execution halted; `partial` holds the steps completed before `step`.
    #[error("step {step} failed: {reason}")]
    StepExecutionFailed { step: usize, reason: String, partial: History },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    Retrieve,
    Filter,
    Aggregate,
    Math,
    Compare,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: usize,
    pub subquery: String,
    pub operator: Operator,
    #[serde(default)]
    pub args: serde_json::Map<String, Value>,
    #[serde(default)]
    pub refs: Vec<usize>,
}

impl PlanStep {
    fn str_arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty())
    }

    fn step_arg(&self, key: &str) -> Result<usize, LogicError> {
        let value = self.args.get(key).ok_or_else(|| self.invalid(format!("missing argument `{key}`")))?;
        step_ref(value).ok_or_else(|| self.invalid(format!("argument `{key}` is not a step reference")))
    }

    fn invalid(&self, reason: String) -> LogicError {
        LogicError::DecompositionFailed(format!("step {}: {reason}", self.id))
    }

    /// Every earlier step this step reads, from `refs` and its arguments.
    pub fn dependencies(&self) -> BTreeSet<usize> {
        let mut deps: BTreeSet<usize> = self.refs.iter().copied().collect();
        for key in ["source", "left", "right"] {
            if let Some(r) = self.args.get(key).and_then(step_ref) {
                deps.insert(r);
            }
        }
        if let Some(Value::Array(items)) = self.args.get("refs") {
            deps.extend(items.iter().filter_map(step_ref));
        }
        if let Some(expr) = self.str_arg("expr") {
            if let Ok(tokens) = lex(expr) {
                deps.extend(tokens.iter().filter_map(|t| match t {
                    Token::Step(n) => Some(*n),
                    _ => None,
                }));
            }
        }
        deps
    }
}

/// Accepts `3`, `"3"`, `"s3"` and `"#3"`.
fn step_ref(value: &Value) -> Option<usize> {
    match value {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => s.trim().trim_start_matches(['s', 'S', '#']).parse().ok(),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicPlan {
    pub steps: Vec<PlanStep>,
}

impl LogicPlan {
    /// Extracts and parses the JSON array between the plan sentinels.
    pub fn parse(completion: &str) -> Result<Self, LogicError> {
        let lines: Vec<&str> = completion.lines().collect();
        let open = lines.iter().position(|l| l.trim() == PLAN_OPEN);
        let close = lines.iter().rposition(|l| l.trim() == PLAN_CLOSE);
        let (Some(open), Some(close)) = (open, close) else {
            return Err(LogicError::DecompositionFailed("plan sentinels not found".into()));
        };
        if close <= open {
            return Err(LogicError::DecompositionFailed("plan sentinels out of order".into()));
        }
        let body = lines[open + 1..close].join("\n");
        let steps: Vec<PlanStep> =
            serde_json::from_str(&body).map_err(|e| LogicError::DecompositionFailed(e.to_string()))?;
        Ok(Self { steps })
    }

    /// Structural checks: consecutive ids from 1, backward-only references,
    /// per-operator arguments, and a single final Answer step.
    pub fn validate(&self, max_steps: usize) -> Result<(), LogicError> {
        if self.steps.is_empty() {
            return Err(LogicError::DecompositionFailed("plan has no steps".into()));
        }
        if self.steps.len() > max_steps {
            return Err(LogicError::DecompositionFailed(format!(
                "{} steps exceed the limit of {max_steps}",
                self.steps.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.id != i + 1 {
                return Err(LogicError::DecompositionFailed(format!("expected step id {}, found {}", i + 1, step.id)));
            }
            if step.subquery.trim().is_empty() {
                return Err(step.invalid("empty subquery".into()));
            }
            if let Some(bad) = step.dependencies().into_iter().find(|&d| d == 0 || d >= step.id) {
                return Err(step.invalid(format!("reference to step {bad} is not an earlier step")));
            }
            let last = i + 1 == self.steps.len();
            match step.operator {
                Operator::Answer if !last => return Err(step.invalid("Answer must be the last step".into())),
                Operator::Answer if step.dependencies().is_empty() => {
                    return Err(step.invalid("Answer must reference at least one step".into()))
                }
                _ if last && step.operator != Operator::Answer => {
                    return Err(step.invalid("the last step must be Answer".into()))
                }
                Operator::Filter => {
                    step.step_arg("source")?;
                    step.str_arg("condition").ok_or_else(|| step.invalid("missing condition".into()))?;
                }
                Operator::Aggregate => {
                    step.step_arg("source")?;
                    let f = step.str_arg("fn").unwrap_or("");
                    if AggregateFn::parse(f).is_none() {
                        return Err(step.invalid(format!("unknown aggregate `{f}`")));
                    }
                }
                Operator::Math => {
                    let expr = step.str_arg("expr").ok_or_else(|| step.invalid("missing expr".into()))?;
                    lex(expr).map_err(|e| step.invalid(e))?;
                }
                Operator::Compare => {
                    step.step_arg("left")?;
                    step.step_arg("right")?;
                }
                Operator::Retrieve | Operator::Answer => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AggregateFn {
    Count,
    Max,
    Min,
    Sum,
}

impl AggregateFn {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "count" => Some(Self::Count),
            "max" => Some(Self::Max),
            "min" => Some(Self::Min),
            "sum" => Some(Self::Sum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum StepValue {
    Items(Vec<String>),
    #[serde(with = "rational_string")]
    Number(BigRational),
    Text(String),
}

mod rational_string {
    use num::BigRational;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &BigRational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&value.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigRational, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Renders exact integers as integers and other values with up to six decimals.
pub fn format_number(value: &BigRational) -> String {
    if value.is_integer() {
        return value.to_integer().to_string();
    }
    let scale = BigInt::from(1_000_000);
    let scaled = (value * BigRational::from_integer(scale.clone())).round().to_integer();
    let negative = scaled.is_negative();
    let digits = scaled.abs().to_string();
    let digits = format!("{digits:0>7}");
    let (whole, frac) = digits.split_at(digits.len() - 6);
    let frac = frac.trim_end_matches('0');
    let sign = if negative { "-" } else { "" };
    if frac.is_empty() {
        format!("{sign}{whole}")
    } else {
        format!("{sign}{whole}.{frac}")
    }
}

impl fmt::Display for StepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Items(items) if items.is_empty() => f.write_str("(none)"),
            Self::Items(items) => f.write_str(&items.join("; ")),
            Self::Number(n) => f.write_str(&format_number(n)),
            Self::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_id: usize,
    pub subquery: String,
    pub operator: Operator,
    pub value: StepValue,
    /// Ids of the graph elements or chunks behind the value, parallel to
    /// the items for Retrieve and Filter.
    pub support: Vec<String>,
    /// Numbers mentioned by the subquery, ignored when reading a number off
    /// this step's items (so "heading days of Zhefu 802" does not yield 802).
    #[serde(skip)]
    pub ignored_numbers: Vec<BigRational>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub subquery: String,
    pub operator: Operator,
    pub answer: String,
    pub support: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
    pub total_tokens: usize,
}

impl History {
    pub fn push(&mut self, result: &StepResult) {
        self.entries.push(HistoryEntry {
            subquery: result.subquery.clone(),
            operator: result.operator,
            answer: result.value.to_string(),
            support: result.support.clone(),
        });
        self.total_tokens = count_tokens(&self.render());
    }

    pub fn render(&self) -> String {
        render_history(self)
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.render())
    }
}

/// `Q1: …\nA1: …\n` per entry, in step order.
pub fn render_history(history: &History) -> String {
    let mut out = String::new();
    for (i, e) in history.entries.iter().enumerate() {
        out.push_str(&format!("Q{n}: {}\nA{n}: {}\n", e.subquery, e.answer, n = i + 1));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogicConfig {
    pub max_steps: usize,
    pub retrieve_k: usize,
    pub retrieve_chunk_budget: usize,
    /// Facts kept per Retrieve step.
    pub retrieve_items: usize,
    /// Items judged per Filter step; the rest are dropped.
    pub filter_cap: usize,
    pub plan_temperature: f32,
    pub filter_temperature: f32,
}

impl Default for LogicConfig {
    fn default() -> Self {
        Self {
            max_steps: 8,
            retrieve_k: 5,
            retrieve_chunk_budget: 2048,
            retrieve_items: 5,
            filter_cap: 16,
            plan_temperature: 0.0,
            filter_temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicOutcome {
    pub plan: LogicPlan,
    pub results: Vec<StepResult>,
    pub history: History,
    pub answer: String,
}

pub fn plan_messages(query: &str, max_steps: usize) -> Vec<Message> {
    let max = max_steps.to_string();
    vec![Message::user(prompts::render(prompts::LOGIC_PLAN, &[("query", query), ("max_steps", &max)]))]
}

/// Asks the model for a plan and validates it.
pub fn decompose_to_plan(gateway: &Gateway, query: &str, config: &LogicConfig) -> Result<LogicPlan, LogicError> {
    if query.trim().is_empty() {
        return Err(LogicError::DecompositionFailed("empty query".into()));
    }
    let request = ChatRequest::new(plan_messages(query, config.max_steps))
        .temperature(config.plan_temperature)
        .max_output_tokens(1024);
    let completion = gateway.chat(Purpose::Plan, &request, None)?;
    let plan = LogicPlan::parse(&completion)?;
    plan.validate(config.max_steps)?;
    Ok(plan)
}

/// Plans and executes `query`.
pub fn run(
    gateway: &Gateway,
    store: &GraphStore,
    query: &str,
    retrieval: &RetrievalConfig,
    config: &LogicConfig,
) -> Result<LogicOutcome, LogicError> {
    let plan = decompose_to_plan(gateway, query, config)?;
    execute_plan(gateway, store, plan, retrieval, config)
}

pub fn execute_plan(
    gateway: &Gateway,
    store: &GraphStore,
    plan: LogicPlan,
    retrieval: &RetrievalConfig,
    config: &LogicConfig,
) -> Result<LogicOutcome, LogicError> {
    plan.validate(config.max_steps)?;
    let mut done: BTreeMap<usize, StepResult> = BTreeMap::new();
    let mut history = History::default();
    for step in &plan.steps {
        let result = match execute_step(gateway, store, step, &done, retrieval, config) {
            Ok(r) => r,
            Err(reason) => {
                tracing::debug!(step = step.id, %reason, "logic step failed");
                return Err(LogicError::StepExecutionFailed { step: step.id, reason, partial: history });
            }
        };
        tracing::debug!(step = step.id, operator = ?step.operator, value = %result.value, "logic step");
        history.push(&result);
        done.insert(step.id, result);
    }
    let results: Vec<StepResult> = done.into_values().collect();
    let answer = results.last().map(|r| r.value.to_string()).unwrap_or_default();
    Ok(LogicOutcome { plan, results, history, answer })
}

fn execute_step(
    gateway: &Gateway,
    store: &GraphStore,
    step: &PlanStep,
    done: &BTreeMap<usize, StepResult>,
    retrieval: &RetrievalConfig,
    config: &LogicConfig,
) -> Result<StepResult, String> {
    let get = |id: usize| done.get(&id).ok_or_else(|| format!("step {id} has no result"));
    let arg = |key: &str| step.step_arg(key).map_err(|e| e.to_string());
    let mut ignored_numbers = Vec::new();
    let mut support = Vec::new();
    let value = match step.operator {
        Operator::Retrieve => {
            let query = step.str_arg("query").unwrap_or(&step.subquery);
            ignored_numbers = numbers_in(query);
            let (items, ids) = retrieve_items(gateway, store, query, retrieval, config).map_err(|e| e.to_string())?;
            if items.is_empty() {
                return Err("nothing retrieved".into());
            }
            support = ids;
            StepValue::Items(items)
        }
        Operator::Filter => {
            let source = get(arg("source")?)?;
            ignored_numbers = source.ignored_numbers.clone();
            let condition = step.str_arg("condition").unwrap_or_default();
            let items = match &source.value {
                StepValue::Items(items) => items.clone(),
                other => vec![other.to_string()],
            };
            let mut kept = Vec::new();
            for (i, item) in items.into_iter().enumerate().take(config.filter_cap) {
                let prompt = prompts::render(prompts::FILTER_JUDGE, &[("condition", condition), ("item", &item)]);
                let verdict = gateway
                    .judge_messages(Purpose::Filter, vec![Message::user(prompt)], &[], config.filter_temperature)
                    .map_err(|e| e.to_string())?;
                if verdict.is_yes() {
                    kept.push(item);
                    support.extend(source.support.get(i).cloned());
                }
            }
            StepValue::Items(kept)
        }
        Operator::Aggregate => {
            let source = get(arg("source")?)?;
            support = source.support.clone();
            let f = AggregateFn::parse(step.str_arg("fn").unwrap_or_default()).expect("validated");
            let value = match (f, &source.value) {
                (AggregateFn::Count, StepValue::Items(items)) => BigRational::from_integer(items.len().into()),
                (AggregateFn::Count, _) => BigRational::one(),
                _ => {
                    let numbers: Vec<BigRational> = match &source.value {
                        StepValue::Number(n) => vec![n.clone()],
                        StepValue::Items(items) => {
                            items.iter().filter_map(|i| first_number(i, &source.ignored_numbers)).collect()
                        }
                        StepValue::Text(t) => first_number(t, &[]).into_iter().collect(),
                    };
                    if numbers.is_empty() {
                        return Err(format!("step {} has no numbers", source.step_id));
                    }
                    match f {
                        AggregateFn::Max => numbers.into_iter().max().expect("non-empty"),
                        AggregateFn::Min => numbers.into_iter().min().expect("non-empty"),
                        _ => numbers.into_iter().fold(BigRational::zero(), |a, b| a + b),
                    }
                }
            };
            StepValue::Number(value)
        }
        Operator::Math => {
            let tokens = lex(step.str_arg("expr").unwrap_or_default())?;
            let mut vars = BTreeMap::new();
            for t in &tokens {
                if let Token::Step(id) = t {
                    let source = get(*id)?;
                    let n = numeric_value(source).ok_or_else(|| format!("step {id} has no number"))?;
                    vars.insert(*id, n);
                    support.extend(source.support.iter().cloned());
                }
            }
            StepValue::Number(evaluate(&tokens, &vars)?)
        }
        Operator::Compare => {
            let left = get(arg("left")?)?;
            let right = get(arg("right")?)?;
            let (Some(l), Some(r)) = (numeric_value(left), numeric_value(right)) else {
                return Err("compare needs two numeric steps".into());
            };
            support = left.support.iter().chain(&right.support).cloned().collect();
            let relation = match l.cmp(&r) {
                std::cmp::Ordering::Greater => ">",
                std::cmp::Ordering::Less => "<",
                std::cmp::Ordering::Equal => "=",
            };
            StepValue::Text(format!(
                "{} {relation} {} (difference {})",
                format_number(&l),
                format_number(&r),
                format_number(&(&l - &r))
            ))
        }
        Operator::Answer => {
            let ids: Vec<usize> = match step.args.get("refs") {
                Some(Value::Array(items)) if !items.is_empty() => items.iter().filter_map(step_ref).collect(),
                _ => step.refs.clone(),
            };
            let mut parts = Vec::new();
            for id in ids {
                let source = get(id)?;
                parts.push(source.value.to_string());
                support.extend(source.support.iter().cloned());
            }
            StepValue::Text(parts.join("; "))
        }
    };
    let mut seen = BTreeSet::new();
    support.retain(|s| seen.insert(s.clone()));
    Ok(StepResult {
        step_id: step.id,
        subquery: step.subquery.trim().to_string(),
        operator: step.operator,
        value,
        support,
        ignored_numbers,
    })
}

/// Scoped retrieval for one subquery: the subquery is used directly as both
/// the low- and high-level keyword, no model call is made. Returns the
/// evidence lines without their id prefix, and the ids.
fn retrieve_items(
    gateway: &Gateway,
    store: &GraphStore,
    query: &str,
    retrieval: &RetrievalConfig,
    config: &LogicConfig,
) -> Result<(Vec<String>, Vec<String>), LogicError> {
    let scoped = RetrievalConfig {
        k_low: config.retrieve_k,
        k_high: config.retrieve_k,
        chunk_budget: config.retrieve_chunk_budget,
        ..retrieval.clone()
    };
    let rq = QueryRepresentation::build(
        gateway,
        query,
        vec![query.to_string()],
        vec![query.to_string()],
        retrieval.representation_budget,
    )?;
    let bundle = retrieve(&rq, store, &scoped)?;
    let strip = |line: &String| line.split_once("] ").map_or(line.clone(), |(_, rest)| rest.to_string());
    let (mut items, mut ids): (Vec<String>, Vec<String>) = bundle
        .node_section
        .iter()
        .zip(bundle.node_ids.iter().cloned())
        .chain(bundle.edge_section.iter().zip(bundle.edge_ids.iter().map(|(s, d)| format!("{s} -> {d}"))))
        .map(|(line, id)| (strip(line), id))
        .unzip();
    if items.is_empty() {
        items = bundle.chunk_section.iter().map(strip).collect();
        ids = bundle.chunk_ids.clone();
    }
    items.truncate(config.retrieve_items);
    ids.truncate(config.retrieve_items);
    Ok((items, ids))
}

/// The number a step stands for: its own number, or the first usable number
/// in its items or text. Items whose element the subquery names are read
/// before the rest.
pub fn numeric_value(result: &StepResult) -> Option<BigRational> {
    match &result.value {
        StepValue::Number(n) => Some(n.clone()),
        StepValue::Items(items) => {
            let subquery = result.subquery.to_lowercase();
            let named =
                |i: usize| result.support.get(i).is_some_and(|id| !id.is_empty() && subquery.contains(id.as_str()));
            let (first, rest): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| named(i));
            first.into_iter().chain(rest).find_map(|i| first_number(&items[i], &result.ignored_numbers))
        }
        StepValue::Text(t) => first_number(t, &result.ignored_numbers),
    }
}

fn parse_decimal(text: &str) -> Option<BigRational> {
    let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
    let digits = format!("{whole}{frac}");
    let numer: BigInt = digits.parse().ok()?;
    let denom = num::pow(BigInt::from(10), frac.len());
    Some(BigRational::new(numer, denom))
}

/// Decimal numbers standing as their own words, in order of appearance.
pub fn numbers_in(text: &str) -> Vec<BigRational> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let starts = chars[i].is_ascii_digit() && (i == 0 || !chars[i - 1].is_alphanumeric() && chars[i - 1] != '.');
        if !starts {
            i += 1;
            continue;
        }
        let negative = i > 0 && chars[i - 1] == '-' && (i == 1 || !chars[i - 2].is_alphanumeric());
        let mut j = i;
        while j < chars.len()
            && (chars[j].is_ascii_digit() || chars[j] == ',' && chars.get(j + 1).is_some_and(char::is_ascii_digit))
        {
            j += 1;
        }
        if j + 1 < chars.len() && chars[j] == '.' && chars[j + 1].is_ascii_digit() {
            j += 1;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
        }
        let literal: String = chars[i..j].iter().filter(|c| **c != ',').collect();
        if let Some(mut n) = parse_decimal(&literal) {
            if negative {
                n = -n;
            }
            out.push(n);
        }
        i = j;
    }
    out
}

fn first_number(text: &str, ignored: &[BigRational]) -> Option<BigRational> {
    numbers_in(text).into_iter().find(|n| !ignored.iter().any(|i| i == n || *i == -n.clone()))
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(BigRational),
    Step(usize),
    Op(char),
    Open,
    Close,
}

fn lex(expr: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = expr.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            _ if c.is_whitespace() => i += 1,
            '+' | '-' | '*' | '/' => {
                tokens.push(Token::Op(c));
                i += 1;
            }
            '(' => {
                tokens.push(Token::Open);
                i += 1;
            }
            ')' => {
                tokens.push(Token::Close);
                i += 1;
            }
            's' | 'S' | '#' => {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
                let id: usize = chars[start..j]
                    .iter()
                    .collect::<String>()
                    .parse()
                    .map_err(|_| format!("bad step reference at {i}"))?;
                tokens.push(Token::Step(id));
                i = j;
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_digit() || chars[j] == '.') {
                    j += 1;
                }
                let literal: String = chars[i..j].iter().collect();
                tokens.push(Token::Num(parse_decimal(&literal).ok_or_else(|| format!("bad number `{literal}`"))?));
                i = j;
            }
            _ => return Err(format!("unexpected `{c}` in expression")),
        }
    }
    if tokens.is_empty() {
        return Err("empty expression".into());
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    vars: &'a BTreeMap<usize, BigRational>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<BigRational, String> {
        let mut value = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            value = if op == '+' { value + rhs } else { value - rhs };
        }
        Ok(value)
    }

    fn term(&mut self) -> Result<BigRational, String> {
        let mut value = self.factor()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            if op == '*' {
                value *= rhs;
            } else if rhs.is_zero() {
                return Err("division by zero".into());
            } else {
                value /= rhs;
            }
        }
        Ok(value)
    }

    fn factor(&mut self) -> Result<BigRational, String> {
        let token = self.peek().cloned().ok_or("unexpected end of expression")?;
        self.pos += 1;
        match token {
            Token::Num(n) => Ok(n),
            Token::Step(id) => self.vars.get(&id).cloned().ok_or_else(|| format!("s{id} is undefined")),
            Token::Op('-') => Ok(-self.factor()?),
            Token::Op('+') => self.factor(),
            Token::Open => {
                let value = self.expr()?;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(value)
                    }
                    _ => Err("missing `)`".into()),
                }
            }
            other => Err(format!("unexpected {other:?}")),
        }
    }
}

fn evaluate(tokens: &[Token], vars: &BTreeMap<usize, BigRational>) -> Result<BigRational, String> {
    let mut parser = Parser { tokens, pos: 0, vars };
    let value = parser.expr()?;
    if parser.pos != tokens.len() {
        return Err("trailing tokens in expression".into());
    }
    Ok(value)
}

/// Evaluates an arithmetic expression over `sN` step values exactly.
pub fn evaluate_expression(expr: &str, vars: &BTreeMap<usize, BigRational>) -> Result<BigRational, String> {
    evaluate(&lex(expr)?, vars)
}

/// Lossy view for display and scoring.
pub fn to_f64(value: &BigRational) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}
