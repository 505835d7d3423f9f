//! Typed concrete states, transitions and traces, and ingestion of JSONL event logs.
//!
//! Every tool call contributes one [`Transition`] `pre --action--> post`.
//! Traces are chains of transitions (the post state of step `i` equals the
//! pre state of step `i + 1`). A [`TraceLog`] is append-only, so the
//! [`StateRef`] positions handed out for stored states stay valid forever.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("trace {trace_id}: chain break between step {step} and step {}", step + 1)]
    ChainBreak { trace_id: String, step: usize },
    #[error("trace {trace_id}: duplicate seq {seq}")]
    DuplicateSeq { trace_id: String, seq: u64 },
    #[error("trace {trace_id}: {message}")]
    BadSequence { trace_id: String, message: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<TraceError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TraceError {
    /// Strips line context.
    pub fn root(&self) -> &TraceError {
        match self {
            TraceError::AtLine { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Type tag of a [`Value`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeTag {
    Number,
    Integer,
    Boolean,
    Text,
    Collection,
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TypeTag::Number => "number",
            TypeTag::Integer => "integer",
            TypeTag::Boolean => "boolean",
            TypeTag::Text => "text",
            TypeTag::Collection => "collection",
        };
        f.write_str(s)
    }
}

/// A typed variable value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Integer(i64),
    Boolean(bool),
    Text(String),
    Collection(Vec<Value>),
}

impl Value {
    pub fn tag(&self) -> TypeTag {
        match self {
            Value::Number(_) => TypeTag::Number,
            Value::Integer(_) => TypeTag::Integer,
            Value::Boolean(_) => TypeTag::Boolean,
            Value::Text(_) => TypeTag::Text,
            Value::Collection(_) => TypeTag::Collection,
        }
    }

    /// Numeric view of `Number` and `Integer` values.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn cardinality(&self) -> Option<usize> {
        match self {
            Value::Collection(items) => Some(items.len()),
            _ => None,
        }
    }

    /// Integral JSON numbers become `Integer`, everything else numeric becomes `Number`.
    pub fn from_json(v: &Json) -> Result<Value, String> {
        match v {
            Json::Bool(b) => Ok(Value::Boolean(*b)),
            Json::String(s) => Ok(Value::Text(s.clone())),
            Json::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Value::Integer(i))
                } else if let Some(x) = n.as_f64() {
                    Ok(Value::Number(x))
                } else {
                    Err(format!("number {n} out of range"))
                }
            }
            Json::Array(items) => items
                .iter()
                .map(Value::from_json)
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Collection),
            Json::Null => Err("null is not a supported value".into()),
            Json::Object(_) => Err("objects are not supported as variable values".into()),
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Number(x) => serde_json::Number::from_f64(*x)
                .map(Json::Number)
                .unwrap_or(Json::Null),
            Value::Integer(i) => Json::from(*i),
            Value::Boolean(b) => Json::Bool(*b),
            Value::Text(s) => Json::String(s.clone()),
            Value::Collection(items) => Json::Array(items.iter().map(Value::to_json).collect()),
        }
    }
}

/// Features exposed to predicates for one value.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSet {
    Numeric(f64),
    Truth(bool),
    Structure { cardinality: usize, empty: bool },
    /// Text only supports identity comparisons.
    Text(String),
}

pub fn derive_features(v: &Value) -> FeatureSet {
    match v {
        Value::Number(x) => FeatureSet::Numeric(*x),
        Value::Integer(i) => FeatureSet::Numeric(*i as f64),
        Value::Boolean(b) => FeatureSet::Truth(*b),
        Value::Text(s) => FeatureSet::Text(s.clone()),
        Value::Collection(items) => FeatureSet::Structure {
            cardinality: items.len(),
            empty: items.is_empty(),
        },
    }
}

/// Which part of the snapshot a variable belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Goal,
    Check,
    State,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Goal, Partition::Check, Partition::State];

    pub fn key(self) -> &'static str {
        match self {
            Partition::Goal => "goal",
            Partition::Check => "check",
            Partition::State => "state",
        }
    }
}

/// Snapshot `<goal, check, state>` of the agent at one tool invocation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConcreteState {
    goal: BTreeMap<String, Value>,
    check: BTreeMap<String, Value>,
    state: BTreeMap<String, Value>,
}

impl ConcreteState {
    pub fn new(
        goal: BTreeMap<String, Value>,
        check: BTreeMap<String, Value>,
        state: BTreeMap<String, Value>,
    ) -> Result<Self, TraceError> {
        let s = ConcreteState { goal, check, state };
        let mut seen = BTreeMap::new();
        for (p, name, _) in s.variables() {
            if let Some(prev) = seen.insert(name, p) {
                return Err(TraceError::SchemaViolation(format!(
                    "variable `{name}` appears in both {} and {}",
                    prev.key(),
                    p.key()
                )));
            }
        }
        Ok(s)
    }

    pub fn partition(&self, p: Partition) -> &BTreeMap<String, Value> {
        match p {
            Partition::Goal => &self.goal,
            Partition::Check => &self.check,
            Partition::State => &self.state,
        }
    }

    /// Looks a variable up in any partition.
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.goal
            .get(name)
            .or_else(|| self.check.get(name))
            .or_else(|| self.state.get(name))
    }

    /// All variables as `(partition, name, value)`, partition-major then by name.
    pub fn variables(&self) -> impl Iterator<Item = (Partition, &str, &Value)> {
        Partition::ALL.into_iter().flat_map(move |p| {
            self.partition(p)
                .iter()
                .map(move |(k, v)| (p, k.as_str(), v))
        })
    }

    pub fn from_json(v: &Json) -> Result<Self, TraceError> {
        let obj = v
            .as_object()
            .ok_or_else(|| TraceError::SchemaViolation("snapshot must be an object".into()))?;
        let mut parts: [BTreeMap<String, Value>; 3] = Default::default();
        for (slot, p) in parts.iter_mut().zip(Partition::ALL) {
            let section = obj.get(p.key()).ok_or_else(|| {
                TraceError::SchemaViolation(format!("snapshot is missing `{}`", p.key()))
            })?;
            let section = section.as_object().ok_or_else(|| {
                TraceError::SchemaViolation(format!("snapshot `{}` must be an object", p.key()))
            })?;
            for (name, raw) in section {
                let value = Value::from_json(raw).map_err(|e| {
                    TraceError::SchemaViolation(format!("variable `{name}`: {e}"))
                })?;
                slot.insert(name.clone(), value);
            }
        }
        let [goal, check, state] = parts;
        ConcreteState::new(goal, check, state)
    }

    pub fn to_json(&self) -> Json {
        let mut obj = Map::new();
        for p in Partition::ALL {
            let section: Map<String, Json> = self
                .partition(p)
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect();
            obj.insert(p.key().to_string(), Json::Object(section));
        }
        Json::Object(obj)
    }
}

/// A tool invocation. Equality is by name only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionSymbol {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args_digest: Option<String>,
}

impl ActionSymbol {
    pub fn new(name: impl Into<String>) -> Self {
        ActionSymbol {
            name: name.into(),
            args_digest: None,
        }
    }
}

impl PartialEq for ActionSymbol {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl Eq for ActionSymbol {}

impl fmt::Display for ActionSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub pre: ConcreteState,
    pub action: ActionSymbol,
    pub post: ConcreteState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Success,
    Failure,
    Truncated,
    Unknown,
}

impl TerminalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalStatus::Success => "success",
            TerminalStatus::Failure => "failure",
            TerminalStatus::Truncated => "truncated",
            TerminalStatus::Unknown => "unknown",
        }
    }
}

/// Position of one concrete state in a [`TraceLog`]: `pos` 0 is the initial
/// state, `pos = i + 1` is the post state of step `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateRef {
    pub trace: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    trace_id: String,
    initial: Option<ConcreteState>,
    steps: Vec<Transition>,
    terminal_status: TerminalStatus,
}

impl Trace {
    /// Builds a trace, checking the chain property. `initial` is only needed
    /// for traces without steps; otherwise it must equal `steps[0].pre`.
    pub fn new(
        trace_id: impl Into<String>,
        initial: Option<ConcreteState>,
        steps: Vec<Transition>,
        terminal_status: TerminalStatus,
    ) -> Result<Self, TraceError> {
        let trace_id = trace_id.into();
        for (i, pair) in steps.windows(2).enumerate() {
            if pair[0].post != pair[1].pre {
                return Err(TraceError::ChainBreak { trace_id, step: i });
            }
        }
        let initial = match (initial, steps.first()) {
            (Some(init), Some(first)) if init != first.pre => {
                return Err(TraceError::BadSequence {
                    trace_id,
                    message: "initial snapshot differs from the pre state of step 0".into(),
                })
            }
            (_, Some(first)) => Some(first.pre.clone()),
            (init, None) => init,
        };
        Ok(Trace {
            trace_id,
            initial,
            steps,
            terminal_status,
        })
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn terminal_status(&self) -> TerminalStatus {
        self.terminal_status
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of concrete states (0 for an empty trace without an initial snapshot).
    pub fn num_states(&self) -> usize {
        if self.initial.is_some() {
            self.steps.len() + 1
        } else {
            0
        }
    }

    pub fn state(&self, pos: usize) -> Option<&ConcreteState> {
        if pos == 0 {
            self.initial.as_ref()
        } else {
            self.steps.get(pos - 1).map(|t| &t.post)
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &ConcreteState> {
        (0..self.num_states()).filter_map(move |i| self.state(i))
    }

    /// Action taken from the state at `pos`, `None` for the final state.
    pub fn next_action(&self, pos: usize) -> Option<&ActionSymbol> {
        self.steps.get(pos).map(|t| &t.action)
    }

    /// Re-serializes the trace as events (explicit pre/post snapshots).
    pub fn to_events(&self) -> Vec<Event> {
        let mut events = Vec::with_capacity(self.steps.len() + 2);
        let mut seq = 0;
        if self.steps.is_empty() {
            if let Some(init) = &self.initial {
                events.push(Event {
                    trace_id: self.trace_id.clone(),
                    seq,
                    kind: EventKind::Initial(init.clone()),
                });
                seq += 1;
            }
        }
        for step in &self.steps {
            events.push(Event {
                trace_id: self.trace_id.clone(),
                seq,
                kind: EventKind::ToolCall {
                    action: step.action.clone(),
                    pre: Some(step.pre.clone()),
                    post: step.post.clone(),
                },
            });
            seq += 1;
        }
        if matches!(
            self.terminal_status,
            TerminalStatus::Success | TerminalStatus::Failure
        ) {
            events.push(Event {
                trace_id: self.trace_id.clone(),
                seq,
                kind: EventKind::Terminal(self.terminal_status),
            });
        }
        events
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Initial(ConcreteState),
    ToolCall {
        action: ActionSymbol,
        /// Absent when the log only records post snapshots.
        pre: Option<ConcreteState>,
        post: ConcreteState,
    },
    Terminal(TerminalStatus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub trace_id: String,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    pub fn to_json(&self) -> Json {
        match &self.kind {
            EventKind::Initial(s) => json!({
                "trace_id": self.trace_id,
                "seq": self.seq,
                "kind": "initial",
                "state": s.to_json(),
            }),
            EventKind::ToolCall { action, pre, post } => {
                let mut obj = Map::new();
                obj.insert("trace_id".into(), json!(self.trace_id));
                obj.insert("seq".into(), json!(self.seq));
                obj.insert("kind".into(), json!("tool_call"));
                obj.insert("action".into(), json!(action.name));
                if let Some(d) = &action.args_digest {
                    obj.insert("args_digest".into(), json!(d));
                }
                if let Some(pre) = pre {
                    obj.insert("pre".into(), pre.to_json());
                }
                obj.insert("post".into(), post.to_json());
                Json::Object(obj)
            }
            EventKind::Terminal(status) => json!({
                "trace_id": self.trace_id,
                "seq": self.seq,
                "kind": "terminal",
                "status": status.as_str(),
            }),
        }
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }
}

/// The variable schema of a log, frozen by the first snapshot seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    vars: BTreeMap<String, (Partition, TypeTag)>,
    frozen: bool,
}

impl Schema {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(&self, name: &str) -> Option<(Partition, TypeTag)> {
        self.vars.get(name).copied()
    }

    /// Variables sorted by name.
    pub fn variables(&self) -> impl Iterator<Item = (&str, Partition, TypeTag)> {
        self.vars.iter().map(|(k, (p, t))| (k.as_str(), *p, *t))
    }

    /// Freezes the schema on first use, then rejects any deviation.
    pub fn observe(&mut self, s: &ConcreteState) -> Result<(), TraceError> {
        if !self.frozen {
            self.vars = s
                .variables()
                .map(|(p, name, v)| (name.to_string(), (p, v.tag())))
                .collect();
            self.frozen = true;
            return Ok(());
        }
        let mut count = 0;
        for (p, name, v) in s.variables() {
            count += 1;
            match self.vars.get(name) {
                None => {
                    return Err(TraceError::SchemaViolation(format!(
                        "unknown variable `{name}`"
                    )))
                }
                Some(&(ep, et)) if ep != p || et != v.tag() => {
                    return Err(TraceError::SchemaViolation(format!(
                        "variable `{name}` expected {et} in {}, found {} in {}",
                        ep.key(),
                        v.tag(),
                        p.key()
                    )))
                }
                Some(_) => {}
            }
        }
        if count != self.vars.len() {
            let missing: Vec<&str> = self
                .vars
                .keys()
                .filter(|k| s.get(k).is_none())
                .map(String::as_str)
                .collect();
            return Err(TraceError::SchemaViolation(format!(
                "missing variables {missing:?}"
            )));
        }
        Ok(())
    }
}

fn field<'a>(obj: &'a Map<String, Json>, key: &str) -> Result<&'a Json, TraceError> {
    obj.get(key)
        .ok_or_else(|| TraceError::SchemaViolation(format!("missing field `{key}`")))
}

fn str_field<'a>(obj: &'a Map<String, Json>, key: &str) -> Result<&'a str, TraceError> {
    field(obj, key)?
        .as_str()
        .ok_or_else(|| TraceError::SchemaViolation(format!("field `{key}` must be a string")))
}

/// Parses one JSONL record, checking snapshots against (and possibly freezing) `schema`.
pub fn parse_event_line(line: &str, schema: &mut Schema) -> Result<Event, TraceError> {
    let raw: Json =
        serde_json::from_str(line).map_err(|e| TraceError::MalformedRecord(e.to_string()))?;
    let obj = raw
        .as_object()
        .ok_or_else(|| TraceError::MalformedRecord("record must be a JSON object".into()))?;
    let trace_id = str_field(obj, "trace_id")?.to_string();
    let seq = field(obj, "seq")?
        .as_u64()
        .ok_or_else(|| TraceError::SchemaViolation("field `seq` must be an integer >= 0".into()))?;
    let kind = match str_field(obj, "kind")? {
        "tool_call" => {
            let name = str_field(obj, "action")?;
            if name.is_empty() {
                return Err(TraceError::SchemaViolation("empty action name".into()));
            }
            let args_digest = match obj.get("args_digest") {
                Some(Json::String(s)) => Some(s.clone()),
                Some(_) => {
                    return Err(TraceError::SchemaViolation(
                        "field `args_digest` must be a string".into(),
                    ))
                }
                None => None,
            };
            let pre = match obj.get("pre") {
                Some(v) => {
                    let s = ConcreteState::from_json(v)?;
                    schema.observe(&s)?;
                    Some(s)
                }
                None => None,
            };
            let post = ConcreteState::from_json(field(obj, "post")?)?;
            schema.observe(&post)?;
            EventKind::ToolCall {
                action: ActionSymbol {
                    name: name.to_string(),
                    args_digest,
                },
                pre,
                post,
            }
        }
        "terminal" => match str_field(obj, "status")? {
            "success" => EventKind::Terminal(TerminalStatus::Success),
            "failure" => EventKind::Terminal(TerminalStatus::Failure),
            other => {
                return Err(TraceError::SchemaViolation(format!(
                    "unknown terminal status `{other}`"
                )))
            }
        },
        "initial" => {
            let s = ConcreteState::from_json(field(obj, "state")?)?;
            schema.observe(&s)?;
            EventKind::Initial(s)
        }
        other => {
            return Err(TraceError::SchemaViolation(format!(
                "unknown record kind `{other}`"
            )))
        }
    };
    Ok(Event {
        trace_id,
        seq,
        kind,
    })
}

/// Turns the events of one trace into a chained [`Trace`].
///
/// Events are ordered by `seq`. An `initial` record may only come first and a
/// terminal record only last; a missing terminal yields `truncated`. A tool
/// call without a `pre` snapshot inherits the previous post (or the initial
/// snapshot for the first call).
pub fn segment_stream(mut events: Vec<Event>) -> Result<Trace, TraceError> {
    let trace_id = match events.first() {
        Some(e) => e.trace_id.clone(),
        None => {
            return Err(TraceError::BadSequence {
                trace_id: String::new(),
                message: "no events".into(),
            })
        }
    };
    let bad = |message: &str| TraceError::BadSequence {
        trace_id: trace_id.clone(),
        message: message.to_string(),
    };
    if events.iter().any(|e| e.trace_id != trace_id) {
        return Err(bad("events from several traces"));
    }
    events.sort_by_key(|e| e.seq);
    if let Some(w) = events.windows(2).find(|w| w[0].seq == w[1].seq) {
        return Err(TraceError::DuplicateSeq {
            trace_id,
            seq: w[0].seq,
        });
    }

    let mut initial = None;
    let mut steps: Vec<Transition> = Vec::new();
    let mut status = TerminalStatus::Truncated;
    let last = events.len() - 1;
    for (i, event) in events.into_iter().enumerate() {
        match event.kind {
            EventKind::Initial(s) => {
                if i != 0 {
                    return Err(bad("initial record must come first"));
                }
                initial = Some(s);
            }
            EventKind::ToolCall { action, pre, post } => {
                let inherited = steps.last().map(|t| &t.post).or(initial.as_ref());
                let pre = match (pre, inherited) {
                    (Some(pre), Some(prev)) if &pre != prev => {
                        return Err(TraceError::ChainBreak {
                            trace_id,
                            step: steps.len().saturating_sub(1),
                        })
                    }
                    (Some(pre), _) => pre,
                    (None, Some(prev)) => prev.clone(),
                    (None, None) => {
                        return Err(bad("first tool call has no pre snapshot and no initial record"))
                    }
                };
                steps.push(Transition { pre, action, post });
            }
            EventKind::Terminal(s) => {
                if i != last {
                    return Err(bad("terminal record must be last"));
                }
                status = s;
            }
        }
    }
    Trace::new(trace_id, initial, steps, status)
}

/// Incremental segmentation for followed logs: emits steps as soon as they arrive.
#[derive(Debug, Default)]
pub struct StreamSegmenter {
    schema: Schema,
    open: HashMap<String, OpenTrace>,
}

#[derive(Debug, Default)]
struct OpenTrace {
    last_seq: Option<u64>,
    current: Option<ConcreteState>,
    steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem {
    /// State at position 0 became known.
    Started {
        trace_id: String,
        initial: ConcreteState,
    },
    Step {
        trace_id: String,
        index: usize,
        transition: Transition,
    },
    Finished {
        trace_id: String,
        status: TerminalStatus,
    },
}

impl StreamSegmenter {
    pub fn with_schema(schema: Schema) -> Self {
        StreamSegmenter {
            schema,
            open: HashMap::new(),
        }
    }

    /// Feeds one line; events of a trace must arrive in increasing `seq`.
    pub fn push_line(&mut self, line: &str) -> Result<Vec<StreamItem>, TraceError> {
        if line.trim().is_empty() {
            return Ok(Vec::new());
        }
        let event = parse_event_line(line, &mut self.schema)?;
        let entry = self.open.entry(event.trace_id.clone()).or_default();
        if let Some(prev) = entry.last_seq {
            if event.seq == prev {
                return Err(TraceError::DuplicateSeq {
                    trace_id: event.trace_id,
                    seq: event.seq,
                });
            }
            if event.seq < prev {
                return Err(TraceError::BadSequence {
                    trace_id: event.trace_id,
                    message: format!("seq {} arrived after {prev}", event.seq),
                });
            }
        }
        entry.last_seq = Some(event.seq);
        let mut out = Vec::new();
        match event.kind {
            EventKind::Initial(s) => {
                if entry.current.is_some() {
                    return Err(TraceError::BadSequence {
                        trace_id: event.trace_id,
                        message: "initial record must come first".into(),
                    });
                }
                entry.current = Some(s.clone());
                out.push(StreamItem::Started {
                    trace_id: event.trace_id,
                    initial: s,
                });
            }
            EventKind::ToolCall { action, pre, post } => {
                let pre = match (pre, entry.current.take()) {
                    (Some(pre), Some(prev)) if pre != prev => {
                        return Err(TraceError::ChainBreak {
                            trace_id: event.trace_id,
                            step: entry.steps.saturating_sub(1),
                        })
                    }
                    (Some(pre), Some(_)) => pre,
                    (Some(pre), None) => {
                        out.push(StreamItem::Started {
                            trace_id: event.trace_id.clone(),
                            initial: pre.clone(),
                        });
                        pre
                    }
                    (None, Some(prev)) => prev,
                    (None, None) => {
                        return Err(TraceError::BadSequence {
                            trace_id: event.trace_id,
                            message: "first tool call has no pre snapshot".into(),
                        })
                    }
                };
                entry.current = Some(post.clone());
                let index = entry.steps;
                entry.steps += 1;
                out.push(StreamItem::Step {
                    trace_id: event.trace_id,
                    index,
                    transition: Transition { pre, action, post },
                });
            }
            EventKind::Terminal(status) => {
                self.open.remove(&event.trace_id);
                out.push(StreamItem::Finished {
                    trace_id: event.trace_id,
                    status,
                });
            }
        }
        Ok(out)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }
}

/// Append-only collection of traces sharing one schema.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    traces: Vec<Trace>,
    schema: Schema,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty log whose schema is already frozen.
    pub fn with_schema(schema: Schema) -> Self {
        TraceLog {
            traces: Vec::new(),
            schema,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn num_transitions(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    /// Appends a trace and returns its index.
    pub fn push(&mut self, trace: Trace) -> Result<usize, TraceError> {
        for s in trace.states() {
            self.schema.observe(s)?;
        }
        self.traces.push(trace);
        Ok(self.traces.len() - 1)
    }

    pub fn state(&self, r: StateRef) -> Option<&ConcreteState> {
        self.traces.get(r.trace)?.state(r.pos)
    }

    /// Next action at a position, `None` for final states.
    pub fn next_action(&self, r: StateRef) -> Option<&ActionSymbol> {
        self.traces.get(r.trace)?.next_action(r.pos)
    }

    /// Every stored state reference in log order.
    pub fn state_refs(&self) -> impl Iterator<Item = StateRef> + '_ {
        self.traces
            .iter()
            .enumerate()
            .flat_map(|(t, tr)| (0..tr.num_states()).map(move |pos| StateRef { trace: t, pos }))
    }

    /// Reads a JSONL log. Traces appear in order of their first event.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, TraceError> {
        Self::from_reader_with_schema(reader, Schema::default())
    }

    /// Reads a JSONL log that must conform to an existing schema.
    pub fn from_reader_with_schema<R: BufRead>(
        reader: R,
        mut schema: Schema,
    ) -> Result<Self, TraceError> {
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<Event>> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = parse_event_line(&line, &mut schema).map_err(|e| TraceError::AtLine {
                line: i + 1,
                source: Box::new(e),
            })?;
            grouped
                .entry(event.trace_id.clone())
                .or_insert_with(|| {
                    order.push(event.trace_id.clone());
                    Vec::new()
                })
                .push(event);
        }
        let mut log = TraceLog::with_schema(schema);
        for id in order {
            let events = grouped.remove(&id).unwrap_or_default();
            log.push(segment_stream(events)?)?;
        }
        Ok(log)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    /// Serializes every trace as JSONL events.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.traces {
            for e in t.to_events() {
                out.push_str(&e.to_line());
                out.push('\n');
            }
        }
        out
    }
}
