//! Prompt rendering and reply parsing.
//!
//! Four template kinds drive the refinement loop:
//!
//! - `evaluate` — sent verbatim to both the expert and the amateur model;
//!   replies follow the bracketed format `[31] [reason] ...`.
//! - `filter` — quotes both raw evaluations and asks for a contrasted
//!   feedback, weighted toward the expert; replies carry no score
//!   (`[reason] ...`).
//! - `generate_child` — asks for an improved output given the task, the
//!   prior outputs, and the filtered feedback on the latest one.
//! - `generate_root` — asks for an initial output when none is supplied.
//!
//! Substitution is a single pass over the template body: placeholder markers
//! injected by substituted values are never re-expanded. Rendering is pure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Feedback, FeedbackRecord, FeedbackSource, RefinementNode};

/// The four template kinds a task's prompt set must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Evaluate,
    Filter,
    GenerateChild,
    GenerateRoot,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::Evaluate,
        TemplateKind::Filter,
        TemplateKind::GenerateChild,
        TemplateKind::GenerateRoot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Evaluate => "evaluate",
            TemplateKind::Filter => "filter",
            TemplateKind::GenerateChild => "generate_child",
            TemplateKind::GenerateRoot => "generate_root",
        }
    }

    /// Placeholders that must appear exactly once in a body of this kind.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Evaluate => &["task", "response"],
            TemplateKind::Filter => &["Expert", "Amateur"],
            TemplateKind::GenerateChild => &["task", "history", "response", "feedback"],
            TemplateKind::GenerateRoot => &["task"],
        }
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Task families with built-in prompt sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ConstrainedGeneration,
    StoryOutline,
    Math,
    Toxicity,
    #[default]
    Custom,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {kind} is missing placeholder {{{name}}}")]
    MissingPlaceholder {
        kind: TemplateKind,
        name: &'static str,
    },
    #[error("template {kind} repeats placeholder {{{name}}}")]
    DuplicatePlaceholder {
        kind: TemplateKind,
        name: &'static str,
    },
    #[error("malformed feedback reply ({detail}): {raw:?}")]
    MalformedFeedback { raw: String, detail: &'static str },
    #[error("feedback score {0} is outside 0..=100")]
    ScoreOutOfRange(u64),
    #[error("{0} feedback reason must not be empty")]
    EmptyReason(FeedbackSource),
    #[error("prompt input `{0}` must not be empty")]
    EmptyInput(&'static str),
    #[error("parent node has no filtered feedback")]
    MissingFilteredFeedback,
    #[error("prompt set file: {0}")]
    SetFile(String),
}

/// A prompt body with named single-brace placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
}

impl PromptTemplate {
    /// Build a template, checking that every required placeholder appears
    /// exactly once.
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        for name in kind.required_placeholders() {
            let marker = format!("{{{name}}}");
            match body.matches(&marker).count() {
                0 => return Err(PromptError::MissingPlaceholder { kind, name }),
                1 => {}
                _ => return Err(PromptError::DuplicatePlaceholder { kind, name }),
            }
        }
        Ok(PromptTemplate { kind, body })
    }

    /// Single-pass substitution: placeholder positions are located in the
    /// original body, so values containing literal `{task}`-style markers are
    /// preserved verbatim rather than expanded.
    fn render(&self, bindings: &[(&'static str, &str)]) -> Result<String, PromptError> {
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(bindings.len());
        for (name, value) in bindings {
            let marker = format!("{{{name}}}");
            let start = self
                .body
                .find(&marker)
                .ok_or(PromptError::MissingPlaceholder {
                    kind: self.kind,
                    name,
                })?;
            spans.push((start, start + marker.len(), value));
        }
        spans.sort_by_key(|&(start, _, _)| start);
        let mut out = String::with_capacity(self.body.len());
        let mut cursor = 0;
        for (start, end, value) in spans {
            out.push_str(&self.body[cursor..start]);
            out.push_str(value);
            cursor = end;
        }
        out.push_str(&self.body[cursor..]);
        Ok(out)
    }
}

// Built-in evaluation bodies. The same evaluation prompt is sent to the
// expert and the amateur model.

const EVALUATE_CONSTRAINED_GENERATION: &str = "You are given a task and an example response.
Provide feedback on it and mention all of the concepts that were missed and how to include them.
Do not write about how long or verbose the answer is.
Format: [0-100 based on coverage] [reason]xxxx (MAX 50 words). Example: [31] [reason] \"put your reason here\".
The task: {task}
Example response: {response}";

const EVALUATE_STORY_OUTLINE: &str = "You are given a task and an example response.
Provide feedback on it and mention how to make the outline more creative and interesting.
Do not write about how long or verbose the answer is.
Format: [0-100 based on interestingness] [reason]xxxx (MAX 50 words). Example: [31] [reason] \"put your reason here\".
The task: {task}
Example response: {response}";

const EVALUATE_MATH: &str = "You are given a task and an example response.
Provide feedback on it and mention all of the arithmetic errors and how to solve them.
Do not write about how long or verbose the answer is.
Format: [0-100 based on accuracy] [reason]xxxx (MAX 50 words).
If you think the answer is correct, output: [100][reason] Answer is fully correct.
Example: [31] [reason] \"put your reason here\".
The task: {task}
Example response: {response}";

const EVALUATE_TOXICITY: &str = "You are given a task and an example response.
Provide feedback on it and mention how to decrease toxicity.
Do not write about how long or verbose the answer is.
Format: [0-100 where 0 is the most toxic] [reason]xxxx (MAX 50 words). Example: [31] [reason] \"put your reason here\".
The task: {task}
Example response: {response}";

const EVALUATE_CUSTOM: &str = "You are given a task and an example response.
Provide feedback on it and mention its weaknesses and how to address them.
Do not write about how long or verbose the answer is.
Format: [0-100 based on quality] [reason]xxxx (MAX 50 words). Example: [31] [reason] \"put your reason here\".
The task: {task}
Example response: {response}";

// The filter body is shared by every task family.
const FILTER_BODY: &str = "You will be provided with two feedbacks. An expert and an amateur response.
Using both responses, contrast the feedback to write a new feeeback with more relevant evaluations and advice, but focus slightly more on the expert.
Format: [reason]xxxx (MAX 50 words.)
Example: [reason] \"put your reason here\".
Expert:{Expert}. Amateur:{Amateur}";

const GENERATE_CHILD_BODY: &str = "You are given a task, earlier responses to it, and feedback on the latest response.
Write an improved response that addresses the feedback while keeping what already works.
Output only the improved response, with no preamble or commentary.
The task: {task}
{history}Latest response: {response}
Feedback: {feedback}";

const GENERATE_ROOT_BODY: &str = "You are given a task. Write your best response.
Output only the response, with no preamble or commentary.
The task: {task}";

/// One template per kind, for a given task family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPromptSet {
    pub task_kind: TaskKind,
    pub evaluate: PromptTemplate,
    pub filter: PromptTemplate,
    pub generate_child: PromptTemplate,
    pub generate_root: PromptTemplate,
}

impl TaskPromptSet {
    /// The built-in prompt set for a task family.
    pub fn builtin(task_kind: TaskKind) -> TaskPromptSet {
        let evaluate = match task_kind {
            TaskKind::ConstrainedGeneration => EVALUATE_CONSTRAINED_GENERATION,
            TaskKind::StoryOutline => EVALUATE_STORY_OUTLINE,
            TaskKind::Math => EVALUATE_MATH,
            TaskKind::Toxicity => EVALUATE_TOXICITY,
            TaskKind::Custom => EVALUATE_CUSTOM,
        };
        TaskPromptSet {
            task_kind,
            evaluate: PromptTemplate::new(TemplateKind::Evaluate, evaluate)
                .expect("built-in evaluate template"),
            filter: PromptTemplate::new(TemplateKind::Filter, FILTER_BODY)
                .expect("built-in filter template"),
            generate_child: PromptTemplate::new(TemplateKind::GenerateChild, GENERATE_CHILD_BODY)
                .expect("built-in child template"),
            generate_root: PromptTemplate::new(TemplateKind::GenerateRoot, GENERATE_ROOT_BODY)
                .expect("built-in root template"),
        }
    }

    pub fn template(&self, kind: TemplateKind) -> &PromptTemplate {
        match kind {
            TemplateKind::Evaluate => &self.evaluate,
            TemplateKind::Filter => &self.filter,
            TemplateKind::GenerateChild => &self.generate_child,
            TemplateKind::GenerateRoot => &self.generate_root,
        }
    }

    /// Load a custom prompt set from the keyed text format:
    ///
    /// ```toml
    /// task_kind = "custom"   # optional
    /// [templates]
    /// evaluate = "... {task} ... {response}"
    /// filter = "... {Expert} ... {Amateur}"
    /// generate_child = "... {task} ... {history} ... {response} ... {feedback}"
    /// generate_root = "... {task}"
    /// ```
    pub fn from_toml_str(text: &str) -> Result<TaskPromptSet, PromptError> {
        #[derive(Deserialize)]
        struct File {
            task_kind: Option<TaskKind>,
            templates: std::collections::BTreeMap<String, String>,
        }
        let file: File = toml::from_str(text).map_err(|e| PromptError::SetFile(e.to_string()))?;
        let get = |kind: TemplateKind| -> Result<PromptTemplate, PromptError> {
            let body = file
                .templates
                .get(kind.name())
                .ok_or_else(|| PromptError::SetFile(format!("missing template `{kind}`")))?;
            PromptTemplate::new(kind, body.clone())
        };
        Ok(TaskPromptSet {
            task_kind: file.task_kind.unwrap_or(TaskKind::Custom),
            evaluate: get(TemplateKind::Evaluate)?,
            filter: get(TemplateKind::Filter)?,
            generate_child: get(TemplateKind::GenerateChild)?,
            generate_root: get(TemplateKind::GenerateRoot)?,
        })
    }

    /// The keyed text form of this set, suitable for [`Self::from_toml_str`].
    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            task_kind: TaskKind,
            templates: std::collections::BTreeMap<&'static str, &'a str>,
        }
        let mut templates = std::collections::BTreeMap::new();
        for kind in TemplateKind::ALL {
            templates.insert(kind.name(), self.template(kind).body.as_str());
        }
        toml::to_string(&File {
            task_kind: self.task_kind,
            templates,
        })
        .expect("prompt set serialization")
    }
}

/// Render the evaluation prompt; the identical text goes to both evaluators.
pub fn render_evaluate_prompt(
    set: &TaskPromptSet,
    instruction: &str,
    response: &str,
) -> Result<String, PromptError> {
    if instruction.is_empty() {
        return Err(PromptError::EmptyInput("instruction"));
    }
    if response.is_empty() {
        return Err(PromptError::EmptyInput("response"));
    }
    set.evaluate
        .render(&[("task", instruction), ("response", response)])
}

/// Render the filter prompt from the two raw evaluation replies.
pub fn render_filter_prompt(
    set: &TaskPromptSet,
    expert: &FeedbackRecord,
    amateur: &FeedbackRecord,
) -> Result<String, PromptError> {
    for (record, source) in [
        (expert, FeedbackSource::Expert),
        (amateur, FeedbackSource::Amateur),
    ] {
        if record.parsed.reason.trim().is_empty() {
            return Err(PromptError::EmptyReason(source));
        }
    }
    set.filter
        .render(&[("Expert", expert.raw.as_str()), ("Amateur", amateur.raw.as_str())])
}

/// One prior output shown in a child-generation prompt.
#[derive(Debug, Clone, Copy)]
pub struct HistoryEntry<'a> {
    pub output: &'a str,
    pub feedback: Option<&'a str>,
}

fn render_history(entries: &[HistoryEntry<'_>]) -> String {
    let mut out = String::new();
    for entry in entries {
        out.push_str("Earlier response: ");
        out.push_str(entry.output);
        out.push('\n');
        if let Some(fb) = entry.feedback {
            out.push_str("Feedback: ");
            out.push_str(fb);
            out.push('\n');
        }
    }
    out
}

/// Render the child-generation prompt for `parent`, whose filtered feedback
/// must be present. `history` holds the parent's strict ancestors, oldest
/// first, already capped by the caller's history limit.
pub fn render_child_prompt(
    set: &TaskPromptSet,
    instruction: &str,
    parent: &RefinementNode,
    history: &[HistoryEntry<'_>],
) -> Result<String, PromptError> {
    if instruction.is_empty() {
        return Err(PromptError::EmptyInput("instruction"));
    }
    let filtered = parent
        .filtered_feedback
        .as_ref()
        .ok_or(PromptError::MissingFilteredFeedback)?;
    let history_text = render_history(history);
    set.generate_child.render(&[
        ("task", instruction),
        ("history", history_text.as_str()),
        ("response", parent.output_text.as_str()),
        ("feedback", filtered.parsed.reason.as_str()),
    ])
}

/// Render the initial-generation prompt.
pub fn render_root_prompt(set: &TaskPromptSet, instruction: &str) -> Result<String, PromptError> {
    if instruction.is_empty() {
        return Err(PromptError::EmptyInput("instruction"));
    }
    set.generate_root.render(&[("task", instruction)])
}

/// A reply parsed from the bracketed feedback format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub score: Option<u8>,
    pub reason: String,
}

impl ParsedReply {
    pub fn into_feedback(self, source: FeedbackSource) -> Feedback {
        Feedback {
            source,
            score: self.score,
            reason: self.reason,
        }
    }

    pub fn into_record(self, source: FeedbackSource, raw: impl Into<String>) -> FeedbackRecord {
        self.into_feedback(source).with_raw(raw)
    }
}

const REASON_MARKER: &str = "[reason]";

/// Scan bracket groups left to right for the score. Groups containing a dash
/// are skipped: templates embed range text like `[0-100 based on coverage]`
/// that models often echo, and it must not be misparsed.
fn first_scored_group(raw: &str) -> Result<Option<u8>, PromptError> {
    let bytes = raw.as_bytes();
    let mut i = 0;
    while let Some(open) = raw[i..].find('[') {
        let start = i + open + 1;
        let Some(close) = raw[start..].find(']') else {
            break;
        };
        let content = raw[start..start + close].trim();
        i = start + close + 1;
        if content.contains('-') {
            continue;
        }
        if let Ok(value) = content.parse::<u64>() {
            if value > 100 {
                return Err(PromptError::ScoreOutOfRange(value));
            }
            return Ok(Some(value as u8));
        }
    }
    let _ = bytes;
    Ok(None)
}

/// Parse a model reply in the bracketed feedback format.
///
/// With `expect_score`, the first bracketed integer becomes the score and the
/// text after the `[reason]` marker becomes the reason. Without it (filter
/// replies), the score is absent and only the reason is extracted. Whitespace
/// between bracket groups is optional.
pub fn parse_feedback(raw: &str, expect_score: bool) -> Result<ParsedReply, PromptError> {
    if raw.is_empty() {
        return Err(PromptError::MalformedFeedback {
            raw: raw.to_string(),
            detail: "empty reply",
        });
    }
    let score = if expect_score {
        match first_scored_group(raw)? {
            Some(s) => Some(s),
            None => {
                return Err(PromptError::MalformedFeedback {
                    raw: raw.to_string(),
                    detail: "no bracketed score",
                })
            }
        }
    } else {
        None
    };
    let marker = raw
        .find(REASON_MARKER)
        .ok_or_else(|| PromptError::MalformedFeedback {
            raw: raw.to_string(),
            detail: "no [reason] marker",
        })?;
    let reason = raw[marker + REASON_MARKER.len()..].trim();
    if reason.is_empty() {
        return Err(PromptError::MalformedFeedback {
            raw: raw.to_string(),
            detail: "empty reason",
        });
    }
    Ok(ParsedReply {
        score,
        reason: reason.to_string(),
    })
}

/// The canonical reply format for a scored evaluation.
pub fn format_feedback(score: u8, reason: &str) -> String {
    format!("[{score}] [reason] {reason}")
}

/// The canonical reply format for a filter reply (no score slot).
pub fn format_filtered(reason: &str) -> String {
    format!("[reason] {reason}")
}

/// Reasons longer than this many words get flagged in reports; the limit is
/// advisory to the model, not a validity rule.
pub const REASON_WORD_LIMIT: usize = 50;

pub fn reason_exceeds_word_limit(reason: &str) -> bool {
    reason.split_whitespace().count() > REASON_WORD_LIMIT
}
