//! The refinement loops.
//!
//! Chain mode refines the newest node every iteration: evaluate with the
//! expert and the amateur, contrast the two evaluations into filtered
//! feedback, generate one child. Best-first mode keeps every node selectable
//! forever and expands the node with the lowest `f = g + h`, where
//!
//! - `g = |v0 - v_expert| + |v0 - v_amateur|` (v0 is the root's expert score),
//! - `h` is one of four variants, `100 - |v_expert - v_amateur|` by default.
//!
//! Each iteration evaluates exactly one node (the single not-yet-evaluated
//! one), filters it, then selects and expands — so every run performs exactly
//! four completions per iteration, evaluation-only iterations on early stop
//! aside. Nodes are never removed from the frontier, so re-expanding an old
//! node and producing siblings is normal.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionResult, Gateway, GatewayError, ModelEndpoint};
use crate::graph::{FeedbackRecord, FeedbackSource, GraphError, NodeId, RefinementTree};
use crate::prompt::{
    parse_feedback, render_child_prompt, render_evaluate_prompt, render_filter_prompt,
    render_root_prompt, HistoryEntry, ParsedReply, PromptError, TaskPromptSet,
};

/// Heuristic variants for best-first selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeuristicVariant {
    /// `100 - |v_expert - v_amateur|`
    #[default]
    #[serde(alias = "equal")]
    EqualWeighting,
    /// `100 - |1.5 * v_expert - v_amateur|`; may go negative and is used
    /// as-is, without clamping.
    ExpertWeighted,
    /// `100 - v_expert`
    ExpertOnly,
    /// `100 - v_amateur`
    AmateurOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    #[default]
    Chain,
    BestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    EarliestCreated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnPolicy {
    /// The newest node; matches the plain "return the last output" contract.
    #[default]
    LastCreated,
    /// The node with the highest expert score (ties to the earliest node);
    /// best-first may leave the best node off the final path.
    BestExpertScore,
}

/// Everything that shapes one refinement run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Number of improvement cycles, `d`.
    pub iterations: u32,
    /// Ignored in chain mode.
    pub heuristic: HeuristicVariant,
    pub tie_break: TieBreak,
    pub return_policy: ReturnPolicy,
    /// Halt as soon as an evaluated node's expert score is 100.
    pub early_stop_on_perfect: bool,
    /// Cap on prior outputs shown in child prompts, counting the parent
    /// itself; `None` shows the full root-to-parent path.
    pub history_limit: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            mode: SearchMode::Chain,
            iterations: 3,
            heuristic: HeuristicVariant::default(),
            tie_break: TieBreak::default(),
            return_policy: ReturnPolicy::default(),
            early_stop_on_perfect: false,
            history_limit: None,
        }
    }
}

impl SearchConfig {
    pub fn chain(iterations: u32) -> Self {
        SearchConfig {
            mode: SearchMode::Chain,
            iterations,
            ..Default::default()
        }
    }

    pub fn best_first(iterations: u32) -> Self {
        SearchConfig {
            mode: SearchMode::BestFirst,
            iterations,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.iterations == 0 {
            return Err(SearchError::InvalidConfig("iterations must be at least 1"));
        }
        Ok(())
    }
}

/// A frontier row: one evaluated node with its cost, heuristic, and total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierEntry {
    pub node: NodeId,
    pub g: f64,
    pub h: f64,
    pub f: f64,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("score {0} is outside 0..=100")]
    ScoreOutOfRange(u8),
    #[error("frontier is empty")]
    EmptyFrontier,
    #[error("root evaluation failed: the root has no expert score")]
    RootEvaluationFailed,
    #[error("invalid search config: {0}")]
    InvalidConfig(&'static str),
    #[error("node {node}: {source}")]
    AtNode {
        node: NodeId,
        #[source]
        source: Box<SearchError>,
    },
}

fn at_node<E: Into<SearchError>>(node: NodeId) -> impl FnOnce(E) -> SearchError {
    move |e| SearchError::AtNode {
        node,
        source: Box::new(e.into()),
    }
}

fn checked(score: u8) -> Result<f64, SearchError> {
    if score > 100 {
        return Err(SearchError::ScoreOutOfRange(score));
    }
    Ok(f64::from(score))
}

/// Distance of a node's two scores from the root's expert score.
pub fn cost_g(root_score: u8, expert: u8, amateur: u8) -> Result<f64, SearchError> {
    let v0 = checked(root_score)?;
    let ve = checked(expert)?;
    let va = checked(amateur)?;
    Ok((v0 - ve).abs() + (v0 - va).abs())
}

/// The selected heuristic evaluated exactly as stated; `ExpertWeighted` may
/// be negative and is not clamped.
pub fn heuristic_h(variant: HeuristicVariant, expert: u8, amateur: u8) -> Result<f64, SearchError> {
    let ve = checked(expert)?;
    let va = checked(amateur)?;
    Ok(match variant {
        HeuristicVariant::EqualWeighting => 100.0 - (ve - va).abs(),
        HeuristicVariant::ExpertWeighted => 100.0 - (1.5 * ve - va).abs(),
        HeuristicVariant::ExpertOnly => 100.0 - ve,
        HeuristicVariant::AmateurOnly => 100.0 - va,
    })
}

/// Frontier rows for every node holding both scores. Requires the root's
/// expert score (`v0`) to be established.
pub fn frontier_entries(
    tree: &RefinementTree,
    variant: HeuristicVariant,
) -> Result<Vec<FrontierEntry>, SearchError> {
    let v0 = tree
        .root_expert_score()
        .ok_or(SearchError::RootEvaluationFailed)?;
    let mut entries = Vec::new();
    for node in tree.nodes() {
        if let (Some(ve), Some(va)) = (node.expert_score(), node.amateur_score()) {
            let g = cost_g(v0, ve, va)?;
            let h = heuristic_h(variant, ve, va)?;
            entries.push(FrontierEntry {
                node: node.id,
                g,
                h,
                f: g + h,
            });
        }
    }
    Ok(entries)
}

/// The entry with the lowest `f`; ties go to the earliest-created node. The
/// selected node stays in the frontier.
pub fn select_frontier(entries: &[FrontierEntry], tie_break: TieBreak) -> Result<NodeId, SearchError> {
    let TieBreak::EarliestCreated = tie_break;
    let mut best: Option<&FrontierEntry> = None;
    for entry in entries {
        best = match best {
            None => Some(entry),
            Some(b) if entry.f < b.f || (entry.f == b.f && entry.node < b.node) => Some(entry),
            Some(b) => Some(b),
        };
    }
    best.map(|e| e.node).ok_or(SearchError::EmptyFrontier)
}

/// The model endpoints one run needs. Filter calls default to the expert
/// endpoint; generation defaults to the expert unless a base model is set
/// (detox runs generate with a separate base model).
#[derive(Debug, Clone)]
pub struct EndpointSet {
    pub expert: ModelEndpoint,
    pub amateur: ModelEndpoint,
    pub base: Option<ModelEndpoint>,
    pub judge: Option<ModelEndpoint>,
    pub embedder: Option<ModelEndpoint>,
    pub filter: Option<ModelEndpoint>,
}

impl EndpointSet {
    pub fn new(expert: ModelEndpoint, amateur: ModelEndpoint) -> Self {
        EndpointSet {
            expert,
            amateur,
            base: None,
            judge: None,
            embedder: None,
            filter: None,
        }
    }

    /// A bare expert/amateur pair for scripted runs.
    pub fn scripted_pair() -> Self {
        use crate::gateway::Role;
        EndpointSet::new(
            ModelEndpoint::new("expert", Role::Expert),
            ModelEndpoint::new("amateur", Role::Amateur),
        )
    }

    pub fn with_base(mut self, base: ModelEndpoint) -> Self {
        self.base = Some(base);
        self
    }

    pub fn with_judge(mut self, judge: ModelEndpoint) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_embedder(mut self, embedder: ModelEndpoint) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_filter(mut self, filter: ModelEndpoint) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn filter_endpoint(&self) -> &ModelEndpoint {
        self.filter.as_ref().unwrap_or(&self.expert)
    }

    pub fn generation_endpoint(&self) -> &ModelEndpoint {
        self.base.as_ref().unwrap_or(&self.expert)
    }
}

/// Knobs that are not part of the search itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Temperature pinned for evaluation and filter calls.
    pub eval_temperature: f64,
    /// Re-requests allowed when a reply fails to parse.
    pub parse_retries: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            eval_temperature: 0.0,
            parse_retries: 2,
        }
    }
}

/// Per-iteration record for the run trace: which node was evaluated with
/// which scores, the full g/h/f table, the selected parent, and call
/// latencies in call order (expert, amateur, filter, generation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub evaluated: NodeId,
    pub expert_score: Option<u8>,
    pub amateur_score: Option<u8>,
    /// Empty in chain mode.
    pub frontier: Vec<FrontierEntry>,
    pub selected: Option<NodeId>,
    pub child: Option<NodeId>,
    pub early_stop: bool,
    pub latencies_ms: Vec<u64>,
}

/// Serialize a trace as line-delimited records, one iteration per line.
pub fn trace_to_jsonl(trace: &[IterationTrace]) -> String {
    let mut out = String::new();
    for entry in trace {
        out.push_str(&serde_json::to_string(entry).expect("trace serialization"));
        out.push('\n');
    }
    out
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<IterationTrace>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Outcome of one refinement run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub tree: RefinementTree,
    pub trace: Vec<IterationTrace>,
    /// The node picked by the configured return policy.
    pub final_node: NodeId,
}

impl RunResult {
    pub fn final_text(&self) -> &str {
        &self
            .tree
            .get(self.final_node)
            .expect("final node exists")
            .output_text
    }
}

/// Resolve the configured return policy against a finished tree.
pub fn resolve_return(tree: &RefinementTree, policy: ReturnPolicy) -> NodeId {
    match policy {
        ReturnPolicy::LastCreated => tree.last_created(),
        ReturnPolicy::BestExpertScore => tree
            .nodes()
            .filter_map(|n| n.expert_score().map(|s| (n.id, s)))
            .max_by_key(|&(id, s)| (s, std::cmp::Reverse(id)))
            .map(|(id, _)| id)
            .unwrap_or_else(|| tree.last_created()),
    }
}

/// Complete a prompt and parse the reply, re-requesting up to `parse_retries`
/// times on a malformed reply. Retries bypass the response cache.
pub fn request_feedback(
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    prompt: &str,
    expect_score: bool,
    parse_retries: u32,
) -> Result<(ParsedReply, CompletionResult), SearchError> {
    let mut attempt = 0;
    loop {
        let completion = gateway.complete_attempt(endpoint, prompt, attempt)?;
        match parse_feedback(&completion.text, expect_score) {
            Ok(reply) => return Ok((reply, completion)),
            Err(err @ (PromptError::MalformedFeedback { .. } | PromptError::ScoreOutOfRange(_))) => {
                if attempt >= parse_retries {
                    return Err(SearchError::Prompt(err));
                }
                attempt += 1;
            }
            Err(err) => return Err(SearchError::Prompt(err)),
        }
    }
}

/// Drives refinement runs against a gateway, one instruction at a time.
pub struct Refiner<'a> {
    gateway: &'a Gateway,
    endpoints: &'a EndpointSet,
    prompts: &'a TaskPromptSet,
    options: RunOptions,
}

impl<'a> Refiner<'a> {
    pub fn new(gateway: &'a Gateway, endpoints: &'a EndpointSet, prompts: &'a TaskPromptSet) -> Self {
        Refiner {
            gateway,
            endpoints,
            prompts,
            options: RunOptions::default(),
        }
    }

    pub fn with_options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    /// Generate an initial output for an instruction (used when the dataset
    /// supplies none).
    pub fn generate_root(&self, instruction: &str) -> Result<String, SearchError> {
        let prompt = render_root_prompt(self.prompts, instruction)?;
        let completion = self.gateway.complete(self.endpoints.generation_endpoint(), &prompt)?;
        Ok(completion.text.trim().to_string())
    }

    /// Run the configured mode.
    pub fn run(
        &self,
        instruction: &str,
        root_text: &str,
        cfg: &SearchConfig,
    ) -> Result<RunResult, SearchError> {
        cfg.validate()?;
        match cfg.mode {
            SearchMode::Chain => self.run_chain(instruction, root_text, cfg),
            SearchMode::BestFirst => self.run_best_first(instruction, root_text, cfg),
        }
    }

    /// Linear refinement: the newest node is always the one refined.
    pub fn run_chain(
        &self,
        instruction: &str,
        root_text: &str,
        cfg: &SearchConfig,
    ) -> Result<RunResult, SearchError> {
        let mut tree = RefinementTree::new(root_text)?;
        let mut trace = Vec::new();
        let mut current = tree.root();
        for iteration in 1..=cfg.iterations {
            let eval = self.evaluate_node(&mut tree, current, instruction)?;
            if cfg.early_stop_on_perfect && eval.expert_score == Some(100) {
                trace.push(IterationTrace {
                    iteration,
                    evaluated: current,
                    expert_score: eval.expert_score,
                    amateur_score: eval.amateur_score,
                    frontier: Vec::new(),
                    selected: None,
                    child: None,
                    early_stop: true,
                    latencies_ms: eval.latencies_ms,
                });
                break;
            }
            let mut latencies_ms = eval.latencies_ms;
            latencies_ms.push(self.filter_node(&mut tree, current)?);
            let (child, generate_ms) = self.generate_child(&mut tree, current, instruction, cfg)?;
            latencies_ms.push(generate_ms);
            trace.push(IterationTrace {
                iteration,
                evaluated: current,
                expert_score: eval.expert_score,
                amateur_score: eval.amateur_score,
                frontier: Vec::new(),
                selected: Some(current),
                child: Some(child),
                early_stop: false,
                latencies_ms,
            });
            current = child;
        }
        let final_node = resolve_return(&tree, cfg.return_policy);
        Ok(RunResult {
            tree,
            trace,
            final_node,
        })
    }

    /// Best-first refinement over a grow-only node set.
    ///
    /// Each iteration evaluates the single not-yet-evaluated node (the root
    /// on iteration one, afterwards the child added last iteration), filters
    /// it, then expands the lowest-f node — which may be any earlier node.
    pub fn run_best_first(
        &self,
        instruction: &str,
        root_text: &str,
        cfg: &SearchConfig,
    ) -> Result<RunResult, SearchError> {
        let mut tree = RefinementTree::new(root_text)?;
        let mut trace = Vec::new();
        for iteration in 1..=cfg.iterations {
            let pending = tree
                .nodes()
                .find(|n| n.expert_feedback.is_none())
                .map(|n| n.id)
                .expect("one unevaluated node per iteration");
            let eval = self.evaluate_node(&mut tree, pending, instruction)?;
            if pending == tree.root() && tree.root_expert_score().is_none() {
                return Err(SearchError::RootEvaluationFailed);
            }
            if cfg.early_stop_on_perfect && eval.expert_score == Some(100) {
                trace.push(IterationTrace {
                    iteration,
                    evaluated: pending,
                    expert_score: eval.expert_score,
                    amateur_score: eval.amateur_score,
                    frontier: Vec::new(),
                    selected: None,
                    child: None,
                    early_stop: true,
                    latencies_ms: eval.latencies_ms,
                });
                break;
            }
            let mut latencies_ms = eval.latencies_ms;
            latencies_ms.push(self.filter_node(&mut tree, pending)?);
            let frontier = frontier_entries(&tree, cfg.heuristic)?;
            let selected = select_frontier(&frontier, cfg.tie_break)?;
            let (child, generate_ms) = self.generate_child(&mut tree, selected, instruction, cfg)?;
            latencies_ms.push(generate_ms);
            trace.push(IterationTrace {
                iteration,
                evaluated: pending,
                expert_score: eval.expert_score,
                amateur_score: eval.amateur_score,
                frontier,
                selected: Some(selected),
                child: Some(child),
                early_stop: false,
                latencies_ms,
            });
        }
        let final_node = resolve_return(&tree, cfg.return_policy);
        Ok(RunResult {
            tree,
            trace,
            final_node,
        })
    }

    fn evaluate_node(
        &self,
        tree: &mut RefinementTree,
        id: NodeId,
        instruction: &str,
    ) -> Result<NodeEvaluation, SearchError> {
        let node = tree.get(id)?;
        let prompt = render_evaluate_prompt(self.prompts, instruction, &node.output_text)
            .map_err(at_node(id))?;
        let expert_ep = self.endpoints.expert.with_temperature(self.options.eval_temperature);
        let amateur_ep = self
            .endpoints
            .amateur
            .with_temperature(self.options.eval_temperature);
        // the two evaluations are data-independent and may run concurrently
        let (expert_out, amateur_out) = std::thread::scope(|scope| {
            let expert = scope.spawn(|| {
                request_feedback(self.gateway, &expert_ep, &prompt, true, self.options.parse_retries)
            });
            let amateur = scope.spawn(|| {
                request_feedback(
                    self.gateway,
                    &amateur_ep,
                    &prompt,
                    true,
                    self.options.parse_retries,
                )
            });
            (
                expert.join().expect("expert evaluation thread"),
                amateur.join().expect("amateur evaluation thread"),
            )
        });
        let (expert_reply, expert_completion) = expert_out.map_err(at_node(id))?;
        let (amateur_reply, amateur_completion) = amateur_out.map_err(at_node(id))?;
        let expert_score = expert_reply.score;
        let amateur_score = amateur_reply.score;
        let raw = expert_completion.text.clone();
        tree.attach_feedback(id, expert_reply.into_record(FeedbackSource::Expert, raw))
            .map_err(at_node(id))?;
        let raw = amateur_completion.text.clone();
        tree.attach_feedback(id, amateur_reply.into_record(FeedbackSource::Amateur, raw))
            .map_err(at_node(id))?;
        Ok(NodeEvaluation {
            expert_score,
            amateur_score,
            latencies_ms: vec![
                expert_completion.latency.as_millis() as u64,
                amateur_completion.latency.as_millis() as u64,
            ],
        })
    }

    fn filter_node(&self, tree: &mut RefinementTree, id: NodeId) -> Result<u64, SearchError> {
        let node = tree.get(id)?;
        let expert = node
            .expert_feedback
            .clone()
            .ok_or(GraphError::OrderViolation { node: id })?;
        let amateur = node
            .amateur_feedback
            .clone()
            .ok_or(GraphError::OrderViolation { node: id })?;
        let prompt = render_filter_prompt(self.prompts, &expert, &amateur).map_err(at_node(id))?;
        let filter_ep = self
            .endpoints
            .filter_endpoint()
            .with_temperature(self.options.eval_temperature);
        let (reply, completion) =
            request_feedback(self.gateway, &filter_ep, &prompt, false, self.options.parse_retries)
                .map_err(at_node(id))?;
        let raw = completion.text.clone();
        tree.attach_feedback(id, reply.into_record(FeedbackSource::Filtered, raw))
            .map_err(at_node(id))?;
        Ok(completion.latency.as_millis() as u64)
    }

    fn generate_child(
        &self,
        tree: &mut RefinementTree,
        parent: NodeId,
        instruction: &str,
        cfg: &SearchConfig,
    ) -> Result<(NodeId, u64), SearchError> {
        let path = tree.ancestry(parent)?;
        // the limit counts the parent itself; a limit below 1 means "parent only"
        let keep = cfg
            .history_limit
            .map(|l| l.max(1))
            .unwrap_or(path.len())
            .min(path.len());
        let shown = &path[path.len() - keep..];
        let (parent_node, ancestors) = shown.split_last().expect("path includes the parent");
        let history: Vec<HistoryEntry<'_>> = ancestors
            .iter()
            .map(|n| HistoryEntry {
                output: &n.output_text,
                feedback: n
                    .filtered_feedback
                    .as_ref()
                    .map(|f| f.parsed.reason.as_str()),
            })
            .collect();
        let prompt = render_child_prompt(self.prompts, instruction, parent_node, &history)
            .map_err(at_node(parent))?;
        let completion = self
            .gateway
            .complete(self.endpoints.generation_endpoint(), &prompt)
            .map_err(at_node(parent))?;
        let latency_ms = completion.latency.as_millis() as u64;
        let child = tree
            .add_child(parent, completion.text.trim())
            .map_err(at_node(parent))?;
        Ok((child, latency_ms))
    }
}

struct NodeEvaluation {
    expert_score: Option<u8>,
    amateur_score: Option<u8>,
    latencies_ms: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{PromptMatcher, Role, ScriptedBackend};
    use crate::prompt::TaskKind;

    const EVAL_MARK: &str = "an example response";
    const FILTER_MARK: &str = "two feedbacks";
    const CHILD_MARK: &str = "improved response";
    const ROOT_MARK: &str = "Write your best response";

    fn scored(s: u8) -> String {
        format!("[{s}] [reason] score {s}")
    }

    /// Script a run whose i-th evaluated node gets the i-th score pair.
    /// Nodes are evaluated in creation order, one per iteration.
    fn scripted_engine(expert_scores: &[u8], amateur_scores: &[u8]) -> ScriptedBackend {
        ScriptedBackend::new(1)
            .rule(
                Role::Expert,
                PromptMatcher::contains(EVAL_MARK),
                expert_scores.iter().map(|s| scored(*s)),
            )
            .rule(
                Role::Amateur,
                PromptMatcher::contains(EVAL_MARK),
                amateur_scores.iter().map(|s| scored(*s)),
            )
            .rule_repeat(
                Role::Expert,
                PromptMatcher::contains(FILTER_MARK),
                "[reason] contrasted advice",
            )
            .rule_repeat(
                Role::Expert,
                PromptMatcher::contains(CHILD_MARK),
                "an improved draft",
            )
            .rule_repeat(
                Role::Expert,
                PromptMatcher::contains(ROOT_MARK),
                "a fresh draft",
            )
    }

    fn run_with(
        backend: ScriptedBackend,
        cfg: &SearchConfig,
    ) -> (RunResult, u64) {
        let gateway = Gateway::new(backend);
        let endpoints = EndpointSet::scripted_pair();
        let prompts = TaskPromptSet::builtin(TaskKind::Custom);
        let refiner = Refiner::new(&gateway, &endpoints, &prompts);
        let result = refiner.run("improve this paragraph", "the rough draft", cfg).unwrap();
        let calls = gateway.ledger().completion_calls();
        (result, calls)
    }

    // Formula spot values are fixed by hand arithmetic before implementation.

    #[test]
    fn cost_g_zero_when_scores_match_root() {
        assert_eq!(cost_g(80, 80, 80).unwrap(), 0.0);
    }

    #[test]
    fn cost_g_hand_values() {
        assert_eq!(cost_g(80, 90, 70).unwrap(), 20.0);
        assert_eq!(cost_g(0, 100, 100).unwrap(), 200.0);
    }

    #[test]
    fn heuristic_hand_values() {
        assert_eq!(heuristic_h(HeuristicVariant::EqualWeighting, 73, 73).unwrap(), 100.0);
        assert_eq!(heuristic_h(HeuristicVariant::EqualWeighting, 90, 70).unwrap(), 80.0);
        assert_eq!(heuristic_h(HeuristicVariant::ExpertOnly, 100, 40).unwrap(), 0.0);
        assert_eq!(heuristic_h(HeuristicVariant::ExpertWeighted, 100, 0).unwrap(), -50.0);
    }

    #[test]
    fn select_frontier_singleton() {
        let entries = [FrontierEntry {
            node: NodeId(0),
            g: 1.0,
            h: 2.0,
            f: 3.0,
        }];
        assert_eq!(select_frontier(&entries, TieBreak::EarliestCreated).unwrap(), NodeId(0));
    }

    #[test]
    fn select_frontier_minimum_and_ties() {
        let entry = |node, f| FrontierEntry {
            node: NodeId(node),
            g: 0.0,
            h: f,
            f,
        };
        let entries = [entry(0, 100.0), entry(1, 95.0), entry(2, 120.0)];
        assert_eq!(select_frontier(&entries, TieBreak::EarliestCreated).unwrap(), NodeId(1));
        let tied = [entry(2, 95.0), entry(1, 95.0)];
        assert_eq!(select_frontier(&tied, TieBreak::EarliestCreated).unwrap(), NodeId(1));
        assert!(matches!(
            select_frontier(&[], TieBreak::EarliestCreated).unwrap_err(),
            SearchError::EmptyFrontier
        ));
    }

    #[test]
    fn chain_single_iteration_leaves_child_unevaluated() {
        let backend = scripted_engine(&[70], &[60]);
        let (result, calls) = run_with(backend, &SearchConfig::chain(1));
        assert_eq!(result.tree.len(), 2);
        assert_eq!(calls, 4);
        let root = result.tree.get(result.tree.root()).unwrap();
        assert!(root.expert_feedback.is_some());
        assert!(root.filtered_feedback.is_some());
        let child = result.tree.get(NodeId(1)).unwrap();
        assert!(child.expert_feedback.is_none());
        assert_eq!(result.final_node, NodeId(1));
    }

    #[test]
    fn chain_three_iterations_is_a_path_with_twelve_calls() {
        let backend = scripted_engine(&[50, 60, 70], &[40, 55, 65]);
        let (result, calls) = run_with(backend, &SearchConfig::chain(3));
        assert_eq!(result.tree.len(), 4);
        assert_eq!(calls, 12);
        for id in 1..4u64 {
            assert_eq!(result.tree.get(NodeId(id)).unwrap().parent, Some(NodeId(id - 1)));
        }
        assert_eq!(result.final_node, NodeId(3));
        assert_eq!(result.trace.len(), 3);
    }

    #[test]
    fn early_stop_on_perfect_root_stops_after_two_calls() {
        let backend = ScriptedBackend::new(1)
            .rule_repeat(
                Role::Expert,
                PromptMatcher::contains(EVAL_MARK),
                "[100][reason] Answer is fully correct.",
            )
            .rule_repeat(Role::Amateur, PromptMatcher::contains(EVAL_MARK), &scored(90));
        let mut cfg = SearchConfig::chain(3);
        cfg.early_stop_on_perfect = true;
        let (result, calls) = run_with(backend, &cfg);
        assert_eq!(result.tree.len(), 1);
        assert_eq!(calls, 2);
        assert_eq!(result.trace.len(), 1);
        assert!(result.trace[0].early_stop);
        assert_eq!(result.final_node, result.tree.root());
    }

    #[test]
    fn best_first_single_iteration_matches_chain_shape() {
        let cfg_chain = SearchConfig::chain(1);
        let cfg_best = SearchConfig::best_first(1);
        let (chain, chain_calls) = run_with(scripted_engine(&[70], &[60]), &cfg_chain);
        let (best, best_calls) = run_with(scripted_engine(&[70], &[60]), &cfg_best);
        assert_eq!(chain.tree, best.tree);
        assert_eq!(chain_calls, best_calls);
    }

    #[test]
    fn best_first_reexpands_root_when_child_scores_worse() {
        // v0 = 80. Root (80, 80): g = 0, h = 100, f = 100.
        // Child (90, 85): g = 10 + 5 = 15, h = 95, f = 110 > 100,
        // so iteration 2 selects the root again and the second child is a
        // sibling of the first.
        let backend = scripted_engine(&[80, 90], &[80, 85]);
        let (result, calls) = run_with(backend, &SearchConfig::best_first(2));
        assert_eq!(calls, 8);
        assert_eq!(result.tree.len(), 3);
        assert_eq!(result.tree.get(NodeId(1)).unwrap().parent, Some(NodeId(0)));
        assert_eq!(result.tree.get(NodeId(2)).unwrap().parent, Some(NodeId(0)));
        assert_eq!(result.trace[1].selected, Some(NodeId(0)));
        let frontier = &result.trace[1].frontier;
        assert_eq!(frontier.len(), 2);
        assert_eq!(frontier[0].f, 100.0);
        assert_eq!(frontier[1].f, 110.0);
    }

    #[test]
    fn best_first_node_count_is_iterations_plus_one() {
        let backend = scripted_engine(&[80, 90, 75], &[80, 85, 70]);
        let (result, _) = run_with(backend, &SearchConfig::best_first(3));
        assert_eq!(result.tree.len(), 4);
    }

    #[test]
    fn frontier_f_recomputes_exactly_from_scores() {
        let backend = scripted_engine(&[80, 90, 75], &[80, 85, 70]);
        let (result, _) = run_with(backend, &SearchConfig::best_first(3));
        let v0 = result.tree.root_expert_score().unwrap();
        for trace in &result.trace {
            for entry in &trace.frontier {
                let node = result.tree.get(entry.node).unwrap();
                let g = cost_g(v0, node.expert_score().unwrap(), node.amateur_score().unwrap())
                    .unwrap();
                let h = heuristic_h(
                    HeuristicVariant::EqualWeighting,
                    node.expert_score().unwrap(),
                    node.amateur_score().unwrap(),
                )
                .unwrap();
                assert_eq!(entry.g, g);
                assert_eq!(entry.h, h);
                assert_eq!(entry.f, g + h, "f stored as exactly g + h");
            }
        }
    }

    #[test]
    fn chain_equals_best_first_when_newest_node_always_wins() {
        // amateur-only heuristic with va = 100 for children makes
        // f = 100 - v_expert + g; the scores below give the strictly
        // decreasing f sequence 200, 50, 40, 30, so the newest node is
        // always the unique minimum.
        let expert = [100, 50, 60, 70];
        let amateur = [0, 100, 100, 100];
        let mut cfg = SearchConfig::best_first(3);
        cfg.heuristic = HeuristicVariant::AmateurOnly;
        let (best, _) = run_with(scripted_engine(&expert, &amateur), &cfg);
        let mut chain_cfg = SearchConfig::chain(3);
        chain_cfg.heuristic = HeuristicVariant::AmateurOnly;
        let (chain, _) = run_with(scripted_engine(&expert, &amateur), &chain_cfg);
        assert_eq!(best.tree, chain.tree);
    }

    #[test]
    fn adding_a_constant_to_h_does_not_change_selection() {
        let entry = |node, g: f64, h: f64| FrontierEntry {
            node: NodeId(node),
            g,
            h,
            f: g + h,
        };
        let base = vec![
            entry(0, 10.0, 90.0),
            entry(1, 30.0, 40.0),
            entry(2, 5.0, 80.0),
            entry(3, 30.0, 55.0),
        ];
        let chosen = select_frontier(&base, TieBreak::EarliestCreated).unwrap();
        for offset in [1.0, 17.0, -12.0, 1000.0] {
            let shifted: Vec<FrontierEntry> = base
                .iter()
                .map(|e| entry(e.node.0, e.g, e.h + offset))
                .collect();
            assert_eq!(
                select_frontier(&shifted, TieBreak::EarliestCreated).unwrap(),
                chosen
            );
        }
    }

    #[test]
    fn generation_prompts_respect_history_limit() {
        let run_and_collect = |history_limit: Option<usize>| -> Vec<String> {
            let backend = std::sync::Arc::new(scripted_engine(&[50, 60, 70], &[40, 55, 65]));
            let gateway = Gateway::from_arc(backend.clone());
            let endpoints = EndpointSet::scripted_pair();
            let prompts = TaskPromptSet::builtin(TaskKind::Custom);
            let refiner = Refiner::new(&gateway, &endpoints, &prompts);
            let mut cfg = SearchConfig::chain(3);
            cfg.history_limit = history_limit;
            refiner.run("task", "root draft", &cfg).unwrap();
            backend
                .transcript()
                .into_iter()
                .filter(|t| t.prompt.contains(CHILD_MARK))
                .map(|t| t.prompt)
                .collect()
        };

        let full = run_and_collect(None);
        assert_eq!(full.len(), 3);
        // third generation sees the root and first child as history
        assert_eq!(full[2].matches("Earlier response:").count(), 2);

        let capped = run_and_collect(Some(1));
        assert_eq!(capped[2].matches("Earlier response:").count(), 0);
        assert!(capped[2].contains("Latest response:"));
    }

    #[test]
    fn return_policy_best_expert_score_picks_highest() {
        let mut tree = RefinementTree::new("root").unwrap();
        let root = tree.root();
        let fb = |src, score, reason: &str| {
            crate::graph::Feedback::new(src, score, reason)
                .unwrap()
                .with_raw(reason)
        };
        tree.attach_feedback(root, fb(FeedbackSource::Expert, Some(90), "e")).unwrap();
        tree.attach_feedback(root, fb(FeedbackSource::Amateur, Some(10), "a")).unwrap();
        tree.attach_feedback(root, fb(FeedbackSource::Filtered, None, "f")).unwrap();
        let child = tree.add_child(root, "child").unwrap();
        tree.attach_feedback(child, fb(FeedbackSource::Expert, Some(40), "e")).unwrap();
        assert_eq!(resolve_return(&tree, ReturnPolicy::LastCreated), child);
        assert_eq!(resolve_return(&tree, ReturnPolicy::BestExpertScore), root);
    }

    #[test]
    fn parse_retries_rerequest_then_succeed() {
        let backend = ScriptedBackend::new(0).rule(
            Role::Expert,
            PromptMatcher::Any,
            ["not a valid reply", "also bad", "[55] [reason] finally"],
        );
        let gateway = Gateway::new(backend);
        let ep = ModelEndpoint::new("expert", Role::Expert);
        let (reply, _) = request_feedback(&gateway, &ep, "prompt", true, 2).unwrap();
        assert_eq!(reply.score, Some(55));
    }

    #[test]
    fn parse_retries_exhausted_is_an_error() {
        let backend =
            ScriptedBackend::new(0).rule_repeat(Role::Expert, PromptMatcher::Any, "never valid");
        let gateway = Gateway::new(backend);
        let ep = ModelEndpoint::new("expert", Role::Expert);
        let err = request_feedback(&gateway, &ep, "prompt", true, 2).unwrap_err();
        assert!(matches!(err, SearchError::Prompt(PromptError::MalformedFeedback { .. })));
    }

    #[test]
    fn gateway_errors_are_annotated_with_the_node() {
        use crate::gateway::{FailKind, ScriptReply};
        let backend = ScriptedBackend::new(0)
            .rule(
                Role::Expert,
                PromptMatcher::contains(EVAL_MARK),
                [ScriptReply::Fail(FailKind::ContextOverflow)],
            )
            .rule_repeat(Role::Amateur, PromptMatcher::contains(EVAL_MARK), &scored(10));
        let gateway = Gateway::new(backend);
        let endpoints = EndpointSet::scripted_pair();
        let prompts = TaskPromptSet::builtin(TaskKind::Custom);
        let refiner = Refiner::new(&gateway, &endpoints, &prompts);
        let err = refiner
            .run("task", "draft", &SearchConfig::chain(1))
            .unwrap_err();
        match err {
            SearchError::AtNode { node, source } => {
                assert_eq!(node, NodeId(0));
                assert!(matches!(
                    *source,
                    SearchError::Gateway(GatewayError::ContextOverflow { .. })
                ));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_is_rejected() {
        let cfg = SearchConfig::chain(0);
        assert!(matches!(cfg.validate(), Err(SearchError::InvalidConfig(_))));
    }
}
