//! The refinement tree: one node per model output, with the expert, amateur,
//! and filtered feedback each node received.
//!
//! Node ids are creation indices, so a child's id is always greater than its
//! parent's and the structure is acyclic by construction. The tree is
//! single-writer; read-only snapshots may be shared freely.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a node within one [`RefinementTree`]: its creation index.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which evaluator produced a piece of feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    /// The larger model's evaluation.
    Expert,
    /// The smaller model's evaluation.
    Amateur,
    /// The contrast of the two, produced by a third call.
    Filtered,
}

impl fmt::Display for FeedbackSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeedbackSource::Expert => "expert",
            FeedbackSource::Amateur => "amateur",
            FeedbackSource::Filtered => "filtered",
        };
        f.write_str(s)
    }
}

/// A parsed evaluation: an optional 0-100 score plus the reason text.
///
/// Filtered feedback carries no score (its reply format has no score slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub source: FeedbackSource,
    pub score: Option<u8>,
    pub reason: String,
}

impl Feedback {
    pub fn new(
        source: FeedbackSource,
        score: Option<u8>,
        reason: impl Into<String>,
    ) -> Result<Self, GraphError> {
        let fb = Feedback {
            source,
            score,
            reason: reason.into(),
        };
        fb.validate()?;
        Ok(fb)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if let Some(s) = self.score {
            if s > 100 {
                return Err(GraphError::ScoreOutOfRange(s));
            }
        }
        if self.reason.trim().is_empty() {
            return Err(GraphError::EmptyReason);
        }
        Ok(())
    }

    /// Pair this feedback with the verbatim model reply it was parsed from.
    pub fn with_raw(self, raw: impl Into<String>) -> FeedbackRecord {
        FeedbackRecord {
            raw: raw.into(),
            parsed: self,
        }
    }
}

/// Feedback as stored on a node: the verbatim reply plus its parsed form.
///
/// The raw text is kept so that parser changes never lose data and so that
/// downstream prompts (the filter prompt quotes both evaluations) and
/// embedding analyses can use exactly what the model said.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub raw: String,
    pub parsed: Feedback,
}

/// One model output plus whatever feedback it has received so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: u32,
    pub output_text: String,
    pub expert_feedback: Option<FeedbackRecord>,
    pub amateur_feedback: Option<FeedbackRecord>,
    pub filtered_feedback: Option<FeedbackRecord>,
}

impl RefinementNode {
    pub fn feedback(&self, source: FeedbackSource) -> Option<&FeedbackRecord> {
        match source {
            FeedbackSource::Expert => self.expert_feedback.as_ref(),
            FeedbackSource::Amateur => self.amateur_feedback.as_ref(),
            FeedbackSource::Filtered => self.filtered_feedback.as_ref(),
        }
    }

    pub fn expert_score(&self) -> Option<u8> {
        self.expert_feedback.as_ref().and_then(|r| r.parsed.score)
    }

    pub fn amateur_score(&self) -> Option<u8> {
        self.amateur_feedback.as_ref().and_then(|r| r.parsed.score)
    }

    /// True once both evaluations carry a score; only such nodes can join the
    /// best-first frontier.
    pub fn is_scored(&self) -> bool {
        self.expert_score().is_some() && self.amateur_score().is_some()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("output text must not be empty")]
    EmptyOutput,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} already has {slot} feedback")]
    SlotOccupied { node: NodeId, slot: FeedbackSource },
    #[error("node {node} needs expert and amateur feedback before filtered feedback")]
    OrderViolation { node: NodeId },
    #[error("node {node} has no filtered feedback to expand from")]
    ParentNotEvaluated { node: NodeId },
    #[error("feedback score {0} is outside 0..=100")]
    ScoreOutOfRange(u8),
    #[error("feedback reason must not be empty")]
    EmptyReason,
    #[error("tree record line {line}: {message}")]
    Decode { line: usize, message: String },
}

/// The tree of refinement nodes for one run.
///
/// Exactly one root (id 0). Children are appended with monotonically
/// increasing ids, so `parent.id < child.id` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTree {
    nodes: Vec<RefinementNode>,
    root_expert_score: Option<u8>,
}

impl RefinementTree {
    /// Create a tree holding only the root node (the initial output).
    pub fn new(output_text: impl Into<String>) -> Result<Self, GraphError> {
        let text = output_text.into();
        if text.is_empty() {
            return Err(GraphError::EmptyOutput);
        }
        Ok(RefinementTree {
            nodes: vec![RefinementNode {
                id: NodeId(0),
                parent: None,
                depth: 0,
                output_text: text,
                expert_feedback: None,
                amateur_feedback: None,
                filtered_feedback: None,
            }],
            root_expert_score: None,
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// The root's expert score, frozen at its first expert evaluation.
    pub fn root_expert_score(&self) -> Option<u8> {
        self.root_expert_score
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a tree always holds at least the root
    }

    pub fn node(&self, id: NodeId) -> Option<&RefinementNode> {
        self.nodes.get(id.index())
    }

    pub fn get(&self, id: NodeId) -> Result<&RefinementNode, GraphError> {
        self.node(id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &RefinementNode> {
        self.nodes.iter()
    }

    pub fn last_created(&self) -> NodeId {
        NodeId(self.nodes.len() as u64 - 1)
    }

    /// Store feedback on a node. Each source has a single slot; filtered
    /// feedback requires both evaluations to be present already.
    pub fn attach_feedback(
        &mut self,
        id: NodeId,
        record: FeedbackRecord,
    ) -> Result<(), GraphError> {
        record.parsed.validate()?;
        let source = record.parsed.source;
        let is_root = id == self.root();
        let node = self
            .nodes
            .get_mut(id.index())
            .ok_or(GraphError::UnknownNode(id))?;
        if node.feedback(source).is_some() {
            return Err(GraphError::SlotOccupied { node: id, slot: source });
        }
        if source == FeedbackSource::Filtered
            && (node.expert_feedback.is_none() || node.amateur_feedback.is_none())
        {
            return Err(GraphError::OrderViolation { node: id });
        }
        let score = record.parsed.score;
        match source {
            FeedbackSource::Expert => node.expert_feedback = Some(record),
            FeedbackSource::Amateur => node.amateur_feedback = Some(record),
            FeedbackSource::Filtered => node.filtered_feedback = Some(record),
        }
        if is_root && source == FeedbackSource::Expert {
            self.root_expert_score = score;
        }
        Ok(())
    }

    /// Expand a node with a new child. The parent must already hold filtered
    /// feedback; re-expanding the same parent later is legal and produces
    /// siblings.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        output_text: impl Into<String>,
    ) -> Result<NodeId, GraphError> {
        let text = output_text.into();
        if text.is_empty() {
            return Err(GraphError::EmptyOutput);
        }
        let parent_node = self.get(parent)?;
        if parent_node.filtered_feedback.is_none() {
            return Err(GraphError::ParentNotEvaluated { node: parent });
        }
        let depth = parent_node.depth + 1;
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(RefinementNode {
            id,
            parent: Some(parent),
            depth,
            output_text: text,
            expert_feedback: None,
            amateur_feedback: None,
            filtered_feedback: None,
        });
        Ok(id)
    }

    /// The root-to-node path, oldest first.
    pub fn ancestry(&self, id: NodeId) -> Result<Vec<&RefinementNode>, GraphError> {
        let mut path = Vec::new();
        let mut current = Some(self.get(id)?);
        while let Some(node) = current {
            path.push(node);
            current = match node.parent {
                Some(p) => Some(self.get(p)?),
                None => None,
            };
        }
        path.reverse();
        Ok(path)
    }

    /// Serialize as line-delimited records, one node per line in id order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            // every node serializes cleanly: no map keys, no non-finite floats
            out.push_str(&serde_json::to_string(node).expect("node serialization"));
            out.push('\n');
        }
        out
    }

    /// Rebuild a tree from its line-delimited form, revalidating structure.
    pub fn from_jsonl(text: &str) -> Result<Self, GraphError> {
        let mut nodes: Vec<RefinementNode> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let node: RefinementNode =
                serde_json::from_str(line).map_err(|e| GraphError::Decode {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if node.id.index() != nodes.len() {
                return Err(GraphError::Decode {
                    line: i + 1,
                    message: format!("expected node id {}, found {}", nodes.len(), node.id),
                });
            }
            match (node.id.index(), node.parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(GraphError::Decode {
                        line: i + 1,
                        message: "root must have no parent".into(),
                    })
                }
                (_, None) => {
                    return Err(GraphError::Decode {
                        line: i + 1,
                        message: "non-root node must have a parent".into(),
                    })
                }
                (_, Some(p)) => {
                    if p >= node.id {
                        return Err(GraphError::Decode {
                            line: i + 1,
                            message: format!("parent {} must precede child {}", p, node.id),
                        });
                    }
                }
            }
            nodes.push(node);
        }
        if nodes.is_empty() {
            return Err(GraphError::Decode {
                line: 0,
                message: "empty tree file".into(),
            });
        }
        let root_expert_score = nodes[0].expert_score();
        Ok(RefinementTree {
            nodes,
            root_expert_score,
        })
    }
}
