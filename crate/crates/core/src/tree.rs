//! The follow-up question tree and bottom-up answer refinement.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Passage;
use crate::gateway::{
    parse_followups, parse_tagged_answer, render, Gateway, GatewayError, Slots, TemplateId,
    REASK_ANSWER_INSTRUCTION,
};
use crate::ids::{NodeId, QuoteId};
use crate::Credits;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryNode {
    pub id: NodeId,
    pub question: String,
    pub depth: u32,
    pub parent: Option<NodeId>,
    pub preliminary_answer: Option<String>,
    pub refined_answer: Option<String>,
    pub purchased_quotes: Vec<QuoteId>,
    pub spent: Credits,
    pub children: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTree {
    nodes: Vec<QueryNode>,
    pub max_depth: u32,
}

impl QueryTree {
    pub fn new(question: impl Into<String>, max_depth: u32) -> Self {
        Self {
            nodes: vec![QueryNode {
                id: NodeId(0),
                question: question.into(),
                depth: 0,
                parent: None,
                preliminary_answer: None,
                refined_answer: None,
                purchased_quotes: Vec::new(),
                spent: 0,
                children: Vec::new(),
            }],
            max_depth,
        }
    }

    pub fn root(&self) -> &QueryNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &QueryNode {
        &self.nodes[id.0]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut QueryNode {
        &mut self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[QueryNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> u32 {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn add_child(&mut self, parent: NodeId, question: impl Into<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let depth = self.nodes[parent.0].depth + 1;
        self.nodes.push(QueryNode {
            id,
            question: question.into(),
            depth,
            parent: Some(parent),
            preliminary_answer: None,
            refined_answer: None,
            purchased_quotes: Vec::new(),
            spent: 0,
            children: Vec::new(),
        });
        self.nodes[parent.0].children.push(id);
        id
    }

    /// Drops the most recently added node (used when its round failed).
    fn discard_last(&mut self, id: NodeId) {
        debug_assert_eq!(id.0 + 1, self.nodes.len());
        if let Some(node) = self.nodes.pop() {
            if let Some(parent) = node.parent {
                self.nodes[parent.0].children.retain(|c| *c != id);
            }
        }
    }

    /// Children before parents, siblings in creation order.
    pub fn post_order(&self) -> Vec<NodeId> {
        fn visit(tree: &QueryTree, id: NodeId, out: &mut Vec<NodeId>) {
            for &c in &tree.node(id).children {
                visit(tree, c, out);
            }
            out.push(id);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        visit(self, NodeId(0), &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: u32,
    pub max_followups: usize,
    pub node_cap: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            max_followups: 3,
            node_cap: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    DepthLimit,
    NodeCap,
    NoFollowups,
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedAnswer {
    pub text: String,
    /// No answer tags even after the re-ask; `text` is empty.
    pub flagged: bool,
}

/// Answers `question` from purchased passages only.
pub fn synthesize_answer(
    question: &str,
    purchased: &[Passage],
    gateway: &mut Gateway<'_>,
) -> Result<SynthesizedAnswer, GatewayError> {
    let mut slots = Slots::new();
    slots.insert("question".into(), question.into());
    slots.insert(
        "quotes".into(),
        purchased
            .iter()
            .map(|p| json!({ "answer_block": p.content }))
            .collect(),
    );
    let request = render(TemplateId::AnswerSynthesis, &slots)?;
    let (_, parsed) = gateway.complete_parsed(request, REASK_ANSWER_INSTRUCTION, parse_tagged_answer)?;
    Ok(match parsed {
        Ok(text) => SynthesizedAnswer { text, flagged: false },
        Err(_) => SynthesizedAnswer {
            text: String::new(),
            flagged: true,
        },
    })
}

pub fn generate_followups(
    question: &str,
    current_answer: &str,
    gateway: &mut Gateway<'_>,
) -> Result<Vec<String>, GatewayError> {
    let mut slots = Slots::new();
    slots.insert("question".into(), question.into());
    slots.insert("current_answer".into(), current_answer.into());
    let reply = gateway.complete(render(TemplateId::Followup, &slots)?)?;
    Ok(parse_followups(&reply))
}

/// Things that happen while the tree grows or is refined, for the caller's
/// log. The gateway is passed along so pending exchanges can be flushed
/// before the event is recorded.
#[derive(Debug)]
pub enum TreeEvent<'a> {
    NodeCreated(&'a QueryNode),
    Preliminary {
        node: NodeId,
        answer: &'a SynthesizedAnswer,
    },
    ChildFailed {
        parent: NodeId,
        question: &'a str,
        error: &'a str,
    },
    ProviderError {
        node: NodeId,
        stage: &'static str,
        error: &'a str,
    },
    Refined {
        node: NodeId,
        order: usize,
        answer: &'a str,
        fallback: bool,
    },
}

pub trait TreeObserver {
    fn observe(&mut self, event: TreeEvent<'_>, gateway: &mut Gateway<'_>);
}

impl TreeObserver for () {
    fn observe(&mut self, _: TreeEvent<'_>, _: &mut Gateway<'_>) {}
}

/// What one market round yielded for a node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Acquisition {
    pub passages: Vec<Passage>,
    pub quotes: Vec<QuoteId>,
    pub spent: Credits,
}

/// The market as seen from the tree: a balance and a way to buy passages
/// for a question.
pub trait MarketRound: TreeObserver {
    fn balance(&self) -> Credits;
    fn acquire(
        &mut self,
        node: NodeId,
        question: &str,
        gateway: &mut Gateway<'_>,
    ) -> Result<Acquisition, String>;
}

/// Buys for `node` and writes its preliminary answer.
pub fn answer_node(
    tree: &mut QueryTree,
    node: NodeId,
    market: &mut dyn MarketRound,
    gateway: &mut Gateway<'_>,
) -> Result<(), String> {
    let question = tree.node(node).question.clone();
    let acquisition = market.acquire(node, &question, gateway)?;
    let answer = match synthesize_answer(&question, &acquisition.passages, gateway) {
        Ok(a) => a,
        Err(e) => {
            market.observe(
                TreeEvent::ProviderError {
                    node,
                    stage: "answer_synthesis",
                    error: &e.to_string(),
                },
                gateway,
            );
            SynthesizedAnswer {
                text: String::new(),
                flagged: true,
            }
        }
    };
    let n = tree.node_mut(node);
    n.preliminary_answer = Some(answer.text.clone());
    n.purchased_quotes = acquisition.quotes;
    n.spent = acquisition.spent;
    market.observe(TreeEvent::Preliminary { node, answer: &answer }, gateway);
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Expansion {
    pub children: Vec<NodeId>,
    pub stopped: Vec<StopReason>,
}

/// Asks for follow-ups to an answered node and answers each one as a new
/// child, in generation order, until a limit binds.
pub fn expand_node(
    tree: &mut QueryTree,
    node: NodeId,
    config: &TreeConfig,
    market: &mut dyn MarketRound,
    gateway: &mut Gateway<'_>,
) -> Expansion {
    let mut out = Expansion::default();
    let current = tree.node(node);
    if current.depth >= config.max_depth.min(tree.max_depth) {
        out.stopped.push(StopReason::DepthLimit);
        return out;
    }
    if market.balance() == 0 {
        out.stopped.push(StopReason::BudgetExhausted);
        return out;
    }
    if tree.len() >= config.node_cap {
        out.stopped.push(StopReason::NodeCap);
        return out;
    }
    let (question, answer) = (
        current.question.clone(),
        current.preliminary_answer.clone().unwrap_or_default(),
    );
    let mut followups = match generate_followups(&question, &answer, gateway) {
        Ok(f) => f,
        Err(e) => {
            market.observe(
                TreeEvent::ProviderError {
                    node,
                    stage: "followup",
                    error: &e.to_string(),
                },
                gateway,
            );
            Vec::new()
        }
    };
    followups.truncate(config.max_followups);
    if followups.is_empty() {
        out.stopped.push(StopReason::NoFollowups);
        return out;
    }
    for q in followups {
        if tree.len() >= config.node_cap {
            out.stopped.push(StopReason::NodeCap);
            break;
        }
        if market.balance() == 0 {
            out.stopped.push(StopReason::BudgetExhausted);
            break;
        }
        let child = tree.add_child(node, q.clone());
        market.observe(TreeEvent::NodeCreated(tree.node(child)), gateway);
        match answer_node(tree, child, market, gateway) {
            Ok(()) => out.children.push(child),
            Err(error) => {
                tree.discard_last(child);
                market.observe(
                    TreeEvent::ChildFailed {
                        parent: node,
                        question: &q,
                        error: &error,
                    },
                    gateway,
                );
            }
        }
    }
    out
}

fn refine_internal(
    node: &QueryNode,
    tree: &QueryTree,
    gateway: &mut Gateway<'_>,
) -> Result<Option<String>, GatewayError> {
    let mut slots = Slots::new();
    slots.insert("question".into(), node.question.clone().into());
    slots.insert(
        "original_answer".into(),
        node.preliminary_answer.clone().unwrap_or_default().into(),
    );
    slots.insert(
        "follow_up_questions".into(),
        node.children
            .iter()
            .map(|&c| {
                let child = tree.node(c);
                json!({
                    "question": child.question,
                    "answer": child.refined_answer.clone().unwrap_or_default(),
                })
            })
            .collect(),
    );
    let rationale = gateway.complete(render(TemplateId::RefinementStep1, &slots)?)?;
    slots.insert("rationale".into(), rationale.into());
    let request = render(TemplateId::RefinementStep2, &slots)?;
    let (_, parsed) = gateway.complete_parsed(request, REASK_ANSWER_INSTRUCTION, parse_tagged_answer)?;
    Ok(parsed.ok())
}

/// Refines every node in post-order and returns the root's refined answer.
/// Leaves keep their preliminary answer; an internal node whose refinement
/// fails falls back to its preliminary answer.
pub fn refine_tree(
    tree: &mut QueryTree,
    gateway: &mut Gateway<'_>,
    observer: &mut dyn TreeObserver,
) -> String {
    for (order, id) in tree.post_order().into_iter().enumerate() {
        let node = tree.node(id);
        let preliminary = node.preliminary_answer.clone().unwrap_or_default();
        let (answer, fallback) = if node.children.is_empty() {
            (preliminary, false)
        } else {
            match refine_internal(node, tree, gateway) {
                Ok(Some(text)) => (text, false),
                Ok(None) => (preliminary, true),
                Err(e) => {
                    observer.observe(
                        TreeEvent::ProviderError {
                            node: id,
                            stage: "refinement",
                            error: &e.to_string(),
                        },
                        gateway,
                    );
                    (preliminary, true)
                }
            }
        };
        tree.node_mut(id).refined_answer = Some(answer.clone());
        observer.observe(
            TreeEvent::Refined {
                node: id,
                order,
                answer: &answer,
                fallback,
            },
            gateway,
        );
    }
    tree.root().refined_answer.clone().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{FnProvider, MockScript};
    use crate::gateway::ChatRequest;

    #[test]
    fn synthesis_extracts_tags_and_accepts_no_passages() {
        let script = MockScript::with_default("<answer>A</answer>");
        let mut gw = Gateway::new(&script, "m");
        let a = synthesize_answer("q", &[], &mut gw).unwrap();
        assert_eq!(a.text, "A");
        assert!(!a.flagged);
        let prompt = &gw.transcript()[0].messages[1].content;
        assert!(prompt.contains("\n------\n"));
    }

    #[test]
    fn synthesis_without_tags_is_flagged_empty() {
        let script = MockScript::with_default("no tags here");
        let mut gw = Gateway::new(&script, "m");
        let a = synthesize_answer("q", &[], &mut gw).unwrap();
        assert_eq!(a, SynthesizedAnswer { text: String::new(), flagged: true });
        assert_eq!(script.calls(), 2);
    }

    #[test]
    fn followups_in_order() {
        let script = MockScript::with_default("FOLLOW-UP QUESTION: one\nFOLLOW-UP QUESTION: two");
        let mut gw = Gateway::new(&script, "m");
        assert_eq!(generate_followups("q", "a", &mut gw).unwrap(), ["one", "two"]);
    }

    #[test]
    fn single_node_refines_to_preliminary() {
        let mut tree = QueryTree::new("q", 3);
        tree.node_mut(NodeId(0)).preliminary_answer = Some("P".into());
        let script = MockScript::new();
        let mut gw = Gateway::new(&script, "m");
        assert_eq!(refine_tree(&mut tree, &mut gw, &mut ()), "P");
        assert_eq!(script.calls(), 0);
    }

    #[test]
    fn depth_one_tree_uses_two_step_refinement() {
        let mut tree = QueryTree::new("q", 3);
        tree.node_mut(NodeId(0)).preliminary_answer = Some("P".into());
        let c = tree.add_child(NodeId(0), "child?");
        tree.node_mut(c).preliminary_answer = Some("C".into());
        let script = MockScript::with_default("<answer>R</answer>");
        let mut gw = Gateway::new(&script, "m");
        assert_eq!(refine_tree(&mut tree, &mut gw, &mut ()), "R");
        let templates: Vec<TemplateId> = gw.transcript().iter().map(|e| e.template).collect();
        assert_eq!(templates, [TemplateId::RefinementStep1, TemplateId::RefinementStep2]);
        assert_eq!(tree.node(c).refined_answer.as_deref(), Some("C"));
    }

    #[test]
    fn refinement_falls_back_on_missing_tags() {
        let mut tree = QueryTree::new("q", 3);
        tree.node_mut(NodeId(0)).preliminary_answer = Some("P".into());
        let c = tree.add_child(NodeId(0), "c");
        tree.node_mut(c).preliminary_answer = Some("C".into());
        let provider = FnProvider(|_: &ChatRequest| Ok::<_, GatewayError>("untagged".to_owned()));
        let mut gw = Gateway::new(&provider, "m");
        struct Flags(Vec<bool>);
        impl TreeObserver for Flags {
            fn observe(&mut self, e: TreeEvent<'_>, _: &mut Gateway<'_>) {
                if let TreeEvent::Refined { fallback, .. } = e {
                    self.0.push(fallback);
                }
            }
        }
        let mut flags = Flags(Vec::new());
        assert_eq!(refine_tree(&mut tree, &mut gw, &mut flags), "P");
        assert_eq!(flags.0, [false, true]);
    }

    #[test]
    fn post_order_visits_children_first() {
        let mut tree = QueryTree::new("r", 3);
        let a = tree.add_child(NodeId(0), "a");
        let b = tree.add_child(NodeId(0), "b");
        let a1 = tree.add_child(a, "a1");
        let a1x = tree.add_child(a1, "a1x");
        assert_eq!(tree.post_order(), [a1x, a1, a, b, NodeId(0)]);
        assert_eq!(tree.height(), 3);
    }

    struct FixedMarket {
        balance: Credits,
        calls: usize,
    }
    impl TreeObserver for FixedMarket {
        fn observe(&mut self, _: TreeEvent<'_>, _: &mut Gateway<'_>) {}
    }
    impl MarketRound for FixedMarket {
        fn balance(&self) -> Credits {
            self.balance
        }
        fn acquire(&mut self, _: NodeId, _: &str, _: &mut Gateway<'_>) -> Result<Acquisition, String> {
            self.calls += 1;
            Ok(Acquisition::default())
        }
    }

    #[test]
    fn expansion_stops() {
        let mut script = MockScript::with_default("<answer>x</answer>");
        script.insert_any(TemplateId::Followup, "FOLLOW-UP QUESTION: a\nFOLLOW-UP QUESTION: b");
        let mut gw = Gateway::new(&script, "m");
        let cfg = TreeConfig::default();

        let mut tree = QueryTree::new("q", 3);
        let mut broke = FixedMarket { balance: 0, calls: 0 };
        let e = expand_node(&mut tree, NodeId(0), &cfg, &mut broke, &mut gw);
        assert_eq!(e.stopped, [StopReason::BudgetExhausted]);

        let mut market = FixedMarket { balance: 5, calls: 0 };
        let e = expand_node(&mut tree, NodeId(0), &cfg, &mut market, &mut gw);
        assert_eq!(e.children.len(), 2);
        assert_eq!(market.calls, 2);
        assert!(tree.nodes().iter().skip(1).all(|n| n.depth == 1));

        let mut deep = QueryTree::new("q", 0);
        let e = expand_node(&mut deep, NodeId(0), &cfg, &mut market, &mut gw);
        assert_eq!(e.stopped, [StopReason::DepthLimit]);

        let silent = MockScript::with_default("nothing to ask");
        let mut gw2 = Gateway::new(&silent, "m");
        let mut single = QueryTree::new("q", 3);
        let e = expand_node(&mut single, NodeId(0), &cfg, &mut market, &mut gw2);
        assert_eq!(e.stopped, [StopReason::NoFollowups]);
        assert_eq!(single.len(), 1);
    }
}
