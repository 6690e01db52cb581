//! Parsimonious HMM construction: data-driven question sets, per-position
//! tying trees grown by likelihood gain, and leaf merging to an exact budget.

mod map;

pub use map::StateTyingMap;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianNodeStats, VARIANCE_FLOOR};
use crate::gmm::PositionedStats;

const KMEANS_ITERATIONS: usize = 20;

/// Log-likelihood of the frames of a state set under one Gaussian fitted to
/// them: `-0.5 * gamma * (sum_d ln var_d + D + D ln 2pi)`, zero for an empty set.
pub fn pooled_log_likelihood(stats: &GaussianNodeStats, var_floor: f64) -> Result<f64> {
    if stats.occupancy < 0.0 || stats.occupancy.is_nan() {
        return Err(Error::Invariant(format!("negative occupancy {}", stats.occupancy)));
    }
    if stats.occupancy == 0.0 {
        return Ok(0.0);
    }
    let d = stats.dim() as f64;
    let log_det: f64 = stats.floored_variance(var_floor).iter().map(|v| v.ln()).sum();
    Ok(-0.5 * stats.occupancy * (log_det + d + d * (2.0 * PI).ln()))
}

/// `L(left) + L(right) - L(parent)` with the parent pooled from the children.
pub fn split_gain(left: &GaussianNodeStats, right: &GaussianNodeStats, var_floor: f64) -> Result<f64> {
    let mut parent = left.clone();
    parent += right;
    Ok(pooled_log_likelihood(left, var_floor)? + pooled_log_likelihood(right, var_floor)?
        - pooled_log_likelihood(&parent, var_floor)?)
}

fn pool<'a>(stats: &'a [GaussianNodeStats], classes: impl IntoIterator<Item = &'a u32>) -> GaussianNodeStats {
    let mut out = GaussianNodeStats::new(stats.first().map_or(0, GaussianNodeStats::dim));
    for &c in classes {
        out += &stats[c as usize];
    }
    out
}

/// A yes/no question about the character class of a state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub position: usize,
    /// Sorted member classes.
    pub members: Vec<u32>,
}

impl Question {
    pub fn contains(&self, class_id: u32) -> bool {
        self.members.binary_search(&class_id).is_ok()
    }

    /// Splits `classes` into (in question, not in question); `None` if a side is empty.
    pub fn partition(&self, classes: &[u32]) -> Option<(Vec<u32>, Vec<u32>)> {
        let (yes, no): (Vec<u32>, Vec<u32>) = classes.iter().partition(|&&c| self.contains(c));
        (!yes.is_empty() && !no.is_empty()).then_some((yes, no))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionNode {
    pub classes: Vec<u32>,
    /// Pooled single-Gaussian log-likelihood of the node's frames.
    pub score: f64,
    pub children: Option<(usize, usize)>,
}

/// Binary clustering tree of the classes seen at one position; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionTree {
    pub position: usize,
    pub nodes: Vec<QuestionNode>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn weighted_centroid(classes: &[u32], means: &[Vec<f64>], occ: &[f64]) -> Vec<f64> {
    let dim = means[classes[0] as usize].len();
    let total: f64 = classes.iter().map(|&c| occ[c as usize]).sum();
    let mut out = vec![0.0; dim];
    for &c in classes {
        let w = occ[c as usize] / total;
        for (o, m) in out.iter_mut().zip(&means[c as usize]) {
            *o += w * m;
        }
    }
    out
}

/// Occupancy-weighted 2-means over class means, seeded with the two most
/// distant means. The returned first cluster holds the lowest class id.
fn two_means(classes: &[u32], means: &[Vec<f64>], occ: &[f64]) -> (Vec<u32>, Vec<u32>) {
    let mut seeds = (0, 1);
    let mut far = -1.0;
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            let d = sq_dist(&means[classes[i] as usize], &means[classes[j] as usize]);
            if d > far {
                far = d;
                seeds = (i, j);
            }
        }
    }
    let mut centroids = [
        means[classes[seeds.0] as usize].clone(),
        means[classes[seeds.1] as usize].clone(),
    ];
    let mut assign: Vec<usize> = vec![usize::MAX; classes.len()];
    for _ in 0..KMEANS_ITERATIONS {
        let next: Vec<usize> = classes
            .iter()
            .map(|&c| {
                let m = &means[c as usize];
                usize::from(sq_dist(m, &centroids[1]) < sq_dist(m, &centroids[0]))
            })
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (k, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<u32> = classes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(&c, _)| c)
                .collect();
            if !members.is_empty() {
                *centroid = weighted_centroid(&members, means, occ);
            }
        }
    }
    let mut a: Vec<u32> = Vec::new();
    let mut b: Vec<u32> = Vec::new();
    for (&c, &k) in classes.iter().zip(&assign) {
        if k == 0 { &mut a } else { &mut b }.push(c);
    }
    if a.is_empty() || b.is_empty() {
        // identical means: fall back to splitting off the second seed
        let odd = classes[seeds.1];
        a = classes.iter().copied().filter(|&c| c != odd).collect();
        b = vec![odd];
    }
    if b[0] < a[0] {
        std::mem::swap(&mut a, &mut b);
    }
    (a, b)
}

/// Builds the question tree of one position by recursive 2-means clustering
/// of the class means; `max_depth` bounds the tree depth (root at depth 0).
///
/// Classes without occupancy at this position take part in no question.
/// One question is emitted per internal node: the member set of its first
/// child, i.e. the cluster holding the node's lowest class id.
pub fn generate_question_set(
    position: usize,
    class_stats: &[GaussianNodeStats],
    max_depth: Option<usize>,
    var_floor: f64,
) -> Result<(QuestionTree, Vec<Question>)> {
    let classes: Vec<u32> = (0..class_stats.len() as u32)
        .filter(|&c| class_stats[c as usize].occupancy > 0.0)
        .collect();
    let means: Vec<Vec<f64>> = class_stats.iter().map(GaussianNodeStats::mean).collect();
    let occ: Vec<f64> = class_stats.iter().map(|s| s.occupancy).collect();
    let mut tree = QuestionTree {
        position,
        nodes: Vec::new(),
    };
    if classes.is_empty() {
        return Ok((tree, Vec::new()));
    }
    let root_score = pooled_log_likelihood(&pool(class_stats, &classes), var_floor)?;
    tree.nodes.push(QuestionNode {
        classes,
        score: root_score,
        children: None,
    });
    let mut questions = Vec::new();
    // (node, depth), processed in creation order so ids are breadth-first
    let mut queue = std::collections::VecDeque::from([(0usize, 0usize)]);
    while let Some((n, depth)) = queue.pop_front() {
        if tree.nodes[n].classes.len() < 2 || max_depth.is_some_and(|m| depth >= m) {
            continue;
        }
        let (a, b) = two_means(&tree.nodes[n].classes, &means, &occ);
        questions.push(Question {
            id: questions.len(),
            position,
            members: a.clone(),
        });
        let mut ids = [0; 2];
        for (k, set) in [a, b].into_iter().enumerate() {
            let score = pooled_log_likelihood(&pool(class_stats, &set), var_floor)?;
            ids[k] = tree.nodes.len();
            tree.nodes.push(QuestionNode {
                classes: set,
                score,
                children: None,
            });
            queue.push_back((ids[k], depth + 1));
        }
        tree.nodes[n].children = Some((ids[0], ids[1]));
    }
    Ok((tree, questions))
}

/// Question sets of every position, built in parallel.
pub fn generate_all_question_sets(
    stats: &PositionedStats,
    max_depth: Option<usize>,
    var_floor: f64,
) -> Result<Vec<Vec<Question>>> {
    (0..stats.num_positions)
        .into_par_iter()
        .map(|p| generate_question_set(p, &stats.at_position(p), max_depth, var_floor).map(|(_, q)| q))
        .collect()
}

/// `questions.tsv`: position, question_id, space-separated member class ids.
pub fn write_questions(w: &mut impl Write, sets: &[Vec<Question>]) -> Result<()> {
    for q in sets.iter().flatten() {
        let members: Vec<String> = q.members.iter().map(u32::to_string).collect();
        writeln!(w, "{}\t{}\t{}", q.position, q.id, members.join(" "))?;
    }
    Ok(())
}

/// Reads `questions.tsv` into per-position sets for `num_positions` positions.
pub fn read_questions(r: impl BufRead, num_positions: usize) -> Result<Vec<Vec<Question>>> {
    let mut sets = vec![Vec::new(); num_positions];
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("questions.tsv: {line:?}"));
        let mut f = line.split('\t');
        let position: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let id: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let mut members: Vec<u32> = f
            .next()
            .ok_or_else(bad)?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        members.sort_unstable();
        let set: &mut Vec<Question> = sets.get_mut(position).ok_or_else(bad)?;
        set.push(Question { id, position, members });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TyingConfig {
    /// Minimum likelihood gain for a split.
    pub split_threshold: f64,
    /// Minimum occupancy of each child of a split.
    pub min_occupancy: f64,
    /// Depth bound of the question-generation trees.
    pub question_depth: Option<usize>,
    pub var_floor: f64,
}

impl Default for TyingConfig {
    fn default() -> Self {
        Self {
            split_threshold: 0.0,
            min_occupancy: 50.0,
            question_depth: None,
            var_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TyingNode {
    pub classes: Vec<u32>,
    pub stats: GaussianNodeStats,
    pub log_likelihood: f64,
    /// Question id and gain of the split, for internal nodes.
    pub question: Option<usize>,
    pub gain: f64,
    /// (in question, not in question)
    pub children: Option<(usize, usize)>,
    pub parent: Option<usize>,
}

impl TyingNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Decision tree tying the states of one position; node 0 is the root and
/// holds every class.
#[derive(Debug, Clone, PartialEq)]
pub struct TyingTree {
    pub position: usize,
    pub nodes: Vec<TyingNode>,
}

/// Grows the tying tree of `position` top-down. A node is split by its
/// best applicable question (largest gain, lower id on ties) while the gain
/// reaches `split_threshold`, is strictly positive and both children keep at
/// least `min_occupancy`.
pub fn build_tying_tree(
    position: usize,
    questions: &[Question],
    class_stats: &[GaussianNodeStats],
    cfg: &TyingConfig,
) -> Result<TyingTree> {
    let all: Vec<u32> = (0..class_stats.len() as u32).collect();
    let root_stats = pool(class_stats, &all);
    let mut tree = TyingTree {
        position,
        nodes: vec![TyingNode {
            log_likelihood: pooled_log_likelihood(&root_stats, cfg.var_floor)?,
            classes: all,
            stats: root_stats,
            question: None,
            gain: 0.0,
            children: None,
            parent: None,
        }],
    };
    let mut stack = vec![0usize];
    while let Some(n) = stack.pop() {
        let node = &tree.nodes[n];
        let mut best: Option<(f64, usize, Vec<u32>, Vec<u32>, GaussianNodeStats, GaussianNodeStats)> = None;
        for q in questions {
            let Some((yes, no)) = q.partition(&node.classes) else {
                continue;
            };
            let (ls, rs) = (pool(class_stats, &yes), pool(class_stats, &no));
            if ls.occupancy < cfg.min_occupancy || rs.occupancy < cfg.min_occupancy {
                continue;
            }
            let gain = pooled_log_likelihood(&ls, cfg.var_floor)? + pooled_log_likelihood(&rs, cfg.var_floor)?
                - node.log_likelihood;
            if best.as_ref().map_or(true, |b| gain > b.0) {
                best = Some((gain, q.id, yes, no, ls, rs));
            }
        }
        let Some((gain, qid, yes, no, ls, rs)) = best else {
            continue;
        };
        let tol = 1e-9 * node.log_likelihood.abs().max(1.0);
        if gain < cfg.split_threshold || gain <= tol {
            continue;
        }
        let mut ids = [0; 2];
        for (k, (classes, stats)) in [(yes, ls), (no, rs)].into_iter().enumerate() {
            ids[k] = tree.nodes.len();
            tree.nodes.push(TyingNode {
                log_likelihood: pooled_log_likelihood(&stats, cfg.var_floor)?,
                classes,
                stats,
                question: None,
                gain: 0.0,
                children: None,
                parent: Some(n),
            });
        }
        let node = &mut tree.nodes[n];
        node.question = Some(qid);
        node.gain = gain;
        node.children = Some((ids[0], ids[1]));
        // visit the first child next
        stack.push(ids[1]);
        stack.push(ids[0]);
    }
    Ok(tree)
}

impl TyingTree {
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n].children {
                Some((a, b)) => {
                    stack.push(b);
                    stack.push(a);
                }
                None => out.push(n),
            }
        }
        out
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Leaf holding `class_id`.
    pub fn leaf_of(&self, class_id: u32) -> usize {
        let mut n = 0;
        while let Some((a, b)) = self.nodes[n].children {
            n = if self.nodes[a].classes.binary_search(&class_id).is_ok() { a } else { b };
        }
        n
    }

    /// Likelihood lost by collapsing internal node `n` whose children are leaves.
    fn merge_cost(&self, n: usize, var_floor: f64) -> Result<f64> {
        let (a, b) = self.nodes[n].children.expect("internal node");
        let mut parent = self.nodes[a].stats.clone();
        parent += &self.nodes[b].stats;
        Ok(pooled_log_likelihood(&self.nodes[a].stats, var_floor)?
            + pooled_log_likelihood(&self.nodes[b].stats, var_floor)?
            - pooled_log_likelihood(&parent, var_floor)?)
    }

    fn mergeable(&self, n: usize) -> bool {
        matches!(self.nodes[n].children, Some((a, b)) if self.nodes[a].is_leaf() && self.nodes[b].is_leaf())
    }

    /// Graphviz rendering; internal nodes show their question and gain.
    pub fn to_dot(&self, questions: &[Question]) -> String {
        let mut s = format!("digraph position{} {{\n  node [shape=box];\n", self.position);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let label = match (node.children, node.question) {
                (Some(_), Some(q)) => {
                    let members = questions
                        .iter()
                        .find(|x| x.id == q)
                        .map(|x| fmt_classes(&x.members))
                        .unwrap_or_default();
                    format!("q{q} {{{members}}}\\ngain {:.2}", node.gain)
                }
                _ => format!("{{{}}}\\nocc {:.1}", fmt_classes(&node.classes), node.stats.occupancy),
            };
            let _ = writeln!(s, "  n{n} [label=\"{label}\"];");
            if let Some((a, b)) = node.children {
                let _ = writeln!(s, "  n{n} -> n{a} [label=\"yes\"];\n  n{n} -> n{b} [label=\"no\"];");
                stack.push(b);
                stack.push(a);
            }
        }
        s.push_str("}\n");
        s
    }
}

fn fmt_classes(c: &[u32]) -> String {
    c.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

/// One executed merge of two sibling leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub position: usize,
    pub node: usize,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct TyingOutcome {
    pub trees: Vec<TyingTree>,
    pub map: StateTyingMap,
    pub merges: Vec<MergeRecord>,
}

struct Candidate {
    cost: f64,
    position: usize,
    node: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // reversed: BinaryHeap is a max-heap and we pop the cheapest merge
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.position.cmp(&self.position))
            .then(other.node.cmp(&self.node))
    }
}

/// Merges sibling leaves, cheapest likelihood loss first across all trees,
/// until exactly `target` leaves remain, then numbers the leaves.
///
/// `trees[p]` must be the tree of position `p`. A target equal to the
/// untied state count yields the identity map.
pub fn merge_to_target(trees: &[TyingTree], target: usize, var_floor: f64) -> Result<TyingOutcome> {
    let positions = trees.len();
    if positions == 0 {
        return Err(Error::InvalidInput("no tying trees".into()));
    }
    let num_classes = trees[0].nodes[0].classes.len();
    for (p, t) in trees.iter().enumerate() {
        if t.position != p || t.nodes[0].classes.len() != num_classes {
            return Err(Error::InvalidInput(format!("tying tree {p} is inconsistent")));
        }
    }
    if target == num_classes * positions {
        return Ok(TyingOutcome {
            trees: trees.to_vec(),
            map: StateTyingMap::identity(num_classes, positions),
            merges: Vec::new(),
        });
    }
    let leaves: usize = trees.iter().map(TyingTree::num_leaves).sum();
    if target < positions || target > leaves {
        return Err(Error::TargetOutOfRange {
            target,
            min: positions,
            max: leaves,
        });
    }
    let mut trees = trees.to_vec();
    let mut heap = BinaryHeap::new();
    for (p, t) in trees.iter().enumerate() {
        for n in 0..t.nodes.len() {
            if t.mergeable(n) {
                heap.push(Candidate {
                    cost: t.merge_cost(n, var_floor)?,
                    position: p,
                    node: n,
                });
            }
        }
    }
    let mut merges = Vec::new();
    let mut count = leaves;
    while count > target {
        let c = heap.pop().ok_or_else(|| Error::Invariant("merge queue exhausted".into()))?;
        let t = &mut trees[c.position];
        t.nodes[c.node].children = None;
        t.nodes[c.node].question = None;
        t.nodes[c.node].gain = 0.0;
        count -= 1;
        merges.push(MergeRecord {
            position: c.position,
            node: c.node,
            cost: c.cost,
        });
        if let Some(parent) = t.nodes[c.node].parent {
            if t.mergeable(parent) {
                heap.push(Candidate {
                    cost: t.merge_cost(parent, var_floor)?,
                    position: c.position,
                    node: parent,
                });
            }
        }
    }
    let map = map_from_trees(&trees, num_classes)?;
    Ok(TyingOutcome { trees, map, merges })
}

/// Numbers the leaves in order of first appearance over `class * S + position`.
pub fn map_from_trees(trees: &[TyingTree], num_classes: usize) -> Result<StateTyingMap> {
    let positions = trees.len();
    let mut leaf_id: Vec<Vec<Option<u32>>> = trees.iter().map(|t| vec![None; t.nodes.len()]).collect();
    let mut next = 0u32;
    let mut ids = Vec::with_capacity(num_classes * positions);
    for c in 0..num_classes as u32 {
        for (p, t) in trees.iter().enumerate() {
            let leaf = t.leaf_of(c);
            let id = *leaf_id[p][leaf].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            ids.push(id);
        }
    }
    StateTyingMap::from_ids(num_classes, positions, ids)
}

/// Tied-state budget for an average of `avg` states per character HMM.
pub fn retarget_average_states(num_classes: usize, avg: f64) -> Result<usize> {
    if !(avg > 0.0) || !avg.is_finite() {
        return Err(Error::Config(format!("average states per HMM must be positive, got {avg}")));
    }
    Ok((avg * num_classes as f64).round() as usize)
}

/// Question sets, trees and merged map from positioned statistics.
pub fn build_parsimonious(
    stats: &PositionedStats,
    questions: &[Vec<Question>],
    cfg: &TyingConfig,
    target: usize,
) -> Result<TyingOutcome> {
    if questions.len() != stats.num_positions {
        return Err(Error::InvalidInput(format!(
            "{} question sets for {} positions",
            questions.len(),
            stats.num_positions
        )));
    }
    let trees: Vec<TyingTree> = (0..stats.num_positions)
        .into_par_iter()
        .map(|p| build_tying_tree(p, &questions[p], &stats.at_position(p), cfg))
        .collect::<Result<_>>()?;
    merge_to_target(&trees, target, cfg.var_floor)
}

#[cfg(test)]
mod tests;
