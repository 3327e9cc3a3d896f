//! Discrete Bayesian networks.
//!
//! Networks are read from a TOML file with one `[[nodes]]` table per node:
//!
//! ```toml
//! [[nodes]]
//! name = "B"
//! cardinality = 2
//! parents = ["A"]
//! states = ["off", "on"]      # optional
//! cpt = [0.8, 0.2, 0.1, 0.9]
//! ```
//!
//! `cpt` is row-major over the parents in the listed order, with the child's
//! own categories as the last (fastest) axis, so each consecutive run of
//! `cardinality` entries is one conditional distribution.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::diffcore::{NodeId, Tape, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::models::{enumerate_posterior, ModelBinding, Posterior, TracedModel};
use crate::scalar::Real;
use crate::space::{ConfigSpace, ENUMERATION_CAP};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetFile {
    nodes: Vec<NodeEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    name: String,
    cardinality: usize,
    #[serde(default)]
    parents: Vec<String>,
    #[serde(default)]
    states: Option<Vec<String>>,
    cpt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnNode {
    pub name: String,
    pub cardinality: usize,
    pub parents: Vec<usize>,
    pub states: Option<Vec<String>>,
    pub cpt: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesNet {
    nodes: Vec<BnNode>,
    order: Vec<usize>,
}

impl BayesNet {
    pub fn parse(text: &str) -> Result<Self> {
        let file: NetFile = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let index: HashMap<&str, usize> = file
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.as_str(), i))
            .collect();
        if index.len() != file.nodes.len() {
            let dup = file
                .nodes
                .iter()
                .enumerate()
                .find(|(i, n)| index[n.name.as_str()] != *i)
                .map(|(_, n)| n.name.clone())
                .unwrap_or_default();
            return Err(validation(&dup, "duplicate node name"));
        }
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for entry in &file.nodes {
            let parents = entry
                .parents
                .iter()
                .map(|p| {
                    index
                        .get(p.as_str())
                        .copied()
                        .ok_or_else(|| validation(&entry.name, &format!("unknown parent `{p}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            nodes.push(BnNode {
                name: entry.name.clone(),
                cardinality: entry.cardinality,
                parents,
                states: entry.states.clone(),
                cpt: entry.cpt.clone(),
            });
        }
        Self::from_nodes(nodes)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Validates nodes given with parent indices.
    pub fn from_nodes(nodes: Vec<BnNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("network has no nodes".into()));
        }
        for node in &nodes {
            if node.cardinality == 0 {
                return Err(validation(&node.name, "cardinality must be at least 1"));
            }
            if let Some(states) = &node.states {
                if states.len() != node.cardinality {
                    return Err(validation(&node.name, "number of states differs from cardinality"));
                }
            }
            let mut seen = vec![false; nodes.len()];
            for &p in &node.parents {
                if p >= nodes.len() {
                    return Err(validation(&node.name, "parent index out of range"));
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(validation(&node.name, "parent listed twice"));
                }
            }
            let rows: usize = node.parents.iter().map(|&p| nodes[p].cardinality).product();
            if node.cpt.len() != rows * node.cardinality {
                return Err(validation(
                    &node.name,
                    &format!(
                        "cpt has {} entries, expected {} ({} rows of {})",
                        node.cpt.len(),
                        rows * node.cardinality,
                        rows,
                        node.cardinality
                    ),
                ));
            }
            if node.cpt.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(validation(&node.name, "cpt entries must lie in [0, 1]"));
            }
            for (r, row) in node.cpt.chunks(node.cardinality).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(validation(&node.name, &format!("row {r} does not sum to 1 (sum {s})")));
                }
            }
        }
        let order = topological_order(&nodes)?;
        Ok(Self { nodes, order })
    }

    pub fn nodes(&self) -> &[BnNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices with every parent before its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Row of node `i`'s CPT selected by the full assignment `values`.
    fn row(&self, i: usize, values: &[usize]) -> usize {
        self.nodes[i]
            .parents
            .iter()
            .fold(0, |acc, &p| acc * self.nodes[p].cardinality + values[p])
    }

    /// `ln p(values)` for a complete assignment of every node.
    pub fn log_prob_full(&self, values: &[usize]) -> f64 {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| n.cpt[self.row(i, values) * n.cardinality + values[i]].ln())
            .sum()
    }
}

fn validation(node: &str, message: &str) -> Error {
    Error::Validation {
        node: node.to_string(),
        message: message.to_string(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn topological_order(nodes: &[BnNode]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree: Vec<usize> = nodes.iter().map(|nd| nd.parents.len()).collect();
    let mut children = vec![Vec::new(); n];
    for (i, nd) in nodes.iter().enumerate() {
        for &p in &nd.parents {
            children[p].push(i);
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for &c in children[i].iter().rev() {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).expect("some node is on a cycle");
        return Err(validation(&nodes[stuck].name, "cycle through this node"));
    }
    Ok(order)
}

/// Observed node values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Evidence {
    observed: Vec<(usize, usize)>,
}

impl Evidence {
    pub fn none() -> Self {
        Self::default()
    }

    /// Builds evidence from `(node name, category index)` pairs.
    pub fn from_pairs(net: &BayesNet, pairs: &[(&str, usize)]) -> Result<Self> {
        let mut observed = Vec::with_capacity(pairs.len());
        for &(name, value) in pairs {
            let i = net
                .node_index(name)
                .ok_or_else(|| Error::InvalidInput(format!("evidence names unknown node `{name}`")))?;
            let k = net.nodes[i].cardinality;
            if value >= k {
                return Err(Error::InvalidInput(format!(
                    "evidence {name}={value}: index out of range (cardinality {k})"
                )));
            }
            if observed.iter().any(|&(j, _)| j == i) {
                return Err(Error::InvalidInput(format!("node `{name}` observed twice")));
            }
            observed.push((i, value));
        }
        if observed.len() >= net.len() {
            return Err(Error::InvalidInput("evidence must leave at least one latent node".into()));
        }
        observed.sort_unstable();
        Ok(Self { observed })
    }

    /// Parses `NODE=INDEX` items.
    pub fn parse(net: &BayesNet, items: &[String]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(items.len());
        for item in items {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("evidence `{item}` is not NODE=INDEX")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("evidence `{item}`: index is not a non-negative integer")))?;
            pairs.push((name.trim(), value));
        }
        Self::from_pairs(net, &pairs)
    }

    pub fn observed(&self) -> &[(usize, usize)] {
        &self.observed
    }

    pub fn value_of(&self, node: usize) -> Option<usize> {
        self.observed.iter().find(|&&(i, _)| i == node).map(|&(_, v)| v)
    }
}

/// Posterior target `p(x | evidence)` of a network: latent dimensions are the
/// unobserved nodes in declaration order.
#[derive(Clone, Debug)]
pub struct BnPosterior {
    net: BayesNet,
    evidence: Evidence,
    latent: Vec<usize>,
    cardinalities: Vec<usize>,
    /// Position of node `i` among the latent dimensions.
    latent_pos: Vec<Option<usize>>,
    log_cpts: Vec<Vec<f64>>,
    grad_floor: f64,
}

impl BnPosterior {
    pub fn new(net: BayesNet, evidence: Evidence) -> Result<Self> {
        if evidence.observed.iter().any(|&(i, v)| i >= net.len() || v >= net.nodes[i].cardinality) {
            return Err(Error::InvalidInput("evidence does not belong to this network".into()));
        }
        let latent: Vec<usize> = (0..net.len()).filter(|&i| evidence.value_of(i).is_none()).collect();
        if latent.is_empty() {
            return Err(Error::InvalidInput("evidence must leave at least one latent node".into()));
        }
        let mut latent_pos = vec![None; net.len()];
        for (pos, &i) in latent.iter().enumerate() {
            latent_pos[i] = Some(pos);
        }
        let cardinalities = latent.iter().map(|&i| net.nodes[i].cardinality).collect();
        let log_cpts = net
            .nodes
            .iter()
            .map(|n| n.cpt.iter().map(|p| p.ln()).collect())
            .collect();
        Ok(Self {
            net,
            evidence,
            latent,
            cardinalities,
            latent_pos,
            log_cpts,
            grad_floor: LOG_FLOOR,
        })
    }

    /// Value substituted for `ln 0` in the backward pass of CPT lookups.
    pub fn with_gradient_floor(mut self, floor: f64) -> Self {
        self.grad_floor = floor;
        self
    }

    pub fn net(&self) -> &BayesNet {
        &self.net
    }

    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    /// Network node of each latent dimension.
    pub fn latent_nodes(&self) -> &[usize] {
        &self.latent
    }

    pub fn latent_names(&self) -> Vec<&str> {
        self.latent.iter().map(|&i| self.net.nodes[i].name.as_str()).collect()
    }

    /// Full node assignment from latent values plus evidence.
    pub fn full_assignment(&self, x: &[usize]) -> Vec<usize> {
        (0..self.net.len())
            .map(|i| match self.latent_pos[i] {
                Some(pos) => x[pos],
                None => self.evidence.value_of(i).expect("observed"),
            })
            .collect()
    }

    /// Exact posterior by enumeration, refusing above `cap` configurations.
    pub fn exact_posterior(&self, cap: u128) -> Result<Posterior> {
        enumerate_posterior::<f64, _>(self, cap)
    }

    pub fn exact_posterior_default(&self) -> Result<Posterior> {
        self.exact_posterior(ENUMERATION_CAP)
    }

    pub fn space(&self) -> ConfigSpace {
        ConfigSpace::new(self.cardinalities.clone()).expect("validated cardinalities")
    }

    /// One-hot node for network node `i`: the latent sample or an evidence constant.
    fn node_vector(&self, bind: &ModelBinding, xs: &[NodeId], i: usize) -> NodeId {
        match self.latent_pos[i] {
            Some(pos) => xs[pos],
            None => bind.nodes[self.evidence_slot(i)],
        }
    }

    fn evidence_slot(&self, node: usize) -> usize {
        // binding layout: [log tables (n), cpt matrices (n), evidence one-hots]
        2 * self.net.len()
            + self
                .evidence
                .observed
                .iter()
                .position(|&(i, _)| i == node)
                .expect("observed node")
    }

    /// Outer product of the parents' vectors, or `None` for root nodes.
    fn parent_vector<T: Real>(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId], i: usize) -> Option<NodeId> {
        let parents = &self.net.nodes[i].parents;
        let mut acc: Option<NodeId> = None;
        for &p in parents {
            let v = self.node_vector(bind, xs, p);
            acc = Some(match acc {
                None => v,
                Some(a) => tape.outer(a, v),
            });
        }
        acc
    }
}

impl<T: Real> TracedModel<T> for BnPosterior {
    fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    fn bind(&self, tape: &mut Tape<T>) -> ModelBinding {
        let mut nodes = Vec::with_capacity(2 * self.net.len() + self.evidence.observed.len());
        for lc in &self.log_cpts {
            let v: Vec<T> = lc.iter().map(|&l| T::lit(l)).collect();
            nodes.push(tape.constant(&v));
        }
        for n in &self.net.nodes {
            let v: Vec<T> = n.cpt.iter().map(|&p| T::lit(p)).collect();
            nodes.push(tape.constant(&v));
        }
        for &(i, v) in &self.evidence.observed {
            nodes.push(tape.one_hot(v, self.net.nodes[i].cardinality));
        }
        ModelBinding { nodes }
    }

    fn trace_log_joint(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId]) -> NodeId {
        let floor = T::lit(self.grad_floor);
        let terms: Vec<NodeId> = (0..self.net.len())
            .map(|i| {
                let own = self.node_vector(bind, xs, i);
                let joint = match self.parent_vector(tape, bind, xs, i) {
                    Some(par) => tape.outer(par, own),
                    None => own,
                };
                tape.log_lookup_with_floor(joint, bind.nodes[i], floor)
            })
            .collect();
        tape.sum_scalars(&terms)
    }

    /// Latent nodes contribute the Gumbel-Softmax log-density of their relaxed
    /// value given the CPT row mixed by their relaxed parents; observed nodes
    /// contribute the log of that mixed row at the observed category.
    fn trace_relaxed_log_joint(&self, tape: &mut Tape<T>, bind: &ModelBinding, xs: &[NodeId], tau_p: T) -> NodeId {
        let n = self.net.len();
        let terms: Vec<NodeId> = (0..n)
            .map(|i| {
                let own = self.node_vector(bind, xs, i);
                let cpt = bind.nodes[n + i];
                let probs = match self.parent_vector(tape, bind, xs, i) {
                    Some(par) => tape.linear_map(par, cpt),
                    None => cpt,
                };
                match self.latent_pos[i] {
                    Some(_) => tape.gs_log_density(own, probs, tau_p),
                    None => tape.log_dot(own, probs),
                }
            })
            .collect();
        tape.sum_scalars(&terms)
    }

    fn log_joint(&self, x: &[usize]) -> f64 {
        self.net.log_prob_full(&self.full_assignment(x))
    }
}
