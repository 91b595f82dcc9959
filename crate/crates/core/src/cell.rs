//! The DAG cell: continuous (mixed) and discrete forward passes, and
//! derivation of a discrete genotype from architecture logits.
//!
//! Node numbering: `0..input_arity` are inputs, then the intermediates in
//! order; the output node is implicit. Every intermediate `j` has one edge
//! from each earlier node `i < j`. Edges are numbered node by node, and by
//! predecessor within a node, so for two inputs and three intermediates the
//! edge ids are `(0,2) (1,2) (0,3) (1,3) (2,3) (0,4) ... (3,4)`.

use std::cmp::Ordering;

use cellnas_tensor::Value;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::ops::{apply_op, OpKind, NUM_OPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// Total node count: inputs, intermediates and the output.
    pub nodes: usize,
    pub input_arity: usize,
    pub hidden: usize,
    /// Retained incoming edges per intermediate after derivation.
    pub k: usize,
    #[serde(default)]
    pub reduction: Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl CellSpec {
    /// Two inputs, `intermediates` learned nodes, one output.
    pub fn new(intermediates: usize, hidden: usize, k: usize) -> Result<Self> {
        let spec = CellSpec {
            nodes: intermediates + 3,
            input_arity: 2,
            hidden,
            k,
            reduction: Reduction::Mean,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_arity == 0 {
            return Err(NasError::Spec("input arity must be at least 1".into()));
        }
        if self.nodes < self.input_arity + 2 {
            return Err(NasError::Spec(format!(
                "{} nodes cannot hold {} inputs, an intermediate and the output",
                self.nodes, self.input_arity
            )));
        }
        if self.k == 0 || self.k > self.input_arity {
            return Err(NasError::Spec(format!(
                "k = {} must lie in 1..={} (the first intermediate has only {} predecessors)",
                self.k, self.input_arity, self.input_arity
            )));
        }
        if self.hidden == 0 {
            return Err(NasError::Spec("hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn intermediates(&self) -> usize {
        self.nodes - self.input_arity - 1
    }

    /// Absolute node indices of the intermediates.
    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        self.input_arity..self.input_arity + self.intermediates()
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.intermediate_nodes()
            .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.intermediate_nodes().sum()
    }

    /// Id of the first edge entering intermediate node `to`.
    pub fn first_edge_into(&self, to: usize) -> usize {
        (self.input_arity..to).sum()
    }

    pub fn edge_id(&self, from: usize, to: usize) -> usize {
        debug_assert!(from < to && self.intermediate_nodes().contains(&to));
        self.first_edge_into(to) + from
    }

    /// Width of the cell output.
    pub fn output_dim(&self) -> usize {
        match self.reduction {
            Reduction::Mean => self.hidden,
            Reduction::Concat => self.hidden * self.intermediates(),
        }
    }
}

/// Architecture logits: one `|O|`-vector per edge, stored edge-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaParams {
    values: Vec<f64>,
}

impl AlphaParams {
    pub fn zeros(spec: &CellSpec) -> Self {
        Self {
            values: vec![0.0; spec.edge_count() * NUM_OPS],
        }
    }

    pub fn from_vec(spec: &CellSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.edge_count() * NUM_OPS;
        if values.len() != expected {
            return Err(NasError::Spec(format!(
                "alpha has {} entries, spec needs {expected} ({} edges x {NUM_OPS} ops)",
                values.len(),
                spec.edge_count()
            )));
        }
        Ok(Self { values })
    }

    pub fn edge_count(&self) -> usize {
        self.values.len() / NUM_OPS
    }

    pub fn edge(&self, e: usize) -> &[f64] {
        &self.values[e * NUM_OPS..(e + 1) * NUM_OPS]
    }

    pub fn edge_mut(&mut self, e: usize) -> &mut [f64] {
        &mut self.values[e * NUM_OPS..(e + 1) * NUM_OPS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// Softmax over all ops (zero included) on edge `e`.
    pub fn edge_weights(&self, e: usize) -> [f64; NUM_OPS] {
        softmax(self.edge(e))
    }

    /// Mean Shannon entropy (nats) of the per-edge softmax weights.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = (0..self.edge_count())
            .map(|e| {
                self.edge_weights(e)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.edge_count() as f64
    }
}

/// Zero logits: uniform attention over all ops on every edge.
pub fn init_alpha(spec: &CellSpec) -> AlphaParams {
    AlphaParams::zeros(spec)
}

fn softmax(logits: &[f64]) -> [f64; NUM_OPS] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_OPS];
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|p| *p /= total);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gene {
    pub pred: usize,
    pub op: OpKind,
}

/// A discrete cell: `k` retained `(predecessor, op)` pairs per intermediate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub spec: CellSpec,
    pub nodes: Vec<Vec<Gene>>,
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.nodes.len() != self.spec.intermediates() {
            return Err(NasError::Genotype(format!(
                "{} node entries for {} intermediates",
                self.nodes.len(),
                self.spec.intermediates()
            )));
        }
        for (m, genes) in self.nodes.iter().enumerate() {
            let node = self.spec.input_arity + m;
            if genes.len() != self.spec.k {
                return Err(NasError::Genotype(format!(
                    "node {node} has {} edges, expected k = {}",
                    genes.len(),
                    self.spec.k
                )));
            }
            for (i, g) in genes.iter().enumerate() {
                if g.op == OpKind::Zero {
                    return Err(NasError::Genotype(format!("node {node} retains a zero op")));
                }
                if g.pred >= node {
                    return Err(NasError::Genotype(format!(
                        "node {node} takes input from node {} which does not precede it",
                        g.pred
                    )));
                }
                if genes[..i].iter().any(|h| h.pred == g.pred) {
                    return Err(NasError::Genotype(format!(
                        "node {node} uses predecessor {} twice",
                        g.pred
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype =
            serde_json::from_str(text).map_err(|e| NasError::Genotype(format!("malformed document: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Compact one-line form, e.g. `2:[0:identity,1:linear_tanh] 3:[...]`.
    pub fn summary(&self) -> String {
        self.nodes
            .iter()
            .enumerate()
            .map(|(m, genes)| {
                let inner: Vec<String> = genes.iter().map(|g| format!("{}:{}", g.pred, g.op)).collect();
                format!("{}:[{}]", self.spec.input_arity + m, inner.join(","))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Recorded weights of every parameterized op on every edge, indexed
/// `[edge][op registry index]`.
#[derive(Debug, Clone)]
pub struct MixedWeights {
    edges: Vec<[Option<Value>; NUM_OPS]>,
}

impl MixedWeights {
    pub fn new(edges: Vec<[Option<Value>; NUM_OPS]>) -> Self {
        Self { edges }
    }

    pub fn get(&self, edge: usize, op: OpKind) -> Option<&Value> {
        self.edges.get(edge)?[op.index()].as_ref()
    }

    pub fn edge(&self, edge: usize) -> &[Option<Value>; NUM_OPS] {
        &self.edges[edge]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The weights a discrete cell keeps when it inherits from this one.
    pub fn restrict(&self, genotype: &Genotype) -> GenotypeWeights {
        let spec = &genotype.spec;
        let nodes = genotype
            .nodes
            .iter()
            .enumerate()
            .map(|(m, genes)| {
                let to = spec.input_arity + m;
                genes
                    .iter()
                    .map(|g| self.get(spec.edge_id(g.pred, to), g.op).cloned())
                    .collect()
            })
            .collect();
        GenotypeWeights { nodes }
    }
}

/// Recorded weights for a discrete cell, aligned with `Genotype::nodes`.
#[derive(Debug, Clone)]
pub struct GenotypeWeights {
    nodes: Vec<Vec<Option<Value>>>,
}

impl GenotypeWeights {
    pub fn new(nodes: Vec<Vec<Option<Value>>>) -> Self {
        Self { nodes }
    }

    pub fn get(&self, node: usize, slot: usize) -> Option<&Value> {
        self.nodes.get(node)?.get(slot)?.as_ref()
    }
}

/// `Σ_o softmax(alpha)_o · o(x)` over the full registry.
///
/// `alpha` has shape `[|O|]`. The zero op adds nothing to the sum but still
/// takes part in the softmax normalisation.
pub fn mixed_edge_forward(alpha: &Value, x: &Value, weights: &[Option<Value>; NUM_OPS]) -> Result<Value> {
    if alpha.shape() != [NUM_OPS] {
        return Err(NasError::Spec(format!(
            "edge logits must have shape [{NUM_OPS}], got {:?}",
            alpha.shape()
        )));
    }
    let probs = alpha.softmax(0)?;
    let mut acc: Option<Value> = None;
    for op in OpKind::NON_ZERO {
        let out = apply_op(op, weights[op.index()].as_ref(), x)?;
        let term = probs.index(op.index())?.mul(&out)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("registry has non-zero ops"))
}

pub struct CellOutput {
    pub output: Value,
    /// Inputs followed by every intermediate.
    pub nodes: Vec<Value>,
}

fn check_inputs(spec: &CellSpec, inputs: &[Value]) -> Result<()> {
    if inputs.len() != spec.input_arity {
        return Err(NasError::Spec(format!(
            "cell expects {} inputs, got {}",
            spec.input_arity,
            inputs.len()
        )));
    }
    for x in inputs {
        if x.shape().len() != 2 || x.shape()[1] != spec.hidden {
            return Err(NasError::Spec(format!(
                "cell inputs must be (batch, {}), got {:?}",
                spec.hidden,
                x.shape()
            )));
        }
    }
    Ok(())
}

fn reduce(spec: &CellSpec, intermediates: &[Value]) -> Result<Value> {
    match spec.reduction {
        Reduction::Mean => {
            let mut acc = intermediates[0].clone();
            for v in &intermediates[1..] {
                acc = acc.add(v)?;
            }
            Ok(acc.scale(1.0 / intermediates.len() as f64)?)
        }
        Reduction::Concat => {
            let refs: Vec<&Value> = intermediates.iter().collect();
            Ok(Value::concat(&refs, 1)?)
        }
    }
}

/// Continuous cell: every intermediate sums the mixed ops on all its
/// incoming edges. `alpha` holds one `[|O|]` value per edge.
pub fn cell_forward(spec: &CellSpec, alpha: &[Value], weights: &MixedWeights, inputs: &[Value]) -> Result<CellOutput> {
    check_inputs(spec, inputs)?;
    if alpha.len() != spec.edge_count() || weights.edge_count() != spec.edge_count() {
        return Err(NasError::Spec(format!(
            "cell has {} edges but got {} alpha vectors and {} weight sets",
            spec.edge_count(),
            alpha.len(),
            weights.edge_count()
        )));
    }
    let mut nodes: Vec<Value> = inputs.to_vec();
    for to in spec.intermediate_nodes() {
        let mut acc: Option<Value> = None;
        for (from, node) in nodes.iter().enumerate() {
            let e = spec.edge_id(from, to);
            let term = mixed_edge_forward(&alpha[e], node, weights.edge(e))?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        nodes.push(acc.expect("every intermediate has a predecessor"));
    }
    let output = reduce(spec, &nodes[spec.input_arity..])?;
    Ok(CellOutput { output, nodes })
}

/// Discrete cell: each intermediate sums only its retained `(pred, op)` pairs.
pub fn discrete_forward(genotype: &Genotype, weights: &GenotypeWeights, inputs: &[Value]) -> Result<Value> {
    genotype.validate()?;
    let spec = &genotype.spec;
    check_inputs(spec, inputs)?;
    let mut nodes: Vec<Value> = inputs.to_vec();
    for (m, genes) in genotype.nodes.iter().enumerate() {
        let mut acc: Option<Value> = None;
        for (slot, g) in genes.iter().enumerate() {
            let term = apply_op(g.op, weights.get(m, slot), &nodes[g.pred])?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        nodes.push(acc.expect("k >= 1"));
    }
    reduce(spec, &nodes[spec.input_arity..])
}

/// Per-edge summary used when ranking edges entering one node.
#[derive(Debug, Clone, Copy)]
struct EdgeChoice {
    pred: usize,
    op: OpKind,
    strength: f64,
}

fn best_non_zero(weights: &[f64; NUM_OPS]) -> (OpKind, f64) {
    let mut best = (OpKind::NON_ZERO[0], weights[OpKind::NON_ZERO[0].index()]);
    for op in &OpKind::NON_ZERO[1..] {
        let w = weights[op.index()];
        if w > best.1 {
            best = (*op, w);
        }
    }
    best
}

/// Keeps, for every intermediate, the `k` incoming edges whose strongest
/// non-zero op has the largest softmax weight (denominator includes the zero
/// op), each carrying that op.
///
/// Ties go to the lower predecessor index, then the lower registry index.
pub fn derive_genotype(spec: &CellSpec, alpha: &AlphaParams) -> Result<Genotype> {
    spec.validate()?;
    if alpha.edge_count() != spec.edge_count() {
        return Err(NasError::Spec(format!(
            "alpha covers {} edges, spec has {}",
            alpha.edge_count(),
            spec.edge_count()
        )));
    }
    let nodes = spec
        .intermediate_nodes()
        .map(|to| {
            let mut choices: Vec<EdgeChoice> = (0..to)
                .map(|pred| {
                    let (op, strength) = best_non_zero(&alpha.edge_weights(spec.edge_id(pred, to)));
                    EdgeChoice { pred, op, strength }
                })
                .collect();
            choices.sort_by(|a, b| {
                b.strength
                    .partial_cmp(&a.strength)
                    .unwrap_or(Ordering::Equal)
                    .then(a.pred.cmp(&b.pred))
            });
            let mut genes: Vec<Gene> = choices[..spec.k]
                .iter()
                .map(|c| Gene { pred: c.pred, op: c.op })
                .collect();
            genes.sort_by_key(|g| g.pred);
            genes
        })
        .collect();
    Ok(Genotype { spec: *spec, nodes })
}

/// α snapshot as a tab-separated table: one row per edge, one column per op.
pub fn alpha_to_tsv(spec: &CellSpec, alpha: &AlphaParams) -> String {
    let mut out = String::from("edge\tfrom\tto");
    for op in OpKind::ALL {
        out.push('\t');
        out.push_str(op.name());
    }
    out.push('\n');
    for (e, edge) in spec.edges().iter().enumerate() {
        out.push_str(&format!("{e}\t{}\t{}", edge.from, edge.to));
        for v in alpha.edge(e) {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn alpha_from_tsv(spec: &CellSpec, text: &str) -> Result<AlphaParams> {
    let bad = |line: usize, msg: String| NasError::Parse {
        path: "<alpha>".into(),
        line,
        message: msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty alpha table".into()))?;
    let expected_header: Vec<&str> = ["edge", "from", "to"]
        .into_iter()
        .chain(OpKind::ALL.iter().map(|o| o.name()))
        .collect();
    if header.split('\t').collect::<Vec<_>>() != expected_header {
        return Err(bad(1, format!("header must be `{}`", expected_header.join("\\t"))));
    }
    let edges = spec.edges();
    let mut values = Vec::with_capacity(edges.len() * NUM_OPS);
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 + NUM_OPS {
            return Err(bad(lineno, format!("expected {} columns, got {}", 3 + NUM_OPS, cols.len())));
        }
        let ids: Vec<usize> = cols[..3]
            .iter()
            .map(|c| c.parse::<usize>().map_err(|_| bad(lineno, format!("bad index `{c}`"))))
            .collect::<Result<_>>()?;
        let edge = edges
            .get(rows)
            .ok_or_else(|| bad(lineno, format!("more rows than the {} edges of the spec", edges.len())))?;
        if ids != [rows, edge.from, edge.to] {
            return Err(bad(
                lineno,
                format!("row {:?} does not match edge {rows} = ({}, {})", ids, edge.from, edge.to),
            ));
        }
        for c in &cols[3..] {
            values.push(c.parse::<f64>().map_err(|_| bad(lineno, format!("bad number `{c}`")))?);
        }
        rows += 1;
    }
    if rows != edges.len() {
        return Err(bad(rows + 1, format!("table has {rows} rows, spec has {} edges", edges.len())));
    }
    AlphaParams::from_vec(spec, values)
}
