//! Classifier built around one cell, in a continuous (supernet) or discrete
//! (genotype) form.
//!
//! ```text
//! x ─┬─ [x,1]·P₀ ─┐
//!    └─ [x,1]·P₁ ─┴─ cell ─ [h,1]·H ─ softmax cross-entropy
//! ```
//!
//! All weights live in one flat vector laid out as `P₀, P₁`, the edge-op
//! matrices (edge-major, registry order; genotype order for a discrete
//! cell), then `H`. The architecture logits are a separate flat vector of
//! `edges × |O|` entries.

use std::sync::Arc;

use cellnas_tensor::{Tape, Tensor, Value};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{ensure_finite, BilevelProblem, Evaluation, GradRequest, Split};
use crate::cell::{cell_forward, discrete_forward, CellSpec, Genotype, GenotypeWeights, MixedWeights};
use crate::error::{NasError, Result};
use crate::ops::{fill_uniform, OpKind, NUM_OPS};
use crate::optim::{clip_global_norm, CosineSchedule, SgdMomentum};
use crate::tasks::data::{Dataset, SplitTag};

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mixed(CellSpec),
    Discrete(Genotype),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    body: Body,
    dims: usize,
    classes: usize,
    projections: [Block; 2],
    /// One entry per op slot: edge-major × registry for a supernet,
    /// node-major × gene for a genotype. `None` for parameter-free ops.
    op_blocks: Vec<Option<Block>>,
    head: Block,
    total: usize,
}

impl Network {
    pub fn supernet(spec: &CellSpec, dims: usize, classes: usize) -> Result<Self> {
        spec.validate()?;
        let slots: Vec<bool> = (0..spec.edge_count())
            .flat_map(|_| OpKind::ALL.map(|op| op.is_parameterized()))
            .collect();
        Self::build(Body::Mixed(*spec), spec, &slots, dims, classes)
    }

    pub fn discrete(genotype: &Genotype, dims: usize, classes: usize) -> Result<Self> {
        genotype.validate()?;
        let slots: Vec<bool> = genotype
            .nodes
            .iter()
            .flat_map(|genes| genes.iter().map(|g| g.op.is_parameterized()))
            .collect();
        Self::build(Body::Discrete(genotype.clone()), &genotype.spec, &slots, dims, classes)
    }

    fn build(body: Body, spec: &CellSpec, slots: &[bool], dims: usize, classes: usize) -> Result<Self> {
        if spec.input_arity != 2 {
            return Err(NasError::Spec(format!(
                "the classifier feeds two projections into the cell, spec has {} inputs",
                spec.input_arity
            )));
        }
        if dims == 0 || classes < 2 {
            return Err(NasError::Data(format!("need dims >= 1 and classes >= 2, got {dims} and {classes}")));
        }
        let mut offset = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let projections = [block(dims + 1, spec.hidden), block(dims + 1, spec.hidden)];
        let op_blocks = slots
            .iter()
            .map(|&p| p.then(|| block(spec.hidden, spec.hidden)))
            .collect();
        let head = block(spec.output_dim() + 1, classes);
        Ok(Self {
            body,
            dims,
            classes,
            projections,
            op_blocks,
            head,
            total: offset,
        })
    }

    pub fn spec(&self) -> &CellSpec {
        match &self.body {
            Body::Mixed(s) => s,
            Body::Discrete(g) => &g.spec,
        }
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        match &self.body {
            Body::Mixed(_) => None,
            Body::Discrete(g) => Some(g),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.total
    }

    /// Architecture logit count; zero for a discrete network.
    pub fn num_alpha(&self) -> usize {
        match &self.body {
            Body::Mixed(s) => s.edge_count() * NUM_OPS,
            Body::Discrete(_) => 0,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Uniform `±1/√fan_in` initialisation of every block.
    pub fn init_weights(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut w = vec![0.0; self.total];
        let blocks = self
            .projections
            .iter()
            .chain(self.op_blocks.iter().flatten())
            .chain(std::iter::once(&self.head));
        for b in blocks {
            fill_uniform(&mut w[b.offset..b.offset + b.len()], b.rows, rng);
        }
        w
    }

    fn check_params(&self, w: &[f64], alpha: &[f64]) -> Result<()> {
        if w.len() != self.total || alpha.len() != self.num_alpha() {
            return Err(NasError::Spec(format!(
                "network takes {} weights and {} logits, got {} and {}",
                self.total,
                self.num_alpha(),
                w.len(),
                alpha.len()
            )));
        }
        Ok(())
    }

    /// Logits for the feature matrix `x` of shape `(batch, dims)`, recorded
    /// on `tape`. Weight blocks become parameters when `grad_w`, logits
    /// when `grad_alpha`.
    fn logits(
        &self,
        tape: &Tape,
        w: &[f64],
        alpha: &[f64],
        x: &Tensor,
        grad_w: bool,
        grad_alpha: bool,
    ) -> Result<(Value, Vec<Value>, Vec<Value>)> {
        let leaf = |t: Tensor, grad: bool| if grad { tape.param(t) } else { tape.constant(t) };
        let mut w_leaves = Vec::new();
        let mut block_value = |b: &Block| -> Value {
            let t = Tensor::matrix(b.rows, b.cols, w[b.offset..b.offset + b.len()].to_vec()).expect("block shape");
            let v = leaf(t, grad_w);
            w_leaves.push(v.clone());
            v
        };
        let batch = x.shape()[0];
        let mut aug = Vec::with_capacity(batch * (self.dims + 1));
        for row in x.data().chunks(self.dims) {
            aug.extend_from_slice(row);
            aug.push(1.0);
        }
        let x_aug = tape.constant(Tensor::matrix(batch, self.dims + 1, aug)?);
        let s0 = x_aug.matmul(&block_value(&self.projections[0]))?;
        let s1 = x_aug.matmul(&block_value(&self.projections[1]))?;
        let op_values: Vec<Option<Value>> = self.op_blocks.iter().map(|b| b.as_ref().map(&mut block_value)).collect();
        let mut alpha_leaves = Vec::new();
        let cell_out = match &self.body {
            Body::Mixed(spec) => {
                alpha_leaves = alpha
                    .chunks(NUM_OPS)
                    .map(|c| leaf(Tensor::vector(c.to_vec()).expect("non-empty"), grad_alpha))
                    .collect();
                let edges = op_values
                    .chunks(NUM_OPS)
                    .map(|c| std::array::from_fn(|i| c[i].clone()))
                    .collect();
                cell_forward(spec, &alpha_leaves, &MixedWeights::new(edges), &[s0, s1])?.output
            }
            Body::Discrete(genotype) => {
                let mut it = op_values.into_iter();
                let nodes = genotype
                    .nodes
                    .iter()
                    .map(|genes| genes.iter().map(|_| it.next().expect("slot per gene")).collect())
                    .collect();
                discrete_forward(genotype, &GenotypeWeights::new(nodes), &[s0, s1])?
            }
        };
        let ones = tape.constant(Tensor::filled(&[batch, 1], 1.0));
        let h_aug = Value::concat(&[&cell_out, &ones], 1)?;
        let logits = h_aug.matmul(&block_value(&self.head))?;
        Ok((logits, w_leaves, alpha_leaves))
    }

    /// Mean cross-entropy over `rows` plus the requested gradients.
    pub fn evaluate(
        &self,
        data: &Dataset,
        w: &[f64],
        alpha: &[f64],
        rows: &[usize],
        request: GradRequest,
    ) -> Result<Evaluation> {
        self.check_params(w, alpha)?;
        if rows.is_empty() {
            return Err(NasError::Data("empty batch".into()));
        }
        self.check_data(data)?;
        let (x, labels) = data.gather(rows);
        let tape = Tape::new();
        let (logits, w_leaves, alpha_leaves) = self.logits(&tape, w, alpha, &x, request.weights, request.alpha)?;
        let loss = logits.softmax_cross_entropy(&labels)?;
        let value = loss.item()?;
        if request.weights || request.alpha {
            tape.backward(&loss)?;
        }
        let flatten = |leaves: &[Value]| -> Vec<f64> {
            leaves
                .iter()
                .flat_map(|v| v.grad().expect("parameter after backward").into_data())
                .collect()
        };
        let grad_weights = request.weights.then(|| {
            // Blocks were recorded in layout order: projections, ops, head.
            flatten(&w_leaves)
        });
        let grad_alpha = request.alpha.then(|| flatten(&alpha_leaves));
        Ok(Evaluation {
            loss: value,
            grad_weights,
            grad_alpha,
        })
    }

    /// Classification accuracy and mean loss over `rows`, in chunks.
    pub fn metrics(&self, data: &Dataset, w: &[f64], alpha: &[f64], rows: &[usize]) -> Result<Metrics> {
        self.check_params(w, alpha)?;
        self.check_data(data)?;
        if rows.is_empty() {
            return Err(NasError::Data("no rows to score".into()));
        }
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for chunk in rows.chunks(512) {
            let (x, labels) = data.gather(chunk);
            let tape = Tape::new();
            let (logits, _, _) = self.logits(&tape, w, alpha, &x, false, false)?;
            loss_sum += logits.softmax_cross_entropy(&labels)?.item()? * chunk.len() as f64;
            for (row, &label) in logits.data().chunks(self.classes).zip(&labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                correct += usize::from(pred == label);
            }
        }
        Ok(Metrics {
            accuracy: correct as f64 / rows.len() as f64,
            loss: loss_sum / rows.len() as f64,
        })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dims() != self.dims || data.classes() != self.classes {
            return Err(NasError::Data(format!(
                "network expects {} dims and {} classes, dataset has {} and {}",
                self.dims,
                self.classes,
                data.dims(),
                data.classes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// Draws `batch_size` rows without replacement, or all of them (shuffled)
/// when the pool is smaller.
pub fn sample_rows(pool: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    pool.choose_multiple(rng, batch_size.min(pool.len())).copied().collect()
}

/// The continuous network as a bilevel problem over a dataset's train and
/// validation rows. Test rows are never sampled.
#[derive(Debug, Clone)]
pub struct SupernetProblem {
    network: Network,
    data: Arc<Dataset>,
    train: Vec<usize>,
    val: Vec<usize>,
    union: Vec<usize>,
}

impl SupernetProblem {
    pub fn new(spec: &CellSpec, data: Arc<Dataset>) -> Result<Self> {
        let network = Network::supernet(spec, data.dims(), data.classes())?;
        let train = data.rows(SplitTag::Train);
        let val = data.rows(SplitTag::Val);
        if train.is_empty() || val.is_empty() {
            return Err(NasError::Data(format!(
                "search needs train and validation rows, got {} and {}",
                train.len(),
                val.len()
            )));
        }
        let mut union = [train.clone(), val.clone()].concat();
        union.sort_unstable();
        Ok(Self {
            network,
            data,
            train,
            val,
            union,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }
}

impl BilevelProblem for SupernetProblem {
    type Batch = Vec<usize>;

    fn num_weights(&self) -> usize {
        self.network.num_weights()
    }

    fn num_alpha(&self) -> usize {
        self.network.num_alpha()
    }

    fn sample_batch(&self, split: Split, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let pool = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Union => &self.union,
        };
        sample_rows(pool, batch_size, rng)
    }

    fn evaluate(&self, w: &[f64], alpha: &[f64], batch: &Vec<usize>, request: GradRequest) -> Result<Evaluation> {
        self.network.evaluate(&self.data, w, alpha, batch, request)
    }

    fn initial_weights(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.network.init_weights(rng)
    }
}

/// Training budget for fitting a fixed genotype from scratch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; `0` disables.
    pub grad_clip: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
        }
    }
}

/// A genotype trained from scratch, with its validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedGenotype {
    pub network: Network,
    pub weights: Vec<f64>,
    pub train: Metrics,
    pub val: Metrics,
}

/// Trains `genotype` on the training rows with momentum SGD under a cosine
/// schedule and scores it on the validation rows. Never reads test rows.
pub fn train_genotype(genotype: &Genotype, data: &Dataset, budget: &TrainBudget, seed: u64) -> Result<TrainedGenotype> {
    let network = Network::discrete(genotype, data.dims(), data.classes())?;
    let train_rows = data.rows(SplitTag::Train);
    let val_rows = data.rows(SplitTag::Val);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(NasError::Data("retraining needs train and validation rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = network.init_weights(&mut rng);
    let mut opt = SgdMomentum::new(w.len(), budget.lr, budget.momentum, budget.weight_decay);
    let schedule = CosineSchedule::new(budget.lr, budget.steps);
    for t in 0..budget.steps {
        opt.lr = schedule.rate(t)?;
        let batch = sample_rows(&train_rows, budget.batch_size, &mut rng);
        let eval = network.evaluate(data, &w, &[], &batch, GradRequest::WEIGHTS)?;
        if !eval.loss.is_finite() {
            return Err(NasError::Numerical(format!("retraining loss became {} at step {t}", eval.loss)));
        }
        let mut g = eval.grad_weights.expect("weights requested");
        ensure_finite("retraining gradient", &g)?;
        if budget.grad_clip > 0.0 {
            clip_global_norm(&mut g, budget.grad_clip);
        }
        opt.step(&mut w, &g)?;
    }
    let train = network.metrics(data, &w, &[], &train_rows)?;
    let val = network.metrics(data, &w, &[], &val_rows)?;
    Ok(TrainedGenotype {
        network,
        weights: w,
        train,
        val,
    })
}

/// Test-split metrics of a trained network. The only place test rows are
/// read.
pub fn test_metrics(trained: &TrainedGenotype, data: &Dataset) -> Result<Metrics> {
    let rows = data.rows(SplitTag::Test);
    trained.network.metrics(data, &trained.weights, &[], &rows)
}
