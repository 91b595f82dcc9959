//! Define-by-run recording tape and the [`Value`] handle.
//!
//! A fresh [`Tape`] is built for each forward pass. Leaves enter the tape
//! through [`Tape::param`] (gradient requested) or [`Tape::constant`];
//! every primitive applied to a recorded value is appended in evaluation
//! order, so the record list is topologically sorted by construction.
//! [`Tape::backward`] walks it once in reverse.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;
use crate::primitive::{self, Primitive};
use crate::tensor::Tensor;

struct Record {
    /// `None` for leaves.
    primitive: Option<Primitive>,
    inputs: Vec<usize>,
    value: Rc<Tensor>,
    saved: Option<Tensor>,
    is_param: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
struct TapeInner {
    records: Vec<Record>,
}

/// Shared handle to one recording. Cloning yields another handle to the
/// same tape. Tapes are confined to the thread that created them.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("records", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of records (leaves plus primitive applications).
    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded primitive applications, leaves excluded.
    pub fn primitive_count(&self) -> usize {
        self.inner.borrow().records.iter().filter(|r| r.primitive.is_some()).count()
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push_leaf(&self, tensor: Tensor, is_param: bool) -> Value {
        let data = Rc::new(tensor);
        let mut inner = self.inner.borrow_mut();
        let id = inner.records.len();
        inner.records.push(Record {
            primitive: None,
            inputs: Vec::new(),
            value: Rc::clone(&data),
            saved: None,
            is_param,
            needs_grad: is_param,
            grad: None,
        });
        Value {
            data,
            node: Some(Node { tape: self.clone(), id }),
        }
    }

    /// Records a leaf whose gradient is filled in by [`Tape::backward`].
    pub fn param(&self, tensor: Tensor) -> Value {
        self.push_leaf(tensor, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Value {
        self.push_leaf(tensor, false)
    }

    /// Reverse sweep from the scalar `loss`. Afterwards every parameter leaf
    /// on this tape holds `∂loss/∂param` (zero if it does not influence the
    /// loss); previous gradients are overwritten, not accumulated.
    pub fn backward(&self, loss: &Value) -> Result<(), TensorError> {
        let node = loss.node.as_ref().ok_or(TensorError::NotOnTape)?;
        if !node.tape.same(self) {
            return Err(TensorError::TapeMismatch);
        }
        if loss.data.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.data.shape().to_vec(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let records = &mut inner.records;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; node.id + 1];
        grads[node.id] = Some(vec![1.0]);
        for id in (0..=node.id).rev() {
            let Some(upstream) = grads[id].take() else { continue };
            let record = &records[id];
            let Some(prim) = &record.primitive else {
                grads[id] = Some(upstream);
                continue;
            };
            if !record.needs_grad {
                continue;
            }
            let inputs: Vec<&Tensor> = record.inputs.iter().map(|&i| records[i].value.as_ref()).collect();
            let input_grads = primitive::backward(prim, &inputs, &record.value, record.saved.as_ref(), &upstream);
            for (&input, g) in record.inputs.iter().zip(input_grads) {
                if !records[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g.into_data()),
                }
            }
        }
        for (id, record) in records.iter_mut().enumerate() {
            if record.is_param {
                let shape = record.value.shape().to_vec();
                record.grad = Some(match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Node {
    tape: Tape,
    id: usize,
}

/// A tensor, optionally recorded on a [`Tape`].
///
/// Values without a tape (from [`Value::constant`] or [`Value::detach`]) are
/// evaluated eagerly and never take part in differentiation.
#[derive(Clone)]
pub struct Value {
    data: Rc<Tensor>,
    node: Option<Node>,
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.data.shape())
            .field("recorded", &self.node.is_some())
            .finish()
    }
}

impl Value {
    /// A value outside any tape.
    pub fn constant(tensor: Tensor) -> Self {
        Self {
            data: Rc::new(tensor),
            node: None,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.data).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        self.data.item()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_param(&self) -> bool {
        self.node
            .as_ref()
            .is_some_and(|n| n.tape.inner.borrow().records[n.id].is_param)
    }

    /// Gradient slot: set on parameter leaves after a backward sweep.
    pub fn grad(&self) -> Option<Tensor> {
        let node = self.node.as_ref()?;
        node.tape.inner.borrow().records[node.id].grad.clone()
    }

    /// Same data, no tape participation.
    pub fn detach(&self) -> Value {
        Value {
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// See [`Tape::backward`].
    pub fn backward(&self) -> Result<(), TensorError> {
        let node = self.node.as_ref().ok_or(TensorError::NotOnTape)?;
        node.tape.backward(self)
    }

    /// Applies `prim` to `inputs`. If any input is recorded, the output is
    /// recorded on that same tape.
    pub fn apply(prim: Primitive, inputs: &[&Value]) -> Result<Value, TensorError> {
        let mut tape: Option<&Tape> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    Some(t) if !t.same(&n.tape) => return Err(TensorError::TapeMismatch),
                    _ => tape = Some(&n.tape),
                }
            }
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| v.data.as_ref()).collect();
        let fwd = primitive::forward(&prim, &tensors)?;
        let data = Rc::new(fwd.output);
        let Some(tape) = tape else {
            return Ok(Value { data, node: None });
        };
        let mut inner = tape.inner.borrow_mut();
        let ids: Vec<usize> = inputs
            .iter()
            .map(|v| match &v.node {
                Some(n) => n.id,
                None => usize::MAX,
            })
            .collect();
        // Untaped inputs become constant leaves so the record stays self-contained.
        let mut input_ids = Vec::with_capacity(ids.len());
        for (v, id) in inputs.iter().zip(ids) {
            if id == usize::MAX {
                let leaf = inner.records.len();
                inner.records.push(Record {
                    primitive: None,
                    inputs: Vec::new(),
                    value: Rc::clone(&v.data),
                    saved: None,
                    is_param: false,
                    needs_grad: false,
                    grad: None,
                });
                input_ids.push(leaf);
            } else {
                input_ids.push(id);
            }
        }
        let needs_grad = input_ids.iter().any(|&i| inner.records[i].needs_grad);
        let id = inner.records.len();
        inner.records.push(Record {
            primitive: Some(prim),
            inputs: input_ids,
            value: Rc::clone(&data),
            saved: fwd.saved,
            is_param: false,
            needs_grad,
            grad: None,
        });
        Ok(Value {
            data,
            node: Some(Node { tape: tape.clone(), id }),
        })
    }

    pub fn add(&self, other: &Value) -> Result<Value, TensorError> {
        Self::apply(Primitive::Add, &[self, other])
    }

    pub fn sub(&self, other: &Value) -> Result<Value, TensorError> {
        Self::apply(Primitive::Sub, &[self, other])
    }

    pub fn scale(&self, c: f64) -> Result<Value, TensorError> {
        Self::apply(Primitive::Scale(c), &[self])
    }

    pub fn mul(&self, other: &Value) -> Result<Value, TensorError> {
        Self::apply(Primitive::Mul, &[self, other])
    }

    pub fn matmul(&self, other: &Value) -> Result<Value, TensorError> {
        Self::apply(Primitive::MatMul, &[self, other])
    }

    pub fn tanh(&self) -> Result<Value, TensorError> {
        Self::apply(Primitive::Tanh, &[self])
    }

    pub fn relu(&self) -> Result<Value, TensorError> {
        Self::apply(Primitive::Relu, &[self])
    }

    pub fn sigmoid(&self) -> Result<Value, TensorError> {
        Self::apply(Primitive::Sigmoid, &[self])
    }

    pub fn softmax(&self, axis: usize) -> Result<Value, TensorError> {
        Self::apply(Primitive::Softmax { axis }, &[self])
    }

    pub fn concat(values: &[&Value], axis: usize) -> Result<Value, TensorError> {
        Self::apply(Primitive::Concat { axis }, values)
    }

    pub fn mean(&self, axis: usize) -> Result<Value, TensorError> {
        Self::apply(Primitive::Mean { axis }, &[self])
    }

    pub fn sum(&self) -> Result<Value, TensorError> {
        Self::apply(Primitive::Sum, &[self])
    }

    pub fn mse(&self, target: &Value) -> Result<Value, TensorError> {
        Self::apply(Primitive::Mse, &[self, target])
    }

    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Value, TensorError> {
        Self::apply(
            Primitive::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[self],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value, TensorError> {
        Self::apply(Primitive::Reshape { shape: shape.to_vec() }, &[self])
    }

    pub fn index(&self, i: usize) -> Result<Value, TensorError> {
        Self::apply(Primitive::Index(i), &[self])
    }
}
