use cellnas_tensor::check::{central_gradient, relative_l2_error};
use cellnas_tensor::{Primitive, Tape, Tensor, Value};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 24;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..5)).collect()
}

fn any_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..4);
    random_shape(rng, rank)
}

/// Scalar probe `Σ prim(inputs) ∘ weights` as a function of the flattened inputs.
fn probe(prim: &Primitive, shapes: &[Vec<usize>], weights: &Tensor, flat: &[f64], tape: Option<&Tape>) -> (f64, Vec<Value>) {
    let mut offset = 0;
    let inputs: Vec<Value> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[offset..offset + n].to_vec()).unwrap();
            offset += n;
            match tape {
                Some(tape) => tape.param(t),
                None => Value::constant(t),
            }
        })
        .collect();
    let refs: Vec<&Value> = inputs.iter().collect();
    let out = Value::apply(prim.clone(), &refs).unwrap();
    let w = Value::constant(weights.clone());
    let loss = out.mul(&w).unwrap().sum().unwrap();
    if let Some(tape) = tape {
        tape.backward(&loss).unwrap();
    }
    (loss.item().unwrap(), inputs)
}

fn check(prim: Primitive, shapes: Vec<Vec<usize>>, rng: &mut ChaCha8Rng) -> f64 {
    let flat: Vec<f64> = shapes
        .iter()
        .flat_map(|s| random_tensor(rng, s).into_data())
        .collect();
    let probe_inputs: Vec<Value> = {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                Value::constant(t)
            })
            .collect()
    };
    let refs: Vec<&Value> = probe_inputs.iter().collect();
    let out_shape = Value::apply(prim.clone(), &refs).unwrap().shape().to_vec();
    let weights = random_tensor(rng, &out_shape);

    let tape = Tape::new();
    let (_, params) = probe(&prim, &shapes, &weights, &flat, Some(&tape));
    let analytic: Vec<f64> = params.iter().flat_map(|p| p.grad().unwrap().into_data()).collect();
    let numeric = central_gradient(|x| probe(&prim, &shapes, &weights, x, None).0, &flat, STEP);
    relative_l2_error(&analytic, &numeric, 1e-8)
}

fn run_kind(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Primitive, Vec<Vec<usize>>)) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let (prim, shapes) = make(&mut rng);
        let err = check(prim, shapes, &mut rng);
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn gradcheck_add_sub_mul() {
    for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
        let name = prim.name();
        run_kind(name, |rng| {
            let shape = any_shape(rng);
            let shapes = match rng.random_range(0..3) {
                0 => vec![shape.clone(), shape],
                1 => vec![vec![], shape],
                _ => vec![shape, vec![]],
            };
            (prim.clone(), shapes)
        });
    }
}

#[test]
fn gradcheck_scale() {
    run_kind("scale", |rng| {
        let c = rng.random_range(-3.0..3.0);
        (Primitive::Scale(c), vec![random_shape(rng, 2)])
    });
}

#[test]
fn gradcheck_matmul() {
    run_kind("matmul", |rng| {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        (Primitive::MatMul, vec![vec![m, k], vec![k, n]])
    });
}

#[test]
fn gradcheck_activations() {
    for prim in [Primitive::Tanh, Primitive::Relu, Primitive::Sigmoid] {
        let name = prim.name();
        run_kind(name, |rng| {
            let rank = rng.random_range(1..4);
            (prim.clone(), vec![random_shape(rng, rank)])
        });
    }
}

#[test]
fn gradcheck_softmax() {
    run_kind("softmax", |rng| {
        let shape = any_shape(rng);
        let axis = rng.random_range(0..shape.len());
        (Primitive::Softmax { axis }, vec![shape])
    });
}

#[test]
fn gradcheck_concat() {
    run_kind("concat", |rng| {
        let base = any_shape(rng);
        let axis = rng.random_range(0..base.len());
        let parts = rng.random_range(1..4);
        let shapes = (0..parts)
            .map(|_| {
                let mut s = base.clone();
                s[axis] = rng.random_range(1..4);
                s
            })
            .collect();
        (Primitive::Concat { axis }, shapes)
    });
}

#[test]
fn gradcheck_mean_and_sum() {
    run_kind("mean", |rng| {
        let shape = any_shape(rng);
        let axis = rng.random_range(0..shape.len());
        (Primitive::Mean { axis }, vec![shape])
    });
    run_kind("sum", |rng| (Primitive::Sum, vec![any_shape(rng)]));
}

#[test]
fn gradcheck_losses() {
    run_kind("mse", |rng| {
        let shape = random_shape(rng, 2);
        (Primitive::Mse, vec![shape.clone(), shape])
    });
    run_kind("softmax-cross-entropy", |rng| {
        let batch = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        (Primitive::SoftmaxCrossEntropy { labels }, vec![vec![batch, classes]])
    });
}

#[test]
fn gradcheck_reshape_and_index() {
    run_kind("reshape", |rng| {
        let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
        (Primitive::Reshape { shape: vec![b, a] }, vec![vec![a * b]])
    });
    run_kind("index", |rng| {
        let shape = random_shape(rng, 2);
        let n: usize = shape.iter().product();
        (Primitive::Index(rng.random_range(0..n)), vec![shape])
    });
}

struct TwoLayer {
    x: Tensor,
    labels: Vec<usize>,
    shapes: [(usize, usize); 2],
}

impl TwoLayer {
    fn loss(&self, flat: &[f64], tape: Option<&Tape>) -> (f64, Vec<Value>) {
        let (a, b) = (self.shapes[0], self.shapes[1]);
        let w1 = Tensor::matrix(a.0, a.1, flat[..a.0 * a.1].to_vec()).unwrap();
        let w2 = Tensor::matrix(b.0, b.1, flat[a.0 * a.1..].to_vec()).unwrap();
        let (w1, w2) = match tape {
            Some(t) => (t.param(w1), t.param(w2)),
            None => (Value::constant(w1), Value::constant(w2)),
        };
        let x = Value::constant(self.x.clone());
        let loss = x
            .matmul(&w1)
            .and_then(|h| h.tanh())
            .and_then(|h| h.matmul(&w2))
            .and_then(|z| z.softmax_cross_entropy(&self.labels))
            .unwrap();
        if tape.is_some() {
            loss.backward().unwrap();
        }
        (loss.item().unwrap(), vec![w1, w2])
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, d, h, c) = (6, 4, 5, 3);
        let net = TwoLayer {
            x: random_tensor(&mut rng, &[batch, d]),
            labels: (0..batch).map(|_| rng.random_range(0..c)).collect(),
            shapes: [(d, h), (h, c)],
        };
        let flat: Vec<f64> = (0..d * h + h * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let (_, params) = net.loss(&flat, Some(&tape));
        let analytic: Vec<f64> = params.iter().flat_map(|p| p.grad().unwrap().into_data()).collect();
        let numeric = central_gradient(|w| net.loss(w, None).0, &flat, 1e-5);
        let err = relative_l2_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = TwoLayer {
        x: random_tensor(&mut rng, &[5, 3]),
        labels: vec![0, 1, 2, 1, 0],
        shapes: [(3, 4), (4, 3)],
    };
    let flat: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = || {
        let tape = Tape::new();
        let (loss, params) = net.loss(&flat, Some(&tape));
        let grads: Vec<u64> = params
            .iter()
            .flat_map(|p| p.grad().unwrap().into_data())
            .map(f64::to_bits)
            .collect();
        (loss.to_bits(), grads)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, xs in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let t = Tensor::vector(xs.clone()).unwrap();
        let grad_of = |ca: f64, cb: f64| {
            let tape = Tape::new();
            let x = tape.param(t.clone());
            let f = x.tanh().unwrap().sum().unwrap();
            let g = x.mul(&x).unwrap().sum().unwrap();
            let loss = f.scale(ca).unwrap().add(&g.scale(cb).unwrap()).unwrap();
            loss.backward().unwrap();
            x.grad().unwrap().into_data()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..xs.len() {
            let expected = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn grad_shape_mirrors_param(rows in 1usize..5, cols in 1usize..5) {
        let tape = Tape::new();
        let w = tape.param(Tensor::filled(&[rows, cols], 0.5));
        w.sigmoid().unwrap().sum().unwrap().backward().unwrap();
        let g = w.grad().unwrap();
        prop_assert_eq!(g.shape(), &[rows, cols][..]);
    }
}
