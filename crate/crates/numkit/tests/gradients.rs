//! Autodiff against central finite differences.

use numkit::gradcheck::{central_difference, max_relative_error};
use numkit::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;
// Entries below this magnitude are judged on absolute error (FD round-off is ~1e-10).
const FLOOR: f64 = 1e-5;

/// Builds `sum(weights ⊙ op(inputs))` on a fresh tape and returns the
/// loss value plus leaf gradients.
fn eval(
    inputs: &[Tensor],
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
    seed: u64,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad(true)))
        .collect();
    let out = op(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    (tape.scalar(loss), g)
}

fn check(name: &str, inputs: Vec<Tensor>, op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (loss, analytic) = eval(&inputs, op, 99);
    // Central differences carry about |f|·1e-10 of cancellation noise; entries
    // below noise/TOL are judged on absolute error.
    let floor = FLOOR.max(1e-6 * loss.abs());
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let numeric = central_difference(
            |x| {
                let mut probe = inputs.clone();
                probe[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
                eval(&probe, op, 99).0
            },
            inputs[i].data(),
            EPS,
        );
        let e = max_relative_error(&analytic[i], &numeric, floor);
        worst = worst.max(e);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn every_primitive_matches_finite_differences() {
    check("matmul", vec![rand(&[3, 4], 1), rand(&[4, 2], 2)], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check("add", vec![rand(&[2, 3], 3), rand(&[2, 3], 4)], &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", vec![rand(&[2, 3], 3), rand(&[2, 3], 4)], &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", vec![rand(&[2, 3], 5), rand(&[2, 3], 6)], &|t, v| t.mul(v[0], v[1]).unwrap());
    check("add_row", vec![rand(&[3, 4], 7), rand(&[4], 8)], &|t, v| t.add_row(v[0], v[1]).unwrap());
    check("mul_row", vec![rand(&[3, 4], 7), rand(&[1, 4], 8)], &|t, v| t.mul_row(v[0], v[1]).unwrap());
    check("scale", vec![rand(&[5], 9)], &|t, v| t.scale(v[0], -1.7));
    check("softmax", vec![rand(&[3, 5], 10)], &|t, v| t.softmax(v[0]).unwrap());
    check("causal_softmax", vec![rand(&[4, 4], 11)], &|t, v| t.causal_softmax(v[0]).unwrap());
    check("layer_norm", vec![rand(&[3, 6], 12)], &|t, v| t.layer_norm(v[0]).unwrap());
    check("gelu", vec![rand(&[2, 7], 13)], &|t, v| t.gelu(v[0]).unwrap());
    check("gather_rows", vec![rand(&[5, 3], 14)], &|t, v| t.gather_rows(v[0], &[4, 1, 1, 0]).unwrap());
    check("concat_rows", vec![rand(&[2, 3], 15), rand(&[1, 3], 16)], &|t, v| {
        t.concat_rows(&[v[0], v[1], v[0]]).unwrap()
    });
    check("concat_cols", vec![rand(&[2, 3], 15), rand(&[2, 1], 16)], &|t, v| {
        t.concat_cols(&[v[1], v[0]]).unwrap()
    });
    check("slice_rows", vec![rand(&[5, 3], 17)], &|t, v| t.slice_rows(v[0], 1, 3).unwrap());
    check("slice_cols", vec![rand(&[3, 5], 18)], &|t, v| t.slice_cols(v[0], 2, 2).unwrap());
    check("transpose", vec![rand(&[3, 5], 19)], &|t, v| t.transpose(v[0]).unwrap());
    check("mean", vec![rand(&[3, 5], 20)], &|t, v| t.mean(v[0]).unwrap());
    check("sum", vec![rand(&[3, 5], 20)], &|t, v| t.sum(v[0]).unwrap());
    check("mean_rows", vec![rand(&[3, 5], 21)], &|t, v| t.mean_rows(v[0]).unwrap());
    check("scatter_add_rows", vec![rand(&[4, 3], 22), rand(&[2, 3], 23)], &|t, v| {
        t.scatter_add_rows(v[0], &[3, 1], v[1]).unwrap()
    });
    check("cross_entropy", vec![rand(&[3, 4], 24)], &|t, v| {
        t.cross_entropy(v[0], &[1, 0, 3], &[true, false, true]).unwrap()
    });
}

#[test]
fn two_layer_mlp_parameters() {
    // x W1 + b1 -> gelu -> W2 + b2 -> cross-entropy
    let inputs = vec![rand(&[4, 3], 30), rand(&[3, 6], 31), rand(&[6], 32), rand(&[6, 5], 33), rand(&[5], 34)];
    let err = check("mlp", inputs, &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let h = t.gelu(h).unwrap();
        let o = t.matmul(h, v[3]).unwrap();
        let o = t.add_row(o, v[4]).unwrap();
        t.cross_entropy(o, &[0, 4, 2, 1], &[true; 4]).unwrap()
    });
    println!("mlp max relative error {err:e}");
}

#[test]
fn attention_block_composition() {
    let inputs = vec![rand(&[4, 4], 40), rand(&[4, 4], 41), rand(&[4, 4], 42)];
    check("attention", inputs, &|t, v| {
        let x = t.layer_norm(v[0]).unwrap();
        let q = t.matmul(x, v[1]).unwrap();
        let k = t.matmul(x, v[2]).unwrap();
        let kt = t.transpose(k).unwrap();
        let s = t.matmul(q, kt).unwrap();
        let s = t.scale(s, 0.5);
        let a = t.causal_softmax(s).unwrap();
        let y = t.matmul(a, x).unwrap();
        t.add(y, v[0]).unwrap()
    });
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    LayerNorm,
    Softmax,
    Transpose,
    Scale,
    SquareViaMul,
}

fn apply(t: &mut Tape, op: Unary, x: Var) -> Var {
    match op {
        Unary::Gelu => t.gelu(x).unwrap(),
        Unary::LayerNorm => t.layer_norm(x).unwrap(),
        Unary::Softmax => t.softmax(x).unwrap(),
        Unary::Transpose => t.transpose(x).unwrap(),
        Unary::Scale => t.scale(x, 0.7),
        Unary::SquareViaMul => t.mul(x, x).unwrap(),
    }
}

fn unary() -> impl Strategy<Value = Unary> {
    prop_oneof![
        Just(Unary::Gelu),
        Just(Unary::LayerNorm),
        Just(Unary::Softmax),
        Just(Unary::Transpose),
        Just(Unary::Scale),
        Just(Unary::SquareViaMul),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // The product is [rows, rows]. Two-column layer norm maps every row to
    // ±1, after which the loss is flat and FD sees only rounding noise.
    #[test]
    fn random_compositions(rows in 3usize..6, cols in 2usize..6, ops in prop::collection::vec(unary(), 1..5), seed in 0u64..1000) {
        let x = rand(&[rows, cols], seed);
        let w = rand(&[cols, rows], seed + 1);
        let ops2 = ops.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let mut h = t.matmul(v[0], v[1]).unwrap();
            for &op in &ops2 {
                h = apply(t, op, h);
            }
            h
        };
        check("composition", vec![x, w], &f);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000, scale in 0.1f64..30.0) {
        let mut tape = Tape::new();
        let mut x = rand(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn identical_inputs_give_bitwise_identical_outputs() {
    let run = || {
        let inputs = vec![rand(&[4, 3], 30), rand(&[3, 6], 31)];
        let (loss, grads) = eval(&inputs, &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            t.layer_norm(h).unwrap()
        }, 5);
        (loss.to_bits(), grads.concat().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}


