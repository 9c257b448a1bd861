use proptest::prelude::*;
use rmroute_autograd::gradcheck::{worst, GradCheck};
use rmroute_autograd::rng::{self, StreamRng};
use rmroute_autograd::{Graph, Segment, Tensor, TensorError, Var};

const TOL: f64 = 1e-2;

fn randn(rng: &mut StreamRng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(rng) * scale).collect()).unwrap()
}

/// Random linear functional of `out`, so every output entry matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = rng::stream(seed, "projection");
    let w = g.constant(randn(&mut rng, &shape, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check(
    case: u64,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let report = GradCheck::default()
        .run(&inputs, |g, v| {
            let out = f(g, v)?;
            project(g, out, case)
        })
        .unwrap();
    worst(&report)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in 0..8u64 {
        let mut rng = rng::stream(case, "primitives");
        let m = 2 + (case as usize % 3);
        let k = 3 + (case as usize % 2);
        let n = 2 + (case as usize % 4);
        let a = randn(&mut rng, &[m, k], 1.0);
        let b = randn(&mut rng, &[k, n], 1.0);
        let w = randn(&mut rng, &[n, k], 1.0);
        let bias = randn(&mut rng, &[n], 1.0);
        let same = randn(&mut rng, &[m, k], 1.0);
        let positive =
            Tensor::new(vec![m, k], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        let gain = randn(&mut rng, &[k], 1.0);
        let lbias = randn(&mut rng, &[k], 1.0);
        let table = randn(&mut rng, &[6, k], 1.0);

        let results: Vec<(&str, f64)> = vec![
            ("matmul", check(case, vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]))),
            ("matmul_t", check(case, vec![a.clone(), w.clone()], |g, v| g.matmul_t(v[0], v[1]))),
            (
                "linear",
                check(case, vec![a.clone(), w.clone(), bias.clone()], |g, v| {
                    g.linear(v[0], v[1], Some(v[2]))
                }),
            ),
            ("add", check(case, vec![a.clone(), same.clone()], |g, v| g.add(v[0], v[1]))),
            ("sub", check(case, vec![a.clone(), same.clone()], |g, v| g.sub(v[0], v[1]))),
            ("mul", check(case, vec![a.clone(), same.clone()], |g, v| g.mul(v[0], v[1]))),
            ("scale", check(case, vec![a.clone()], |g, v| Ok(g.scale(v[0], -1.7)))),
            ("gelu", check(case, vec![a.clone()], |g, v| Ok(g.gelu(v[0])))),
            ("sigmoid", check(case, vec![a.clone()], |g, v| Ok(g.sigmoid(v[0])))),
            ("softplus", check(case, vec![a.clone()], |g, v| Ok(g.softplus(v[0])))),
            ("log", check(case, vec![positive.clone()], |g, v| Ok(g.log(v[0])))),
            ("softmax", check(case, vec![a.clone()], |g, v| Ok(g.softmax_rows(v[0])))),
            (
                "sparse_softmax",
                check(case, vec![a.clone()], |g, v| {
                    let keep: Vec<Vec<usize>> = (0..m).map(|r| vec![r % k, (r + 1) % k]).collect();
                    g.sparse_softmax_rows(v[0], &keep)
                }),
            ),
            (
                "layer_norm",
                check(case, vec![a.clone(), gain.clone(), lbias.clone()], |g, v| {
                    g.layer_norm(v[0], v[1], v[2])
                }),
            ),
            (
                "embedding",
                check(case, vec![table.clone()], |g, v| g.embedding(v[0], &[0, 3, 3, 5])),
            ),
            ("gather_rows", check(case, vec![a.clone()], |g, v| g.gather_rows(v[0], &[1, 0, 1]))),
            (
                "scatter_rows",
                check(case, vec![a.clone()], |g, v| {
                    let rows: Vec<usize> = (0..m).map(|r| (r * 2) % (m + 1)).collect();
                    g.scatter_rows(v[0], &rows, m + 1)
                }),
            ),
            ("pick", check(case, vec![a.clone()], |g, v| g.pick(v[0], &[(0, 1), (m - 1, 0), (0, 1)]))),
            (
                "scale_rows",
                check(case, vec![a.clone(), randn(&mut rng, &[m, 1], 1.0)], |g, v| {
                    g.scale_rows(v[0], v[1])
                }),
            ),
            ("sum_rows", check(case, vec![a.clone()], |g, v| Ok(g.sum_rows(v[0])))),
            ("mean", check(case, vec![a.clone()], |g, v| Ok(g.mean(v[0])))),
            (
                "cross_entropy",
                check(case, vec![a.clone()], |g, v| {
                    let targets: Vec<usize> = (0..m).map(|r| (r * 7 + case as usize) % k).collect();
                    g.cross_entropy(v[0], &targets)
                }),
            ),
            ("cv_squared", check(case, vec![positive.clone()], |g, v| g.cv_squared(v[0]))),
            (
                "mask_mul",
                check(case, vec![a.clone()], |g, v| {
                    let mask = (0..m * k).map(|i| (i % 3) as f32 * 0.5).collect();
                    g.mask_mul(v[0], mask)
                }),
            ),
        ];
        for (name, err) in results {
            if err > TOL {
                failures.push(format!("case {case} {name}: {err:.3e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn attention_matches_finite_differences() {
    for case in 0..6u64 {
        let mut rng = rng::stream(case, "attention");
        let heads = 1 + (case as usize % 2);
        let d = 4 * heads;
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        let mask = [true, true, false, true, true, true, case % 2 == 0];
        let inputs: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[7, d], 0.8)).collect();
        let err = check(case, inputs, |g, v| g.attention(v[0], v[1], v[2], &segs, heads, &mask));
        assert!(err <= TOL, "case {case}: {err:.3e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f32..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = g.softmax_rows(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_transpose_agrees(data in prop::collection::vec(-3.0f32..3.0, 12)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![3, 4], data.clone()).unwrap());
        let mut bt = vec![0.0; 12];
        for i in 0..3 { for j in 0..4 { bt[j * 3 + i] = data[i * 4 + j]; } }
        let b = g.constant(Tensor::new(vec![4, 3], bt).unwrap());
        let x = g.matmul_t(a, a).unwrap();
        let y = g.matmul(a, b).unwrap();
        for (p, q) in g.value(x).data().iter().zip(g.value(y).data()) {
            prop_assert!((p - q).abs() <= 1e-4);
        }
    }
}
