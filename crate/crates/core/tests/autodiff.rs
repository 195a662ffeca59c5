//! Reverse-mode gradients against central finite differences, plus the
//! hand-computed forward values for the basic ops.

use wrdprobe::numerics::{grad_check, grad_check_many, AttnMask, Graph, Rng, SeqLayout, Tensor, Var};
use wrdprobe::{Result, WrdError};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Projects any tensor to a scalar through fixed random weights so every
/// output entry carries a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = Rng::new(seed ^ 0xabc);
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check_all<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var], u64) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = Rng::new(1000 + seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let err = grad_check_many(|g, v| f(g, v, seed), &inputs, H).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.value(az).data(), &[0.0; 4]);
    let row = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let col = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let p = g.matmul(row, col).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
    let bad = g.matmul(col, col);
    match bad {
        Err(WrdError::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 1]);
            assert_eq!(right, vec![2, 1]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let p = g.softmax(x).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let p = g.masked_softmax(x, Some(&[true, true, false])).unwrap();
    // e^1/(e^1+e^2) = 1/(1+e)
    let expected0 = 1.0 / (1.0 + std::f64::consts::E);
    let v = g.value(p).data();
    assert!((v[0] - expected0).abs() < 1e-15);
    assert!((v[0] - 0.26894).abs() < 1e-5);
    assert!((v[1] - 0.73106).abs() < 1e-5);
    assert_eq!(v[2], 0.0);

    let x = g.constant(Tensor::vector(vec![5.0]));
    let p = g.softmax(x).unwrap();
    assert_eq!(g.value(p).data(), &[1.0]);

    let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.masked_softmax(x, Some(&[false, false])),
        Err(WrdError::InvalidMask { row: 0 })
    ));
}

#[test]
fn softmax_rows_are_distributions() {
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let rows = 1 + rng.below(6);
        let cols = 1 + rng.below(9);
        let mut x = random(&[rows, cols], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        let mask: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || rng.uniform() < 0.6).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = g.masked_softmax(xv, Some(&mask)).unwrap();
        for (r, row) in g.value(p).data().chunks(cols).enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                assert!((0.0..=1.0).contains(&v));
                if !mask[r * cols + c] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 3]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let t = g.tanh(x);
    g.backward(t).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(WrdError::Rank(_))));
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0]));
    let a = g.scale(x, 3.0);
    let b = g.add(a, x).unwrap();
    let s = g.sum(b);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn every_reachable_param_gets_grad() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0]));
    let b = g.param(Tensor::vector(vec![2.0]));
    let unused = g.param(Tensor::vector(vec![3.0]));
    let c = g.constant(Tensor::vector(vec![4.0]));
    let ab = g.mul(a, b).unwrap();
    let abc = g.add(ab, c).unwrap();
    let s = g.sum(abc);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_some() && g.grad(b).is_some());
    assert!(g.grad(c).is_none());
    assert!(g.grad(unused).is_none());
}

#[test]
fn grad_check_examples() {
    let mut rng = Rng::new(5);
    let x = random(&[4, 3], &mut rng);
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let w = random(&[3, 5], &mut rng);
    let err = grad_check(
        |g, x| {
            let wv = g.constant(w.clone());
            let m = g.matmul(x, wv)?;
            Ok(g.sum(m))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, H).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_reports_non_finite() {
    let x = Tensor::vector(vec![1.0, 0.0]);
    let err = grad_check(
        |g, x| {
            let l = g.log_floor(x, 0.0);
            Ok(g.sum(l))
        },
        &x,
        H,
    );
    assert!(matches!(err, Err(WrdError::Numeric(_))));
}

#[test]
fn grad_matmul() {
    check_all("matmul", &[&[3, 4], &[4, 2]], |g, v, s| {
        let m = g.matmul(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("matmul_nt", &[&[3, 4], &[5, 4]], |g, v, s| {
        let m = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("matmul_self", &[&[3, 3]], |g, v, s| {
        let m = g.matmul(v[0], v[0])?;
        weighted_sum(g, m, s)
    });
}

#[test]
fn grad_batch_matmul() {
    check_all("bmm", &[&[2, 3, 4], &[2, 4, 2]], |g, v, s| {
        let m = g.batch_matmul(v[0], v[1], false)?;
        weighted_sum(g, m, s)
    });
    check_all("bmm_t", &[&[2, 1, 4], &[2, 3, 4]], |g, v, s| {
        let m = g.batch_matmul(v[0], v[1], true)?;
        weighted_sum(g, m, s)
    });
}

#[test]
fn grad_elementwise() {
    check_all("add", &[&[3, 2], &[3, 2]], |g, v, s| {
        let m = g.add(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("sub", &[&[3, 2], &[3, 2]], |g, v, s| {
        let m = g.sub(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("mul", &[&[3, 2], &[3, 2]], |g, v, s| {
        let m = g.mul(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("add_bias", &[&[3, 4], &[4]], |g, v, s| {
        let m = g.add_bias(v[0], v[1])?;
        weighted_sum(g, m, s)
    });
    check_all("scale", &[&[5]], |g, v, s| {
        let m = g.scale(v[0], -1.7);
        weighted_sum(g, m, s)
    });
    check_all("tanh", &[&[6]], |g, v, s| {
        let m = g.tanh(v[0]);
        weighted_sum(g, m, s)
    });
    check_all("sigmoid", &[&[6]], |g, v, s| {
        let m = g.sigmoid(v[0]);
        weighted_sum(g, m, s)
    });
    check_all("relu", &[&[6]], |g, v, s| {
        let m = g.relu(v[0]);
        weighted_sum(g, m, s)
    });
}

#[test]
fn grad_reductions() {
    check_all("softmax", &[&[3, 5]], |g, v, s| {
        let m = g.softmax(v[0])?;
        weighted_sum(g, m, s)
    });
    let mask: Vec<bool> = (0..15).map(|i| i % 5 != 3 && i != 7).collect();
    check_all("masked_softmax", &[&[3, 5]], |g, v, s| {
        let m = g.masked_softmax(v[0], Some(&mask))?;
        weighted_sum(g, m, s)
    });
    check_all("log_floor", &[&[5]], |g, v, s| {
        let p = g.softmax(v[0])?;
        let m = g.log_floor(p, 1e-12);
        weighted_sum(g, m, s)
    });
    check_all("pick", &[&[6]], |g, v, s| {
        let m = g.pick(v[0], &[4, 1, 4])?;
        weighted_sum(g, m, s)
    });
    check_all("reshape", &[&[2, 3]], |g, v, s| {
        let m = g.reshape(v[0], &[3, 2])?;
        weighted_sum(g, m, s)
    });
    check_all("gather_rows", &[&[4, 3]], |g, v, s| {
        let m = g.gather_rows(v[0], &[2, 0, 2, 3])?;
        weighted_sum(g, m, s)
    });
    check_all("concat_cols", &[&[3, 2], &[3, 4]], |g, v, s| {
        let m = g.concat_cols(&[v[0], v[1], v[0]])?;
        weighted_sum(g, m, s)
    });
    check_all("layer_norm", &[&[4, 6], &[6], &[6]], |g, v, s| {
        let m = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(g, m, s)
    });
}

#[test]
fn grad_dropout_with_fixed_mask() {
    check_all("dropout", &[&[4, 5]], |g, v, s| {
        let mut rng = Rng::new(s);
        let m = g.dropout(v[0], 0.3, &mut rng)?;
        weighted_sum(g, m, s)
    });
}

#[test]
fn grad_attention() {
    let layout = SeqLayout::new(vec![3, 5, 1]).unwrap();
    for heads in [
        vec![AttnMask::Full, AttnMask::Full],
        vec![AttnMask::Forward, AttnMask::Backward],
    ] {
        check_all("attention", &[&[15, 12]], |g, v, s| {
            let m = g.attention(v[0], &layout, &heads)?;
            weighted_sum(g, m, s)
        });
    }
}

#[test]
fn grad_gru() {
    let layout = SeqLayout::new(vec![4, 2, 1]).unwrap();
    for reverse in [false, true] {
        check_all("gru", &[&[12, 9], &[3, 9]], |g, v, s| {
            let m = g.gru(v[0], v[1], &layout, reverse)?;
            weighted_sum(g, m, s)
        });
    }
}

#[test]
fn gru_zero_parameters_stay_zero() {
    let layout = SeqLayout::single(5).unwrap();
    let mut g = Graph::new();
    let gx = g.constant(Tensor::zeros(&[5, 6]));
    let u = g.constant(Tensor::zeros(&[2, 6]));
    let h = g.gru(gx, u, &layout, false).unwrap();
    assert!(g.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_padding_rows_are_zero() {
    let mut rng = Rng::new(9);
    let layout = SeqLayout::new(vec![2, 4]).unwrap();
    let mut g = Graph::new();
    let qkv = g.constant(random(&[8, 6], &mut rng));
    let out = g.attention(qkv, &layout, &[AttnMask::Full]).unwrap();
    let v = g.value(out);
    assert!(v.row(2).iter().chain(v.row(3)).all(|&x| x == 0.0));
}
