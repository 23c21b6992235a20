use rand::Rng;
use vpl_core::numcore::kernels::gelu;
use vpl_core::numcore::rng::seeded;
use vpl_core::numcore::{grad_check_report, GradCheckOptions, Graph, NodeId, ParamStore, Tensor};

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Build `op` over leaves, reduce with a fixed random projection, and compare
/// every input's analytic gradient with central differences.
#[allow(clippy::needless_range_loop)]
fn fd_check<F>(shapes: &[&[usize]], seed: u64, tol: f64, op: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let eval = |vals: &[Tensor], track: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = op(&mut g, &ids);
        let n = g.value(out).len();
        let mut prng = seeded(seed ^ 0xABCD);
        let proj = Tensor::new(g.shape(out).to_vec(), (0..n).map(|_| prng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = g.constant(proj);
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let value = g.value(loss).data()[0];
        if !track {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).unwrap();
        let gs = ids.iter().zip(vals).map(|(&i, t)| grads.get(i).map_or(vec![0.0; t.len()], |v| v.to_vec())).collect();
        (value, gs)
    };
    let (_, analytic) = eval(&inputs, true);
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic[k][j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < tol, "input {k} entry {j}: analytic {a}, numeric {fd}, rel err {err:e}");
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
    assert!(g.matmul(a, a).is_err());
}

#[test]
fn matmul_backward_matches_fd() {
    fd_check(&[&[3, 4], &[4, 2]], 1, 1e-6, |g, x| g.matmul(x[0], x[1]).unwrap());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let cases: [(&[f64], &[f64]); 3] =
        [(&[0.0, 0.0], &[0.5, 0.5]), (&[2f64.ln(), 0.0], &[2.0 / 3.0, 1.0 / 3.0]), (&[1000.0, 0.0], &[1.0, 0.0])];
    for (x, want) in cases {
        let n = g.constant(Tensor::vector(x.to_vec()));
        let s = g.softmax(n).unwrap();
        for (a, b) in g.value(s).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{x:?}: {a} vs {b}");
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::vector(vec![-1.0, 1.0]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_backward_matches_fd() {
    fd_check(&[&[2, 5], &[5], &[5]], 2, 1e-6, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-6).unwrap());
}

#[test]
fn gelu_asymptotes() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(10.0) - 10.0).abs() < 1e-6);
    assert!(gelu(-10.0).abs() < 1e-6);
}

#[test]
fn every_op_matches_fd() {
    let tol = 1e-5;
    fd_check(&[&[2, 3, 4], &[2, 4, 3]], 3, tol, |g, x| g.batch_matmul(x[0], x[1], false).unwrap());
    fd_check(&[&[2, 3, 4], &[2, 5, 4]], 4, tol, |g, x| g.batch_matmul(x[0], x[1], true).unwrap());
    fd_check(&[&[3, 4], &[3, 4]], 5, tol, |g, x| g.add(x[0], x[1]).unwrap());
    fd_check(&[&[3, 4], &[3, 4]], 6, tol, |g, x| g.sub(x[0], x[1]).unwrap());
    fd_check(&[&[3, 4], &[3, 4]], 7, tol, |g, x| g.mul(x[0], x[1]).unwrap());
    fd_check(&[&[2, 3, 4], &[4]], 8, tol, |g, x| g.add_trailing(x[0], x[1]).unwrap());
    fd_check(&[&[2, 3, 4], &[4]], 9, tol, |g, x| g.mul_trailing(x[0], x[1]).unwrap());
    fd_check(&[&[3, 4]], 10, tol, |g, x| g.scale(x[0], -1.7).unwrap());
    fd_check(&[&[3, 4], &[1]], 11, tol, |g, x| g.scale_by(x[0], x[1]).unwrap());
    fd_check(&[&[3, 4]], 12, tol, |g, x| g.gelu(x[0]).unwrap());
    fd_check(&[&[3, 4]], 13, tol, |g, x| g.sigmoid(x[0]).unwrap());
    fd_check(&[&[3, 5]], 14, tol, |g, x| g.softmax(x[0]).unwrap());
    fd_check(&[&[2, 3, 4]], 15, tol, |g, x| g.mean_middle(x[0]).unwrap());
    fd_check(&[&[6]], 16, tol, |g, x| g.gather(x[0], vec![5, 0, 0, 2], vec![2, 2]).unwrap());
    fd_check(&[&[2, 2], &[3]], 17, tol, |g, x| g.concat(&[x[0], x[1]]).unwrap());
    fd_check(&[&[2, 3]], 18, tol, |g, x| g.reshape(x[0], vec![3, 2]).unwrap());
    fd_check(&[&[3, 4], &[3, 4], &[4]], 19, tol, |g, x| g.gated_mix(x[0], x[1], x[2]).unwrap());
    fd_check(&[&[4, 3]], 20, tol, |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]).unwrap());
}

#[test]
fn grad_check_linear_closed_form() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::scalar(3.0), true).unwrap();
    let report = grad_check_report(
        &s,
        |m: &ParamStore, fwd| {
            let _ = m;
            let w = fwd.param("w")?;
            let x = fwd.g.constant(Tensor::scalar(1.0));
            let y = fwd.g.mul(w, x)?;
            let y2 = fwd.g.mul(y, y)?;
            fwd.g.sum_all(y2)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.params.len(), 1);
    assert!(report.max_rel_err() < 1e-9);
    // Analytic gradient itself: d(w·x)²/dw = 2wx = 6.
    let mut fwd = vpl_core::numcore::Forward::new(&s, true);
    let w = fwd.param("w").unwrap();
    let y2 = fwd.g.mul(w, w).unwrap();
    let loss = fwd.g.sum_all(y2).unwrap();
    let mut grads = fwd.g.backward(loss).unwrap();
    let g = fwd.param_grads(&mut grads);
    assert!((g[0].1[0] - 6.0).abs() < 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = seeded(42);
        let mut g = Graph::new();
        let a = g.leaf(rand_tensor(&mut rng, &[4, 8]), true);
        let b = g.leaf(rand_tensor(&mut rng, &[8, 3]), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
