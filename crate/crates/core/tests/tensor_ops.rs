use partafford::tensor::{grad_check, Graph, GruWeights, Tensor, Var};
use partafford::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so that every output
/// coordinate contributes to the checked scalar.
fn probe(g: &mut Graph, y: Var) -> partafford::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.reduce_sum(p)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Graph, Var) -> partafford::Result<Var>) {
    let r = grad_check(|g, v| { let y = f(g, v)?; probe(g, y) }, x, H).unwrap();
    assert!(
        r.max_rel_error < TOL,
        "{name}: rel error {} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst,
        r.analytic,
        r.numeric
    );
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = g.constant(Tensor::zeros(&[2, 2]));
    let y = g.matmul(z, m).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let col = g.constant(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
    let y = g.matmul(m, col).unwrap();
    assert_eq!(g.shape(y), &[2, 1]);
    assert_eq!(g.value(y).data(), &[17.0, 39.0]);

    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.matmul(m, bad), Err(Error::Shape { .. })));
}

#[test]
fn matmul_sum_gradient_is_row_broadcast_of_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut g = Graph::new();
    let av = g.input(a);
    let bv = g.constant(b.clone());
    let p = g.matmul(av, bv).unwrap();
    let s = g.reduce_sum(p).unwrap();
    g.backward(s).unwrap();
    let ga = g.grad(av).unwrap();
    // dA[i][k] = sum_j B[k][j]
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((ga[i * 4 + k] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    // second call accumulates
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(1.0));
    let unused = g.input(Tensor::scalar(4.0));
    let y = g.tanh(x).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(unused).is_none_or(|gr| gr == [0.0]));

    let v = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);
    let v = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
    let t = g.reduce_sum(v).unwrap();
    assert_eq!(g.value(t).item(), 6.0);

    // relu subgradient at exactly 0 is 0
    let z = g.input(Tensor::scalar(0.0));
    let rz = g.relu(z).unwrap();
    g.backward(rz).unwrap();
    assert_eq!(g.grad(z).unwrap(), &[0.0]);

    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(-1.0));
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]).unwrap());
    let s = g.softmax_along(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_vec(vec![2f64.ln(), 0.0]).unwrap());
    let s = g.softmax_along(x, 0).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = g.constant(Tensor::from_vec(vec![1000.0, 0.0]).unwrap());
    let s = g.softmax_along(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));

    let c = g.constant(Tensor::new(&[1, 2], vec![4.0, 4.0]).unwrap());
    let y = g.layer_norm(c, 1, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, 1, gain, bias).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
    assert!((g.value(y).data()[1] + expect).abs() < 1e-15);

    let x = g.constant(Tensor::new(&[1, 2], vec![3.0, 5.0]).unwrap());
    let y = g.layer_norm(x, 1, gain, bias).unwrap();
    // mean 4, variance 1: (x - 4) / sqrt(1 + 1e-5)
    assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
}

fn gru_weights(g: &mut Graph, d: usize, wz: f64, bz: f64, wh: f64) -> GruWeights {
    let mut mk = |shape: &[usize], v: f64| g.constant(Tensor::full(shape, v));
    GruWeights {
        w_z: mk(&[2 * d, d], wz),
        b_z: mk(&[d], bz),
        w_r: mk(&[2 * d, d], 0.0),
        b_r: mk(&[d], 0.0),
        w_h: mk(&[2 * d, d], wh),
        b_h: mk(&[d], 0.0),
    }
}

#[test]
fn gru_examples() {
    let mut g = Graph::new();
    let w = gru_weights(&mut g, 1, 0.0, 0.0, 0.0);
    let x = g.constant(Tensor::new(&[1, 1], vec![0.3]).unwrap());
    let h = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let out = g.gru_cell(x, h, &w).unwrap();
    assert!((g.value(out).item() - 0.5).abs() < 1e-15);

    let w = gru_weights(&mut g, 1, 0.0, -40.0, 1.0);
    let out = g.gru_cell(x, h, &w).unwrap();
    assert!((g.value(out).item() - 1.0).abs() < 1e-12);

    let w = gru_weights(&mut g, 1, 0.0, 40.0, 0.0);
    let out = g.gru_cell(x, h, &w).unwrap();
    assert!(g.value(out).item().abs() < 1e-12);
}

#[test]
fn conv3d_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = rand_tensor(&[1, 3, 3, 3], &mut rng);
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = g.conv3d(xv, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let k0 = g.constant(Tensor::zeros(&[2, 1, 3, 3, 3]));
    let y = g.conv3d(xv, k0, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let ones = g.constant(Tensor::ones(&[1, 4, 4, 4]));
    let k8 = g.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
    let y = g.conv3d(ones, k8, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 8.0));

    let big = g.constant(Tensor::zeros(&[1, 5, 5, 5, 5]));
    assert!(matches!(g.conv3d(xv, big, None, 1, 0), Err(Error::Shape { .. })));
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_transpose_is_adjoint_on_8_cubed() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (4, 2, 1), (2, 2, 0)] {
        let mut g = Graph::new();
        let x = rand_tensor(&[2, 8, 8, 8], &mut rng);
        let kern = rand_tensor(&[3, 2, k, k, k], &mut rng);
        let xv = g.constant(x.clone());
        let kv = g.constant(kern);
        let cx = g.conv3d(xv, kv, None, s, p).unwrap();
        let y = rand_tensor(g.shape(cx), &mut rng);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose3d(yv, kv, None, s, p).unwrap();
        if g.shape(ty) != x.shape() {
            // stride does not tile 8 exactly for this geometry
            continue;
        }
        let lhs = inner(g.value(cx), &y);
        let rhs = inner(&x, g.value(ty));
        assert!((lhs - rhs).abs() <= 1e-10, "k={k} s={s}: {lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_examples() {
    let mut g = Graph::new();
    let x = Tensor::new(&[1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = g.conv_transpose3d(xv, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    // impulse at (1, 0, 1) with stride 2 stamps the kernel at (2, 0, 2)
    let mut imp = Tensor::zeros(&[1, 2, 2, 2]);
    imp.data_mut()[(1 * 2 + 0) * 2 + 1] = 1.0;
    let iv = g.constant(imp);
    let kern = Tensor::new(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
    let kv = g.constant(kern.clone());
    let y = g.conv_transpose3d(iv, kv, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    let out = g.value(y).data();
    for d in 0..4 {
        for h in 0..4 {
            for w in 0..4 {
                let v = out[(d * 4 + h) * 4 + w];
                let inside = (2..4).contains(&d) && h < 2 && (2..4).contains(&w);
                let expect = if inside {
                    kern.data()[((d - 2) * 2 + h) * 2 + (w - 2)]
                } else {
                    0.0
                };
                assert_eq!(v, expect, "at {d},{h},{w}");
            }
        }
    }
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x23 = rand_tensor(&[2, 3], &mut rng);
    let other = rand_tensor(&[2, 3], &mut rng);
    let row = rand_tensor(&[3], &mut rng);
    let positive = Tensor::new(&[2, 3], x23.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    // keep relu inputs away from the kink
    let off_kink = Tensor::new(&[2, 3], x23.data().iter().map(|v| if v.abs() < 0.05 { 0.3 } else { *v }).collect()).unwrap();

    macro_rules! with_const {
        ($t:expr, |$g:ident, $x:ident, $c:ident| $body:expr) => {{
            let t = $t.clone();
            move |$g: &mut Graph, $x: Var| {
                let $c = $g.constant(t.clone());
                $body
            }
        }};
    }

    check("add", &x23, with_const!(other, |g, x, c| g.add(x, c)));
    check("add broadcast lhs", &row, with_const!(other, |g, x, c| g.add(c, x)));
    check("sub", &x23, with_const!(row, |g, x, c| g.sub(c, x)));
    check("sub broadcast rhs", &row, with_const!(other, |g, x, c| g.sub(c, x)));
    check("mul", &x23, with_const!(row, |g, x, c| g.mul(x, c)));
    check("mul broadcast", &row, with_const!(other, |g, x, c| g.mul(c, x)));
    check("div numerator", &x23, with_const!(positive, |g, x, c| g.div(x, c)));
    check("div denominator", &positive, with_const!(x23, |g, x, c| g.div(c, x)));
    check("relu", &off_kink, |g, x| g.relu(x));
    check("sigmoid", &x23, |g, x| g.sigmoid(x));
    check("tanh", &x23, |g, x| g.tanh(x));
    check("softplus", &x23, |g, x| g.softplus(x));
    check("exp", &x23, |g, x| g.exp(x));
    check("log", &positive, |g, x| g.log(x));
    check("sqrt", &positive, |g, x| g.sqrt(x));
    check("clamp", &x23, |g, x| g.clamp(x, -0.5, 0.5));
    check("scale/offset", &x23, |g, x| {
        let s = g.scale(x, -2.5)?;
        g.offset(s, 1.0)
    });
    check("reduce_mean", &x23, |g, x| g.reduce_mean(x));
    check("reduce_sum_axis 0", &x23, |g, x| g.reduce_sum_axis(x, 0));
    check("reduce_sum_axis 1", &x23, |g, x| g.reduce_sum_axis(x, 1));
    check("broadcast_to", &row, |g, x| g.broadcast_to(x, &[4, 3]));
    check("reshape", &x23, |g, x| g.reshape(x, &[3, 2]));
    check("transpose", &x23, |g, x| g.transpose(x));
    check("softmax axis 0", &x23, |g, x| g.softmax_along(x, 0));
    check("softmax axis 1", &x23, |g, x| g.softmax_along(x, 1));
    check("log_softmax", &x23, |g, x| g.log_softmax_along(x, 1));
    check("slice", &x23, |g, x| g.slice(x, 1, 1, 2));
    check("concat", &x23, with_const!(other, |g, x, c| g.concat(&[c, x, x], 1)));
    let b = rand_tensor(&[3, 4], &mut rng);
    check("matmul lhs", &x23, with_const!(b, |g, x, c| g.matmul(x, c)));
    check("matmul rhs", &b, with_const!(x23, |g, x, c| g.matmul(c, x)));

    let ln_in = rand_tensor(&[3, 5], &mut rng);
    let gain = rand_tensor(&[5], &mut rng);
    let bias = rand_tensor(&[5], &mut rng);
    let (g1, b1) = (gain.clone(), bias.clone());
    check("layer_norm x", &ln_in, move |g, x| {
        let gv = g.constant(g1.clone());
        let bv = g.constant(b1.clone());
        g.layer_norm(x, 1, gv, bv)
    });
    let (l1, b2) = (ln_in.clone(), bias.clone());
    check("layer_norm gain", &gain, move |g, x| {
        let xv = g.constant(l1.clone());
        let bv = g.constant(b2.clone());
        g.layer_norm(xv, 1, x, bv)
    });
    let ln_axis0 = rand_tensor(&[5, 2], &mut rng);
    let (g2, b3) = (gain.clone(), bias.clone());
    check("layer_norm axis 0", &ln_axis0, move |g, x| {
        let gv = g.constant(g2.clone());
        let bv = g.constant(b3.clone());
        g.layer_norm(x, 0, gv, bv)
    });
}

#[test]
fn gradients_of_conv_and_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 2, 5, 4, 3], &mut rng);
    let k = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let (kc, bc) = (k.clone(), b.clone());
    check("conv3d x", &x, move |g, v| {
        let kv = g.constant(kc.clone());
        let bv = g.constant(bc.clone());
        g.conv3d(v, kv, Some(bv), 2, 1)
    });
    let (xc, bc) = (x.clone(), b.clone());
    check("conv3d kernel", &k, move |g, v| {
        let xv = g.constant(xc.clone());
        let bv = g.constant(bc.clone());
        g.conv3d(xv, v, Some(bv), 1, 1)
    });
    let (xc, kc) = (x.clone(), k.clone());
    check("conv3d bias", &b, move |g, v| {
        let xv = g.constant(xc.clone());
        let kv = g.constant(kc.clone());
        g.conv3d(xv, kv, Some(v), 1, 0)
    });

    let y = rand_tensor(&[3, 2, 3, 2], &mut rng);
    let kt = rand_tensor(&[3, 2, 4, 4, 4], &mut rng);
    let bt = rand_tensor(&[2], &mut rng);
    let (kc, bc) = (kt.clone(), bt.clone());
    check("conv_transpose3d x", &y, move |g, v| {
        let kv = g.constant(kc.clone());
        let bv = g.constant(bc.clone());
        g.conv_transpose3d(v, kv, Some(bv), 2, 1)
    });
    let (yc, bc) = (y.clone(), bt.clone());
    check("conv_transpose3d kernel", &kt, move |g, v| {
        let yv = g.constant(yc.clone());
        let bv = g.constant(bc.clone());
        g.conv_transpose3d(yv, v, Some(bv), 2, 1)
    });
    let (yc, kc) = (y.clone(), kt.clone());
    check("conv_transpose3d bias", &bt, move |g, v| {
        let yv = g.constant(yc.clone());
        let kv = g.constant(kc.clone());
        g.conv_transpose3d(yv, kv, Some(v), 2, 1)
    });

    let d = 3;
    let mats: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2 * d, d], &mut rng)).collect();
    let biases: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[d], &mut rng)).collect();
    let h0 = rand_tensor(&[2, d], &mut rng);
    let x0 = rand_tensor(&[2, d], &mut rng);
    let weights = move |g: &mut Graph| GruWeights {
        w_z: g.constant(mats[0].clone()),
        b_z: g.constant(biases[0].clone()),
        w_r: g.constant(mats[1].clone()),
        b_r: g.constant(biases[1].clone()),
        w_h: g.constant(mats[2].clone()),
        b_h: g.constant(biases[2].clone()),
    };
    let (w1, hc) = (weights.clone(), h0.clone());
    check("gru input", &x0, move |g, v| {
        let w = w1(g);
        let h = g.constant(hc.clone());
        g.gru_cell(v, h, &w)
    });
    let xc = x0.clone();
    check("gru hidden", &h0, move |g, v| {
        let w = weights(g);
        let x = g.constant(xc.clone());
        g.gru_cell(x, v, &w)
    });
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = Tensor::from_vec(vec![0.1, -2.0, 3.5]).unwrap();
    let r = grad_check(|g, v| g.reduce_sum(v), &x, H).unwrap();
    assert!(r.max_rel_error < 1e-9);
    assert_eq!(r.checked, 3);
}

#[test]
fn grad_check_two_layer_perceptron_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = rand_tensor(&[4, 3], &mut rng);
    let targets = Tensor::new(&[4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let w2 = rand_tensor(&[5, 1], &mut rng);
    let w1 = rand_tensor(&[3, 5], &mut rng);
    let r = grad_check(
        |g, w| {
            let x = g.constant(inputs.clone());
            let t = g.constant(targets.clone());
            let w2 = g.constant(w2.clone());
            let h = g.matmul(x, w)?;
            let h = g.tanh(h)?;
            let logits = g.matmul(h, w2)?;
            let p = g.sigmoid(logits)?;
            let p = g.clamp(p, 1e-7, 1.0 - 1e-7)?;
            let lp = g.log(p)?;
            let q = g.one_minus(p)?;
            let lq = g.log(q)?;
            let nt = g.one_minus(t)?;
            let a = g.mul(t, lp)?;
            let b = g.mul(nt, lq)?;
            let s = g.add(a, b)?;
            let m = g.reduce_mean(s)?;
            g.neg(m)
        },
        &w1,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
        let mut g = Graph::new();
        let n = vals.len();
        let x = g.constant(Tensor::new(&[1, n], vals).unwrap());
        let s = g.softmax_along(x, 1).unwrap();
        let d = g.value(s).data();
        prop_assert!(d.iter().all(|&v| v >= 0.0));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn conv_transpose_adjoint_random(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = rand_tensor(&[1, 8, 8, 8], &mut rng);
        let k = rand_tensor(&[2, 1, 4, 4, 4], &mut rng);
        let xv = g.constant(x.clone());
        let kv = g.constant(k);
        let cx = g.conv3d(xv, kv, None, 2, 1).unwrap();
        let y = rand_tensor(g.shape(cx), &mut rng);
        let yv = g.constant(y.clone());
        let ty = g.conv_transpose3d(yv, kv, None, 2, 1).unwrap();
        prop_assert!((inner(g.value(cx), &y) - inner(&x, g.value(ty))).abs() <= 1e-10);
    }
}
