use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visa_tensor::nn::{BatchNorm2d, GruCell};
use visa_tensor::{
    check_gradients, GradCheckOptions, Graph, Init, ParamStore, Tensor, TensorError, Var,
};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Naive cross-correlation, the loop oracle for conv2d.
fn conv_ref(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (bn, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (vec![bn, co, oh, ow], out)
}

/// Central differences of `sum(f(x) * probe)` w.r.t. the leaf `x`, compared
/// with the tape's gradient. Returns the max relative error.
fn leaf_fd<F>(x: &Tensor<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |t: &Tensor<f64>| -> (f64, Vec<f64>) {
        let mut g = Graph::detached();
        let v = g.leaf(t.clone());
        let y = f(&mut g, v).unwrap();
        let n = g.value(y).len();
        let probe: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let p = g.input(Tensor::new(g.shape(y).to_vec(), probe).unwrap());
        let yp = g.mul(y, p).unwrap();
        let loss = g.sum_all(yp);
        let val = g.value(loss).item();
        let grad = g
            .backward(loss)
            .unwrap()
            .wrt(v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        (val, grad)
    };
    let (_, grad) = eval(x);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[j] += h;
        let mut m = x.clone();
        m.data_mut()[j] -= h;
        let num = (eval(&p).0 - eval(&m).0) / (2.0 * h);
        let rel = (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    let mut g = Graph::<f64>::detached();
    let x =
        g.input(Tensor::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
    let w = g.input(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
    let b = g.input(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.data(y), g.data(x));
}

#[test]
fn conv2d_all_ones_counts_neighbours() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(&[1, 1, 3, 3], 1.0);
    let w = g.constant(&[1, 1, 3, 3], 1.0);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let d = g.data(y);
    assert_eq!(d[4], 9.0);
    assert_eq!([d[0], d[2], d[6], d[8]], [4.0; 4]);
    assert_eq!([d[1], d[3], d[5], d[7]], [6.0; 4]);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 1, 3), (5, 2, 0)] {
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let (shape, want) = conv_ref(&x, &w, b.data(), stride, pad);
        let mut g = Graph::detached();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w), g.input(b));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.shape(y), &shape[..]);
        for (a, b) in g.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "k={k} stride={stride}");
        }
    }
}

#[test]
fn conv2d_shape_errors_name_axes() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(&[1, 3, 4, 4], 1.0);
    let w = g.constant(&[2, 2, 3, 3], 1.0);
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(
        matches!(err, TensorError::AxisMismatch { lhs: 3, rhs: 2, .. }),
        "{err}"
    );
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let wc = w.clone();
    assert!(
        leaf_fd(&x, |g, x| {
            let w = g.input(wc.clone());
            g.conv2d(x, w, None, 2, 1)
        }) < 1e-6
    );
    let xc = x.clone();
    assert!(
        leaf_fd(&w, |g, w| {
            let x = g.input(xc.clone());
            g.conv2d(x, w, None, 1, 1)
        }) < 1e-6
    );
}

#[test]
fn conv_transpose_unit_kernel_replicates() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(Tensor::from_f64(&[1, 1, 1, 1], &[2.5]).unwrap());
    let w = g.constant(&[1, 1, 2, 2], 1.0);
    let y = g.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.data(y), &[2.5; 4]);
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 3, 2]);
    let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let b = rand_tensor(&mut rng, &[2]);
    let (wc, bc) = (w.clone(), b.clone());
    assert!(
        leaf_fd(&x, |g, x| {
            let w = g.input(wc.clone());
            let b = g.input(bc.clone());
            g.conv_transpose2d(x, w, Some(b), 2)
        }) < 1e-6
    );
    let xc = x.clone();
    assert!(
        leaf_fd(&w, |g, w| {
            let x = g.input(xc.clone());
            g.conv_transpose2d(x, w, None, 2)
        }) < 1e-6
    );
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    // conv2d with a k=2, stride-2, pad-0 kernel maps [B,Cin,2H,2W] -> [B,Cout,H,W];
    // its adjoint is conv_transpose2d with the same weights viewed [Cout,Cin,2,2].
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 4]);
    let w = rand_tensor(&mut rng, &[4, 3, 2, 2]);
    let y = rand_tensor(&mut rng, &[2, 4, 3, 2]);
    let mut g = Graph::detached();
    let (xv, wv, yv) = (g.input(x.clone()), g.input(w), g.input(y.clone()));
    let cx = g.conv2d(xv, wv, None, 2, 0).unwrap();
    let ty = g.conv_transpose2d(yv, wv, None, 2).unwrap();
    let lhs: f64 = g.data(cx).iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(g.data(ty)).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
}

#[test]
fn layer_norm_closed_forms() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let gamma = g.constant(&[3], 1.0);
    let beta = g.constant(&[3], 0.0);
    let y = g.layer_norm(x, 1, gamma, beta, 1e-6).unwrap();
    let r = 1.5f64.sqrt();
    for (a, b) in g.data(y).iter().zip([-r, 0.0, r]) {
        assert!((a - b).abs() < 1e-6);
    }
    let c = g.constant(&[2, 4, 3, 3], 0.7);
    let gamma = g.constant(&[4], 1.0);
    let beta = g.constant(&[4], 0.0);
    let y = g.layer_norm(c, 1, gamma, beta, 1e-6).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 4, 3]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    let (gc, bc) = (gamma.clone(), beta.clone());
    assert!(
        leaf_fd(&x, |g, x| {
            let gm = g.input(gc.clone());
            let bt = g.input(bc.clone());
            g.layer_norm(x, 1, gm, bt, 1e-6)
        }) < 1e-5
    );
    let xc = x.clone();
    assert!(
        leaf_fd(&gamma, |g, gm| {
            let x = g.input(xc.clone());
            let bt = g.input(bc.clone());
            g.layer_norm(x, 1, gm, bt, 1e-6)
        }) < 1e-6
    );
}

#[test]
fn batch_norm_closed_forms_and_running_update() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2, 0).unwrap();
    // channel 0 constant, channel 1 takes values {-1, 1}
    let x = Tensor::from_f64(&[2, 2, 1, 1], &[3.0, -1.0, 3.0, 1.0]).unwrap();
    let moments = {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let (y, m) = bn.forward_train(&mut g, xv).unwrap();
        let d = g.data(y);
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[2], 0.0);
        assert!((d[1] + s).abs() < 1e-15 && (d[3] - s).abs() < 1e-15);
        m
    };
    assert_eq!(moments.mean, vec![3.0, 0.0]);
    assert_eq!(moments.var, vec![0.0, 1.0]);
    bn.update_running(&mut store, &moments);
    let rm = store.get(bn.running_mean).tensor.data().to_vec();
    let rv = store.get(bn.running_var).tensor.data().to_vec();
    assert!((rm[0] - (0.1 * 3.0 + 0.9 * 0.0)).abs() < 1e-15);
    assert!((rv[0] - 0.9).abs() < 1e-15);
    assert!((rv[1] - (0.1 + 0.9)).abs() < 1e-15);
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let y = bn.forward_eval(&mut g, xv).unwrap();
    let want0 = (3.0 - 0.3) / (0.9 + 1e-5f64).sqrt();
    assert!((g.data(y)[0] - want0).abs() < 1e-12);
}

#[test]
fn batch_norm_zero_variance_gives_beta() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 1, 0).unwrap();
    store.get_mut(bn.beta).tensor.data_mut()[0] = 0.25;
    let mut g = Graph::new(&store);
    let x = g.constant(&[3, 1, 2, 2], -4.0);
    let (y, _) = bn.forward_train(&mut g, x).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.25));
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let gc = gamma.clone();
    assert!(
        leaf_fd(&x, |g, x| {
            let gm = g.input(gc.clone());
            let bt = g.constant(&[2], 0.1);
            Ok(g.batch_norm_train(x, gm, bt, 1e-5)?.0)
        }) < 1e-5
    );
}

#[test]
fn softmax_closed_forms() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(Tensor::from_f64(&[1, 2], &[0.0, 2f64.ln()]).unwrap());
    let p = g.softmax(x, 1, 1.0).unwrap();
    assert!((g.data(p)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.data(p)[1] - 2.0 / 3.0).abs() < 1e-15);
    let e = g.constant(&[2, 3, 2], 0.3);
    let p = g.softmax(e, 1, 1.0).unwrap();
    assert!(g.data(p).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    assert!(g.softmax(e, 1, 0.0).is_err());
}

#[test]
fn softmax_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let mut g = Graph::<f64>::detached();
    let xv = g.input(x);
    let xs = g.add_scalar(xv, 17.5);
    let a = g.softmax(xv, 1, 1.0).unwrap();
    let b = g.softmax(xs, 1, 1.0).unwrap();
    for (u, v) in g.data(a).iter().zip(g.data(b)) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradients_with_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 3, 2]);
    assert!(leaf_fd(&x, |g, x| g.softmax(x, 1, 0.7)) < 1e-6);
}

#[test]
fn matmul_identity_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::<f64>::detached();
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let i = g.input(Tensor::from_f64(&[3, 3], &eye).unwrap());
    let av = g.input(a.clone());
    let ia = g.matmul(i, av).unwrap();
    assert_eq!(g.data(ia), a.data());

    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let wc = w.clone();
    assert!(
        leaf_fd(&x, |g, x| {
            let w = g.input(wc.clone());
            g.matmul(x, w)
        }) < 1e-6
    );
    let xc = x.clone();
    assert!(
        leaf_fd(&w, |g, w| {
            let x = g.input(xc.clone());
            g.matmul(x, w)
        }) < 1e-6
    );
}

#[test]
fn bmm_all_transposes_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_tensor(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
        let b = rand_tensor(&mut rng, if tb { &[2, 2, 4] } else { &[2, 4, 2] });
        let bc = b.clone();
        assert!(
            leaf_fd(&a, |g, a| {
                let b = g.input(bc.clone());
                g.bmm(a, b, ta, tb)
            }) < 1e-6
        );
        let ac = a.clone();
        assert!(
            leaf_fd(&b, |g, b| {
                let a = g.input(ac.clone());
                g.bmm(a, b, ta, tb)
            }) < 1e-6
        );
    }
}

#[test]
fn concat_then_slice_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = rand_tensor(&mut rng, &[1, 64, 2, 2]);
    let b = rand_tensor(&mut rng, &[1, 64, 2, 2]);
    let mut g = Graph::<f64>::detached();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.concat(&[av, bv], 1).unwrap();
    assert_eq!(g.shape(c), &[1, 128, 2, 2]);
    let lo = g.slice(c, 1, 0, 64).unwrap();
    let hi = g.slice(c, 1, 64, 64).unwrap();
    assert_eq!(g.data(lo), a.data());
    assert_eq!(g.data(hi), b.data());
}

#[test]
fn layout_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    assert!(leaf_fd(&x, |g, x| g.permute(x, &[2, 0, 1])) < 1e-6);
    assert!(leaf_fd(&x, |g, x| g.reshape(x, &[6, 4])) < 1e-6);
    assert!(leaf_fd(&x, |g, x| g.slice(x, 2, 1, 2)) < 1e-6);
    assert!(leaf_fd(&x, |g, x| g.mean_axis(x, 1)) < 1e-6);
    assert!(leaf_fd(&x, |g, x| g.max_axis(x, 0)) < 1e-6);
    assert!(
        leaf_fd(&x, |g, x| {
            let y = g.scale(x, 2.0);
            g.concat(&[x, y], 1)
        }) < 1e-6
    );
    assert!(
        leaf_fd(&x, |g, x| {
            let s = g.slice(x, 0, 0, 1)?;
            g.broadcast_to(s, &[3, 3, 4])
        }) < 1e-6
    );
    assert!(leaf_fd(&x, |g, x| g.gather(x, vec![0, 5, 5, 23, 7, 1], &[2, 3])) < 1e-6);
}

#[test]
fn elementwise_gradients_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[3, 1]);
    let yc = y.clone();
    for op in 0..4 {
        let yc = yc.clone();
        assert!(
            leaf_fd(&x, move |g, x| {
                let y = g.input(yc.clone());
                let y = g.add_scalar(y, 2.0);
                match op {
                    0 => g.add(x, y),
                    1 => g.sub(y, x),
                    2 => g.mul(x, y),
                    _ => g.div(x, y),
                }
            }) < 1e-6
        );
    }
    let xc = x.clone();
    assert!(
        leaf_fd(&y, |g, y| {
            let x = g.input(xc.clone());
            let y2 = g.add_scalar(y, 2.0);
            g.div(x, y2)
        }) < 1e-6
    );
    for op in 0..7 {
        assert!(
            leaf_fd(&x, |g, x| Ok(match op {
                0 => g.gelu(x),
                1 => g.sigmoid(x),
                2 => g.tanh(x),
                3 => g.exp(x),
                4 => {
                    let e = g.exp(x);
                    g.log_floor(e, 1e-12)
                }
                5 => g.relu(x),
                _ => g.abs(x),
            })) < 1e-6,
            "unary op {op}"
        );
    }
}

#[test]
fn scan_matches_unrolled_recurrence() {
    let mut g = Graph::<f64>::detached();
    let a = g.constant(&[1], 0.5);
    let b = g.constant(&[1], 1.0);
    let u = g.input(Tensor::from_f64(&[1, 3, 1], &[1.0, 0.0, 0.0]).unwrap());
    let x = g.scan(a, b, u).unwrap();
    assert_eq!(g.data(x), &[1.0, 0.5, 0.25]);
}

#[test]
fn scan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let u = rand_tensor(&mut rng, &[2, 4, 3]);
    let a = Tensor::from_f64(&[3], &[0.3, 0.6, 0.9]).unwrap();
    let b = rand_tensor(&mut rng, &[3]);
    let (ac, bc) = (a.clone(), b.clone());
    assert!(
        leaf_fd(&u, |g, u| {
            let a = g.input(ac.clone());
            let b = g.input(bc.clone());
            g.scan(a, b, u)
        }) < 1e-6
    );
    let uc = u.clone();
    assert!(
        leaf_fd(&a, |g, a| {
            let b = g.input(bc.clone());
            let u = g.input(uc.clone());
            g.scan(a, b, u)
        }) < 1e-6
    );
    assert!(
        leaf_fd(&b, |g, b| {
            let a = g.input(ac.clone());
            let u = g.input(uc.clone());
            g.scan(a, b, u)
        }) < 1e-6
    );
}

fn gru_store(bias_z: f64) -> (ParamStore<f64>, GruCell) {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 3, 4).unwrap();
    // larger weights than the default init so the gates are non-trivial
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let v = Init::TruncNormal { std: 0.5 }.sample(store.get(id).tensor.shape(), 1, &name);
        store.get_mut(id).tensor.data_mut().copy_from_slice(&v);
    }
    if bias_z != 0.0 {
        store
            .get_mut(cell.iz.b.unwrap())
            .tensor
            .data_mut()
            .fill(bias_z);
    }
    (store, cell)
}

#[test]
fn gru_gate_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = rand_tensor(&mut rng, &[2, 3]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    // z -> 1: the previous state is kept
    let (store, cell) = gru_store(60.0);
    let mut g = Graph::new(&store);
    let (hv, xv) = (g.input(h.clone()), g.input(x.clone()));
    let out = cell.forward(&mut g, hv, xv).unwrap();
    for (a, b) in g.data(out).iter().zip(h.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // z -> 0: the output is the candidate activation n
    let (store, cell) = gru_store(-60.0);
    let mut g = Graph::new(&store);
    let (hv, xv) = (g.input(h.clone()), g.input(x.clone()));
    let out = cell.forward(&mut g, hv, xv).unwrap();
    let r = {
        let a = cell.ir.forward(&mut g, xv).unwrap();
        let b = cell.hr.forward(&mut g, hv).unwrap();
        let s = g.add(a, b).unwrap();
        g.sigmoid(s)
    };
    let xn = cell.in_.forward(&mut g, xv).unwrap();
    let hn = cell.hn.forward(&mut g, hv).unwrap();
    let rhn = g.mul(r, hn).unwrap();
    let pre = g.add(xn, rhn).unwrap();
    let n = g.tanh(pre);
    for (a, b) in g.data(out).iter().zip(g.data(n)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gru_rejects_width_mismatch() {
    let (store, cell) = gru_store(0.0);
    let mut g = Graph::new(&store);
    let h = g.constant(&[2, 3], 0.0);
    let x = g.constant(&[2, 4], 0.0);
    assert!(cell.forward(&mut g, h, x).is_err());
}

#[test]
fn gru_gradient_check() {
    let (mut store, cell) = gru_store(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = rand_tensor(&mut rng, &[2, 3]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let report = check_gradients(
        &mut store,
        |g| {
            let (hv, xv) = (g.input(h.clone()), g.input(x.clone()));
            let y = cell.forward(g, hv, xv)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum_all(y2))
        },
        GradCheckOptions {
            samples_per_param: usize::MAX,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{:?}", report.worst());
}

#[test]
fn gradcheck_linear_function_is_exact() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .init("w", &[6], Init::TruncNormal { std: 1.0 }, 3)
        .unwrap();
    let unused = store.init("unused", &[2], Init::Ones, 3).unwrap();
    let x = Tensor::from_f64(&[6], &[0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
    let report = check_gradients(
        &mut store,
        |g| {
            let wv = g.param(w);
            let xv = g.input(x.clone());
            let p = g.mul(wv, xv)?;
            Ok(g.sum_all(p))
        },
        GradCheckOptions {
            samples_per_param: usize::MAX,
            ..Default::default()
        },
    )
    .unwrap();
    let pw = report.params.iter().find(|p| p.name == "w").unwrap();
    assert!(pw.max_abs_err < 1e-10);
    let pu = report.params.iter().find(|p| p.name == "unused").unwrap();
    assert_eq!(pu.max_grad, 0.0);
    assert!(pu.max_abs_err < 1e-12);
    assert_eq!(store.get(unused).name, "unused");
}

#[test]
fn gradcheck_fails_hard_on_non_finite_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store.init("w", &[1], Init::Ones, 0).unwrap();
    // sigmoid(exp(1000 w)) saturates to a finite 1 while its derivative is 0 * inf
    let err = check_gradients(
        &mut store,
        |g| {
            let wv = g.param(w);
            let y = g.scale(wv, 1000.0);
            let e = g.exp(y);
            let s = g.sigmoid(e);
            Ok(g.sum_all(s))
        },
        GradCheckOptions::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, visa_tensor::gradcheck::GradCheckError::NonFiniteGradient(ref n) if n == "w"),
        "{err}"
    );
}

#[test]
fn evaluation_is_deterministic() {
    let build = || {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .init("w", &[4, 3, 3, 3], Init::FanInUniform { fan_in: 27 }, 42)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let xv = g.input(x);
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.gelu(y);
        let y = g.softmax(y, 1, 1.0).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap().for_store(&store);
        (g.data(y).to_vec(), grads)
    };
    let (a, ga) = build();
    let (b, gb) = build();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(ga, gb);
}

#[test]
fn non_participating_parameter_gets_zero_gradient() {
    let mut store = ParamStore::<f32>::new();
    let a = store.init("a", &[3], Init::Ones, 0).unwrap();
    let b = store.init("b", &[2, 2], Init::Ones, 0).unwrap();
    let mut g = Graph::new(&store);
    let av = g.param(a);
    let s = g.sum_all(av);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(a).unwrap(), &[1.0; 3]);
    let all = grads.for_store(&store);
    assert_eq!(all[b.index()], vec![0.0; 4]);
}
