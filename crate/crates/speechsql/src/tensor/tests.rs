use super::conv::ConvGeom;
use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Max relative error between tape gradients and central differences.
fn check_grads(inputs: &[ArrayD<f64>], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    let l0 = tape.scalar(loss);
    assert!(l0.is_finite());
    let grads = tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| grads.get(*v, a.shape()))
        .collect();

    let eps = 1e-5;
    let mut max_rel = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let idxs: Vec<_> = input.indexed_iter().map(|(i, _)| i).collect();
        for idx in idxs {
            let eval = |delta: f64| {
                let mut pert: Vec<ArrayD<f64>> = inputs.to_vec();
                pert[k][&idx] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = pert.iter().map(|a| t.leaf(a.clone())).collect();
                let l = build(&mut t, &vs);
                t.scalar(l)
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let ana = analytic[k][&idx];
            // Relative error with a unit floor: wrong backward passes show up
            // at the gradient's own magnitude, FD roundoff stays ~1e-9.
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

#[test]
fn grad_linear_relu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        randn(&mut rng, &[3, 4]),
        randn(&mut rng, &[4, 5]),
        randn(&mut rng, &[1, 5]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let y = t.matmul(v[0], v[1]);
        let y = t.add_row(y, v[2]);
        let y = t.relu(y);
        t.sum_all(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![randn(&mut rng, &[2, 6])];
    let err = check_grads(&inputs, |t, v| {
        let a = t.tanh(v[0]);
        let b = t.sigmoid(v[0]);
        let c = t.mul(a, b);
        let d = t.scale(c, 1.7);
        t.mean_all(d)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_softmax_masked_and_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![randn(&mut rng, &[3, 5])];
    let mask = vec![true, false, true, true, false];
    let err = check_grads(&inputs, |t, v| {
        let p = t.softmax_rows_masked(v[0], &mask);
        let p0 = t.pick(p, 1, 2);
        let lp = t.ln(p0);
        t.scale(lp, -1.0)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn softmax_masked_zero_and_sums() {
    let mut tape = Tape::new();
    let a = tape.leaf2(2, 4, vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0]);
    let p = tape.softmax_rows_masked(a, &[true, true, false, true]);
    let v = mat(tape.value(p));
    for i in 0..2 {
        assert_eq!(v[[i, 2]], 0.0);
        let s: f64 = (0..4).map(|j| v[[i, j]]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        randn(&mut rng, &[3, 6]),
        randn(&mut rng, &[1, 6]),
        randn(&mut rng, &[1, 6]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
        let w = t.tanh(y);
        t.sum_all(w)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = ConvGeom {
        k: (3, 3),
        stride: (2, 1),
        pad: (1, 1),
    };
    let inputs = vec![
        randn(&mut rng, &[2, 5, 4]),
        randn(&mut rng, &[3, 2, 3, 3]),
        randn(&mut rng, &[1, 3]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geom);
        let y = t.tanh(y);
        t.sum_all(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn conv2d_ceil_length() {
    // stride 2, k 3, pad 1 halves the time axis with ceil rounding
    for h in [1usize, 2, 5, 7, 64] {
        let geom = ConvGeom {
            k: (3, 3),
            stride: (2, 1),
            pad: (1, 1),
        };
        assert_eq!(geom.out_hw(h, 8).0, h.div_ceil(2));
    }
}

#[test]
fn grad_conv2d_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let geom = ConvGeom {
        k: (3, 3),
        stride: (2, 2),
        pad: (1, 1),
    };
    // upsample (3, 4) back to (5, 7): ((5+2-3)/2+1, (7+2-3)/2+1) == (3, 4)
    let inputs = vec![
        randn(&mut rng, &[2, 3, 4]),
        randn(&mut rng, &[2, 3, 3, 3]),
        randn(&mut rng, &[1, 3]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let y = t.conv2d_transpose(v[0], v[1], v[2], geom, 5, 7);
        let y = t.sigmoid(y);
        t.sum_all(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_batch_norm_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        randn(&mut rng, &[2, 4, 3]),
        randn(&mut rng, &[1, 2]),
        randn(&mut rng, &[1, 2]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Training);
        let y = t.tanh(y);
        t.sum_all(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_batch_norm_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        randn(&mut rng, &[2, 3, 3]),
        randn(&mut rng, &[1, 2]),
        randn(&mut rng, &[1, 2]),
    ];
    let mode = BnMode::Inference {
        mean: vec![0.1, -0.2],
        var: vec![0.5, 1.5],
    };
    let err = check_grads(&inputs, |t, v| {
        let (y, stats) = t.batch_norm(v[0], v[1], v[2], 1e-5, mode.clone());
        assert!(stats.is_none());
        t.sum_all(y)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 2])];
    let err = check_grads(&inputs, |t, v| {
        let c = t.concat_cols(v[0], v[1]);
        let s = t.slice_cols(c, 1, 5);
        let r = t.slice_rows(s, 0, 2);
        let u = t.transpose(r);
        let m = t.max_pool_rows(u);
        let n = t.mean_rows(u);
        let q = t.add(m, n);
        t.sum_all(q)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_gather_and_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![randn(&mut rng, &[5, 3])];
    let err = check_grads(&inputs, |t, v| {
        let g = t.gather_rows(v[0], &[0, 2, 2, 4]);
        let a = t.slice_rows(g, 0, 2);
        let b = t.slice_rows(g, 2, 4);
        let s = t.concat_rows(&[a, b, a]);
        let w = t.tanh(s);
        t.sum_all(w)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_normalize_and_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[2, 4])];
    let err = check_grads(&inputs, |t, v| {
        let an = t.normalize_rows(v[0]);
        let bn = t.normalize_rows(v[1]);
        let bt = t.transpose(bn);
        let cs = t.matmul(an, bt);
        let cs = t.clamp11(cs);
        let sq = t.mul(cs, cs);
        t.sum_all(sq)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn normalize_rows_zero_row_stays_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf2(2, 3, vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]);
    let n = tape.normalize_rows(a);
    let v = mat(tape.value(n));
    assert_eq!(v[[0, 0]], 0.0);
    assert_eq!(v[[0, 2]], 0.0);
    assert!((v[[1, 0]] - 0.6).abs() < 1e-12);
    assert!((v[[1, 2]] - 0.8).abs() < 1e-12);
}

#[test]
fn grad_pool_adaptive_and_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![randn(&mut rng, &[1, 7]), randn(&mut rng, &[2, 3, 4])];
    let err = check_grads(&inputs, |t, v| {
        let p = t.pool_cols_adaptive(v[0], 3);
        let ps = t.tanh(p);
        let a = t.sum_all(ps);
        let c = t.collapse_mel(v[1]);
        let m = t.mean_rows(c);
        let ms = t.sigmoid(m);
        let b = t.sum_all(ms);
        t.add(a, b)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_lstm_step_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 3usize;
    let din = 4usize;
    let inputs = vec![
        randn(&mut rng, &[1, din]),
        randn(&mut rng, &[1, d]),
        randn(&mut rng, &[1, d]),
        randn(&mut rng, &[din, 4 * d]),
        randn(&mut rng, &[d, 4 * d]),
        randn(&mut rng, &[1, 4 * d]),
    ];
    let err = check_grads(&inputs, |t, v| {
        let (x, h, c, wx, wh, b) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let g1 = t.matmul(x, wx);
        let g2 = t.matmul(h, wh);
        let g12 = t.add(g1, g2);
        let gates = t.add(g12, b);
        let i = t.slice_cols(gates, 0, d);
        let f = t.slice_cols(gates, d, 2 * d);
        let o = t.slice_cols(gates, 2 * d, 3 * d);
        let g = t.slice_cols(gates, 3 * d, 4 * d);
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let o = t.sigmoid(o);
        let g = t.tanh(g);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c2 = t.add(fc, ig);
        let tc = t.tanh(c2);
        let h2 = t.mul(o, tc);
        t.sum_all(h2)
    });
    assert!(err < 1e-6, "max rel err {err}");
}
