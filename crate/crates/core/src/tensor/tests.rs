use super::*;
use crate::rng::Rng;

fn randt(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn square_gradient_analytic() {
    // f(x) = x*x at x = 3 -> grad 6.
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0), true);
    let y = g.mul(x, x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.dense(x).item(), 6.0);
}

#[test]
fn matvec_sum_gradients_match_row_col_sums() {
    // f = sum(M . v): dL/dM[i][j] = v[j], dL/dv[j] = sum_i M[i][j].
    let mut rng = Rng::seed(5);
    let m = randt(vec![4, 4], &mut rng);
    let v = randt(vec![4, 1], &mut rng);
    let mut g = Graph::new();
    let mn = g.input(m.clone(), true);
    let vn = g.input(v.clone(), true);
    let prod = g.matmul(mn, vn);
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    let dm = grads.dense(mn);
    let dv = grads.dense(vn);
    for i in 0..4 {
        for j in 0..4 {
            assert!((dm.data()[i * 4 + j] - v.data()[j]).abs() < 1e-6);
        }
    }
    for j in 0..4 {
        let col_sum: f32 = (0..4).map(|i| m.data()[i * 4 + j]).sum();
        assert!((dv.data()[j] - col_sum).abs() < 1e-5);
    }
    // Cross-check against the finite-difference oracle.
    let report = finite_diff_check_multi(
        |g, ids| {
            let p = g.matmul(ids[0], ids[1]);
            g.sum(p)
        },
        &[m, v],
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "rel err {}", report.max_rel_err);
}

#[test]
fn disconnected_parameter_reads_back_zeros() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0), true);
    let unused = g.input(Tensor::zeros(vec![3]), true);
    let y = g.mul(x, x);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.dense(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2]), true);
    let y = g.add(x, x);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(2))));
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a*f + b*g) == a*grad(f) + b*grad(g) elementwise.
    let mut rng = Rng::seed(17);
    let x0 = randt(vec![3, 3], &mut rng);
    let (a, b) = (0.7f32, -1.3f32);

    let build_f = |g: &mut Graph, x: NodeId| {
        let t = g.tanh(x);
        g.sum(t)
    };
    let build_h = |g: &mut Graph, x: NodeId| {
        let e = g.exp(x);
        g.mean(e)
    };

    let mut g1 = Graph::new();
    let x1 = g1.input(x0.clone(), true);
    let f = build_f(&mut g1, x1);
    let gf = g1.backward(f).unwrap().dense(x1);

    let mut g2 = Graph::new();
    let x2 = g2.input(x0.clone(), true);
    let h = build_h(&mut g2, x2);
    let gh = g2.backward(h).unwrap().dense(x2);

    let mut g3 = Graph::new();
    let x3 = g3.input(x0, true);
    let f3 = build_f(&mut g3, x3);
    let h3 = build_h(&mut g3, x3);
    let af = g3.scale(f3, a);
    let bh = g3.scale(h3, b);
    let comb = g3.add(af, bh);
    let gc = g3.backward(comb).unwrap().dense(x3);

    for i in 0..gc.numel() {
        let want = a * gf.data()[i] + b * gh.data()[i];
        assert!((gc.data()[i] - want).abs() < 1e-6, "coord {i}");
    }
}

#[test]
fn fd_linear_map_is_exact() {
    let mut rng = Rng::seed(23);
    let w = randt(vec![3, 4], &mut rng);
    let report = finite_diff_check(
        move |g, ids| {
            let wn = g.constant(w.clone());
            let y = g.matmul(wn, ids[0]);
            g.sum(y)
        },
        &randt(vec![4, 2], &mut rng),
        1e-10,
    )
    .unwrap();
    assert!(report.passed, "rel err {}", report.max_rel_err);
}

#[test]
fn fd_two_layer_tanh_mlp() {
    let mut rng = Rng::seed(29);
    let w1 = randt(vec![5, 4], &mut rng);
    let b1 = randt(vec![5, 1], &mut rng);
    let w2 = randt(vec![1, 5], &mut rng);
    let x = randt(vec![4, 1], &mut rng);
    let report = finite_diff_check_multi(
        |g, ids| {
            let (w1, b1, w2, x) = (ids[0], ids[1], ids[2], ids[3]);
            let h = g.matmul(w1, x);
            let hb = g.add(h, b1);
            let a = g.tanh(hb);
            let y = g.matmul(w2, a);
            g.sum(y)
        },
        &[w1, b1, w2, x],
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "rel err {}", report.max_rel_err);
}

#[test]
fn fd_softmax_cross_entropy_composite() {
    let mut rng = Rng::seed(31);
    let logits = randt(vec![3, 5], &mut rng);
    // -mean(log softmax(x)) restricted to a fixed "target" column per row,
    // composed from primitives.
    let report = finite_diff_check(
        |g, ids| {
            let p = g.softmax_rows(ids[0]);
            let lp = g.log(p);
            let mut picks = Vec::new();
            for (row, col) in [(0usize, 2usize), (1, 0), (2, 4)] {
                let r = g.slice(lp, 0, row, 1);
                let c = g.slice(r, 1, col, 1);
                picks.push(c);
            }
            let cat = g.concat(1, &picks);
            let m = g.mean(cat);
            g.scale(m, -1.0)
        },
        &logits,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "rel err {}", report.max_rel_err);
}

#[test]
fn fd_every_primitive_op() {
    // One representative composite per primitive, each reduced to a scalar.
    let mut rng = Rng::seed(37);
    type B = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
    let cases: Vec<(&str, Vec<Tensor>, B)> = vec![
        ("add", vec![randt(vec![3, 2], &mut rng), randt(vec![3, 2], &mut rng)],
         Box::new(|g, ids| { let s = g.add(ids[0], ids[1]); let sq = g.mul(s, s); g.sum(sq) })),
        ("add_row", vec![randt(vec![3, 4], &mut rng), randt(vec![4], &mut rng)],
         Box::new(|g, ids| { let s = g.add_row(ids[0], ids[1]); let t = g.tanh(s); g.sum(t) })),
        ("mul", vec![randt(vec![2, 3], &mut rng), randt(vec![2, 3], &mut rng)],
         Box::new(|g, ids| { let m = g.mul(ids[0], ids[1]); g.sum(m) })),
        ("mul_row", vec![randt(vec![3, 4], &mut rng), randt(vec![4], &mut rng)],
         Box::new(|g, ids| { let m = g.mul_row(ids[0], ids[1]); let t = g.tanh(m); g.sum(t) })),
        ("scale_addscalar", vec![randt(vec![4], &mut rng)],
         Box::new(|g, ids| { let s = g.scale(ids[0], -1.7); let a = g.add_scalar(s, 0.3); let m = g.mul(a, a); g.sum(m) })),
        ("matmul", vec![randt(vec![3, 4], &mut rng), randt(vec![4, 2], &mut rng)],
         Box::new(|g, ids| { let p = g.matmul(ids[0], ids[1]); let t = g.tanh(p); g.sum(t) })),
        ("transpose", vec![randt(vec![3, 4], &mut rng)],
         Box::new(|g, ids| { let t = g.transpose(ids[0]); let p = g.matmul(t, ids[0]); g.sum(p) })),
        ("reshape", vec![randt(vec![2, 6], &mut rng)],
         Box::new(|g, ids| { let r = g.reshape(ids[0], vec![3, 4]); let t = g.tanh(r); g.sum(t) })),
        ("concat_rows", vec![randt(vec![2, 3], &mut rng), randt(vec![1, 3], &mut rng)],
         Box::new(|g, ids| { let c = g.concat(0, &[ids[0], ids[1]]); let t = g.tanh(c); g.sum(t) })),
        ("concat_cols", vec![randt(vec![2, 3], &mut rng), randt(vec![2, 2], &mut rng)],
         Box::new(|g, ids| { let c = g.concat(1, &[ids[0], ids[1]]); let t = g.tanh(c); g.sum(t) })),
        ("slice", vec![randt(vec![4, 5], &mut rng)],
         Box::new(|g, ids| { let r = g.slice(ids[0], 0, 1, 2); let c = g.slice(r, 1, 1, 3); let t = g.tanh(c); g.sum(t) })),
        ("sum", vec![randt(vec![3, 3], &mut rng)],
         Box::new(|g, ids| { let t = g.tanh(ids[0]); g.sum(t) })),
        ("mean", vec![randt(vec![3, 3], &mut rng)],
         Box::new(|g, ids| { let t = g.tanh(ids[0]); g.mean(t) })),
        ("tanh", vec![randt(vec![5], &mut rng)],
         Box::new(|g, ids| { let t = g.tanh(ids[0]); g.sum(t) })),
        ("gelu", vec![randt(vec![5], &mut rng)],
         Box::new(|g, ids| { let t = g.gelu(ids[0]); g.sum(t) })),
        ("exp", vec![randt(vec![5], &mut rng)],
         Box::new(|g, ids| { let t = g.exp(ids[0]); g.sum(t) })),
        ("log", vec![Tensor::new(vec![4], vec![0.5, 1.2, 2.0, 3.3])],
         Box::new(|g, ids| { let t = g.log(ids[0]); g.sum(t) })),
        ("softmax_rows", vec![randt(vec![3, 4], &mut rng)],
         Box::new(|g, ids| { let s = g.softmax_rows(ids[0]); let ss = g.mul(s, s); g.sum(ss) })),
        ("layernorm_rows", vec![randt(vec![3, 6], &mut rng)],
         Box::new(|g, ids| { let l = g.layernorm_rows(ids[0], 1e-5); let t = g.tanh(l); g.sum(t) })),
        ("clamp", vec![randt(vec![6], &mut rng)],
         Box::new(|g, ids| { let c = g.clamp(ids[0], -0.5, 0.5); let m = g.mul(c, c); g.sum(m) })),
        ("sigmoid_composite", vec![randt(vec![5], &mut rng)],
         Box::new(|g, ids| { let s = g.sigmoid(ids[0]); g.sum(s) })),
    ];
    for (name, points, build) in cases {
        let report = finite_diff_check_multi(build, &points, 1e-4)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(report.passed, "{name}: rel err {}", report.max_rel_err);
    }
}

#[test]
fn nondeterministic_builder_detected() {
    use std::cell::Cell;
    let counter = Cell::new(0.0f32);
    let res = finite_diff_check(
        |g, ids| {
            counter.set(counter.get() + 1.0);
            let c = g.add_scalar(ids[0], counter.get());
            g.sum(c)
        },
        &Tensor::zeros(vec![2]),
        1e-4,
    );
    assert!(matches!(res, Err(TensorError::Nondeterministic)));
}

#[test]
fn checkpoint_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sfdc");
    let mut rng = Rng::seed(41);
    let mut entries = std::collections::BTreeMap::new();
    entries.insert("w1".to_string(), randt(vec![4, 3], &mut rng));
    entries.insert("b".to_string(), Tensor::new(vec![2], vec![f32::MIN_POSITIVE, -0.0]));
    entries.insert("scalar".to_string(), Tensor::scalar(1.0e-38));
    write_checkpoint(&path, &entries).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.len(), entries.len());
    for (name, t) in &entries {
        let u = &back[name];
        assert_eq!(u.shape(), t.shape());
        for (a, b) in u.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "tensor {name}");
        }
    }
    // Write twice -> identical bytes.
    let path2 = dir.path().join("model2.sfdc");
    write_checkpoint(&path2, &entries).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_bad_magic_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.bin");
    std::fs::write(&path, b"NOPE0000").unwrap();
    assert!(matches!(read_checkpoint(&path), Err(CheckpointError::BadMagic)));
}

#[test]
fn tape_order_violation_detected() {
    // Hand-build an out-of-order tape through the public API is impossible;
    // the validation path is still exercised via backward on a healthy graph.
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(1.0), true);
    let y = g.tanh(x);
    assert!(g.backward(y).is_ok());
}
