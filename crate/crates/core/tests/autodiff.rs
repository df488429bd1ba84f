use fpf_core::gradcheck::{grad_check, grad_check_many, Coords, DEFAULT_STEP};
use fpf_core::selfcheck::random_tensor;
use fpf_core::tape::{OpKind, Tape};
use fpf_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    c
}

fn sliding_window(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (t_len, c_in) = (x.rows(), x.cols());
    let (k, c_out) = (kernel.shape()[0], kernel.shape()[2]);
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t_len * c_out];
    for t in 0..t_len as isize {
        for o in 0..c_out {
            let mut acc = bias.data()[o];
            for j in 0..k as isize {
                let src = t + j - half;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for c in 0..c_in {
                    acc += x.get2(src as usize, c)
                        * kernel.data()[(j as usize * c_in + c) * c_out + o];
                }
            }
            out[t as usize * c_out + o] = acc;
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a = random_tensor(&mut rng, &[4, 5], 2.0);
        let b = random_tensor(&mut rng, &[5, 3], 2.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert!(max_diff(tape.value(c).data(), &triple_loop(&a, &b)) <= 1e-12);
    }
}

#[test]
fn conv1d_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in [1, 3, 5] {
        let x = random_tensor(&mut rng, &[7, 3], 1.0);
        let kernel = random_tensor(&mut rng, &[k, 3, 4], 1.0);
        let bias = random_tensor(&mut rng, &[4], 1.0);
        let mut tape = Tape::new();
        let (vx, vk, vb) = (
            tape.constant(x.clone()),
            tape.constant(kernel.clone()),
            tape.constant(bias.clone()),
        );
        let y = tape.conv1d(vx, vk, vb).unwrap();
        assert_eq!(tape.shape(y), &[7, 4]);
        assert!(max_diff(tape.value(y).data(), &sliding_window(&x, &kernel, &bias)) <= 1e-12);
    }
}

#[test]
fn softmax_large_inputs_match_shifted_oracle() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 1000.5]).unwrap());
    let y = tape.softmax(x, 1).unwrap();
    let got = tape.value(y).data();
    // exp(0) and exp(0.5) after subtracting the max by hand
    let e = 0.5f64.exp();
    let expected = [1.0 / (1.0 + e), e / (1.0 + e)];
    assert!(got.iter().all(|v| v.is_finite()));
    assert!(max_diff(got, &expected) <= 1e-15);
    assert!((got[0] + got[1] - 1.0).abs() <= 1e-15);
}

#[test]
fn layer_norm_row_statistics_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[3, 8], 5.0);
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let g = tape.constant(Tensor::full(&[8], 1.0));
    let b = tape.constant(Tensor::zeros(&[8]));
    let y = tape.layer_norm(vx, g, b, 1e-12).unwrap();
    for r in 0..3 {
        let row = tape.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn embedding_gradient_counts_occurrences_by_finite_differences() {
    let table = Tensor::new(vec![4, 2], (0..8).map(|v| v as f64 * 0.3).collect()).unwrap();
    let ids = [1, 3, 1, 1];
    let report = grad_check(
        |t, x| {
            let g = t.gather_rows(x, &ids)?;
            t.sum(g)
        },
        &table,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);

    let mut tape = Tape::new();
    let v = tape.param(table.clone());
    let g = tape.gather_rows(v, &ids).unwrap();
    let s = tape.sum(g).unwrap();
    tape.backward(s).unwrap();
    // finite differences of a sum are exact counts
    for row in 0..4 {
        let count = ids.iter().filter(|&&i| i == row).count() as f64;
        let mut plus = table.clone();
        plus.data_mut()[row * 2] += 0.5;
        let mut t2 = Tape::new();
        let p = t2.constant(plus);
        let gp = t2.gather_rows(p, &ids).unwrap();
        let sp = t2.sum(gp).unwrap();
        let fd = (t2.value(sp).data()[0] - tape.value(s).data()[0]) / 0.5;
        assert!((fd - count).abs() < 1e-12);
        assert_eq!(tape.grad(v).unwrap()[row * 2], count);
    }
}

#[test]
fn full_fft_block_style_chain_passes_grad_check() {
    // attention-shaped chain: softmax(x Wq (x Wk)^T) x Wv, then layer norm
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = vec![
        random_tensor(&mut rng, &[5, 4], 1.0),
        random_tensor(&mut rng, &[4, 4], 1.0),
        random_tensor(&mut rng, &[4, 4], 1.0),
        random_tensor(&mut rng, &[4, 4], 1.0),
    ];
    let report = grad_check_many(
        |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let val = t.matmul(v[0], v[3])?;
            let kt = t.transpose(k)?;
            let s = t.matmul(q, kt)?;
            let p = t.softmax(s, 1)?;
            let a = t.matmul(p, val)?;
            let r = t.add(a, v[0])?;
            let g = t.constant(Tensor::full(&[4], 1.3));
            let b = t.constant(Tensor::full(&[4], -0.2));
            let y = t.layer_norm(r, g, b, 1e-5)?;
            let y2 = t.mul(y, y)?;
            let z = t.mul(y2, y)?;
            t.sum(z)
        },
        &inputs,
        DEFAULT_STEP,
        Coords::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn backward_is_deterministic_and_visits_all_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_tensor(&mut rng, &[3, 3], 1.0);
    let run = || {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let a = t.matmul(v, v).unwrap();
        let b = t.mul(a, v).unwrap();
        let c = t.add(b, v).unwrap();
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        t.grad(v).unwrap().to_vec()
    };
    let g1 = run();
    let g2 = run();
    assert_eq!(
        g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn tape_is_in_topological_order() {
    let mut t = Tape::new();
    let a = t.param(Tensor::full(&[2, 2], 1.0));
    let b = t.relu(a).unwrap();
    let c = t.matmul(b, a).unwrap();
    assert!(a.index() < b.index() && b.index() < c.index());
    assert_eq!(t.op_kind(c), OpKind::MatMul);
    assert_eq!(t.nodes_of_kind(OpKind::Relu), vec![b]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&mut rng, &[rows, cols], scale));
        let y = t.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = t.value(y).row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_grad_check_on_random_shapes(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random_tensor(&mut rng, &[m, k], 1.0), random_tensor(&mut rng, &[k, n], 1.0)];
        let w = random_tensor(&mut rng, &[m, n], 1.0);
        let r = grad_check_many(|t, v| {
            let c = t.matmul(v[0], v[1])?;
            let w = t.constant(w.clone());
            let p = t.mul(c, w)?;
            t.sum(p)
        }, &inputs, DEFAULT_STEP, Coords::All).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn conv1d_grad_check_on_random_shapes(seed in any::<u64>(), t_len in 1usize..6, half in 0usize..3, c_in in 1usize..3, c_out in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2 * half + 1;
        let inputs = vec![
            random_tensor(&mut rng, &[t_len, c_in], 1.0),
            random_tensor(&mut rng, &[k, c_in, c_out], 1.0),
            random_tensor(&mut rng, &[c_out], 1.0),
        ];
        let r = grad_check_many(|t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        }, &inputs, DEFAULT_STEP, Coords::All).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
    }

    // With d = 2 the normalized row is ±1 up to eps and its input gradient is
    // O(eps), below what a central difference can resolve.
    #[test]
    fn layer_norm_grad_check_on_random_rows(seed in any::<u64>(), rows in 1usize..4, d in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random_tensor(&mut rng, &[rows, d], 2.0),
            random_tensor(&mut rng, &[d], 1.0),
            random_tensor(&mut rng, &[d], 1.0),
        ];
        let w = random_tensor(&mut rng, &[rows, d], 1.0);
        let r = grad_check_many(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = t.constant(w.clone());
            let p = t.mul(y, w)?;
            t.sum(p)
        }, &inputs, DEFAULT_STEP, Coords::All).unwrap();
        prop_assert!(r.max_rel_error < 1e-4);
    }
}
