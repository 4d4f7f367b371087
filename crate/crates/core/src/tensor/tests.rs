use super::*;

use rand::Rng;

fn seeded_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random values kept away from zero so relu/max kinks stay generic.
fn offkink_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn analytic_square_sum() {
    let mut g = Graph::new();
    let w = g.param(vec![1.0, 2.0], vec![2]).unwrap();
    let sq = g.mul_elem(w, w).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn unused_param_has_no_grad() {
    let mut g = Graph::new();
    let w = g.param(vec![1.0], vec![1]).unwrap();
    let u = g.param(vec![5.0], vec![1]).unwrap();
    let loss = g.sum_all(w);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(u).is_none());
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let w = g.param(vec![1.0, 2.0], vec![2]).unwrap();
    assert!(g.backward(w).is_err());
}

#[test]
fn nan_in_forward_names_op() {
    let mut g = Graph::new();
    let w = g.param(vec![1e308], vec![1]).unwrap();
    let doubled = g.add(w, w).unwrap(); // overflows to inf
    let loss = g.sum_all(doubled);
    let err = g.backward(loss).unwrap_err();
    assert!(err.to_string().contains("add"), "{err}");
}

#[test]
fn grad_check_matmul_chain() {
    let shapes = vec![vec![3, 4], vec![4, 2], vec![2]];
    let x0: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| seeded_values(s.iter().product(), i as u64))
        .collect();
    let report = grad_check(
        &shapes,
        &x0,
        |g, p| {
            let h = g.matmul(p[0], p[1])?;
            let h = g.add_bias(h, p[2])?;
            let h = g.tanh(h);
            Ok(g.mean_all(h))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4);
    assert_eq!(report.skipped, 0);
}

#[test]
fn grad_check_conv_pool() {
    let shapes = vec![vec![2, 6, 3], vec![3, 3, 4]];
    let x0 = vec![
        offkink_values(2 * 6 * 3, 1),
        offkink_values(3 * 3 * 4, 2),
    ];
    let report = grad_check(
        &shapes,
        &x0,
        |g, p| {
            let c = g.conv1d(p[0], p[1])?;
            let pooled = g.global_max_pool(c)?;
            Ok(g.mean_all(pooled))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4);
}

#[test]
fn grad_check_elementwise_and_softmax() {
    let shapes = vec![vec![3, 5]];
    let x0 = vec![offkink_values(15, 3)];
    grad_check(
        &shapes,
        &x0,
        |g, p| {
            let r = g.relu(p[0]);
            let s = g.sigmoid(r);
            let sm = g.softmax(s)?;
            let sc = g.scale(sm, 3.0);
            Ok(g.mean_all(sc))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_bmm_permute_concat() {
    let shapes = vec![vec![2, 3, 4], vec![2, 3, 4]];
    let x0 = vec![seeded_values(24, 4), seeded_values(24, 5)];
    grad_check(
        &shapes,
        &x0,
        |g, p| {
            let bt = g.permute(p[1], vec![0, 2, 1])?;
            let prod = g.bmm(p[0], bt)?; // [2,3,3]
            let cat = g.concat(&[prod, prod], 2)?;
            let m = g.mean_axis(cat, 1)?;
            Ok(g.mean_all(m))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_embedding_cross_entropy() {
    let shapes = vec![vec![5, 3], vec![3, 4]];
    let x0 = vec![seeded_values(15, 6), seeded_values(12, 7)];
    grad_check(
        &shapes,
        &x0,
        |g, p| {
            let e = g.embedding_lookup(p[0], &[1, 2, 4, 1], &[2, 2])?;
            let m = g.mean_axis(e, 1)?; // [2,3]
            let logits = g.matmul(m, p[1])?;
            g.cross_entropy(logits, &[0, 3])
        },
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_pairwise_loss() {
    let shapes = vec![vec![4, 2]];
    let x0 = vec![seeded_values(8, 8)];
    let truth = seeded_values(8, 9); // generic: distances bounded away from 0
    grad_check(
        &shapes,
        &x0,
        move |g, p| g.pairwise_loss(p[0], &truth),
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_attention_block() {
    let d = 6;
    let shapes = vec![
        vec![2, 3, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
    ];
    let x0: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| seeded_values(s.iter().product(), 10 + i as u64))
        .collect();
    grad_check(
        &shapes,
        &x0,
        |g, p| {
            let out = multi_head_attention(g, p[0], p[1], p[2], p[3], p[4], 2)?;
            Ok(g.mean_all(out))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_lstm_step() {
    let (di, dh, b) = (3, 4, 2);
    let mut shapes = vec![vec![b, di], vec![b, dh], vec![b, dh]];
    for _ in 0..4 {
        shapes.push(vec![di, dh]);
        shapes.push(vec![dh, dh]);
        shapes.push(vec![dh]);
    }
    let x0: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| seeded_values(s.iter().product(), 20 + i as u64))
        .collect();
    grad_check(
        &shapes,
        &x0,
        |g, p| {
            let params = LstmParams {
                wx_i: p[3],
                wh_i: p[4],
                b_i: p[5],
                wx_f: p[6],
                wh_f: p[7],
                b_f: p[8],
                wx_o: p[9],
                wh_o: p[10],
                b_o: p[11],
                wx_g: p[12],
                wh_g: p[13],
                b_g: p[14],
            };
            let (h, c) = lstm_step(g, p[0], p[1], p[2], &params)?;
            let cat = g.concat(&[h, c], 1)?;
            Ok(g.mean_all(cat))
        },
        1e-3,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_check_negative_control() {
    // A deliberately wrong analytic gradient must be rejected.
    let x0 = vec![0.7, -0.3];
    let wrong = vec![1.0, 1.0]; // true gradient of sum(x^2) is 2x
    let res = grad_check_fn(
        |x| Ok(x.iter().map(|v| v * v).sum()),
        &wrong,
        &x0,
        1e-3,
        1e-4,
    );
    assert!(res.is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.param(seeded_values(12, 30), vec![3, 4]).unwrap();
    let sm = g.softmax(x).unwrap();
    for row in g.values(sm).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cross_entropy_perfect_prediction_near_zero() {
    let mut g = Graph::new();
    // saturated one-hot logits, margin >= 30
    let logits = g
        .param(vec![30.0, -30.0, -30.0, -30.0], vec![1, 4])
        .unwrap();
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    assert!(g.values(ce)[0] >= 0.0);
    assert!(g.values(ce)[0] < 1e-9);
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let mut g = Graph::new();
    let q = g.param(seeded_values(2 * 3 * 4, 31), vec![2, 3, 4]).unwrap();
    let k = g.param(seeded_values(2 * 3 * 4, 32), vec![2, 3, 4]).unwrap();
    let kt = g.permute(k, vec![0, 2, 1]).unwrap();
    let scores = g.bmm(q, kt).unwrap();
    let scaled = g.scale(scores, 0.5);
    let attn = g.softmax(scaled).unwrap();
    for row in g.values(attn).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn dropout_eval_identity_and_train_expectation() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
    let d = g.dropout(x, 0.4).unwrap();
    assert_eq!(d, x); // eval mode: same node, untouched

    // Train mode: E[mask * x] = x. 3-sigma binomial bound over 1e5 draws.
    let p = 0.4;
    let trials = 100_000usize;
    let mut sum = 0.0;
    let mut g = Graph::for_training(99);
    for _ in 0..trials {
        let x = g.param(vec![1.0], vec![1]).unwrap();
        let d = g.dropout(x, p).unwrap();
        sum += g.values(d)[0];
    }
    let mean = sum / trials as f64;
    let sigma = ((1.0 - p) * p).sqrt() / (1.0 - p) / (trials as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn max_pool1d_windows() {
    let mut g = Graph::new();
    // [1,6,1]: values 1..6, window 3 stride 3 -> [3, 6]
    let x = g
        .param((1..=6).map(f64::from).collect(), vec![1, 6, 1])
        .unwrap();
    let p = g.max_pool1d(x, 3, 3).unwrap();
    assert_eq!(g.values(p), &[3.0, 6.0]);
    assert_eq!(g.shape(p), &[1, 2, 1]);
}

#[test]
fn sinusoidal_encoding_shape_and_range() {
    let pe = sinusoidal_encoding(10, 8);
    assert_eq!(pe.len(), 80);
    assert!(pe.iter().all(|v| v.abs() <= 1.0));
    assert_eq!(pe[0], 0.0); // sin(0)
    assert_eq!(pe[1], 1.0); // cos(0)
    // positions are distinguishable
    assert_ne!(&pe[0..8], &pe[8..16]);
}

#[test]
fn fixed_seed_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::for_training(7);
        let w = g.param(seeded_values(6, 40), vec![2, 3]).unwrap();
        let d = g.dropout(w, 0.3).unwrap();
        let t = g.tanh(d);
        let loss = g.mean_all(t);
        let grads = g.backward(loss).unwrap();
        (g.values(loss).to_vec(), grads.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
