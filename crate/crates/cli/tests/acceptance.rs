//! End-to-end acceptance suite. Each criterion prints a single PASS
//! line (run with `--nocapture` to see them); a failed assertion is the
//! FAIL signal. Criteria that exercise the command-line surface invoke
//! the built binary.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geotweet::augment::{kmeans, kmeans_inertia};
use geotweet::corpus::{
    self, generate_synthetic, oversample, save_corpus_jsonl, split, stratified_validation, Corpus,
    LabelField, SyntheticSpec, TweetRecord,
};
use geotweet::geo::{
    assign_region, haversine_miles, point_in_polygon, GeoPoint, Polygon, RegionKind,
};
use geotweet::models::{self, ModelConfig, Task, Variant};
use geotweet::tensor::{grad_check, grad_check_fn, Graph, OptimizerKind};
use geotweet::textprep::{normalize, NormalizeOpts};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geotweet")
}

/// Deterministic pseudo-random values kept away from zero so that
/// relu/max kinks and pool ties are not hit at the linearization point.
fn vals(n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (((i + 1) as f64) * (seed as f64 + 2.138)).sin() * 0.9;
            if x.abs() < 0.05 {
                x + 0.1 * x.signum().max(0.0).mul_add(2.0, -1.0)
            } else {
                x
            }
        })
        .collect()
}

fn spec(
    grid: (usize, usize),
    users: usize,
    posts: usize,
    locality: f64,
    sig_ratio: f64,
    days: u32,
    seed: u64,
) -> SyntheticSpec {
    SyntheticSpec {
        grid_rows: grid.0,
        grid_cols: grid.1,
        num_users: users,
        posts_per_user: posts,
        locality,
        signature_words: 12,
        shared_words: 40,
        tokens_per_post: 8,
        signature_ratio: sig_ratio,
        time_span_days: days,
        seed,
    }
}

fn mh_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Mh,
        task: Task::Zipcode,
        emb_dim: 16,
        heads: 4,
        encoders: 1,
        epochs: 6,
        batch_size: 64,
        lr: 0.01,
        max_words: 48,
        seed: 5,
        ..Default::default()
    }
}

// -- 1. autodiff correctness ------------------------------------------------

#[test]
fn criterion_01_autodiff_gradient_checks() {
    let start = Instant::now();

    // elementwise chain: add, add_bias, mul_elem, scale, relu, tanh,
    // sigmoid, sum_all
    grad_check(
        &[vec![2, 3], vec![2, 3], vec![3]],
        &[vals(6, 1), vals(6, 2), vals(3, 3)],
        |g, p| {
            let t = g.add(p[0], p[1])?;
            let t = g.add_bias(t, p[2])?;
            let t = g.mul_elem(t, p[0])?;
            let t = g.scale(t, 0.7);
            let t = g.relu(t);
            let t = g.tanh(t);
            let t = g.sigmoid(t);
            Ok(g.sum_all(t))
        },
        EPS,
        TOL,
    )
    .unwrap();

    // matmul, softmax, reshape, permute, concat, mean_axis, mean_all
    grad_check(
        &[vec![2, 3], vec![3, 4], vec![2, 4]],
        &[vals(6, 4), vals(12, 5), vals(8, 6)],
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let s = g.softmax(m)?;
            let r = g.reshape(s, vec![4, 2])?;
            let t = g.permute(r, vec![1, 0])?;
            let c = g.concat(&[t, p[2]], 1)?;
            let m = g.mean_axis(c, 0)?;
            Ok(g.mean_all(m))
        },
        EPS,
        TOL,
    )
    .unwrap();

    // batched matmul
    grad_check(
        &[vec![2, 2, 3], vec![2, 3, 2]],
        &[vals(12, 7), vals(12, 8)],
        |g, p| {
            let b = g.bmm(p[0], p[1])?;
            Ok(g.sum_all(b))
        },
        EPS,
        TOL,
    )
    .unwrap();

    // embedding lookup into fused softmax cross-entropy
    grad_check(
        &[vec![5, 4], vec![4, 3]],
        &[vals(20, 9), vals(12, 10)],
        |g, p| {
            let e = g.embedding_lookup(p[0], &[0, 2, 4, 1, 3, 2], &[2, 3])?;
            let m = g.mean_axis(e, 1)?;
            let logits = g.matmul(m, p[1])?;
            g.cross_entropy(logits, &[0, 2])
        },
        EPS,
        TOL,
    )
    .unwrap();

    // conv1d, max_pool1d, global_max_pool
    grad_check(
        &[vec![2, 6, 3], vec![2, 3, 4]],
        &[vals(36, 11), vals(24, 12)],
        |g, p| {
            let c = g.conv1d(p[0], p[1])?;
            let m = g.max_pool1d(c, 2, 2)?;
            let t = g.global_max_pool(m)?;
            Ok(g.sum_all(t))
        },
        EPS,
        TOL,
    )
    .unwrap();

    // pairwise coordinate loss
    grad_check(
        &[vec![2, 2]],
        &[vals(4, 13)],
        |g, p| g.pairwise_loss(p[0], &[0.3, -0.2, 0.5, 0.1]),
        EPS,
        TOL,
    )
    .unwrap();

    // train-mode dropout: the mask is a deterministic function of the
    // graph seed, so finite differences are valid across rebuilds
    let x0 = vals(12, 14);
    let run = |x: &[f64]| {
        let mut g = Graph::for_training(7);
        let p = g.param(x.to_vec(), vec![12])?;
        let d = g.dropout(p, 0.4)?;
        let sq = g.mul_elem(d, d)?;
        let loss = g.sum_all(sq);
        Ok((g, p, loss))
    };
    let (g, p, loss) = run(&x0).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(p).unwrap().to_vec();
    grad_check_fn(
        |x| run(x).map(|(g, _, l)| g.values(l)[0]),
        &analytic,
        &x0,
        EPS,
        TOL,
    )
    .unwrap();

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient checks took {elapsed:?}");
    println!("criterion 1 (autodiff gradient checks, tol 1e-4): PASS in {elapsed:?}");
}

// -- 2. trainability --------------------------------------------------------

#[test]
fn criterion_02_all_variants_overfit_32_samples() {
    let start = Instant::now();
    let sp = spec((2, 2), 10, 5, 1.0, 0.7, 2, 9);
    let full = generate_synthetic(&sp).unwrap();
    let batch = Corpus::from_records(full.records()[..32].to_vec()).unwrap();
    let splits = corpus::Splits {
        train: batch.clone(),
        valid: Corpus::from_records(vec![]).unwrap(),
        test: Corpus::from_records(vec![]).unwrap(),
    };

    for variant in [
        Variant::WordCnnReg,
        Variant::Cch,
        Variant::CchA,
        Variant::Mh,
        Variant::MhC,
    ] {
        let mut cfg = ModelConfig {
            variant,
            task: if variant.is_regression() {
                Task::Coords
            } else {
                Task::Zipcode
            },
            kernels: vec![2, 3],
            channels: 16,
            lr: if variant.is_regression() { 0.01 } else { 0.05 },
            // the pairwise-distance gradient does not vanish at the
            // optimum, so the regression variants need a decayed step
            // size to settle; cross-entropy converges without decay
            lr_decay: if variant.is_regression() { 0.97 } else { 1.0 },
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            epochs: 0,
            encoders: 1,
            emb_dim: 16,
            heads: 4,
            max_words: 8,
            max_chars: 60,
            char_emb_dim: 8,
            seed: 3,
            ..Default::default()
        };
        cfg.augment.num_clusters = 2;
        cfg.augment.nc_samples = 3;

        cfg.epochs = 200; // batch_size == corpus size: one step per epoch
        let fitted = models::train(&cfg, &splits, None).unwrap();
        // per-epoch training loss is recorded before that epoch's update
        let initial = fitted.history.first().unwrap().train_loss;
        let final_loss = fitted.history.last().unwrap().train_loss;
        assert!(
            final_loss < 0.01 * initial,
            "{variant:?}: loss {initial:.4} -> {final_loss:.4} misses 1% target"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "overfit suite took {elapsed:?}");
    println!("criterion 2 (five variants overfit 32 samples in 200 steps): PASS in {elapsed:?}");
}

// -- 3. separable-signal accuracy -------------------------------------------

/// Bag-of-words multinomial logistic regression trained with plain
/// hand-written SGD; independent of the tape-based autodiff.
fn logistic_oracle_accuracy(splits: &corpus::Splits) -> f64 {
    let opts = NormalizeOpts {
        max_words: 64,
        stem: false,
        stopwords: Default::default(),
    };
    let mut vocab = std::collections::BTreeMap::new();
    let mut labels = std::collections::BTreeMap::new();
    for r in splits.train.records() {
        for t in normalize(&r.text, &opts).tokens {
            let next = vocab.len();
            vocab.entry(t).or_insert(next);
        }
        let next = labels.len();
        labels.entry(r.zipcode.clone().unwrap()).or_insert(next);
    }
    let (v, k) = (vocab.len(), labels.len());
    let encode = |r: &TweetRecord| -> Vec<usize> {
        normalize(&r.text, &opts)
            .tokens
            .iter()
            .filter_map(|t| vocab.get(t).copied())
            .collect()
    };
    let mut w = vec![0.0f64; k * v];
    let mut b = vec![0.0f64; k];
    let scores = |w: &[f64], b: &[f64], ids: &[usize]| -> Vec<f64> {
        let mut s = b.to_vec();
        for &j in ids {
            for c in 0..k {
                s[c] += w[c * v + j];
            }
        }
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        s.iter().map(|x| (x - m).exp() / z).collect()
    };
    for _ in 0..20 {
        for r in splits.train.records() {
            let ids = encode(r);
            let y = labels[r.zipcode.as_ref().unwrap()];
            let p = scores(&w, &b, &ids);
            for c in 0..k {
                let g = p[c] - if c == y { 1.0 } else { 0.0 };
                b[c] -= 0.1 * g;
                for &j in &ids {
                    w[c * v + j] -= 0.1 * g;
                }
            }
        }
    }
    let mut hit = 0usize;
    for r in splits.valid.records() {
        let p = scores(&w, &b, &encode(r));
        let pred = (0..k).max_by(|&a, &c| p[a].partial_cmp(&p[c]).unwrap()).unwrap();
        if labels[r.zipcode.as_ref().unwrap()] == pred {
            hit += 1;
        }
    }
    hit as f64 / splits.valid.len() as f64
}

#[test]
fn criterion_03_mh_separable_signal_accuracy() {
    let start = Instant::now();
    let sp = spec((2, 2), 100, 20, 1.0, 0.6, 7, 42);
    let full = generate_synthetic(&sp).unwrap();
    let splits = split(&full, (0.8, 0.1, 0.1), 42, Some(LabelField::Zipcode)).unwrap();

    let oracle = logistic_oracle_accuracy(&splits);
    assert!(
        oracle >= 0.95,
        "bag-of-words oracle only reaches {oracle:.3}; corpus not separable"
    );

    let model = models::train(&mh_config(), &splits, None).unwrap();
    let acc = model.evaluate(&splits.valid).unwrap().accuracy.unwrap();
    assert!(acc >= 0.95, "MH validation accuracy {acc:.3} < 0.95");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "criterion 3 took {elapsed:?}");
    println!(
        "criterion 3 (MH >= 95% on separable corpus; oracle {oracle:.3}, MH {acc:.3}): \
         PASS in {elapsed:?}"
    );
}

// -- 4. MH-U directional gain -----------------------------------------------

/// Ambiguous single tweets from frequent posters: signature tokens are
/// rare, so single-tweet text underdetermines the region while the
/// 72-hour user history pools enough signal to recover it.
fn ambiguous_spec() -> SyntheticSpec {
    spec((2, 2), 50, 30, 0.9, 0.15, 2, 21)
}

fn ambiguous_cfg(variant: Variant) -> ModelConfig {
    let mut cfg = mh_config();
    cfg.variant = variant;
    cfg.augment.time_window_hours = 72.0;
    cfg.augment.k_tokens = 12;
    cfg.augment.sample_frac = 1.0;
    cfg
}

#[test]
fn criterion_04_mh_u_beats_mh_on_ambiguous_corpus() {
    let full = generate_synthetic(&ambiguous_spec()).unwrap();
    let splits = split(&full, (0.8, 0.1, 0.1), 21, Some(LabelField::Zipcode)).unwrap();

    let mh = models::train(&ambiguous_cfg(Variant::Mh), &splits, None).unwrap();
    let acc_mh = mh.evaluate(&splits.valid).unwrap().accuracy.unwrap();
    let mhu = models::train(&ambiguous_cfg(Variant::MhU), &splits, None).unwrap();
    let acc_mhu = mhu.evaluate(&splits.valid).unwrap().accuracy.unwrap();

    assert!(
        acc_mhu >= acc_mh + 0.05,
        "MH_U {acc_mhu:.3} does not exceed MH {acc_mh:.3} by 5 points"
    );
    println!(
        "criterion 4 (MH_U gain on ambiguous corpus; MH {acc_mh:.3}, MH_U {acc_mhu:.3}): PASS"
    );
}

// -- helpers for binary-driven criteria -------------------------------------

fn write_train_toml(dir: &Path, corpus: &Path, model_toml: &str) -> std::path::PathBuf {
    let path = dir.join("train.toml");
    let text = format!(
        "[data]\ncorpus = {:?}\nratios = [0.8, 0.1, 0.1]\nstratify = true\n\n{model_toml}",
        corpus.to_str().unwrap()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_ablation_csv(path: &Path) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let v: f64 = it.next().unwrap().parse().unwrap();
            let acc: f64 = it.next().unwrap().parse().unwrap();
            (v, acc)
        })
        .collect()
}

// -- 5. cluster-count inverted-U --------------------------------------------

#[test]
fn criterion_05_num_clusters_inverted_u() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sp = SyntheticSpec {
        signature_words: 10,
        shared_words: 30,
        ..spec((2, 2), 40, 25, 0.85, 0.2, 7, 2)
    };
    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus_jsonl(&generate_synthetic(&sp).unwrap(), &corpus_path).unwrap();
    let config = write_train_toml(
        dir.path(),
        &corpus_path,
        "[model]\nvariant = \"mh_c\"\ntask = \"zipcode\"\nemb_dim = 16\nheads = 4\n\
         encoders = 1\nepochs = 4\nbatch_size = 64\nlr = 0.01\nmax_words = 10\nseed = 7\n\n\
         [model.augment]\nnc_samples = 5\n",
    );
    let out = dir.path().join("ablate");
    run_ok(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--study",
        "num-clusters",
        "--grid",
        "1,4,300",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = read_ablation_csv(&out.join("ablate.csv"));
    assert_eq!(rows.len(), 3);
    let max_acc = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    assert!(
        rows[0].1 < max_acc,
        "acc(k=1) = {:.3} is not below the peak {max_acc:.3}",
        rows[0].1
    );
    assert!(
        rows[2].1 < max_acc,
        "acc(k=40) = {:.3} is not below the peak {max_acc:.3}",
        rows[2].1
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 1200, "cluster sweep took {elapsed:?}");
    println!(
        "criterion 5 (num_clusters inverted-U {:?}): PASS in {elapsed:?}",
        rows.iter().map(|r| (r.0, (r.1 * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    );
}

// -- 6. user-fraction ablation shape ----------------------------------------

#[test]
fn criterion_06_user_fraction_minimum_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus_jsonl(&generate_synthetic(&ambiguous_spec()).unwrap(), &corpus_path).unwrap();
    let config = write_train_toml(
        dir.path(),
        &corpus_path,
        "[model]\nvariant = \"mh_u\"\ntask = \"zipcode\"\nemb_dim = 16\nheads = 4\n\
         encoders = 1\nepochs = 6\nbatch_size = 64\nlr = 0.01\nmax_words = 48\nseed = 5\n\n\
         [model.augment]\ntime_window_hours = 72.0\nk_tokens = 12\n",
    );
    let out = dir.path().join("ablate");
    run_ok(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--study",
        "user-dict-frac",
        "--grid",
        "0,0.5,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows = read_ablation_csv(&out.join("ablate.csv"));
    assert_eq!(rows.len(), 3);
    assert!(
        rows[0].1 < rows[1].1 && rows[0].1 < rows[2].1,
        "acc(frac=0) = {:.3} is not the minimum of {rows:?}",
        rows[0].1
    );
    println!(
        "criterion 6 (user-dict fraction minimum at 0: {:?}): PASS",
        rows.iter().map(|r| (r.0, (r.1 * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    );
}

// -- 7. sampling laws --------------------------------------------------------

#[test]
fn criterion_07_sampling_laws_hold_on_randomized_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..1000u64 {
        let k = rng.gen_range(2..=5);
        let mut records = Vec::new();
        for c in 0..k {
            let n = rng.gen_range(1..=12);
            for i in 0..n {
                records.push(TweetRecord {
                    id: format!("t{c}-{i}"),
                    text: format!("w{c} w{i}"),
                    username: format!("u{}", i % 3),
                    created_at: i as i64 + 1,
                    lon: None,
                    lat: None,
                    zipcode: Some(format!("c{c}")),
                    neighborhood: Some(format!("c{c}")),
                });
            }
        }
        let corpus = Corpus::from_records(records).unwrap();
        let counts = corpus.class_counts(LabelField::Zipcode).unwrap();
        let n_max = *counts.values().max().unwrap();

        // s = 0 is the identity
        let same = oversample(&corpus, LabelField::Zipcode, 0.0, trial).unwrap();
        assert_eq!(same.len(), corpus.len());
        assert_eq!(same.ids(), corpus.ids());

        // s = 1 balances every class to the majority count
        let balanced = oversample(&corpus, LabelField::Zipcode, 1.0, trial).unwrap();
        for (_, n) in balanced.class_counts(LabelField::Zipcode).unwrap() {
            assert_eq!(n, n_max);
        }

        // stratified validation equalizes counts at the class minimum
        let floor = *counts.values().min().unwrap();
        let strat = stratified_validation(&corpus, LabelField::Zipcode, trial).unwrap();
        for (_, n) in strat.class_counts(LabelField::Zipcode).unwrap() {
            assert_eq!(n, floor);
        }
    }
    println!("criterion 7 (oversample endpoints + stratified validation, 1000 trials): PASS");
}

// -- 8. geospatial oracle equivalence ---------------------------------------

/// Winding-number membership test via summed signed angles.
fn winding_oracle(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let mut total = 0.0f64;
    for w in ring.windows(2) {
        let (ax, ay) = (w[0].lon - p.lon, w[0].lat - p.lat);
        let (bx, by) = (w[1].lon - p.lon, w[1].lat - p.lat);
        total += (ax * by - ay * bx).atan2(ax * bx + ay * by);
    }
    total.abs() > std::f64::consts::PI
}

fn dist_to_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.lon - a.lon) * dx + (p.lat - a.lat) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.lon + t * dx, a.lat + t * dy);
    ((p.lon - cx).powi(2) + (p.lat - cy).powi(2)).sqrt()
}

#[test]
fn criterion_08_geospatial_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);

    // point_in_polygon vs winding number on random star polygons
    for _ in 0..50 {
        let (cx, cy) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let n = rng.gen_range(5..16);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let mut ring: Vec<GeoPoint> = angles
            .iter()
            .map(|&a| {
                let r = rng.gen_range(0.5..1.5);
                GeoPoint::new(cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        ring.push(ring[0]);
        let poly = Polygon {
            outer: ring.clone(),
            holes: vec![],
        };
        for _ in 0..1000 {
            let p = GeoPoint::new(cx + rng.gen_range(-2.0..2.0), cy + rng.gen_range(-2.0..2.0));
            let boundary = ring
                .windows(2)
                .map(|w| dist_to_segment(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            if boundary < 1e-6 {
                continue; // boundary band excluded
            }
            assert_eq!(
                point_in_polygon(p, &poly),
                winding_oracle(p, &ring),
                "disagreement at ({}, {})",
                p.lon,
                p.lat
            );
        }
    }

    // assign_region reproduces generator ground truth on 10k points
    let sp = spec((5, 4), 450, 25, 1.0, 0.5, 7, 314);
    let corpus = generate_synthetic(&sp).unwrap();
    assert!(corpus.len() >= 10_000, "only {} points", corpus.len());
    let regions = corpus::synthetic_regions(&sp, RegionKind::Zipcode);
    for r in &corpus.records()[..10_000] {
        let got = assign_region(r.point().unwrap(), &regions);
        assert_eq!(got, r.zipcode.as_deref(), "tweet {}", r.id);
    }

    // haversine vs spherical law of cosines within 0.1%
    let mut checked = 0usize;
    while checked < 1000 {
        let p = GeoPoint::new(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0));
        let q = GeoPoint::new(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0));
        let hav = haversine_miles(p, q);
        if hav < 50.0 {
            continue; // law of cosines is numerically unreliable near zero
        }
        let (f1, f2) = (p.lat.to_radians(), q.lat.to_radians());
        let dl = (q.lon - p.lon).to_radians();
        let loc = 3958.8 * (f1.sin() * f2.sin() + f1.cos() * f2.cos() * dl.cos()).clamp(-1.0, 1.0).acos();
        assert!(
            (hav - loc).abs() / loc < 1e-3,
            "haversine {hav} vs law-of-cosines {loc}"
        );
        checked += 1;
    }
    println!("criterion 8 (point-in-polygon, spatial join, haversine oracles): PASS");
}

// -- 9. kmeans properties ----------------------------------------------------

#[test]
fn criterion_09_kmeans_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let points: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    // inertia is non-increasing over Lloyd iterations
    let mut prev = f64::INFINITY;
    for iters in 0..=8 {
        let (centroids, assignments) = kmeans(&points, 4, 7, iters).unwrap();
        let inertia = kmeans_inertia(&points, &centroids, &assignments);
        assert!(
            inertia <= prev + 1e-9,
            "inertia rose from {prev} to {inertia} at iteration {iters}"
        );
        prev = inertia;
    }

    // exact recovery of two blobs separated by 10 sigma
    let sigma = 0.05;
    let blob = |cx: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..50)
            .map(|_| {
                vec![
                    cx + rng.gen_range(-sigma..sigma),
                    rng.gen_range(-sigma..sigma),
                ]
            })
            .collect()
    };
    let mut pts = blob(0.0, &mut rng);
    pts.extend(blob(10.0 * sigma, &mut rng));
    let (_, assignments) = kmeans(&pts, 2, 11, 100).unwrap();
    let first = assignments[0];
    assert!(assignments[..50].iter().all(|&a| a == first));
    assert!(assignments[50..].iter().all(|&a| a != first));

    // k = 1 centroid is the mean
    let (centroids, _) = kmeans(&points, 1, 5, 100).unwrap();
    for d in 0..3 {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / points.len() as f64;
        assert!((centroids[0][d] - mean).abs() < 1e-9);
    }
    println!("criterion 9 (kmeans inertia, blob recovery, k=1 mean): PASS");
}

// -- 10. determinism ---------------------------------------------------------

#[test]
fn criterion_10_train_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec((2, 2), 30, 10, 1.0, 0.6, 7, 1);
    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus_jsonl(&generate_synthetic(&sp).unwrap(), &corpus_path).unwrap();
    let config = write_train_toml(
        dir.path(),
        &corpus_path,
        "[model]\nvariant = \"mh\"\ntask = \"zipcode\"\nemb_dim = 16\nheads = 4\n\
         encoders = 1\nepochs = 2\nbatch_size = 64\nlr = 0.01\ndropout = 0.1\n\
         max_words = 10\nseed = 5\n",
    );
    for out in ["a", "b"] {
        run_ok(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]);
    }
    for file in ["checkpoint.json", "history.jsonl", "report.json", "report.txt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
    println!("criterion 10 (byte-identical checkpoints and reports): PASS");
}
