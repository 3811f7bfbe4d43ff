#![allow(dead_code)]

use nnh_adapt::adapt::{objective, objective_with_neighbors, AdaptConfig};
use nnh_adapt::geometry::{chain_search_from, dynamical_nnh, static_nnh, ConfidentSet, CosinePool, GeometryMode};
use nnh_adapt::model::{ModelDims, Mode, Stage, TargetModel, Upstream};
use nnh_adapt::numeric::{RealMatrix, SeededRng};
use nnh_adapt::pretrain::{smooth_labels, source_ce_loss};
use nnh_adapt::selflabel::build_epoch_cache;

const STEP: f64 = 1e-5;

pub fn random_model(dims: ModelDims, rng: &mut SeededRng) -> TargetModel<f64> {
    let mut model = TargetModel::init(dims, rng).unwrap();
    for v in model.bottleneck.bn_scale.iter_mut() {
        *v = rng.uniform(0.5, 1.5);
    }
    for v in model.bottleneck.bn_shift.iter_mut() {
        *v = rng.uniform(-0.3, 0.3);
    }
    for v in model.classifier.gain.iter_mut() {
        *v *= rng.uniform(0.5, 2.0);
    }
    model
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> RealMatrix<f64> {
    RealMatrix::from_fn(rows, cols, |_, _| rng.standard_normal())
}

fn central_difference(model: &TargetModel<f64>, index: usize, loss: &dyn Fn(&TargetModel<f64>) -> f64) -> f64 {
    let mut plus = model.clone();
    *plus.param_mut(index) += STEP;
    let mut minus = model.clone();
    *minus.param_mut(index) -= STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * STEP)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Relative error between analytic and central-difference gradients of the
/// smoothed source cross-entropy on one random micro instance.
pub fn source_ce_gradient_error(instance: u64) -> f64 {
    let mut rng = SeededRng::new(100 + instance);
    let dims = ModelDims::new(3, 5, 4, 3);
    let model = random_model(dims, &mut rng);
    let n = 6;
    let x = random_matrix(n, dims.d, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % dims.k).collect();
    let lbar: RealMatrix<f64> = smooth_labels(&labels, dims.k, 0.1).unwrap();
    let loss = |m: &TargetModel<f64>| {
        let t = m.forward(&x, Stage::Full).unwrap();
        source_ce_loss(t.probabilities().unwrap(), &lbar).unwrap()
    };
    let trace = model.forward(&x, Stage::Full).unwrap();
    let p = trace.probabilities().unwrap();
    // dL/dp = −l̄ / (n p)
    let dp = RealMatrix::from_fn(n, dims.k, |i, k| -lbar.get(i, k) / (n as f64 * p.get(i, k)));
    let analytic = model.backward(&trace, &Upstream::Probabilities(dp)).unwrap().flatten();
    let numeric: Vec<f64> = (0..model.num_params()).map(|j| central_difference(&model, j, &loss)).collect();
    relative_error(&analytic, &numeric)
}

/// Same for the adaptation objective (n_t = 12, batch 4, K = 3) with the
/// neighborhoods held at those found by the analytic pass. Panics if the
/// frozen classifier receives a nonzero gradient.
pub fn objective_gradient_error(instance: u64) -> f64 {
    let mut rng = SeededRng::new(200 + instance);
    let dims = ModelDims::new(3, 5, 4, 3);
    let mut model = random_model(dims, &mut rng);
    let xt = random_matrix(12, dims.d, &mut rng);
    let cfg = AdaptConfig {
        beta: 0.2 + rng.uniform(0.0, 0.5),
        omega_i: rng.uniform(0.3, 0.7),
        omega_in: rng.uniform(0.3, 0.7),
        eta_i: rng.uniform(0.3, 0.7),
        eta_in: rng.uniform(0.3, 0.7),
        mode: if instance.is_multiple_of(2) { GeometryMode::Nnh } else { GeometryMode::Shnnh },
        ..AdaptConfig::default()
    };
    let cache = build_epoch_cache(&model, &xt, &cfg, &mut rng.derive("cache")).unwrap();
    model.set_classifier_frozen(true);
    model.set_mode(Mode::Train);
    let batch: Vec<usize> = rng.permutation(12).into_iter().take(4).collect();
    let out = objective(&batch, &xt, &cache, &model, &cfg).unwrap();
    let neighbors = out.neighbors.clone();
    let loss = |m: &TargetModel<f64>| {
        objective_with_neighbors(&batch, &neighbors, &xt, &cache, m, &cfg)
            .unwrap()
            .loss
    };
    assert_eq!(loss(&model), out.loss);
    let analytic = out.grads.flatten();
    let classifier_params: usize = model.param_slices()[8..].iter().map(|s| s.len()).sum();
    let trainable = model.num_params() - classifier_params;
    assert!(analytic[trainable..].iter().all(|&g| g == 0.0));
    let numeric: Vec<f64> = (0..trainable).map(|j| central_difference(&model, j, &loss)).collect();
    relative_error(&analytic[..trainable], &numeric)
}

/// Exhaustive cosine nearest neighbor: smallest `1 − cos`, lowest index on
/// ties, rows in `skip` and zero rows ignored.
pub fn brute_nearest(query: &[f64], rows: &RealMatrix<f64>, skip: &dyn Fn(usize) -> bool) -> Option<usize> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y);
    let qn = dot(query, query).sqrt();
    let mut scored: Vec<(f64, usize)> = (0..rows.rows())
        .filter(|&j| !skip(j))
        .filter_map(|j| {
            let r = rows.row(j);
            let rn = dot(r, r).sqrt();
            (rn > 0.0).then(|| (1.0 - (dot(query, r) / (qn * rn)).clamp(-1.0, 1.0), j))
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.first().map(|&(_, j)| j)
}

/// Random deep-feature matrix for seed `seed`: n in [50, 500], 8 columns.
pub fn random_pool(seed: u64) -> RealMatrix<f64> {
    let mut rng = SeededRng::new(seed).derive("pool");
    let n = 50 + (rng.next_u64() % 451) as usize;
    random_matrix(n, 8, &mut rng)
}

/// Number of anchors whose static or dynamical neighbor differs from the
/// exhaustive search.
pub fn nnh_oracle_mismatches(seed: u64) -> (usize, usize) {
    let h = random_pool(seed);
    let n = h.rows();
    let mut mismatches = 0;
    let statics = static_nnh(&h).unwrap();
    for nb in &statics {
        let i = nb.anchor;
        if Some(nb.neighbor) != brute_nearest(h.row(i), &h, &|j| j == i) {
            mismatches += 1;
        }
    }
    let mut rng = SeededRng::new(seed).derive("moved");
    for i in 0..n {
        let moved: Vec<f64> = h.row(i).iter().map(|&x| x + 0.3 * rng.standard_normal()).collect();
        let got = dynamical_nnh(&moved, i, &h).unwrap().neighbor;
        if Some(got) != brute_nearest(&moved, &h, &|j| j == i) {
            mismatches += 1;
        }
    }
    (mismatches, 2 * n)
}

/// Runs chain search from every start of a random instance (n in [20, 300],
/// confident set of at least two members) and checks each hop against the
/// exhaustive search. Returns the number of starts checked.
pub fn chain_soundness(instance: u64) -> Result<usize, String> {
    let mut rng = SeededRng::new(instance).derive("chain");
    let n = 20 + (rng.next_u64() % 281) as usize;
    let h = random_matrix(n, 6, &mut rng);
    let rate = rng.uniform(0.01, 0.5);
    let mut members: Vec<bool> = (0..n).map(|_| rng.uniform(0.0, 1.0) < rate).collect();
    while members.iter().filter(|&&m| m).count() < 2 {
        let j = (rng.next_u64() % n as u64) as usize;
        members[j] = true;
    }
    let c = ConfidentSet::<f64>::from_members(members);
    let pool = CosinePool::new(&h);
    for start in 0..n {
        let r = chain_search_from(h.row(start), start, &pool, &c).map_err(|e| format!("start {start}: {e}"))?;
        if r.path.len() > n - 1 {
            return Err(format!("start {start}: {} steps for n = {n}", r.path.len()));
        }
        if !c.contains(r.home) || r.home == start {
            return Err(format!("start {start}: home {} is not a confident guide", r.home));
        }
        let mut visited = vec![false; n];
        visited[start] = true;
        let mut from = start;
        for (step, &g) in r.path.iter().enumerate() {
            let expect = brute_nearest(h.row(from), &h, &|j| visited[j]);
            if expect != Some(g) {
                return Err(format!("start {start}, step {step}: hop to {g}, oracle {expect:?}"));
            }
            if step + 1 < r.path.len() && c.contains(g) {
                return Err(format!("start {start}: passed confident sample {g}"));
            }
            visited[g] = true;
            from = g;
        }
    }
    Ok(n)
}
