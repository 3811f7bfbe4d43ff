//! Target adaptation: semantic fusion, information-maximization and
//! self-supervised losses over nearest neighborhoods, and the epoch loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chain_search_from, dynamical_nnh_in, nearest_confident, ConfidentRule, CosinePool, GeometryMode};
use crate::model::{softmax_backward, BatchStats, Gradients, Mode, Sgd, TargetModel};
use crate::numeric::{RealMatrix, Scalar, SeededRng};
use crate::pretrain::LOG_EPS;
use crate::selflabel::{build_epoch_cache, home_or_nearest, AuxiliaryCache};

/// Learning-rate schedule over the global iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 + gamma · t / t_max)^(−power)`.
    Decay { gamma: f64, power: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Decay { gamma, power } => {
                let t = iteration as f64 / total.max(1) as f64;
                base * (1.0 + gamma * t).powf(-power)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub beta: f64,
    pub alpha: f64,
    pub delta: f64,
    /// Read `delta` as a variance instead of a standard deviation.
    pub delta_is_variance: bool,
    pub omega_i: f64,
    pub omega_in: f64,
    pub eta_i: f64,
    pub eta_in: f64,
    /// Include the information-maximization term.
    pub use_im: bool,
    pub epochs: usize,
    /// Iterations per epoch; `None` means one pass over the target set.
    pub iters_per_epoch: Option<usize>,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub mode: GeometryMode,
    pub seed: u64,
    pub eq5_literal_min: bool,
    pub eq11_literal_min: bool,
    pub kmeans_rounds: usize,
    pub confident_rule: ConfidentRule,
    /// Reach the home sample through guiding samples; otherwise jump to the
    /// nearest confident sample.
    pub chain_search: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            alpha: 0.85,
            delta: 0.15,
            delta_is_variance: false,
            omega_i: 0.5,
            omega_in: 0.5,
            eta_i: 0.5,
            eta_in: 0.5,
            use_im: true,
            epochs: 15,
            iters_per_epoch: None,
            batch: 64,
            lr: 0.01,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            mode: GeometryMode::Nnh,
            seed: 2020,
            eq5_literal_min: false,
            eq11_literal_min: false,
            kmeans_rounds: 1,
            confident_rule: ConfidentRule::Intersection,
            chain_search: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let finite = [
            ("beta", self.beta),
            ("alpha", self.alpha),
            ("delta", self.delta),
            ("omega_i", self.omega_i),
            ("omega_in", self.omega_in),
            ("eta_i", self.eta_i),
            ("eta_in", self.eta_in),
            ("lr", self.lr),
            ("momentum", self.momentum),
        ];
        if let Some((name, v)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return bad(format!("{name} = {v} is not finite"));
        }
        if self.beta < 0.0 {
            return bad(format!("beta = {} < 0", self.beta));
        }
        if self.delta < 0.0 {
            return bad(format!("delta = {} < 0", self.delta));
        }
        if self.omega_i < 0.0 || self.omega_in < 0.0 || self.omega_i + self.omega_in <= 0.0 {
            return bad("fusion weights must be non-negative with a positive sum".into());
        }
        if self.eta_i < 0.0 || self.eta_in < 0.0 {
            return bad("self-supervision weights must be non-negative".into());
        }
        if self.batch < 2 {
            return bad(format!("batch = {} < 2", self.batch));
        }
        if self.lr <= 0.0 {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} not in [0, 1)", self.momentum));
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iters_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// Standard deviation of the λ draws.
    pub fn lambda_std(&self) -> f64 {
        if self.delta_is_variance {
            self.delta.sqrt()
        } else {
            self.delta
        }
    }
}

/// `P̂ = ω_i P_i + ω_in P_in`, not renormalized.
pub fn fuse_probs<S: Scalar>(p_i: &RealMatrix<S>, p_in: &RealMatrix<S>, omega_i: f64, omega_in: f64) -> Result<RealMatrix<S>> {
    if p_i.shape() != p_in.shape() {
        return Err(Error::ShapeMismatch(format!("anchor {:?} vs neighbor {:?}", p_i.shape(), p_in.shape())));
    }
    let (wi, wn) = (S::lit(omega_i), S::lit(omega_in));
    let data = p_i.data().iter().zip(p_in.data()).map(|(&a, &b)| wi * a + wn * b).collect();
    RealMatrix::new(p_i.rows(), p_i.cols(), data)
}

fn clamped_ln<S: Scalar>(x: S) -> S {
    x.max(S::lit(LOG_EPS)).ln()
}

/// Mean per-row entropy of `P̂` plus `Σ_k ϱ_k log ϱ_k` of the batch marginal.
pub fn im_loss<S: Scalar>(fused: &RealMatrix<S>) -> Result<S> {
    Ok(im_loss_grad(fused)?.0)
}

/// `im_loss` and its gradient with respect to `P̂`.
pub fn im_loss_grad<S: Scalar>(fused: &RealMatrix<S>) -> Result<(S, RealMatrix<S>)> {
    let (n, k) = fused.shape();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(i) = fused.iter_rows().position(|r| !(r.iter().copied().sum::<S>() > S::zero())) {
        return Err(Error::InvalidInput(format!("fused row {i} has non-positive sum")));
    }
    let nn = S::count(n);
    let eps = S::lit(LOG_EPS);
    // d/dx of x·ln max(x, eps)
    let dxlnx = |x: S| if x > eps { x.ln() + S::one() } else { eps.ln() };
    let rho: Vec<S> = fused.col_sums().into_iter().map(|s| s / nn).collect();
    let entropy = fused.data().iter().fold(S::zero(), |acc, &p| acc - p * clamped_ln(p)) / nn;
    let diversity = rho.iter().fold(S::zero(), |acc, &r| acc + r * clamped_ln(r));
    let mut grad = RealMatrix::zeros(n, k);
    for i in 0..n {
        for c in 0..k {
            grad.set(i, c, (dxlnx(rho[c]) - dxlnx(fused.get(i, c))) / nn);
        }
    }
    Ok((entropy + diversity, grad))
}

fn mean_ce_grad<S: Scalar>(p: &RealMatrix<S>, labels: &[usize], weight: S) -> (S, RealMatrix<S>) {
    let nn = S::count(p.rows());
    let eps = S::lit(LOG_EPS);
    let mut loss = S::zero();
    let mut grad = RealMatrix::zeros(p.rows(), p.cols());
    for (i, &y) in labels.iter().enumerate() {
        let py = p.get(i, y);
        loss = loss - clamped_ln(py);
        if py > eps {
            grad.set(i, y, -weight / (nn * py));
        }
    }
    (weight * loss / nn, grad)
}

/// `η_i·CE(P_i, ȳ) + η_in·CE(P_in, ȳ)`, both averaged over the batch.
pub fn ss_loss<S: Scalar>(p_i: &RealMatrix<S>, p_in: &RealMatrix<S>, pseudo: &[usize], eta_i: f64, eta_in: f64) -> Result<S> {
    Ok(ss_loss_grad(p_i, p_in, pseudo, eta_i, eta_in)?.0)
}

/// `ss_loss` and its gradients with respect to `P_i` and `P_in`.
pub fn ss_loss_grad<S: Scalar>(
    p_i: &RealMatrix<S>,
    p_in: &RealMatrix<S>,
    pseudo: &[usize],
    eta_i: f64,
    eta_in: f64,
) -> Result<(S, RealMatrix<S>, RealMatrix<S>)> {
    if p_i.shape() != p_in.shape() || pseudo.len() != p_i.rows() {
        return Err(Error::ShapeMismatch("anchor, neighbor and pseudo-label counts differ".into()));
    }
    if p_i.rows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(&y) = pseudo.iter().find(|&&y| y >= p_i.cols()) {
        return Err(Error::InvalidInput(format!("pseudo-label {y} outside [0, {})", p_i.cols())));
    }
    let (li, gi) = mean_ce_grad(p_i, pseudo, S::lit(eta_i));
    let (ln, gn) = mean_ce_grad(p_in, pseudo, S::lit(eta_in));
    Ok((li + ln, gi, gn))
}

/// Anchor and neighbor outputs of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs<S> {
    pub p_i: RealMatrix<S>,
    pub p_in: RealMatrix<S>,
    pub fused: RealMatrix<S>,
    pub pseudo: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<S> {
    pub loss: S,
    pub l_im: S,
    pub l_ss: S,
    pub grads: Gradients<S>,
    pub outputs: BatchOutputs<S>,
    /// Neighbor (or home) index per anchor.
    pub neighbors: Vec<usize>,
    /// Statistics of the stacked anchor + neighbor normalization batch.
    pub stats: BatchStats<S>,
}

/// Neighbor of each anchor, searched with the anchor's current deep feature
/// over the cached features of the epoch.
pub fn find_neighbors<S: Scalar>(
    h_anchor: &RealMatrix<S>,
    batch: &[usize],
    cache: &AuxiliaryCache<S>,
    cfg: &AdaptConfig,
) -> Result<Vec<usize>> {
    let pool = CosinePool::new(&cache.hbar);
    batch
        .iter()
        .enumerate()
        .map(|(row, &anchor)| {
            let h = h_anchor.row(row);
            match (cfg.mode, &cache.confident) {
                (GeometryMode::Shnnh, Some(c)) if cfg.chain_search => {
                    home_or_nearest(chain_search_from(h, anchor, &pool, c).map(|r| r.home), h, anchor, &pool)
                }
                (GeometryMode::Shnnh, Some(c)) => home_or_nearest(nearest_confident(h, anchor, &pool, c), h, anchor, &pool),
                _ => Ok(dynamical_nnh_in(h, anchor, &pool)?.neighbor),
            }
        })
        .collect()
}

/// `L = L_im + β L_ss` on one batch and its gradients with respect to the
/// extractor and bottleneck.
pub fn objective<S: Scalar>(
    batch: &[usize],
    xt: &RealMatrix<S>,
    cache: &AuxiliaryCache<S>,
    model: &TargetModel<S>,
    cfg: &AdaptConfig,
) -> Result<ObjectiveOutput<S>> {
    let x = xt.select_rows(batch);
    let (h, _) = model.extract(&x);
    let neighbors = find_neighbors(&h, batch, cache, cfg)?;
    objective_with_neighbors(batch, &neighbors, xt, cache, model, cfg)
}

/// [`objective`] with the neighborhoods held fixed.
pub fn objective_with_neighbors<S: Scalar>(
    batch: &[usize],
    neighbors: &[usize],
    xt: &RealMatrix<S>,
    cache: &AuxiliaryCache<S>,
    model: &TargetModel<S>,
    cfg: &AdaptConfig,
) -> Result<ObjectiveOutput<S>> {
    if batch.is_empty() || neighbors.len() != batch.len() {
        return Err(Error::InvalidInput("batch and neighbor lists must be nonempty and equal length".into()));
    }
    if let Some(&i) = batch.iter().chain(neighbors).find(|&&i| i >= cache.len() || i >= xt.rows()) {
        return Err(Error::InvalidInput(format!("sample index {i} out of range")));
    }
    if xt.cols() != model.dims().d {
        return Err(Error::ShapeMismatch(format!("target width {} vs model input {}", xt.cols(), model.dims().d)));
    }
    let nb = batch.len();
    let x = xt.select_rows(batch);
    let (h_anchor, ext) = model.extract(&x);
    let h = h_anchor.vstack(&cache.hbar.select_rows(neighbors))?;
    let (b, bn) = model.bottleneck_forward(&h, Mode::Train)?;
    let p = crate::numeric::softmax_rows(&model.classify(&b));
    let p_i = p.slice_rows(0, nb);
    let p_in = p.slice_rows(nb, 2 * nb);
    let pseudo: Vec<usize> = batch.iter().map(|&i| cache.pseudo[i]).collect();

    let fused = fuse_probs(&p_i, &p_in, cfg.omega_i, cfg.omega_in)?;
    let (l_im, d_fused) = im_loss_grad(&fused)?;
    let (l_ss, d_ss_i, d_ss_in) = ss_loss_grad(&p_i, &p_in, &pseudo, cfg.eta_i, cfg.eta_in)?;
    let beta = S::lit(cfg.beta);
    let im_w = if cfg.use_im { S::one() } else { S::zero() };
    let loss = im_w * l_im + beta * l_ss;

    let (wi, wn) = (S::lit(cfg.omega_i), S::lit(cfg.omega_in));
    let mut dp = RealMatrix::zeros(2 * nb, p.cols());
    for r in 0..nb {
        for c in 0..p.cols() {
            let df = im_w * d_fused.get(r, c);
            dp.set(r, c, wi * df + beta * d_ss_i.get(r, c));
            dp.set(nb + r, c, wn * df + beta * d_ss_in.get(r, c));
        }
    }
    let dv = softmax_backward(&p, &dp);
    let (_, db) = model.classifier_backward(&b, &dv);
    let (bottleneck, dh) = model.bottleneck_backward(&h, &bn, &db);
    let extractor = model.extractor_backward(&ext, &dh.slice_rows(0, nb));
    let mut grads = Gradients::zeros(model.dims());
    grads.extractor = extractor;
    grads.bottleneck = bottleneck;
    let stats = bn.stats.clone().expect("train-mode pass records statistics");
    Ok(ObjectiveOutput {
        loss,
        l_im,
        l_ss,
        grads,
        outputs: BatchOutputs {
            p_i,
            p_in,
            fused,
            pseudo,
        },
        neighbors: neighbors.to_vec(),
        stats,
    })
}

/// Per-epoch history row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_im: f64,
    pub l_ss: f64,
    /// Accuracy of the epoch's fused pseudo-labels (labels supplied only).
    pub pseudo_accuracy: Option<f64>,
    /// Eval-mode accuracy after the epoch (labels supplied only).
    pub target_accuracy: Option<f64>,
    /// Size of the confident set, SHNNH only.
    pub confident: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome<S> {
    pub model: TargetModel<S>,
    pub history: Vec<EpochRecord>,
    /// Eval-mode accuracy of the model before adaptation (labels supplied only).
    pub initial_accuracy: Option<f64>,
}

/// Writes the history as CSV; missing accuracies are left blank.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let rows = std::iter::once(["epoch", "l_total", "l_im", "l_ss", "pseudo_accuracy", "target_accuracy"].map(String::from))
        .chain(history.iter().map(|r| {
            [
                r.epoch.to_string(),
                r.l_total.to_string(),
                r.l_im.to_string(),
                r.l_ss.to_string(),
                opt(r.pseudo_accuracy),
                opt(r.target_accuracy),
            ]
        }));
    for row in rows {
        w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Eval-mode predictions; no neighborhoods are involved.
pub fn predict<S: Scalar>(model: &TargetModel<S>, x: &RealMatrix<S>) -> Result<Vec<usize>> {
    model.with_mode(Mode::Eval).predict(x)
}

/// Runs the epoch loop from a source model. `labels` are used for reporting
/// only. On a non-finite loss the model from the start of the failing epoch is
/// written to `abort_checkpoint` (when given) and the error is returned.
pub fn adapt_loop<S: Scalar>(
    source: &TargetModel<S>,
    xt: &RealMatrix<S>,
    labels: Option<&[usize]>,
    cfg: &AdaptConfig,
    abort_checkpoint: Option<&Path>,
) -> Result<AdaptOutcome<S>> {
    cfg.validate()?;
    let dims = source.dims();
    if xt.cols() != dims.d {
        return Err(Error::ShapeMismatch(format!("target width {} vs model input {}", xt.cols(), dims.d)));
    }
    if xt.rows() < 2 {
        return Err(Error::InvalidInput("adaptation needs at least 2 target samples".into()));
    }
    if let Some(l) = labels {
        if l.len() != xt.rows() {
            return Err(Error::ShapeMismatch(format!("{} labels for {} samples", l.len(), xt.rows())));
        }
    }
    let mut model = source.clone();
    model.set_classifier_frozen(true);
    model.set_mode(Mode::Train);
    let initial_accuracy = labels.map(|l| predict(&model, xt).map(|p| accuracy(&p, l))).transpose()?;
    let n = xt.rows();
    let iters = cfg.iters_per_epoch.unwrap_or(n.div_ceil(cfg.batch));
    let total = iters * cfg.epochs;
    let root = SeededRng::new(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 1..=cfg.epochs {
        let epoch_start = model.clone();
        let fail = |iteration: usize| -> Error {
            if let Some(path) = abort_checkpoint {
                if let Err(e) = epoch_start.with_mode(Mode::Eval).save_checkpoint(path) {
                    log::error!("could not save checkpoint after failure: {e}");
                }
            }
            Error::NonFiniteLoss { epoch, iteration }
        };
        let cache = build_epoch_cache(&model, xt, cfg, &mut root.derive(&format!("pseudo-labels-{epoch}")))?;
        let mut order_rng = root.derive(&format!("batches-{epoch}"));
        let mut order = Vec::new();
        let (mut sum_total, mut sum_im, mut sum_ss) = (0.0, 0.0, 0.0);
        for iteration in 0..iters {
            let start = iteration * cfg.batch;
            while order.len() < start + cfg.batch.min(n) {
                order.extend(order_rng.permutation(n));
            }
            let end = if cfg.iters_per_epoch.is_none() { (start + cfg.batch).min(n) } else { start + cfg.batch.min(n) };
            let batch = &order[start..end];
            let out = objective(batch, xt, &cache, &model, cfg)?;
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(fail(iteration));
            }
            model.update_running_stats(&out.stats);
            opt.step(&mut model, &out.grads, cfg.lr_schedule.rate(cfg.lr, global, total))?;
            if !model.is_finite() {
                return Err(fail(iteration));
            }
            global += 1;
            sum_total += out.loss.as_f64();
            sum_im += out.l_im.as_f64();
            sum_ss += out.l_ss.as_f64();
        }
        let m = iters as f64;
        let record = EpochRecord {
            epoch,
            l_total: sum_total / m,
            l_im: sum_im / m,
            l_ss: sum_ss / m,
            pseudo_accuracy: labels.map(|l| accuracy(&cache.pseudo, l)),
            target_accuracy: labels.map(|l| predict(&model, xt).map(|p| accuracy(&p, l))).transpose()?,
            confident: cache.confident.as_ref().map(|c| c.len()),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (im {:.5}, ss {:.5}) pseudo {:?} acc {:?}",
            record.l_total,
            record.l_im,
            record.l_ss,
            record.pseudo_accuracy,
            record.target_accuracy
        );
        history.push(record);
    }
    model.set_mode(Mode::Eval);
    Ok(AdaptOutcome {
        model,
        history,
        initial_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn m(rows: &[&[f64]]) -> RealMatrix<f64> {
        RealMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn fusion_cases() {
        let p = m(&[&[0.7, 0.3], &[0.1, 0.9]]);
        let q = m(&[&[0.2, 0.8], &[0.5, 0.5]]);
        assert_eq!(fuse_probs(&p, &p, 0.5, 0.5).unwrap(), p);
        assert_eq!(fuse_probs(&p, &q, 0.5, 0.0).unwrap(), p.scale(0.5));
        for row in fuse_probs(&p, &q, 0.5, 0.5).unwrap().iter_rows() {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
        }
        assert!(fuse_probs(&p, &m(&[&[1.0, 0.0]]), 0.5, 0.5).is_err());
    }

    #[test]
    fn im_loss_extremes() {
        let k = 4;
        let uniform = RealMatrix::from_fn(5, k, |_, _| 0.25f64);
        assert!(im_loss(&uniform).unwrap().abs() < 1e-9);
        let distinct = RealMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!((im_loss(&distinct).unwrap() + (k as f64).ln()).abs() < 1e-9);
        let collapsed = RealMatrix::from_fn(k, k, |_, j| if j == 2 { 1.0f64 } else { 0.0 });
        assert!(im_loss(&collapsed).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ss_loss_examples() {
        let p_i = m(&[&[0.8, 0.2]]);
        let p_in = m(&[&[0.6, 0.4]]);
        // 0.5·0.223144 + 0.5·0.510826
        let l = ss_loss(&p_i, &p_in, &[0], 0.5, 0.5).unwrap();
        assert!((l + 0.5 * 0.8f64.ln() + 0.5 * 0.6f64.ln()).abs() < 1e-12);
        assert!((l - 0.36697).abs() < 5e-5);
        assert!((ss_loss(&p_i, &p_in, &[0], 1.0, 0.0).unwrap() + 0.8f64.ln()).abs() < 1e-12);
        let one = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(ss_loss(&one, &one, &[1, 0], 0.5, 0.5).unwrap().abs() < 1e-9);
        assert!(ss_loss(&p_i, &p_in, &[2], 0.5, 0.5).is_err());
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 5, 10), 0.1);
        let d = LrSchedule::Decay { gamma: 10.0, power: 0.75 };
        assert_eq!(d.rate(0.1, 0, 10), 0.1);
        assert!((d.rate(0.1, 10, 10) - 0.1 * 11f64.powf(-0.75)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for cfg in [
            AdaptConfig { beta: -0.1, ..Default::default() },
            AdaptConfig { batch: 1, ..Default::default() },
            AdaptConfig { omega_i: 0.0, omega_in: 0.0, ..Default::default() },
            AdaptConfig { lr: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        let v = AdaptConfig { delta: 0.04, delta_is_variance: true, ..Default::default() };
        assert!((v.lambda_std() - 0.2).abs() < 1e-15);
    }

    fn setup(n: usize) -> (TargetModel<f64>, RealMatrix<f64>, Vec<usize>) {
        let mut rng = SeededRng::new(8);
        let model = TargetModel::init(ModelDims::new(3, 6, 4, 3), &mut rng).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = RealMatrix::from_fn(n, 3, |i, j| if labels[i] == j { 2.0 } else { 0.0 } + 0.5 * rng.standard_normal());
        (model, x, labels)
    }

    #[test]
    fn beta_zero_objective_is_im_loss() {
        let (model, x, _) = setup(12);
        let cfg = AdaptConfig { beta: 0.0, ..Default::default() };
        let cache = build_epoch_cache(&model, &x, &cfg, &mut SeededRng::new(1)).unwrap();
        let out = objective(&[0, 3, 5, 7], &x, &cache, &model, &cfg).unwrap();
        assert_eq!(out.loss, im_loss(&out.outputs.fused).unwrap());
        assert!(out.grads.classifier.direction.data().iter().all(|&g| g == 0.0));
        assert!(out.grads.classifier.gain.iter().chain(&out.grads.classifier.bias).all(|&g| g == 0.0));
    }

    #[test]
    fn objective_leaves_cache_untouched() {
        let (model, x, _) = setup(12);
        let cfg = AdaptConfig { mode: GeometryMode::Shnnh, ..Default::default() };
        let cache = build_epoch_cache(&model, &x, &cfg, &mut SeededRng::new(1)).unwrap();
        let before = cache.clone();
        objective(&[1, 2, 4], &x, &cache, &model, &cfg).unwrap();
        assert_eq!(cache, before);
    }

    #[test]
    fn zero_epochs_returns_source() {
        let (model, x, labels) = setup(20);
        let cfg = AdaptConfig { epochs: 0, ..Default::default() };
        let out = adapt_loop(&model, &x, Some(&labels), &cfg, None).unwrap();
        assert_eq!(out.model.param_slices(), model.param_slices());
        assert!(out.history.is_empty());
    }

    #[test]
    fn loop_is_deterministic_and_freezes_classifier() {
        let (model, x, labels) = setup(30);
        let cfg = AdaptConfig { epochs: 3, batch: 8, mode: GeometryMode::Shnnh, ..Default::default() };
        let a = adapt_loop(&model, &x, Some(&labels), &cfg, None).unwrap();
        let b = adapt_loop(&model, &x, Some(&labels), &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.model.classifier, model.classifier);
        assert_ne!(a.model.extractor, model.extractor);
    }

    #[test]
    fn explicit_iteration_count_wraps_the_order() {
        let (model, x, _) = setup(10);
        let cfg = AdaptConfig { epochs: 1, batch: 4, iters_per_epoch: Some(7), ..Default::default() };
        let out = adapt_loop(&model, &x, None, &cfg, None).unwrap();
        assert_eq!(out.history[0].pseudo_accuracy, None);
    }

    #[test]
    fn constant_model_predicts_class_zero() {
        let (mut model, x, _) = setup(6);
        model.classifier.direction = RealMatrix::from_fn(3, 4, |_, _| 1.0);
        model.classifier.bias = vec![0.0; 3];
        assert_eq!(predict(&model, &x).unwrap(), vec![0; 6]);
        assert!(predict(&model, &RealMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn single_precision_loop_runs() {
        let (model, x, labels) = setup(24);
        let mut rng = SeededRng::new(8);
        let model32 = TargetModel::<f32>::init(model.dims(), &mut rng).unwrap();
        let cfg = AdaptConfig { epochs: 2, batch: 8, mode: GeometryMode::Shnnh, ..Default::default() };
        let out = adapt_loop(&model32, &x.cast::<f32>(), Some(&labels), &cfg, None).unwrap();
        assert!(out.model.is_finite());
        assert!(out.history.iter().all(|r| r.l_total.is_finite()));
    }
}
