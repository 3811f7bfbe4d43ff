//! Source-model training with label-smoothed cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, ModelDims, Sgd, Stage, TargetModel, Upstream};
use crate::numeric::{argmax, RealMatrix, Scalar, SeededRng};
use crate::synthdata::DomainDataset;

pub(crate) const LOG_EPS: f64 = 1e-12;

/// Label-smoothing strength, `0 ≤ gamma < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothLabelParams {
    pub gamma: f64,
}

impl SmoothLabelParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("label smoothing gamma {gamma} not in [0, 1)")));
        }
        Ok(Self { gamma })
    }
}

impl Default for SmoothLabelParams {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

/// Rows `(1 − γ)·onehot(y) + γ/K`.
pub fn smooth_labels<S: Scalar>(labels: &[usize], k: usize, gamma: f64) -> Result<RealMatrix<S>> {
    SmoothLabelParams::new(gamma)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
    }
    let off = S::lit(gamma / k as f64);
    let on = S::lit(1.0 - gamma) + off;
    Ok(RealMatrix::from_fn(labels.len(), k, |i, j| {
        if labels[i] == j {
            on
        } else {
            off
        }
    }))
}

/// Mean over rows of `−Σ_k l̄_k log max(p_k, 1e-12)`.
pub fn source_ce_loss<S: Scalar>(p: &RealMatrix<S>, lbar: &RealMatrix<S>) -> Result<S> {
    if p.shape() != lbar.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs smoothed labels {:?}",
            p.shape(),
            lbar.shape()
        )));
    }
    if p.rows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let eps = S::lit(LOG_EPS);
    let total = p
        .data()
        .iter()
        .zip(lbar.data())
        .fold(S::zero(), |acc, (&pk, &lk)| acc - lk * pk.max(eps).ln());
    Ok(total / S::count(p.rows()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub smoothing: SmoothLabelParams,
    pub d_h: usize,
    pub d_b: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 0.01,
            momentum: 0.9,
            smoothing: SmoothLabelParams::default(),
            d_h: 64,
            d_b: 16,
            seed: 2020,
        }
    }
}

/// Full-set loss and accuracy at the end of an epoch (eval mode).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub model: TargetModel<S>,
    pub log: Vec<PretrainEpoch>,
}

/// Eval-mode smoothed cross-entropy and accuracy over a whole dataset.
pub fn evaluate_source<S: Scalar>(
    model: &TargetModel<S>,
    ds: &DomainDataset<S>,
    gamma: f64,
) -> Result<(f64, f64)> {
    let p = model.predict_proba(ds.features())?;
    let lbar = smooth_labels(ds.labels(), ds.num_classes(), gamma)?;
    let loss = source_ce_loss(&p, &lbar)?.as_f64();
    let correct = p
        .iter_rows()
        .zip(ds.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok((loss, correct as f64 / ds.len() as f64))
}

/// Trains a fresh source model by mini-batch SGD.
///
/// Each epoch shuffles with a generator derived from the master seed and the
/// epoch number. A trailing batch of one sample is dropped.
pub fn train_source<S: Scalar>(ds: &DomainDataset<S>, cfg: &PretrainConfig) -> Result<PretrainOutcome<S>> {
    if cfg.batch < 2 {
        return Err(Error::Config(format!("pretrain batch {} < 2", cfg.batch)));
    }
    SmoothLabelParams::new(cfg.smoothing.gamma)?;
    let dims = ModelDims::new(ds.dim(), cfg.d_h, cfg.d_b, ds.num_classes());
    let root = SeededRng::new(cfg.seed);
    let mut model = TargetModel::init(dims, &mut root.derive("init"))?;
    model.set_mode(Mode::Train);
    let lbar_all: RealMatrix<S> = smooth_labels(ds.labels(), ds.num_classes(), cfg.smoothing.gamma)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = ds.len();
    for epoch in 1..=cfg.epochs {
        let order = root.derive(&format!("shuffle-{epoch}")).permutation(n);
        for (iteration, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = ds.features().select_rows(chunk);
            let lbar = lbar_all.select_rows(chunk);
            let trace = model.forward(&x, Stage::Full)?;
            let p = trace.probabilities()?;
            let loss = source_ce_loss(p, &lbar)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, iteration });
            }
            // d/dv of the mean smoothed CE is (p − l̄)/n since l̄ rows sum to 1
            let scale = S::one() / S::count(chunk.len());
            let mut dv = p.clone();
            for (g, &l) in dv.data_mut().iter_mut().zip(lbar.data()) {
                *g = (*g - l) * scale;
            }
            let grads = model.backward(&trace, &Upstream::Logits(dv))?;
            if let Some(stats) = trace.batch_stats() {
                model.update_running_stats(stats);
            }
            opt.step(&mut model, &grads, cfg.lr)?;
        }
        let (loss, accuracy) = evaluate_source(&model, ds, cfg.smoothing.gamma)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                iteration: usize::MAX,
            });
        }
        log::debug!("pretrain epoch {epoch}: loss {loss:.6} acc {accuracy:.4}");
        log.push(PretrainEpoch {
            epoch,
            loss,
            accuracy,
        });
    }
    model.set_mode(Mode::Eval);
    model.set_classifier_frozen(false);
    Ok(PretrainOutcome { model, log })
}
