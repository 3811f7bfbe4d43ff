//! The classifier network `c ∘ g ∘ u`.
//!
//! * extractor `u`: `x → W2·relu(W1·x + b1) + b2` (d → d_h → d_h)
//! * bottleneck `g`: affine map (d_h → d_b) followed by batch normalization
//! * classifier `c`: weight-normalized affine map (d_b → K), effective row
//!   `i` is `gain_i · V_i / ‖V_i‖`
//!
//! Forward passes take `&self`; running batch-norm statistics change only
//! through [`TargetModel::update_running_stats`] (or [`TargetModel::forward_mut`]).
//! Gradients are computed analytically, layer by layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, dot, norm, softmax_rows, RealMatrix, Scalar, SeededRng};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

const CHECKPOINT_FORMAT: &str = "nnh-adapt-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_h: usize,
    pub d_b: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn new(d: usize, d_h: usize, d_b: usize, k: usize) -> Self {
        Self { d, d_h, d_b, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How far a forward pass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    UpToH,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor<S> {
    pub w1: RealMatrix<S>,
    pub b1: Vec<S>,
    pub w2: RealMatrix<S>,
    pub b2: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<S> {
    pub weight: RealMatrix<S>,
    pub bias: Vec<S>,
    pub bn_scale: Vec<S>,
    pub bn_shift: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    pub direction: RealMatrix<S>,
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Classifier<S> {
    /// `gain_i · V_i / ‖V_i‖` for every row.
    pub fn effective_weight(&self) -> RealMatrix<S> {
        let mut w = self.direction.clone();
        for i in 0..w.rows() {
            let n = norm(self.direction.row(i));
            let g = self.gain[i];
            for x in w.row_mut(i) {
                *x = g * *x / n;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel<S> {
    dims: ModelDims,
    pub extractor: Extractor<S>,
    pub bottleneck: Bottleneck<S>,
    pub classifier: Classifier<S>,
    classifier_frozen: bool,
    mode: Mode,
}

/// Batch statistics observed by a train-mode bottleneck pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (1/n) variance.
    pub var: Vec<S>,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BottleneckCache<S> {
    pub(crate) z: RealMatrix<S>,
    pub(crate) xhat: RealMatrix<S>,
    pub(crate) inv_std: Vec<S>,
    pub(crate) stats: Option<BatchStats<S>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ExtractorCache<S> {
    x: RealMatrix<S>,
    z1: RealMatrix<S>,
}

/// Outputs of a forward pass plus what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    pub mode: Mode,
    pub stage: Stage,
    /// Deep features (n × d_h).
    pub h: RealMatrix<S>,
    /// Bottleneck features (n × d_b).
    pub b: Option<RealMatrix<S>>,
    /// Logits (n × K).
    pub v: Option<RealMatrix<S>>,
    /// Softmax probabilities (n × K).
    pub p: Option<RealMatrix<S>>,
    pub(crate) ext: ExtractorCache<S>,
    pub(crate) bn: Option<BottleneckCache<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn batch_stats(&self) -> Option<&BatchStats<S>> {
        self.bn.as_ref().and_then(|c| c.stats.as_ref())
    }

    pub fn probabilities(&self) -> Result<&RealMatrix<S>> {
        self.p
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("trace stops before the classifier".into()))
    }
}

/// Upstream gradient handed to [`TargetModel::backward`].
#[derive(Debug, Clone)]
pub enum Upstream<S> {
    /// dLoss/dp for the softmax outputs.
    Probabilities(RealMatrix<S>),
    /// dLoss/dv for the logits.
    Logits(RealMatrix<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads<S> {
    pub w1: RealMatrix<S>,
    pub b1: Vec<S>,
    pub w2: RealMatrix<S>,
    pub b2: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckGrads<S> {
    pub weight: RealMatrix<S>,
    pub bias: Vec<S>,
    pub bn_scale: Vec<S>,
    pub bn_shift: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads<S> {
    pub direction: RealMatrix<S>,
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

/// Gradients for every trainable tensor, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub extractor: ExtractorGrads<S>,
    pub bottleneck: BottleneckGrads<S>,
    pub classifier: ClassifierGrads<S>,
}

/// Names of the trainable tensors, in the order of [`TargetModel::param_slices`].
pub const PARAM_NAMES: [&str; 11] = [
    "extractor.w1",
    "extractor.b1",
    "extractor.w2",
    "extractor.b2",
    "bottleneck.weight",
    "bottleneck.bias",
    "bottleneck.bn_scale",
    "bottleneck.bn_shift",
    "classifier.direction",
    "classifier.gain",
    "classifier.bias",
];

/// The trailing tensors of [`PARAM_NAMES`] that belong to the classifier.
const CLASSIFIER_TENSORS: usize = 3;

impl<S: Scalar> Gradients<S> {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims { d, d_h, d_b, k } = dims;
        Self {
            extractor: ExtractorGrads {
                w1: RealMatrix::zeros(d_h, d),
                b1: vec![S::zero(); d_h],
                w2: RealMatrix::zeros(d_h, d_h),
                b2: vec![S::zero(); d_h],
            },
            bottleneck: BottleneckGrads {
                weight: RealMatrix::zeros(d_b, d_h),
                bias: vec![S::zero(); d_b],
                bn_scale: vec![S::zero(); d_b],
                bn_shift: vec![S::zero(); d_b],
            },
            classifier: ClassifierGrads {
                direction: RealMatrix::zeros(k, d_b),
                gain: vec![S::zero(); k],
                bias: vec![S::zero(); k],
            },
        }
    }

    pub fn slices(&self) -> [&[S]; 11] {
        [
            self.extractor.w1.data(),
            &self.extractor.b1,
            self.extractor.w2.data(),
            &self.extractor.b2,
            self.bottleneck.weight.data(),
            &self.bottleneck.bias,
            &self.bottleneck.bn_scale,
            &self.bottleneck.bn_shift,
            self.classifier.direction.data(),
            &self.classifier.gain,
            &self.classifier.bias,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [S]; 11] {
        [
            self.extractor.w1.data_mut(),
            &mut self.extractor.b1,
            self.extractor.w2.data_mut(),
            &mut self.extractor.b2,
            self.bottleneck.weight.data_mut(),
            &mut self.bottleneck.bias,
            &mut self.bottleneck.bn_scale,
            &mut self.bottleneck.bn_shift,
            self.classifier.direction.data_mut(),
            &mut self.classifier.gain,
            &mut self.classifier.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Flattened copy in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<S> {
        self.slices().concat()
    }

    fn zero_classifier(&mut self) {
        for s in self.slices_mut().into_iter().rev().take(CLASSIFIER_TENSORS) {
            s.fill(S::zero());
        }
    }
}

fn uniform_matrix<S: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> RealMatrix<S> {
    RealMatrix::from_fn(rows, cols, |_, _| S::lit(rng.uniform(-bound, bound)))
}

fn uniform_vec<S: Scalar>(n: usize, bound: f64, rng: &mut SeededRng) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.uniform(-bound, bound))).collect()
}

impl<S: Scalar> TargetModel<S> {
    /// Fresh model with weights and biases uniform in ±1/√fan_in, unit
    /// batch-norm scale, zero shift, and classifier gains equal to the row
    /// norms of the initial directions.
    pub fn init(dims: ModelDims, rng: &mut SeededRng) -> Result<Self> {
        let ModelDims { d, d_h, d_b, k } = dims;
        if d == 0 || d_h == 0 || d_b == 0 || k < 2 {
            return Err(Error::InvalidInput(format!("model dims {dims:?}")));
        }
        let bd = 1.0 / (d as f64).sqrt();
        let bh = 1.0 / (d_h as f64).sqrt();
        let bb = 1.0 / (d_b as f64).sqrt();
        let extractor = Extractor {
            w1: uniform_matrix(d_h, d, bd, rng),
            b1: uniform_vec(d_h, bd, rng),
            w2: uniform_matrix(d_h, d_h, bh, rng),
            b2: uniform_vec(d_h, bh, rng),
        };
        let bottleneck = Bottleneck {
            weight: uniform_matrix(d_b, d_h, bh, rng),
            bias: uniform_vec(d_b, bh, rng),
            bn_scale: vec![S::one(); d_b],
            bn_shift: vec![S::zero(); d_b],
            running_mean: vec![S::zero(); d_b],
            running_var: vec![S::one(); d_b],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        let direction: RealMatrix<S> = uniform_matrix(k, d_b, bb, rng);
        let gain = direction.iter_rows().map(norm).collect();
        let classifier = Classifier {
            direction,
            gain,
            bias: uniform_vec(k, bb, rng),
        };
        Ok(Self {
            dims,
            extractor,
            bottleneck,
            classifier,
            classifier_frozen: false,
            mode: Mode::Train,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut m = self.clone();
        m.mode = mode;
        m
    }

    pub fn classifier_frozen(&self) -> bool {
        self.classifier_frozen
    }

    pub fn set_classifier_frozen(&mut self, frozen: bool) {
        self.classifier_frozen = frozen;
    }

    pub fn param_slices(&self) -> [&[S]; 11] {
        [
            self.extractor.w1.data(),
            &self.extractor.b1,
            self.extractor.w2.data(),
            &self.extractor.b2,
            self.bottleneck.weight.data(),
            &self.bottleneck.bias,
            &self.bottleneck.bn_scale,
            &self.bottleneck.bn_shift,
            self.classifier.direction.data(),
            &self.classifier.gain,
            &self.classifier.bias,
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [S]; 11] {
        [
            self.extractor.w1.data_mut(),
            &mut self.extractor.b1,
            self.extractor.w2.data_mut(),
            &mut self.extractor.b2,
            self.bottleneck.weight.data_mut(),
            &mut self.bottleneck.bias,
            &mut self.bottleneck.bn_scale,
            &mut self.bottleneck.bn_shift,
            self.classifier.direction.data_mut(),
            &mut self.classifier.gain,
            &mut self.classifier.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter at a flat index (in [`PARAM_NAMES`] order).
    pub fn param_mut(&mut self, mut index: usize) -> &mut S {
        for s in self.param_slices_mut() {
            if index < s.len() {
                return &mut s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
            && self.bottleneck.running_mean.iter().all(|x| x.is_finite())
            && self.bottleneck.running_var.iter().all(|x| x.is_finite())
    }

    fn check_input(&self, x: &RealMatrix<S>, width: usize, what: &str) -> Result<()> {
        if x.cols() != width {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {} columns, model expects {width}",
                x.cols()
            )));
        }
        Ok(())
    }

    pub(crate) fn extract(&self, x: &RealMatrix<S>) -> (RealMatrix<S>, ExtractorCache<S>) {
        let e = &self.extractor;
        let z1 = x.affine(&e.w1, &e.b1);
        let a1 = z1.map(|v| v.max(S::zero()));
        let h = a1.affine(&e.w2, &e.b2);
        (
            h,
            ExtractorCache {
                x: x.clone(),
                z1,
            },
        )
    }

    /// Deep features `u(x)` only.
    pub fn features(&self, x: &RealMatrix<S>) -> Result<RealMatrix<S>> {
        self.check_input(x, self.dims.d, "input")?;
        Ok(self.extract(x).0)
    }

    pub(crate) fn bottleneck_forward(
        &self,
        h: &RealMatrix<S>,
        mode: Mode,
    ) -> Result<(RealMatrix<S>, BottleneckCache<S>)> {
        let bn = &self.bottleneck;
        let z = h.affine(&bn.weight, &bn.bias);
        let (n, width) = z.shape();
        let eps = S::lit(bn.eps);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidInput(
                        "batch normalization in train mode needs at least 2 rows".into(),
                    ));
                }
                let nn = S::count(n);
                let mean: Vec<S> = z.col_sums().into_iter().map(|s| s / nn).collect();
                let mut var = vec![S::zero(); width];
                for row in z.iter_rows() {
                    for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *v = *v + (x - m) * (x - m);
                    }
                }
                for v in &mut var {
                    *v = *v / nn;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    n,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = z.clone();
        let mut b = z.clone();
        for i in 0..n {
            for j in 0..width {
                let xh = (z.get(i, j) - mean[j]) * inv_std[j];
                xhat.set(i, j, xh);
                b.set(i, j, bn.bn_scale[j] * xh + bn.bn_shift[j]);
            }
        }
        Ok((
            b,
            BottleneckCache {
                z,
                xhat,
                inv_std,
                stats,
            },
        ))
    }

    /// Logits `c(b)`.
    pub fn classify(&self, b: &RealMatrix<S>) -> RealMatrix<S> {
        b.affine(&self.classifier.effective_weight(), &self.classifier.bias)
    }

    /// Forward pass in the model's current mode. Train mode uses batch
    /// statistics and needs at least two rows.
    pub fn forward(&self, x: &RealMatrix<S>, stage: Stage) -> Result<ForwardTrace<S>> {
        self.check_input(x, self.dims.d, "input")?;
        if self.mode == Mode::Train && x.rows() < 2 {
            return Err(Error::InvalidInput(
                "train-mode forward needs a batch of at least 2".into(),
            ));
        }
        let (h, ext) = self.extract(x);
        if stage == Stage::UpToH {
            return Ok(ForwardTrace {
                mode: self.mode,
                stage,
                h,
                b: None,
                v: None,
                p: None,
                ext,
                bn: None,
            });
        }
        let (b, bn) = self.bottleneck_forward(&h, self.mode)?;
        let v = self.classify(&b);
        let p = softmax_rows(&v);
        Ok(ForwardTrace {
            mode: self.mode,
            stage,
            h,
            b: Some(b),
            v: Some(v),
            p: Some(p),
            ext,
            bn: Some(bn),
        })
    }

    /// Forward pass that also folds train-mode batch statistics into the
    /// running estimates.
    pub fn forward_mut(&mut self, x: &RealMatrix<S>, stage: Stage) -> Result<ForwardTrace<S>> {
        let trace = self.forward(x, stage)?;
        if let Some(stats) = trace.batch_stats() {
            self.update_running_stats(stats);
        }
        Ok(trace)
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &BatchStats<S>) {
        let bn = &mut self.bottleneck;
        let m = S::lit(bn.momentum);
        let keep = S::one() - m;
        let correction = S::count(stats.n) / S::count(stats.n.saturating_sub(1).max(1));
        for (r, &x) in bn.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * x;
        }
        for (r, &x) in bn.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * x * correction;
        }
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, x: &RealMatrix<S>) -> Result<RealMatrix<S>> {
        let trace = self.with_mode(Mode::Eval).forward(x, Stage::Full)?;
        Ok(trace.p.expect("full stage"))
    }

    /// Eval-mode argmax predictions, ties to the lowest class.
    pub fn predict(&self, x: &RealMatrix<S>) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok(p.iter_rows().map(argmax).collect())
    }

    pub(crate) fn classifier_backward(
        &self,
        b: &RealMatrix<S>,
        dv: &RealMatrix<S>,
    ) -> (ClassifierGrads<S>, RealMatrix<S>) {
        let c = &self.classifier;
        let w = c.effective_weight();
        let db = dv.matmul(&w);
        let dw = dv.t_matmul(b);
        let bias = dv.col_sums();
        let mut direction = RealMatrix::zeros(c.direction.rows(), c.direction.cols());
        let mut gain = vec![S::zero(); c.gain.len()];
        for i in 0..c.direction.rows() {
            let vrow = c.direction.row(i);
            let n = norm(vrow);
            let dwi = dw.row(i);
            let proj = dot(dwi, vrow) / n;
            gain[i] = proj;
            let scale = c.gain[i] / n;
            for (j, out) in direction.row_mut(i).iter_mut().enumerate() {
                *out = scale * (dwi[j] - proj * vrow[j] / n);
            }
        }
        (
            ClassifierGrads {
                direction,
                gain,
                bias,
            },
            db,
        )
    }

    /// Backward through affine + batch norm using the batch-statistics path.
    pub(crate) fn bottleneck_backward(
        &self,
        h: &RealMatrix<S>,
        cache: &BottleneckCache<S>,
        db: &RealMatrix<S>,
    ) -> (BottleneckGrads<S>, RealMatrix<S>) {
        let bn = &self.bottleneck;
        let (n, width) = db.shape();
        let nn = S::count(n);
        let mut bn_scale = vec![S::zero(); width];
        let mut bn_shift = vec![S::zero(); width];
        let mut sum_dxhat = vec![S::zero(); width];
        let mut sum_dxhat_xhat = vec![S::zero(); width];
        for i in 0..n {
            for j in 0..width {
                let dy = db.get(i, j);
                let xh = cache.xhat.get(i, j);
                bn_scale[j] = bn_scale[j] + dy * xh;
                bn_shift[j] = bn_shift[j] + dy;
                let dxh = dy * bn.bn_scale[j];
                sum_dxhat[j] = sum_dxhat[j] + dxh;
                sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + dxh * xh;
            }
        }
        let mut dz = RealMatrix::zeros(n, width);
        for i in 0..n {
            for j in 0..width {
                let dxh = db.get(i, j) * bn.bn_scale[j];
                let xh = cache.xhat.get(i, j);
                let g = cache.inv_std[j] / nn * (nn * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
                dz.set(i, j, g);
            }
        }
        debug_assert_eq!(cache.z.rows(), n);
        let weight = dz.t_matmul(h);
        let bias = dz.col_sums();
        let dh = dz.matmul(&bn.weight);
        (
            BottleneckGrads {
                weight,
                bias,
                bn_scale,
                bn_shift,
            },
            dh,
        )
    }

    pub(crate) fn extractor_backward(&self, cache: &ExtractorCache<S>, dh: &RealMatrix<S>) -> ExtractorGrads<S> {
        let e = &self.extractor;
        let a1 = cache.z1.map(|v| v.max(S::zero()));
        let w2 = dh.t_matmul(&a1);
        let b2 = dh.col_sums();
        let mut dz1 = dh.matmul(&e.w2);
        for (g, &z) in dz1.data_mut().iter_mut().zip(cache.z1.data()) {
            if z <= S::zero() {
                *g = S::zero();
            }
        }
        let w1 = dz1.t_matmul(&cache.x);
        let b1 = dz1.col_sums();
        ExtractorGrads { w1, b1, w2, b2 }
    }

    /// Analytic gradients of a loss whose derivative with respect to the
    /// trace's probabilities or logits is `upstream`. Classifier gradients are
    /// zero when the classifier is frozen.
    pub fn backward(&self, trace: &ForwardTrace<S>, upstream: &Upstream<S>) -> Result<Gradients<S>> {
        if trace.mode != Mode::Train {
            return Err(Error::InvalidInput("backward needs a train-mode trace".into()));
        }
        let (Some(b), Some(p), Some(bn)) = (&trace.b, &trace.p, &trace.bn) else {
            return Err(Error::InvalidInput("backward needs a full-stage trace".into()));
        };
        let dv = match upstream {
            Upstream::Logits(dv) => dv.clone(),
            Upstream::Probabilities(dp) => softmax_backward(p, dp),
        };
        if dv.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} vs outputs {:?}",
                dv.shape(),
                p.shape()
            )));
        }
        let (mut classifier, db) = self.classifier_backward(b, &dv);
        if self.classifier_frozen {
            classifier = Gradients::zeros(self.dims).classifier;
        }
        let (bottleneck, dh) = self.bottleneck_backward(&trace.h, bn, &db);
        let extractor = self.extractor_backward(&trace.ext, &dh);
        Ok(Gradients {
            extractor,
            bottleneck,
            classifier,
        })
    }

    /// Plain gradient step. The classifier is left untouched when frozen.
    pub fn sgd_step(&mut self, grads: &Gradients<S>, lr: f64) -> Result<()> {
        check_step(grads, lr)?;
        let lr = S::lit(lr);
        let frozen = self.classifier_frozen;
        let count = trainable_tensors(frozen);
        for (p, g) in self.param_slices_mut().into_iter().zip(grads.slices()).take(count) {
            for (x, &dx) in p.iter_mut().zip(g) {
                *x = *x - lr * dx;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            dims: self.dims,
            classifier_frozen: self.classifier_frozen,
            bn_momentum: self.bottleneck.momentum,
            bn_eps: self.bottleneck.eps,
            parameters: PARAM_NAMES
                .iter()
                .zip(self.param_slices())
                .map(|(name, s)| (name.to_string(), s.iter().map(|x| x.as_f64()).collect()))
                .collect(),
            running_mean: self.bottleneck.running_mean.iter().map(|x| x.as_f64()).collect(),
            running_var: self.bottleneck.running_var.iter().map(|x| x.as_f64()).collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; the returned model is in eval mode.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format {:?}", file.format)));
        }
        let mut rng = SeededRng::new(0);
        let mut model = Self::init(file.dims, &mut rng).map_err(|e| bad(e.to_string()))?;
        for (name, slot) in PARAM_NAMES.iter().zip(model.param_slices_mut()) {
            let values = file
                .parameters
                .get(*name)
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if values.len() != slot.len() {
                return Err(bad(format!(
                    "{name} has {} values, dims require {}",
                    values.len(),
                    slot.len()
                )));
            }
            for (s, &v) in slot.iter_mut().zip(values) {
                *s = S::lit(v);
            }
        }
        let d_b = file.dims.d_b;
        if file.running_mean.len() != d_b || file.running_var.len() != d_b {
            return Err(bad("running statistics do not match d_b".into()));
        }
        model.bottleneck.running_mean = file.running_mean.iter().map(|&v| S::lit(v)).collect();
        model.bottleneck.running_var = file.running_var.iter().map(|&v| S::lit(v)).collect();
        model.bottleneck.momentum = file.bn_momentum;
        model.bottleneck.eps = file.bn_eps;
        model.classifier_frozen = file.classifier_frozen;
        model.mode = Mode::Eval;
        if !model.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        if model.classifier.direction.iter_rows().any(|r| norm(r) == S::zero()) {
            return Err(bad("zero classifier direction row".into()));
        }
        Ok(model)
    }
}

fn trainable_tensors(classifier_frozen: bool) -> usize {
    if classifier_frozen {
        PARAM_NAMES.len() - CLASSIFIER_TENSORS
    } else {
        PARAM_NAMES.len()
    }
}

fn check_step<S: Scalar>(grads: &Gradients<S>, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// `dv = p ⊙ (dp − Σ_k dp_k p_k)` row by row.
pub fn softmax_backward<S: Scalar>(p: &RealMatrix<S>, dp: &RealMatrix<S>) -> RealMatrix<S> {
    let mut dv = dp.clone();
    for i in 0..p.rows() {
        let pr = p.row(i);
        let s = dot(pr, dp.row(i));
        for (g, &pk) in dv.row_mut(i).iter_mut().zip(pr) {
            *g = pk * (*g - s);
        }
    }
    dv
}

/// SGD with optional heavy-ball momentum (`v ← μv + g`, `θ ← θ − lr·v`).
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub momentum: f64,
    velocity: Option<Gradients<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut TargetModel<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return model.sgd_step(grads, lr);
        }
        check_step(grads, lr)?;
        let mu = S::lit(self.momentum);
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros(model.dims()));
        for (v, g) in velocity.slices_mut().into_iter().zip(grads.slices()) {
            for (x, &dx) in v.iter_mut().zip(g) {
                *x = mu * *x + dx;
            }
        }
        if model.classifier_frozen() {
            velocity.zero_classifier();
        }
        model.sgd_step(velocity, lr)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    dims: ModelDims,
    classifier_frozen: bool,
    bn_momentum: f64,
    bn_eps: f64,
    parameters: BTreeMap<String, Vec<f64>>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}
