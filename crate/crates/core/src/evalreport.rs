//! Metrics, 2-D projections and the ablation harness.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{accuracy, adapt_loop, predict, AdaptConfig};
use crate::error::{Error, Result};
use crate::geometry::{ConfidentRule, GeometryMode};
use crate::numeric::{RealMatrix, Scalar};
use crate::pretrain::{train_source, PretrainConfig};
use crate::synthdata::{generate_pair, DomainDataset, ShiftSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `NaN` for classes absent from the ground truth.
    pub per_class: Vec<f64>,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub seed: Option<u64>,
    pub fingerprint: Option<String>,
}

/// Counting metrics of `pred` against `truth`.
pub fn evaluate(pred: &[usize], truth: &[usize], k: usize) -> Result<EvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    if let Some(&y) = pred.iter().chain(truth).find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!("label {y} outside [0, {k})")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let diag: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: diag as f64 / truth.len() as f64,
        per_class,
        confusion,
        seed: None,
        fingerprint: None,
    })
}

impl EvalReport {
    /// One line `accuracy,<value>` followed by `class,accuracy` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows = vec![vec!["metric".to_string(), "value".to_string()]];
        rows.push(vec!["accuracy".into(), self.accuracy.to_string()]);
        for (c, a) in self.per_class.iter().enumerate() {
            rows.push(vec![format!("class_{c}"), a.to_string()]);
        }
        if let Some(s) = self.seed {
            rows.push(vec!["seed".into(), s.to_string()]);
        }
        if let Some(f) = &self.fingerprint {
            rows.push(vec!["fingerprint".into(), f.clone()]);
        }
        write_rows(path.as_ref(), &rows)
    }

    /// K lines of K counts, no header.
    pub fn write_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .confusion
            .iter()
            .map(|r| r.iter().map(usize::to_string).collect())
            .collect();
        write_rows(path.as_ref(), &rows)
    }
}

pub(crate) fn write_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores on the top two principal components of the centered features. Each
/// component is signed so that its largest-magnitude loading is positive.
pub fn project2d<S: Scalar>(features: &RealMatrix<S>) -> Result<RealMatrix<f64>> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!("projection needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::InvalidInput("projection needs at least 1 column".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features.get(i, j).as_f64());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = RealMatrix::zeros(n, 2);
    for (col, &e) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (j, &x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            let s: f64 = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
            out.set(i, col, s);
        }
    }
    Ok(out)
}

/// Writes `x,y,label,domain` rows.
pub fn write_projection_csv(path: impl AsRef<Path>, points: &RealMatrix<f64>, labels: &[usize], domain: &str) -> Result<()> {
    if points.rows() != labels.len() {
        return Err(Error::ShapeMismatch("projection and labels differ in length".into()));
    }
    let mut rows = vec![["x", "y", "label", "domain"].map(String::from).to_vec()];
    for (i, &y) in labels.iter().enumerate() {
        rows.push(vec![points.get(i, 0).to_string(), points.get(i, 1).to_string(), y.to_string(), domain.to_string()]);
    }
    write_rows(path.as_ref(), &rows)
}

/// Synthetic benchmark plus source training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub n_per_domain: usize,
    pub k: usize,
    pub d: usize,
    pub shift: ShiftSpec,
    pub pretrain: PretrainConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl TaskSpec {
    /// Four classes in ten dimensions, rotated by 45° and shifted by
    /// (1.5, −1.5) in the rotation plane, 1000 samples per domain.
    pub fn standard() -> Self {
        let d = 10;
        let mut translation = vec![0.0; d];
        translation[0] = 1.5;
        translation[1] = -1.5;
        Self {
            n_per_domain: 1000,
            k: 4,
            d,
            shift: ShiftSpec {
                rotation: std::f64::consts::FRAC_PI_4,
                translation,
                noise_std: 1.0,
                class_sep: 4.0,
                seed: 0,
            },
            pretrain: PretrainConfig {
                epochs: 10,
                ..PretrainConfig::default()
            },
        }
    }

    /// The task with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut t = self.clone();
        t.shift.seed = seed;
        t.pretrain.seed = seed;
        t
    }

    pub fn generate(&self) -> Result<(DomainDataset<f64>, DomainDataset<f64>)> {
        generate_pair(self.n_per_domain, self.k, self.d, &self.shift)
    }
}

/// One configuration change relative to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Objective is `β L_ss` only.
    NoIm,
    /// Objective is `L_im` only.
    NoSs,
    #[serde(rename = "omega-in-0")]
    OmegaInZero,
    #[serde(rename = "eta-in-0")]
    EtaInZero,
    /// `λ_k` fixed at 1.
    NoFusedPl,
    /// Nearest confident sample instead of the chain.
    NoChain,
    /// Confident set from the entropy criterion only.
    #[serde(rename = "ce-only")]
    EntropyOnly,
    /// Confident set from the centroid-distance criterion only.
    #[serde(rename = "cd-only")]
    DistanceOnly,
}

impl Variant {
    pub const NNH: [Variant; 6] = [
        Variant::Full,
        Variant::NoIm,
        Variant::NoSs,
        Variant::OmegaInZero,
        Variant::EtaInZero,
        Variant::NoFusedPl,
    ];
    pub const SHNNH_EXTRA: [Variant; 3] = [Variant::NoChain, Variant::EntropyOnly, Variant::DistanceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIm => "no-im",
            Variant::NoSs => "no-ss",
            Variant::OmegaInZero => "omega-in-0",
            Variant::EtaInZero => "eta-in-0",
            Variant::NoFusedPl => "no-fused-pl",
            Variant::NoChain => "no-chain",
            Variant::EntropyOnly => "ce-only",
            Variant::DistanceOnly => "cd-only",
        }
    }

    /// Variants meaningful for `mode`.
    pub fn for_mode(mode: GeometryMode) -> Vec<Variant> {
        let mut v = Self::NNH.to_vec();
        if mode == GeometryMode::Shnnh {
            v.extend(Self::SHNNH_EXTRA);
        }
        v
    }

    pub fn apply(self, base: &AdaptConfig) -> AdaptConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoIm => c.use_im = false,
            Variant::NoSs => c.beta = 0.0,
            Variant::OmegaInZero => c.omega_in = 0.0,
            Variant::EtaInZero => c.eta_in = 0.0,
            Variant::NoFusedPl => {
                c.alpha = 1.0;
                c.delta = 0.0;
            }
            Variant::NoChain => c.chain_search = false,
            Variant::EntropyOnly => c.confident_rule = ConfidentRule::EntropyOnly,
            Variant::DistanceOnly => c.confident_rule = ConfidentRule::DistanceOnly,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NNH
            .iter()
            .chain(&Self::SHNNH_EXTRA)
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Hex SHA-256 of the JSON encoding of `value`, first 16 characters.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Source-only and adapted target accuracy on one seeded instance of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub source_only: f64,
    pub adapted: Vec<Result<f64, String>>,
}

/// Generates the task at `seed`, trains a source model and adapts it once per
/// configuration (each with its seed set to `seed`).
pub fn run_seed(task: &TaskSpec, configs: &[AdaptConfig], seed: u64) -> Result<SeedResult> {
    let task = task.with_seed(seed);
    let (source, target) = task.generate()?;
    let model = train_source(&source, &task.pretrain)?.model;
    let truth = target.labels();
    let source_only = accuracy(&predict(&model, target.features())?, truth);
    let adapted = configs
        .iter()
        .map(|cfg| {
            let cfg = AdaptConfig { seed, ..cfg.clone() };
            adapt_loop(&model, target.features(), None, &cfg, None)
                .and_then(|out| predict(&out.model, target.features()))
                .map(|p| accuracy(&p, truth))
                .map_err(|e| e.to_string())
        })
        .collect();
    Ok(SeedResult {
        seed,
        source_only,
        adapted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: String,
    /// Mean over the seeds that finished; `None` if any failed.
    pub mean_accuracy: Option<f64>,
    pub accuracies: Vec<Option<f64>>,
    pub failed: bool,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Columns `variant,mode,mean_accuracy,delta_vs_full,failed,fingerprint`
    /// then one accuracy column per seed.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let full = self.row("full").and_then(|r| r.mean_accuracy);
        let mut header: Vec<String> = ["variant", "mode", "mean_accuracy", "delta_vs_full", "failed", "fingerprint"]
            .map(String::from)
            .to_vec();
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        let mut rows = vec![header];
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let delta = match (r.mean_accuracy, full) {
                (Some(a), Some(f)) => Some(a - f),
                _ => None,
            };
            let mut row = vec![
                r.variant.clone(),
                r.mode.clone(),
                fmt(r.mean_accuracy),
                fmt(delta),
                r.failed.to_string(),
                r.fingerprint.clone(),
            ];
            row.extend(r.accuracies.iter().map(|&a| fmt(a)));
            rows.push(row);
        }
        write_rows(path.as_ref(), &rows)
    }
}

/// Runs every variant over every seed on `task`. A failed run marks its row
/// failed and the suite continues. The first row is the unadapted source model.
pub fn run_ablation_suite(task: &TaskSpec, base: &AdaptConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    let configs: Vec<AdaptConfig> = variants.iter().map(|v| v.apply(base)).collect();
    let mut source_only = Vec::with_capacity(seeds.len());
    let mut per_variant: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(seeds.len()); variants.len()];
    for &seed in seeds {
        let result = run_seed(task, &configs, seed)?;
        source_only.push(Some(result.source_only));
        for (slot, acc) in per_variant.iter_mut().zip(result.adapted) {
            match acc {
                Ok(a) => slot.push(Some(a)),
                Err(e) => {
                    log::warn!("seed {seed}: run failed: {e}");
                    slot.push(None);
                }
            }
        }
        log::info!("seed {seed} done");
    }
    let summarize = |accs: &[Option<f64>]| {
        let done: Vec<f64> = accs.iter().flatten().copied().collect();
        let failed = done.len() != accs.len();
        let mean = (!failed && !done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
        (mean, failed)
    };
    let mut rows = Vec::with_capacity(variants.len() + 1);
    let (mean, failed) = summarize(&source_only);
    rows.push(AblationRow {
        variant: "source-only".into(),
        mode: "-".into(),
        mean_accuracy: mean,
        accuracies: source_only,
        failed,
        fingerprint: fingerprint(&(task, seeds)),
    });
    for ((variant, cfg), accs) in variants.iter().zip(&configs).zip(per_variant) {
        let (mean, failed) = summarize(&accs);
        rows.push(AblationRow {
            variant: variant.name().into(),
            mode: cfg.mode.to_string(),
            mean_accuracy: mean,
            accuracies: accs,
            failed,
            fingerprint: fingerprint(&(task, cfg, seeds)),
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
