//! Per-epoch self-labelling: cache the target set's features, cluster the
//! bottleneck features with probability-weighted k-means, and fuse each
//! sample's centroid similarities with its neighbor's into a pseudo-label.

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    chain_search_from, confident_split, dynamical_nnh_in, nearest_confident, static_nnh, ConfidentSet, CosinePool,
    DistanceRule, GeometryMode, Neighborhood,
};
use crate::model::{Mode, Stage, TargetModel};
use crate::numeric::{argmax, argmin, clamp_unit, dot, norm, sample_normal_clamped, RealMatrix, Scalar, SeededRng};

/// Full-dataset eval-mode outputs of the current model.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxFeatures<S> {
    pub hbar: RealMatrix<S>,
    pub bbar: RealMatrix<S>,
    pub vbar: RealMatrix<S>,
    pub pbar: RealMatrix<S>,
}

/// Everything frozen for one epoch's iteration stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryCache<S> {
    pub hbar: RealMatrix<S>,
    pub bbar: RealMatrix<S>,
    pub vbar: RealMatrix<S>,
    pub pbar: RealMatrix<S>,
    pub qbar: RealMatrix<S>,
    pub centroids: RealMatrix<S>,
    pub pseudo: Vec<usize>,
    pub neighbors: Vec<Neighborhood>,
    /// Present when SHNNH geometry was built for this epoch.
    pub confident: Option<ConfidentSet<S>>,
    /// Classes whose centroid was carried over after an empty reassignment.
    pub centroid_warnings: usize,
}

impl<S: Scalar> AuxiliaryCache<S> {
    pub fn len(&self) -> usize {
        self.hbar.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hbar.rows() == 0
    }
}

/// Runs the whole target set through the model in eval mode.
pub fn compute_aux<S: Scalar>(model: &TargetModel<S>, xt: &RealMatrix<S>) -> Result<AuxFeatures<S>> {
    let trace = model.with_mode(Mode::Eval).forward(xt, Stage::Full)?;
    Ok(AuxFeatures {
        hbar: trace.h,
        bbar: trace.b.expect("full stage"),
        vbar: trace.v.expect("full stage"),
        pbar: trace.p.expect("full stage"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids<S> {
    pub centroids: RealMatrix<S>,
    /// Classes left empty by a hard reassignment (previous centroid kept).
    pub warnings: usize,
}

fn weighted_mean<S: Scalar>(bbar: &RealMatrix<S>, weights: impl Fn(usize, usize) -> S, k: usize) -> (RealMatrix<S>, Vec<S>) {
    let d = bbar.cols();
    let mut sums = RealMatrix::zeros(k, d);
    let mut mass = vec![S::zero(); k];
    for (i, row) in bbar.iter_rows().enumerate() {
        for c in 0..k {
            let w = weights(i, c);
            if w == S::zero() {
                continue;
            }
            mass[c] = mass[c] + w;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(row) {
                *s = *s + w * x;
            }
        }
    }
    for c in 0..k {
        if mass[c] > S::zero() {
            let m = mass[c];
            for s in sums.row_mut(c) {
                *s = *s / m;
            }
        }
    }
    (sums, mass)
}

/// Cosine similarity of every row with every centroid, `(n × K)`.
fn cosine_table<S: Scalar>(bbar: &RealMatrix<S>, centroids: &RealMatrix<S>) -> Result<RealMatrix<S>> {
    let cn: Vec<S> = centroids.iter_rows().map(norm).collect();
    if let Some(c) = cn.iter().position(|&n| n == S::zero()) {
        return Err(Error::ZeroVector(format!("centroid {c}")));
    }
    let mut out = RealMatrix::zeros(bbar.rows(), centroids.rows());
    for (i, row) in bbar.iter_rows().enumerate() {
        let rn = norm(row);
        if rn == S::zero() {
            return Err(Error::ZeroVector(format!("bottleneck feature {i}")));
        }
        for (c, &n) in cn.iter().enumerate() {
            out.set(i, c, clamp_unit(dot(row, centroids.row(c)) / (rn * n)));
        }
    }
    Ok(out)
}

/// Probability-weighted centroids `μ_k = Σ p̄_{i,k} b̄_i / Σ p̄_{i,k}`, followed by
/// `rounds` hard k-means rounds that reassign each sample to its most
/// cosine-similar centroid and recompute plain means.
pub fn weighted_centroids<S: Scalar>(bbar: &RealMatrix<S>, pbar: &RealMatrix<S>, rounds: usize) -> Result<Centroids<S>> {
    if bbar.rows() != pbar.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} probability rows",
            bbar.rows(),
            pbar.rows()
        )));
    }
    let k = pbar.cols();
    let (mut centroids, mass) = weighted_mean(bbar, |i, c| pbar.get(i, c), k);
    if let Some(c) = mass.iter().position(|&m| !(m > S::zero())) {
        return Err(Error::InvalidInput(format!("class {c} has zero total probability")));
    }
    let mut warnings = 0;
    for _ in 0..rounds {
        let sims = cosine_table(bbar, &centroids)?;
        let assign: Vec<usize> = sims.iter_rows().map(argmax).collect();
        let (next, counts) = weighted_mean(bbar, |i, c| if assign[i] == c { S::one() } else { S::zero() }, k);
        for c in 0..k {
            if counts[c] > S::zero() {
                centroids.row_mut(c).copy_from_slice(next.row(c));
            } else {
                warnings += 1;
                log::warn!("class {c} received no samples in k-means reassignment; keeping its centroid");
            }
        }
    }
    Ok(Centroids { centroids, warnings })
}

/// `q̄_{i,k} = ½(1 + cos(b̄_i, μ_k))`, in `[0, 1]`.
pub fn similarity_logits<S: Scalar>(bbar: &RealMatrix<S>, centroids: &RealMatrix<S>) -> Result<RealMatrix<S>> {
    if bbar.cols() != centroids.cols() {
        return Err(Error::ShapeMismatch("feature width differs from centroid width".into()));
    }
    let half = S::lit(0.5);
    Ok(cosine_table(bbar, centroids)?.map(|c| half * (S::one() + c)))
}

/// Which end of the fused similarity picks the pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Most similar class (largest fused similarity).
    #[default]
    MostSimilar,
    /// Smallest fused similarity, read literally.
    LiteralMin,
}

/// For each anchor, draws `λ ∈ [0,1]^K` and labels it with the best class of
/// `M_k = λ_k q̄_{i,k} + (1 − λ_k) q̄_{in,k}`. Ties go to the lowest class.
pub fn fused_pseudo_labels<S: Scalar>(
    qbar: &RealMatrix<S>,
    neighbors: &[Neighborhood],
    rng: &mut SeededRng,
    lambda_mean: f64,
    lambda_std: f64,
    rule: FusionRule,
) -> Result<Vec<usize>> {
    let n = qbar.rows();
    if neighbors.len() != n || neighbors.iter().enumerate().any(|(i, nb)| nb.anchor != i || nb.neighbor >= n) {
        return Err(Error::InvalidInput("neighborhoods must cover every anchor in order".into()));
    }
    let k = qbar.cols();
    let mut fused = vec![S::zero(); k];
    let mut labels = Vec::with_capacity(n);
    for nb in neighbors {
        let lambda: Vec<S> = sample_normal_clamped(rng, lambda_mean, lambda_std, k)?;
        let qi = qbar.row(nb.anchor);
        let qn = qbar.row(nb.neighbor);
        for c in 0..k {
            fused[c] = lambda[c] * qi[c] + (S::one() - lambda[c]) * qn[c];
        }
        labels.push(match rule {
            FusionRule::MostSimilar => argmax(&fused),
            FusionRule::LiteralMin => argmin(&fused),
        });
    }
    Ok(labels)
}

/// Falls back to the plain nearest neighbor when the anchor is the only
/// confident sample and no home sample exists.
pub(crate) fn home_or_nearest<S: Scalar>(
    home: Result<usize>,
    query: &[S],
    anchor: usize,
    pool: &CosinePool<'_, S>,
) -> Result<usize> {
    match home {
        Err(Error::ChainExhausted { .. } | Error::AllExcluded) => {
            log::warn!("sample {anchor} has no home sample; using its nearest neighbor");
            Ok(dynamical_nnh_in(query, anchor, pool)?.neighbor)
        }
        other => other,
    }
}

/// Builds the neighborhoods of the cached features for this epoch.
fn static_geometry<S: Scalar>(
    hbar: &RealMatrix<S>,
    confident: Option<&ConfidentSet<S>>,
    chain: bool,
) -> Result<Vec<Neighborhood>> {
    let Some(confident) = confident else {
        return static_nnh(hbar);
    };
    let pool = CosinePool::new(hbar);
    (0..hbar.rows())
        .map(|i| {
            let home = if chain {
                chain_search_from(hbar.row(i), i, &pool, confident).map(|r| r.home)
            } else {
                nearest_confident(hbar.row(i), i, &pool, confident)
            };
            let neighbor = home_or_nearest(home, hbar.row(i), i, &pool)?;
            Ok(Neighborhood {
                anchor: i,
                neighbor,
                mode: GeometryMode::Shnnh,
            })
        })
        .collect()
}

/// The initialization stage of an epoch: cached features, centroids,
/// similarity logits, confident set (SHNNH), static geometry and fused
/// pseudo-labels. If the confident set comes out empty the epoch falls back to
/// plain NNH geometry.
pub fn build_epoch_cache<S: Scalar>(
    model: &TargetModel<S>,
    xt: &RealMatrix<S>,
    cfg: &AdaptConfig,
    rng: &mut SeededRng,
) -> Result<AuxiliaryCache<S>> {
    let AuxFeatures { hbar, bbar, vbar, pbar } = compute_aux(model, xt)?;
    let Centroids { centroids, warnings } = weighted_centroids(&bbar, &pbar, cfg.kmeans_rounds)?;
    let qbar = similarity_logits(&bbar, &centroids)?;
    let confident = match cfg.mode {
        GeometryMode::Nnh => None,
        GeometryMode::Shnnh => {
            let rule = if cfg.eq11_literal_min {
                DistanceRule::LiteralMin
            } else {
                DistanceRule::NearestCentroid
            };
            match confident_split(&pbar, &qbar, rule, cfg.confident_rule) {
                Ok(c) => Some(c),
                Err(Error::NoConfidentSamples) => {
                    log::warn!("no confident samples this epoch; using plain nearest neighborhoods");
                    None
                }
                Err(e) => return Err(e),
            }
        }
    };
    let neighbors = static_geometry(&hbar, confident.as_ref(), cfg.chain_search)?;
    let rule = if cfg.eq5_literal_min {
        FusionRule::LiteralMin
    } else {
        FusionRule::MostSimilar
    };
    let pseudo = fused_pseudo_labels(&qbar, &neighbors, rng, cfg.alpha, cfg.lambda_std(), rule)?;
    Ok(AuxiliaryCache {
        hbar,
        bbar,
        vbar,
        pbar,
        qbar,
        centroids,
        pseudo,
        neighbors,
        confident,
        centroid_warnings: warnings,
    })
}
