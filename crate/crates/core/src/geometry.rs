//! Neighborhood construction over cached deep features.
//!
//! All searches are exhaustive cosine-distance scans. Ties go to the lowest
//! index, and pool rows with zero norm are never returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{clamp_unit, dot, entropy_unchecked, median, norm, RealMatrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    Nnh,
    Shnnh,
}

impl std::fmt::Display for GeometryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeometryMode::Nnh => "nnh",
            GeometryMode::Shnnh => "shnnh",
        })
    }
}

impl std::str::FromStr for GeometryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nnh" => Ok(GeometryMode::Nnh),
            "shnnh" => Ok(GeometryMode::Shnnh),
            other => Err(Error::Config(format!("unknown geometry mode {other:?}"))),
        }
    }
}

/// An anchor sample and the sample paired with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighborhood {
    pub anchor: usize,
    pub neighbor: usize,
    pub mode: GeometryMode,
}

/// A pool of rows with precomputed norms for repeated cosine scans.
#[derive(Debug, Clone)]
pub struct CosinePool<'a, S> {
    rows: &'a RealMatrix<S>,
    norms: Vec<S>,
    zero_rows: usize,
}

impl<'a, S: Scalar> CosinePool<'a, S> {
    pub fn new(rows: &'a RealMatrix<S>) -> Self {
        let norms: Vec<S> = rows.iter_rows().map(norm).collect();
        let zero_rows = norms.iter().filter(|&&n| n == S::zero()).count();
        if zero_rows > 0 {
            log::warn!("{zero_rows} zero-norm rows skipped by neighbor search");
        }
        Self {
            rows,
            norms,
            zero_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    /// Rows skipped because their norm is zero.
    pub fn zero_rows(&self) -> usize {
        self.zero_rows
    }

    pub fn row(&self, i: usize) -> &[S] {
        self.rows.row(i)
    }

    /// Row minimizing `1 − cos(query, row)` among rows not excluded.
    pub fn nearest(&self, query: &[S], excluded: impl Fn(usize) -> bool) -> Result<usize> {
        if query.len() != self.rows.cols() {
            return Err(Error::ShapeMismatch(format!(
                "query of length {} against rows of width {}",
                query.len(),
                self.rows.cols()
            )));
        }
        let qn = norm(query);
        if qn == S::zero() {
            return Err(Error::ZeroVector("neighbor query".into()));
        }
        let mut best: Option<(usize, S)> = None;
        for (j, &rn) in self.norms.iter().enumerate() {
            if rn == S::zero() || excluded(j) {
                continue;
            }
            let dist = S::one() - clamp_unit(dot(query, self.rows.row(j)) / (qn * rn));
            match best {
                Some((_, bd)) if dist >= bd => {}
                _ => best = Some((j, dist)),
            }
        }
        best.map(|(j, _)| j).ok_or(Error::AllExcluded)
    }
}

/// Nearest row of `pool` to `query` by cosine distance, skipping `exclude`.
pub fn nearest_neighbor<S: Scalar>(query: &[S], pool: &RealMatrix<S>, exclude: &[usize]) -> Result<usize> {
    CosinePool::new(pool).nearest(query, |j| exclude.contains(&j))
}

/// Each cached feature paired with its nearest other cached feature.
pub fn static_nnh<S: Scalar>(hbar: &RealMatrix<S>) -> Result<Vec<Neighborhood>> {
    if hbar.rows() < 2 {
        return Err(Error::InvalidInput(format!(
            "neighborhoods need at least 2 samples, got {}",
            hbar.rows()
        )));
    }
    let pool = CosinePool::new(hbar);
    (0..hbar.rows())
        .map(|i| {
            let neighbor = pool.nearest(hbar.row(i), |j| j == i)?;
            Ok(Neighborhood {
                anchor: i,
                neighbor,
                mode: GeometryMode::Nnh,
            })
        })
        .collect()
}

/// Neighbor of a freshly computed feature among the cached features,
/// excluding the anchor's own cached row.
pub fn dynamical_nnh<S: Scalar>(h_current: &[S], anchor: usize, hbar: &RealMatrix<S>) -> Result<Neighborhood> {
    dynamical_nnh_in(h_current, anchor, &CosinePool::new(hbar))
}

pub fn dynamical_nnh_in<S: Scalar>(h_current: &[S], anchor: usize, pool: &CosinePool<'_, S>) -> Result<Neighborhood> {
    let neighbor = pool.nearest(h_current, |j| j == anchor)?;
    Ok(Neighborhood {
        anchor,
        neighbor,
        mode: GeometryMode::Nnh,
    })
}

/// How the per-sample distance to the clusters is read from the similarity
/// logits when splitting off the confident group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceRule {
    /// `1 − max_k q̄_{i,k}`: cosine distance to the nearest centroid.
    #[default]
    NearestCentroid,
    /// `min_k q̄_{i,k}` taken literally.
    LiteralMin,
}

/// Which low-score groups form the confident set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfidentRule {
    #[default]
    Intersection,
    EntropyOnly,
    DistanceOnly,
}

/// Confident members of the target set for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSet<S> {
    pub members: Vec<bool>,
    pub entropy_members: Vec<bool>,
    pub distance_members: Vec<bool>,
    pub gamma_e: S,
    pub gamma_d: S,
}

impl<S: Scalar> ConfidentSet<S> {
    pub fn contains(&self, i: usize) -> bool {
        self.members[i]
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.members.len()).filter(|&i| self.members[i]).collect()
    }

    /// A set with the given members; thresholds are unset (NaN).
    pub fn from_members(members: Vec<bool>) -> Self {
        Self {
            entropy_members: members.clone(),
            distance_members: members.clone(),
            members,
            gamma_e: S::nan(),
            gamma_d: S::nan(),
        }
    }
}

/// Flags the scores strictly below their median, returning the median.
pub fn below_median<S: Scalar>(scores: &[S]) -> Result<(Vec<bool>, S)> {
    let m = median(scores)?;
    Ok((scores.iter().map(|&s| s < m).collect(), m))
}

/// Per-sample distance scores from the similarity logits.
pub fn centroid_distances<S: Scalar>(qbar: &RealMatrix<S>, rule: DistanceRule) -> Vec<S> {
    qbar.iter_rows()
        .map(|q| match rule {
            DistanceRule::NearestCentroid => S::one() - q.iter().copied().fold(S::neg_infinity(), S::max),
            DistanceRule::LiteralMin => q.iter().copied().fold(S::infinity(), S::min),
        })
        .collect()
}

/// Splits the target set into confident and unconfident samples: entropy of
/// the cached prediction below its median, and distance to the clusters below
/// its median, combined according to `combine`.
pub fn confident_split<S: Scalar>(
    pbar: &RealMatrix<S>,
    qbar: &RealMatrix<S>,
    rule: DistanceRule,
    combine: ConfidentRule,
) -> Result<ConfidentSet<S>> {
    if pbar.rows() != qbar.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows vs {} similarity rows",
            pbar.rows(),
            qbar.rows()
        )));
    }
    if pbar.data().iter().any(|&x| x < S::zero()) {
        return Err(Error::InvalidInput("negative probability".into()));
    }
    let entropies: Vec<S> = pbar.iter_rows().map(entropy_unchecked).collect();
    let (entropy_members, gamma_e) = below_median(&entropies)?;
    let (distance_members, gamma_d) = below_median(&centroid_distances(qbar, rule))?;
    let members: Vec<bool> = match combine {
        ConfidentRule::Intersection => entropy_members
            .iter()
            .zip(&distance_members)
            .map(|(&a, &b)| a && b)
            .collect(),
        ConfidentRule::EntropyOnly => entropy_members.clone(),
        ConfidentRule::DistanceOnly => distance_members.clone(),
    };
    if !members.iter().any(|&m| m) {
        return Err(Error::NoConfidentSamples);
    }
    Ok(ConfidentSet {
        members,
        entropy_members,
        distance_members,
        gamma_e,
        gamma_d,
    })
}

/// Home sample found by a chain search, plus the guiding samples visited.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainResult {
    pub home: usize,
    pub path: Vec<usize>,
}

/// Chain search from a cached sample: repeatedly hop to the nearest sample
/// not yet visited until a confident sample is reached. The start sample is
/// marked visited up front and is never returned.
pub fn chain_search<S: Scalar>(start: usize, hbar: &RealMatrix<S>, confident: &ConfidentSet<S>) -> Result<usize> {
    let pool = CosinePool::new(hbar);
    chain_search_from(hbar.row(start), start, &pool, confident).map(|r| r.home)
}

/// Chain search whose first hop starts from `query` (a fresh feature of
/// sample `anchor`) instead of a cached row.
pub fn chain_search_from<S: Scalar>(
    query: &[S],
    anchor: usize,
    pool: &CosinePool<'_, S>,
    confident: &ConfidentSet<S>,
) -> Result<ChainResult> {
    let n = pool.len();
    if n < 2 {
        return Err(Error::InvalidInput("chain search needs at least 2 samples".into()));
    }
    if confident.members.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "confident set over {} samples, pool has {n}",
            confident.members.len()
        )));
    }
    if confident.is_empty() {
        return Err(Error::NoConfidentSamples);
    }
    let mut visited = vec![false; n];
    visited[anchor] = true;
    let mut path = Vec::new();
    let mut guide = pool.nearest(query, |j| visited[j]).map_err(|e| match e {
        Error::AllExcluded => Error::ChainExhausted { start: anchor },
        other => other,
    })?;
    loop {
        visited[guide] = true;
        path.push(guide);
        if confident.contains(guide) {
            return Ok(ChainResult { home: guide, path });
        }
        guide = match pool.nearest(pool.row(guide), |j| visited[j]) {
            Ok(j) => j,
            Err(Error::AllExcluded) => return Err(Error::ChainExhausted { start: anchor }),
            Err(e) => return Err(e),
        };
    }
}

/// Nearest confident sample to `query`, skipping the anchor. This is the
/// direct search used when chain search is disabled.
pub fn nearest_confident<S: Scalar>(
    query: &[S],
    anchor: usize,
    pool: &CosinePool<'_, S>,
    confident: &ConfidentSet<S>,
) -> Result<usize> {
    pool.nearest(query, |j| j == anchor || !confident.contains(j))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> RealMatrix<f64> {
        RealMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn nearest_with_exclusion() {
        let pool = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.1]]);
        assert_eq!(nearest_neighbor(&[1.0, 0.0], &pool, &[0]).unwrap(), 2);
        assert_eq!(nearest_neighbor(&[0.0, 1.0], &pool, &[]).unwrap(), 1);
        assert!(matches!(
            nearest_neighbor(&[1.0, 0.0], &pool, &[0, 1, 2]),
            Err(Error::AllExcluded)
        ));
        assert!(matches!(
            nearest_neighbor(&[0.0, 0.0], &pool, &[]),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let pool = m(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(nearest_neighbor(&[1.0, 1.0], &pool, &[]).unwrap(), 1);
        let pool = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(nearest_neighbor(&[1.0, 1.0], &pool, &[]).unwrap(), 0);
    }

    #[test]
    fn zero_rows_are_skipped() {
        let rows = m(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let pool = CosinePool::new(&rows);
        assert_eq!(pool.zero_rows(), 1);
        assert_eq!(pool.nearest(&[0.1, 1.0], |_| false).unwrap(), 2);
        assert_eq!(pool.nearest(&[1.0, 0.0], |j| j == 1).unwrap(), 2);
    }

    #[test]
    fn static_pairs() {
        let two = m(&[&[1.0, 0.2], &[0.3, 1.0]]);
        let nb = static_nnh(&two).unwrap();
        assert_eq!((nb[0].neighbor, nb[1].neighbor), (1, 0));
        assert!(static_nnh(&m(&[&[1.0, 0.0]])).is_err());
        let dup = m(&[&[1.0, 2.0], &[3.0, -1.0], &[1.0, 2.0], &[0.5, 0.6]]);
        assert_eq!(static_nnh(&dup).unwrap()[0].neighbor, 2);
    }

    #[test]
    fn dynamical_reduces_to_static() {
        let h = m(&[&[1.0, 0.1], &[0.9, 0.5], &[-1.0, 0.2], &[0.1, 1.0]]);
        let st = static_nnh(&h).unwrap();
        for i in 0..4 {
            let dy = dynamical_nnh(h.row(i), i, &h).unwrap();
            assert_eq!(dy, st[i]);
            assert_ne!(dy.neighbor, i);
        }
    }

    #[test]
    fn dynamical_follows_the_current_feature() {
        // cached: two clusters around +x and +y. Anchor 0 was cached near +x;
        // after an update its fresh feature points along +y.
        let h = m(&[&[1.0, 0.05], &[1.0, 0.1], &[0.1, 1.0], &[0.05, 1.0]]);
        assert_eq!(static_nnh(&h).unwrap()[0].neighbor, 1);
        let moved = [0.02, 1.0];
        // brute force: distances from `moved` to rows 1, 2, 3
        let d: Vec<f64> = (1..4)
            .map(|j| crate::numeric::cosine_distance(&moved, h.row(j)).unwrap())
            .collect();
        assert!(d[2] < d[1] && d[1] < d[0]);
        assert_eq!(dynamical_nnh(&moved, 0, &h).unwrap().neighbor, 3);
    }

    #[test]
    fn median_split_example() {
        let (flags, g) = below_median(&[0.1f64, 0.2, 0.3, 0.4]).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
        assert_eq!(flags, vec![true, true, false, false]);
    }

    #[test]
    fn identical_predictions_leave_no_confident_samples() {
        let p = RealMatrix::from_fn(5, 3, |_, j| [0.5f64, 0.3, 0.2][j]);
        let q = RealMatrix::from_fn(5, 3, |i, _| 0.1 * i as f64);
        assert!(matches!(
            confident_split(&p, &q, DistanceRule::NearestCentroid, ConfidentRule::Intersection),
            Err(Error::NoConfidentSamples)
        ));
    }

    #[test]
    fn intersection_of_groups() {
        // entropies fall below the median for rows 0,1,2 of 6; distances for rows 1,2,3
        let p = RealMatrix::from_rows(&[
            vec![0.98f64, 0.01, 0.01],
            vec![0.97, 0.02, 0.01],
            vec![0.96, 0.03, 0.01],
            vec![0.4, 0.3, 0.3],
            vec![0.34, 0.33, 0.33],
            vec![0.35, 0.33, 0.32],
        ])
        .unwrap();
        let q = RealMatrix::from_rows(&[
            vec![0.5f64, 0.2, 0.1],
            vec![0.95, 0.2, 0.1],
            vec![0.96, 0.2, 0.1],
            vec![0.97, 0.2, 0.1],
            vec![0.6, 0.2, 0.1],
            vec![0.55, 0.2, 0.1],
        ])
        .unwrap();
        let c = confident_split(&p, &q, DistanceRule::NearestCentroid, ConfidentRule::Intersection).unwrap();
        assert_eq!(c.entropy_members, vec![true, true, true, false, false, false]);
        assert_eq!(c.distance_members, vec![false, true, true, true, false, false]);
        assert_eq!(c.indices(), vec![1, 2]);
        let e = confident_split(&p, &q, DistanceRule::NearestCentroid, ConfidentRule::EntropyOnly).unwrap();
        assert_eq!(e.indices(), vec![0, 1, 2]);
        let d = confident_split(&p, &q, DistanceRule::NearestCentroid, ConfidentRule::DistanceOnly).unwrap();
        assert_eq!(d.indices(), vec![1, 2, 3]);
    }

    #[test]
    fn literal_min_rule_reads_smallest_logit() {
        let q = m(&[&[0.9, 0.1], &[0.6, 0.5]]);
        assert_eq!(centroid_distances(&q, DistanceRule::LiteralMin), vec![0.1, 0.5]);
        let nc = centroid_distances(&q, DistanceRule::NearestCentroid);
        assert!((nc[0] - 0.1).abs() < 1e-15 && (nc[1] - 0.4).abs() < 1e-15);
    }

    fn line() -> RealMatrix<f64> {
        // 1-D positions 0..3 lifted onto a constant second coordinate
        m(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 1.0], &[3.0, 1.0]])
    }

    #[test]
    fn chain_walks_along_a_line() {
        let h = line();
        let c = ConfidentSet::from_members(vec![false, false, false, true]);
        let pool = CosinePool::new(&h);
        let r = chain_search_from(h.row(0), 0, &pool, &c).unwrap();
        assert_eq!(r.path, vec![1, 2, 3]);
        assert_eq!(r.home, 3);
        assert_eq!(chain_search(0, &h, &c).unwrap(), 3);
    }

    #[test]
    fn chain_stops_at_first_confident_neighbor() {
        let h = line();
        let c = ConfidentSet::from_members(vec![false, true, false, false]);
        let r = chain_search_from(h.row(0), 0, &CosinePool::new(&h), &c).unwrap();
        assert_eq!(r.path, vec![1]);
    }

    #[test]
    fn confident_start_still_moves() {
        let h = line();
        let c = ConfidentSet::from_members(vec![true, false, false, true]);
        let home = chain_search(0, &h, &c).unwrap();
        assert_eq!(home, 3);
        let c = ConfidentSet::from_members(vec![true, false, false, false]);
        assert!(matches!(chain_search(0, &h, &c), Err(Error::ChainExhausted { start: 0 })));
    }

    #[test]
    fn no_chain_jumps_straight_to_confident() {
        let h = line();
        let c = ConfidentSet::from_members(vec![false, false, false, true]);
        let pool = CosinePool::new(&h);
        assert_eq!(nearest_confident(h.row(0), 0, &pool, &c).unwrap(), 3);
    }
}
