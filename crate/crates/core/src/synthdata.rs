//! Synthetic source/target domain pairs and the dataset CSV format.
//!
//! A source domain is a mixture of `K` isotropic Gaussian blobs. The target
//! domain draws from the same blobs after a rigid rotation in the leading
//! coordinate plane and a translation, with fresh noise.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RealMatrix, Scalar, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Features plus integer labels for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<S> {
    features: RealMatrix<S>,
    labels: Vec<usize>,
    k: usize,
    domain: Domain,
}

impl<S: Scalar> DomainDataset<S> {
    pub fn new(features: RealMatrix<S>, labels: Vec<usize>, k: usize, domain: Domain) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
        }
        let mut seen = vec![false; k];
        for &y in &labels {
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("class {missing} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            k,
            domain,
        })
    }

    pub fn features(&self) -> &RealMatrix<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes the `f0,...,f{d-1},label` CSV format.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        let map_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(map_err)?;
        for (row, &y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|x| format!("{}", x.as_f64())).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(map_err)?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV format. When `k` is `None` the class count is inferred as
    /// one past the largest label.
    pub fn load_csv(path: impl AsRef<Path>, k: Option<usize>, domain: Domain) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(file);
        let headers = match reader.headers() {
            Ok(h) => h.clone(),
            Err(e) => return Err(csv_parse_error(e, 1)),
        };
        if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
            return Err(Error::NoRows);
        }
        let width = headers.len();
        if width < 2 || headers.get(width - 1) != Some("label") {
            return Err(Error::Parse {
                line: 1,
                message: "header must be f0,...,f{d-1},label".into(),
            });
        }
        let d = width - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_parse_error(e, 0))?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != width {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {width} columns, found {}", record.len()),
                });
            }
            for (j, field) in record.iter().take(d).enumerate() {
                let x: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("feature f{j} is not a number: {field:?}"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("feature f{j} is not finite"),
                    });
                }
                data.push(S::lit(x));
            }
            let raw = record[d].trim();
            let y: usize = raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("label is not a non-negative integer: {raw:?}"),
            })?;
            if let Some(k) = k {
                if y >= k {
                    return Err(Error::Parse {
                        line,
                        message: format!("label {y} outside [0, {k})"),
                    });
                }
            }
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(Error::NoRows);
        }
        let k = k.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let features = RealMatrix::new(labels.len(), d, data)?;
        Self::new(features, labels, k, domain)
    }
}

fn csv_parse_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Parameters of the domain shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Rotation angle in radians, applied in the (f0, f1) plane.
    pub rotation: f64,
    /// Translation added after rotation; empty means zero.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Within-class standard deviation in both domains.
    pub noise_std: f64,
    /// Distance between any two class centers.
    pub class_sep: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            noise_std: 1.0,
            class_sep: 4.0,
            seed: 2020,
        }
    }
}

/// Class centers of both domains, exposed for checking the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParams {
    pub source_centers: Vec<Vec<f64>>,
    pub target_centers: Vec<Vec<f64>>,
    pub noise_std: f64,
}

/// Samples a balanced source/target pair.
pub fn generate_pair<S: Scalar>(
    n_per_domain: usize,
    k: usize,
    d: usize,
    spec: &ShiftSpec,
) -> Result<(DomainDataset<S>, DomainDataset<S>)> {
    generate_pair_with_params(n_per_domain, k, d, spec).map(|(s, t, _)| (s, t))
}

pub fn generate_pair_with_params<S: Scalar>(
    n_per_domain: usize,
    k: usize,
    d: usize,
    spec: &ShiftSpec,
) -> Result<(DomainDataset<S>, DomainDataset<S>, DomainParams)> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
    }
    if n_per_domain < k {
        return Err(Error::InvalidInput(format!(
            "{n_per_domain} samples cannot cover {k} classes"
        )));
    }
    if d < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 dimensions, got {d}")));
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(Error::InvalidInput(format!("noise_std = {}", spec.noise_std)));
    }
    if !(spec.class_sep > 0.0) || !spec.class_sep.is_finite() {
        return Err(Error::InvalidInput(format!("class_sep = {}", spec.class_sep)));
    }
    if !spec.rotation.is_finite() {
        return Err(Error::InvalidInput("rotation is not finite".into()));
    }
    let translation = if spec.translation.is_empty() {
        vec![0.0; d]
    } else if spec.translation.len() == d {
        spec.translation.clone()
    } else {
        return Err(Error::InvalidInput(format!(
            "translation has length {}, expected {d}",
            spec.translation.len()
        )));
    };

    let root = SeededRng::new(spec.seed);
    let source_centers = class_centers(k, d, spec.class_sep, &mut root.derive("centers"));
    let shift = |x: &[f64]| -> Vec<f64> {
        let mut y = x.to_vec();
        let (c, s) = (spec.rotation.cos(), spec.rotation.sin());
        y[0] = c * x[0] - s * x[1];
        y[1] = s * x[0] + c * x[1];
        for (yj, tj) in y.iter_mut().zip(&translation) {
            *yj += tj;
        }
        y
    };
    let target_centers: Vec<Vec<f64>> = source_centers.iter().map(|c| shift(c)).collect();

    let labels = balanced_labels(n_per_domain, k);
    let sample = |centers: &[Vec<f64>], rng: &mut SeededRng| -> Result<RealMatrix<S>> {
        let mut data = Vec::with_capacity(n_per_domain * d);
        for &y in &labels {
            for &cj in &centers[y] {
                data.push(S::lit(cj + spec.noise_std * rng.standard_normal()));
            }
        }
        RealMatrix::new(n_per_domain, d, data)
    };
    let xs = sample(&source_centers, &mut root.derive("source-noise"))?;
    let xt = sample(&target_centers, &mut root.derive("target-noise"))?;
    let source = DomainDataset::new(xs, labels.clone(), k, Domain::Source)?;
    let target = DomainDataset::new(xt, labels, k, Domain::Target)?;
    let params = DomainParams {
        source_centers,
        target_centers,
        noise_std: spec.noise_std,
    };
    Ok((source, target, params))
}

/// Labels `0,1,…,K−1,0,1,…` so class sizes differ by at most one.
fn balanced_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

/// Random orthogonal directions scaled so every pair of centers is exactly
/// `sep` apart. With more classes than dimensions the directions are only
/// normalized, so the spacing is approximate.
fn class_centers(k: usize, d: usize, sep: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let radius = sep / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        if basis.len() < d {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * radius).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ShiftSpec {
        ShiftSpec {
            rotation: std::f64::consts::FRAC_PI_4,
            translation: vec![0.5, -0.25, 0.0, 1.0],
            noise_std: 0.7,
            class_sep: 5.0,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_pair::<f64>(60, 3, 4, &spec()).unwrap();
        let b = generate_pair::<f64>(60, 3, 4, &spec()).unwrap();
        assert_eq!(a, b);
        let mut other = spec();
        other.seed = 12;
        assert_ne!(a, generate_pair::<f64>(60, 3, 4, &other).unwrap());
    }

    #[test]
    fn balanced_classes() {
        let (s, t) = generate_pair::<f64>(400, 4, 10, &ShiftSpec::default()).unwrap();
        assert_eq!(s.class_counts(), vec![100; 4]);
        assert_eq!(t.class_counts(), vec![100; 4]);
        assert_eq!(s.domain(), Domain::Source);
        assert_eq!(t.domain(), Domain::Target);
    }

    #[test]
    fn identity_shift_keeps_parameters() {
        let spec = ShiftSpec {
            rotation: 0.0,
            translation: vec![],
            noise_std: 0.0,
            class_sep: 3.0,
            seed: 5,
        };
        let (s, t, p) = generate_pair_with_params::<f64>(40, 4, 6, &spec).unwrap();
        assert_eq!(p.source_centers, p.target_centers);
        assert_eq!(s.features(), t.features());
    }

    #[test]
    fn centers_are_spaced_by_class_sep() {
        let (_, _, p) = generate_pair_with_params::<f64>(40, 4, 10, &spec_d(10)).unwrap();
        for a in 0..4 {
            for b in (a + 1)..4 {
                let dist: f64 = p.source_centers[a]
                    .iter()
                    .zip(&p.source_centers[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((dist - 5.0).abs() < 1e-9, "{dist}");
            }
        }
    }

    fn spec_d(d: usize) -> ShiftSpec {
        ShiftSpec {
            translation: vec![0.3; d],
            ..spec()
        }
    }

    #[test]
    fn target_means_are_shifted_source_means() {
        let spec = ShiftSpec {
            noise_std: 0.0,
            ..spec()
        };
        let (s, t) = generate_pair::<f64>(40, 4, 4, &spec).unwrap();
        let (c, sn) = (spec.rotation.cos(), spec.rotation.sin());
        for class in 0..4 {
            let mean = |ds: &DomainDataset<f64>| {
                let rows: Vec<&[f64]> = ds
                    .features()
                    .iter_rows()
                    .zip(ds.labels())
                    .filter(|(_, &y)| y == class)
                    .map(|(r, _)| r)
                    .collect();
                (0..4)
                    .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                    .collect::<Vec<f64>>()
            };
            let ms = mean(&s);
            let mt = mean(&t);
            let expected = [
                c * ms[0] - sn * ms[1] + spec.translation[0],
                sn * ms[0] + c * ms[1] + spec.translation[1],
                ms[2] + spec.translation[2],
                ms[3] + spec.translation[3],
            ];
            for j in 0..4 {
                assert!((mt[j] - expected[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_pair::<f64>(10, 1, 4, &spec()).is_err());
        assert!(generate_pair::<f64>(2, 3, 4, &spec()).is_err());
        assert!(generate_pair::<f64>(10, 2, 1, &spec()).is_err());
        assert!(generate_pair::<f64>(10, 2, 3, &spec()).is_err()); // translation length 4
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let (s, _) = generate_pair::<f64>(30, 3, 4, &spec()).unwrap();
        s.save_csv(&path).unwrap();
        let back = DomainDataset::<f64>::load_csv(&path, Some(3), Domain::Source).unwrap();
        assert_eq!(back, s);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,f2,f3,label\n"));
        assert!(!text.contains('\r'));
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f0,f1,label\n1,2,0\n3,4,2\n");
        match DomainDataset::<f64>::load_csv(&p, Some(2), Domain::Target) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "b.csv", "f0,f1,label\n1,2,0\n3,x,1\n");
        assert!(matches!(
            DomainDataset::<f64>::load_csv(&p, Some(2), Domain::Target),
            Err(Error::Parse { line: 3, .. })
        ));
        let p = write(&dir, "c.csv", "f0,f1,label\n1,2,0\n3,1\n");
        assert!(matches!(
            DomainDataset::<f64>::load_csv(&p, Some(2), Domain::Target),
            Err(Error::Parse { line: 3, .. })
        ));
        let p = write(&dir, "d.csv", "");
        let err = DomainDataset::<f64>::load_csv(&p, Some(2), Domain::Target).unwrap_err();
        assert_eq!(err.to_string(), "no rows");
        let p = write(&dir, "e.csv", "f0,f1,label\n");
        assert!(matches!(
            DomainDataset::<f64>::load_csv(&p, Some(2), Domain::Target),
            Err(Error::NoRows)
        ));
    }
}
