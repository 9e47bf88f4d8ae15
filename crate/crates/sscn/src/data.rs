//! Point-cloud loading, augmentation, voxelization, and prediction
//! projection.
//!
//! File formats: a points file has one point per line (whitespace-separated
//! reals, `d` coordinates optionally followed by feature values, `#`
//! comments); a labels file has one non-negative integer per line, aligned
//! with the points file; a category manifest maps sample ids to categories
//! and categories to their allowed part labels.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tensor::{Coordinate, SparseTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// World-space coordinates, one d-vector per point.
    pub points: Vec<Vec<f64>>,
    /// Optional per-point feature vectors (e.g. RGB in [-1,1] plus an
    /// indicator 1).
    pub point_features: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<usize>>,
    pub category: Option<usize>,
}

impl PointCloud {
    pub fn dims(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a points file (and optional aligned labels file). Columns past
/// the first `dims` are per-point features.
pub fn load_point_cloud(
    points_path: &Path,
    labels_path: Option<&Path>,
    dims: usize,
) -> Result<PointCloud> {
    let text = std::fs::read_to_string(points_path).map_err(Error::Io)?;
    let mut cloud = parse_points(&text, points_path, dims)?;
    if let Some(lp) = labels_path {
        let ltext = std::fs::read_to_string(lp).map_err(Error::Io)?;
        let labels = parse_labels(&ltext, lp)?;
        if labels.len() != cloud.points.len() {
            return Err(Error::Data(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.points.len()
            )));
        }
        cloud.labels = Some(labels);
    }
    Ok(cloud)
}

pub fn parse_points(text: &str, path: &Path, dims: usize) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut feat_width: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    parse_error(path, lineno + 1, format!("bad number {tok:?}"))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() < dims {
            return Err(parse_error(
                path,
                lineno + 1,
                format!("{} values, need at least {dims}", vals.len()),
            ));
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(parse_error(path, lineno + 1, "non-finite coordinate"));
        }
        let width = vals.len() - dims;
        match feat_width {
            None => feat_width = Some(width),
            Some(w) if w != width => {
                return Err(parse_error(
                    path,
                    lineno + 1,
                    format!("inconsistent column count: {} vs {}", dims + w, vals.len()),
                ))
            }
            _ => {}
        }
        points.push(vals[..dims].to_vec());
        if width > 0 {
            features.push(vals[dims..].to_vec());
        }
    }
    let point_features = match feat_width {
        Some(w) if w > 0 => Some(features),
        _ => None,
    };
    Ok(PointCloud {
        points,
        point_features,
        labels: None,
        category: None,
    })
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|_| {
            parse_error(path, lineno + 1, format!("bad label {line:?}"))
        })?);
    }
    Ok(labels)
}

/// Serializes a cloud in the points-file format (for round-trip tests and
/// the voxelize subcommand's input conventions).
pub fn write_point_cloud(pc: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in pc.points.iter().enumerate() {
        let mut cols: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        if let Some(f) = &pc.point_features {
            cols.extend(f[i].iter().map(|v| format!("{v}")));
        }
        let _ = writeln!(out, "{}", cols.join(" "));
    }
    out
}

/// Centers the cloud and rescales it to fit in a sphere of diameter `S`
/// (max point norm exactly S/2; all-identical clouds collapse to the
/// origin).
pub fn normalize_to_sphere(pc: &PointCloud, s: f64) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::Data("empty point cloud".into()));
    }
    let d = pc.dims();
    let n = pc.len() as f64;
    let mut centroid = vec![0.0; d];
    for p in &pc.points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v / n;
        }
    }
    let mut max_norm = 0.0f64;
    let centered: Vec<Vec<f64>> = pc
        .points
        .iter()
        .map(|p| {
            let q: Vec<f64> = p.iter().zip(&centroid).map(|(v, c)| v - c).collect();
            max_norm = max_norm.max(q.iter().map(|x| x * x).sum::<f64>().sqrt());
            q
        })
        .collect();
    let scale = if max_norm > 0.0 { s / 2.0 / max_norm } else { 0.0 };
    Ok(PointCloud {
        points: centered
            .into_iter()
            .map(|q| q.iter().map(|x| x * scale).collect())
            .collect(),
        ..pc.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    None,
    Rotation,
    Affine,
}

impl AugmentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMode::None),
            "rotation" => Ok(AugmentMode::Rotation),
            "affine" => Ok(AugmentMode::Affine),
            other => Err(Error::Config(format!("unknown augmentation {other:?}"))),
        }
    }
}

/// Uniform random 3D rotation matrix (row-major 3x3) via a normalized
/// random quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Random rotation (d = 3 only) or random affine transform
/// (I + U(-eps, eps) entries, composed with a rotation).
pub fn augment(
    pc: &PointCloud,
    mode: AugmentMode,
    affine_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    if mode == AugmentMode::None {
        return Ok(pc.clone());
    }
    if pc.dims() != 3 && !pc.is_empty() {
        return Err(Error::Data("augmentation requires 3D points".into()));
    }
    let rot = random_rotation(rng);
    let mut m = rot;
    if mode == AugmentMode::Affine {
        let mut jitter = [[0.0f64; 3]; 3];
        for (i, row) in jitter.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-affine_eps..affine_eps);
            }
        }
        // m = jitter * rot
        let mut prod = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                prod[i][j] = (0..3).map(|k| jitter[i][k] * rot[k][j]).sum();
            }
        }
        m = prod;
    }
    let points = pc
        .points
        .iter()
        .map(|p| {
            (0..3)
                .map(|i| (0..3).map(|j| m[i][j] * p[j]).sum())
                .collect()
        })
        .collect();
    Ok(PointCloud {
        points,
        ..pc.clone()
    })
}

#[derive(Debug, Clone)]
pub struct VoxelSample<T> {
    pub tensor: SparseTensor<T>,
    /// Majority-vote label per active site (aligned with tensor rows);
    /// empty when the cloud is unlabeled.
    pub voxel_labels: Vec<usize>,
    /// Active-site row for each point, `None` when the point fell outside
    /// the grid.
    pub point_to_voxel: Vec<Option<usize>>,
    pub category: Option<usize>,
}

/// Places the (already normalized) sphere uniformly at random inside a
/// `grid_size`^d grid and bins points into half-open unit cells. Voxel
/// features are point counts rescaled so active voxels have mean density 1;
/// when per-point features are present they are averaged into additional
/// channels. Labels are per-voxel majority votes, ties to the smallest id.
pub fn voxelize<T: Scalar>(
    pc: &PointCloud,
    s: f64,
    grid_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<VoxelSample<T>> {
    if pc.is_empty() {
        return Err(Error::Data("empty point cloud".into()));
    }
    let d = pc.dims();
    if (grid_size as f64) < s {
        return Err(Error::Data(format!(
            "sphere of diameter {s} does not fit in grid {grid_size}"
        )));
    }
    let center: Vec<f64> = (0..d)
        .map(|_| {
            let lo = s / 2.0;
            let hi = grid_size as f64 - s / 2.0;
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        })
        .collect();
    let feat_dim = pc.point_features.as_ref().map_or(0, |f| f[0].len());
    let planes = 1 + feat_dim;
    let mut tensor = SparseTensor::<T>::new(d, &vec![grid_size; d], 1, planes)?;
    let mut counts: Vec<f64> = Vec::new();
    let mut feat_sums: Vec<Vec<f64>> = Vec::new();
    let mut label_votes: Vec<HashMap<usize, usize>> = Vec::new();
    let mut point_to_voxel = Vec::with_capacity(pc.len());
    for (i, p) in pc.points.iter().enumerate() {
        let mut spatial = Vec::with_capacity(d);
        let mut inside = true;
        for (j, &x) in p.iter().enumerate() {
            let world = x + center[j];
            if !(0.0..grid_size as f64 + 1e-9).contains(&world) {
                inside = false;
                break;
            }
            // half-open cells [k, k+1); the far sphere boundary joins the
            // last cell
            spatial.push((world.floor() as i32).min(grid_size as i32 - 1).max(0));
        }
        if !inside {
            point_to_voxel.push(None);
            continue;
        }
        let c = Coordinate::new(0, &spatial);
        let row = match tensor.row_of(&c) {
            Some(r) => r,
            None => {
                tensor.set_site(c, &vec![T::zero(); planes])?;
                counts.push(0.0);
                feat_sums.push(vec![0.0; feat_dim]);
                label_votes.push(HashMap::new());
                counts.len() - 1
            }
        };
        counts[row] += 1.0;
        if let Some(f) = &pc.point_features {
            for (acc, v) in feat_sums[row].iter_mut().zip(&f[i]) {
                *acc += v;
            }
        }
        if let Some(labels) = &pc.labels {
            *label_votes[row].entry(labels[i]).or_insert(0) += 1;
        }
        point_to_voxel.push(Some(row));
    }
    let active = counts.len();
    if active == 0 {
        return Err(Error::Data("no point landed inside the grid".into()));
    }
    let mean = counts.iter().sum::<f64>() / active as f64;
    let feats = tensor.features_mut();
    for row in 0..active {
        feats.set(row, 0, T::from_f64(counts[row] / mean));
        for (j, &sum) in feat_sums[row].iter().enumerate() {
            feats.set(row, 1 + j, T::from_f64(sum / counts[row]));
        }
    }
    let voxel_labels = if pc.labels.is_some() {
        label_votes
            .iter()
            .map(|votes| {
                // majority, ties broken by smallest label id
                votes
                    .iter()
                    .map(|(&l, &n)| (n, std::cmp::Reverse(l)))
                    .max()
                    .map(|(_, std::cmp::Reverse(l))| l)
                    .unwrap()
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(VoxelSample {
        tensor,
        voxel_labels,
        point_to_voxel,
        category: pc.category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Deterministic train/validation assignment from the first bit of a
/// cryptographic digest of the sample identifier.
pub fn split_by_hash(identifier: &str) -> Split {
    let digest = Sha256::digest(identifier.as_bytes());
    if digest[0] & 0x80 == 0 {
        Split::Train
    } else {
        Split::Validation
    }
}

/// Copies each voxel's class distribution to the points it contains;
/// points outside the grid get the uniform distribution.
pub fn project_predictions<T: Scalar>(
    sample_map: &[Option<usize>],
    voxel_probs: &Matrix<T>,
) -> Matrix<T> {
    let c = voxel_probs.cols();
    let uniform = T::one() / T::from_f64(c as f64);
    let mut out = Matrix::zeros(sample_map.len(), c);
    for (i, row) in sample_map.iter().enumerate() {
        match row {
            Some(r) => out.row_mut(i).copy_from_slice(voxel_probs.row(*r)),
            None => out.row_mut(i).fill(uniform),
        }
    }
    out
}

/// Merges single-sample voxelizations into one batched tensor. Returns the
/// tensor plus per-row labels (rows ordered sample by sample, insertion
/// order within each).
pub fn merge_batch<T: Scalar>(samples: &[&VoxelSample<T>]) -> Result<(SparseTensor<T>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let dims = first.tensor.dims();
    let planes = first.tensor.planes();
    let spatial = first.tensor.spatial_size().to_vec();
    let mut merged = SparseTensor::<T>::new(dims, &spatial, samples.len(), planes)?;
    let mut labels = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        if s.tensor.spatial_size() != spatial || s.tensor.planes() != planes {
            return Err(Error::ShapeMismatch("batch samples disagree on geometry".into()));
        }
        for (row, c) in s.tensor.coords().iter().enumerate() {
            let mut cb = *c;
            cb.batch = b as u32;
            merged.set_site(cb, s.tensor.features().row(row))?;
            labels.push(s.voxel_labels.get(row).copied().unwrap_or(0));
        }
    }
    Ok((merged, labels))
}

// ---------------------------------------------------------------------------
// Category manifest

/// Maps sample ids to categories and categories to their allowed part
/// labels (drives test-time masking).
#[derive(Debug, Clone, Default)]
pub struct CategoryManifest {
    pub sample_category: HashMap<String, usize>,
    pub category_parts: HashMap<usize, Vec<usize>>,
}

impl CategoryManifest {
    /// Line format: `category <id>: <part> <part> ...` or
    /// `sample <id> <category>`; `#` comments.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest = CategoryManifest::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| parse_error(path, lineno + 1, msg);
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("category") => {
                    let id_tok = tokens
                        .next()
                        .ok_or_else(|| err("category needs an id".into()))?;
                    let id_tok = id_tok.strip_suffix(':').unwrap_or(id_tok);
                    let id: usize = id_tok
                        .parse()
                        .map_err(|_| err(format!("bad category id {id_tok:?}")))?;
                    let parts: Vec<usize> = tokens
                        .map(|t| t.parse().map_err(|_| err(format!("bad part {t:?}"))))
                        .collect::<Result<_>>()?;
                    if parts.is_empty() {
                        return Err(err("category needs at least one part".into()));
                    }
                    manifest.category_parts.insert(id, parts);
                }
                Some("sample") => {
                    let id = tokens
                        .next()
                        .ok_or_else(|| err("sample needs an id".into()))?;
                    let cat_tok = tokens
                        .next()
                        .ok_or_else(|| err("sample needs a category".into()))?;
                    let cat: usize = cat_tok
                        .parse()
                        .map_err(|_| err(format!("bad category {cat_tok:?}")))?;
                    manifest.sample_category.insert(id.to_string(), cat);
                }
                Some(other) => return Err(err(format!("unknown record {other:?}"))),
                None => unreachable!(),
            }
        }
        for (id, cat) in &manifest.sample_category {
            if !manifest.category_parts.contains_key(cat) {
                return Err(Error::Data(format!(
                    "sample {id} references undeclared category {cat}"
                )));
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        Self::parse(&text, path)
    }

    /// Boolean class mask for one category over `n_classes` labels.
    pub fn mask(&self, category: usize, n_classes: usize) -> Result<Vec<bool>> {
        let parts = self
            .category_parts
            .get(&category)
            .ok_or_else(|| Error::Data(format!("unknown category {category}")))?;
        let mut mask = vec![false; n_classes];
        for &p in parts {
            if p >= n_classes {
                return Err(Error::Data(format!(
                    "part {p} out of range for {n_classes} classes"
                )));
            }
            mask[p] = true;
        }
        Ok(mask)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut cats: Vec<_> = self.category_parts.iter().collect();
        cats.sort_by_key(|(id, _)| **id);
        for (id, parts) in cats {
            let parts: Vec<String> = parts.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "category {id}: {}", parts.join(" "));
        }
        let mut samples: Vec<_> = self.sample_category.iter().collect();
        samples.sort();
        for (id, cat) in samples {
            let _ = writeln!(out, "sample {id} {cat}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn cloud(points: Vec<Vec<f64>>) -> PointCloud {
        PointCloud {
            points,
            point_features: None,
            labels: None,
            category: None,
        }
    }

    #[test]
    fn parse_three_points() {
        let pc = parse_points("1 2 3\n# comment\n4 5 6\n7 8 9 # trailing\n", Path::new("t"), 3)
            .unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.points[2], vec![7.0, 8.0, 9.0]);
        assert!(pc.point_features.is_none());
    }

    #[test]
    fn parse_points_with_features() {
        let pc = parse_points("0 0 0 0.5 -0.5 1\n1 1 1 0.1 0.2 1\n", Path::new("t"), 3).unwrap();
        assert_eq!(pc.point_features.as_ref().unwrap()[0], vec![0.5, -0.5, 1.0]);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(parse_points("1 2\n", Path::new("t"), 3).is_err());
        assert!(parse_points("1 2 3\n1 2 3 4\n", Path::new("t"), 3).is_err());
        assert!(parse_points("1 2 nan\n", Path::new("t"), 3).is_err());
        assert!(parse_labels("1\nx\n", Path::new("t")).is_err());
    }

    #[test]
    fn points_round_trip() {
        let pc = PointCloud {
            points: vec![vec![0.25, -1.5, 3.0], vec![1.0, 2.0, -0.125]],
            point_features: Some(vec![vec![0.5, 1.0], vec![-0.5, 1.0]]),
            labels: None,
            category: None,
        };
        let text = write_point_cloud(&pc);
        let back = parse_points(&text, Path::new("t"), 3).unwrap();
        assert_eq!(back.points, pc.points);
        assert_eq!(back.point_features, pc.point_features);
    }

    #[test]
    fn normalize_two_points() {
        let pc = cloud(vec![vec![0.0, 0.0, 0.0], vec![10.0, 0.0, 0.0]]);
        let n = normalize_to_sphere(&pc, 16.0).unwrap();
        let dist = (n.points[0][0] - n.points[1][0]).abs();
        assert!((dist - 16.0).abs() < 1e-9);
        assert!((n.points[0][0].abs() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_degenerate_and_random() {
        let single = normalize_to_sphere(&cloud(vec![vec![5.0, 5.0, 5.0]]), 16.0).unwrap();
        assert_eq!(single.points[0], vec![0.0, 0.0, 0.0]);
        assert!(normalize_to_sphere(&cloud(vec![]), 16.0).is_err());
        let mut rng = SeedTree::new(1).stream("pts", &[]);
        let pc = cloud(
            (0..100)
                .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect(),
        );
        let n = normalize_to_sphere(&pc, 48.0).unwrap();
        let max = n
            .points
            .iter()
            .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0f64, f64::max);
        assert!((max - 24.0).abs() < 1e-6);
    }

    #[test]
    fn rotation_preserves_distances() {
        let mut rng = SeedTree::new(2).stream("rot", &[]);
        let pc = cloud(vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0], vec![0.0, 0.0, 0.0]]);
        let r = augment(&pc, AugmentMode::Rotation, 0.1, &mut rng).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                let d0: f64 = pc.points[i]
                    .iter()
                    .zip(&pc.points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d1: f64 = r.points[i]
                    .iter()
                    .zip(&r.points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotated_vector_is_uniform_on_sphere() {
        // chi-squared over octants, 10^4 rotations of a fixed unit vector
        let mut rng = SeedTree::new(3).stream("uniform", &[]);
        let mut octants = [0usize; 8];
        for _ in 0..10_000 {
            let m = random_rotation(&mut rng);
            let v = [m[0][0], m[1][0], m[2][0]];
            let idx = (v[0] > 0.0) as usize * 4 + (v[1] > 0.0) as usize * 2 + (v[2] > 0.0) as usize;
            octants[idx] += 1;
        }
        let expected = 10_000.0 / 8.0;
        let chi2: f64 = octants
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 7 degrees of freedom, 99.9th percentile is 24.3
        assert!(chi2 < 24.3, "chi2 = {chi2}, octants {octants:?}");
    }

    #[test]
    fn augmentation_is_seed_reproducible() {
        let pc = cloud(vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]);
        let seeds = SeedTree::new(4);
        let a = augment(&pc, AugmentMode::Affine, 0.1, &mut seeds.stream("aug", &[7])).unwrap();
        let b = augment(&pc, AugmentMode::Affine, 0.1, &mut seeds.stream("aug", &[7])).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn voxelize_single_point() {
        let pc = cloud(vec![vec![0.0, 0.0, 0.0]]);
        let mut rng = SeedTree::new(5).stream("vox", &[]);
        let s: VoxelSample<f64> = voxelize(&pc, 4.0, 16, &mut rng).unwrap();
        assert_eq!(s.tensor.active_count(), 1);
        assert_eq!(s.tensor.features().get(0, 0), 1.0);
        assert_eq!(s.point_to_voxel, vec![Some(0)]);
    }

    #[test]
    fn voxelize_density_normalization() {
        // two points in one voxel, one elsewhere: counts (2,1) -> (4/3, 2/3)
        let pc = PointCloud {
            points: vec![
                vec![-2.0, 0.0, 0.0],
                vec![-2.0, 0.0, 0.0],
                vec![2.0, 0.0, 0.0],
            ],
            point_features: None,
            labels: Some(vec![1, 2, 0]),
            category: None,
        };
        let mut rng = SeedTree::new(6).stream("vox", &[]);
        let s: VoxelSample<f64> = voxelize(&pc, 6.0, 24, &mut rng).unwrap();
        assert_eq!(s.tensor.active_count(), 2);
        let mut densities: Vec<f64> = (0..2).map(|r| s.tensor.features().get(r, 0)).collect();
        densities.sort_by(f64::total_cmp);
        assert!((densities[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((densities[1] - 4.0 / 3.0).abs() < 1e-12);
        // the shared voxel's label is the tie-broken smallest id
        let shared = s.point_to_voxel[0].unwrap();
        assert_eq!(s.voxel_labels[shared], 1);
        // point_to_voxel is consistent with coordinates
        assert_eq!(s.point_to_voxel[0], s.point_to_voxel[1]);
        assert_ne!(s.point_to_voxel[0], s.point_to_voxel[2]);
    }

    #[test]
    fn voxelize_mass_equals_active_count() {
        let mut rng = SeedTree::new(7).stream("cloud", &[]);
        let pc = cloud(
            (0..500)
                .map(|_| (0..3).map(|_| rng.gen_range(-8.0..8.0)).collect())
                .collect(),
        );
        let s: VoxelSample<f64> = voxelize(&pc, 16.0, 64, &mut rng).unwrap();
        let mass: f64 = (0..s.tensor.active_count())
            .map(|r| s.tensor.features().get(r, 0))
            .sum();
        assert!((mass - s.tensor.active_count() as f64).abs() < 1e-6);
    }

    #[test]
    fn voxelize_rejects_oversized_sphere() {
        let pc = cloud(vec![vec![0.0, 0.0, 0.0]]);
        let mut rng = SeedTree::new(8).stream("vox", &[]);
        assert!(voxelize::<f64>(&pc, 32.0, 16, &mut rng).is_err());
    }

    #[test]
    fn split_is_deterministic_and_balanced() {
        assert_eq!(split_by_hash("sample_001"), split_by_hash("sample_001"));
        let n_train = (0..10_000)
            .filter(|i| split_by_hash(&format!("id{i}")) == Split::Train)
            .count();
        assert!((4800..=5200).contains(&n_train), "{n_train}");
    }

    #[test]
    fn project_predictions_shares_and_uniform() {
        let probs = Matrix::from_rows(1, 4, vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let out = project_predictions(&[Some(0), Some(0), None], &probs);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0)[0], 0.7);
        assert!(out.row(2).iter().all(|&v| v == 0.25));
        // rows stay normalized
        for r in 0..3 {
            assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_batch_two_samples() {
        let pc1 = PointCloud {
            labels: Some(vec![1]),
            ..cloud(vec![vec![0.0, 0.0, 0.0]])
        };
        let pc2 = PointCloud {
            labels: Some(vec![2]),
            ..cloud(vec![vec![0.0, 0.0, 0.0]])
        };
        let mut rng = SeedTree::new(9).stream("vox", &[]);
        let s1: VoxelSample<f64> = voxelize(&pc1, 4.0, 16, &mut rng).unwrap();
        let s2: VoxelSample<f64> = voxelize(&pc2, 4.0, 16, &mut rng).unwrap();
        let (merged, labels) = merge_batch(&[&s1, &s2]).unwrap();
        assert_eq!(merged.batch_size(), 2);
        assert_eq!(merged.active_count(), 2);
        assert_eq!(labels, vec![1, 2]);
    }

    #[test]
    fn manifest_round_trip_and_mask() {
        let text = "# parts\ncategory 0: 0 1\ncategory 1: 2\nsample a 0\nsample b 1\n";
        let m = CategoryManifest::parse(text, Path::new("t")).unwrap();
        assert_eq!(m.sample_category["a"], 0);
        assert_eq!(m.mask(0, 3).unwrap(), vec![true, true, false]);
        assert_eq!(m.mask(1, 3).unwrap(), vec![false, false, true]);
        let back = CategoryManifest::parse(&m.render(), Path::new("t")).unwrap();
        assert_eq!(back.sample_category, m.sample_category);
        assert_eq!(back.category_parts, m.category_parts);
        // undeclared category
        assert!(CategoryManifest::parse("sample x 9\n", Path::new("t")).is_err());
        assert!(CategoryManifest::parse("widget 1\n", Path::new("t")).is_err());
    }
}
