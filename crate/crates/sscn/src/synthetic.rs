//! Synthetic "curves with junctions" dataset.
//!
//! Each sample is a star of 3-5 straight branches radiating from a common
//! junction, sampled densely with points. Points are labeled by local
//! geometric class: 0 = curve interior, 1 = junction neighborhood,
//! 2 = branch endpoint. The classes are decidable from voxel-level
//! geometry, so a small segmentation network can learn the task quickly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{CategoryManifest, PointCloud};
use crate::rng::SeedTree;

pub const N_CLASSES: usize = 3;
pub const CLASS_CURVE: usize = 0;
pub const CLASS_JUNCTION: usize = 1;
pub const CLASS_ENDPOINT: usize = 2;

/// Distance along a branch (in point units) labeled as junction / endpoint.
const JUNCTION_RADIUS: f64 = 2.0;
const ENDPOINT_RADIUS: f64 = 2.0;

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: Vec<f64> = (0..3).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// One star-shaped cloud with per-point geometric labels.
pub fn generate_cloud(rng: &mut ChaCha8Rng) -> PointCloud {
    let branches = rng.gen_range(3..=5usize);
    let mut dirs: Vec<[f64; 3]> = Vec::new();
    while dirs.len() < branches {
        let d = unit_vector(rng);
        // keep branches angularly separated so their voxels do not overlap
        if dirs
            .iter()
            .all(|e| e.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() < 0.7)
        {
            dirs.push(d);
        }
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for dir in dirs {
        let len = rng.gen_range(6.0..8.0f64);
        let step = 0.1;
        let mut t = 0.0;
        while t <= len {
            let jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
            points.push((0..3).map(|j| dir[j] * t + jitter[j]).collect());
            labels.push(if t < JUNCTION_RADIUS {
                CLASS_JUNCTION
            } else if t > len - ENDPOINT_RADIUS {
                CLASS_ENDPOINT
            } else {
                CLASS_CURVE
            });
            t += step;
        }
    }
    PointCloud {
        points,
        point_features: None,
        labels: Some(labels),
        category: Some(0),
    }
}

/// `count` labeled clouds with stable ids, plus the single-category
/// manifest covering them.
pub fn generate_dataset(seeds: &SeedTree, count: usize) -> (Vec<(String, PointCloud)>, CategoryManifest) {
    let samples: Vec<(String, PointCloud)> = (0..count)
        .map(|i| {
            let mut rng = seeds.stream("synthetic", &[i as u64]);
            (format!("syn{i:04}"), generate_cloud(&mut rng))
        })
        .collect();
    let mut manifest = CategoryManifest::default();
    manifest
        .category_parts
        .insert(0, vec![CLASS_CURVE, CLASS_JUNCTION, CLASS_ENDPOINT]);
    for (id, _) in &samples {
        manifest.sample_category.insert(id.clone(), 0);
    }
    (samples, manifest)
}

/// Points sampled uniformly on a sphere surface; used by the sparsity
/// sanity check (a 2D surface in a 3D grid stays ~99% sparse).
pub fn sphere_surface_cloud(rng: &mut ChaCha8Rng, n_points: usize, radius: f64) -> PointCloud {
    let points = (0..n_points)
        .map(|_| {
            let d = unit_vector(rng);
            d.iter().map(|x| x * radius).collect()
        })
        .collect();
    PointCloud {
        points,
        point_features: None,
        labels: None,
        category: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_has_all_classes_and_enough_points() {
        let seeds = SeedTree::new(1);
        let mut rng = seeds.stream("synthetic", &[0]);
        let pc = generate_cloud(&mut rng);
        assert!(pc.len() > 150);
        let labels = pc.labels.as_ref().unwrap();
        for class in 0..N_CLASSES {
            assert!(labels.contains(&class), "missing class {class}");
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let seeds = SeedTree::new(2);
        let (a, _) = generate_dataset(&seeds, 3);
        let (b, _) = generate_dataset(&seeds, 3);
        assert_eq!(a[2].1.points, b[2].1.points);
        assert_eq!(a[2].1.labels, b[2].1.labels);
    }

    #[test]
    fn sphere_surface_points_on_radius() {
        let seeds = SeedTree::new(3);
        let mut rng = seeds.stream("sphere", &[]);
        let pc = sphere_surface_cloud(&mut rng, 100, 24.0);
        for p in &pc.points {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 24.0).abs() < 1e-9);
        }
    }
}
