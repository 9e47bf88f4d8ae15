//! Naive dense reference implementations used for correctness testing.
//!
//! Everything here is deliberately written as plain nested loops over the
//! full grid and never optimized; it is the trust anchor the sparse engine
//! is verified against. 64-bit only, small grids only.

use std::collections::HashSet;

use crate::matrix::Matrix;
use crate::tensor::{Coordinate, SparseTensor};

/// Dense grid in `batch x l_1 x ... x l_d x channels` row-major layout.
#[derive(Debug, Clone)]
pub struct DenseGrid {
    pub dims: usize,
    pub spatial_size: Vec<usize>,
    pub batch_size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(dims: usize, spatial_size: &[usize], batch_size: usize, channels: usize) -> Self {
        let volume: usize = spatial_size.iter().product();
        DenseGrid {
            dims,
            spatial_size: spatial_size.to_vec(),
            batch_size,
            channels,
            data: vec![0.0; batch_size * volume * channels],
        }
    }

    pub fn from_sparse<S: crate::scalar::Scalar>(t: &SparseTensor<S>) -> Self {
        DenseGrid {
            dims: t.dims(),
            spatial_size: t.spatial_size().to_vec(),
            batch_size: t.batch_size(),
            channels: t.planes(),
            data: t.densify().iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn volume(&self) -> usize {
        self.spatial_size.iter().product()
    }

    fn cell_base(&self, b: usize, spatial: &[i32]) -> usize {
        let mut idx = b;
        for (j, &l) in self.spatial_size.iter().enumerate() {
            idx = idx * l + spatial[j] as usize;
        }
        idx * self.channels
    }

    pub fn get(&self, b: usize, spatial: &[i32], c: usize) -> f64 {
        self.data[self.cell_base(b, spatial) + c]
    }

    pub fn set(&mut self, b: usize, spatial: &[i32], c: usize, v: f64) {
        let base = self.cell_base(b, spatial);
        self.data[base + c] = v;
    }

    fn in_bounds(&self, spatial: &[i32]) -> bool {
        spatial
            .iter()
            .zip(&self.spatial_size)
            .all(|(&x, &l)| x >= 0 && (x as usize) < l)
    }

    /// Visits every spatial cell of one batch element in row-major order.
    pub fn for_each_cell<F: FnMut(&[i32])>(&self, mut f: F) {
        let mut spatial = vec![0i32; self.dims];
        let volume = self.volume();
        for _ in 0..volume {
            f(&spatial);
            for j in (0..self.dims).rev() {
                spatial[j] += 1;
                if (spatial[j] as usize) < self.spatial_size[j] {
                    break;
                }
                spatial[j] = 0;
            }
        }
    }
}

fn offsets(f: usize, dims: usize) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let mut cur = vec![0i32; dims];
    loop {
        out.push(cur.clone());
        let mut j = dims;
        loop {
            if j == 0 {
                return out;
            }
            j -= 1;
            cur[j] += 1;
            if (cur[j] as usize) < f {
                break;
            }
            cur[j] = 0;
        }
    }
}

/// Textbook direct convolution. Weights are per-offset m x n matrices in
/// lexicographic offset order. With `pad` set, the input is zero-padded by
/// (f-1)/2 on each side (stride must be 1); otherwise the output shrinks to
/// (l - f)/s + 1 per dimension.
pub fn dense_conv(
    g: &DenseGrid,
    weights: &[Matrix<f64>],
    f: usize,
    stride: usize,
    pad: bool,
) -> DenseGrid {
    let dims = g.dims;
    let m = g.channels;
    let n = weights[0].cols();
    assert_eq!(weights.len(), f.pow(dims as u32));
    assert!(weights.iter().all(|w| w.rows() == m && w.cols() == n));
    let out_size: Vec<usize> = if pad {
        assert_eq!(stride, 1);
        assert_eq!(f % 2, 1);
        g.spatial_size.clone()
    } else {
        g.spatial_size.iter().map(|&l| (l - f) / stride + 1).collect()
    };
    let shift = if pad { (f as i32 - 1) / 2 } else { 0 };
    let mut out = DenseGrid::zeros(dims, &out_size, g.batch_size, n);
    let offs = offsets(f, dims);
    let out_template = out.clone();
    for b in 0..g.batch_size {
        out_template.for_each_cell(|y| {
            for (oi, off) in offs.iter().enumerate() {
                let x: Vec<i32> = (0..dims)
                    .map(|j| y[j] * stride as i32 + off[j] - shift)
                    .collect();
                if !g.in_bounds(&x) {
                    continue;
                }
                for ci in 0..m {
                    let v = g.get(b, &x, ci);
                    if v == 0.0 {
                        continue;
                    }
                    for co in 0..n {
                        let cur = out.get(b, y, co);
                        out.set(b, y, co, cur + v * weights[oi].get(ci, co));
                    }
                }
            }
        });
    }
    out
}

/// Textbook transposed convolution: every coarse site y scatters
/// `coarse[y] * W^i` to fine site `s*y + off_i`. Restricted to an active
/// set, this is the reference for the sparse deconvolution.
pub fn dense_deconv(
    coarse: &DenseGrid,
    weights: &[Matrix<f64>],
    f: usize,
    stride: usize,
    fine_size: &[usize],
) -> DenseGrid {
    let dims = coarse.dims;
    let m = coarse.channels;
    let n = weights[0].cols();
    assert_eq!(weights.len(), f.pow(dims as u32));
    let mut out = DenseGrid::zeros(dims, fine_size, coarse.batch_size, n);
    let offs = offsets(f, dims);
    for b in 0..coarse.batch_size {
        coarse.for_each_cell(|y| {
            for (oi, off) in offs.iter().enumerate() {
                let x: Vec<i32> = (0..dims)
                    .map(|j| y[j] * stride as i32 + off[j])
                    .collect();
                if !out.in_bounds(&x) {
                    continue;
                }
                for ci in 0..m {
                    let v = coarse.get(b, y, ci);
                    if v == 0.0 {
                        continue;
                    }
                    for co in 0..n {
                        let cur = out.get(b, &x, co);
                        out.set(b, &x, co, cur + v * weights[oi].get(ci, co));
                    }
                }
            }
        });
    }
    out
}

/// Zeros out every site not in `active`. Composed with a padded
/// `dense_conv`, this is the reference for the submanifold convolution.
pub fn restrict_to(g: &DenseGrid, active: &HashSet<Coordinate>) -> DenseGrid {
    let mut out = DenseGrid::zeros(g.dims, &g.spatial_size, g.batch_size, g.channels);
    for b in 0..g.batch_size {
        g.for_each_cell(|spatial| {
            let c = Coordinate::new(b as u32, spatial);
            if active.contains(&c) {
                for ch in 0..g.channels {
                    out.set(b, spatial, ch, g.get(b, spatial, ch));
                }
            }
        });
    }
    out
}

/// Dense max pooling with the sparse engine's zero clamp: each output
/// channel is max(0, max over the window).
pub fn dense_maxpool(g: &DenseGrid, f: usize, stride: usize) -> DenseGrid {
    let dims = g.dims;
    let out_size: Vec<usize> = g.spatial_size.iter().map(|&l| (l - f) / stride + 1).collect();
    let mut out = DenseGrid::zeros(dims, &out_size, g.batch_size, g.channels);
    let offs = offsets(f, dims);
    let out_template = out.clone();
    for b in 0..g.batch_size {
        out_template.for_each_cell(|y| {
            for c in 0..g.channels {
                let mut best = 0.0f64;
                for off in &offs {
                    let x: Vec<i32> = (0..dims).map(|j| y[j] * stride as i32 + off[j]).collect();
                    let v = g.get(b, &x, c);
                    if v > best {
                        best = v;
                    }
                }
                out.set(b, y, c, best);
            }
        });
    }
    out
}

/// Dense average pooling: f^{-d} times the window sum.
pub fn dense_avgpool(g: &DenseGrid, f: usize, stride: usize) -> DenseGrid {
    let dims = g.dims;
    let out_size: Vec<usize> = g.spatial_size.iter().map(|&l| (l - f) / stride + 1).collect();
    let mut out = DenseGrid::zeros(dims, &out_size, g.batch_size, g.channels);
    let offs = offsets(f, dims);
    let scale = 1.0 / offs.len() as f64;
    let out_template = out.clone();
    for b in 0..g.batch_size {
        out_template.for_each_cell(|y| {
            for c in 0..g.channels {
                let mut sum = 0.0f64;
                for off in &offs {
                    let x: Vec<i32> = (0..dims).map(|j| y[j] * stride as i32 + off[j]).collect();
                    sum += g.get(b, &x, c);
                }
                out.set(b, y, c, sum * scale);
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_translates_per_offset() {
        // identity-like 1-channel weights: each offset copies a shifted view
        let mut g = DenseGrid::zeros(2, &[5, 5], 1, 1);
        g.set(0, &[2, 2], 0, 1.0);
        let weights: Vec<Matrix<f64>> =
            (0..9).map(|_| Matrix::from_rows(1, 1, vec![1.0]).unwrap()).collect();
        let out = dense_conv(&g, &weights, 3, 1, false);
        // 3x3 output, every site sees the single voxel once
        assert_eq!(out.spatial_size, vec![3, 3]);
        assert!(out.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn blur_grows_active_region_by_one_cell() {
        let mut g = DenseGrid::zeros(2, &[9, 9], 1, 1);
        g.set(0, &[4, 4], 0, 1.0);
        let weights: Vec<Matrix<f64>> = (0..9)
            .map(|_| Matrix::from_rows(1, 1, vec![1.0 / 9.0]).unwrap())
            .collect();
        let out = dense_conv(&g, &weights, 3, 1, true);
        let active = out.data.iter().filter(|&&x| x != 0.0).count();
        assert_eq!(active, 9);
        let out2 = dense_conv(&out, &weights, 3, 1, true);
        let active2 = out2.data.iter().filter(|&&x| x != 0.0).count();
        assert_eq!(active2, 25);
    }

    #[test]
    fn restrict_to_edge_cases() {
        let mut g = DenseGrid::zeros(2, &[3, 3], 1, 1);
        g.set(0, &[1, 1], 0, 2.0);
        let empty = restrict_to(&g, &HashSet::new());
        assert!(empty.data.iter().all(|&x| x == 0.0));
        let mut full = HashSet::new();
        g.for_each_cell(|s| {
            full.insert(Coordinate::new(0, s));
        });
        let same = restrict_to(&g, &full);
        assert_eq!(same.data, g.data);
    }
}
