//! Sparse tensor core: coordinate hash table plus dense feature matrix.
//!
//! A site is active when its feature vector differs from the ground state
//! (the zero vector). The hash table maps each active coordinate to a row of
//! the `a x m` feature matrix; a side array keeps insertion order so that
//! iteration is deterministic regardless of hasher state.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::{Error, Result};

pub const MAX_DIMS: usize = 4;

/// Grid location: up to four spatial components plus a batch index.
/// The batch index behaves as an extra coordinate component that is never
/// convolved over. Unused trailing spatial slots stay zero so equality and
/// hashing are dimension-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coordinate {
    pub batch: u32,
    spatial: [i32; MAX_DIMS],
}

impl Coordinate {
    pub fn new(batch: u32, spatial: &[i32]) -> Self {
        assert!(spatial.len() <= MAX_DIMS);
        let mut s = [0i32; MAX_DIMS];
        s[..spatial.len()].copy_from_slice(spatial);
        Coordinate { batch, spatial: s }
    }

    pub fn spatial(&self, dims: usize) -> &[i32] {
        &self.spatial[..dims]
    }

    /// Component-wise translation of the spatial part.
    pub fn offset(&self, delta: &[i32]) -> Self {
        let mut s = self.spatial;
        for (j, d) in delta.iter().enumerate() {
            s[j] += d;
        }
        Coordinate {
            batch: self.batch,
            spatial: s,
        }
    }
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(b{}; {:?})", self.batch, self.spatial)
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Sparse feature tensor over a bounded d-dimensional grid.
#[derive(Debug, Clone)]
pub struct SparseTensor<T> {
    dims: usize,
    spatial_size: Vec<usize>,
    batch_size: usize,
    planes: usize,
    index: HashMap<Coordinate, usize>,
    coords: Vec<Coordinate>,
    features: Matrix<T>,
    /// Identity of the active-site set; shared by tensors whose active set
    /// was inherited unchanged (SSC outputs). Drives rule-book reuse.
    generation: u64,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(
        dims: usize,
        spatial_size: &[usize],
        batch_size: usize,
        planes: usize,
    ) -> Result<Self> {
        if !(2..=MAX_DIMS).contains(&dims) {
            return Err(Error::InvalidTensor(format!(
                "dims must be in 2..=4, got {dims}"
            )));
        }
        if spatial_size.len() != dims {
            return Err(Error::InvalidTensor(format!(
                "spatial_size has {} entries for dims={dims}",
                spatial_size.len()
            )));
        }
        if spatial_size.iter().any(|&l| l == 0) {
            return Err(Error::InvalidTensor("zero grid extent".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidTensor("batch_size must be >= 1".into()));
        }
        if planes == 0 {
            return Err(Error::InvalidTensor("feature planes must be >= 1".into()));
        }
        Ok(SparseTensor {
            dims,
            spatial_size: spatial_size.to_vec(),
            batch_size,
            planes,
            index: HashMap::new(),
            coords: Vec::new(),
            features: Matrix::zeros(0, planes),
            generation: fresh_generation(),
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn spatial_size(&self) -> &[usize] {
        &self.spatial_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    /// Number of active sites.
    pub fn active_count(&self) -> usize {
        self.coords.len()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Matrix<T> {
        &mut self.features
    }

    /// Active coordinates in insertion order; row r holds features of
    /// `coords()[r]`.
    pub fn coords(&self) -> &[Coordinate] {
        &self.coords
    }

    pub fn index(&self) -> &HashMap<Coordinate, usize> {
        &self.index
    }

    pub fn row_of(&self, c: &Coordinate) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn in_bounds(&self, c: &Coordinate) -> bool {
        (c.batch as usize) < self.batch_size
            && c.spatial(self.dims)
                .iter()
                .zip(&self.spatial_size)
                .all(|(&x, &l)| x >= 0 && (x as usize) < l)
    }

    /// Activates `c` with features `v`, overwriting if already active.
    pub fn set_site(&mut self, c: Coordinate, v: &[T]) -> Result<()> {
        if !self.in_bounds(&c) {
            return Err(Error::OutOfBounds(c.to_string()));
        }
        if v.len() != self.planes {
            return Err(Error::ShapeMismatch(format!(
                "feature vector has length {}, tensor has {} planes",
                v.len(),
                self.planes
            )));
        }
        match self.index.get(&c) {
            Some(&row) => self.features.row_mut(row).copy_from_slice(v),
            None => {
                let row = self.coords.len();
                self.index.insert(c, row);
                self.coords.push(c);
                self.features.push_row(v);
                self.generation = fresh_generation();
            }
        }
        debug_assert_eq!(self.index.len(), self.features.rows());
        Ok(())
    }

    pub fn get_site(&self, c: &Coordinate) -> Option<&[T]> {
        self.index.get(c).map(|&row| self.features.row(row))
    }

    /// Builds a tensor over the same grid with the same active set but new
    /// feature content (possibly a different plane count). The active-set
    /// generation is inherited, so rule books remain valid.
    pub fn with_features(&self, features: Matrix<T>) -> Result<Self> {
        if features.rows() != self.coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix has {} rows for {} active sites",
                features.rows(),
                self.coords.len()
            )));
        }
        Ok(SparseTensor {
            dims: self.dims,
            spatial_size: self.spatial_size.clone(),
            batch_size: self.batch_size,
            planes: features.cols(),
            index: self.index.clone(),
            coords: self.coords.clone(),
            features,
            generation: self.generation,
        })
    }

    /// Assembles a tensor from a prebuilt active set. Used by rule-book
    /// execution, which produces the output index wholesale.
    pub fn from_parts(
        dims: usize,
        spatial_size: &[usize],
        batch_size: usize,
        index: HashMap<Coordinate, usize>,
        coords: Vec<Coordinate>,
        features: Matrix<T>,
        generation: Option<u64>,
    ) -> Self {
        debug_assert_eq!(index.len(), coords.len());
        debug_assert_eq!(coords.len(), features.rows());
        SparseTensor {
            dims,
            spatial_size: spatial_size.to_vec(),
            batch_size,
            planes: features.cols(),
            index,
            coords,
            features,
            generation: generation.unwrap_or_else(fresh_generation),
        }
    }

    /// Expands to a dense array in `batch x l_1 x ... x l_d x planes` layout
    /// (row-major). Inactive sites hold the zero ground state.
    pub fn densify(&self) -> Vec<T> {
        let volume: usize = self.spatial_size.iter().product();
        let mut dense = vec![T::zero(); self.batch_size * volume * self.planes];
        for (row, c) in self.coords.iter().enumerate() {
            let base = self.dense_offset(c);
            dense[base..base + self.planes].copy_from_slice(self.features.row(row));
        }
        dense
    }

    /// Flat offset of coordinate `c` in the densified layout.
    pub fn dense_offset(&self, c: &Coordinate) -> usize {
        let mut idx = c.batch as usize;
        for (j, &l) in self.spatial_size.iter().enumerate() {
            idx = idx * l + c.spatial(self.dims)[j] as usize;
        }
        idx * self.planes
    }

    /// Builds a sparse tensor from a dense array; a site becomes active iff
    /// the max-norm of its feature vector exceeds `threshold`. Sites are
    /// inserted in dense scan order (batch-major, row-major spatial).
    pub fn sparsify(
        dense: &[T],
        dims: usize,
        spatial_size: &[usize],
        batch_size: usize,
        planes: usize,
        threshold: f64,
    ) -> Result<Self> {
        let volume: usize = spatial_size.iter().product();
        if dense.len() != batch_size * volume * planes {
            return Err(Error::ShapeMismatch(format!(
                "dense array has {} values, expected {}",
                dense.len(),
                batch_size * volume * planes
            )));
        }
        let mut t = SparseTensor::new(dims, spatial_size, batch_size, planes)?;
        let thr = T::from_f64(threshold);
        let mut spatial = vec![0i32; dims];
        for b in 0..batch_size {
            spatial.iter_mut().for_each(|x| *x = 0);
            for cell in 0..volume {
                let base = (b * volume + cell) * planes;
                let v = &dense[base..base + planes];
                let norm = v
                    .iter()
                    .map(|x| x.abs())
                    .fold(T::zero(), |m, x| if x > m { x } else { m });
                if norm > thr {
                    t.set_site(Coordinate::new(b as u32, &spatial), v)?;
                }
                // advance mixed-radix spatial counter
                for j in (0..dims).rev() {
                    spatial[j] += 1;
                    if (spatial[j] as usize) < spatial_size[j] {
                        break;
                    }
                    spatial[j] = 0;
                }
            }
        }
        Ok(t)
    }
}
