//! Rule-book construction for sparse convolution layers.
//!
//! A rule book holds, for each of the f^d filter offsets, a list of
//! (input row, output row) pairs. Executing a convolution is then one
//! multiply-add pass per offset over its pair list, so the work is
//! proportional to the number of active-input/active-output connections
//! rather than to the grid volume.
//!
//! Construction walks the input hash table once: for each active input and
//! each filter offset it computes the output site that sees the input at
//! that offset, creating output-table entries on first visit. Pairs are
//! appended in a deterministic order (active inputs in insertion order,
//! offsets lexicographically) so downstream execution is reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Coordinate, SparseTensor, MAX_DIMS};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Which operator the rule book drives. SC, MP and AP share the same
/// active-site rule and therefore the same construction; only execution
/// differs. SSC keeps the input active set. DC inverts an SC rule book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Sc,
    Ssc,
    Dc,
    MaxPool,
    AvgPool,
}

/// Filter size, stride, and the lexicographically ordered offset set
/// F = {0,...,f-1}^d.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGeometry {
    pub f: usize,
    pub stride: usize,
    pub dims: usize,
}

impl FilterGeometry {
    pub fn new(f: usize, stride: usize, dims: usize) -> Result<Self> {
        if f == 0 || stride == 0 {
            return Err(Error::InvalidGeometry(
                "filter size and stride must be positive".into(),
            ));
        }
        Ok(FilterGeometry { f, stride, dims })
    }

    pub fn offset_count(&self) -> usize {
        self.f.pow(self.dims as u32)
    }

    /// Offsets in lexicographic order.
    pub fn offsets(&self) -> Vec<[i32; MAX_DIMS]> {
        let mut out = Vec::with_capacity(self.offset_count());
        let mut cur = [0i32; MAX_DIMS];
        loop {
            out.push(cur);
            let mut j = self.dims;
            loop {
                if j == 0 {
                    return out;
                }
                j -= 1;
                cur[j] += 1;
                if (cur[j] as usize) < self.f {
                    break;
                }
                cur[j] = 0;
            }
        }
    }
}

/// Compiled connectivity of one sparse layer.
#[derive(Debug, Clone)]
pub struct RuleBook {
    pub geometry: FilterGeometry,
    pub kind: RuleKind,
    /// Per-offset (input row, output row) pairs, offsets in lexicographic
    /// order.
    pub rules: Vec<Vec<(u32, u32)>>,
    pub in_coords: Vec<Coordinate>,
    pub in_spatial_size: Vec<usize>,
    pub out_index: HashMap<Coordinate, usize>,
    pub out_coords: Vec<Coordinate>,
    pub out_spatial_size: Vec<usize>,
    pub batch_size: usize,
    /// Active-set generation of the output (inherited from the input for
    /// SSC, fresh otherwise). Tensors built from this rule book carry it.
    pub out_generation: Option<u64>,
}

impl RuleBook {
    pub fn a_in(&self) -> usize {
        self.in_coords.len()
    }

    pub fn a_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.rules.iter().map(|r| r.len()).sum()
    }
}

/// Builds an SC-style rule book (also used for MP/AP, which share the
/// "active if any input in the receptive field is active" rule).
///
/// Output extent per dimension is (l - f + s)/s; inputs whose extents are
/// not compatible with the filter are rejected rather than padded.
pub fn build_sc<T: Scalar>(input: &SparseTensor<T>, f: usize, stride: usize) -> Result<RuleBook> {
    build_sc_kind(input, f, stride, RuleKind::Sc)
}

pub fn build_sc_kind<T: Scalar>(
    input: &SparseTensor<T>,
    f: usize,
    stride: usize,
    kind: RuleKind,
) -> Result<RuleBook> {
    match kind {
        RuleKind::Sc | RuleKind::MaxPool | RuleKind::AvgPool => {}
        _ => return Err(Error::InvalidGeometry("kind must be SC/MP/AP".into())),
    }
    let dims = input.dims();
    let geometry = FilterGeometry::new(f, stride, dims)?;
    let mut out_spatial_size = Vec::with_capacity(dims);
    for &l in input.spatial_size() {
        if l < f || (l - f) % stride != 0 {
            return Err(Error::InvalidGeometry(format!(
                "extent {l} incompatible with filter {f} stride {stride}"
            )));
        }
        out_spatial_size.push((l - f) / stride + 1);
    }

    let offsets = geometry.offsets();
    let mut rules = vec![Vec::new(); offsets.len()];
    let mut out_index: HashMap<Coordinate, usize> = HashMap::new();
    let mut out_coords: Vec<Coordinate> = Vec::new();

    for (in_row, c) in input.coords().iter().enumerate() {
        let spatial = c.spatial(dims);
        for (oi, off) in offsets.iter().enumerate() {
            // output y with c at offset `off` in its field: y*s + off = c
            let mut y = [0i32; MAX_DIMS];
            let mut ok = true;
            for j in 0..dims {
                let rel = spatial[j] - off[j];
                if rel < 0 || rel % stride as i32 != 0 {
                    ok = false;
                    break;
                }
                let yj = rel / stride as i32;
                if yj as usize >= out_spatial_size[j] {
                    ok = false;
                    break;
                }
                y[j] = yj;
            }
            if !ok {
                continue;
            }
            let yc = Coordinate::new(c.batch, &y[..dims]);
            let out_row = match out_index.get(&yc) {
                Some(&r) => r,
                None => {
                    let r = out_coords.len();
                    out_index.insert(yc, r);
                    out_coords.push(yc);
                    r
                }
            };
            rules[oi].push((in_row as u32, out_row as u32));
        }
    }

    Ok(RuleBook {
        geometry,
        kind,
        rules,
        in_coords: input.coords().to_vec(),
        in_spatial_size: input.spatial_size().to_vec(),
        out_index,
        out_coords,
        out_spatial_size,
        batch_size: input.batch_size(),
        out_generation: None,
    })
}

/// Builds an SSC rule book: the output active set is the input active set,
/// and padding is implicit (out-of-bounds or inactive neighbors are simply
/// skipped, which under a zero ground state equals zero padding).
pub fn build_ssc<T: Scalar>(input: &SparseTensor<T>, f: usize) -> Result<RuleBook> {
    if f % 2 == 0 {
        return Err(Error::InvalidGeometry(format!(
            "submanifold convolution needs odd filter size, got {f}"
        )));
    }
    let dims = input.dims();
    let geometry = FilterGeometry::new(f, 1, dims)?;
    let center = (f as i32 - 1) / 2;
    let offsets = geometry.offsets();
    let mut rules = vec![Vec::new(); offsets.len()];

    for (out_row, c) in input.coords().iter().enumerate() {
        for (oi, off) in offsets.iter().enumerate() {
            let mut delta = [0i32; MAX_DIMS];
            for j in 0..dims {
                delta[j] = off[j] - center;
            }
            let nc = c.offset(&delta[..dims]);
            if let Some(in_row) = input.row_of(&nc) {
                rules[oi].push((in_row as u32, out_row as u32));
            }
        }
    }

    Ok(RuleBook {
        geometry,
        kind: RuleKind::Ssc,
        rules,
        in_coords: input.coords().to_vec(),
        in_spatial_size: input.spatial_size().to_vec(),
        out_index: input.index().clone(),
        out_coords: input.coords().to_vec(),
        out_spatial_size: input.spatial_size().to_vec(),
        batch_size: input.batch_size(),
        out_generation: Some(input.generation()),
    })
}

/// Inverts an SC rule book into a deconvolution rule book: every (j, k)
/// pair becomes (k, j) and the output active set becomes the original SC
/// input active set.
pub fn invert(rb: &RuleBook) -> Result<RuleBook> {
    if rb.kind != RuleKind::Sc {
        return Err(Error::InvalidGeometry(
            "only SC rule books can be inverted".into(),
        ));
    }
    let rules = rb
        .rules
        .iter()
        .map(|pairs| pairs.iter().map(|&(j, k)| (k, j)).collect())
        .collect();
    let mut out_index = HashMap::with_capacity(rb.in_coords.len());
    for (r, c) in rb.in_coords.iter().enumerate() {
        out_index.insert(*c, r);
    }
    Ok(RuleBook {
        geometry: rb.geometry.clone(),
        kind: RuleKind::Dc,
        rules,
        in_coords: rb.out_coords.clone(),
        in_spatial_size: rb.out_spatial_size.clone(),
        out_index,
        out_coords: rb.in_coords.clone(),
        out_spatial_size: rb.in_spatial_size.clone(),
        batch_size: rb.batch_size,
        out_generation: None,
    })
}

/// Key identifying a rule book: the active-set generation of the layer
/// input plus the filter signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSignature {
    pub generation: u64,
    pub f: usize,
    pub stride: usize,
    pub kind: RuleKind,
}

/// Rule-book cache. Consecutive submanifold layers on an unchanged active
/// set share one rule book; any operation that changes the active set
/// produces a fresh generation id, so stale entries can never be hit.
#[derive(Debug, Default)]
pub struct RuleBookCache {
    map: HashMap<LayerSignature, Arc<RuleBook>>,
    enabled: bool,
    pub builds: usize,
    pub hits: usize,
}

impl RuleBookCache {
    pub fn new(enabled: bool) -> Self {
        RuleBookCache {
            map: HashMap::new(),
            enabled,
            builds: 0,
            hits: 0,
        }
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn reset_counters(&mut self) {
        self.builds = 0;
        self.hits = 0;
    }

    pub fn get_or_build<T: Scalar>(
        &mut self,
        input: &SparseTensor<T>,
        f: usize,
        stride: usize,
        kind: RuleKind,
    ) -> Result<Arc<RuleBook>> {
        let sig = LayerSignature {
            generation: input.generation(),
            f,
            stride,
            kind,
        };
        if self.enabled {
            if let Some(rb) = self.map.get(&sig) {
                self.hits += 1;
                return Ok(rb.clone());
            }
        }
        let rb = Arc::new(match kind {
            RuleKind::Ssc => build_ssc(input, f)?,
            RuleKind::Sc | RuleKind::MaxPool | RuleKind::AvgPool => {
                build_sc_kind(input, f, stride, kind)?
            }
            RuleKind::Dc => {
                return Err(Error::InvalidGeometry(
                    "deconvolution rule books come from invert()".into(),
                ))
            }
        });
        self.builds += 1;
        if self.enabled {
            self.map.insert(sig, rb.clone());
        }
        Ok(rb)
    }

    /// Cached inversion of an SC rule book, keyed on the SC layer's input
    /// generation.
    pub fn get_or_invert(&mut self, sc_rb: &RuleBook, in_generation: u64) -> Result<Arc<RuleBook>> {
        let sig = LayerSignature {
            generation: in_generation,
            f: sc_rb.geometry.f,
            stride: sc_rb.geometry.stride,
            kind: RuleKind::Dc,
        };
        if self.enabled {
            if let Some(rb) = self.map.get(&sig) {
                self.hits += 1;
                return Ok(rb.clone());
            }
        }
        let rb = Arc::new(invert(sc_rb)?);
        self.builds += 1;
        if self.enabled {
            self.map.insert(sig, rb.clone());
        }
        Ok(rb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_site(dims: usize, extent: usize, at: &[i32]) -> SparseTensor<f64> {
        let sizes = vec![extent; dims];
        let mut t = SparseTensor::new(dims, &sizes, 1, 1).unwrap();
        t.set_site(Coordinate::new(0, at), &[1.0]).unwrap();
        t
    }

    #[test]
    fn offsets_lexicographic() {
        let g = FilterGeometry::new(2, 1, 2).unwrap();
        let offs: Vec<_> = g.offsets().iter().map(|o| [o[0], o[1]]).collect();
        assert_eq!(offs, vec![[0, 0], [0, 1], [1, 0], [1, 1]]);
    }

    #[test]
    fn sc_single_window() {
        let t = single_site(2, 3, &[1, 1]);
        let rb = build_sc(&t, 3, 1).unwrap();
        assert_eq!(rb.out_spatial_size, vec![1, 1]);
        assert_eq!(rb.a_out(), 1);
        assert_eq!(rb.total_pairs(), 1);
        // center offset (1,1) holds the single pair
        let center = 1 * 3 + 1;
        assert_eq!(rb.rules[center], vec![(0, 0)]);
    }

    #[test]
    fn sc_dilation_growth() {
        // single active site through stacked SC(f=3,s=1): 3^d then 5^d
        for dims in [2usize, 3] {
            let t = single_site(dims, 15, &vec![7; dims]);
            let rb1 = build_sc(&t, 3, 1).unwrap();
            assert_eq!(rb1.a_out(), 3usize.pow(dims as u32));
            let t1 = crate::ops::apply_identity_like(&rb1, &t).unwrap();
            let rb2 = build_sc(&t1, 3, 1).unwrap();
            assert_eq!(rb2.a_out(), 5usize.pow(dims as u32));
        }
    }

    #[test]
    fn sc_rejects_bad_stride() {
        let t = single_site(2, 8, &[0, 0]);
        assert!(build_sc(&t, 3, 2).is_err()); // (8-3) % 2 != 0
        assert!(build_sc(&t, 2, 2).is_ok());
    }

    #[test]
    fn ssc_single_site() {
        for dims in [2usize, 3] {
            let t = single_site(dims, 9, &vec![4; dims]);
            let rb = build_ssc(&t, 3).unwrap();
            assert_eq!(rb.a_out(), 1);
            assert_eq!(rb.total_pairs(), 1);
            let center = (rb.geometry.offset_count() - 1) / 2;
            assert_eq!(rb.rules[center], vec![(0, 0)]);
        }
    }

    #[test]
    fn ssc_adjacent_pair() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 1, 1).unwrap();
        t.set_site(Coordinate::new(0, &[3, 3]), &[1.0]).unwrap();
        t.set_site(Coordinate::new(0, &[3, 4]), &[2.0]).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        assert_eq!(rb.a_out(), 2);
        // each site sees itself and its neighbor
        assert_eq!(rb.total_pairs(), 4);
    }

    #[test]
    fn ssc_requires_odd_filter() {
        let t = single_site(2, 8, &[0, 0]);
        assert!(build_ssc(&t, 2).is_err());
    }

    #[test]
    fn ssc_empty_input() {
        let t: SparseTensor<f64> = SparseTensor::new(3, &[8, 8, 8], 1, 1).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        assert_eq!(rb.a_out(), 0);
        assert_eq!(rb.total_pairs(), 0);
    }

    #[test]
    fn ssc_center_pairs_present() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 2, 1).unwrap();
        for (i, c) in [(0u32, [1, 1]), (0, [5, 2]), (1, [0, 0])].iter().enumerate() {
            t.set_site(Coordinate::new(c.0, &c.1), &[i as f64 + 1.0])
                .unwrap();
        }
        let rb = build_ssc(&t, 3).unwrap();
        let center = (rb.geometry.offset_count() - 1) / 2;
        for r in 0..rb.a_out() as u32 {
            assert!(rb.rules[center].contains(&(r, r)));
        }
    }

    #[test]
    fn invert_is_involution() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 1, 1).unwrap();
        for c in [[0, 0], [1, 3], [5, 5], [7, 7]] {
            t.set_site(Coordinate::new(0, &c), &[1.0]).unwrap();
        }
        let rb = build_sc(&t, 2, 2).unwrap();
        let dc = invert(&rb).unwrap();
        assert_eq!(dc.out_coords, rb.in_coords);
        let back = RuleBook {
            kind: RuleKind::Sc,
            ..dc.clone()
        };
        let rb2 = invert(&back).unwrap();
        assert_eq!(rb2.rules, rb.rules);
    }

    #[test]
    fn invert_rejects_non_sc() {
        let t = single_site(2, 9, &[4, 4]);
        let rb = build_ssc(&t, 3).unwrap();
        assert!(invert(&rb).is_err());
    }

    #[test]
    fn cache_reuses_across_unchanged_active_set() {
        let t = single_site(3, 9, &[4, 4, 4]);
        let mut cache = RuleBookCache::new(true);
        let rb1 = cache.get_or_build(&t, 3, 1, RuleKind::Ssc).unwrap();
        // SSC output shares the input generation, so a second SSC layer hits
        let out = crate::ops::apply_identity_like(&rb1, &t).unwrap();
        let _rb2 = cache.get_or_build(&out, 3, 1, RuleKind::Ssc).unwrap();
        assert_eq!(cache.builds, 1);
        assert_eq!(cache.hits, 1);
    }

    #[test]
    fn cache_misses_after_downsample() {
        let t = single_site(3, 8, &[4, 4, 4]);
        let mut cache = RuleBookCache::new(true);
        let rb = cache.get_or_build(&t, 2, 2, RuleKind::Sc).unwrap();
        let down = crate::ops::apply_identity_like(&rb, &t).unwrap();
        let _ = cache.get_or_build(&down, 3, 1, RuleKind::Ssc).unwrap();
        assert_eq!(cache.builds, 2);
        assert_eq!(cache.hits, 0);
    }
}
