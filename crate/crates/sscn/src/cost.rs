//! Per-layer FLOP and memory accounting.
//!
//! A convolution that touches `pairs` rule-book pairs with m input and n
//! output planes costs `pairs * m * n` multiply-adds and stores `n * a_out`
//! values. Headline numbers are multiply-adds; a flag switches reports to
//! 2x raw-flop counting. Pooling, batch norm and ReLU are linear-cost and
//! tallied separately from conv FLOPs.

use crate::rulebook::RuleBook;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    Conv,
    Head,
    Aux,
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    pub kind: CostKind,
    pub madds: u64,
    pub memory: u64,
    /// Dense multiply-adds for the same geometry: f^d * m * n per output
    /// site over the full grid.
    pub dense_madds: u64,
}

/// Multiply-adds and output memory of one rule-book execution.
pub fn tally(rb: &RuleBook, m: usize, n: usize) -> (u64, u64) {
    let madds = rb.total_pairs() as u64 * m as u64 * n as u64;
    let memory = n as u64 * rb.a_out() as u64;
    (madds, memory)
}

/// Dense-equivalent multiply-adds for a conv over the rule book's output
/// grid.
pub fn dense_tally(rb: &RuleBook, m: usize, n: usize) -> u64 {
    let volume: u64 = rb.out_spatial_size.iter().map(|&l| l as u64).product();
    rb.geometry.offset_count() as u64 * m as u64 * n as u64 * volume * rb.batch_size as u64
}

/// Collects per-layer tallies during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct CostTracker {
    pub layers: Vec<LayerCost>,
}

impl CostTracker {
    pub fn record_conv(&mut self, name: &str, rb: &RuleBook, m: usize, n: usize, head: bool) {
        let (madds, memory) = tally(rb, m, n);
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind: if head { CostKind::Head } else { CostKind::Conv },
            madds,
            memory,
            dense_madds: dense_tally(rb, m, n),
        });
    }

    /// Linear-cost op (pool/BN/ReLU): one value per active site per plane.
    pub fn record_aux(&mut self, name: &str, active: usize, planes: usize) {
        let v = active as u64 * planes as u64;
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind: CostKind::Aux,
            madds: v,
            memory: v,
            dense_madds: 0,
        });
    }

    /// Head cost for a non-rule-book layer (the per-voxel linear head).
    pub fn record_head_linear(&mut self, name: &str, active: usize, m: usize, n: usize) {
        let madds = active as u64 * m as u64 * n as u64;
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind: CostKind::Head,
            madds,
            memory: active as u64 * n as u64,
            dense_madds: 0,
        });
    }

    pub fn report(self) -> CostReport {
        CostReport {
            per_layer: self.layers,
        }
    }
}

/// Aggregated cost report. The headline conv total excludes the final
/// classification head, which is reported separately.
#[derive(Debug, Clone, Default)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn conv_madds(&self) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.kind == CostKind::Conv)
            .map(|l| l.madds)
            .sum()
    }

    pub fn head_madds(&self) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.kind == CostKind::Head)
            .map(|l| l.madds)
            .sum()
    }

    pub fn aux_values(&self) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.kind == CostKind::Aux)
            .map(|l| l.madds)
            .sum()
    }

    pub fn memory_values(&self) -> u64 {
        self.per_layer.iter().map(|l| l.memory).sum()
    }

    pub fn dense_equivalent_madds(&self) -> u64 {
        self.per_layer.iter().map(|l| l.dense_madds).sum()
    }

    /// Aligned text table. With `raw_flops` set, multiply-adds are reported
    /// as 2x raw FLOPs.
    pub fn render_table(&self, raw_flops: bool) -> String {
        let scale = if raw_flops { 2 } else { 1 };
        let unit = if raw_flops { "flops" } else { "madds" };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<32} {:>6} {:>14} {:>12} {:>14}\n",
            "layer", "kind", unit, "memory", "dense"
        ));
        for l in &self.per_layer {
            let kind = match l.kind {
                CostKind::Conv => "conv",
                CostKind::Head => "head",
                CostKind::Aux => "aux",
            };
            out.push_str(&format!(
                "{:<32} {:>6} {:>14} {:>12} {:>14}\n",
                l.name,
                kind,
                l.madds * scale,
                l.memory,
                l.dense_madds * scale
            ));
        }
        out.push_str(&format!(
            "total conv (excl. head): {}  head: {}  aux: {}  dense equivalent: {}\n",
            self.conv_madds() * scale,
            self.head_madds() * scale,
            self.aux_values(),
            self.dense_equivalent_madds() * scale
        ));
        out
    }

    pub fn render_csv(&self, raw_flops: bool) -> String {
        let scale = if raw_flops { 2 } else { 1 };
        let mut out = String::from("layer,kind,madds,memory,dense_madds\n");
        for l in &self.per_layer {
            let kind = match l.kind {
                CostKind::Conv => "conv",
                CostKind::Head => "head",
                CostKind::Aux => "aux",
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.name,
                kind,
                l.madds * scale,
                l.memory,
                l.dense_madds * scale
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulebook::{build_sc_kind, build_ssc, RuleKind};
    use crate::tensor::{Coordinate, SparseTensor};

    #[test]
    fn ssc_single_site_costs_mn() {
        let mut t: SparseTensor<f64> = SparseTensor::new(3, &[9, 9, 9], 1, 4).unwrap();
        t.set_site(Coordinate::new(0, &[4, 4, 4]), &[1.0; 4]).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        let (madds, mem) = tally(&rb, 4, 6);
        assert_eq!(madds, 4 * 6); // a = 1 at the only active output
        assert_eq!(mem, 6);
    }

    #[test]
    fn empty_input_costs_zero() {
        let t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 1, 2).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        assert_eq!(tally(&rb, 2, 2), (0, 0));
    }

    #[test]
    fn fully_dense_ssc_matches_dense_formula() {
        // all-active tensor: SSC multiply-adds at an interior site equal
        // 3^d * m * n; totals match the dense count restricted to realized
        // (boundary-clipped) neighborhoods
        let l = 5usize;
        let dense = vec![1.0f64; l * l];
        let t = SparseTensor::sparsify(&dense, 2, &[l, l], 1, 1, 0.0).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        let (madds, _) = tally(&rb, 1, 1);
        // interior 3x3 window count summed over all sites
        let mut expect = 0u64;
        for x in 0..l as i32 {
            for y in 0..l as i32 {
                let wx = (x.min(l as i32 - 1 - x).min(1) + 2) as u64;
                let wy = (y.min(l as i32 - 1 - y).min(1) + 2) as u64;
                expect += wx * wy;
            }
        }
        assert_eq!(madds, expect);
        // interior site contributes the full 3^2
        assert!(madds >= 9);
    }

    #[test]
    fn pooling_rulebook_tallies() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[4, 4], 1, 3).unwrap();
        t.set_site(Coordinate::new(0, &[0, 0]), &[1.0; 3]).unwrap();
        let rb = build_sc_kind(&t, 2, 2, RuleKind::MaxPool).unwrap();
        let mut tr = CostTracker::default();
        tr.record_aux("mp", rb.a_out() * 1, 3);
        let rep = tr.report();
        assert_eq!(rep.aux_values(), 3);
    }
}
