//! Trainable sparse segmentation networks.
//!
//! Architectures follow a declarative spec: C3 stacks submanifold
//! convolutions at one resolution; U-Nets downsample with SC(2,2), come back
//! up with deconvolutions and skip concatenation; FCNs upsample every level
//! back to full resolution with nearest-neighbor upsampling and merge by
//! concatenation. Every submanifold convolution except the very first layer
//! is pre-activated (batch norm, then ReLU, then the convolution). The
//! per-voxel head is batch norm + ReLU + linear + softmax.
//!
//! Backward passes are hand-written transposes of the forward data flow;
//! each layer keeps the cache it needs from the last forward call.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cost::CostTracker;
use crate::matrix::{axpy, Matrix};
use crate::ops::{
    self, BatchNormState, BnCache, BnMode, ConvWeights,
};
use crate::rng::SeedTree;
use crate::rulebook::{RuleBook, RuleBookCache, RuleKind};
use crate::scalar::Scalar;
use crate::tensor::{Coordinate, SparseTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    C3,
    Fcn,
    UNet,
    ShapeContext,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Arch> {
        match s.to_ascii_lowercase().as_str() {
            "c3" => Ok(Arch::C3),
            "fcn" => Ok(Arch::Fcn),
            "unet" | "u-net" => Ok(Arch::UNet),
            "shapecontext" | "shape-context" => Ok(Arch::ShapeContext),
            other => Err(Error::InvalidSpec(format!("unknown architecture {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::C3 => "c3",
            Arch::Fcn => "fcn",
            Arch::UNet => "unet",
            Arch::ShapeContext => "shapecontext",
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub dims: usize,
    pub in_planes: usize,
    pub filters0: usize,
    pub levels: usize,
    pub block_reps: usize,
    pub residual: bool,
    pub n_classes: usize,
    /// Hidden width of the shape-context MLP baseline.
    pub mlp_hidden: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.dims) {
            return Err(Error::InvalidSpec("dims must be in 2..=4".into()));
        }
        if self.in_planes == 0 || self.n_classes == 0 {
            return Err(Error::InvalidSpec("in_planes and n_classes must be >= 1".into()));
        }
        if ![8, 16, 32, 64].contains(&self.filters0) {
            return Err(Error::InvalidSpec("filters0 must be 8, 16, 32 or 64".into()));
        }
        if self.block_reps == 0 || self.block_reps > 6 {
            return Err(Error::InvalidSpec("block_reps must be 1..=6".into()));
        }
        match self.arch {
            Arch::Fcn | Arch::UNet => {
                if self.levels == 0 || self.levels > 5 {
                    return Err(Error::InvalidSpec("levels must be 1..=5".into()));
                }
            }
            Arch::ShapeContext => {
                if self.dims != 3 || self.in_planes != 1 {
                    return Err(Error::InvalidSpec(
                        "shape-context baseline needs dims=3 and a single intensity plane".into(),
                    ));
                }
                if ![32, 64, 128, 256, 512].contains(&self.mlp_hidden) {
                    return Err(Error::InvalidSpec(
                        "mlp_hidden must be one of 32/64/128/256/512".into(),
                    ));
                }
            }
            Arch::C3 => {}
        }
        Ok(())
    }

    /// Filters at downsampling level `i` (doubled per level).
    pub fn width(&self, level: usize) -> usize {
        self.filters0 << level
    }
}

/// Mutable view of one parameter tensor during a visit.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    /// Whether L2 weight decay applies (convs and linear weights, not BN
    /// affine parameters or biases).
    pub decay: bool,
}

pub type ParamFn<'f, T> = dyn FnMut(ParamRef<'_, T>) + 'f;
pub type BufferFn<'f, T> = dyn FnMut(&str, &mut [T]) + 'f;

/// Per-forward execution context.
pub struct Ctx<'a, T> {
    pub rb_cache: &'a mut RuleBookCache,
    pub mode: BnMode,
    pub cost: Option<&'a mut CostTracker>,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T> Ctx<'a, T> {
    pub fn new(
        rb_cache: &'a mut RuleBookCache,
        mode: BnMode,
        cost: Option<&'a mut CostTracker>,
    ) -> Self {
        Ctx {
            rb_cache,
            mode,
            cost,
            _marker: std::marker::PhantomData,
        }
    }
}

fn init_matrix<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Matrix::from_rows(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// Convolution layer (SSC / SC / DC)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Ssc { f: usize },
    Sc { f: usize, stride: usize },
    Dc,
}

struct ConvCache<T> {
    rb: Arc<RuleBook>,
    input_feats: Matrix<T>,
    /// Generation of the input tensor; a paired deconvolution keys its
    /// inverted rule book on this.
    in_generation: u64,
}

pub struct Conv<T> {
    name: String,
    kind: ConvKind,
    w: ConvWeights<T>,
    gw: ConvWeights<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv<T> {
    fn new<R: Rng>(
        name: String,
        kind: ConvKind,
        dims: usize,
        m: usize,
        n: usize,
        rng: &mut R,
    ) -> Self {
        let f = match kind {
            ConvKind::Ssc { f } => f,
            ConvKind::Sc { f, .. } => f,
            ConvKind::Dc => 2,
        };
        let count = f.pow(dims as u32);
        let std = (2.0 / (count as f64 * m as f64)).sqrt();
        let per_offset = (0..count).map(|_| init_matrix(rng, m, n, std)).collect();
        Conv {
            name,
            kind,
            w: ConvWeights {
                per_offset,
                bias: None,
            },
            gw: ConvWeights::zeros(count, m, n),
            cache: None,
        }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let rb = match self.kind {
            ConvKind::Ssc { f } => ctx.rb_cache.get_or_build(x, f, 1, RuleKind::Ssc)?,
            ConvKind::Sc { f, stride } => ctx.rb_cache.get_or_build(x, f, stride, RuleKind::Sc)?,
            ConvKind::Dc => {
                return Err(Error::InvalidSpec(
                    "deconvolution needs an inverted rule book".into(),
                ))
            }
        };
        self.forward_with_rb(x, rb, ctx)
    }

    fn forward_with_rb(
        &mut self,
        x: &SparseTensor<T>,
        rb: Arc<RuleBook>,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<SparseTensor<T>> {
        let out = ops::conv_forward(&rb, x.features(), &self.w)?;
        if let Some(cost) = ctx.cost.as_deref_mut() {
            cost.record_conv(&self.name, &rb, self.w.m(), self.w.n(), false);
        }
        let out_t = ops::output_tensor(&rb, x, out)?;
        self.cache = Some(ConvCache {
            rb,
            input_feats: x.features().clone(),
            in_generation: x.generation(),
        });
        Ok(out_t)
    }

    /// Accumulates weight gradients and returns the gradient w.r.t. the
    /// layer input.
    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Training("backward before forward".into()))?;
        let grads = ops::conv_backward(&cache.rb, &cache.input_feats, &self.w, grad_out)?;
        for (g, d) in self.gw.per_offset.iter_mut().zip(&grads.grad_w) {
            axpy(g, d, T::one());
        }
        Ok(grads.grad_in)
    }

    fn cached_rb(&self) -> Option<(&Arc<RuleBook>, u64)> {
        self.cache.as_ref().map(|c| (&c.rb, c.in_generation))
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        let (m, n) = (self.w.m(), self.w.n());
        for (i, (w, g)) in self
            .w
            .per_offset
            .iter_mut()
            .zip(self.gw.per_offset.iter_mut())
            .enumerate()
        {
            f(ParamRef {
                name: format!("{}.w{}", self.name, i),
                shape: vec![m, n],
                value: w.data_mut(),
                grad: g.data_mut(),
                decay: true,
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Batch norm layer

pub struct BnLayer<T> {
    name: String,
    state: BatchNormState<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BnLayer<T> {
    fn new(name: String, n: usize) -> Self {
        BnLayer {
            name,
            state: BatchNormState::new(n),
            grad_gamma: vec![T::zero(); n],
            grad_beta: vec![T::zero(); n],
            cache: None,
        }
    }

    fn forward(&mut self, feats: &Matrix<T>, ctx: &mut Ctx<'_, T>) -> Matrix<T> {
        let (out, cache) = ops::batchnorm_forward(&mut self.state, feats, ctx.mode);
        if let Some(cost) = ctx.cost.as_deref_mut() {
            cost.record_aux(&self.name, feats.rows(), feats.cols());
        }
        self.cache = Some(cache);
        out
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Matrix<T> {
        let cache = self.cache.as_ref().expect("backward before forward");
        let grads = ops::batchnorm_backward(&self.state, cache, grad_out);
        for (g, d) in self.grad_gamma.iter_mut().zip(&grads.grad_gamma) {
            *g += *d;
        }
        for (g, d) in self.grad_beta.iter_mut().zip(&grads.grad_beta) {
            *g += *d;
        }
        grads.grad_in
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        let n = self.state.gamma.len();
        f(ParamRef {
            name: format!("{}.gamma", self.name),
            shape: vec![n],
            value: &mut self.state.gamma,
            grad: &mut self.grad_gamma,
            decay: false,
        });
        f(ParamRef {
            name: format!("{}.beta", self.name),
            shape: vec![n],
            value: &mut self.state.beta,
            grad: &mut self.grad_beta,
            decay: false,
        });
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        f(
            &format!("{}.running_mean", self.name),
            &mut self.state.running_mean,
        );
        f(
            &format!("{}.running_var", self.name),
            &mut self.state.running_var,
        );
    }
}

// ---------------------------------------------------------------------------
// Pre-activated convolution: BN -> ReLU -> conv

pub struct PreActConv<T> {
    bn: BnLayer<T>,
    conv: Conv<T>,
    relu_in: Option<Matrix<T>>,
}

impl<T: Scalar> PreActConv<T> {
    fn new<R: Rng>(
        name: &str,
        kind: ConvKind,
        dims: usize,
        m: usize,
        n: usize,
        rng: &mut R,
    ) -> Self {
        PreActConv {
            bn: BnLayer::new(format!("{name}.bn"), m),
            conv: Conv::new(format!("{name}.conv"), kind, dims, m, n, rng),
            relu_in: None,
        }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let pre = self.bn.forward(x.features(), ctx);
        let activated = ops::relu_forward(&pre);
        self.relu_in = Some(pre);
        let x2 = x.with_features(activated)?;
        self.conv.forward(&x2, ctx)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let g = self.conv.backward(grad_out)?;
        let pre = self.relu_in.as_ref().expect("backward before forward");
        let g = ops::relu_backward(pre, &g);
        Ok(self.bn.backward(&g))
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        self.bn.for_each_param(f);
        self.conv.for_each_param(f);
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        self.bn.for_each_buffer(f);
    }
}

// ---------------------------------------------------------------------------
// Blocks: stacks of pre-activated SSC convolutions, plain or residual

enum BlockUnit<T> {
    Plain(PreActConv<T>),
    /// y = x + c2(c1(x)); identity shortcut, so widths must match.
    Residual(PreActConv<T>, PreActConv<T>),
}

pub struct Block<T> {
    units: Vec<BlockUnit<T>>,
}

impl<T: Scalar> Block<T> {
    /// `reps` units from `m` to `n` planes. With `residual` set, units are
    /// residual blocks of two SSC(3) convs; a width change is performed by a
    /// plain first unit.
    fn new<R: Rng>(
        name: &str,
        dims: usize,
        m: usize,
        n: usize,
        reps: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        let mut units = Vec::new();
        let mut cur = m;
        for r in 0..reps {
            let uname = format!("{name}.u{r}");
            if residual && cur == n {
                units.push(BlockUnit::Residual(
                    PreActConv::new(&format!("{uname}.a"), ConvKind::Ssc { f: 3 }, dims, n, n, rng),
                    PreActConv::new(&format!("{uname}.b"), ConvKind::Ssc { f: 3 }, dims, n, n, rng),
                ));
            } else {
                units.push(BlockUnit::Plain(PreActConv::new(
                    &uname,
                    ConvKind::Ssc { f: 3 },
                    dims,
                    cur,
                    n,
                    rng,
                )));
            }
            cur = n;
        }
        Block { units }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let mut cur = x.clone();
        for unit in &mut self.units {
            cur = match unit {
                BlockUnit::Plain(c) => c.forward(&cur, ctx)?,
                BlockUnit::Residual(c1, c2) => {
                    let h = c1.forward(&cur, ctx)?;
                    let y = c2.forward(&h, ctx)?;
                    let mut feats = y.features().clone();
                    axpy(&mut feats, cur.features(), T::one());
                    cur.with_features(feats)?
                }
            };
        }
        Ok(cur)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let mut g = grad_out.clone();
        for unit in self.units.iter_mut().rev() {
            g = match unit {
                BlockUnit::Plain(c) => c.backward(&g)?,
                BlockUnit::Residual(c1, c2) => {
                    let mut gi = c1.backward(&c2.backward(&g)?)?;
                    axpy(&mut gi, &g, T::one());
                    gi
                }
            };
        }
        Ok(g)
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        for unit in &mut self.units {
            match unit {
                BlockUnit::Plain(c) => c.for_each_param(f),
                BlockUnit::Residual(c1, c2) => {
                    c1.for_each_param(f);
                    c2.for_each_param(f);
                }
            }
        }
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        for unit in &mut self.units {
            match unit {
                BlockUnit::Plain(c) => c.for_each_buffer(f),
                BlockUnit::Residual(c1, c2) => {
                    c1.for_each_buffer(f);
                    c2.for_each_buffer(f);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Linear layer (per-voxel affine)

pub struct LinearLayer<T> {
    name: String,
    w: Matrix<T>,
    b: Vec<T>,
    gw: Matrix<T>,
    gb: Vec<T>,
    input: Option<Matrix<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    fn new<R: Rng>(name: String, m: usize, n: usize, rng: &mut R) -> Self {
        let std = (2.0 / m as f64).sqrt();
        LinearLayer {
            name,
            w: init_matrix(rng, m, n, std),
            b: vec![T::zero(); n],
            gw: Matrix::zeros(m, n),
            gb: vec![T::zero(); n],
            input: None,
        }
    }

    fn forward(&mut self, feats: &Matrix<T>) -> Result<Matrix<T>> {
        let out = ops::linear_forward(feats, &self.w, &self.b)?;
        self.input = Some(feats.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Matrix<T> {
        let input = self.input.as_ref().expect("backward before forward");
        let grads = ops::linear_backward(input, &self.w, grad_out);
        axpy(&mut self.gw, &grads.grad_w, T::one());
        for (g, d) in self.gb.iter_mut().zip(&grads.grad_b) {
            *g += *d;
        }
        grads.grad_in
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        let (m, n) = (self.w.rows(), self.w.cols());
        f(ParamRef {
            name: format!("{}.w", self.name),
            shape: vec![m, n],
            value: self.w.data_mut(),
            grad: self.gw.data_mut(),
            decay: true,
        });
        f(ParamRef {
            name: format!("{}.b", self.name),
            shape: vec![n],
            value: &mut self.b,
            grad: &mut self.gb,
            decay: false,
        });
    }
}

// ---------------------------------------------------------------------------
// Classification head: BN -> ReLU -> per-voxel linear

pub struct Head<T> {
    bn: BnLayer<T>,
    linear: LinearLayer<T>,
    relu_in: Option<Matrix<T>>,
}

impl<T: Scalar> Head<T> {
    fn new<R: Rng>(name: &str, m: usize, classes: usize, rng: &mut R) -> Self {
        Head {
            bn: BnLayer::new(format!("{name}.bn"), m),
            linear: LinearLayer::new(format!("{name}.linear"), m, classes, rng),
            relu_in: None,
        }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let pre = self.bn.forward(x.features(), ctx);
        let activated = ops::relu_forward(&pre);
        self.relu_in = Some(pre);
        let logits = self.linear.forward(&activated)?;
        if let Some(cost) = ctx.cost.as_deref_mut() {
            cost.record_head_linear(
                &self.linear.name,
                x.active_count(),
                self.linear.w.rows(),
                self.linear.w.cols(),
            );
        }
        x.with_features(logits)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Matrix<T> {
        let g = self.linear.backward(grad_out);
        let pre = self.relu_in.as_ref().expect("backward before forward");
        let g = ops::relu_backward(pre, &g);
        self.bn.backward(&g)
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        self.bn.for_each_param(f);
        self.linear.for_each_param(f);
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        self.bn.for_each_buffer(f);
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsampling

/// Fine-row to coarse-row mapping for nearest-neighbor upsampling.
pub struct UpsampleMap {
    pub parent_row: Vec<Option<usize>>,
    pub a_coarse: usize,
}

/// Maps each fine active site to the coarse cell containing it.
pub fn nn_upsample_map<T: Scalar>(
    coarse: &SparseTensor<T>,
    fine_coords: &[Coordinate],
    dims: usize,
    factor: usize,
) -> UpsampleMap {
    let parent_row = fine_coords
        .iter()
        .map(|c| {
            let spatial = c.spatial(dims);
            let parent: Vec<i32> = spatial.iter().map(|&x| x.div_euclid(factor as i32)).collect();
            coarse.row_of(&Coordinate::new(c.batch, &parent))
        })
        .collect();
    UpsampleMap {
        parent_row,
        a_coarse: coarse.active_count(),
    }
}

/// Each fine site receives its coarse parent's feature vector; fine sites
/// with an inactive parent get zeros.
pub fn nn_upsample_apply<T: Scalar>(map: &UpsampleMap, coarse_feats: &Matrix<T>) -> Matrix<T> {
    let n = coarse_feats.cols();
    let mut out = Matrix::zeros(map.parent_row.len(), n);
    for (r, parent) in map.parent_row.iter().enumerate() {
        if let Some(p) = parent {
            out.row_mut(r).copy_from_slice(coarse_feats.row(*p));
        }
    }
    out
}

/// Gradient of each coarse site is the sum over its active children.
pub fn nn_upsample_backward<T: Scalar>(map: &UpsampleMap, grad_fine: &Matrix<T>) -> Matrix<T> {
    let n = grad_fine.cols();
    let mut out = Matrix::zeros(map.a_coarse, n);
    for (r, parent) in map.parent_row.iter().enumerate() {
        if let Some(p) = parent {
            let dst = out.row_mut(*p);
            for (d, &g) in dst.iter_mut().zip(grad_fine.row(r)) {
                *d += g;
            }
        }
    }
    out
}

/// Standalone nearest-neighbor upsample onto a given fine active set.
pub fn nn_upsample<T: Scalar>(
    coarse: &SparseTensor<T>,
    fine: &SparseTensor<T>,
    factor: usize,
) -> Result<SparseTensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidSpec("upsample factor must be >= 1".into()));
    }
    for (j, (&lc, &lf)) in coarse
        .spatial_size()
        .iter()
        .zip(fine.spatial_size())
        .enumerate()
    {
        if lc * factor != lf {
            return Err(Error::ShapeMismatch(format!(
                "upsample factor {factor} does not map extent {lc} to {lf} in dimension {j}"
            )));
        }
    }
    let map = nn_upsample_map(coarse, fine.coords(), fine.dims(), factor);
    let feats = nn_upsample_apply(&map, coarse.features());
    fine.with_features(feats)
}

// ---------------------------------------------------------------------------
// U-Net

struct UNetLevel<T> {
    enc: Block<T>,
    down: Option<DownPath<T>>,
}

struct DownPath<T> {
    sc: Conv<T>,
    inner: Box<UNetLevel<T>>,
    dc: Conv<T>,
    dec: Block<T>,
    skip_width: usize,
}

impl<T: Scalar> UNetLevel<T> {
    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let e = self.enc.forward(x, ctx)?;
        let Some(down) = &mut self.down else {
            return Ok(e);
        };
        let in_gen = e.generation();
        let d = down.sc.forward(&e, ctx)?;
        let i = down.inner.forward(&d, ctx)?;
        let (sc_rb, _) = down.sc.cached_rb().expect("sc forward ran");
        let dc_rb = ctx.rb_cache.get_or_invert(sc_rb, in_gen)?;
        let u = down.dc.forward_with_rb(&i, dc_rb, ctx)?;
        // concat skip features with the upsampled decoder features
        let cat = concat_features(&[e.features(), u.features()]);
        let cat_t = e.with_features(cat)?;
        down.dec.forward(&cat_t, ctx)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let Some(down) = &mut self.down else {
            return self.enc.backward(grad_out);
        };
        let g_cat = down.dec.backward(grad_out)?;
        let (g_skip, g_u) = split_features(&g_cat, down.skip_width);
        let g_i = down.dc.backward(&g_u)?;
        let g_d = down.inner.backward(&g_i)?;
        let mut g_e = down.sc.backward(&g_d)?;
        axpy(&mut g_e, &g_skip, T::one());
        self.enc.backward(&g_e)
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        self.enc.for_each_param(f);
        if let Some(down) = &mut self.down {
            down.sc.for_each_param(f);
            down.inner.for_each_param(f);
            down.dc.for_each_param(f);
            down.dec.for_each_param(f);
        }
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        self.enc.for_each_buffer(f);
        if let Some(down) = &mut self.down {
            down.inner.for_each_buffer(f);
            down.dec.for_each_buffer(f);
        }
    }
}

fn concat_features<T: Scalar>(parts: &[&Matrix<T>]) -> Matrix<T> {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let dst = out.row_mut(r);
        let mut at = 0;
        for p in parts {
            dst[at..at + p.cols()].copy_from_slice(p.row(r));
            at += p.cols();
        }
    }
    out
}

fn split_features<T: Scalar>(m: &Matrix<T>, first_cols: usize) -> (Matrix<T>, Matrix<T>) {
    let rows = m.rows();
    let rest = m.cols() - first_cols;
    let mut a = Matrix::zeros(rows, first_cols);
    let mut b = Matrix::zeros(rows, rest);
    for r in 0..rows {
        let src = m.row(r);
        a.row_mut(r).copy_from_slice(&src[..first_cols]);
        b.row_mut(r).copy_from_slice(&src[first_cols..]);
    }
    (a, b)
}

fn build_unet_level<T: Scalar, R: Rng>(
    spec: &NetworkSpec,
    level: usize,
    rng: &mut R,
) -> UNetLevel<T> {
    let w = spec.width(level);
    let enc = Block::new(
        &format!("unet.l{level}.enc"),
        spec.dims,
        w,
        w,
        spec.block_reps,
        spec.residual,
        rng,
    );
    if level == spec.levels {
        return UNetLevel { enc, down: None };
    }
    let w_next = spec.width(level + 1);
    let sc = Conv::new(
        format!("unet.l{level}.down"),
        ConvKind::Sc { f: 2, stride: 2 },
        spec.dims,
        w,
        w_next,
        rng,
    );
    let inner = Box::new(build_unet_level(spec, level + 1, rng));
    let dc = Conv::new(
        format!("unet.l{level}.up"),
        ConvKind::Dc,
        spec.dims,
        w_next,
        w,
        rng,
    );
    let dec = Block::new(
        &format!("unet.l{level}.dec"),
        spec.dims,
        2 * w,
        w,
        spec.block_reps,
        spec.residual,
        rng,
    );
    UNetLevel {
        enc,
        down: Some(DownPath {
            sc,
            inner,
            dc,
            dec,
            skip_width: w,
        }),
    }
}

// ---------------------------------------------------------------------------
// FCN

struct FcnLevel<T> {
    block: Block<T>,
    down: Option<Conv<T>>,
}

struct FcnNet<T> {
    levels: Vec<FcnLevel<T>>,
    merge: PreActConv<T>,
    upsample_maps: Vec<UpsampleMap>,
    level_widths: Vec<usize>,
}

impl<T: Scalar> FcnNet<T> {
    fn new<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut levels = Vec::new();
        let mut widths = Vec::new();
        for l in 0..=spec.levels {
            let w = spec.width(l);
            widths.push(w);
            let block = Block::new(
                &format!("fcn.l{l}.block"),
                spec.dims,
                w,
                w,
                spec.block_reps,
                spec.residual,
                rng,
            );
            let down = (l < spec.levels).then(|| {
                Conv::new(
                    format!("fcn.l{l}.down"),
                    ConvKind::Sc { f: 2, stride: 2 },
                    spec.dims,
                    w,
                    spec.width(l + 1),
                    rng,
                )
            });
            levels.push(FcnLevel { block, down });
        }
        let total: usize = widths.iter().sum();
        let merge = PreActConv::new(
            "fcn.merge",
            ConvKind::Ssc { f: 3 },
            spec.dims,
            total,
            spec.filters0,
            rng,
        );
        FcnNet {
            levels,
            merge,
            upsample_maps: Vec::new(),
            level_widths: widths,
        }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let mut outs: Vec<SparseTensor<T>> = Vec::new();
        let mut cur = x.clone();
        for level in &mut self.levels {
            let b = level.block.forward(&cur, ctx)?;
            if let Some(down) = &mut level.down {
                cur = down.forward(&b, ctx)?;
            }
            outs.push(b);
        }
        let fine = &outs[0];
        self.upsample_maps.clear();
        let mut parts: Vec<Matrix<T>> = vec![fine.features().clone()];
        for (i, coarse) in outs.iter().enumerate().skip(1) {
            let factor = 1usize << i;
            let map = nn_upsample_map(coarse, fine.coords(), fine.dims(), factor);
            parts.push(nn_upsample_apply(&map, coarse.features()));
            self.upsample_maps.push(map);
        }
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        let cat = concat_features(&refs);
        let merged = fine.with_features(cat)?;
        self.merge.forward(&merged, ctx)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let g_cat = self.merge.backward(grad_out)?;
        // split the concatenated gradient back into per-level parts
        let mut grads: Vec<Matrix<T>> = Vec::new();
        let mut rest = g_cat;
        for (i, &w) in self.level_widths.iter().enumerate() {
            if i + 1 == self.level_widths.len() {
                grads.push(rest.clone());
                break;
            }
            let (head, tail) = split_features(&rest, w);
            grads.push(head);
            rest = tail;
        }
        let mut g_from_below: Option<Matrix<T>> = None;
        for (i, level) in self.levels.iter_mut().enumerate().rev() {
            let mut g_b = if i == 0 {
                grads[0].clone()
            } else {
                nn_upsample_backward(&self.upsample_maps[i - 1], &grads[i])
            };
            if let Some(down) = &mut level.down {
                let g = down.backward(&g_from_below.take().expect("inner gradient"))?;
                axpy(&mut g_b, &g, T::one());
            }
            g_from_below = Some(level.block.backward(&g_b)?);
        }
        Ok(g_from_below.expect("at least one level"))
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        for level in &mut self.levels {
            level.block.for_each_param(f);
            if let Some(down) = &mut level.down {
                down.for_each_param(f);
            }
        }
        self.merge.for_each_param(f);
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        for level in &mut self.levels {
            level.block.for_each_buffer(f);
        }
        self.merge.for_each_buffer(f);
    }
}

// ---------------------------------------------------------------------------
// Shape-context baseline

struct ShapeContextNet<T> {
    l1: LinearLayer<T>,
    bn1: BnLayer<T>,
    l2: LinearLayer<T>,
    bn2: BnLayer<T>,
    relu1_in: Option<Matrix<T>>,
    relu2_in: Option<Matrix<T>>,
    head: LinearLayer<T>,
}

impl<T: Scalar> ShapeContextNet<T> {
    fn new<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let h = spec.mlp_hidden;
        ShapeContextNet {
            l1: LinearLayer::new("sc.mlp1".into(), SHAPE_CONTEXT_PLANES, h, rng),
            bn1: BnLayer::new("sc.bn1".into(), h),
            l2: LinearLayer::new("sc.mlp2".into(), h, h, rng),
            bn2: BnLayer::new("sc.bn2".into(), h),
            relu1_in: None,
            relu2_in: None,
            head: LinearLayer::new("sc.head".into(), h, spec.n_classes, rng),
        }
    }

    fn forward(&mut self, x: &SparseTensor<T>, ctx: &mut Ctx<'_, T>) -> Result<SparseTensor<T>> {
        let features = shape_context_features(x)?;
        let h1 = self.l1.forward(features.features())?;
        let h1 = self.bn1.forward(&h1, ctx);
        let a1 = ops::relu_forward(&h1);
        self.relu1_in = Some(h1);
        let h2 = self.l2.forward(&a1)?;
        let h2 = self.bn2.forward(&h2, ctx);
        let a2 = ops::relu_forward(&h2);
        self.relu2_in = Some(h2);
        let logits = self.head.forward(&a2)?;
        if let Some(cost) = ctx.cost.as_deref_mut() {
            cost.record_head_linear("sc.head", x.active_count(), self.head.w.rows(), self.head.w.cols());
        }
        x.with_features(logits)
    }

    fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let g = self.head.backward(grad_out);
        let g = ops::relu_backward(self.relu2_in.as_ref().unwrap(), &g);
        let g = self.bn2.backward(&g);
        let g = self.l2.backward(&g);
        let g = ops::relu_backward(self.relu1_in.as_ref().unwrap(), &g);
        let g = self.bn1.backward(&g);
        // the shape-context transform has no parameters; gradients stop here
        Ok(self.l1.backward(&g))
    }

    fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        self.l1.for_each_param(f);
        self.bn1.for_each_param(f);
        self.l2.for_each_param(f);
        self.bn2.for_each_param(f);
        self.head.for_each_param(f);
    }

    fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        self.bn1.for_each_buffer(f);
        self.bn2.for_each_buffer(f);
    }
}

pub const SHAPE_CONTEXT_SCALES: [usize; 5] = [1, 2, 4, 8, 16];
pub const SHAPE_CONTEXT_PLANES: usize = 27 * SHAPE_CONTEXT_SCALES.len();

/// Voxelized shape-context features: the 27 neighborhood intensities at the
/// input scale plus the same gather at four average-pooled scales (2, 4, 8,
/// 16), mapped back to the original active sites by nearest-neighbor
/// upsampling. 135 output planes.
pub fn shape_context_features<T: Scalar>(input: &SparseTensor<T>) -> Result<SparseTensor<T>> {
    if input.dims() != 3 {
        return Err(Error::InvalidSpec("shape context requires dims=3".into()));
    }
    if input.planes() != 1 {
        return Err(Error::InvalidSpec(
            "shape context expects a single intensity plane".into(),
        ));
    }
    for &l in input.spatial_size() {
        if l % 16 != 0 {
            return Err(Error::InvalidSpec(
                "shape context needs grid extents divisible by 16".into(),
            ));
        }
    }
    let a = input.active_count();
    let mut out = Matrix::zeros(a, SHAPE_CONTEXT_PLANES);
    for (si, &scale) in SHAPE_CONTEXT_SCALES.iter().enumerate() {
        let pooled: SparseTensor<T> = if scale == 1 {
            input.clone()
        } else {
            let rb = crate::rulebook::build_sc_kind(input, scale, scale, RuleKind::AvgPool)?;
            let feats = ops::avgpool_forward(&rb, input.features())?;
            ops::output_tensor(&rb, input, feats)?
        };
        // 27-slot neighborhood gather at this scale (identity-weight SSC)
        let rb = crate::rulebook::build_ssc(&pooled, 3)?;
        let mut gathered = Matrix::zeros(pooled.active_count(), 27);
        for (oi, pairs) in rb.rules.iter().enumerate() {
            for &(j, k) in pairs {
                gathered.set(k as usize, oi, pooled.features().get(j as usize, 0));
            }
        }
        let map = nn_upsample_map(&pooled, input.coords(), input.dims(), scale);
        let fine = nn_upsample_apply(&map, &gathered);
        for r in 0..a {
            out.row_mut(r)[si * 27..(si + 1) * 27].copy_from_slice(fine.row(r));
        }
    }
    input.with_features(out)
}

// ---------------------------------------------------------------------------
// Network

enum ArchNet<T> {
    C3 {
        block: Block<T>,
    },
    UNet {
        top: UNetLevel<T>,
    },
    Fcn {
        net: FcnNet<T>,
    },
    ShapeContext {
        net: ShapeContextNet<T>,
    },
}

/// A built, trainable network: first bare SSC layer (except the
/// shape-context baseline), architecture body, classification head.
pub struct Network<T> {
    pub spec: NetworkSpec,
    first: Option<Conv<T>>,
    body: ArchNet<T>,
    head: Option<Head<T>>,
    pub rb_cache: RuleBookCache,
    pub last_cost: Option<crate::cost::CostReport>,
    pub track_cost: bool,
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: &NetworkSpec, seeds: &SeedTree) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds.stream("init", &[]);
        let dims = spec.dims;
        let w0 = spec.filters0;
        let (first, body, head) = match spec.arch {
            Arch::C3 => {
                let first = Conv::new(
                    "c3.first".into(),
                    ConvKind::Ssc { f: 3 },
                    dims,
                    spec.in_planes,
                    w0,
                    &mut rng,
                );
                // block_reps counts total conv layers: the bare first SSC
                // plus (reps - 1) pre-activated ones
                let block = Block::new(
                    "c3.body",
                    dims,
                    w0,
                    w0,
                    spec.block_reps.saturating_sub(1),
                    spec.residual,
                    &mut rng,
                );
                let head = Head::new("c3.head", w0, spec.n_classes, &mut rng);
                (Some(first), ArchNet::C3 { block }, Some(head))
            }
            Arch::UNet => {
                let first = Conv::new(
                    "unet.first".into(),
                    ConvKind::Ssc { f: 3 },
                    dims,
                    spec.in_planes,
                    w0,
                    &mut rng,
                );
                let top = build_unet_level(spec, 0, &mut rng);
                let head = Head::new("unet.head", w0, spec.n_classes, &mut rng);
                (Some(first), ArchNet::UNet { top }, Some(head))
            }
            Arch::Fcn => {
                let first = Conv::new(
                    "fcn.first".into(),
                    ConvKind::Ssc { f: 3 },
                    dims,
                    spec.in_planes,
                    w0,
                    &mut rng,
                );
                let net = FcnNet::new(spec, &mut rng);
                let head = Head::new("fcn.head", w0, spec.n_classes, &mut rng);
                (Some(first), ArchNet::Fcn { net }, Some(head))
            }
            Arch::ShapeContext => {
                let net = ShapeContextNet::new(spec, &mut rng);
                (None, ArchNet::ShapeContext { net }, None)
            }
        };
        Ok(Network {
            spec: spec.clone(),
            first,
            body,
            head,
            rb_cache: RuleBookCache::new(true),
            last_cost: None,
            track_cost: false,
        })
    }

    pub fn set_rulebook_caching(&mut self, enabled: bool) {
        self.rb_cache = RuleBookCache::new(enabled);
    }

    fn check_grid(&self, x: &SparseTensor<T>) -> Result<()> {
        if x.dims() != self.spec.dims {
            return Err(Error::InvalidSpec(format!(
                "input dims {} but network expects {}",
                x.dims(),
                self.spec.dims
            )));
        }
        if x.planes() != self.spec.in_planes {
            return Err(Error::InvalidSpec(format!(
                "input planes {} but network expects {}",
                x.planes(),
                self.spec.in_planes
            )));
        }
        if matches!(self.spec.arch, Arch::Fcn | Arch::UNet) {
            let div = 1usize << self.spec.levels;
            for &l in x.spatial_size() {
                if l % div != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "grid extent {l} not divisible by 2^levels = {div}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Runs the network, returning per-voxel logits on the input active set.
    pub fn forward(&mut self, x: &SparseTensor<T>, mode: BnMode) -> Result<SparseTensor<T>> {
        self.check_grid(x)?;
        let mut tracker = self.track_cost.then(CostTracker::default);
        let mut ctx = Ctx::new(&mut self.rb_cache, mode, tracker.as_mut());
        let mut cur = x.clone();
        if let Some(first) = &mut self.first {
            cur = first.forward(&cur, &mut ctx)?;
        }
        cur = match &mut self.body {
            ArchNet::C3 { block } => block.forward(&cur, &mut ctx)?,
            ArchNet::UNet { top } => top.forward(&cur, &mut ctx)?,
            ArchNet::Fcn { net } => net.forward(&cur, &mut ctx)?,
            ArchNet::ShapeContext { net } => net.forward(&cur, &mut ctx)?,
        };
        if let Some(head) = &mut self.head {
            cur = head.forward(&cur, &mut ctx)?;
        }
        self.last_cost = tracker.map(CostTracker::report);
        Ok(cur)
    }

    /// Backpropagates a logit gradient, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &Matrix<T>) -> Result<()> {
        let mut g = match &mut self.head {
            Some(head) => head.backward(grad_logits),
            None => grad_logits.clone(),
        };
        g = match &mut self.body {
            ArchNet::C3 { block } => block.backward(&g)?,
            ArchNet::UNet { top } => top.backward(&g)?,
            ArchNet::Fcn { net } => net.backward(&g)?,
            ArchNet::ShapeContext { net } => net.backward(&g)?,
        };
        if let Some(first) = &mut self.first {
            first.backward(&g)?;
        }
        Ok(())
    }

    pub fn for_each_param(&mut self, f: &mut ParamFn<'_, T>) {
        if let Some(first) = &mut self.first {
            first.for_each_param(f);
        }
        match &mut self.body {
            ArchNet::C3 { block } => block.for_each_param(f),
            ArchNet::UNet { top } => top.for_each_param(f),
            ArchNet::Fcn { net } => net.for_each_param(f),
            ArchNet::ShapeContext { net } => net.for_each_param(f),
        }
        if let Some(head) = &mut self.head {
            head.for_each_param(f);
        }
    }

    pub fn for_each_buffer(&mut self, f: &mut BufferFn<'_, T>) {
        match &mut self.body {
            ArchNet::C3 { block } => block.for_each_buffer(f),
            ArchNet::UNet { top } => top.for_each_buffer(f),
            ArchNet::Fcn { net } => net.for_each_buffer(f),
            ArchNet::ShapeContext { net } => net.for_each_buffer(f),
        }
        if let Some(head) = &mut self.head {
            head.for_each_buffer(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p: ParamRef<'_, T>| {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        });
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.for_each_param(&mut |p: ParamRef<'_, T>| count += p.value.len());
        count
    }
}

/// Forward of one pre-activated residual unit built standalone, for tests
/// and gradient probes: y = x + SSC(ReLU(BN(SSC(ReLU(BN(x)))))).
pub fn residual_block_forward<T: Scalar>(
    block: &mut Block<T>,
    x: &SparseTensor<T>,
    cache: &mut RuleBookCache,
    mode: BnMode,
) -> Result<SparseTensor<T>> {
    let mut ctx = Ctx::new(cache, mode, None);
    block.forward(x, &mut ctx)
}

/// Builds a standalone residual block (two pre-activated SSC(3) convs with
/// an identity shortcut).
pub fn build_residual_block<T: Scalar>(
    dims: usize,
    width: usize,
    seeds: &SeedTree,
) -> Block<T> {
    let mut rng = seeds.stream("resblock", &[]);
    Block::new("resblock", dims, width, width, 1, true, &mut rng)
}

impl<T: Scalar> Block<T> {
    pub fn backward_pub(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward(grad_out)
    }

    pub fn for_each_param_pub(&mut self, f: &mut ParamFn<'_, T>) {
        self.for_each_param(f)
    }

    pub fn zero_conv_weights(&mut self) {
        self.for_each_param(&mut |p: ParamRef<'_, T>| {
            if p.decay {
                p.value.iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Coordinate;

    fn spec(arch: Arch) -> NetworkSpec {
        NetworkSpec {
            arch,
            dims: 3,
            in_planes: 1,
            filters0: 8,
            levels: 2,
            block_reps: 1,
            residual: false,
            n_classes: 3,
            mlp_hidden: 32,
        }
    }

    fn sample_input(extent: usize, sites: &[[i32; 3]]) -> SparseTensor<f64> {
        let mut t = SparseTensor::new(3, &[extent; 3], 1, 1).unwrap();
        for (i, c) in sites.iter().enumerate() {
            t.set_site(Coordinate::new(0, c), &[0.5 + i as f64 * 0.25]).unwrap();
        }
        t
    }

    #[test]
    fn c3_preserves_active_set() {
        let mut net: Network<f64> = Network::build(&spec(Arch::C3), &SeedTree::new(1)).unwrap();
        let x = sample_input(16, &[[3, 3, 3], [3, 4, 3], [10, 2, 9]]);
        let y = net.forward(&x, BnMode::Train).unwrap();
        assert_eq!(y.coords(), x.coords());
        assert_eq!(y.planes(), 3);
    }

    #[test]
    fn unet_restores_full_resolution() {
        let mut net: Network<f64> = Network::build(&spec(Arch::UNet), &SeedTree::new(2)).unwrap();
        let x = sample_input(16, &[[3, 3, 3], [3, 4, 3], [10, 2, 9], [11, 2, 9]]);
        let y = net.forward(&x, BnMode::Train).unwrap();
        assert_eq!(y.coords(), x.coords());
        assert_eq!(y.planes(), 3);
    }

    #[test]
    fn fcn_restores_full_resolution() {
        let mut net: Network<f64> = Network::build(&spec(Arch::Fcn), &SeedTree::new(3)).unwrap();
        let x = sample_input(16, &[[3, 3, 3], [3, 4, 3], [10, 2, 9], [11, 2, 9]]);
        let y = net.forward(&x, BnMode::Train).unwrap();
        assert_eq!(y.coords(), x.coords());
        assert_eq!(y.planes(), 3);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let mut net: Network<f64> = Network::build(&spec(Arch::UNet), &SeedTree::new(4)).unwrap();
        let x: SparseTensor<f64> = SparseTensor::new(3, &[16, 16, 16], 1, 1).unwrap();
        net.track_cost = true;
        let y = net.forward(&x, BnMode::Train).unwrap();
        assert_eq!(y.active_count(), 0);
        let cost = net.last_cost.take().unwrap();
        assert_eq!(cost.conv_madds(), 0);
    }

    #[test]
    fn unet_rejects_indivisible_grid() {
        let mut net: Network<f64> = Network::build(&spec(Arch::UNet), &SeedTree::new(5)).unwrap();
        let x = {
            let mut t = SparseTensor::new(3, &[10, 10, 10], 1, 1).unwrap();
            t.set_site(Coordinate::new(0, &[1, 1, 1]), &[1.0]).unwrap();
            t
        };
        assert!(net.forward(&x, BnMode::Train).is_err());
    }

    #[test]
    fn c3_param_count_closed_form() {
        let mut s = spec(Arch::C3);
        s.block_reps = 2;
        let mut net: Network<f64> = Network::build(&s, &SeedTree::new(6)).unwrap();
        // first SSC: 27 * in * 8; second (pre-activated): bn(8)*2 + 27*8*8;
        // head: bn(8)*2 + 8*3 + 3
        let expect = 27 * 1 * 8 + (8 + 8) + 27 * 8 * 8 + (8 + 8) + 8 * 3 + 3;
        assert_eq!(net.param_count(), expect);
    }

    #[test]
    fn unet_widths_double_per_level() {
        let mut s = spec(Arch::UNet);
        s.levels = 3;
        assert_eq!(
            (0..=3).map(|l| s.width(l)).collect::<Vec<_>>(),
            vec![8, 16, 32, 64]
        );
        let mut net: Network<f64> = Network::build(&s, &SeedTree::new(7)).unwrap();
        // deepest downsample conv must map 32 -> 64 planes
        let mut found = false;
        net.for_each_param(&mut |p: ParamRef<'_, f64>| {
            if p.name == "unet.l2.down.w0" {
                assert_eq!(p.shape, vec![32, 64]);
                found = true;
            }
        });
        assert!(found);
    }

    #[test]
    fn residual_block_zero_weights_is_identity() {
        let seeds = SeedTree::new(8);
        let mut block: Block<f64> = build_residual_block(3, 4, &seeds);
        block.zero_conv_weights();
        let mut t = SparseTensor::new(3, &[8, 8, 8], 1, 4).unwrap();
        t.set_site(Coordinate::new(0, &[2, 2, 2]), &[1.0, -2.0, 3.0, 0.5])
            .unwrap();
        t.set_site(Coordinate::new(0, &[2, 3, 2]), &[0.1, 0.2, 0.3, 0.4])
            .unwrap();
        let mut cache = RuleBookCache::new(true);
        let y = residual_block_forward(&mut block, &t, &mut cache, BnMode::Train).unwrap();
        assert_eq!(y.coords(), t.coords());
        assert_eq!(y.features(), t.features());
    }

    #[test]
    fn nn_upsample_identity_and_children() {
        let mut coarse: SparseTensor<f64> = SparseTensor::new(3, &[4, 4, 4], 1, 2).unwrap();
        coarse
            .set_site(Coordinate::new(0, &[1, 1, 1]), &[5.0, -1.0])
            .unwrap();
        // factor 1 is the identity
        let same = nn_upsample(&coarse, &coarse, 1).unwrap();
        assert_eq!(same.features(), coarse.features());
        // eight fine children all receive the coarse vector
        let mut fine: SparseTensor<f64> = SparseTensor::new(3, &[8, 8, 8], 1, 1).unwrap();
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    fine.set_site(Coordinate::new(0, &[2 + dx, 2 + dy, 2 + dz]), &[1.0])
                        .unwrap();
                }
            }
        }
        let up = nn_upsample(&coarse, &fine, 2).unwrap();
        assert_eq!(up.active_count(), 8);
        for r in 0..8 {
            assert_eq!(up.features().row(r), &[5.0, -1.0]);
        }
        // orphaned fine sites get zeros
        let mut fine2: SparseTensor<f64> = SparseTensor::new(3, &[8, 8, 8], 1, 1).unwrap();
        fine2.set_site(Coordinate::new(0, &[7, 7, 7]), &[1.0]).unwrap();
        let up2 = nn_upsample(&coarse, &fine2, 2).unwrap();
        assert_eq!(up2.features().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn nn_upsample_rejects_factor_mismatch() {
        let coarse: SparseTensor<f64> = SparseTensor::new(3, &[4, 4, 4], 1, 1).unwrap();
        let fine: SparseTensor<f64> = SparseTensor::new(3, &[12, 12, 12], 1, 1).unwrap();
        assert!(nn_upsample(&coarse, &fine, 2).is_err());
    }

    #[test]
    fn shape_context_single_site() {
        let mut t: SparseTensor<f64> = SparseTensor::new(3, &[16, 16, 16], 1, 1).unwrap();
        t.set_site(Coordinate::new(0, &[5, 5, 5]), &[2.5]).unwrap();
        let f = shape_context_features(&t).unwrap();
        assert_eq!(f.planes(), 135);
        assert_eq!(f.active_count(), 1);
        let row = f.features().row(0);
        // scale-1 block: center slot (offset 13 of 27) holds the intensity
        assert_eq!(row[13], 2.5);
        assert_eq!(row[..27].iter().filter(|&&v| v != 0.0).count(), 1);
        // pooled scales hold the averaged intensity at their center slots
        assert!((row[27 + 13] - 2.5 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn shape_context_rejects_bad_input() {
        let t: SparseTensor<f64> = SparseTensor::new(3, &[12, 12, 12], 1, 1).unwrap();
        assert!(shape_context_features(&t).is_err()); // extent not /16
        let t2: SparseTensor<f64> = SparseTensor::new(3, &[16, 16, 16], 1, 2).unwrap();
        assert!(shape_context_features(&t2).is_err()); // two planes
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(Arch::C3);
        s.filters0 = 12;
        assert!(s.validate().is_err());
        let mut s = spec(Arch::UNet);
        s.levels = 0;
        assert!(s.validate().is_err());
        assert!(spec(Arch::ShapeContext).validate().is_ok());
    }
}
