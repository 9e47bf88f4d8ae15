//! SGD training loop, IoU/accuracy evaluation, and multi-view testing.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{
    augment, merge_batch, normalize_to_sphere, project_predictions, split_by_hash, voxelize,
    AugmentMode, CategoryManifest, PointCloud, Split, VoxelSample,
};
use crate::matrix::Matrix;
use crate::network::{Network, ParamRef};
use crate::ops::{self, BnMode};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Nesterov momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        assert!(lr > 0.0, "lr must be positive");
        OptimizerState {
            lr,
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// One update over every parameter of the network. Aborts on any
    /// non-finite gradient.
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        let mut idx = 0;
        let mut bad: Option<String> = None;
        net.for_each_param(&mut |p: ParamRef<'_, T>| {
            if velocity.len() == idx {
                velocity.push(vec![T::zero(); p.value.len()]);
            }
            let v = &mut velocity[idx];
            assert_eq!(v.len(), p.value.len(), "parameter set changed mid-training");
            idx += 1;
            if bad.is_some() {
                return;
            }
            for ((theta, &grad), vel) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                if !grad.is_finite() {
                    bad = Some(p.name.clone());
                    return;
                }
                let mut g = grad;
                if p.decay {
                    g += wd * *theta;
                }
                *vel = mu * *vel + g;
                let update = if nesterov { g + mu * *vel } else { *vel };
                *theta -= lr * update;
            }
        });
        match bad {
            Some(name) => Err(Error::Training(format!("non-finite gradient in {name}"))),
            None => Ok(()),
        }
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, v: Vec<Vec<T>>) {
        self.velocity = v;
    }
}

/// Learning rate after `epoch` completed epochs: lr0 * e^(-0.04 * epoch).
pub fn lr_at(lr0: f64, epoch: usize) -> f64 {
    lr0 * (-0.04 * epoch as f64).exp()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub s: f64,
    /// Grid extent multiplier over S (sparse pipelines use 4, dense
    /// comparisons 1).
    pub grid_multiplier: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub augment: AugmentMode,
    pub affine_eps: f64,
    /// Multi-view test count K.
    pub views: usize,
    pub mask: bool,
    /// Worker threads for per-sample voxelization (RNG streams are
    /// per-sample, so the result is independent of the thread count).
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            s: 16.0,
            grid_multiplier: 4,
            epochs: 30,
            batch_size: 16,
            lr0: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            augment: AugmentMode::None,
            affine_eps: 0.1,
            views: 1,
            mask: false,
            threads: 1,
        }
    }
}

impl TrainOptions {
    pub fn grid_size(&self) -> usize {
        self.s as usize * self.grid_multiplier
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_iou: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn render(&self) -> String {
        format!(
            "{}, {:.6}, {:.6}, {:.4}, {:.4}, {:.2}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_iou, self.seconds
        )
    }
}

/// Splits a labeled dataset by identifier hash.
pub fn hash_split<'a>(
    samples: &'a [(String, PointCloud)],
) -> (Vec<&'a (String, PointCloud)>, Vec<&'a (String, PointCloud)>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in samples {
        match split_by_hash(&s.0) {
            Split::Train => train.push(s),
            Split::Validation => val.push(s),
        }
    }
    (train, val)
}

fn prepare_sample<T: Scalar>(
    pc: &PointCloud,
    opts: &TrainOptions,
    mode: AugmentMode,
    seeds: &SeedTree,
    label: &str,
    counters: &[u64],
) -> Result<VoxelSample<T>> {
    let mut rng = seeds.stream(label, counters);
    let augmented = augment(pc, mode, opts.affine_eps, &mut rng)?;
    let normalized = normalize_to_sphere(&augmented, opts.s)?;
    voxelize(&normalized, opts.s, opts.grid_size(), &mut rng)
}

/// Trains in place; returns one record per epoch. `on_epoch` sees each
/// record as it is produced (the CLI streams them to the log).
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    samples: &[(String, PointCloud)],
    manifest: &CategoryManifest,
    opts: &TrainOptions,
    seeds: &SeedTree,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let (train_set, val_set) = hash_split(samples);
    if train_set.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let mut opt = OptimizerState::new(opts.lr0, opts.momentum, opts.nesterov, opts.weight_decay);
    let mut records = Vec::new();
    for epoch in 0..opts.epochs {
        let start = Instant::now();
        opt.lr = lr_at(opts.lr0, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeds.stream("shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut site_count = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let prepare = |&i: &usize| {
                prepare_sample(
                    &train_set[i].1,
                    opts,
                    opts.augment,
                    seeds,
                    "augment",
                    &[epoch as u64, i as u64],
                )
            };
            let batch: Vec<VoxelSample<T>> = if opts.threads > 1 {
                // per-sample RNG streams make this order-independent
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .chunks(chunk.len().div_ceil(opts.threads))
                        .map(|part| scope.spawn(move || part.iter().map(prepare).collect::<Vec<_>>()))
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("voxelizer thread panicked"))
                        .collect::<Result<_>>()
                })?
            } else {
                chunk.iter().map(prepare).collect::<Result<_>>()?
            };
            let refs: Vec<&VoxelSample<T>> = batch.iter().collect();
            let (merged, labels) = merge_batch(&refs)?;
            let logits = net.forward(&merged, BnMode::Train)?;
            let (loss, grad) = ops::masked_softmax_nll(logits.features(), &labels, None)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            let a = labels.len();
            loss_sum += loss * a as f64;
            site_count += a;
            for (r, &l) in labels.iter().enumerate() {
                let row = logits.features().row(r);
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == l {
                    correct += 1;
                }
            }
            net.zero_grads();
            net.backward(&grad)?;
            opt.step(net)?;
            net.zero_grads();
        }
        let val_iou = if val_set.is_empty() {
            f64::NAN
        } else {
            let report = evaluate_multiview(
                net,
                &val_set,
                manifest,
                opts,
                1,
                opts.mask,
                seeds,
                &category_frequencies(&train_set),
                epoch as u64,
            )?;
            report.weighted_iou
        };
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / site_count as f64,
            train_acc: correct as f64 / site_count as f64,
            val_iou,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}

/// Fraction of training examples per category (the IoU weighting of §6.1's
/// benchmark convention).
pub fn category_frequencies(train_set: &[&(String, PointCloud)]) -> HashMap<usize, f64> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for (_, pc) in train_set {
        *counts.entry(pc.category.unwrap_or(0)).or_insert(0.0) += 1.0;
    }
    let total: f64 = counts.values().sum();
    counts.values_mut().for_each(|v| *v /= total);
    counts
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_category_iou: HashMap<usize, f64>,
    /// Training-frequency-weighted mean of per-category IoUs.
    pub weighted_iou: f64,
    pub per_class_iou: HashMap<usize, f64>,
    pub pixel_accuracy: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut cats: Vec<_> = self.per_category_iou.iter().collect();
        cats.sort_by_key(|(c, _)| **c);
        for (c, iou) in cats {
            out.push_str(&format!("category {c}: iou {iou:.4}\n"));
        }
        let mut classes: Vec<_> = self.per_class_iou.iter().collect();
        classes.sort_by_key(|(c, _)| **c);
        for (c, iou) in classes {
            out.push_str(&format!("class {c}: iou {iou:.4}\n"));
        }
        out.push_str(&format!(
            "weighted iou: {:.4}\npoint accuracy: {:.4}\n",
            self.weighted_iou, self.pixel_accuracy
        ));
        out
    }
}

/// Per-part intersection-over-union for one example. Parts absent from
/// both prediction and ground truth score 1.
pub fn iou_per_part(preds: &[usize], labels: &[usize], parts: &[usize]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch("preds/labels length".into()));
    }
    if preds.is_empty() {
        return Err(Error::Data("empty example".into()));
    }
    Ok(parts
        .iter()
        .map(|&part| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &l) in preds.iter().zip(labels) {
                let in_p = p == part;
                let in_l = l == part;
                if in_p && in_l {
                    inter += 1;
                }
                if in_p || in_l {
                    union += 1;
                }
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect())
}

/// Multi-view evaluation: K independently voxelized views per sample,
/// per-point probability averaging, optional category masking, then IoU
/// per part per category per example.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_multiview<T: Scalar>(
    net: &mut Network<T>,
    samples: &[&(String, PointCloud)],
    manifest: &CategoryManifest,
    opts: &TrainOptions,
    k: usize,
    mask: bool,
    seeds: &SeedTree,
    category_freq: &HashMap<usize, f64>,
    eval_tag: u64,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::InvalidSpec("need at least one view".into()));
    }
    let mut per_category: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut class_scores: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (si, (id, pc)) in samples.iter().enumerate() {
        let labels = pc
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {id} has no labels")))?;
        let category = pc.category.unwrap_or(0);
        let class_mask = if mask {
            Some(manifest.mask(category, net.spec.n_classes)?)
        } else {
            None
        };
        let mut avg = Matrix::<T>::zeros(pc.len(), net.spec.n_classes);
        for view in 0..k {
            let sample: VoxelSample<T> = prepare_sample(
                pc,
                opts,
                opts.augment,
                seeds,
                "eval-view",
                &[eval_tag, si as u64, view as u64],
            )?;
            let logits = net.forward(&sample.tensor, BnMode::Eval)?;
            let probs = ops::softmax_probs(logits.features(), class_mask.as_deref());
            let projected = project_predictions(&sample.point_to_voxel, &probs);
            crate::matrix::axpy(&mut avg, &projected, T::one() / T::from_f64(k as f64));
        }
        let preds: Vec<usize> = (0..pc.len())
            .map(|r| {
                avg.row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect();
        for (&p, &l) in preds.iter().zip(labels) {
            if p == l {
                correct += 1;
            }
            total += 1;
        }
        let parts = manifest
            .category_parts
            .get(&category)
            .cloned()
            .unwrap_or_else(|| (0..net.spec.n_classes).collect());
        let ious = iou_per_part(&preds, labels, &parts)?;
        per_category
            .entry(category)
            .or_default()
            .extend(ious.iter().copied());
        for (&part, &iou) in parts.iter().zip(&ious) {
            class_scores.entry(part).or_default().push(iou);
        }
    }
    let per_category_iou: HashMap<usize, f64> = per_category
        .iter()
        .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let weighted_iou = per_category_iou
        .iter()
        .map(|(c, iou)| category_freq.get(c).copied().unwrap_or(0.0) * iou)
        .sum();
    let per_class_iou = class_scores
        .iter()
        .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(EvalReport {
        per_category_iou,
        weighted_iou,
        per_class_iou,
        pixel_accuracy: correct as f64 / total as f64,
    })
}
