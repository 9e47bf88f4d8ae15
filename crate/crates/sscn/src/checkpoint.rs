//! Checkpoint format.
//!
//! Layout: magic + version line, text header (network spec, seed, epoch,
//! one line per tensor/buffer with name and shape), an `end` line, then
//! little-endian 32-bit float payloads in header order. The format is
//! byte-exact: saving the same state twice produces identical files.

use std::path::Path;

use crate::network::{Arch, Network, NetworkSpec, ParamRef};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::train::OptimizerState;
use crate::{Error, Result};

const MAGIC: &str = "SSCNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub seed: u64,
    /// Epochs already completed; training resumes here.
    pub epoch: usize,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub buffers: Vec<(String, Vec<f32>)>,
    /// Optimizer velocity buffers in parameter-visit order.
    pub velocities: Option<Vec<Vec<f32>>>,
}

fn spec_line(spec: &NetworkSpec) -> String {
    format!(
        "spec arch={} dims={} in_planes={} filters0={} levels={} block_reps={} residual={} n_classes={} mlp_hidden={}",
        spec.arch.name(),
        spec.dims,
        spec.in_planes,
        spec.filters0,
        spec.levels,
        spec.block_reps,
        spec.residual,
        spec.n_classes,
        spec.mlp_hidden
    )
}

fn parse_spec_line(rest: &str) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec {
        arch: Arch::C3,
        dims: 3,
        in_planes: 1,
        filters0: 8,
        levels: 1,
        block_reps: 1,
        residual: false,
        n_classes: 2,
        mlp_hidden: 32,
    };
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad spec token {tok:?}")))?;
        let num = || -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("bad spec value {tok:?}")))
        };
        match k {
            "arch" => spec.arch = Arch::parse(v)?,
            "dims" => spec.dims = num()?,
            "in_planes" => spec.in_planes = num()?,
            "filters0" => spec.filters0 = num()?,
            "levels" => spec.levels = num()?,
            "block_reps" => spec.block_reps = num()?,
            "residual" => spec.residual = v == "true",
            "n_classes" => spec.n_classes = num()?,
            "mlp_hidden" => spec.mlp_hidden = num()?,
            _ => return Err(Error::Checkpoint(format!("unknown spec key {k:?}"))),
        }
    }
    Ok(spec)
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(
        net: &mut Network<T>,
        opt: Option<&OptimizerState<T>>,
        seed: u64,
        epoch: usize,
    ) -> Self {
        let mut tensors = Vec::new();
        net.for_each_param(&mut |p: ParamRef<'_, T>| {
            tensors.push((
                p.name.clone(),
                p.shape.clone(),
                p.value.iter().map(|v| v.as_f32()).collect(),
            ));
        });
        let mut buffers = Vec::new();
        net.for_each_buffer(&mut |name: &str, values: &mut [T]| {
            buffers.push((name.to_string(), values.iter().map(|v| v.as_f32()).collect()));
        });
        let velocities = opt.map(|o| {
            o.velocities()
                .iter()
                .map(|v| v.iter().map(|x| x.as_f32()).collect())
                .collect()
        });
        Checkpoint {
            spec: net.spec.clone(),
            seed,
            epoch,
            tensors,
            buffers,
            velocities,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        header.push_str(&spec_line(&self.spec));
        header.push('\n');
        header.push_str(&format!("seed {}\n", self.seed));
        header.push_str(&format!("epoch {}\n", self.epoch));
        for (name, shape, _) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        for (name, values) in &self.buffers {
            header.push_str(&format!("buffer {name} {}\n", values.len()));
        }
        if let Some(vels) = &self.velocities {
            for (i, v) in vels.iter().enumerate() {
                header.push_str(&format!("velocity {i} {}\n", v.len()));
            }
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        let payloads = self
            .tensors
            .iter()
            .map(|(_, _, v)| v)
            .chain(self.buffers.iter().map(|(_, v)| v))
            .chain(self.velocities.iter().flatten());
        for values in payloads {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // header is ASCII up to and including the "end" line
        let end_marker = b"\nend\n";
        let end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| Error::Checkpoint("missing end-of-header marker".into()))?;
        let header = std::str::from_utf8(&bytes[..end])
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let mut payload = &bytes[end + end_marker.len()..];
        let mut lines = header.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("empty file".into()))?;
        let mut ft = first.split_whitespace();
        if ft.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version: u32 = ft
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut spec = None;
        let mut seed = 0u64;
        let mut epoch = 0usize;
        let mut tensor_decls: Vec<(String, Vec<usize>)> = Vec::new();
        let mut buffer_decls: Vec<(String, usize)> = Vec::new();
        let mut velocity_decls: Vec<usize> = Vec::new();
        for line in lines {
            let mut toks = line.split_whitespace();
            match toks.next() {
                Some("spec") => {
                    spec = Some(parse_spec_line(line.strip_prefix("spec ").unwrap_or(""))?)
                }
                Some("seed") => {
                    seed = toks
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("bad seed".into()))?
                }
                Some("epoch") => {
                    epoch = toks
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("bad epoch".into()))?
                }
                Some("tensor") => {
                    let name = toks
                        .next()
                        .ok_or_else(|| Error::Checkpoint("tensor needs a name".into()))?;
                    let shape: Vec<usize> = toks
                        .map(|t| {
                            t.parse()
                                .map_err(|_| Error::Checkpoint(format!("bad dim {t:?}")))
                        })
                        .collect::<Result<_>>()?;
                    if shape.is_empty() || shape.iter().product::<usize>() == 0 {
                        return Err(Error::Checkpoint(format!("tensor {name} has empty shape")));
                    }
                    tensor_decls.push((name.to_string(), shape));
                }
                Some("buffer") => {
                    let name = toks
                        .next()
                        .ok_or_else(|| Error::Checkpoint("buffer needs a name".into()))?;
                    let len: usize = toks
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("bad buffer length".into()))?;
                    buffer_decls.push((name.to_string(), len));
                }
                Some("velocity") => {
                    let _idx = toks.next();
                    let len: usize = toks
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("bad velocity length".into()))?;
                    velocity_decls.push(len);
                }
                Some(other) => {
                    return Err(Error::Checkpoint(format!("unknown header record {other:?}")))
                }
                None => {}
            }
        }
        let spec = spec.ok_or_else(|| Error::Checkpoint("missing spec line".into()))?;
        let mut take = |len: usize| -> Result<Vec<f32>> {
            let need = len * 4;
            if payload.len() < need {
                return Err(Error::Checkpoint("payload truncated".into()));
            }
            let (head, rest) = payload.split_at(need);
            payload = rest;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut tensors = Vec::new();
        for (name, shape) in tensor_decls {
            let len = shape.iter().product();
            let values = take(len)?;
            tensors.push((name, shape, values));
        }
        let mut buffers = Vec::new();
        for (name, len) in buffer_decls {
            buffers.push((name, take(len)?));
        }
        let velocities = if velocity_decls.is_empty() {
            None
        } else {
            Some(
                velocity_decls
                    .into_iter()
                    .map(&mut take)
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            spec,
            seed,
            epoch,
            tensors,
            buffers,
            velocities,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::Io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(Error::Io)?)
    }

    /// Rebuilds the network and overwrites its parameters and buffers.
    /// Returns the restored optimizer velocities, if present.
    pub fn restore<T: Scalar>(&self) -> Result<(Network<T>, Option<Vec<Vec<T>>>)> {
        let mut net: Network<T> = Network::build(&self.spec, &SeedTree::new(self.seed))?;
        let mut idx = 0usize;
        let mut mismatch: Option<String> = None;
        net.for_each_param(&mut |p: ParamRef<'_, T>| {
            if mismatch.is_some() {
                return;
            }
            match self.tensors.get(idx) {
                Some((name, shape, values))
                    if *name == p.name && *shape == p.shape && values.len() == p.value.len() =>
                {
                    for (dst, &src) in p.value.iter_mut().zip(values) {
                        *dst = T::from_f32(src);
                    }
                }
                other => {
                    mismatch = Some(format!(
                        "parameter {} does not match header entry {:?}",
                        p.name,
                        other.map(|(n, s, _)| (n.clone(), s.clone()))
                    ))
                }
            }
            idx += 1;
        });
        if let Some(m) = mismatch {
            return Err(Error::Checkpoint(m));
        }
        if idx != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, network has {idx}",
                self.tensors.len()
            )));
        }
        let mut bidx = 0usize;
        let mut bmismatch: Option<String> = None;
        let buffers = &self.buffers;
        net.for_each_buffer(&mut |name: &str, values: &mut [T]| {
            if bmismatch.is_some() {
                return;
            }
            match buffers.get(bidx) {
                Some((bname, bvalues)) if bname == name && bvalues.len() == values.len() => {
                    for (dst, &src) in values.iter_mut().zip(bvalues) {
                        *dst = T::from_f32(src);
                    }
                }
                _ => bmismatch = Some(format!("buffer {name} missing or mismatched")),
            }
            bidx += 1;
        });
        if let Some(m) = bmismatch {
            return Err(Error::Checkpoint(m));
        }
        let velocities = self.velocities.as_ref().map(|vels| {
            vels.iter()
                .map(|v| v.iter().map(|&x| T::from_f32(x)).collect())
                .collect()
        });
        Ok((net, velocities))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::BnMode;
    use crate::tensor::{Coordinate, SparseTensor};

    fn spec() -> NetworkSpec {
        NetworkSpec {
            arch: Arch::UNet,
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

    fn input() -> SparseTensor<f32> {
        let mut t = SparseTensor::new(3, &[16, 16, 16], 1, 1).unwrap();
        t.set_site(Coordinate::new(0, &[3, 3, 3]), &[1.0]).unwrap();
        t.set_site(Coordinate::new(0, &[9, 2, 14]), &[0.5]).unwrap();
        t
    }

    #[test]
    fn round_trip_is_byte_identical_and_forward_exact() {
        let mut net: Network<f32> = Network::build(&spec(), &SeedTree::new(5)).unwrap();
        // run one train-mode forward so BN buffers are non-trivial
        net.forward(&input(), BnMode::Train).unwrap();
        let ck = Checkpoint::from_network(&mut net, None, 5, 3);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 3);
        // restored network reproduces the forward pass bitwise
        let (mut restored, vels) = back.restore::<f32>().unwrap();
        assert!(vels.is_none());
        let a = net.forward(&input(), BnMode::Eval).unwrap();
        let b = restored.forward(&input(), BnMode::Eval).unwrap();
        let same = a
            .features()
            .data()
            .iter()
            .zip(b.features().data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn optimizer_velocities_round_trip() {
        let mut net: Network<f32> = Network::build(&spec(), &SeedTree::new(6)).unwrap();
        let mut opt = crate::train::OptimizerState::<f32>::new(0.1, 0.9, true, 1e-4);
        let logits = net.forward(&input(), BnMode::Train).unwrap();
        let (_, grad) =
            crate::ops::masked_softmax_nll(logits.features(), &[0, 1], None).unwrap();
        net.backward(&grad).unwrap();
        opt.step(&mut net).unwrap();
        let ck = Checkpoint::from_network(&mut net, Some(&opt), 6, 1);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (_, vels) = back.restore::<f32>().unwrap();
        let vels = vels.unwrap();
        assert_eq!(vels.len(), opt.velocities().len());
        assert_eq!(vels[0], opt.velocities()[0]);
    }

    #[test]
    fn rejects_corruption() {
        let mut net: Network<f32> = Network::build(&spec(), &SeedTree::new(7)).unwrap();
        let ck = Checkpoint::from_network(&mut net, None, 7, 0);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
