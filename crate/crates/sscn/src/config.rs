//! Run configuration: plain-text `[section]` / `key=value` format.
//!
//! Every key has a default; unknown sections or keys are rejected so typos
//! fail loudly. `--set section.key=value` overrides parsed files.

use std::path::Path;

use crate::data::AugmentMode;
use crate::network::{Arch, NetworkSpec};
use crate::train::TrainOptions;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [network]
    pub arch: Arch,
    pub dims: usize,
    pub in_planes: usize,
    pub filters0: usize,
    pub levels: usize,
    pub block_reps: usize,
    pub residual: bool,
    pub n_classes: usize,
    pub mlp_hidden: usize,
    // [data]
    pub s: f64,
    pub grid_multiplier: usize,
    pub augment: AugmentMode,
    pub affine_eps: f64,
    pub dataset: String,
    pub synthetic_count: usize,
    pub points_dir: String,
    pub manifest: String,
    // [train]
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub precision: Precision,
    // [eval]
    pub views: usize,
    pub mask: bool,
    // [run]
    pub seed: u64,
    pub out_dir: String,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::UNet,
            dims: 3,
            in_planes: 1,
            filters0: 8,
            levels: 3,
            block_reps: 1,
            residual: false,
            n_classes: 3,
            mlp_hidden: 32,
            s: 16.0,
            grid_multiplier: 4,
            augment: AugmentMode::None,
            affine_eps: 0.1,
            dataset: "synthetic".into(),
            synthetic_count: 400,
            points_dir: String::new(),
            manifest: String::new(),
            epochs: 30,
            batch_size: 16,
            lr0: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            precision: Precision::F64,
            views: 1,
            mask: false,
            seed: 1,
            out_dir: "out".into(),
            checkpoint_every: 10,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad {what}: {v:?}")))
}

impl RunConfig {
    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "network.arch" => self.arch = Arch::parse(v)?,
            "network.dims" => self.dims = parse_num(v, key)?,
            "network.in_planes" => self.in_planes = parse_num(v, key)?,
            "network.filters0" => self.filters0 = parse_num(v, key)?,
            "network.levels" => self.levels = parse_num(v, key)?,
            "network.block_reps" => self.block_reps = parse_num(v, key)?,
            "network.residual" => self.residual = parse_bool(v)?,
            "network.n_classes" => self.n_classes = parse_num(v, key)?,
            "network.mlp_hidden" => self.mlp_hidden = parse_num(v, key)?,
            "data.s" => self.s = parse_num(v, key)?,
            "data.grid_multiplier" => self.grid_multiplier = parse_num(v, key)?,
            "data.augment" => self.augment = AugmentMode::parse(v)?,
            "data.affine_eps" => self.affine_eps = parse_num(v, key)?,
            "data.dataset" => {
                if v != "synthetic" && v != "files" {
                    return Err(Error::Config(format!("dataset must be synthetic or files, got {v:?}")));
                }
                self.dataset = v.to_string();
            }
            "data.synthetic_count" => self.synthetic_count = parse_num(v, key)?,
            "data.points_dir" => self.points_dir = v.to_string(),
            "data.manifest" => self.manifest = v.to_string(),
            "train.epochs" => self.epochs = parse_num(v, key)?,
            "train.batch_size" => self.batch_size = parse_num(v, key)?,
            "train.lr0" => self.lr0 = parse_num(v, key)?,
            "train.momentum" => self.momentum = parse_num(v, key)?,
            "train.nesterov" => self.nesterov = parse_bool(v)?,
            "train.weight_decay" => self.weight_decay = parse_num(v, key)?,
            "train.precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "eval.views" => self.views = parse_num(v, key)?,
            "eval.mask" => self.mask = parse_bool(v)?,
            "run.seed" => self.seed = parse_num(v, key)?,
            "run.out_dir" => self.out_dir = v.to_string(),
            "run.checkpoint_every" => self.checkpoint_every = parse_num(v, key)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                if !["network", "data", "train", "eval", "run"].contains(&name) {
                    return Err(err(format!("unknown section {name:?}")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            if section.is_empty() {
                return Err(err("assignment before any [section]".into()));
            }
            cfg.set(&format!("{section}.{}", key.trim()), value)
                .map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::Io)?;
        Self::parse(&text, path)
    }

    /// Canonical serialization; parse(render(c)) == c.
    pub fn render(&self) -> String {
        let aug = match self.augment {
            AugmentMode::None => "none",
            AugmentMode::Rotation => "rotation",
            AugmentMode::Affine => "affine",
        };
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        format!(
            "[network]\narch = {}\ndims = {}\nin_planes = {}\nfilters0 = {}\nlevels = {}\n\
             block_reps = {}\nresidual = {}\nn_classes = {}\nmlp_hidden = {}\n\n\
             [data]\ns = {}\ngrid_multiplier = {}\naugment = {}\naffine_eps = {}\n\
             dataset = {}\nsynthetic_count = {}\npoints_dir = {}\nmanifest = {}\n\n\
             [train]\nepochs = {}\nbatch_size = {}\nlr0 = {}\nmomentum = {}\nnesterov = {}\n\
             weight_decay = {}\nprecision = {}\n\n\
             [eval]\nviews = {}\nmask = {}\n\n\
             [run]\nseed = {}\nout_dir = {}\ncheckpoint_every = {}\n",
            self.arch.name(),
            self.dims,
            self.in_planes,
            self.filters0,
            self.levels,
            self.block_reps,
            self.residual,
            self.n_classes,
            self.mlp_hidden,
            self.s,
            self.grid_multiplier,
            aug,
            self.affine_eps,
            self.dataset,
            self.synthetic_count,
            self.points_dir,
            self.manifest,
            self.epochs,
            self.batch_size,
            self.lr0,
            self.momentum,
            self.nesterov,
            self.weight_decay,
            precision,
            self.views,
            self.mask,
            self.seed,
            self.out_dir,
            self.checkpoint_every,
        )
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            arch: self.arch,
            dims: self.dims,
            in_planes: self.in_planes,
            filters0: self.filters0,
            levels: self.levels,
            block_reps: self.block_reps,
            residual: self.residual,
            n_classes: self.n_classes,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            s: self.s,
            grid_multiplier: self.grid_multiplier,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            augment: self.augment,
            affine_eps: self.affine_eps,
            views: self.views,
            mask: self.mask,
            threads: 1, // overridden by the CLI from SSCN_THREADS
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.render(), Path::new("t")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn modified_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("network.arch", "fcn").unwrap();
        cfg.set("train.lr0", "0.05").unwrap();
        cfg.set("eval.views", "3").unwrap();
        cfg.set("data.augment", "rotation").unwrap();
        let back = RunConfig::parse(&cfg.render(), Path::new("t")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.arch, Arch::Fcn);
        assert_eq!(back.lr0, 0.05);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::parse("[network]\nwidth = 3\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("[widgets]\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("arch = c3\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("[network]\narch\n", Path::new("t")).is_err());
        assert!(RunConfig::parse("[train]\nlr0 = fast\n", Path::new("t")).is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.turbo", "on").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# top comment\n[train]\n\nepochs = 5 # inline\n";
        let cfg = RunConfig::parse(text, Path::new("t")).unwrap();
        assert_eq!(cfg.epochs, 5);
    }
}
