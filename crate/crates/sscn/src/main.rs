use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sscn::checkpoint::Checkpoint;
use sscn::config::{Precision, RunConfig};
use sscn::data::{load_point_cloud, normalize_to_sphere, voxelize, CategoryManifest, PointCloud, VoxelSample};
use sscn::network::Network;
use sscn::ops::BnMode;
use sscn::rng::SeedTree;
use sscn::train::{self, category_frequencies, hash_split, TrainOptions};
use sscn::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "sscn", about = "Sparse voxel segmentation networks", version)]
struct Cli {
    /// Configuration file ([section] / key = value format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.lr0=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Voxelize one point cloud and write the sample as text.
    Voxelize {
        /// Points file (one point per line; # comments).
        input: PathBuf,
        /// Output path for the voxelized sample.
        output: PathBuf,
        /// Aligned labels file.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train a network; writes a log and checkpoints under run.out_dir.
    Train,
    /// Evaluate a checkpoint on the validation split.
    Eval {
        /// Checkpoint produced by `sscn train`.
        checkpoint: PathBuf,
    },
    /// Report the per-layer cost model for one forward pass.
    Bench {
        /// Emit comma-separated values instead of the aligned table.
        #[arg(long)]
        csv: bool,
        /// Count 2x raw FLOPs instead of multiply-adds.
        #[arg(long)]
        raw_flops: bool,
    },
    /// Run the self-check property suite.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn thread_count() -> usize {
    std::env::var("SSCN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<(String, PointCloud)>, CategoryManifest)> {
    match cfg.dataset.as_str() {
        "synthetic" => Ok(sscn::synthetic::generate_dataset(
            &SeedTree::new(cfg.seed),
            cfg.synthetic_count,
        )),
        "files" => {
            if cfg.points_dir.is_empty() || cfg.manifest.is_empty() {
                return Err(Error::Config(
                    "data.points_dir and data.manifest are required for dataset = files".into(),
                ));
            }
            let manifest = CategoryManifest::load(Path::new(&cfg.manifest))?;
            let dir = Path::new(&cfg.points_dir);
            let mut samples = Vec::new();
            let mut ids: Vec<String> = manifest.sample_category.keys().cloned().collect();
            ids.sort();
            for id in ids {
                let points = dir.join(format!("{id}.pts"));
                let labels = dir.join(format!("{id}.labels"));
                let mut pc = load_point_cloud(
                    &points,
                    labels.exists().then_some(labels.as_path()),
                    cfg.dims,
                )?;
                pc.category = manifest.sample_category.get(&id).copied();
                samples.push((id, pc));
            }
            Ok((samples, manifest))
        }
        other => Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
}

fn cmd_voxelize(cfg: &RunConfig, input: &Path, labels: Option<&Path>, output: &Path) -> Result<()> {
    let pc = load_point_cloud(input, labels, cfg.dims)?;
    let normalized = normalize_to_sphere(&pc, cfg.s)?;
    let grid = cfg.s as usize * cfg.grid_multiplier;
    let mut rng = SeedTree::new(cfg.seed).stream("voxelize-cli", &[]);
    let sample: VoxelSample<f64> = voxelize(&normalized, cfg.s, grid, &mut rng)?;
    let mut out = String::new();
    out.push_str(&format!(
        "# voxel sample: dims {} grid {} planes {}\n",
        sample.tensor.dims(),
        grid,
        sample.tensor.planes()
    ));
    for (row, c) in sample.tensor.coords().iter().enumerate() {
        let coords: Vec<String> = c
            .spatial(sample.tensor.dims())
            .iter()
            .map(i32::to_string)
            .collect();
        let feats: Vec<String> = sample
            .tensor
            .features()
            .row(row)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        let label = sample
            .voxel_labels
            .get(row)
            .map(|l| format!(" {l}"))
            .unwrap_or_default();
        out.push_str(&format!("voxel {} {}{label}\n", coords.join(" "), feats.join(" ")));
    }
    for (i, row) in sample.point_to_voxel.iter().enumerate() {
        match row {
            Some(r) => out.push_str(&format!("point {i} {r}\n")),
            None => out.push_str(&format!("point {i} outside\n")),
        }
    }
    std::fs::write(output, out).map_err(Error::Io)?;
    println!(
        "{} points -> {} active voxels ({}^{} grid)",
        pc.len(),
        sample.tensor.active_count(),
        grid,
        sample.tensor.dims()
    );
    Ok(())
}

fn run_train<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let (samples, manifest) = load_dataset(cfg)?;
    let seeds = SeedTree::new(cfg.seed);
    let mut net: Network<T> = Network::build(&cfg.network_spec(), &seeds)?;
    let mut opts = cfg.train_options();
    opts.threads = thread_count();
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    std::fs::write(out_dir.join("config.txt"), cfg.render()).map_err(Error::Io)?;
    let mut log = String::from("epoch, lr, train_loss, train_acc, val_iou, seconds\n");
    let records = train::train(&mut net, &samples, &manifest, &opts, &seeds, |r| {
        let line = r.render();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    std::fs::write(out_dir.join("train.log"), &log).map_err(Error::Io)?;
    let ck = Checkpoint::from_network(&mut net, None, cfg.seed, records.len());
    let path = out_dir.join("checkpoint.bin");
    ck.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn run_eval<T: Scalar>(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let (samples, manifest) = load_dataset(cfg)?;
    let (mut net, _) = ck.restore::<T>()?;
    let mut opts = cfg.train_options();
    opts.threads = thread_count();
    let seeds = SeedTree::new(cfg.seed);
    let (train_set, val_set) = hash_split(&samples);
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let freq = category_frequencies(&train_set);
    let report = train::evaluate_multiview(
        &mut net,
        &val_set,
        &manifest,
        &opts,
        cfg.views,
        cfg.mask,
        &seeds,
        &freq,
        u64::MAX, // eval tag outside the training epoch range
    )?;
    print!("{}", report.render());
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    std::fs::write(out_dir.join("eval.txt"), report.render()).map_err(Error::Io)?;
    Ok(())
}

fn run_bench<T: Scalar>(cfg: &RunConfig, csv: bool, raw_flops: bool) -> Result<()> {
    let (samples, _) = load_dataset(cfg)?;
    let seeds = SeedTree::new(cfg.seed);
    let mut net: Network<T> = Network::build(&cfg.network_spec(), &seeds)?;
    let opts: TrainOptions = cfg.train_options();
    let mut rng = seeds.stream("bench", &[]);
    let normalized = normalize_to_sphere(&samples[0].1, cfg.s)?;
    let sample: VoxelSample<T> = voxelize(&normalized, cfg.s, opts.grid_size(), &mut rng)?;
    net.track_cost = true;
    net.forward(&sample.tensor, BnMode::Eval)?;
    let report = net.last_cost.take().expect("cost tracking enabled");
    if csv {
        print!("{}", report.render_csv(raw_flops));
    } else {
        print!("{}", report.render_table(raw_flops));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Voxelize { input, output, labels } => {
            cmd_voxelize(&cfg, input, labels.as_deref(), output)?
        }
        Cmd::Train => match cfg.precision {
            Precision::F32 => run_train::<f32>(&cfg)?,
            Precision::F64 => run_train::<f64>(&cfg)?,
        },
        Cmd::Eval { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            match cfg.precision {
                Precision::F32 => run_eval::<f32>(&cfg, &ck)?,
                Precision::F64 => run_eval::<f64>(&cfg, &ck)?,
            }
        }
        Cmd::Bench { csv, raw_flops } => match cfg.precision {
            Precision::F32 => run_bench::<f32>(&cfg, *csv, *raw_flops)?,
            Precision::F64 => run_bench::<f64>(&cfg, *csv, *raw_flops)?,
        },
        Cmd::Verify { seed } => {
            let outcomes = sscn::verify::run_all(*seed);
            let ok = sscn::verify::render(&outcomes, &mut std::io::stdout())?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
