use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use xmorpher::architecture::{forward_nodes, predict, ArchConfig, ModelParams, Stage};
use xmorpher::attention::AttentionDump;
use xmorpher::registration::{
    dsc, fit, jacobian_nonpositive_fraction, synth_pair, warp_labels, warp_volume, window_sweep, LossRow, SweepRow,
    SynthConfig,
};
use xmorpher::volume::Volume;
use xmorpher::{Graph32, Tensor};

use crate::config::RunConfig;
use crate::formats::{encode_pgm, read_dvf, read_labels, read_volume, write_bytes, AttentionWindow, Checkpoint, VolumeFile};

#[derive(Debug, Parser)]
#[command(name = "xmorpher", version, about = "Cross-attention deformable registration of 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageKind {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    /// Moving-stream queries attending to fixed-stream keys.
    Moving,
    /// Fixed-stream queries attending to moving-stream keys.
    Fixed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic pair with label maps and ground-truth field.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Cubic volume extent.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Architecture depth the extent must be compatible with.
        #[arg(long, default_value_t = 2)]
        levels: usize,
    },
    /// Print a complete configuration with default values.
    DefaultConfig,
    /// Train from scratch on pair directories written by `synth`.
    Train {
        #[arg(long, value_delimiter = ',', required = true)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Loss log CSV; printed to stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a displacement field and warp the moving volume.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dvf: PathBuf,
        #[arg(long)]
        out_warped: PathBuf,
        #[arg(long, requires = "out_warped_labels")]
        moving_labels: Option<PathBuf>,
        #[arg(long, requires = "moving_labels")]
        out_warped_labels: Option<PathBuf>,
    },
    /// Mean DSC of two label maps and the folded-voxel percentage of a field.
    Eval {
        #[arg(long)]
        warped_labels: PathBuf,
        #[arg(long)]
        fixed_labels: PathBuf,
        #[arg(long)]
        dvf: Option<PathBuf>,
        /// Labels to score; defaults to every nonzero label present.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<u16>>,
    },
    /// Window-size sweep on a synthetic pair, one CSV row per size.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Base configuration; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        iters: Option<usize>,
        /// Forward passes averaged per timing.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write the attention weights of one CAT block, one file per window,
    /// plus max-intensity projections of the attention each token receives.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pair directory holding moving.xmv and fixed.xmv.
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageKind::Encoder)]
        stage: StageKind,
        #[arg(long, default_value_t = 0)]
        round: usize,
        #[arg(long, value_enum, default_value_t = Direction::Moving)]
        direction: Direction,
    },
}

pub const MOVING: &str = "moving.xmv";
pub const FIXED: &str = "fixed.xmv";
pub const MOVING_LABELS: &str = "moving_labels.xmv";
pub const FIXED_LABELS: &str = "fixed_labels.xmv";
pub const PHI_GT: &str = "phi_gt.xmv";

/// Runs one command and returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth {
            seed,
            size,
            out_dir,
            levels,
        } => synth(*seed, *size, *levels, out_dir),
        Command::DefaultConfig => Ok(RunConfig::default().to_toml()),
        Command::Train {
            pairs,
            config,
            out,
            iters,
            log,
        } => train(pairs, config, out, *iters, log.as_deref()),
        Command::Register {
            moving,
            fixed,
            checkpoint,
            out_dvf,
            out_warped,
            moving_labels,
            out_warped_labels,
        } => register(
            moving,
            fixed,
            checkpoint,
            out_dvf,
            out_warped,
            moving_labels.as_deref().zip(out_warped_labels.as_deref()),
        ),
        Command::Eval {
            warped_labels,
            fixed_labels,
            dvf,
            labels,
        } => eval(warped_labels, fixed_labels, dvf.as_deref(), labels.as_deref()),
        Command::Bench {
            sizes,
            out,
            config,
            seed,
            iters,
            reps,
        } => bench(sizes, out, config.as_deref(), *seed, *iters, *reps),
        Command::DumpAttention {
            checkpoint,
            pair,
            level,
            out,
            stage,
            round,
            direction,
        } => dump_attention(checkpoint, pair, *level, out, *stage, *round, *direction),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(seed: u64, size: usize, levels: usize, out_dir: &Path) -> Result<String> {
    let arch = ArchConfig {
        input: [size; 3],
        levels,
        heads: vec![2; levels],
        ..ArchConfig::default()
    };
    arch.validate().context("size is incompatible with the architecture")?;
    let pair = synth_pair::<f32>(seed, [size; 3], &SynthConfig::default())?;
    create_dir(out_dir)?;
    let dims = [size; 3];
    VolumeFile::scalar(&pair.moving.intensities).write(&out_dir.join(MOVING))?;
    VolumeFile::scalar(&pair.fixed.intensities).write(&out_dir.join(FIXED))?;
    VolumeFile::labels(dims, pair.moving.labels.as_deref().unwrap_or_default()).write(&out_dir.join(MOVING_LABELS))?;
    VolumeFile::labels(dims, pair.fixed.labels.as_deref().unwrap_or_default()).write(&out_dir.join(FIXED_LABELS))?;
    VolumeFile::dvf(&pair.phi_gt).write(&out_dir.join(PHI_GT))?;
    Ok(format!("wrote synthetic pair (seed {seed}, {size}^3) to {}\n", out_dir.display()))
}

fn load_pair(dir: &Path) -> Result<(Volume<f32>, Volume<f32>)> {
    let mut moving = read_volume(&dir.join(MOVING))?;
    let mut fixed = read_volume(&dir.join(FIXED))?;
    ensure!(moving.dims() == fixed.dims(), "{}: moving and fixed extents differ", dir.display());
    for (vol, name) in [(&mut moving, MOVING_LABELS), (&mut fixed, FIXED_LABELS)] {
        let path = dir.join(name);
        if path.exists() {
            let (dims, labels) = read_labels(&path)?;
            ensure!(dims == vol.dims(), "{}: label extents differ from the image", path.display());
            *vol = vol.clone().with_labels(labels)?;
        }
    }
    Ok((moving, fixed))
}

fn train(pairs: &[PathBuf], config: &Path, out: &Path, iters: Option<usize>, log: Option<&Path>) -> Result<String> {
    let cfg = RunConfig::load(config)?;
    let arch = cfg.arch()?;
    let mut train_cfg = cfg.train()?;
    if let Some(n) = iters {
        train_cfg.iterations = n;
    }
    let data = pairs.iter().map(|p| load_pair(p)).collect::<Result<Vec<_>>>()?;
    for (dir, (m, _)) in pairs.iter().zip(&data) {
        ensure!(
            m.dims() == arch.input,
            "{}: volume {:?} does not match configured input {:?}",
            dir.display(),
            m.dims(),
            arch.input
        );
    }
    let mut params = ModelParams::<Tensor<f32>>::init(&arch, train_cfg.seed)?;
    let mut csv = format!("{}\n", LossRow::CSV_HEADER);
    let rows = fit(&mut params, &data, &arch, &train_cfg, |r| {
        let _ = writeln!(csv, "{r}");
    })?;
    Checkpoint { arch, params }.write(out)?;
    let mut stdout = String::new();
    match log {
        Some(path) => write_bytes(path, csv.as_bytes())?,
        None => stdout.push_str(&csv),
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let _ = writeln!(
            stdout,
            "trained {} iterations: loss {} -> {}; checkpoint {}",
            rows.len(),
            first.total,
            last.total,
            out.display()
        );
    } else {
        let _ = writeln!(stdout, "0 iterations; checkpoint {} holds the initialization", out.display());
    }
    Ok(stdout)
}

fn register(
    moving: &Path,
    fixed: &Path,
    checkpoint: &Path,
    out_dvf: &Path,
    out_warped: &Path,
    labels: Option<(&Path, &Path)>,
) -> Result<String> {
    let ck = Checkpoint::read(checkpoint)?;
    let m = read_volume(moving)?;
    let f = read_volume(fixed)?;
    ensure!(m.dims() == f.dims(), "moving {:?} and fixed {:?} extents differ", m.dims(), f.dims());
    let phi = predict(&m, &f, &ck.params, &ck.arch)?;
    let warped = warp_volume(&m.intensities, &phi)?;
    VolumeFile::dvf(&phi).write(out_dvf)?;
    VolumeFile::scalar(&warped).write(out_warped)?;
    if let Some((src, dst)) = labels {
        let (dims, lm) = read_labels(src)?;
        ensure!(dims == m.dims(), "moving labels {:?} do not match the image {:?}", dims, m.dims());
        VolumeFile::labels(dims, &warp_labels(&lm, &phi)?).write(dst)?;
    }
    Ok(format!("wrote {} and {}\n", out_dvf.display(), out_warped.display()))
}

fn eval(warped: &Path, fixed: &Path, dvf: Option<&Path>, labels: Option<&[u16]>) -> Result<String> {
    let (da, a) = read_labels(warped)?;
    let (db, b) = read_labels(fixed)?;
    ensure!(da == db, "label maps {:?} and {:?} differ in extent", da, db);
    let set: Vec<u16> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let mut s: Vec<u16> = a.iter().chain(&b).copied().filter(|&l| l != 0).collect();
            s.sort_unstable();
            s.dedup();
            s
        }
    };
    ensure!(!set.is_empty(), "no labels to score");
    let mut out = format!("dsc {}\n", dsc(&a, &b, &set)?);
    if let Some(path) = dvf {
        let phi = read_dvf(path)?;
        ensure!(phi.dims() == db, "field {:?} does not match label maps {:?}", phi.dims(), db);
        let _ = writeln!(out, "jacobian_nonpositive_pct {}", jacobian_nonpositive_fraction(&phi)?);
    }
    Ok(out)
}

fn bench(sizes: &[usize], out: &Path, config: Option<&Path>, seed: u64, iters: Option<usize>, reps: usize) -> Result<String> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let arch = cfg.arch()?;
    let mut train_cfg = cfg.train()?;
    if let Some(n) = iters {
        train_cfg.iterations = n;
    }
    ensure!(sizes.iter().all(|&s| s > 0), "window sizes must be positive");
    let pair = synth_pair::<f32>(seed, arch.input, &SynthConfig::default())?;
    let rows = window_sweep(&pair.moving, &pair.fixed, &pair.labels(), &arch, &train_cfg, sizes, reps)?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv());
    }
    write_bytes(out, csv.as_bytes())?;
    let monotone = rows.windows(2).all(|w| w[0].forward_ms <= w[1].forward_ms);
    let mut report = csv;
    let _ = writeln!(
        report,
        "trend (qualitative, not pass/fail): forward time {} with window size",
        if monotone { "grows" } else { "does not grow monotonically" }
    );
    Ok(report)
}

/// Gray levels of the max projections of `map` (`[D, H, W]`) along each axis.
fn projections(map: &[f64], dims: [usize; 3]) -> Vec<(usize, usize, Vec<u8>)> {
    let top = map.iter().cloned().fold(0.0, f64::max);
    let at = |p: [usize; 3]| map[(p[0] * dims[1] + p[1]) * dims[2] + p[2]];
    (0..3)
        .map(|axis| {
            let (r, c) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut pixels = Vec::with_capacity(dims[r] * dims[c]);
            for i in 0..dims[r] {
                for j in 0..dims[c] {
                    let mut best: f64 = 0.0;
                    for k in 0..dims[axis] {
                        let mut p = [0; 3];
                        p[r] = i;
                        p[c] = j;
                        p[axis] = k;
                        best = best.max(at(p));
                    }
                    let v = if top > 0.0 { best / top * 255.0 } else { 0.0 };
                    pixels.push(v.round() as u8);
                }
            }
            (dims[c], dims[r], pixels)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn dump_attention(
    checkpoint: &Path,
    pair: &Path,
    level: usize,
    out: &Path,
    stage: StageKind,
    round: usize,
    direction: Direction,
) -> Result<String> {
    let ck = Checkpoint::read(checkpoint)?;
    let (m, f) = load_pair(pair)?;
    let wanted = match stage {
        StageKind::Encoder => Stage::Encoder(level),
        StageKind::Decoder => Stage::Decoder(level),
    };
    let mut g = Graph32::new();
    let p = ck.params.map(&mut |_, t| g.constant(t.clone()));
    let mi = g.constant(m.intensities.clone());
    let fi = g.constant(f.intensities.clone());
    let fwd = forward_nodes(&mut g, mi, fi, &p, &ck.arch)?;
    let Some(st) = fwd.attention.iter().find(|s| s.stage == wanted) else {
        bail!("no attention at {wanted:?} for {} levels", ck.arch.levels);
    };
    let Some((to_m, to_f)) = st.rounds.get(round) else {
        bail!("round {round} out of range, {} rounds per level", st.rounds.len());
    };
    let block = match direction {
        Direction::Moving => to_m,
        Direction::Fixed => to_f,
    };
    let dump = AttentionDump::capture(&g, block);
    create_dir(out)?;
    for i in 0..dump.windows() {
        let w = AttentionWindow::from_dump(&dump, i);
        write_bytes(&out.join(format!("window_{i:05}.xmattn")), &w.encode())?;
    }

    // attention received per lattice token: mean over heads and queries, summed over windows
    let layout = &block.search_layout;
    let dims = layout.grid;
    let mut map = vec![0.0f64; dims.iter().product()];
    let per = (dump.heads * dump.rows) as f64;
    for i in 0..dump.windows() {
        let w = dump.window(i);
        for k in 0..dump.cols {
            if let Some(pos) = layout.index[i * dump.cols + k] {
                let mut s = 0.0;
                for hr in 0..dump.heads * dump.rows {
                    s += w[hr * dump.cols + k] as f64;
                }
                map[pos] += s / per;
            }
        }
    }
    for (name, (width, height, pixels)) in ["depth", "height", "width"].iter().zip(projections(&map, dims)) {
        write_bytes(&out.join(format!("mip_{name}.pgm")), &encode_pgm(width, height, &pixels))?;
    }
    Ok(format!(
        "wrote {} windows ({} heads, {}x{} weights each) and 3 projections to {}\n",
        dump.windows(),
        dump.heads,
        dump.rows,
        dump.cols,
        out.display()
    ))
}
