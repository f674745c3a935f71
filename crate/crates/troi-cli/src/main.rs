//! Command-line harness: seeded synthetic data, end-to-end operator runs,
//! gradient checks, benchmarks and sampling plans.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use troi_core::gradcheck::{check_op, suite, DEFAULT_EPS};
use troi_core::io::{read_boxes, read_tensor, write_boxes, write_tensor, AnyTensor};
use troi_core::pipeline::{
    bench_operators, run_video, synthetic_boxes, synthetic_feature_map, OpBench, Route,
};
use troi_core::sampling::{sample_support_frames, SamplingStrategy};
use troi_core::tensor::{Dtype, Element, Tensor};
use troi_core::{Result, RunConfig, SplitMix64, TafaParams, TroiError};

/// Temporal ROI align operators on synthetic videos.
#[derive(Parser)]
#[command(name = "troi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Consecutive,
    Strided,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

/// Operator hyperparameters shared by the subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Seed for synthetic data and parameter initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Most-similar positions gathered per target position.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Temporal attention blocks (channel groups).
    #[arg(long = "n-blocks", default_value_t = 4)]
    n_blocks: usize,
    /// Pooled ROI height and width.
    #[arg(long = "pool-size", default_value_t = 7)]
    pool_size: usize,
    /// Number of support frames.
    #[arg(long = "t-support", default_value_t = 14)]
    t_support: usize,
    /// Support-frame sampling strategy.
    #[arg(long, value_enum, default_value_t = StrategyArg::Uniform)]
    strategy: StrategyArg,
    /// Frame stride for the strided strategy.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Bilinear samples per bin axis in ROI align.
    #[arg(long = "sampling-ratio", default_value_t = 2)]
    sampling_ratio: usize,
    /// Scalar type for tensors on disk and in benchmarks.
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<RunConfig> {
        let strategy = match self.strategy {
            StrategyArg::Consecutive => SamplingStrategy::Consecutive,
            StrategyArg::Strided => {
                if self.stride == 0 {
                    return Err(TroiError::invalid("--stride must be >= 1"));
                }
                SamplingStrategy::Strided(self.stride)
            }
            StrategyArg::Uniform => SamplingStrategy::Uniform,
        };
        Ok(RunConfig {
            k: self.k,
            n_blocks: self.n_blocks,
            pool_h: self.pool_size,
            pool_w: self.pool_size,
            t_support: self.t_support,
            strategy,
            sampling_ratio: self.sampling_ratio,
            seed: self.seed,
            dtype: match self.dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            },
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video: frame tensor files plus a boxes file.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Video length in frames.
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Feature-map height.
        #[arg(long, default_value_t = 14)]
        height: usize,
        /// Feature-map width.
        #[arg(long, default_value_t = 14)]
        width: usize,
        /// Feature-map channels.
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Proposals to generate.
        #[arg(long = "num-boxes", default_value_t = 3)]
        num_boxes: usize,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full operator over a generated video for every proposal.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory produced by `gen`.
        video_dir: PathBuf,
        /// Target frame index.
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Output tensor file (stacked P x h x w x C features).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Time the naive vs vectorized operator routes on synthetic data.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Feature-map height.
        #[arg(long, default_value_t = 14)]
        height: usize,
        /// Feature-map width.
        #[arg(long, default_value_t = 14)]
        width: usize,
        /// Feature-map channels.
        #[arg(long, default_value_t = 256)]
        channels: usize,
        /// Timing repetitions (median is reported).
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Verify every analytic VJP against central finite differences.
    Gradcheck {
        /// Probes per operator.
        #[arg(long, default_value_t = 16)]
        probes: usize,
        /// Seed for probe inputs and cotangents.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the support-frame plan for one target frame.
    SamplePlan {
        /// Video length in frames.
        #[arg(long = "video-len")]
        video_len: usize,
        /// Target frame index.
        #[arg(long)]
        target: usize,
        /// Number of support frames.
        #[arg(long = "t-support")]
        t_support: usize,
        /// Sampling strategy.
        #[arg(long, value_enum, default_value_t = StrategyArg::Uniform)]
        strategy: StrategyArg,
        /// Frame stride for the strided strategy.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            cfg,
            frames,
            height,
            width,
            channels,
            num_boxes,
            out,
        } => cmd_gen(
            &cfg.to_config()?,
            frames,
            height,
            width,
            channels,
            num_boxes,
            &out,
        ),
        Command::Run {
            cfg,
            video_dir,
            target,
            out,
        } => cmd_run(&cfg.to_config()?, &video_dir, target, &out),
        Command::Bench {
            cfg,
            height,
            width,
            channels,
            reps,
        } => cmd_bench(&cfg.to_config()?, height, width, channels, reps),
        Command::Gradcheck { probes, seed } => cmd_gradcheck(probes, seed),
        Command::SamplePlan {
            video_len,
            target,
            t_support,
            strategy,
            stride,
        } => {
            let strategy = match strategy {
                StrategyArg::Consecutive => SamplingStrategy::Consecutive,
                StrategyArg::Strided => SamplingStrategy::Strided(stride),
                StrategyArg::Uniform => SamplingStrategy::Uniform,
            };
            let plan = sample_support_frames(video_len, target, t_support, strategy)?;
            let rendered: Vec<String> = plan.indices.iter().map(|i| i.to_string()).collect();
            println!("{}", rendered.join(" "));
            Ok(())
        }
    }
}

const MAX_TENSOR_ELEMS: u128 = 1 << 48;

fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.troi"))
}

fn cmd_gen(
    cfg: &RunConfig,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    num_boxes: usize,
    out: &Path,
) -> Result<()> {
    if frames == 0 {
        return Err(TroiError::invalid("empty video"));
    }
    if height == 0 || width == 0 || channels == 0 {
        return Err(TroiError::invalid("frame dims must be >= 1"));
    }
    if (height as u128) * (width as u128) * (channels as u128) > MAX_TENSOR_ELEMS {
        return Err(TroiError::invalid(format!(
            "tensor dims {height} x {width} x {channels} exceed 2^48 elements"
        )));
    }
    if num_boxes == 0 {
        return Err(TroiError::invalid("need at least one proposal box"));
    }
    std::fs::create_dir_all(out).map_err(|e| TroiError::io(out, e))?;

    let mut rng = SplitMix64::new(cfg.seed);
    for i in 0..frames {
        let path = frame_path(out, i);
        match cfg.dtype {
            Dtype::F64 => {
                let t: Tensor<f64> = synthetic_feature_map(&mut rng, height, width, channels)?;
                write_tensor(&path, &t)?;
            }
            Dtype::F32 => {
                let t: Tensor<f32> = synthetic_feature_map(&mut rng, height, width, channels)?;
                write_tensor(&path, &t)?;
            }
        }
    }
    let boxes = synthetic_boxes(&mut rng, num_boxes, height, width);
    write_boxes(&out.join("boxes.txt"), &boxes)?;
    println!(
        "wrote {frames} frames ({height} x {width} x {channels}, {}) and {num_boxes} boxes to {}",
        cfg.dtype,
        out.display()
    );
    Ok(())
}

/// Frame files of a video directory, ordered by frame index.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| TroiError::io(dir, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| TroiError::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".troi"))
        {
            if let Ok(idx) = stem.parse::<usize>() {
                indexed.push((idx, entry.path()));
            }
        }
    }
    if indexed.is_empty() {
        return Err(TroiError::bad_file(dir, "no frame_*.troi files found"));
    }
    indexed.sort_by_key(|(idx, _)| *idx);
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

fn cmd_run(cfg: &RunConfig, video_dir: &Path, target: usize, out: &Path) -> Result<()> {
    let frame_files = list_frames(video_dir)?;
    let boxes = read_boxes(&video_dir.join("boxes.txt"))?;
    match cfg.dtype {
        Dtype::F64 => {
            let frames: Vec<Tensor<f64>> = frame_files
                .iter()
                .map(|p| read_tensor(p).map(AnyTensor::into_f64))
                .collect::<Result<_>>()?;
            run_and_report(cfg, &frames, target, &boxes, out)
        }
        Dtype::F32 => {
            let frames: Vec<Tensor<f32>> = frame_files
                .iter()
                .map(|p| read_tensor(p).map(AnyTensor::into_f32))
                .collect::<Result<_>>()?;
            run_and_report(cfg, &frames, target, &boxes, out)
        }
    }
}

fn run_and_report<T: Element>(
    cfg: &RunConfig,
    frames: &[Tensor<T>],
    target: usize,
    boxes: &[troi_core::RoiBox],
    out: &Path,
) -> Result<()> {
    let channels = frames
        .first()
        .map(|f| *f.dims().last().unwrap())
        .ok_or_else(|| TroiError::invalid("empty video"))?;
    if cfg.n_blocks == 0 || channels % cfg.n_blocks != 0 {
        return Err(TroiError::invalid(format!(
            "block count {} does not divide {channels} channels",
            cfg.n_blocks
        )));
    }
    let params = TafaParams::<T>::seeded(cfg.n_blocks, channels / cfg.n_blocks, cfg.seed)?;
    let run = run_video(frames, target, boxes, cfg, &params, Route::Vectorized)?;

    write_tensor(out, &run.stacked)?;
    if let Some(first) = run.proposals.first() {
        println!(
            "plan ({}, T={}): {:?}",
            first.plan.strategy,
            first.plan.indices.len(),
            first.plan.indices
        );
    }
    for (i, p) in run.proposals.iter().enumerate() {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for v in p.features.data() {
            let v = v.to_f64();
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        let mean = sum / p.features.numel() as f64;
        println!(
            "proposal {i}: min={min:.6} max={max:.6} mean={mean:.6} attention_entropy={:.6}",
            p.mean_attention_entropy
        );
    }
    println!(
        "wrote {:?} features for {} proposals to {}",
        run.stacked.dims(),
        run.proposals.len(),
        out.display()
    );
    Ok(())
}

fn print_bench_rows(rows: &[OpBench]) {
    println!(
        "{:<24} {:>16} {:>18} {:>9} {:>12}",
        "operator", "naive ns/prop", "vectorized ns/prop", "speedup", "max|diff|"
    );
    for row in rows {
        println!(
            "{:<24} {:>16.0} {:>18.0} {:>8.2}x {:>12.3e}",
            row.name,
            row.naive_ns,
            row.vectorized_ns,
            row.speedup(),
            row.max_abs_diff
        );
    }
}

fn cmd_bench(
    cfg: &RunConfig,
    height: usize,
    width: usize,
    channels: usize,
    reps: usize,
) -> Result<()> {
    println!(
        "bench: {height} x {width} x {channels} map, pool {} x {}, K={}, N={}, T={}, {} reps, dtype {}",
        cfg.pool_h, cfg.pool_w, cfg.k, cfg.n_blocks, cfg.t_support, reps, cfg.dtype
    );
    let rows = match cfg.dtype {
        Dtype::F64 => bench_operators::<f64>(cfg, height, width, channels, reps)?,
        Dtype::F32 => bench_operators::<f32>(cfg, height, width, channels, reps)?,
    };
    print_bench_rows(&rows);
    Ok(())
}

fn cmd_gradcheck(probes: usize, seed: u64) -> Result<()> {
    let mut rng = SplitMix64::new(seed);
    let mut all_pass = true;
    for case in suite::standard_cases()? {
        let report = check_op(&case, probes, DEFAULT_EPS, &mut rng)?;
        println!("{report}");
        all_pass &= report.pass;
    }
    let control = check_op(&suite::corrupted_case(), probes, DEFAULT_EPS, &mut rng)?;
    if control.pass {
        return Err(TroiError::invalid(
            "negative control passed: the checker is not detecting corrupted VJPs",
        ));
    }
    println!("corrupted_vjp negative control: rejected as expected");
    if !all_pass {
        return Err(TroiError::invalid("one or more gradient checks failed"));
    }
    Ok(())
}
