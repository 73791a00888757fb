use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use splatslam::geom::{quat_wxyz, read_trajectory, Camera, Pose};
use splatslam::image::{write_pfm, write_png};
use splatslam::loop_graph::{accept_loop, gaussian_gicp, LoopConfig, LoopError};
use splatslam::map_opt::checkpoint::read_checkpoint;
use splatslam::pipeline::{apply_overrides, evaluate_views, run_pipeline, synth_generate, Dataset, RunConfig, SynthConfig};
use splatslam::splat_render::{render, RenderConfig};

#[derive(Parser)]
#[command(name = "splatslam", about = "Gaussian-splatting SLAM back-end on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON synthesis config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path override, e.g. `noise.drift_translation=0.01`.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Run the pipeline over a dataset and write the report, trajectory and map.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Loop closure switch.
        #[arg(long = "loop", value_enum)]
        loop_closure: Option<Switch>,
        /// Attribute provider: `stub`, `dir:<path>` or `off`.
        #[arg(long)]
        ffm: Option<String>,
        /// Dotted-path override, e.g. `optim.lr.mean=0.002`.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Score a saved map on the held-out frames of a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Estimated trajectory; defaults to `trajectory.tsv` beside the map.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Hold-out period; defaults to the value stored with the map.
        #[arg(long)]
        holdout_every: Option<usize>,
    },
    /// Register two Gaussian PLY files.
    Gicp {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tar: PathBuf,
        /// Initial transform `tx ty tz qw qx qy qz`.
        #[arg(long)]
        init: Option<String>,
        /// Dotted-path override of the loop-closure config.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Render a saved map from a world-from-camera pose into
    /// `<out>_rgb.png`, `<out>_depth.pfm` and `<out>_alpha.pfm`.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// `tx ty tz qw qx qy qz`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        /// Output name prefix.
        #[arg(long, default_value = "render")]
        out: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Horizontal field of view in degrees.
        #[arg(long)]
        hfov: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Streaming,
    Deterministic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn ffm_overrides(spec: &str) -> Result<Vec<String>> {
    Ok(match spec {
        "stub" => vec!["pipeline.provider=stub".into()],
        "off" => vec!["pipeline.provider=none".into()],
        _ => match spec.strip_prefix("dir:") {
            Some(dir) if !dir.is_empty() => vec![
                "pipeline.provider=dir".into(),
                format!("pipeline.provider_dir={}", serde_json::Value::String(dir.into())),
            ],
            _ => bail!("--ffm expects stub, dir:<path> or off, got `{spec}`"),
        },
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn parse_pose(s: &str) -> Result<Pose> {
    let v: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .with_context(|| format!("cannot parse pose `{s}`"))?;
    if v.len() != 7 {
        bail!("pose needs 7 numbers `tx ty tz qw qx qy qz`, got {}", v.len());
    }
    Ok(Pose::new(quat_wxyz(v[3], v[4], v[5], v[6]), Vector3::new(v[0], v[1], v[2])))
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn stored_run(map: &Path) -> Result<(Option<RunConfig>, Option<Camera>)> {
    let (_, side) = read_checkpoint(map).with_context(|| format!("reading {}", map.display()))?;
    let Some(side) = side else {
        return Ok((None, None));
    };
    let run = side.config.get("run").cloned().map(serde_json::from_value).transpose()?;
    let cam = side.config.get("camera").cloned().map(serde_json::from_value).transpose()?;
    Ok((run, cam))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("splatslam {name}: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}

fn diagnostic(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain().map(ToString::to_string) {
        if !out.ends_with(&cause) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&cause);
        }
    }
    out
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Run { .. } => "run",
            Command::Eval { .. } => "eval",
            Command::Gicp { .. } => "gicp",
            Command::Render { .. } => "render",
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            config,
            overrides,
        } => {
            let cfg: SynthConfig = apply_overrides(&load_json::<SynthConfig>(config.as_deref())?, &overrides)?;
            let meta = synth_generate(&cfg, &out)?;
            println!("wrote {} frames to {}", meta.frame_count, out.display());
        }
        Command::Run {
            dataset,
            out,
            config,
            mode,
            loop_closure,
            ffm,
            overrides,
        } => {
            let mut all = Vec::new();
            if let Some(m) = mode {
                all.push(match m {
                    ModeArg::Streaming => "pipeline.mode=streaming".to_string(),
                    ModeArg::Deterministic => "pipeline.mode=deterministic".to_string(),
                });
            }
            if let Some(l) = loop_closure {
                all.push(format!("loop_closure.enabled={}", matches!(l, Switch::On)));
            }
            if let Some(f) = ffm {
                all.extend(ffm_overrides(&f)?);
            }
            all.extend(overrides);
            let cfg = load_json::<RunConfig>(config.as_deref())?.with_overrides(&all)?;
            let ds = Dataset::open(&dataset).with_context(|| format!("dataset: opening {}", dataset.display()))?;
            let result = run_pipeline(&ds, &cfg)?;
            result.write(&out, ds.camera())?;
            let r = &result.report;
            println!(
                "frames {} segments {} gaussians {} loops {} ate {:.4} (odometry {:.4})",
                r.frames, r.segments, r.gaussians, r.loops_accepted, r.ate, r.ate_odometry
            );
            if let Some(e) = &r.eval {
                println!("held-out psnr {:.3} ssim {:.4} over {} views", e.psnr_mean, e.ssim_mean, e.views.len());
            }
            println!(
                "wall {:.1}s for {:.1}s of stream (factor {:.2})",
                result.timing.wall_seconds, result.timing.stream_seconds, result.timing.realtime_factor
            );
        }
        Command::Eval {
            dataset,
            map,
            trajectory,
            holdout_every,
        } => {
            let ds = Dataset::open(&dataset)?;
            let (gaussians, _) = read_checkpoint(&map)?;
            let (run, _) = stored_run(&map)?;
            let run = run.unwrap_or_default();
            let every = holdout_every.unwrap_or(run.pipeline.holdout_every);
            let traj_path = trajectory.unwrap_or_else(|| map.with_file_name("trajectory.tsv"));
            let traj = read_trajectory(&traj_path).with_context(|| format!("reading {}", traj_path.display()))?;
            let frames: Vec<(usize, Pose)> = traj
                .iter()
                .enumerate()
                .filter(|(k, _)| every > 0 && k % every == every / 2)
                .map(|(k, p)| (k, p.pose))
                .collect();
            let summary = evaluate_views(&gaussians, &ds, &frames, &run.optim.render)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Gicp {
            src,
            tar,
            init,
            overrides,
        } => {
            let cfg: LoopConfig = apply_overrides(&LoopConfig::default(), &overrides)?;
            let (s, _) = read_checkpoint(&src)?;
            let (t, _) = read_checkpoint(&tar)?;
            let init = init.as_deref().map(parse_pose).transpose()?.unwrap_or_default();
            let result = match gaussian_gicp(&s, &t, &init, &cfg) {
                Ok(r) => r,
                Err(LoopError::NotConverged(r)) => *r,
                Err(e) => return Err(anyhow::Error::new(e).context("loop_graph")),
            };
            let accepted = accept_loop(&result, cfg.max_residual, cfg.min_correspondences);
            let t = &result.transform;
            let q = &t.rotation;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "transform": [t.translation.x, t.translation.y, t.translation.z, q.w, q.i, q.j, q.k],
                    "residual": result.residual,
                    "correspondences": result.correspondences,
                    "iterations": result.iterations,
                    "converged": result.converged,
                    "accepted": accepted,
                }))?
            );
        }
        Command::Render {
            map,
            pose,
            out,
            width,
            height,
            hfov,
        } => {
            let (gaussians, _) = read_checkpoint(&map)?;
            let (run, stored_cam) = stored_run(&map)?;
            let cam = match (width, height, hfov, stored_cam) {
                (None, None, None, Some(c)) => c,
                (w, h, f, c) => {
                    let w = w.or(c.map(|c| c.width)).unwrap_or(128);
                    let h = h.or(c.map(|c| c.height)).unwrap_or(128);
                    Camera::with_hfov(w, h, f.unwrap_or(90.0).to_radians())
                }
            };
            let render_cfg = run.map_or_else(RenderConfig::default, |r| r.optim.render);
            let img = render(&gaussians, &cam, &parse_pose(&pose)?, &render_cfg).context("splat_render")?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_png(&with_suffix(&out, "_rgb.png"), &img.color)?;
            write_pfm(&with_suffix(&out, "_depth.pfm"), &img.depth)?;
            write_pfm(&with_suffix(&out, "_alpha.pfm"), &img.acc_alpha)?;
            println!("rendered {} Gaussians to {}_*", gaussians.len(), out.display());
        }
    }
    Ok(())
}
