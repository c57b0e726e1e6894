use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use alm_core::calib::{solve_hidden_transforms, synthetic_dataset, CalibSolution, SyntheticNoise, DEFAULT_WEIGHT};
use alm_core::config::ConfigFile;
use alm_core::io;
use alm_core::pipeline::{
    compute_metrics, measure_throughput, run_free_running, run_pipeline, GroundTruth, ReplayOptions, Summary,
};
use alm_core::sim::{add_noise_events, simulate_blink_events, synth_ground_truth};
use alm_core::Transform;

#[derive(Parser)]
#[command(
    name = "alm",
    version,
    about = "Active LED marker pose estimation from event streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to an event CSV and a ground-truth CSV.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Estimate poses from an event CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the threaded scheduler instead of the deterministic one.
        #[arg(long)]
        free_running: bool,
        /// Replay speed for --free-running; 0 injects as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Score a pose log against ground truth.
    Metrics {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Also write per-record errors here.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Measure output rate and latency of the threaded scheduler.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Solve the hidden camera and marker transforms from a measurement CSV.
    Calibrate {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WEIGHT)]
        weight: f64,
    },
    /// Write a synthetic measurement CSV for `calibrate`; prints the true transforms.
    CalibData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        markers: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_m: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_rad: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    ConfigFile::load(path).with_context(|| format!("reading {}", path.display()))
}

fn row(t: &Transform) -> String {
    t.to_row_major().map(|v| format!("{v:.9}")).join(" ")
}

fn summary_line(name: &str, s: &Summary, unit: &str) -> String {
    format!(
        "{name:<22} mean {:.6e}  std {:.6e}  max {:.6e} {unit}",
        s.mean, s.std, s.max
    )
}

fn simulate(scene_path: &Path, events: &Path, gt_path: &Path) -> Result<()> {
    let file = load_config(scene_path)?;
    let scene = file.to_scene()?;
    let stream = simulate_blink_events(&scene, scene.duration_us)?;
    let signal = stream.len();
    let stream = add_noise_events(&stream, &scene, scene.duration_us);
    io::write_events_csv(create(events)?, &stream)?;

    let period = file.ground_truth_period_us.unwrap_or(1000);
    let mut gt = GroundTruth::new();
    for (i, m) in scene.markers.iter().enumerate() {
        gt.insert(m.id.clone(), synth_ground_truth(&scene, i, period)?);
    }
    io::write_ground_truth_csv(create(gt_path)?, &gt)?;
    println!(
        "{} events ({} signal, {} noise) over {} us, {} markers",
        stream.len(),
        signal,
        stream.len() - signal,
        scene.duration_us,
        scene.markers.len()
    );
    Ok(())
}

fn run(config: &Path, events: &Path, out: &Path, free_running: bool, speed: f64) -> Result<()> {
    let cfg = load_config(config)?.to_pipeline()?;
    let stream = io::read_events_csv(open(events)?)?;
    let started = Instant::now();
    let log = if free_running {
        run_free_running(&cfg, &stream, ReplayOptions { speed })?
    } else {
        run_pipeline(&cfg, &stream)?
    };
    let wall = started.elapsed().as_secs_f64();
    io::write_pose_log_csv(create(out)?, &log)?;
    let lost = log.records.iter().filter(|r| r.lost).count();
    println!(
        "{} events -> {} poses ({} lost) in {:.3} s",
        stream.len(),
        log.len(),
        lost,
        wall
    );
    Ok(())
}

fn metrics(poses: &Path, gt_path: &Path, samples: Option<&Path>) -> Result<()> {
    let log = io::read_pose_log_csv(open(poses)?)?;
    let gt = io::read_ground_truth_csv(open(gt_path)?)?;
    let rep = compute_metrics(&log, &gt)?;
    println!("scored records         {}", rep.samples.len());
    println!("lost records           {}", rep.lost_records);
    println!("{}", summary_line("translation error", &rep.translation, "m"));
    println!("{}", summary_line("orientation error", &rep.orientation_deg, "deg"));
    println!("{}", summary_line("relative error", &rep.relative, ""));
    if let Some(path) = samples {
        let mut w = create(path)?;
        writeln!(
            w,
            "t_us,marker_id,ex,ey,ez,translation_norm,orientation_deg,relative,normalized_distance"
        )?;
        for s in &rep.samples {
            let e = &s.translation_error;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.t_us,
                s.marker_id,
                e.x,
                e.y,
                e.z,
                s.translation_norm,
                s.orientation_error_deg,
                s.relative_error,
                s.normalized_distance
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

fn bench(config: &Path, events: &Path, speed: f64) -> Result<()> {
    let cfg = load_config(config)?.to_pipeline()?;
    let stream = io::read_events_csv(open(events)?)?;
    let span_us = match (stream.first(), stream.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => bail!("no events in {}", events.display()),
    };

    let started = Instant::now();
    let stepped = run_pipeline(&cfg, &stream)?;
    let offline = started.elapsed().as_secs_f64();
    let (_, rep) = measure_throughput(&cfg, &stream, ReplayOptions { speed })?;

    println!(
        "stream                 {} events over {:.3} s",
        stream.len(),
        span_us as f64 * 1e-6
    );
    println!(
        "stepped                {} poses in {:.3} s ({:.3e} events/s)",
        stepped.len(),
        offline,
        stream.len() as f64 / offline
    );
    println!(
        "free-running           {} poses in {:.3} s at speed {speed}",
        rep.poses, rep.wall_seconds
    );
    println!("{}", summary_line("output rate", &rep.rate_hz, "Hz"));
    println!("{}", summary_line("latency", &rep.latency_us, "us"));
    Ok(())
}

fn print_solution(title: &str, sol: &CalibSolution) {
    println!("{title}");
    println!("  camera_body_to_camera  {}", row(&sol.camera_body_to_camera));
    for (i, m) in sol.marker_body_to_marker.iter().enumerate() {
        println!("  marker{i}_body_to_marker {}", row(m));
    }
}

fn calibrate(measurements: &Path, weight: f64) -> Result<()> {
    let data = io::read_measurements_csv(open(measurements)?)?;
    let sol = solve_hidden_transforms(&data, weight, None)?;
    print_solution("solution", &sol);
    println!("measurements           {}", data.len());
    println!("final cost             {:.6e}", sol.final_cost);
    println!("iterations             {}", sol.iterations);
    println!("status                 {:?}", sol.status);
    println!("unobservable           {}", sol.unobservable);
    Ok(())
}

fn calib_data(out: &Path, count: usize, markers: usize, noise: SyntheticNoise, seed: u64) -> Result<()> {
    if count == 0 || markers == 0 {
        bail!("count and markers must be positive");
    }
    let (data, truth) = synthetic_dataset(count, markers, noise, seed);
    io::write_measurements_csv(create(out)?, &data)?;
    print_solution("true transforms", &truth);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            scene,
            events,
            ground_truth,
        } => simulate(&scene, &events, &ground_truth),
        Command::Run {
            config,
            events,
            out,
            free_running,
            speed,
        } => run(&config, &events, &out, free_running, speed),
        Command::Metrics {
            poses,
            ground_truth,
            samples,
        } => metrics(&poses, &ground_truth, samples.as_deref()),
        Command::Bench { config, events, speed } => bench(&config, &events, speed),
        Command::Calibrate { measurements, weight } => calibrate(&measurements, weight),
        Command::CalibData {
            out,
            count,
            markers,
            noise_m,
            noise_rad,
            seed,
        } => calib_data(
            &out,
            count,
            markers,
            SyntheticNoise {
                displacement_m: noise_m,
                rotation_rad: noise_rad,
            },
            seed,
        ),
    }
}
