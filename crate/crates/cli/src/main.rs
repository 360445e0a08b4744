use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gassd::checkpoint::load_checkpoint;
use gassd::data::{load_annotations, load_volume, synth_dataset, SynthSpec, VolumeHeader};
use gassd::detection::{detect_volume, load_detections, save_detections};
use gassd::eval::{evaluate_detections, write_eval_outputs, ScanIndex};
use gassd::train::{ablate, evaluate, run_training, AblationMode, TrainConfig};
use gassd::{gradcheck, parallel, Error, Result};

#[derive(Parser)]
#[command(
    name = "gassd",
    version,
    about = "3D single-shot nodule detector with group-attention modules"
)]
struct Cli {
    /// Run everything on the calling thread (bit-exact reruns).
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CT data set.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes checkpoint, run log and an evaluation.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Detect nodules in one volume.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections: froc.csv and report.json.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        scans: usize,
        #[arg(long)]
        out: PathBuf,
        /// Voxel spacing `z,y,x` in mm shared by every scan.
        #[arg(long, value_parser = parse_spacing, default_value = "1.25,0.7,0.7")]
        spacing: [f64; 3],
        /// Directory of volume headers to take per-scan spacing from instead.
        #[arg(long)]
        volumes: Option<PathBuf>,
        /// Probability threshold for the ratio and per-category figures.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run one of the ablation grids.
    Ablate {
        #[arg(long, value_parser = parse_mode)]
        mode: AblationMode,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn parse_spacing(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [z, y, x] if parts.iter().all(|&v| v > 0.0) => Ok([z, y, x]),
        _ => Err("expected three positive numbers z,y,x".into()),
    }
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn spacing_from_headers(
    dir: &Path,
    ids: &[&str],
) -> Result<std::collections::BTreeMap<String, [f64; 3]>> {
    ids.iter()
        .map(|id| {
            let h: VolumeHeader = read_json(&dir.join(format!("{id}.json")))?;
            Ok((id.to_string(), h.spacing_mm))
        })
        .collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out } => {
            let spec: SynthSpec = read_json(&spec)?;
            let anns = synth_dataset(&spec, &out)?;
            println!(
                "wrote {} volumes with {} nodules to {}",
                spec.n_volumes,
                anns.len(),
                out.display()
            );
        }
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let (data, outcome) = run_training::<f32>(&cfg)?;
            let eval_data = data.subset(outcome.split.eval_ids());
            let (report, curve, _) = evaluate(&outcome.network, &outcome.store, &eval_data)?;
            let eval_dir = cfg.checkpoint_dir.join("eval");
            write_eval_outputs(&eval_dir, &report, &curve)?;
            if let Some(last) = outcome.epoch_losses.last() {
                println!(
                    "trained {} steps, final epoch loss {last:.4}",
                    outcome.steps
                );
            }
            println!("split {}", outcome.split.hash());
            println!(
                "cpm {:.4} ({} scans), report in {}",
                report.cpm,
                report.n_scans,
                eval_dir.display()
            );
        }
        Command::Detect {
            checkpoint,
            volume,
            out,
        } => {
            let (net, store, _) = load_checkpoint::<f32>(&checkpoint, None)?;
            let v = load_volume(&volume)?;
            let dets = detect_volume(&net, &store, &v)?;
            save_detections(&out, &dets)?;
            println!("{} detections written to {}", dets.len(), out.display());
        }
        Command::Eval {
            detections,
            annotations,
            scans,
            out,
            spacing,
            volumes,
            threshold,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Config(format!(
                    "threshold {threshold} outside [0, 1]"
                )));
            }
            let dets = load_detections(&detections)?;
            let anns = load_annotations(&annotations)?;
            let index = match volumes {
                Some(dir) => {
                    let mut ids: Vec<&str> = dets.iter().map(|d| d.scan_id.as_str()).collect();
                    ids.extend(anns.iter().map(|a| a.scan_id.as_str()));
                    ids.sort();
                    ids.dedup();
                    ScanIndex::with_count(spacing_from_headers(&dir, &ids)?, scans)?
                }
                None => ScanIndex::uniform(&dets, &anns, spacing, scans)?,
            };
            let (report, curve) = evaluate_detections(&dets, &anns, &index, threshold)?;
            write_eval_outputs(&out, &report, &curve)?;
            println!(
                "cpm {:.4} over {} scans, {} nodules",
                report.cpm, report.n_scans, report.n_nodules
            );
        }
        Command::Ablate { mode, config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let cells = ablate(mode, &cfg)?;
            println!("variant,levels_or_mode,cpm,fp_tp_ratio");
            for c in &cells {
                println!(
                    "{},{},{:.4},{}",
                    c.variant, c.levels_or_mode, c.cpm, c.fp_tp_ratio
                );
            }
        }
        Command::Gradcheck => {
            let report = gradcheck::run_suite()?;
            for c in &report.checks {
                let verdict = if c.passed() { "ok" } else { "FAILED" };
                println!(
                    "{:<24} {} instances  max rel. error {:.2e}  {verdict}",
                    c.name, c.instances, c.max_error
                );
            }
            println!("{:.1}s", report.elapsed.as_secs_f64());
            if !report.passed() {
                return Err(Error::Input("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    parallel::set_single_thread(cli.single_thread);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
