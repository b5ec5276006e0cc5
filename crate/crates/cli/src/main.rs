use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use cst_core::blocks::{cst_infer, init_params, load_checkpoint, model_macs, param_specs, CstConfig};
use cst_core::config::RunConfig;
use cst_core::hsi::{
    load_cube, prepare_dataset, read_bundle, save_cube, similarity_curves, synth_cube, write_bundle, DegradationSpec,
    HsiCube, PatchProtocol,
};
use cst_core::metrics::{MetricOptions, PsnrMode};
use cst_core::selfcheck::{format_table, selfcheck};
use cst_core::training::{evaluate, evaluate_bicubic, train, TrainOutputs};
use cst_core::CstError;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "cst", version, about = "Hyperspectral single-image super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic cube.
    Synth {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop test/train/val patches from a cube and degrade them.
    Prepare {
        #[arg(long)]
        cube: PathBuf,
        /// Preset name (chikusei, houston, pavia, desk) or a run config file whose [data] section is used.
        #[arg(long, default_value = "desk")]
        protocol: String,
        /// Required with a preset; must match the config's scale otherwise.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bicubic degradation without the antialiasing prefilter.
        #[arg(long)]
        no_antialias: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a prepared dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint (or the bicubic baseline) on the test crops and write a CSV report.
    Eval {
        #[arg(long, required_unless_present = "bicubic")]
        checkpoint: Option<PathBuf>,
        /// Score plain bicubic upsampling instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        bicubic: bool,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Pixels dropped from every border before scoring.
        #[arg(long, default_value_t = 0)]
        border: usize,
        /// PSNR as the mean of per-band values instead of one cube-wide MSE.
        #[arg(long)]
        band_mean_psnr: bool,
        /// Also write SR cubes, error maps and per-band differences here.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Super-resolve one cube.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Itemized multiply-accumulate counts.
    Flops {
        /// Defaults to the full-size model with 128 bands at x4.
        #[arg(long)]
        config: Option<PathBuf>,
        /// LR input height.
        #[arg(long, default_value_t = 32)]
        h: usize,
        /// LR input width.
        #[arg(long, default_value_t = 32)]
        w: usize,
    },
    /// Parameter counts per top-level block.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the reference suite and print a pass/fail table.
    Selfcheck,
    /// Band-to-band and pixel-to-pixel cosine similarity curves.
    Simcurve {
        #[arg(long)]
        cube: PathBuf,
        /// Output directory for band_similarity.csv and pixel_similarity.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Input(String),
    Numeric(String),
}

impl From<CstError> for Failure {
    fn from(e: CstError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CstError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CstError::io(path, e))?;
    Ok(())
}

fn model_config(path: Option<&Path>) -> Result<CstConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?.model),
        None => Ok(CstConfig::full(128, 4)),
    }
}

fn cmd_synth(h: usize, w: usize, b: usize, seed: u64, out: &Path) -> Outcome {
    if h == 0 || w == 0 || b == 0 {
        return Err(Failure::Input(format!(
            "cube dims must be positive, got {}x{}x{}",
            h, w, b
        )));
    }
    save_cube(&synth_cube(h, w, b, seed), out)?;
    println!("wrote {}x{}x{} cube to {}", h, w, b, out.display());
    Ok(())
}

fn cmd_prepare(cube: &Path, protocol: &str, scale: Option<usize>, seed: u64, no_aa: bool, out: &Path) -> Outcome {
    let cube = load_cube(cube)?;
    let proto = if Path::new(protocol).is_file() {
        let p = RunConfig::load(protocol)?.data;
        if let Some(s) = scale.filter(|&s| s != p.scale) {
            return Err(Failure::Input(format!(
                "--scale {} differs from the config's scale {}",
                s, p.scale
            )));
        }
        p
    } else {
        let s = scale.ok_or_else(|| Failure::Input("--scale is required with a protocol preset".into()))?;
        PatchProtocol::preset(protocol, s, (cube.height(), cube.width()))?
    };
    let mut deg = DegradationSpec::bicubic(proto.scale);
    deg.antialias = !no_aa;
    let bundle = prepare_dataset(&cube, &proto, &deg, seed)?;
    write_bundle(&bundle, out)?;
    println!(
        "test {}  train {}  val {}  degradation {}  -> {}",
        bundle.test.len(),
        bundle.train.len(),
        bundle.val.len(),
        deg.tag(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out_dir: &Path) -> Outcome {
    let run = RunConfig::load(config)?;
    let data = read_bundle(data_dir)?;
    if data.degradation.scale != run.model.scale {
        return Err(Failure::Input(format!(
            "dataset is x{}, model is x{}",
            data.degradation.scale, run.model.scale
        )));
    }
    let out = TrainOutputs {
        dir: out_dir.to_path_buf(),
    };
    fs::create_dir_all(out_dir).map_err(|e| CstError::io(out_dir, e))?;
    run.save(out_dir.join("run.cfg"))?;
    info!(
        "training on {} patches, validating on {}",
        data.train.len(),
        data.val.len()
    );
    let init = init_params(&run.model)?;
    let outcome = train(&run.model, &run.train, init, &data.train, &data.val, Some(&out))?;
    let last = outcome.epochs.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
    println!(
        "{} epochs, {} steps, final loss {:.6}, best val PSNR {:.3} dB -> {}",
        outcome.epochs.len(),
        outcome.step_losses.len(),
        last,
        outcome.best_val_psnr,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    data_dir: &Path,
    report: &Path,
    border: usize,
    band_mean: bool,
    emit: Option<&Path>,
) -> Outcome {
    let data = read_bundle(data_dir)?;
    let opts = MetricOptions {
        psnr_mode: if band_mean {
            PsnrMode::BandMean
        } else {
            PsnrMode::Global
        },
        border,
    };
    let ev = match checkpoint {
        Some(ck) => {
            let (cfg, store) = load_checkpoint(ck)?;
            if data.degradation.scale != cfg.scale {
                return Err(Failure::Input(format!(
                    "dataset is x{}, checkpoint is x{}",
                    data.degradation.scale, cfg.scale
                )));
            }
            evaluate(&store, &cfg, &data.test, &opts, emit)?
        }
        None => evaluate_bicubic(&data.test, data.degradation.scale, &opts)?,
    };
    write_file(report, &ev.csv())?;
    let m = &ev.mean;
    println!(
        "PSNR {:.3}  SSIM {:.4}  SAM {:.3}  CC {:.4}  RMSE {:.5}  ERGAS {:.3}  ({} crops) -> {}",
        m.psnr,
        m.ssim,
        m.sam,
        m.cc,
        m.rmse,
        m.ergas,
        ev.reports.len(),
        report.display()
    );
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path) -> Outcome {
    let (cfg, store) = load_checkpoint(checkpoint)?;
    let lr = load_cube(input)?;
    if lr.bands() != cfg.bands {
        return Err(Failure::Input(format!(
            "cube has {} bands, checkpoint expects {}",
            lr.bands(),
            cfg.bands
        )));
    }
    let sr = cst_infer(&store, &cfg, &lr.to_tensor())?;
    let sr = HsiCube::from_tensor(&sr)?;
    save_cube(&sr, out)?;
    println!(
        "wrote {}x{}x{} cube to {}",
        sr.height(),
        sr.width(),
        sr.bands(),
        out.display()
    );
    Ok(())
}

fn cmd_flops(config: Option<&Path>, h: usize, w: usize) -> Outcome {
    let cfg = model_config(config)?;
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Failure::Input("input dims must be positive".into()));
    }
    let macs = model_macs(&cfg, h, w);
    let total: u64 = macs.values().sum();
    let mut s = format!(
        "input {}x{}x{}, x{}, variant {}\n",
        h, w, cfg.bands, cfg.scale, cfg.variant
    );
    let _ = writeln!(s, "{:<20} {:>16} {:>10} {:>7}", "block", "MACs", "GMACs", "share");
    for (k, v) in &macs {
        let _ = writeln!(
            s,
            "{:<20} {:>16} {:>10.4} {:>6.2}%",
            k,
            v,
            *v as f64 / 1e9,
            100.0 * *v as f64 / total as f64
        );
    }
    let _ = writeln!(
        s,
        "{:<20} {:>16} {:>10.4} {:>6.2}%",
        "total",
        total,
        total as f64 / 1e9,
        100.0
    );
    print!("{}", s);
    Ok(())
}

fn cmd_params(config: Option<&Path>) -> Outcome {
    let cfg = model_config(config)?;
    cfg.validate()?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for spec in param_specs(&cfg) {
        let group = spec.name.split('.').next().unwrap_or("").to_string();
        *groups.entry(group).or_default() += spec.numel();
    }
    let total: usize = groups.values().sum();
    println!("{:<10} {:>12}", "block", "params");
    for (k, v) in &groups {
        println!("{:<10} {:>12}", k, v);
    }
    println!("{:<10} {:>12}", "total", total);
    Ok(())
}

fn cmd_selfcheck() -> Outcome {
    let checks = selfcheck();
    print!("{}", format_table(&checks));
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!(
            "{} of {} checks failed",
            failed,
            checks.len()
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn cmd_simcurve(cube: &Path, out: &Path) -> Outcome {
    let cube = load_cube(cube)?;
    let curves = similarity_curves(&cube)?;
    let mut band = String::from("band,cosine\n");
    for (i, v) in curves.band_curve.iter().enumerate() {
        let _ = writeln!(band, "{},{:.8}", i, v);
    }
    let mut pixel = String::from("y,x,cosine\n");
    for (i, v) in curves.pixel_curve.iter().enumerate() {
        let _ = writeln!(pixel, "{},{},{:.8}", i / cube.width(), i % cube.width(), v);
    }
    write_file(&out.join("band_similarity.csv"), &band)?;
    write_file(&out.join("pixel_similarity.csv"), &pixel)?;
    println!(
        "wrote {} band and {} pixel similarities to {}",
        curves.band_curve.len(),
        curves.pixel_curve.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Synth { h, w, b, seed, out } => cmd_synth(h, w, b, seed, &out),
        Cmd::Prepare {
            cube,
            protocol,
            scale,
            seed,
            no_antialias,
            out_dir,
        } => cmd_prepare(&cube, &protocol, scale, seed, no_antialias, &out_dir),
        Cmd::Train {
            config,
            data_dir,
            out_dir,
        } => cmd_train(&config, &data_dir, &out_dir),
        Cmd::Eval {
            checkpoint,
            bicubic: _,
            data_dir,
            report,
            border,
            band_mean_psnr,
            emit,
        } => cmd_eval(
            checkpoint.as_deref(),
            &data_dir,
            &report,
            border,
            band_mean_psnr,
            emit.as_deref(),
        ),
        Cmd::Infer { checkpoint, input, out } => cmd_infer(&checkpoint, &input, &out),
        Cmd::Flops { config, h, w } => cmd_flops(config.as_deref(), h, w),
        Cmd::Params { config } => cmd_params(config.as_deref()),
        Cmd::Selfcheck => cmd_selfcheck(),
        Cmd::Simcurve { cube, out } => cmd_simcurve(&cube, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
