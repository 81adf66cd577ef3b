use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dtlsd::attention::{complexity_probe, Mechanism, ProbeResult};
use dtlsd::harness::{
    evaluate_model, load_dataset, run_ablation, synth_generate, write_dataset, AblationMatrix, Checkpoint,
    TrainConfig, Trainer, DEFAULT_TAUS,
};
use dtlsd::lcdn::{noised_line, seeded_denoising_batch, DenoisingConfig};
use dtlsd::LineSegment;

#[derive(Parser)]
#[command(name = "dtlsd", version, about = "Line segment detection with a deformable transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic line scenes with annotations.
    SynthGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable the denoising branch.
        #[arg(long)]
        no_lcdn: bool,
        /// Backbone levels, `S1-S5` or `S2-S5`.
        #[arg(long)]
        levels: Option<String>,
        /// Loss log path; defaults to the checkpoint path with `.loss.jsonl` appended.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an annotated directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAUS.to_vec())]
        thresholds: Vec<f64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump one denoising batch as JSON.
    LcdnDump {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON array of `[x1, y1, x2, y2]` lines in normalized coordinates.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Denoising settings as JSON; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 900)]
        n_match: usize,
    },
    /// Time encoder self-attention against the token count.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256, 1024, 4096])]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every cell of an ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthGen { seed, count, size, out } => {
            let scenes = synth_generate(seed, count, size)?;
            write_dataset(&out, &scenes)?;
            log::info!("wrote {count} scenes to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            no_lcdn,
            levels,
            log,
        } => train(&config, &data, &out, no_lcdn, levels.as_deref(), log)?,
        Command::Eval {
            ckpt,
            data,
            thresholds,
            report,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let samples = load_dataset(&data, ckpt.config.image_size, ckpt.config.model.backbone.in_channels)?;
            let r = evaluate_model(&ckpt, &samples, &thresholds)?;
            write_file(&report, &serde_json::to_string_pretty(&r)?)?;
            for (k, v) in &r.sap {
                log::info!("sAP{k} = {v:.4}");
            }
        }
        Command::LcdnDump {
            seed,
            gt,
            out,
            config,
            n_match,
        } => {
            let text = fs::read_to_string(&gt).with_context(|| format!("reading {}", gt.display()))?;
            let raw: Vec<[f64; 4]> = serde_json::from_str(&text).context("ground truth must be a list of [x1, y1, x2, y2]")?;
            let lines: Vec<LineSegment> = raw.iter().map(|l| LineSegment::new(l[0], l[1], l[2], l[3]).canonicalize()).collect();
            let cfg = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => DenoisingConfig::default(),
            };
            cfg.validate()?;
            let batch = seeded_denoising_batch(&lines, &cfg, n_match, seed);
            let noised: Vec<LineSegment> = batch.queries.iter().map(|q| noised_line(lines[q.gt_index], q)).collect();
            let dump = serde_json::json!({ "seed": seed, "config": cfg, "gt": lines, "batch": batch, "noised": noised });
            write_file(&out, &serde_json::to_string_pretty(&dump)?)?;
        }
        Command::BenchAttn {
            tokens,
            d,
            repeats,
            seed,
            report,
        } => {
            let mut results = Vec::new();
            for m in [Mechanism::Global, Mechanism::Deformable] {
                let r = complexity_probe(m, &tokens, d, repeats, seed)?;
                log::info!("{} slope {:.3}", m.as_str(), r.slope);
                results.push(r);
            }
            write_file(&report, &ProbeResult::write_csv(&results))?;
        }
        Command::Ablate { matrix, out } => {
            let text = fs::read_to_string(&matrix).with_context(|| format!("reading {}", matrix.display()))?;
            let m = AblationMatrix::from_json(&text)?;
            let results = run_ablation(&m, &out, |name, step, loss| {
                if step % 100 == 0 {
                    log::info!("[{name}] step {step} loss {loss:.4}");
                }
            })?;
            for r in &results {
                log::info!("{}: sAP10 {:.4}", r.name, r.report.sap_at(10.0).unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, no_lcdn: bool, levels: Option<&str>, log: Option<PathBuf>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if no_lcdn {
        cfg.lcdn_enabled = false;
    }
    if let Some(l) = levels {
        cfg.set_levels(l)?;
    }
    cfg.validate()?;
    let samples = load_dataset(data, cfg.image_size, cfg.model.backbone.in_channels)?;
    if samples.is_empty() {
        bail!("no samples in {}", data.display());
    }
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.jsonl");
        PathBuf::from(p)
    });
    let file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut writer = BufWriter::new(file);
    let mut trainer = Trainer::new(cfg)?;
    let steps = trainer.planned_steps(samples.len());
    log::info!("training {steps} steps on {} samples", samples.len());
    let mut io_err = None;
    trainer.run(&samples, steps, |e| {
        if let Err(err) = writeln!(writer, "{}", e.to_json_line()) {
            io_err.get_or_insert(err);
        }
        if e.step % 100 == 0 {
            log::info!("step {} loss {:.4} (dn {:.4})", e.step, e.loss, e.loss_dn);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing loss log");
    }
    writer.flush()?;
    trainer.checkpoint().save(out)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
