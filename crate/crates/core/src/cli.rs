//! Command-line driver.
//!
//! Exit codes: 0 success, 2 verification failure, 64 usage, 65 data,
//! 78 config.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{finite_difference_check_at, Tensor};
use crate::config::RunConfig;
use crate::dual_encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, ablation_table, bound_study, fit_inverse_sqrt, summarize_gaps, Experiment, RunMetrics,
};
use crate::meta_domain::{class_text_input, mix_seed, sample_domains, MetaDomain};
use crate::objectives::{BatchItem, ClassBank, LossKind, Objective};
use crate::prompt_bank::PromptBank;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_CONFIG: i32 = 78;
pub const EXIT_INTERNAL: i32 = 70;

/// Overrides the default output directory.
pub const OUT_DIR_ENV: &str = "EPISODIC_PROMPT_OUT";

pub const CHECKPOINT_FILE: &str = "checkpoint.mprb";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_JSON: &str = "eval_metrics.json";
pub const EVAL_CSV: &str = "eval_metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "episodic-prompt", version, about = "Prompt tuning with episodic training over synthetic domains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<run id>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train prompts, write checkpoint, config and metrics.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <out>/checkpoint.mprb).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Component and prompt-size ablations over the study seeds.
    Ablate(Common),
    /// Generalization gap against the number of training domains.
    BoundStudy(Common),
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates checked per prompt set.
        #[arg(long, default_value_t = 24)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Write the generated train and test sets as text fixtures.
    ExportData(Common),
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Input(_) | Error::Leakage(_) | Error::Format(_) | Error::Io(_) => EXIT_DATA,
        Error::Dimension { .. } | Error::Numeric(_) | Error::Index { .. } => EXIT_INTERNAL,
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.resolve()
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(cfg.run_id()))
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf)> {
    if let Some(jobs) = common.jobs {
        // Fails only if the global pool already exists; the old one is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg);
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok((cfg, dir))
}

fn write_metrics(dir: &Path, json: &str, csv: &str, m: &RunMetrics) -> Result<()> {
    fs::write(dir.join(json), m.to_json())?;
    fs::write(dir.join(csv), m.to_csv())?;
    Ok(())
}

fn summary_line(m: &RunMetrics) -> String {
    match (m.base_acc, m.new_acc, m.harmonic_mean) {
        (Some(b), Some(n), Some(h)) => format!("base {b:.2}  new {n:.2}  H {h:.2}"),
        _ => m
            .per_domain_acc
            .iter()
            .map(|(d, a)| format!("domain {d} {a:.2}"))
            .collect::<Vec<_>>()
            .join("  "),
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train(common) => {
            let (cfg, dir) = prepare(&common)?;
            let exp = Experiment::build(&cfg)?;
            let (bank, metrics) = exp.run()?;
            bank.save(&dir.join(CHECKPOINT_FILE))?;
            write_metrics(&dir, METRICS_JSON, METRICS_CSV, &metrics)?;
            let emb = BufWriter::new(fs::File::create(dir.join("embeddings.csv"))?);
            exp.write_embeddings(&bank, emb)?;
            println!("run {}  {}  -> {}", metrics.run_id, summary_line(&metrics), dir.display());
            Ok(EXIT_OK)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, dir) = prepare(&common)?;
            let path = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
            if !path.exists() {
                return Err(Error::Data(format!("checkpoint {} not found", path.display())));
            }
            let bank = PromptBank::load(&path)?;
            if (bank.prompt_len(), bank.prompt_layers()) != (cfg.prompt_len(), cfg.prompt_layers()) {
                return Err(Error::Config(format!(
                    "checkpoint has P={} L={} but the config asks for P={} L={}",
                    bank.prompt_len(),
                    bank.prompt_layers(),
                    cfg.prompt_len(),
                    cfg.prompt_layers()
                )));
            }
            let exp = Experiment::build(&cfg)?;
            let metrics = exp.evaluate(&bank, Vec::new())?;
            write_metrics(&dir, EVAL_JSON, EVAL_CSV, &metrics)?;
            println!("run {}  {}", metrics.run_id, summary_line(&metrics));
            Ok(EXIT_OK)
        }
        Command::Ablate(common) => {
            let (cfg, dir) = prepare(&common)?;
            let rows = ablation_run(&cfg, common.jobs.unwrap_or(1))?;
            let table = ablation_table(&rows);
            fs::write(dir.join("ablation.tsv"), &table)?;
            fs::write(
                dir.join("ablation.json"),
                serde_json::to_string_pretty(&rows).expect("rows serialize"),
            )?;
            print!("{table}");
            Ok(EXIT_OK)
        }
        Command::BoundStudy(common) => {
            let (cfg, dir) = prepare(&common)?;
            let records = bound_study(&cfg, common.jobs.unwrap_or(1))?;
            let summary = summarize_gaps(&records);
            let mut csv = String::from("n,seed,episodic_train_error,held_out_error,gap\n");
            for r in &records {
                csv.push_str(&format!(
                    "{},{},{:?},{:?},{:?}\n",
                    r.n, r.seed, r.episodic_train_error, r.held_out_error, r.gap
                ));
            }
            fs::write(dir.join("gaps.csv"), csv)?;
            fs::write(
                dir.join("gaps.json"),
                serde_json::to_string_pretty(&(&records, &summary)).expect("records serialize"),
            )?;
            for s in &summary {
                println!(
                    "N={:<3} train error {:.4}  held-out error {:.4}  gap {:.4}",
                    s.n, s.mean_train_error, s.mean_held_out_error, s.mean_gap
                );
            }
            if let Some((a, b)) = fit_inverse_sqrt(&summary) {
                println!("fit gap = {a:.4} + {b:.4}/sqrt(N)");
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            common,
            coords,
            step,
            tolerance,
        } => {
            let (cfg, _) = prepare(&common)?;
            let worst = gradcheck(&cfg, coords, step)?;
            let mut failed = false;
            for (kind, err) in &worst {
                let ok = *err < tolerance;
                failed |= !ok;
                println!("{kind:?}: max relative error {err:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            Ok(if failed { EXIT_VERIFY } else { EXIT_OK })
        }
        Command::ExportData(common) => {
            let (cfg, dir) = prepare(&common)?;
            let exp = Experiment::build(&cfg)?;
            exp.train_set
                .subset(&exp.pool)
                .write_to(BufWriter::new(fs::File::create(dir.join("train_pool.tsv"))?))?;
            exp.test_set
                .write_to(BufWriter::new(fs::File::create(dir.join("test.tsv"))?))?;
            println!(
                "wrote {} pool and {} test samples to {}",
                exp.pool.len(),
                exp.test_set.len(),
                dir.display()
            );
            Ok(EXIT_OK)
        }
    }
}

/// Central differences on a two-sample batch at unit-scale prompts, for the
/// full loss and each asymmetric term. Returns the worst relative error per
/// loss over `coords` random coordinates of each prompt set.
pub fn gradcheck(cfg: &RunConfig, coords: usize, h: f64) -> Result<Vec<(LossKind, f64)>> {
    let encoders = DualEncoder::new(&cfg.encoder)?;
    let meta = MetaDomain::new(&cfg.meta)?;
    let domains = sample_domains(&cfg.meta, 1, mix_seed(cfg.seed, &[1]))?;
    let data = meta.generate(&domains, &[0, 1], 1, mix_seed(cfg.seed, &[8]))?;
    let classes = ClassBank::new(&encoders, (0..2).map(class_text_input).collect())?;
    let objective = Objective::new(&encoders, &classes, cfg.train.temperature)?;
    let feats: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| encoders.encode_image_unprompted(&s.patches))
        .collect::<Result<_>>()?;
    let batch: Vec<BatchItem<'_>> = data
        .samples
        .iter()
        .zip(&feats)
        .map(|(s, f)| BatchItem {
            patches: &s.patches,
            class_id: s.class_id,
            unprompted: f,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[9]));
    let (p, l) = (cfg.prompt_len(), cfg.prompt_layers());
    let (dt, di) = (cfg.encoder.text_width, cfg.encoder.image_width);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let text = draw(l * p * dt);
    let image = draw(l * p * di);
    let bank = PromptBank::from_parts(p, l, dt, di, text, image)?;
    let picks: Vec<(usize, usize)> = (0..coords)
        .flat_map(|_| {
            [
                (0, rng.random_range(0..bank.text().numel())),
                (1, rng.random_range(0..bank.image().numel())),
            ]
        })
        .collect();

    let mut out = Vec::new();
    for kind in [LossKind::Ac, LossKind::Text, LossKind::Image] {
        let analytic = objective.loss_and_grad(&bank, &batch, kind, false)?;
        let f = |params: &[Tensor]| -> Result<f64> {
            let b = PromptBank::from_parts(p, l, dt, di, params[0].data().to_vec(), params[1].data().to_vec())?;
            Ok(objective.loss(&b, &batch, kind)?.total)
        };
        let report = finite_difference_check_at(
            f,
            &[bank.text().clone(), bank.image().clone()],
            &[analytic.grad_text, analytic.grad_image],
            h,
            &picks,
        )?;
        out.push((kind, report.max_relative_error));
    }
    Ok(out)
}
