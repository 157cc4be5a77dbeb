use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use unicon::data::write_dataset;
use unicon::metrics::write_reports;
use unicon::trainer::{
    audit_run, evaluate_run, load_base, load_run, parse_config, run_cohorts, run_sequence,
    RunConfig,
};
use unicon::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};
use unicon::Error;

/// Continual adaptation of a frozen dual-encoder model.
#[derive(Debug, Parser)]
#[command(name = "unicon", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one entry, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory every artifact is written under.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Master seed all randomness derives from.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Validate everything, write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Pre-train and freeze the base model.
    Pretrain,
    /// Write the synthetic cohorts a run would use.
    GenData,
    /// Run the configured adaptation steps on a frozen base checkpoint.
    Adapt {
        /// Frozen base checkpoint; overrides `base.checkpoint`.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Recompute every route's validation metric from a run directory.
    Eval,
    /// Replay every recorded probe of a run directory.
    Audit,
    /// Finite-difference check of every op family and composed path.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Pre-train, then run every configured step in order.
    Sequence,
}

/// Failure classes distinguished by exit status.
enum Failure {
    Engine(Error),
    Audit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn exit_code(e: &Error, auditing: bool) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::TrainingFailure { .. } => 2,
        Error::AuditFailure { .. } | Error::AuditConfig(_) => 3,
        Error::Integrity(_) | Error::Format { .. } | Error::HashMismatch { .. } if auditing => 3,
        _ => 1,
    }
}

/// Text used when no `--config` is given.
fn default_text(verb: &Verb) -> &'static str {
    match verb {
        Verb::Adapt { .. } | Verb::Sequence => "[step1]\n[step2]\n[step3]\n",
        _ => "",
    }
}

fn load_config(verb: &Verb, common: &Common) -> Result<RunConfig, Error> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => default_text(verb).to_string(),
    };
    let mut cfg = parse_config(&text, &common.overrides)?;
    if let Some(o) = &common.output {
        cfg.output.dir = Some(o.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path, Error> {
    cfg.output
        .dir
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory; pass --output or set output.dir".into()))
}

fn describe(cfg: &RunConfig) -> String {
    let steps: Vec<&str> = [
        cfg.step1.as_ref().map(|_| "1:prognosis"),
        cfg.step2.as_ref().map(|_| "2:seg-ct"),
        cfg.step3.as_ref().map(|_| "3:seg-ctpet"),
    ]
    .into_iter()
    .flatten()
    .collect();
    let base = match &cfg.base.checkpoint {
        Some(p) => format!("base from {}", p.display()),
        None => format!("pre-train a {}^3 base", cfg.base.volume),
    };
    format!("{base}; steps [{}]", steps.join(", "))
}

fn run(verb: Verb, common: Common) -> Result<(), Failure> {
    let mut cfg = load_config(&verb, &common)?;
    let dry = common.dry_run;
    let seed = common.seed;
    match verb {
        Verb::Pretrain => {
            cfg.step1 = None;
            cfg.step2 = None;
            cfg.step3 = None;
            let dir = output_dir(&cfg)?;
            if dry {
                eprintln!("dry run: {}", describe(&cfg));
                return Ok(());
            }
            let out = run_sequence(&cfg, seed, Some(dir))?;
            log::info!(
                "base written to {}",
                dir.join("checkpoints/base.bin").display()
            );
            for r in &out.reports {
                log::info!("{} {} = {:.4}", r.task, r.metric, r.value);
            }
        }
        Verb::GenData => {
            let dir = output_dir(&cfg)?;
            let cohorts = run_cohorts(&cfg, seed)?;
            for c in &cohorts {
                log::info!("{}: {} cases", c.name, c.cases.len());
                if !dry {
                    write_dataset(
                        &dir.join("data").join(c.name),
                        &c.cases,
                        c.folds.as_deref(),
                        &c.params,
                        c.seed,
                    )?;
                }
            }
        }
        Verb::Adapt { base } => {
            if base.is_some() {
                cfg.base.checkpoint = base;
            }
            let Some(path) = cfg.base.checkpoint.clone() else {
                return Err(Error::Config(
                    "adapt needs a frozen base; pass --base or set base.checkpoint".into(),
                )
                .into());
            };
            let dir = output_dir(&cfg)?;
            if dry {
                load_base(&path)?;
                eprintln!("dry run: {}", describe(&cfg));
                return Ok(());
            }
            report(&run_sequence(&cfg, seed, Some(dir))?.reports);
        }
        Verb::Sequence => {
            let dir = output_dir(&cfg)?;
            if dry {
                if let Some(p) = &cfg.base.checkpoint {
                    load_base(p)?;
                }
                eprintln!("dry run: {}", describe(&cfg));
                return Ok(());
            }
            let out = run_sequence(&cfg, seed, Some(dir))?;
            report(&out.reports);
            for (route, ok) in &out.capability.adapted {
                log::info!("route {route}: {}", if *ok { "servable" } else { "absent" });
            }
        }
        Verb::Eval => {
            let dir = output_dir(&cfg)?;
            if dry {
                load_run(dir)?;
                eprintln!("dry run: run directory {} loads", dir.display());
                return Ok(());
            }
            let reports = evaluate_run(dir)?;
            report(&reports);
            let path = dir.join("eval.jsonl");
            fs::write(&path, "")
                .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            write_reports(&path, &reports)?;
        }
        Verb::Audit => {
            let dir = output_dir(&cfg)?;
            let audit = audit_run(dir)?;
            for r in &audit.routes {
                eprintln!(
                    "{:<24} recorded at step {} over {} probes: max deviation {:e} {}",
                    r.route,
                    r.recorded_step,
                    r.probes,
                    r.max_abs_deviation,
                    if r.pass { "PASS" } else { "FAIL" }
                );
            }
            if !dry {
                let path = dir.join("audit_replay.json");
                let text = serde_json::to_string_pretty(&audit).map_err(Error::from)?;
                fs::write(&path, text)
                    .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            }
            if !audit.pass {
                return Err(Failure::Audit(
                    "recorded probe outputs were not reproduced".into(),
                ));
            }
        }
        Verb::Gradcheck { seeds } => {
            if seeds < 1 {
                return Err(Error::Config("--seeds must be positive".into()).into());
            }
            if dry {
                eprintln!("dry run: gradcheck over {seeds} seeds");
                return Ok(());
            }
            let checks = gradcheck_suite(seeds)?;
            for c in &checks {
                eprintln!(
                    "{:<20} {:>9} max rel error {:.3e} {}",
                    c.family,
                    if c.composed { "composed" } else { "op" },
                    c.max_rel_error,
                    if c.pass() { "PASS" } else { "FAIL" }
                );
            }
            if let Some(dir) = &cfg.output.dir {
                fs::create_dir_all(dir)
                    .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
                let path = dir.join("gradcheck.json");
                let text = serde_json::to_string_pretty(&checks).map_err(Error::from)?;
                fs::write(&path, text)
                    .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
            }
            let failed = checks.iter().filter(|c| !c.pass()).count();
            if failed > 0 {
                return Err(Failure::Audit(format!(
                    "{failed} families exceed relative error {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn report(reports: &[unicon::metrics::EvalReport]) {
    for r in reports {
        log::info!(
            "step {} {} {} = {:.4} (n = {})",
            r.step,
            r.task,
            r.metric,
            r.value,
            r.n
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let auditing = matches!(cli.verb, Verb::Audit);
    match run(cli.verb, cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Engine(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e, auditing))
        }
        Err(Failure::Audit(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
