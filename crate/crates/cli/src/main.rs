use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hallucidet_cli::error::EXIT_CHECK;
use hallucidet_cli::spec::resolve;
use hallucidet_cli::{CliError, CliResult, Command, Runner};

#[derive(Parser)]
#[command(name = "hallucidet", version, about = "Train and evaluate IR-to-RGB translators through a frozen RGB detector")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Output root; runs land in `{out}/{run_id}`.
    #[arg(long, global = true, env = "HALLUCIDET_OUT", default_value = "runs")]
    out: PathBuf,

    /// Experiment file (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Dotted override, e.g. `--set hallucidet.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,

    #[arg(long, global = true)]
    run_id: Option<String>,

    /// Fail with exit code 4 when the command's thresholds are not met.
    #[arg(long, global = true)]
    check: bool,

    /// Print the resolved spec and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the detector on RGB; report RGB and raw-IR AP.
    Pretrain,
    /// Fine-tune the pretrained detector on IR.
    Finetune,
    /// Train the translator through the frozen detector.
    Hallucidet,
    /// Evaluate classical translations.
    Baseline {
        /// Method key, e.g. `invert+equalize`, or `all`. Repeatable.
        #[arg(long = "method", short)]
        methods: Vec<String>,
    },
    /// Train the translator on pixel reconstruction instead.
    Recon,
    /// Evaluate existing checkpoints without training.
    Eval {
        /// Translator checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detector checkpoint; defaults to the cached pretrained detector.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long = "method", short)]
        methods: Vec<String>,
    },
    /// Translator AP against the fraction of training data used.
    SweepFraction {
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
    },
    /// Translator AP across loss weightings.
    SweepLambda {
        /// `cls,reg,star` triples separated by `;`.
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// Translator AP across network sizes.
    SweepCapacity {
        #[arg(long, value_delimiter = ',')]
        presets: Vec<String>,
    },
    /// Rebuild summary tables from the stored metric rows.
    Report,
    /// Render a qualitative grid of translations and detections.
    Panel {
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated chains, e.g. `rgb,gray,invert,hallucidet`.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
    },
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_list<T: ToString>(items: &[T], quote: bool) -> String {
    let parts: Vec<String> = items
        .iter()
        .map(|i| if quote { toml_str(&i.to_string()) } else { i.to_string() })
        .collect();
    format!("[{}]", parts.join(", "))
}

fn parse_lambdas(raw: &str) -> CliResult<String> {
    let triples = raw
        .split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let vals: Vec<f64> = t
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("lambda triple {t:?}: {e}")))?;
            if vals.len() != 3 {
                return Err(CliError::Config(format!("lambda triple {t:?} needs 3 values")));
            }
            Ok(format!("[{:?}, {:?}, {:?}]", vals[0], vals[1], vals[2]))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(format!("[{}]", triples.join(", ")))
}

/// Translates the subcommand and shortcut flags into `--set` overrides,
/// applied after the explicit ones.
fn overrides(cli: &Cli) -> CliResult<(Command, Vec<String>)> {
    let mut o = cli.common.set.clone();
    let c = &cli.common;
    if !c.seeds.is_empty() {
        o.push(format!("seeds={}", toml_list(&c.seeds, false)));
    }
    if let Some(id) = &c.run_id {
        o.push(format!("run_id={}", toml_str(id)));
    }
    if c.check {
        o.push("check=true".into());
    }
    let command = match &cli.command {
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Finetune => Command::Finetune,
        Cmd::Hallucidet => Command::Hallucidet,
        Cmd::Recon => Command::Recon,
        Cmd::Report => Command::Report,
        Cmd::Baseline { methods } => {
            if !methods.is_empty() {
                o.push(format!("methods={}", toml_list(methods, true)));
            }
            Command::Baseline
        }
        Cmd::Eval { checkpoint, detector, methods } => {
            if let Some(p) = checkpoint {
                o.push(format!("checkpoint={}", toml_str(&p.to_string_lossy())));
            }
            if let Some(p) = detector {
                o.push(format!("detector_checkpoint={}", toml_str(&p.to_string_lossy())));
            }
            if !methods.is_empty() {
                o.push(format!("methods={}", toml_list(methods, true)));
            }
            Command::Eval
        }
        Cmd::SweepFraction { fractions } => {
            if !fractions.is_empty() {
                let f: Vec<String> = fractions.iter().map(|f| format!("{f:?}")).collect();
                o.push(format!("sweep.fractions=[{}]", f.join(", ")));
            }
            Command::SweepFraction
        }
        Cmd::SweepLambda { lambdas } => {
            if let Some(raw) = lambdas {
                o.push(format!("sweep.lambdas={}", parse_lambdas(raw)?));
            }
            Command::SweepLambda
        }
        Cmd::SweepCapacity { presets } => {
            if !presets.is_empty() {
                o.push(format!("sweep.presets={}", toml_list(presets, true)));
            }
            Command::SweepCapacity
        }
        Cmd::Panel { samples, rows } => {
            if let Some(n) = samples {
                o.push(format!("panel.n_samples={n}"));
            }
            if !rows.is_empty() {
                o.push(format!("panel.rows={}", toml_list(rows, true)));
            }
            Command::Panel
        }
    };
    o.push(format!("command={}", toml_str(command.as_str())));
    Ok((command, o))
}

fn run(cli: &Cli) -> CliResult<()> {
    let (_, o) = overrides(cli)?;
    let spec = resolve(cli.common.config.as_deref(), &o)?;
    if cli.common.print_config {
        print!("{}", spec.to_toml_string()?);
        return Ok(());
    }
    let outcome = Runner::new(spec, &cli.common.out)?.quiet(cli.common.quiet).run()?;
    println!("run {} ({})", outcome.run_id, outcome.run_dir.display());
    for s in &outcome.summary {
        println!(
            "{:<16} {:<24} {:<28} ap50 {:.4} +- {:.4} (n={})",
            s.experiment, s.method, s.setting, s.mean_ap50, s.std_ap50, s.n_seeds
        );
    }
    if !outcome.failures.is_empty() {
        return Err(CliError::CheckFailed(outcome.failures));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            let code = e.exit_code();
            debug_assert!(code != 0 && (code != EXIT_CHECK || matches!(e, CliError::CheckFailed(_))));
            ExitCode::from(code as u8)
        }
    }
}
