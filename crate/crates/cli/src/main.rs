use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eusml::commands::{self, MethodReport};
use eusml::config::PipelineConfig;
use eusml::{CliError, Result};
use eusml_core::enhance::Method;
use eusml_core::metrics::table_header;
use eusml_core::synthetic::CorpusConfig;

#[derive(Parser)]
#[command(name = "eusml", version, about = "EUS station dataset pipeline and labeling service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for per-frame work (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Use upstream artifacts even if they were made with a different configuration.
    #[arg(long)]
    force: bool,
    /// Enhancement method (default: the one in the config).
    #[arg(long, conflicts_with = "all_methods")]
    method: Option<String>,
    /// Run the stage once per enhancement method.
    #[arg(long)]
    all_methods: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Session storage directory.
    #[arg(long, env = "EUSML_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    host: Option<IpAddr>,
    /// 0 picks a free port; the bound address is printed on stdout.
    #[arg(long)]
    port: Option<u16>,
    /// Shared token required in the x-eusml-token header.
    #[arg(long, env = "EUSML_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the corpus (`data/`) and `pipeline.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    procedures: usize,
    /// Seconds per procedure.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 4.0)]
    fps: f64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample frames, drop noise frames, inpaint pointer overlays.
    Clean(StageArgs),
    /// Apply an enhancement method to the cleaned frames.
    Enhance(StageArgs),
    /// Label frames and assign procedures to train and test.
    Split(StageArgs),
    /// Train the classifier on the train split.
    Train(StageArgs),
    /// Score the classifier on the test split.
    Eval(StageArgs),
    /// Write Grad-CAM overlays for test frames.
    Gradcam(StageArgs),
    /// Run the labeling HTTP service.
    Serve(ServeArgs),
    /// Generate a synthetic corpus and a matching pipeline.json.
    Synth(SynthArgs),
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(CliError::runtime)?;
    }
    Ok(())
}

fn methods(args: &StageArgs, cfg: &PipelineConfig) -> Result<Vec<Method>> {
    if args.all_methods {
        return Ok(Method::ALL.to_vec());
    }
    match &args.method {
        Some(m) => Ok(vec![m.parse().map_err(CliError::validation)?]),
        None => Ok(vec![cfg.enhance.method]),
    }
}

fn load(args: &StageArgs) -> Result<PipelineConfig> {
    set_jobs(args.jobs)?;
    let cfg = PipelineConfig::load(&args.config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(command: &Command, args: &StageArgs) -> Result<()> {
    let cfg = load(args)?;
    let methods = methods(args, &cfg)?;
    match command {
        Command::Clean(_) => {
            commands::clean(&cfg)?;
        }
        Command::Enhance(_) => {
            for m in methods {
                commands::enhance(&cfg, m, args.force)?;
            }
        }
        Command::Split(_) => {
            for m in methods {
                commands::split(&cfg, m, args.force)?;
            }
        }
        Command::Train(_) => {
            for m in methods {
                commands::train(&cfg, m, args.force)?;
            }
        }
        Command::Eval(_) => {
            let reports: Vec<MethodReport> =
                methods.iter().map(|&m| commands::eval(&cfg, m, args.force)).collect::<Result<_>>()?;
            if args.all_methods {
                print!("{}", commands::write_table(&cfg, &reports)?);
            } else {
                println!("{}", table_header());
                for r in &reports {
                    println!("{}", r.row());
                }
            }
        }
        Command::Gradcam(_) => {
            for m in methods {
                let ex = commands::gradcam(&cfg, m, args.force)?;
                eprintln!("gradcam {m}: {} overlays", ex.len());
            }
        }
        Command::Serve(_) | Command::Synth(_) => unreachable!("handled separately"),
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    set_jobs(args.jobs)?;
    let cfg = args.config.as_deref().map(PipelineConfig::load).transpose()?;
    let defaults = cfg.map(|c| c.serve).unwrap_or_default();
    let data_dir = args.data_dir.clone().or(defaults.data_dir).ok_or_else(|| {
        CliError::Validation("no data directory: set EUSML_DATA_DIR, --data-dir or serve.data_dir".into())
    })?;
    let host: IpAddr = match args.host {
        Some(h) => h,
        None => defaults.host.parse().map_err(|e| CliError::Validation(format!("serve.host: {e}")))?,
    };
    let addr = SocketAddr::new(host, args.port.unwrap_or(defaults.port));
    let token = args.token.clone().or(defaults.token);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(CliError::runtime)?;
    runtime
        .block_on(eusml_service::serve(&data_dir, addr, token, |bound| {
            println!("listening on http://{bound}");
            std::io::stdout().flush().ok();
        }))
        .map_err(CliError::runtime)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let corpus = CorpusConfig {
        procedures: args.procedures,
        duration: args.duration,
        fps: args.fps,
        width: args.size,
        height: args.size,
        noise_rate: args.noise_rate,
        seed: args.seed,
    };
    if corpus.procedures < 2 || args.size < 32 || !(args.duration > 0.0 && args.fps > 0.0) {
        return Err(CliError::Validation("need at least 2 procedures and frames of at least 32x32".into()));
    }
    let path = commands::synth(&args.out, &corpus)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
        Command::Clean(a)
        | Command::Enhance(a)
        | Command::Split(a)
        | Command::Train(a)
        | Command::Eval(a)
        | Command::Gradcam(a) => run_stage(&cli.command, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
