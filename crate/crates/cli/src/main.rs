//! `grp`: train and evaluate rating predictors with Gumbel score features.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grp_core::data::{synth_generate, write_ratings_csv, SynthSpec};
use grp_core::experiment::{run, sweep, DataSource, RunConfig, SweepAxis, DEFAULT_SEED};
use grp_core::GrpError;

const BUILD_ID: &str = env!("GRP_BUILD_ID");

#[derive(Parser, Debug)]
#[command(name = "grp", version, about = "Gumbel-based rating prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its report.
    Run(RunArgs),
    /// Run every setting along one axis and write a comparison table.
    Sweep {
        #[arg(long, value_parser = ["dist", "variant", "param_mode", "param-mode"])]
        axis: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        /// e.g. `table2:musical,n=50000`.
        #[arg(long)]
        synth: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// flat key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "jsonl"], requires = "data")]
    format: Option<String>,
    /// `table2:<name>` or `uniform`, with optional `,key=value` overrides.
    #[arg(long)]
    synth: Option<String>,
    #[arg(long, value_parser = ["pmf", "neumf"])]
    backbone: Option<String>,
    #[arg(long, value_parser = ["gumbel", "poisson", "normal", "exponential", "weibull", "frechet"])]
    dist: Option<String>,
    #[arg(long, value_parser = ["dynamic", "mle"])]
    param_mode: Option<String>,
    #[arg(long, value_parser = ["full", "minus-g", "minus-f", "minus-d", "backbone-only"])]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Falls back to the config file, then GRP_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    xi: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    phi: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    filters_per_scale: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long, value_parser = ["upt", "utp"])]
    stack_order: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, GrpError> {
        let mut cfg = RunConfig::default();
        if let Ok(s) = std::env::var("GRP_SEED") {
            cfg.apply("seed", &s)
                .map_err(|_| GrpError::Config(format!("GRP_SEED is not an integer: '{s}'")))?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| GrpError::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        if let Some(p) = &self.data {
            cfg.apply("data", &p.display().to_string())?;
        }
        if let Some(s) = &self.synth {
            cfg.apply("synth", s)?;
        }
        let pairs: [(&str, Option<String>); 15] = [
            ("format", self.format.clone()),
            ("backbone", self.backbone.clone()),
            ("dist", self.dist.clone()),
            ("param_mode", self.param_mode.clone()),
            ("variant", self.variant.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lr_decay", self.lr_decay.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("xi", self.xi.map(|v| v.to_string())),
            ("phi", self.phi.map(|v| v.to_string())),
            ("delta", self.delta.map(|v| v.to_string())),
            ("filters_per_scale", self.filters_per_scale.map(|v| v.to_string())),
            ("stack_order", self.stack_order.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.apply(k, &v)?;
            }
        }
        if let Some(d) = self.dim {
            cfg.backbone.dim = d;
        }
        if self.freeze_backbone {
            cfg.freeze_backbone = true;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let DataSource::File { path, .. } = &cfg.source {
            if !path.exists() {
                return Err(GrpError::Config(format!("data file {} does not exist", path.display())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), GrpError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = run(&cfg, BUILD_ID)?;
            let r = &out.report;
            println!("{} on {} (seed {})", r.meta.model, r.meta.dataset, r.meta.seed);
            match r.overall_mae {
                Some(m) => println!("test MAE {m:.4} (best epoch {})", out.best_epoch + 1),
                None => println!("test set is empty"),
            }
            println!("level  count  mae     mean_pred  rounded");
            for l in &r.levels {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<6} {:<6} {:<7} {:<10} {}",
                    l.level,
                    l.count,
                    f(l.mae),
                    f(l.mean_prediction),
                    l.rounded_count
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Sweep { axis, run: args } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = args.resolve()?;
            let table = sweep(&cfg, axis, BUILD_ID)?;
            print!("{}", table.to_csv()?);
            let failed = table.cells.iter().filter(|c| c.outcome.is_err()).count();
            if failed > 0 {
                log::warn!("{failed} sweep cell(s) failed");
            }
        }
        Command::Synth { synth, seed, out } => {
            let seed = match seed {
                Some(s) => s,
                None => match std::env::var("GRP_SEED") {
                    Ok(s) => s
                        .parse()
                        .map_err(|_| GrpError::Config(format!("GRP_SEED is not an integer: '{s}'")))?,
                    Err(_) => DEFAULT_SEED,
                },
            };
            let spec = SynthSpec::parse(&synth, seed)?;
            let records = synth_generate(&spec)?;
            write_ratings_csv(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(if matches!(e, GrpError::Config(_)) { 2 } else { 1 })
        }
    }
}
