use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use bzsl::classifier::Variant;
use bzsl::cli::{
    ablation_table, cmd_ablate, cmd_eval, cmd_metaclass_dump, cmd_model_dump, cmd_sweep, cmd_synth, cmd_tune,
    DataSource, Grid, MValue, RunConfig, SweepParam,
};
use bzsl::dataset::convert_csv;
use bzsl::metaclass::AttrNorm;
use bzsl::ppd::{Hyperparams, Sigma0Source};
use bzsl::synth::GenSpec;
use bzsl::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bzsl", version, about = "Bayesian zero-shot classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Bundle directory with features.bin, attributes.bin, labels.txt and splits.json.
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    /// Features CSV: header row, class label in the first column.
    #[arg(long, global = true)]
    features_csv: Option<PathBuf>,
    /// Attributes CSV: header row, class name in the first column.
    #[arg(long, global = true)]
    attributes_csv: Option<PathBuf>,
    /// splits.json used with the CSV inputs.
    #[arg(long, global = true)]
    splits: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::Unconstrained)]
    variant: VariantArg,
    /// PCA dimension; 0 disables. Default: 500 for the unconstrained model on wider features.
    #[arg(long, global = true)]
    pca_dim: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    kappa0: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    kappa1: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    m: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    s: Option<f64>,
    /// Number of seen classes supporting each meta-class.
    #[arg(long = "K", global = true)]
    k: Option<usize>,
    /// Inverse-Gamma shape (constrained model).
    #[arg(long, global = true, allow_negative_numbers = true)]
    a0: Option<f64>,
    /// Inverse-Gamma scale (constrained model).
    #[arg(long, global = true, allow_negative_numbers = true)]
    b0: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = AttrNormArg::None)]
    attr_norm: AttrNormArg,
    #[arg(long = "sigma0-from", global = true, value_enum, default_value_t = Sigma0Arg::Covariance)]
    sigma0_from: Sigma0Arg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (a file for `metaclass dump` and `model dump`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VariantArg {
    Unconstrained,
    Constrained,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AttrNormArg {
    None,
    L2,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Sigma0Arg {
    Covariance,
    Scatter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit on the seen training rows and evaluate the test rows.
    Eval {
        /// Score the validation protocol instead of the test split.
        #[arg(long)]
        validation: bool,
    },
    /// Grid search on the validation protocol.
    Tune(GridArgs),
    /// Vary one hyperparameter with the others fixed.
    Sweep {
        /// kappa0 or kappa1
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Full model against the V1 and V2 ablations.
    Ablate,
    /// Sample a synthetic bundle into --out.
    Synth(SynthArgs),
    /// Convert the CSV inputs into a bundle in --out.
    Import,
    /// Support lists per class (`metaclass dump`).
    Metaclass {
        #[command(subcommand)]
        what: Dump,
    },
    /// Fit and write the binary model file to --out (`model dump`).
    Model {
        #[command(subcommand)]
        what: Dump,
    },
}

#[derive(Subcommand, Debug)]
enum Dump {
    /// Write to the --out file (metaclass prints JSON when --out is absent).
    Dump,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_delimiter = ',')]
    grid_kappa0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_kappa1: Option<Vec<f64>>,
    /// Values of m: numbers, D+c or cD.
    #[arg(long, value_delimiter = ',')]
    grid_m: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    grid_s: Option<Vec<f64>>,
    #[arg(long = "grid-K", value_delimiter = ',')]
    grid_k: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    n_meta: usize,
    #[arg(long, default_value_t = 4)]
    classes_per_meta: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    attr_noise: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    val_per_meta: usize,
}

impl Global {
    fn config(&self) -> Result<RunConfig> {
        let data = match (&self.bundle, &self.features_csv, &self.attributes_csv, &self.splits) {
            (Some(b), None, None, None) => Some(DataSource::Bundle(b.clone())),
            (None, Some(f), Some(a), Some(s)) => Some(DataSource::Csv {
                features: f.clone(),
                attributes: a.clone(),
                splits: s.clone(),
            }),
            (None, None, None, None) => None,
            _ => {
                return Err(Error::Invalid(
                    "pass either --bundle or all of --features-csv, --attributes-csv and --splits".into(),
                ))
            }
        };
        let d = Hyperparams::default();
        let variant = match self.variant {
            VariantArg::Unconstrained => Variant::Unconstrained,
            VariantArg::Constrained => Variant::Constrained,
        };
        let m = self.m.unwrap_or(d.m);
        let hyperparams = Hyperparams {
            kappa0: self.kappa0.unwrap_or(d.kappa0),
            kappa1: self.kappa1.unwrap_or(d.kappa1),
            m,
            s: self.s.unwrap_or(d.s),
            k: self.k.unwrap_or(d.k),
            a0: self.a0.or((variant == Variant::Constrained).then_some(m / 2.0)),
            b0: self.b0,
        };
        Ok(RunConfig {
            data,
            variant,
            hyperparams,
            pca_dim: self.pca_dim,
            attr_norm: match self.attr_norm {
                AttrNormArg::None => AttrNorm::None,
                AttrNormArg::L2 => AttrNorm::L2,
            },
            sigma0_source: match self.sigma0_from {
                Sigma0Arg::Covariance => Sigma0Source::Covariance,
                Sigma0Arg::Scatter => Sigma0Source::Scatter,
            },
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
        })
    }
}

impl GridArgs {
    fn grid(&self) -> Result<Grid> {
        let mut g = Grid::default();
        if let Some(v) = &self.grid_kappa0 {
            g.kappa0 = v.clone();
        }
        if let Some(v) = &self.grid_kappa1 {
            g.kappa1 = v.clone();
        }
        if let Some(v) = &self.grid_m {
            g.m = v.iter().map(|s| s.parse::<MValue>()).collect::<Result<_>>()?;
        }
        if let Some(v) = &self.grid_s {
            g.s = v.clone();
        }
        if let Some(v) = &self.grid_k {
            g.k = v.clone();
        }
        Ok(g)
    }
}

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.config()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Eval { validation } => {
            let report = cmd_eval(&cfg, validation)?;
            say!("{}", report.to_table().trim_end());
        }
        Command::Tune(args) => {
            let result = cmd_tune(&cfg, &args.grid()?)?;
            let b = &result.best;
            say!(
                "best: kappa0={} kappa1={} m={} s={} K={}  ts={} tr={} H={}",
                b.kappa0,
                b.kappa1,
                b.m,
                b.s,
                b.k,
                pct(result.best_row.ts),
                pct(result.best_row.tr),
                pct(result.best_row.h)
            );
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let rows = cmd_sweep(&cfg, param, &values)?;
            say!("{:>10} {:>8} {:>8} {:>8}", "value", "ts", "tr", "H");
            for r in rows {
                say!("{:>10} {:>8} {:>8} {:>8}", r.value, pct(r.ts), pct(r.tr), pct(r.h));
            }
        }
        Command::Ablate => say!("{}", ablation_table(&cmd_ablate(&cfg)?).trim_end()),
        Command::Synth(a) => {
            let base = GenSpec::standard(cfg.seed);
            let dim = a.dim;
            let spec = GenSpec {
                n_meta: a.n_meta,
                classes_per_meta: a.classes_per_meta,
                samples_per_class: a.samples_per_class,
                dim,
                kappa0: cli.global.kappa0.unwrap_or(base.kappa0),
                kappa1: cli.global.kappa1.unwrap_or(base.kappa1),
                m: cli.global.m.unwrap_or(dim as f64 + 2.0),
                sigma0: nalgebra::DMatrix::identity(dim, dim),
                mu0: nalgebra::DVector::zeros(dim),
                attr_noise: a.attr_noise,
                test_fraction: a.test_fraction,
                val_per_meta: a.val_per_meta,
                ..base
            };
            cmd_synth(&cfg, &spec)?;
        }
        Command::Import => {
            let (
                Some(DataSource::Csv {
                    features,
                    attributes,
                    splits,
                }),
                Some(out),
            ) = (&cfg.data, &cfg.out)
            else {
                return Err(Error::Invalid(
                    "import needs --features-csv, --attributes-csv, --splits and --out".into(),
                ));
            };
            let (ds, _) = convert_csv(features, attributes, splits, out)?;
            say!("{} rows, {} classes, D = {}", ds.n_rows(), ds.n_classes(), ds.dim());
        }
        Command::Metaclass { what: Dump::Dump } => {
            let map = cmd_metaclass_dump(&cfg)?;
            if cfg.out.is_none() {
                say!("{}", serde_json::to_string_pretty(&map.to_json()).expect("json"));
            }
        }
        Command::Model { what: Dump::Dump } => {
            let model = cmd_model_dump(&cfg)?;
            say!("{} classes, D = {}", model.densities.len(), model.dim());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
