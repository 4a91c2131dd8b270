//! Experiment front end. Four subcommands: `verify` runs the invariant
//! suite and reports pass/fail per check, `figure1` exports the deep-rollout
//! decay/divergence pair, `synthetic` runs the depth-scaling study, and
//! `rollout` dumps a single trajectory. Every command is a pure function of
//! `--seed`; repeated runs write byte-identical artifacts.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad input or internal
//! error.

use std::fs;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kronspect::dynamics::rollout;
use kronspect::experiments::{
    random_connected_graph, run_figure1, run_synthetic, run_verify,
};
use kronspect::graph::aggregation_matrix;
use kronspect::{
    Activation, AggregationKind, DenseMatrix, Figure1Config, Graph, LayerSpec, MetricContext,
    ModelFamily, Rng, SyntheticConfig, Trajectory,
};

type AnyError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "kronspect",
    version,
    about = "Numerical laboratory for graph-convolution dynamics",
    arg_required_else_help = true
)]
struct Cli {
    /// Base seed; all randomness in a command derives from it.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Output path. Commands that produce several files treat it as a stem;
    /// single-artifact commands print to stdout when it is omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Trajectory serialization (`verify` always writes JSON, `synthetic`
    /// always writes both a JSON report and a CSV table).
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Kp,
    SoftmaxSkp,
    Skp,
}

impl FamilyArg {
    fn to_family(self) -> ModelFamily {
        match self {
            FamilyArg::Kp => ModelFamily::Kp,
            FamilyArg::SoftmaxSkp => ModelFamily::SoftmaxSkp,
            FamilyArg::Skp => ModelFamily::Skp,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Identity,
    Relu,
}

#[derive(Subcommand)]
enum Command {
    /// Run every invariant check and write a JSON report; exit 0 iff all
    /// pass.
    Verify {
        #[arg(long, hide = true)]
        sabotage: bool,
    },

    /// Deep ReLU rollout on one graph, exported twice: with the weights as
    /// initialized and with every weight multiplied by --scale. Writes
    /// <stem>_unscaled and <stem>_scaled files (stem defaults to "figure1").
    Figure1 {
        /// Erdős–Rényi source: node count and edge probability. Resampled
        /// until connected.
        #[arg(long, num_args = 2, value_names = ["N", "P"], default_values_t = ["50".to_string(), "0.1".to_string()])]
        er: Vec<String>,
        /// Edge-list file; must describe a connected graph.
        #[arg(long, value_name = "FILE", conflicts_with = "er")]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        layers: usize,
        /// Weight multiplier for the second run.
        #[arg(long, default_value_t = 2.0)]
        scale: f64,
        /// Feature width of the random initial state.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },

    /// Depth-scaling study: train each family at each depth on fresh random
    /// tasks, best-of-restarts per graph, mean ± std across graphs. Writes
    /// <stem>.json and <stem>.csv (stem defaults to "synthetic").
    Synthetic {
        #[arg(long, value_enum, value_delimiter = ',',
              default_values_t = [FamilyArg::Kp, FamilyArg::SoftmaxSkp, FamilyArg::Skp])]
        families: Vec<FamilyArg>,
        /// Message-passing depths to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 8])]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        graphs: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        /// Hidden width of the message-passing stack.
        #[arg(long, default_value_t = 6)]
        hidden: usize,
        #[arg(long, default_value_t = 0.003)]
        lr: f64,
        #[arg(long, default_value_t = 2000)]
        max_steps: usize,
        /// Stop after this many steps without best-loss improvement.
        #[arg(long, default_value_t = 500)]
        plateau: usize,
    },

    /// Roll a layered linear/ReLU dynamic on one graph and export the
    /// trajectory metrics.
    Rollout {
        /// Edge-list file.
        #[arg(long, value_name = "FILE", conflicts_with = "er")]
        graph: Option<PathBuf>,
        /// Erdős–Rényi source: node count and edge probability. Resampled
        /// until connected.
        #[arg(long, num_args = 2, value_names = ["N", "P"])]
        er: Option<Vec<String>>,
        #[arg(long, default_value_t = 16)]
        layers: usize,
        /// Feature width of the random N(0,1) initial state.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        /// Per-layer weight: identity | glorot | normal:STD (fresh draw per
        /// layer for the random kinds).
        #[arg(long, default_value = "identity")]
        weight: String,
        #[arg(long, value_enum, default_value_t = ActivationArg::Identity)]
        activation: ActivationArg,
        /// sym | row:EPS (row-stochastic from fresh random logits per layer,
        /// every kept entry floored at EPS).
        #[arg(long, default_value = "sym")]
        aggregation: String,
        /// Append a relative eigen-expansion residual column; requires
        /// identity weight, identity activation, sym aggregation, csv format.
        #[arg(long)]
        check_eigen: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, AnyError> {
    let Cli { seed, out, format, command } = cli;
    match command {
        Command::Verify { sabotage } => cmd_verify(seed, out, sabotage),
        Command::Figure1 { er, graph, layers, scale, dim } => {
            cmd_figure1(seed, out, format, &er, graph.as_deref(), layers, scale, dim)
        }
        Command::Synthetic {
            families,
            layers,
            graphs,
            restarts,
            hidden,
            lr,
            max_steps,
            plateau,
        } => {
            let cfg = SyntheticConfig {
                families: families.into_iter().map(FamilyArg::to_family).collect(),
                layer_counts: layers,
                graphs,
                restarts,
                hidden,
                lr,
                max_steps,
                plateau_window: plateau,
                seed,
            };
            cmd_synthetic(out, &cfg)
        }
        Command::Rollout {
            graph,
            er,
            layers,
            dim,
            weight,
            activation,
            aggregation,
            check_eigen,
        } => cmd_rollout(RolloutArgs {
            seed,
            out,
            format,
            graph,
            er,
            layers,
            dim,
            weight,
            activation,
            aggregation,
            check_eigen,
        }),
    }
}

fn cmd_verify(seed: u64, out: Option<PathBuf>, sabotage: bool) -> Result<ExitCode, AnyError> {
    let report = run_verify(seed, sabotage)?;
    write_or_print(out.as_deref(), &report.to_json_string())?;
    eprintln!("verify: {}/{} checks passed", report.passed_count(), report.checks.len());
    for check in report.checks.iter().filter(|c| !c.passed) {
        eprintln!(
            "FAILED {}: measured {:e} against {:e}",
            check.name, check.measured, check.tolerance
        );
    }
    Ok(if report.all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[allow(clippy::too_many_arguments)]
fn cmd_figure1(
    seed: u64,
    out: Option<PathBuf>,
    format: Format,
    er: &[String],
    graph: Option<&Path>,
    layers: usize,
    scale: f64,
    dim: usize,
) -> Result<ExitCode, AnyError> {
    let mut root = Rng::new(seed);
    let graph_seed = root.next_u64();
    let run_seed = root.next_u64();
    let g = match graph {
        Some(path) => {
            let g = load_graph_file(path)?;
            if !g.is_connected() {
                return Err(kronspect::Error::Disconnected.into());
            }
            g
        }
        None => {
            let (n, p) = parse_er(er)?;
            random_connected_graph(n, p, graph_seed, false)?
        }
    };
    let cfg = Figure1Config { layers, scale, width: dim, seed: run_seed };
    let (plain, scaled) = run_figure1(&g, &cfg)?;
    let stem = artifact_stem(out, "figure1");
    for (tag, t) in [("unscaled", &plain), ("scaled", &scaled)] {
        let path = suffixed_path(&stem, tag, format);
        fs::write(&path, render_trajectory(t, format))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synthetic(out: Option<PathBuf>, cfg: &SyntheticConfig) -> Result<ExitCode, AnyError> {
    if cfg.graphs == 0 || cfg.restarts == 0 {
        return Err("--graphs and --restarts must be at least 1".into());
    }
    let report = run_synthetic(cfg)?;
    let stem = artifact_stem(out, "synthetic");
    let json_path = stem.with_extension("json");
    let csv_path = stem.with_extension("csv");
    fs::write(&json_path, report.to_json_string())?;
    fs::write(&csv_path, report.table_csv())?;
    print!("{}", report.table_csv());
    eprintln!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

struct RolloutArgs {
    seed: u64,
    out: Option<PathBuf>,
    format: Format,
    graph: Option<PathBuf>,
    er: Option<Vec<String>>,
    layers: usize,
    dim: usize,
    weight: String,
    activation: ActivationArg,
    aggregation: String,
    check_eigen: bool,
}

fn cmd_rollout(args: RolloutArgs) -> Result<ExitCode, AnyError> {
    let mut root = Rng::new(args.seed);
    let graph_seed = root.next_u64();
    let mut rng = Rng::new(root.next_u64());

    let g = match (&args.graph, &args.er) {
        (Some(path), _) => load_graph_file(path)?,
        (None, Some(er)) => {
            let (n, p) = parse_er(er)?;
            random_connected_graph(n, p, graph_seed, false)?
        }
        (None, None) => return Err("provide a graph via --graph FILE or --er N P".into()),
    };

    let activation = match args.activation {
        ActivationArg::Identity => Activation::Identity,
        ActivationArg::Relu => Activation::ReLU,
    };
    if args.check_eigen
        && !(args.weight == "identity"
            && activation == Activation::Identity
            && args.aggregation == "sym"
            && args.format == Format::Csv)
    {
        return Err("--check-eigen requires --weight identity --activation identity \
                    --aggregation sym --format csv"
            .into());
    }

    let agg_spec = parse_aggregation(&args.aggregation)?;
    let weight_spec = parse_weight(&args.weight)?;
    let ctx = MetricContext::for_graph(&g)?;
    let n = g.node_count();
    let sym = aggregation_matrix(&g, &AggregationKind::SymNormalized)?;
    let entry_count = g.directed_entries().len();
    let mut layers = Vec::with_capacity(args.layers);
    for _ in 0..args.layers {
        let agg = match agg_spec {
            AggSpec::Sym => sym.clone(),
            AggSpec::Row(eps) => {
                let logits: Vec<f64> = (0..entry_count).map(|_| rng.normal()).collect();
                aggregation_matrix(&g, &AggregationKind::RowStochastic { logits, min_weight: eps })?
            }
        };
        let w = match weight_spec {
            WeightSpec::Identity => DenseMatrix::identity(args.dim),
            WeightSpec::Glorot => {
                let std = (2.0 / (args.dim + args.dim) as f64).sqrt();
                DenseMatrix::random_normal(args.dim, args.dim, 0.0, std, &mut rng)
            }
            WeightSpec::Normal(std) => {
                DenseMatrix::random_normal(args.dim, args.dim, 0.0, std, &mut rng)
            }
        };
        layers.push(LayerSpec { aggregation: agg, weight: w, activation });
    }

    let x0 = DenseMatrix::random_normal(n, args.dim, 0.0, 1.0, &mut rng);
    let t = rollout(&x0, &layers, &ctx)?;

    let body = if args.check_eigen {
        let spectral =
            ctx.spectral.as_ref().ok_or("eigen cross-check needs the symmetric spectrum")?;
        let residuals = eigen_expansion_residuals(&t, &spectral.eigenvalues);
        let mut buf = Vec::new();
        t.write_csv_with_extra(&mut buf, Some(("eigen_residual", &residuals)))?;
        String::from_utf8(buf).expect("csv is ascii")
    } else {
        render_trajectory(&t, args.format)
    };
    write_or_print(args.out.as_deref(), &body)?;
    Ok(ExitCode::SUCCESS)
}

/// Relative gap between each layer's ‖X‖_F² and the analytic eigen
/// expansion Σ_i λ_i^{2l}·m_i(0)² driven by the layer-0 masses.
fn eigen_expansion_residuals(t: &Trajectory, eigenvalues: &[f64]) -> Vec<f64> {
    let masses0 = &t.records[0].masses;
    t.records
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let predicted: f64 = eigenvalues
                .iter()
                .zip(masses0)
                .map(|(lam, m)| lam.powi(2 * l as i32) * m * m)
                .sum();
            if predicted == 0.0 {
                r.fro_norm_sq.abs()
            } else {
                (r.fro_norm_sq - predicted).abs() / predicted
            }
        })
        .collect()
}

enum WeightSpec {
    Identity,
    Glorot,
    Normal(f64),
}

fn parse_weight(spec: &str) -> Result<WeightSpec, AnyError> {
    match spec {
        "identity" => Ok(WeightSpec::Identity),
        "glorot" => Ok(WeightSpec::Glorot),
        _ => match spec.strip_prefix("normal:") {
            Some(std) => {
                let std: f64 = std
                    .parse()
                    .map_err(|_| format!("bad weight std '{std}' in --weight {spec}"))?;
                if !(std.is_finite() && std > 0.0) {
                    return Err(format!("weight std must be positive, got {std}").into());
                }
                Ok(WeightSpec::Normal(std))
            }
            None => Err(format!("unknown --weight '{spec}' (identity | glorot | normal:STD)").into()),
        },
    }
}

enum AggSpec {
    Sym,
    Row(f64),
}

fn parse_aggregation(spec: &str) -> Result<AggSpec, AnyError> {
    match spec {
        "sym" => Ok(AggSpec::Sym),
        "row" => Ok(AggSpec::Row(0.0)),
        _ => match spec.strip_prefix("row:") {
            Some(eps) => {
                let eps: f64 = eps
                    .parse()
                    .map_err(|_| format!("bad floor '{eps}' in --aggregation {spec}"))?;
                if !(eps.is_finite() && eps >= 0.0) {
                    return Err(format!("aggregation floor must be >= 0, got {eps}").into());
                }
                Ok(AggSpec::Row(eps))
            }
            None => Err(format!("unknown --aggregation '{spec}' (sym | row:EPS)").into()),
        },
    }
}

fn parse_er(tokens: &[String]) -> Result<(usize, f64), AnyError> {
    let n: usize =
        tokens[0].parse().map_err(|_| format!("bad node count '{}' in --er", tokens[0]))?;
    let p: f64 =
        tokens[1].parse().map_err(|_| format!("bad edge probability '{}' in --er", tokens[1]))?;
    if n == 0 {
        return Err("--er node count must be at least 1".into());
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("--er edge probability {p} outside [0, 1]").into());
    }
    Ok((n, p))
}

fn load_graph_file(path: &Path) -> Result<Graph, AnyError> {
    let mut reader = BufReader::new(File::open(path)?);
    Ok(Graph::load_edge_list(&mut reader)?)
}

/// `--out` is a stem for multi-file commands; a trailing .csv/.json is
/// dropped so `--out dir/run.json` and `--out dir/run` mean the same thing.
fn artifact_stem(out: Option<PathBuf>, default: &str) -> PathBuf {
    let p = out.unwrap_or_else(|| PathBuf::from(default));
    match p.extension().and_then(|e| e.to_str()) {
        Some("csv" | "json") => p.with_extension(""),
        _ => p,
    }
}

fn suffixed_path(stem: &Path, tag: &str, format: Format) -> PathBuf {
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    let mut name = stem.as_os_str().to_os_string();
    name.push(format!("_{tag}.{ext}"));
    PathBuf::from(name)
}

fn render_trajectory(t: &Trajectory, format: Format) -> String {
    match format {
        Format::Json => t.to_json_string(),
        Format::Csv => {
            let mut buf = Vec::new();
            t.write_csv(&mut buf).expect("write to Vec cannot fail");
            String::from_utf8(buf).expect("csv is ascii")
        }
    }
}

fn write_or_print(out: Option<&Path>, body: &str) -> Result<(), AnyError> {
    match out {
        Some(path) => fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}
