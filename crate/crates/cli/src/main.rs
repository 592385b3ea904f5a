//! `mdfa`: audit a classifier's outcomes for multi-differential fairness.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mdfa_core::audit::{
    audit_external_predictions, bias_tsv, compare_weight_schemes, repeated_audit,
    synthetic_true_gamma, trace_tsv, AuditMode,
};
use mdfa_core::data::{generate_synthetic, load_csv, write_csv, CsvSchema, SyntheticSpec};
use mdfa_core::metrics::{disparate_treatment, outcome_rate_ratio, subgroup_profile};
use mdfa_core::rebalance::WeightScheme;
use mdfa_core::{AuditConfig, Bandwidth, GridPoint, MdfaError, Sign, WeightVector};

#[derive(Parser, Debug)]
#[command(name = "mdfa", version, about = "Audit a classifier for multi-differential fairness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the two-feature synthetic population with a planted violation
    Synth(SynthArgs),
    /// One-shot unfairness certificate on repeated 70/30 splits
    Certify(AuditArgs),
    /// Worst-violation search on repeated 70/30 splits
    Worst(AuditArgs),
    /// Bias of uniform, importance and matched weights on synthetic data
    CompareWeights(CompareArgs),
    /// Feature and outcome profile of a subgroup selected by COL=VALUE
    Profile(ProfileArgs),
    /// Worst-violation search on an external prediction column
    AuditPredictions(AuditArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    /// Uniform weights
    Uw,
    /// Importance weights from a fitted propensity
    Is,
    /// Kernel-mean-matching weights
    Mmd,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Input CSV with a header row
    #[arg(long)]
    input: PathBuf,
    /// Schema file (key=value lines)
    #[arg(long)]
    schema: PathBuf,
    /// Master seed for splits, cross-validation and feature maps
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of 70/30 train/test splits
    #[arg(long, default_value_t = 10)]
    splits: usize,
    /// Smallest subgroup mass the worst-violation search may report
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Weight escalation per iteration of the worst-violation search
    #[arg(long, default_value_t = 0.05)]
    xi: f64,
    /// Fixed regularization; skips cross-validation of lambda
    #[arg(long)]
    lambda: Option<f64>,
    /// Fixed kernel bandwidth: a number, `median` or `<k>xmedian`; skips cross-validation of the bandwidth
    #[arg(long)]
    bandwidth: Option<Bandwidth>,
    /// Rebalancing scheme
    #[arg(long, value_enum, default_value = "mmd")]
    scheme: SchemeArg,
    /// Audited outcome value, +1 or -1
    #[arg(long, default_value = "+1", allow_hyphen_values = true)]
    target_y: Sign,
    /// Sensitive value whose treatment is audited, +1 or -1
    #[arg(long, default_value = "+1", allow_hyphen_values = true)]
    sensitive_value: Sign,
    /// Random feature dimension
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Iteration cap of the worst-violation search
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of samples
    #[arg(long)]
    m: usize,
    /// Imbalance factor
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mu: f64,
    /// Violation strength in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    nu: f64,
    /// Standard deviation of the label noise
    #[arg(long, default_value_t = 0.2)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; `<stem>.truth.json` and `<stem>.schema` are written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Comma-separated imbalance factors
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.2,-0.1,0,0.1,0.2")]
    mu: Vec<f64>,
    /// Violation strength in [0, 1)
    #[arg(long, default_value_t = 0.8646647167633873)]
    nu: f64,
    /// Samples per synthetic dataset
    #[arg(long, default_value_t = 5000)]
    m: usize,
    /// Synthetic datasets per imbalance factor
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Regularization of the certifier
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// Kernel bandwidth: a number, `median` or `<k>xmedian`
    #[arg(long, default_value = "median")]
    bandwidth: Bandwidth,
    /// Random feature dimension
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Output file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum, default_value = "tsv")]
    format: Format,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Subgroup selector: a feature column and the value it must equal
    #[arg(long)]
    subgroup: String,
    /// Sensitive value used for the rate ratios, +1 or -1
    #[arg(long, default_value = "+1", allow_hyphen_values = true)]
    sensitive_value: Sign,
    #[command(flatten)]
    output: OutputArgs,
}

/// Errors tagged with the exit code they map to.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<MdfaError> for Failure {
    fn from(e: MdfaError) -> Self {
        match e {
            MdfaError::InvalidArgument(_) => Failure::Usage(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn run_synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        m: a.m,
        mu: a.mu,
        nu: a.nu,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    spec.validate()?;
    let data = generate_synthetic(&spec)?;
    let mut csv = Vec::new();
    write_csv(&data.dataset, &mut csv)?;
    let truth = json!({
        "spec": spec,
        "ground_truth": data.ground_truth,
        "true_gamma": synthetic_true_gamma(&spec, &data.ground_truth.region)?,
        "region_count": data.in_region.iter().filter(|v| **v).count(),
    });
    let schema = CsvSchema::for_export(&data.dataset).to_config();
    write_atomic(&a.out, &csv)?;
    write_atomic(&sidecar(&a.out, ".truth.json"), format!("{:#}\n", truth).as_bytes())?;
    write_atomic(&sidecar(&a.out, ".schema"), schema.as_bytes())?;
    Ok(())
}

fn audit_config(a: &AuditArgs) -> Result<AuditConfig, Failure> {
    let mut config = AuditConfig {
        feature_map_dim: a.dim,
        xi: a.xi,
        alpha_floor: a.alpha,
        max_iterations: a.max_iterations,
        seed: a.seed,
        ..AuditConfig::default()
    };
    if a.lambda.is_some() || a.bandwidth.is_some() {
        let point = GridPoint {
            lambda_reg: a.lambda.unwrap_or(config.lambda_reg),
            bandwidth: a.bandwidth.unwrap_or(config.kernel_bandwidth),
        };
        config.lambda_reg = point.lambda_reg;
        config.kernel_bandwidth = point.bandwidth;
        config.cv_grid = vec![point];
    }
    if a.dim == 0 || a.dim % 2 != 0 {
        return Err(usage("--dim must be a positive even number"));
    }
    if a.splits == 0 {
        return Err(usage("--splits must be at least 1"));
    }
    config.validate()?;
    Ok(config)
}

fn scheme_of(s: SchemeArg) -> WeightScheme {
    match s {
        SchemeArg::Uw => WeightScheme::uniform(),
        SchemeArg::Is => WeightScheme::importance_estimated(),
        SchemeArg::Mmd => WeightScheme::mmd(),
    }
}

fn load(input: &Path, schema: &Path) -> Result<mdfa_core::AuditDataset, Failure> {
    let schema = CsvSchema::from_file(schema)
        .with_context(|| format!("reading schema {}", schema.display()))?;
    Ok(load_csv(input, &schema).with_context(|| format!("loading {}", input.display()))?)
}

fn run_audit(a: &AuditArgs, mode: AuditMode, external: bool) -> Result<(), Failure> {
    let config = audit_config(a)?;
    let dataset = load(&a.input, &a.schema)?;
    let scheme = scheme_of(a.scheme);
    let result = if external {
        audit_external_predictions(&dataset, a.splits, &config, a.target_y, a.sensitive_value, &scheme)?
    } else {
        repeated_audit(&dataset, a.splits, &config, a.target_y, a.sensitive_value, &scheme, mode)?
    };
    let text = match (a.output.format, mode) {
        (Format::Json, _) => result.to_json()?,
        (Format::Tsv, AuditMode::Wva) => trace_tsv(result.trace.as_deref().unwrap_or(&[])),
        (Format::Tsv, AuditMode::Certify) => result.to_tsv(),
    };
    emit(&a.output.out, &text)?;
    Ok(())
}

fn run_compare(a: &CompareArgs) -> Result<(), Failure> {
    if a.dim == 0 || a.dim % 2 != 0 {
        return Err(usage("--dim must be a positive even number"));
    }
    let base = SyntheticSpec::new(a.m, 0.0, a.nu, a.seed);
    base.validate()?;
    let config = AuditConfig {
        feature_map_dim: a.dim,
        lambda_reg: a.lambda,
        kernel_bandwidth: a.bandwidth,
        seed: a.seed,
        ..AuditConfig::default()
    };
    let rows = compare_weight_schemes(&a.mu, &base, a.splits, &config)?;
    let text = match a.format {
        Format::Tsv => bias_tsv(&rows),
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?),
    };
    emit(&a.out, &text)?;
    Ok(())
}

fn run_profile(a: &ProfileArgs) -> Result<(), Failure> {
    let (col, value) = a
        .subgroup
        .split_once('=')
        .ok_or_else(|| usage("--subgroup must look like COL=VALUE"))?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| usage(format!("--subgroup value `{value}` is not a number")))?;
    let dataset = load(&a.input, &a.schema)?;
    let j = dataset
        .feature_names()
        .iter()
        .position(|n| n == col.trim())
        .ok_or_else(|| Failure::Data(MdfaError::MissingColumn(col.trim().to_string()).into()))?;
    let members: Vec<bool> = dataset.samples().iter().map(|s| s.x[j] == value).collect();
    if !members.iter().any(|m| *m) {
        return Err(Failure::Data(anyhow!("no sample has {} = {value}", col.trim())));
    }
    let uniform = WeightVector::uniform(dataset.len());
    let profile = subgroup_profile(&dataset, &members)?;
    let everyone = vec![true; dataset.len()];
    let s = a.sensitive_value;
    let dt = outcome_rate_ratio(&dataset, &uniform, &members, s, Sign::Pos).ok();
    let di = disparate_treatment(&dataset, &uniform, &everyone, s)?;
    let size = members.iter().filter(|m| **m).count();
    let text = match a.output.format {
        Format::Json => format!(
            "{:#}\n",
            json!({
                "subgroup": a.subgroup,
                "size": size,
                "sensitive_value": s,
                "dt_g": dt,
                "di": di,
                "profile": profile,
            })
        ),
        Format::Tsv => {
            let mut out = String::from("group\tsensitive\tcount\tfeature\tmean\tstd\n");
            for (label, split) in [("subgroup", &profile.subgroup), ("population", &profile.population)] {
                for (sv, g) in [("+1", &split.positive), ("-1", &split.negative)] {
                    if let Some(g) = g {
                        let names = profile.feature_names.iter().map(String::as_str).chain(["outcome"]);
                        for (name, m) in names.zip(g.features.iter().chain([&g.outcome])) {
                            out.push_str(&format!("{label}\t{sv}\t{}\t{name}\t{}\t{}\n", g.count, m.mean, m.std));
                        }
                    }
                }
            }
            out
        }
    };
    emit(&a.output.out, &text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Certify(a) => run_audit(a, AuditMode::Certify, false),
        Command::Worst(a) => run_audit(a, AuditMode::Wva, false),
        Command::CompareWeights(a) => run_compare(a),
        Command::Profile(a) => run_profile(a),
        Command::AuditPredictions(a) => run_audit(a, AuditMode::Wva, true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sidecar_paths() {
        assert_eq!(sidecar(Path::new("out/d.csv"), ".truth.json"), PathBuf::from("out/d.truth.json"));
    }

    #[test]
    fn negative_targets_parse() {
        let cli = Cli::try_parse_from([
            "mdfa", "certify", "--input", "a.csv", "--schema", "s", "--target-y", "-1", "--sensitive-value", "-1",
        ])
        .unwrap();
        match cli.command {
            Command::Certify(a) => {
                assert_eq!(a.target_y, Sign::Neg);
                assert_eq!(a.sensitive_value, Sign::Neg);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!(Cli::try_parse_from(["mdfa", "synth", "--m", "100", "--out", "x", "--bogus"]).is_err());
    }
}
