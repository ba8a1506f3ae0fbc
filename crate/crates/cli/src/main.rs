use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use lkt_seq::data::{load_trials, ColumnMap, Dataset, HistoryPolicy, LoadOptions, Phase};
use lkt_seq::dsl::{catalog, parse_model, ModelSpec};
use lkt_seq::estimator::{fit_model, FitOptions, FitResult, DEFAULT_RIDGE};
use lkt_seq::evaluation::{parse_filter, run_cv, CvPlan, CvReport, Grouping};
use lkt_seq::features::{build_design_matrix, start_params, DesignLayout, FeatureData};
use lkt_seq::search::SearchConfig;
use lkt_seq::simulator::{simulate, DesignConfig, GroundTruthLearner};

const VERSION: &str = env!("CARGO_PKG_VERSION");

const EXIT_INVALID: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser, Debug, Serialize)]
#[command(name = "lkt-seq", version = VERSION, about = "Fit and evaluate sequence-aware logistic knowledge tracing models")]
struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads for folds and restarts [default: available cores].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Fit a model and write its parameters as JSON.
    Fit(FitArgs),
    /// Student-stratified repeated cross-validation.
    Cv(CvArgs),
    /// Dump the design matrix of a model.
    Features(FeaturesArgs),
    /// Generate a synthetic dataset from a known learner.
    Simulate(SimulateArgs),
    /// Tabulate one or more cross-validation reports.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
struct ColumnArgs {
    #[arg(long, default_value = "Anon.Student.Id")]
    col_student: String,
    #[arg(long, default_value = "Problem.Name")]
    col_item: String,
    #[arg(long, default_value = "KC..Default.")]
    col_kc: String,
    #[arg(long, default_value = "Outcome")]
    col_outcome: String,
    #[arg(long, default_value = "CF..Time")]
    col_time: String,
    #[arg(long, default_value = "Phase")]
    col_phase: String,
    #[arg(long, default_value = "Category")]
    col_category: String,
    #[arg(long, default_value = "BlockSize")]
    col_blocksize: String,
}

impl ColumnArgs {
    fn map(&self) -> ColumnMap {
        ColumnMap {
            student: self.col_student.clone(),
            item: self.col_item.clone(),
            kc: self.col_kc.clone(),
            outcome: self.col_outcome.clone(),
            time: self.col_time.clone(),
            phase: self.col_phase.clone(),
            category: self.col_category.clone(),
            block_size: self.col_blocksize.clone(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Trial log (comma or tab delimited, with header).
    #[arg(long)]
    data: PathBuf,
    /// Formula, or a catalog name such as `AFM+recency`.
    #[arg(long)]
    model: String,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Phases whose trials never count as prior practice (comma separated).
    #[arg(long, value_delimiter = ',')]
    exclude_from_history: Vec<String>,
    /// Keep rows in file order and reject decreasing times.
    #[arg(long)]
    keep_file_order: bool,
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    /// Seed for the parameter search [env: LKT_SEQ_SEED, default 0].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, default_value_t = SearchConfig::default().restarts)]
    restarts: usize,
    /// Objective evaluations per restart.
    #[arg(long, default_value_t = SearchConfig::default().max_evals)]
    max_evals: usize,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Fold-assignment seed [default: the search seed].
    #[arg(long)]
    fold_seed: Option<u64>,
    /// Key columns of a grouped correlation, `keys` or
    /// `name=keys[;column=value...]`; repeatable. Replaces the defaults.
    #[arg(long)]
    group_by: Vec<String>,
    /// `column=value` restriction applied to every `--group-by` grouping.
    #[arg(long)]
    filter: Vec<String>,
    /// `column=value` adding an r3 grouping to the defaults.
    #[arg(long)]
    similarity_filter: Option<String>,
    /// Directory for `cv_report.json` and the group tables.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FeaturesArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fit report whose nonlinear parameters to use instead of start values.
    #[arg(long)]
    from_fit: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Delimiter::Tab)]
    delimiter: Delimiter,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Delimiter {
    Tab,
    Comma,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Tab => b'\t',
            Delimiter::Comma => b',',
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Design {
    Bird,
    Blob,
    Custom,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Design::Bird)]
    design: Design,
    /// JSON design settings layered over the preset (required for custom).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON ground-truth learner [default: AFM with recency].
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    students: Option<usize>,
    /// [env: LKT_SEQ_SEED, default 0]
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    columns: ColumnArgs,
    #[arg(long, default_value = "trials.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Format {
    Table,
    Delimited,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// `cv_report.json` files, one row each.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("LKT_SEQ_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("LKT_SEQ_SEED=`{v}` is not a nonnegative integer")),
        Err(_) => Ok(0),
    }
}

fn resolve_model(text: &str, columns: &ColumnMap) -> Result<ModelSpec> {
    // catalog formulas are written against the default column names
    let (formula, columns) = match catalog::formula(text) {
        Some(f) => (f, ColumnMap::default()),
        None => (text.to_owned(), columns.clone()),
    };
    let spec = parse_model(&formula, &columns).map_err(|e| {
        anyhow!(
            "--model: {}\n  {formula}\n  {:>width$}",
            e.message,
            "^",
            width = e.offset + 1
        )
    })?;
    spec.validate().context("--model")?;
    Ok(spec)
}

fn history_policy(phases: &[String]) -> Result<HistoryPolicy> {
    let excluded_phases = phases
        .iter()
        .map(|p| {
            p.parse::<Phase>()
                .map_err(|_| anyhow!("--exclude-from-history: unknown phase `{p}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistoryPolicy { excluded_phases })
}

struct Loaded {
    dataset: Dataset,
    spec: ModelSpec,
    columns: ColumnMap,
    policy: HistoryPolicy,
}

fn load(args: &DataArgs) -> Result<Loaded> {
    let columns = args.columns.map();
    let spec = resolve_model(&args.model, &columns)?;
    let policy = history_policy(&args.exclude_from_history)?;
    let options = LoadOptions {
        keep_file_order: args.keep_file_order,
    };
    let (dataset, report) =
        load_trials(&args.data, &columns, &options).with_context(|| format!("--data {}", args.data.display()))?;
    for d in &report.dropped {
        warn!("{}: line {}: dropped ({})", args.data.display(), d.line, d.reason);
    }
    info!(
        "{}: {} rows, {} students, {} trials kept",
        args.data.display(),
        report.rows_read,
        dataset.students.len(),
        dataset.n_trials()
    );
    Ok(Loaded {
        dataset,
        spec,
        columns,
        policy,
    })
}

fn fit_options(loaded: &Loaded, search: &SearchArgs) -> Result<FitOptions> {
    if search.ridge.is_nan() || search.ridge < 0.0 {
        bail!("--ridge must be nonnegative");
    }
    let mut options = FitOptions {
        policy: loaded.policy.clone(),
        columns: loaded.columns.clone(),
        ..FitOptions::default()
    };
    options.inner.ridge = search.ridge;
    options.search.seed = seed_or_env(search.seed)?;
    options.search.restarts = search.restarts;
    options.search.max_evals = search.max_evals;
    Ok(options)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a Cli,
    /// Resolved settings, including seeds taken from the environment.
    resolved: T,
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn write_manifest<T: Serialize>(output: &Path, cli: &Cli, resolved: T) -> Result<()> {
    write_json(
        &manifest_path(output),
        &Manifest {
            tool: "lkt-seq",
            version: VERSION,
            command: cli,
            resolved,
        },
    )
}

fn cmd_fit(cli: &Cli, args: &FitArgs) -> Result<u8> {
    let loaded = load(&args.data)?;
    let options = fit_options(&loaded, &args.search)?;
    let model = fit_model(&loaded.spec, &loaded.dataset, &options).context("fit failed")?;
    write_json(&args.out, &model.result)?;
    write_manifest(&args.out, cli, &options)?;
    let r = &model.result;
    info!(
        "log-likelihood {:.4} (null {:.4}), {} outer evaluations",
        r.log_likelihood, r.null_log_likelihood, r.outer_evals
    );
    if !r.converged {
        warn!("fit did not converge; results written to {}", args.out.display());
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn groupings(args: &CvArgs) -> Result<Vec<Grouping>> {
    if args.group_by.is_empty() {
        if !args.filter.is_empty() {
            bail!("--filter applies to --group-by groupings; none given");
        }
        let sim = args
            .similarity_filter
            .as_deref()
            .map(|f| parse_filter(f).context("--similarity-filter"))
            .transpose()?;
        return Ok(Grouping::defaults(sim.as_ref().map(|(c, v)| (c.as_str(), v.as_str()))));
    }
    let filters = args
        .filter
        .iter()
        .map(|f| parse_filter(f).context("--filter"))
        .collect::<Result<Vec<_>>>()?;
    args.group_by
        .iter()
        .enumerate()
        .map(|(k, text)| {
            let mut g = if text.contains('=') {
                Grouping::parse(text).context("--group-by")?
            } else {
                Grouping {
                    name: format!("g{}", k + 1),
                    filter: Vec::new(),
                    key: text
                        .split(',')
                        .map(|s| s.trim().to_owned())
                        .filter(|s| !s.is_empty())
                        .collect(),
                }
            };
            if g.key.is_empty() {
                bail!("--group-by `{text}` names no columns");
            }
            g.filter.extend(filters.iter().cloned());
            Ok(g)
        })
        .collect()
}

fn write_group_tables(dir: &Path, report: &CvReport) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (name, grouped) in &report.group_tables {
        let grouping = report.groupings.iter().find(|g| &g.name == name);
        let path = dir.join(format!("groups_{name}.tsv"));
        let mut w = create(&path)?;
        let mut header: Vec<String> = grouping.map(|g| g.key.clone()).unwrap_or_default();
        header.extend(["n", "mean_prediction", "mean_observed"].map(String::from));
        writeln!(w, "{}", header.join("\t"))?;
        for row in &grouped.table {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                row.key.join("\t"),
                row.n,
                row.mean_prediction,
                row.mean_observed
            )?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

fn cmd_cv(cli: &Cli, args: &CvArgs) -> Result<u8> {
    let loaded = load(&args.data)?;
    let options = fit_options(&loaded, &args.search)?;
    let plan = CvPlan {
        n_folds: args.folds,
        n_repeats: args.repeats,
        seed: match args.fold_seed {
            Some(s) => s,
            None => options.search.seed,
        },
    };
    let groupings = groupings(args)?;
    let report = run_cv(&loaded.spec, &loaded.dataset, &plan, &groupings, &options).context("cross-validation")?;
    let out = args.out_dir.join("cv_report.json");
    write_json(&out, &report)?;
    write_group_tables(&args.out_dir, &report)?;
    write_manifest(&out, cli, (&options, &plan))?;
    if report.failed_folds > 0 {
        warn!("{} of {} folds failed to fit", report.failed_folds, report.folds.len());
    }
    if !report.all_converged() {
        warn!("some folds did not converge; report written to {}", out.display());
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_features(cli: &Cli, args: &FeaturesArgs) -> Result<u8> {
    let loaded = load(&args.data)?;
    let mut params = start_params(&loaded.spec);
    if let Some(path) = &args.from_fit {
        let text = fs::read_to_string(path).with_context(|| format!("--from-fit {}", path.display()))?;
        let fit: FitResult =
            serde_json::from_str(&text).with_context(|| format!("--from-fit {}: not a fit report", path.display()))?;
        for (k, term) in loaded.spec.terms.iter().enumerate() {
            let Some(values) = fit.nl_params.get(&term.label(&loaded.columns)) else {
                continue;
            };
            for (j, p) in term.feature.params().iter().enumerate() {
                if let Some(&v) = values.get(p.name) {
                    params[k][j] = v;
                }
            }
        }
    }
    let layout = DesignLayout::new(&loaded.spec, &loaded.dataset, &loaded.columns);
    let data = FeatureData::new(&loaded.dataset, &loaded.spec, loaded.policy.clone());
    let design = build_design_matrix(&loaded.spec, &data, &layout, &params);
    match &args.out {
        Some(path) => {
            design
                .write_delimited(create(path)?, args.delimiter.byte())
                .with_context(|| format!("--out {}", path.display()))?;
            write_manifest(path, cli, &params)?;
        }
        None => design.write_delimited(io::stdout().lock(), args.delimiter.byte())?,
    }
    Ok(0)
}

fn overlay(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                overlay(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_json(path: &Path, flag: &str) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("{flag} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{flag} {}: invalid JSON", path.display()))
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<u8> {
    let preset = match args.design {
        Design::Bird | Design::Custom => DesignConfig::bird(),
        Design::Blob => DesignConfig::blob(),
    };
    let mut config = serde_json::to_value(&preset)?;
    match (&args.config, args.design) {
        (Some(path), _) => overlay(&mut config, read_json(path, "--config")?),
        (None, Design::Custom) => bail!("--design custom requires --config"),
        (None, _) => {}
    }
    let mut config: DesignConfig = serde_json::from_value(config).context("--config: not a design configuration")?;
    if let Some(n) = args.students {
        config.n_students = n;
    }
    config.seed = seed_or_env(args.seed)?;
    config.validate().context("design configuration")?;

    let truth = match &args.truth {
        Some(path) => serde_json::from_value(read_json(path, "--truth")?)
            .with_context(|| format!("--truth {}: not a learner description", path.display()))?,
        None => GroundTruthLearner::afm_recency(&config),
    };
    let columns = args.columns.map();
    let dataset = simulate(&config, &truth, &columns, &HistoryPolicy::default()).context("simulation")?;
    let mut w = create(&args.out)?;
    dataset
        .write_csv(&mut w, &columns)
        .with_context(|| format!("--out {}", args.out.display()))?;
    w.flush()?;
    write_manifest(&args.out, cli, (&config, &truth))?;
    info!("{} trials for {} students", dataset.n_trials(), dataset.students.len());
    Ok(0)
}

const UNDEFINED: &str = "NA";

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<u8> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let report: CvReport = serde_json::from_str(&text)
            .with_context(|| format!("{}: not a cross-validation report", path.display()))?;
        reports.push(report);
    }
    let mut corr_names: Vec<String> = Vec::new();
    for r in &reports {
        for name in r.correlations.keys() {
            if !corr_names.contains(name) {
                corr_names.push(name.clone());
            }
        }
    }
    let mut header = vec!["model".to_owned(), "R2".into(), "AUC".into(), "RMSE".into()];
    header.extend(corr_names.iter().cloned());
    let fmt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_owned(), |v| format!("{v:.4}"));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.model_name.clone().unwrap_or_else(|| r.formula.clone()),
                fmt(r.r2_mcfadden.mean),
                fmt(r.auc.mean),
                fmt(r.rmse.mean),
            ];
            row.extend(
                corr_names
                    .iter()
                    .map(|n| fmt(r.correlations.get(n).and_then(|s| s.mean))),
            );
            row
        })
        .collect();

    let mut text = String::new();
    match args.format {
        Format::Delimited => {
            for row in std::iter::once(&header).chain(&rows) {
                text.push_str(&row.join("\t"));
                text.push('\n');
            }
        }
        Format::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    std::iter::once(&header)
                        .chain(&rows)
                        .map(|r| r[c].len())
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |row: &[String]| {
                row.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            text.push_str(&line(&header));
            text.push('\n');
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
            for row in &rows {
                text.push_str(&line(row));
                text.push('\n');
            }
        }
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
            write_manifest(path, cli, ())?;
        }
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("--jobs")?;
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Cv(a) => cmd_cv(cli, a),
        Command::Features(a) => cmd_features(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
