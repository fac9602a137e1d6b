use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use cid_core::backend::{BackendError, ModelBackend, RemoteBackend, RemoteOptions, TableModel};
use cid_core::bias_audit::{
    builtin_groups, find_group, fraction_table, load_groups, read_tally_csv, render_fraction_table,
    render_tally_table, run_pairwise_audit, write_fraction_csv, write_tally_csv, AuditOptions, AuditTally,
    BiasLabelFile, FractionRow, NameGroup, Template,
};
use cid_core::distribution::{alpha_curve, CidParams};
use cid_core::engine::{contrast_pair, greedy_decode, DecodeError, DecodeLimits, DecodeResult, DEFAULT_MAX_NEW_TOKENS};
use cid_core::perturbation_lab::{
    aggregate_by_type, mean_curve_from_results, perturb, read_pairs_jsonl, sweep_pairs, write_curve_csv,
    write_results_jsonl, write_summary_csv, LabError, LambdaGrid, PerturbationTables, PerturbationType, PrefixMode,
    SimilarityConfig, SweepOptions, DEFAULT_TAU,
};

use crate::config::{BackendSpec, FileConfig};
use crate::{CliError, Command, Common};

const DEFAULT_AUDIT_LAMBDAS: [f64; 3] = [0.0, 10.0, 50.0];
const DEFAULT_CURVE_LAMBDAS: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 10.0];

/// Flags over config file over defaults.
struct Settings {
    flags: Common,
    file: FileConfig,
}

impl Settings {
    fn new(flags: Common) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Ok(Self { flags, file })
    }

    fn top_k(&self) -> usize {
        self.flags.top_k.or(self.file.top_k).unwrap_or(CidParams::DEFAULT_TOP_K)
    }

    fn limits(&self) -> DecodeLimits {
        DecodeLimits::new(self.flags.max_new_tokens.or(self.file.max_new_tokens).unwrap_or(DEFAULT_MAX_NEW_TOKENS))
    }

    fn seed(&self) -> u64 {
        self.flags.seed.or(self.file.seed).unwrap_or(0)
    }

    fn jobs(&self) -> Option<usize> {
        self.flags.jobs.or(self.file.jobs)
    }

    fn out(&self) -> Option<&Path> {
        self.flags.out.as_deref().or(self.file.out.as_deref())
    }

    fn backend(&self) -> Result<Box<dyn ModelBackend>, CliError> {
        let spec = BackendSpec::resolve(self.flags.backend.as_deref(), self.file.backend.as_deref())?;
        let model = self.flags.model.as_deref().or(self.file.model.as_deref());
        match spec {
            BackendSpec::Table(path) => {
                let mut table = TableModel::load(&path).map_err(backend_error)?;
                if let Some(id) = model {
                    table = table.with_model_id(id);
                }
                Ok(Box::new(table))
            }
            BackendSpec::Remote(url) => {
                let mut options = RemoteOptions::default();
                if let Some(jobs) = self.jobs() {
                    options.max_in_flight = jobs.max(1);
                }
                Ok(Box::new(RemoteBackend::connect(&url, model, options).map_err(backend_error)?))
            }
        }
    }

    /// Runs `f` on a pool bounded by `--jobs`, or the global pool.
    fn pooled<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        match self.jobs() {
            Some(0) => Err(CliError::usage("--jobs must be >= 1")),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::usage(format!("cannot start worker pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }

    /// Writes `text` to `--out` if given, otherwise to stdout.
    fn emit(&self, text: &str) -> Result<(), CliError> {
        match self.out() {
            Some(path) => write_file(path, text.as_bytes()),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn backend_error(e: BackendError) -> CliError {
    match e {
        BackendError::Config(_) | BackendError::Tokenize(_) => CliError::usage(e.to_string()),
        other => CliError::backend(other.to_string()),
    }
}

fn decode_error(e: DecodeError) -> CliError {
    match &e {
        DecodeError::InvalidJob(_) => CliError::usage(e.to_string()),
        DecodeError::Tokenize { source: BackendError::Tokenize(_), .. } => CliError::usage(e.to_string()),
        _ => CliError::backend(e.to_string()),
    }
}

fn lab_error(e: LabError) -> CliError {
    match e {
        LabError::Decode { source, .. } => decode_error(source),
        LabError::Similarity { .. } => CliError::backend(e.to_string()),
        other => CliError::usage(other.to_string()),
    }
}

fn audit_error(e: cid_core::bias_audit::AuditError) -> CliError {
    CliError::usage(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(path: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::usage(format!("cannot serialize output: {e}")))
}

pub fn run(flags: Common, command: Command) -> Result<(), CliError> {
    let settings = Settings::new(flags)?;
    match command {
        Command::Contrast { input, contrast, lambda } => cmd_contrast(&settings, &input, &contrast, lambda),
        Command::Greedy { input } => cmd_greedy(&settings, &input),
        Command::Lambdastar { pairs, grid, tau, prefix, similarity } => {
            cmd_lambdastar(&settings, &pairs, grid, tau, prefix, similarity)
        }
        Command::Audit { groups, group_a, group_b, template, lambdas, labels, fold_below } => cmd_audit(
            &settings,
            AuditArgs { groups, group_a, group_b, template, lambdas, labels, fold_below },
        ),
        Command::Render { tallies, labels, fold_below } => cmd_render(&settings, &tallies, labels, fold_below),
        Command::AlphaCurve { lambdas } => cmd_alpha_curve(&settings, lambdas),
        Command::Perturb { text, kind, tables } => cmd_perturb(&settings, &text, &kind, tables),
    }
}

fn format_result(backend: &dyn ModelBackend, heading: &str, r: &DecodeResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{heading}");
    let _ = writeln!(out, "continuation: {:?}", r.generated_text);
    let stop = match r.stop_reason {
        cid_core::engine::StopReason::Eos => "eos",
        cid_core::engine::StopReason::MaxTokens => "max_tokens",
    };
    let _ = writeln!(out, "stop: {stop}");
    let _ = writeln!(out, "{:>4} {:>6} {:<16} {:>10} {:>10} {:>10} {:>10}", "step", "token", "piece", "p", "p'", "delta", "p~");
    let eos = backend.descriptor().eos_token;
    for s in &r.trace {
        let piece = if s.chosen == eos {
            "<eos>".to_string()
        } else {
            format!("{:?}", backend.detokenize(&[s.chosen]).unwrap_or_default())
        };
        let _ = writeln!(
            out,
            "{:>4} {:>6} {:<16} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            s.step_index, s.chosen.0, piece, s.p_chosen, s.p_contrast_chosen, s.delta_chosen, s.p_tilde_chosen
        );
    }
    out
}

fn cmd_contrast(settings: &Settings, input: &str, contrast: &str, lambda: Option<f64>) -> Result<(), CliError> {
    let lambda = lambda.or(settings.file.lambda).unwrap_or(0.0);
    let params = CidParams::new(lambda, settings.top_k()).map_err(|e| CliError::usage(e.to_string()))?;
    let backend = settings.backend()?;
    let (forward, reverse) =
        contrast_pair(backend.as_ref(), input, contrast, params, settings.limits()).map_err(decode_error)?;
    let text = if settings.flags.json {
        to_json(&serde_json::json!({ "forward": forward, "reverse": reverse }))?
    } else {
        let k = params.top_k;
        format!(
            "{}\n{}",
            format_result(backend.as_ref(), &format!("[forward] CID(x; x') lambda={lambda} top_k={k}"), &forward),
            format_result(backend.as_ref(), &format!("[reverse] CID(x'; x) lambda={lambda} top_k={k}"), &reverse),
        )
    };
    settings.emit(&text)
}

fn cmd_greedy(settings: &Settings, input: &str) -> Result<(), CliError> {
    let backend = settings.backend()?;
    let result = greedy_decode(backend.as_ref(), input, settings.limits(), settings.top_k()).map_err(decode_error)?;
    let text = if settings.flags.json {
        to_json(&result)?
    } else {
        format_result(backend.as_ref(), &format!("[greedy] top_k={}", settings.top_k()), &result)
    };
    settings.emit(&text)
}

fn cmd_lambdastar(
    settings: &Settings,
    pairs_path: &Path,
    grid: Option<Vec<f64>>,
    tau: Option<f64>,
    prefix: Option<String>,
    similarity: Option<String>,
) -> Result<(), CliError> {
    let file = fs::File::open(pairs_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", pairs_path.display())))?;
    let pairs = read_pairs_jsonl(BufReader::new(file)).map_err(lab_error)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!("{} contains no pairs", pairs_path.display())));
    }
    let grid = match grid.or_else(|| settings.file.grid.clone()) {
        Some(values) => LambdaGrid::new(values).map_err(lab_error)?,
        None => LambdaGrid::default(),
    };
    let tau = tau.or(settings.file.tau).unwrap_or(DEFAULT_TAU);
    if !tau.is_finite() {
        return Err(CliError::usage(format!("invalid tau {tau}")));
    }
    let prefix = match prefix.or_else(|| settings.file.prefix.clone()).as_deref() {
        None | Some("original") => PrefixMode::Original,
        Some("own") => PrefixMode::Own,
        Some(other) => return Err(CliError::usage(format!("unknown prefix mode {other:?}; expected original or own"))),
    };
    let similarity = match similarity.or_else(|| settings.file.similarity.clone()).as_deref() {
        None | Some("token_overlap") => SimilarityConfig::TokenOverlap,
        Some(s) => match s.strip_prefix("embedding:") {
            Some(url) if !url.is_empty() => SimilarityConfig::EmbeddingService { endpoint: url.to_string() },
            _ => return Err(CliError::usage(format!("unknown similarity {s:?}; expected token_overlap or embedding:URL"))),
        },
    };
    let provider = similarity.build();
    let backend = settings.backend()?;
    let options = SweepOptions { top_k: settings.top_k(), limits: settings.limits(), prefix };
    CidParams::new(0.0, options.top_k).map_err(|e| CliError::usage(e.to_string()))?;

    let outcomes =
        settings.pooled(|| sweep_pairs(&pairs, &grid, tau, backend.as_ref(), provider.as_ref(), options))?;
    let total = outcomes.len();
    let mut results = Vec::new();
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("cid: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    if results.is_empty() {
        let e = first_error.expect("no results implies an error");
        let mut err = match e {
            LabError::Pair { source, .. } => lab_error(*source),
            other => lab_error(other),
        };
        err.message = format!("all {total} pairs failed; first: {}", err.message);
        return Err(err);
    }

    let summary = aggregate_by_type(&results);
    let curve = mean_curve_from_results(&results).map_err(lab_error)?;
    let io = |e: LabError| CliError::usage(e.to_string());
    if let Some(dir) = settings.out() {
        let dir = out_dir(dir)?;
        let mut buf = Vec::new();
        write_results_jsonl(&mut buf, &results).map_err(io)?;
        write_file(&dir.join("results.jsonl"), &buf)?;
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &summary).map_err(io)?;
        write_file(&dir.join("summary.csv"), &buf)?;
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).map_err(io)?;
        write_file(&dir.join("curve.csv"), &buf)?;
    }
    let mut buf = Vec::new();
    if settings.flags.json {
        write_results_jsonl(&mut buf, &results).map_err(io)?;
    } else {
        write_summary_csv(&mut buf, &summary).map_err(io)?;
    }
    print!("{}", String::from_utf8_lossy(&buf));

    if results.len() < total {
        return Err(CliError::partial(format!("{} of {total} pairs failed", total - results.len())));
    }
    Ok(())
}

struct AuditArgs {
    groups: Option<PathBuf>,
    group_a: Option<String>,
    group_b: Option<String>,
    template: Option<String>,
    lambdas: Option<Vec<f64>>,
    labels: Option<PathBuf>,
    fold_below: Option<usize>,
}

fn pick_groups(groups: &[NameGroup], a: Option<&str>, b: Option<&str>) -> Result<(NameGroup, NameGroup), CliError> {
    match (a, b) {
        (Some(a), Some(b)) => Ok((
            find_group(groups, a).map_err(audit_error)?.clone(),
            find_group(groups, b).map_err(audit_error)?.clone(),
        )),
        (None, None) if groups.len() == 2 => Ok((groups[0].clone(), groups[1].clone())),
        _ => {
            let labels: Vec<&str> = groups.iter().map(|g| g.label.as_str()).collect();
            Err(CliError::usage(format!(
                "choose two groups with --group-a and --group-b; available: {}",
                labels.join(", ")
            )))
        }
    }
}

fn labels_arg(flag: Option<PathBuf>, settings: &Settings) -> Result<Option<BiasLabelFile>, CliError> {
    flag.or_else(|| settings.file.labels.clone()).map(|p| BiasLabelFile::load(p).map_err(audit_error)).transpose()
}

/// The tally table, then the fraction table when labels are given.
fn render_report(
    tallies: &[AuditTally],
    labels: Option<&BiasLabelFile>,
    fold_below: Option<usize>,
) -> Result<(String, Option<Vec<FractionRow>>), CliError> {
    let mut text = render_tally_table(tallies, fold_below);
    let fractions = match labels {
        Some(labels) => {
            let rows = fraction_table(tallies, labels).map_err(audit_error)?;
            text.push('\n');
            text.push_str(&render_fraction_table(&rows));
            Some(rows)
        }
        None => None,
    };
    Ok((text, fractions))
}

fn cmd_audit(settings: &Settings, args: AuditArgs) -> Result<(), CliError> {
    let groups = match &args.groups {
        Some(path) => load_groups(path).map_err(audit_error)?,
        None => builtin_groups(),
    };
    let (a, b) = pick_groups(&groups, args.group_a.as_deref(), args.group_b.as_deref())?;
    let template = match &args.template {
        Some(t) => Template::new(t.as_str()).map_err(audit_error)?,
        None => Template::tech_interview(),
    };
    let lambdas = args.lambdas.or_else(|| settings.file.lambdas.clone()).unwrap_or(DEFAULT_AUDIT_LAMBDAS.to_vec());
    let labels = labels_arg(args.labels, settings)?;
    let fold = args.fold_below.or(settings.file.fold_below);
    let backend = settings.backend()?;
    let options = AuditOptions { top_k: settings.top_k(), limits: settings.limits() };

    let report = settings
        .pooled(|| run_pairwise_audit(&a, &b, &template, &lambdas, backend.as_ref(), options))?
        .map_err(audit_error)?;
    for s in &report.skipped {
        eprintln!("cid: skipped {} vs {} (lambda {}): {}", s.name, s.contrast_name, s.lambda, s.error);
    }
    if report.all_failed() {
        return Err(CliError::backend(format!("all {} decodes failed", report.skipped.len())));
    }
    let (text, fractions) = render_report(&report.tallies, labels.as_ref(), fold)?;

    if let Some(dir) = settings.out() {
        let dir = out_dir(dir)?;
        let mut buf = Vec::new();
        write_tally_csv(&mut buf, &report.tallies).map_err(audit_error)?;
        write_file(&dir.join("tallies.csv"), &buf)?;
        write_file(&dir.join("tables.md"), text.as_bytes())?;
        if let Some(rows) = &fractions {
            let mut buf = Vec::new();
            write_fraction_csv(&mut buf, rows).map_err(audit_error)?;
            write_file(&dir.join("fractions.csv"), &buf)?;
        }
    }
    if settings.flags.json {
        print!("{}", to_json(&serde_json::json!({ "report": report, "fractions": fractions }))?);
    } else {
        print!("{text}");
    }
    if !report.skipped.is_empty() {
        return Err(CliError::partial(format!("{} decodes skipped", report.skipped.len())));
    }
    Ok(())
}

fn cmd_render(settings: &Settings, path: &Path, labels: Option<PathBuf>, fold: Option<usize>) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let tallies = read_tally_csv(file).map_err(audit_error)?;
    let labels = labels_arg(labels, settings)?;
    let (text, _) = render_report(&tallies, labels.as_ref(), fold.or(settings.file.fold_below))?;
    settings.emit(&text)
}

fn cmd_alpha_curve(settings: &Settings, lambdas: Option<Vec<f64>>) -> Result<(), CliError> {
    let lambdas = lambdas.or_else(|| settings.file.lambdas.clone()).unwrap_or(DEFAULT_CURVE_LAMBDAS.to_vec());
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(CliError::usage(format!("lambda must be finite and >= 0, got {bad}")));
    }
    let curve = alpha_curve(&lambdas);
    let text = if settings.flags.json {
        to_json(&curve)?
    } else {
        let mut out = String::from("lambda,v,alpha\n");
        for p in &curve {
            let _ = writeln!(out, "{},{},{}", p.lambda, p.v, p.alpha);
        }
        out
    };
    settings.emit(&text)
}

fn cmd_perturb(settings: &Settings, text: &str, kind: &str, tables: Option<PathBuf>) -> Result<(), CliError> {
    let kind: PerturbationType = kind.parse().map_err(lab_error)?;
    let tables = match tables {
        Some(path) => PerturbationTables::load(path).map_err(lab_error)?,
        None => PerturbationTables::builtin(),
    };
    let pair = perturb(text, &kind, &tables, settings.seed()).map_err(lab_error)?;
    let line = serde_json::to_string(&pair).map_err(|e| CliError::usage(e.to_string()))?;
    settings.emit(&format!("{line}\n"))
}
