//! The subcommands. Each returns a small report for the caller to print and
//! writes its files only after all work has finished.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lpsr_core::calibration::{calibrate, collect_deltas, Calibration};
use lpsr_core::engine::{run_tasks, EngineConfig, GenerationTrace, Mode, TRACE_SCHEMA_VERSION};
use lpsr_core::eval::{
    bootstrap_ci, format_p, grid_search, group_by_tag, layer_sweep, mcnemar, rollback_stats, summarize,
    MatchedPairs, McNemar, RunSummary,
};
use lpsr_core::numerics::cosine;
use lpsr_core::steering::format::{read_basis, write_basis};
use lpsr_core::steering::{build_basis, BasisConfig, SteeringBasis};
use lpsr_core::LpsrError;
use serde::Serialize;

use crate::config::{RunConfig, Stream};
use crate::workload::Workload;

pub const SUMMARY_HEADER: [&str; 7] = [
    "mode",
    "problems",
    "correct",
    "accuracy",
    "mean_token_cost",
    "rollback_rate",
    "mean_rollbacks",
];

fn summary_fields(s: &RunSummary) -> Vec<String> {
    vec![
        s.problems.to_string(),
        s.correct.to_string(),
        s.accuracy.to_string(),
        s.mean_token_cost.to_string(),
        s.rollback_rate.to_string(),
        s.mean_rollbacks.to_string(),
    ]
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace file, rejecting other schema versions.
pub fn read_traces(path: &Path) -> Result<Vec<GenerationTrace>> {
    let file = File::open(path).with_context(|| format!("opening traces {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(TRACE_SCHEMA_VERSION as u64) {
            bail!(
                "{}:{}: trace schema version {:?}, expected {TRACE_SCHEMA_VERSION}",
                path.display(),
                i + 1,
                version
            );
        }
        let trace: GenerationTrace = serde_json::from_value(value)
            .with_context(|| format!("{}:{}: malformed trace", path.display(), i + 1))?;
        out.push(trace);
    }
    Ok(out)
}

pub fn load_basis(path: &Path) -> Result<SteeringBasis> {
    if !path.exists() {
        return Err(LpsrError::Config(format!("basis file {} not found", path.display())).into());
    }
    let file = File::open(path).with_context(|| format!("opening basis {}", path.display()))?;
    let basis = read_basis(BufReader::new(file))?.with_context(|| format!("in basis file {}", path.display()))?;
    Ok(basis)
}

fn save_basis(basis: &SteeringBasis, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    write_basis(basis, &mut w)?;
    w.flush()?;
    Ok(())
}

fn calibration_set(cfg: &RunConfig) -> Result<Workload> {
    let set = cfg
        .calibration
        .as_ref()
        .ok_or_else(|| LpsrError::Config("config has no calibration problem set".into()))?;
    Workload::build(cfg, set, Stream::Calibration)
}

fn run_calibration(cfg: &RunConfig, work: &Workload, engine: &EngineConfig) -> Result<Calibration> {
    let basis_cfg = cfg.basis_config();
    Ok(work.with_tasks(|tasks| calibrate(tasks, engine, &basis_cfg))??)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateReport {
    pub path: PathBuf,
    pub problems: usize,
    pub wrong: usize,
    pub deltas: usize,
    pub basis_count: usize,
    pub inertia: f64,
}

/// Decode the calibration set, extract deltas and write the basis file.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrateReport> {
    let work = calibration_set(cfg)?;
    let cal = run_calibration(cfg, &work, &cfg.engine)?;
    let path = cfg.basis_file();
    save_basis(&cal.build.basis, &path)?;
    Ok(CalibrateReport {
        path,
        problems: work.len(),
        wrong: cal.wrong,
        deltas: cal.deltas.len(),
        basis_count: cal.build.basis.count(),
        inertia: cal.build.inertia,
    })
}

fn needs_basis(mode: Mode) -> bool {
    matches!(mode, Mode::Lpsr | Mode::StaticSteer)
}

fn run_workload(work: &Workload, engine: &EngineConfig, basis: Option<&SteeringBasis>) -> Result<Vec<GenerationTrace>> {
    Ok(work.with_tasks(|tasks| run_tasks(tasks, engine, basis, None))??)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub traces: PathBuf,
    pub summary_csv: PathBuf,
    pub summary: RunSummary,
}

/// Decode the problem set in the configured mode.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    let basis = if needs_basis(cfg.engine.mode) {
        Some(load_basis(&cfg.basis_file())?)
    } else {
        None
    };
    let work = Workload::build(cfg, &cfg.problems, Stream::Problems)?;
    let traces = run_workload(&work, &cfg.engine, basis.as_ref())?;
    let summary = summarize(&traces)?;
    let traces_path = cfg.output_dir.join("traces.jsonl");
    let summary_csv = cfg.output_dir.join("summary.csv");
    write_jsonl(&traces_path, &traces)?;
    let mut row = vec![cfg.engine.mode.as_str().to_string()];
    row.extend(summary_fields(&summary));
    write_csv(&summary_csv, &SUMMARY_HEADER, &[row])?;
    Ok(RunReport {
        traces: traces_path,
        summary_csv,
        summary,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub output_dir: PathBuf,
    /// Metadata tag used for stratification.
    pub tag: String,
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("lpsr-out"),
            tag: "difficulty".to_string(),
            resamples: 10_000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub label: String,
    pub summary: RunSummary,
    pub ci: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: MatchedPairs,
    /// `None` when there are no discordant pairs.
    pub mcnemar: Option<McNemar>,
    pub methods: [MethodReport; 2],
    pub strata: Vec<(String, String, RunSummary)>,
    pub files: Vec<PathBuf>,
}

impl EvalReport {
    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let p = &self.pairs;
        s.push_str(&format!(
            "matched pairs: both correct {}, a only {}, b only {}, both wrong {} (n = {})\n",
            p.both_correct,
            p.a_only,
            p.b_only,
            p.both_wrong,
            p.total()
        ));
        match &self.mcnemar {
            Some(m) => s.push_str(&format!("McNemar chi2 {:.2}, p {}\n", m.chi2, format_p(m.p))),
            None => s.push_str("McNemar undefined (no discordant pairs)\n"),
        }
        s.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>9} {:>19}\n",
            "method", "problems", "correct", "accuracy", "bootstrap CI"
        ));
        for m in &self.methods {
            s.push_str(&format!(
                "{:<10} {:>8} {:>8} {:>9.3} {:>19}\n",
                m.label,
                m.summary.problems,
                m.summary.correct,
                m.summary.accuracy,
                format!("[{:.3}, {:.3}]", m.ci.0, m.ci.1)
            ));
        }
        for (method, value, sum) in &self.strata {
            s.push_str(&format!(
                "  {method} {value}: {}/{} = {:.3}\n",
                sum.correct, sum.problems, sum.accuracy
            ));
        }
        s
    }
}

fn outcomes(traces: &[GenerationTrace], path: &Path) -> Result<Vec<bool>> {
    traces
        .iter()
        .map(|t| {
            t.correct
                .with_context(|| format!("{}: trace {} has no gold answer", path.display(), t.problem_id))
        })
        .collect()
}

fn by_id(traces: Vec<GenerationTrace>, path: &Path) -> Result<BTreeMap<String, GenerationTrace>> {
    let mut map = BTreeMap::new();
    for t in traces {
        let id = t.problem_id.clone();
        if map.insert(id.clone(), t).is_some() {
            bail!("{}: duplicate problem id {id}", path.display());
        }
    }
    Ok(map)
}

/// Compare two trace files problem by problem.
pub fn cmd_eval(a: &Path, b: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ta = by_id(read_traces(a)?, a)?;
    let tb = by_id(read_traces(b)?, b)?;
    ensure!(!ta.is_empty(), "{} holds no traces", a.display());
    let ids_a: BTreeSet<&String> = ta.keys().collect();
    let ids_b: BTreeSet<&String> = tb.keys().collect();
    if ids_a != ids_b {
        let missing: Vec<&&String> = ids_a.symmetric_difference(&ids_b).take(5).collect();
        bail!(
            "problem ids differ between {} and {} (for example {missing:?}); matched pairs need identical sets",
            a.display(),
            b.display()
        );
    }
    let va: Vec<GenerationTrace> = ta.into_values().collect();
    let vb: Vec<GenerationTrace> = tb.into_values().collect();
    let oa = outcomes(&va, a)?;
    let ob = outcomes(&vb, b)?;
    let pairs = MatchedPairs::from_outcomes(oa.iter().copied().zip(ob.iter().copied()));
    let mcnemar = match mcnemar(pairs.a_only, pairs.b_only) {
        Ok(m) => Some(m),
        Err(LpsrError::Undefined(_)) => None,
        Err(e) => return Err(e.into()),
    };

    let mut methods = Vec::new();
    let mut strata = Vec::new();
    let mut rollback_rows = Vec::new();
    for (label, traces, outs, seed) in [("a", &va, &oa, opts.seed), ("b", &vb, &ob, opts.seed ^ 1)] {
        methods.push(MethodReport {
            label: label.to_string(),
            summary: summarize(traces)?,
            ci: bootstrap_ci(outs, opts.resamples, opts.confidence, seed)?,
        });
        for (value, sum) in group_by_tag(traces, &opts.tag)? {
            strata.push((label.to_string(), value, sum));
        }
        let rs = rollback_stats(traces)?;
        for bucket in &rs.buckets {
            rollback_rows.push(vec![
                label.to_string(),
                rs.events.to_string(),
                opt(rs.mean_fraction),
                opt(rs.median_fraction),
                bucket.rollbacks.clone(),
                bucket.problems.to_string(),
                bucket.correct.to_string(),
                opt(bucket.accuracy),
            ]);
        }
    }

    let dir = &opts.output_dir;
    let pairs_csv = dir.join("eval_pairs.csv");
    let (chi2, p) = match &mcnemar {
        Some(m) => (m.chi2.to_string(), format_p(m.p)),
        None => ("undefined".to_string(), "undefined".to_string()),
    };
    write_csv(
        &pairs_csv,
        &["both_correct", "a_only", "b_only", "both_wrong", "mcnemar_chi2", "p_value"],
        &[vec![
            pairs.both_correct.to_string(),
            pairs.a_only.to_string(),
            pairs.b_only.to_string(),
            pairs.both_wrong.to_string(),
            chi2,
            p,
        ]],
    )?;
    let methods_csv = dir.join("eval_methods.csv");
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|m| {
            let mut r = vec![m.label.clone()];
            r.extend(summary_fields(&m.summary));
            r.push(m.ci.0.to_string());
            r.push(m.ci.1.to_string());
            r
        })
        .collect();
    let mut header = vec!["method"];
    header.extend(&SUMMARY_HEADER[1..]);
    header.extend(["ci_low", "ci_high"]);
    write_csv(&methods_csv, &header, &rows)?;
    let strata_csv = dir.join("eval_strata.csv");
    let rows: Vec<Vec<String>> = strata
        .iter()
        .map(|(m, v, s)| {
            vec![
                m.clone(),
                opts.tag.clone(),
                v.clone(),
                s.problems.to_string(),
                s.correct.to_string(),
                s.accuracy.to_string(),
            ]
        })
        .collect();
    write_csv(&strata_csv, &["method", "tag", "value", "problems", "correct", "accuracy"], &rows)?;
    let rollback_csv = dir.join("eval_rollbacks.csv");
    write_csv(
        &rollback_csv,
        &[
            "method",
            "events",
            "mean_fraction",
            "median_fraction",
            "rollbacks",
            "problems",
            "correct",
            "accuracy",
        ],
        &rollback_rows,
    )?;

    let [ma, mb]: [MethodReport; 2] = methods.try_into().expect("two methods");
    Ok(EvalReport {
        pairs,
        mcnemar,
        methods: [ma, mb],
        strata,
        files: vec![pairs_csv, methods_csv, strata_csv, rollback_csv],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Layers,
    Hparams,
    BasisK,
    RollbackDepth,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Layers => "layers",
            SweepAxis::Hparams => "hparams",
            SweepAxis::BasisK => "basis_k",
            SweepAxis::RollbackDepth => "rollback_depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub csv: PathBuf,
    pub jsonl: PathBuf,
    pub rows: usize,
    /// Basis files written along the way (K axis only).
    pub bases: Vec<PathBuf>,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    axis: &'a str,
    #[serde(flatten)]
    fields: BTreeMap<&'a str, serde_json::Value>,
}

fn json_rows<'a>(axis: &'a str, header: &[&'a str], rows: &[Vec<String>]) -> Vec<SweepRow<'a>> {
    rows.iter()
        .map(|r| SweepRow {
            axis,
            fields: header
                .iter()
                .zip(r)
                .map(|(&h, v)| {
                    let value = if v.is_empty() {
                        serde_json::Value::Null
                    } else {
                        match serde_json::from_str::<serde_json::Value>(v) {
                            Ok(n @ serde_json::Value::Number(_)) => n,
                            _ => serde_json::Value::String(v.clone()),
                        }
                    };
                    (h, value)
                })
                .collect(),
        })
        .collect()
}

/// Sweep one axis and write one CSV row (and one JSON line) per cell.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<SweepReport> {
    let mut bases = Vec::new();
    let summary_cols = &SUMMARY_HEADER[1..];
    let (header, rows): (Vec<&str>, Vec<Vec<String>>) = match axis {
        SweepAxis::Layers => {
            let work = Workload::build(cfg, &cfg.problems, Stream::Problems)?;
            let layers = cfg
                .sweep
                .layers
                .clone()
                .unwrap_or_else(|| (0..work.num_layers()).collect());
            let records = work.with_tasks(|tasks| layer_sweep(tasks, &cfg.engine, &layers))??;
            let header = vec![
                "layer",
                "auc",
                "positives",
                "negatives",
                "tp",
                "fp",
                "fn",
                "tn",
                "precision",
                "recall",
                "f1",
                "fpr",
            ];
            let rows = records
                .iter()
                .map(|r| {
                    let m = r.confusion.metrics();
                    vec![
                        r.layer.to_string(),
                        r.auc.map(|a| a.to_string()).unwrap_or_else(|| "undefined".into()),
                        r.positives.to_string(),
                        r.negatives.to_string(),
                        r.confusion.tp.to_string(),
                        r.confusion.fp.to_string(),
                        r.confusion.fn_.to_string(),
                        r.confusion.tn.to_string(),
                        opt(m.precision),
                        opt(m.recall),
                        opt(m.f1),
                        opt(m.fpr),
                    ]
                })
                .collect();
            (header, rows)
        }
        SweepAxis::Hparams => {
            let grid = &cfg.sweep.grid;
            ensure!(!grid.cells().is_empty(), LpsrError::Config("empty hyperparameter grid".into()));
            let cal = calibration_set(cfg)?;
            let mut by_layer = BTreeMap::new();
            for &l in &grid.l_crit {
                let engine = EngineConfig {
                    l_crit: l,
                    ..cfg.engine.clone()
                };
                let c = run_calibration(cfg, &cal, &engine).with_context(|| format!("calibrating layer {l}"))?;
                by_layer.insert(l, c.build.basis);
            }
            let work = Workload::build(cfg, &cfg.problems, Stream::Problems)?;
            let grid_rows = work.with_tasks(|tasks| grid_search(grid, tasks, &cfg.engine, &by_layer))??;
            let mut header = vec!["tau_phi", "tau_h", "alpha_max", "l_crit"];
            header.extend(summary_cols);
            let rows = grid_rows
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.cell.tau_phi.to_string(),
                        r.cell.tau_h.to_string(),
                        r.cell.alpha_max.to_string(),
                        r.cell.l_crit.to_string(),
                    ];
                    row.extend(summary_fields(&r.summary));
                    row
                })
                .collect();
            (header, rows)
        }
        SweepAxis::BasisK => {
            ensure!(!cfg.sweep.basis_k.is_empty(), LpsrError::Config("empty basis_k axis".into()));
            let cal = calibration_set(cfg)?;
            let (deltas, ..) = cal.with_tasks(|tasks| collect_deltas(tasks, &cfg.engine))??;
            ensure!(
                !deltas.is_empty(),
                LpsrError::Config("no correction deltas extracted from the calibration set".into())
            );
            let work = Workload::build(cfg, &cfg.problems, Stream::Problems)?;
            let engine = EngineConfig {
                mode: Mode::Lpsr,
                ..cfg.engine.clone()
            };
            let mut header = vec!["k", "deltas", "basis_count", "inertia"];
            header.extend(summary_cols);
            let mut rows = Vec::new();
            let mut built = Vec::new();
            for &k in &cfg.sweep.basis_k {
                let basis_cfg = BasisConfig { k, ..cfg.basis_config() };
                let build = build_basis(&deltas, engine.l_crit, &basis_cfg).with_context(|| format!("basis with K = {k}"))?;
                let traces = run_workload(&work, &engine, Some(&build.basis))?;
                let mut row = vec![
                    k.to_string(),
                    deltas.len().to_string(),
                    build.basis.count().to_string(),
                    build.inertia.to_string(),
                ];
                row.extend(summary_fields(&summarize(&traces)?));
                rows.push(row);
                built.push((k, build.basis));
            }
            for (k, basis) in built {
                let path = cfg.output_dir.join(format!("basis_k{k}.lpsb"));
                save_basis(&basis, &path)?;
                bases.push(path);
            }
            (header, rows)
        }
        SweepAxis::RollbackDepth => {
            ensure!(!cfg.sweep.rollback_depth.is_empty(), LpsrError::Config("empty rollback_depth axis".into()));
            let basis = load_basis(&cfg.basis_file())?;
            let work = Workload::build(cfg, &cfg.problems, Stream::Problems)?;
            let mut header = vec!["rollback_depth"];
            header.extend(summary_cols);
            let mut rows = Vec::new();
            for &depth in &cfg.sweep.rollback_depth {
                let engine = EngineConfig {
                    mode: Mode::Lpsr,
                    rollback_depth: depth,
                    ..cfg.engine.clone()
                };
                let traces = run_workload(&work, &engine, Some(&basis))?;
                let mut row = vec![depth.to_string()];
                row.extend(summary_fields(&summarize(&traces)?));
                rows.push(row);
            }
            (header, rows)
        }
    };
    let name = format!("sweep_{}", axis.as_str());
    let csv = cfg.output_dir.join(format!("{name}.csv"));
    let jsonl = cfg.output_dir.join(format!("{name}.jsonl"));
    write_csv(&csv, &header, &rows)?;
    write_jsonl(&jsonl, &json_rows(axis.as_str(), &header, &rows))?;
    Ok(SweepReport {
        csv,
        jsonl,
        rows: rows.len(),
        bases,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportReport {
    pub cosines: PathBuf,
    pub vectors: PathBuf,
    pub count: usize,
    pub max_norm_error: f64,
}

/// Write the pairwise cosine matrix (with each vector's norm) and the raw
/// vectors of a basis file as CSV.
pub fn cmd_export_basis(path: &Path, output_dir: &Path) -> Result<ExportReport> {
    let basis = load_basis(path)?;
    let vs = basis.vectors();
    let mut header = vec!["index".to_string(), "norm".to_string()];
    header.extend((0..vs.len()).map(|j| format!("cos_{j}")));
    let mut rows = Vec::with_capacity(vs.len());
    let mut max_norm_error: f64 = 0.0;
    for (i, u) in vs.iter().enumerate() {
        max_norm_error = max_norm_error.max((u.norm() - 1.0).abs());
        let mut row = vec![i.to_string(), u.norm().to_string()];
        for v in vs {
            row.push(cosine(u, v)?.to_string());
        }
        rows.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let cosines = output_dir.join("basis_cosines.csv");
    write_csv(&cosines, &header_refs, &rows)?;

    let mut vheader = vec!["index".to_string()];
    vheader.extend((0..basis.dim()).map(|j| format!("x_{j}")));
    let vrows: Vec<Vec<String>> = vs
        .iter()
        .enumerate()
        .map(|(i, v)| std::iter::once(i.to_string()).chain(v.iter().map(|x| x.to_string())).collect())
        .collect();
    let vheader_refs: Vec<&str> = vheader.iter().map(String::as_str).collect();
    let vectors = output_dir.join("basis_vectors.csv");
    write_csv(&vectors, &vheader_refs, &vrows)?;
    Ok(ExportReport {
        cosines,
        vectors,
        count: vs.len(),
        max_norm_error,
    })
}
