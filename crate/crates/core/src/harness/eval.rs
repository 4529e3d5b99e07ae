//! Three-configuration corpus evaluation: baseline, BRL-Func at function
//! granularity and BRL-CFG at basic-block granularity.

use std::io;

use serde::Serialize;
use thiserror::Error;

use super::corpus::CorpusProgram;
use super::cycles::{cfi_density, overhead, weighted_cycles, CycleModel, OverheadRow};
use crate::instrument::{run_pipeline, size_report, Config, InstrumentError, SizeReport};
use crate::par::{self, Exec};
use crate::policy::{ec_report, AuthorizationPolicy, EcReport, Granularity, PolicyKind};
use crate::vm::{
    BrlOutcomes, ExecutionReport, FaultRecord, Histogram, LoadError, Machine, RunError, DEFAULT_MAX_STEPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigKind {
    Baseline,
    BrlFunc,
    BrlCfg,
}

impl ConfigKind {
    pub const ALL: [ConfigKind; 3] = [ConfigKind::Baseline, ConfigKind::BrlFunc, ConfigKind::BrlCfg];

    pub fn name(self) -> &'static str {
        match self {
            ConfigKind::Baseline => "baseline",
            ConfigKind::BrlFunc => "brl_func",
            ConfigKind::BrlCfg => "brl_cfg",
        }
    }

    pub fn instrument_config(self) -> Option<Config> {
        match self {
            ConfigKind::Baseline => None,
            ConfigKind::BrlFunc => Some(Config::new(PolicyKind::FuncType, Granularity::Function)),
            ConfigKind::BrlCfg => Some(Config::new(PolicyKind::Cfg, Granularity::BasicBlock)),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{program}: instrumentation failed: {error}")]
    Instrument { program: String, error: InstrumentError },
    #[error("{program} ({config}): load failed: {error}")]
    Load { program: String, config: &'static str, error: LoadError },
    #[error("{program} ({config}): {error}")]
    Run { program: String, config: &'static str, error: RunError },
    #[error("{program} ({config}): false positive {} at {}", fault.kind, fault.location.as_deref().unwrap_or("?"))]
    FalsePositive { program: String, config: &'static str, fault: FaultRecord },
    #[error("{program} ({config}): printed output differs from baseline")]
    OutputMismatch { program: String, config: &'static str },
    #[error("{program} ({config}): read-only memory changed during the run")]
    ReadOnlyModified { program: String, config: &'static str },
    #[error("{program}: baseline has zero weighted cycles")]
    ZeroBaseline { program: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub histogram: Histogram,
    pub retired: u64,
    pub output: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigResult {
    pub config: ConfigKind,
    pub histogram: Histogram,
    pub brl_outcomes: BrlOutcomes,
    pub probe_reads: u64,
    pub retired: u64,
    pub overhead: Vec<OverheadRow>,
    pub cfi_density_pct: f64,
    pub size: SizeReport,
    pub ec: EcReport,
    pub protected_sites: usize,
    pub protected_targets: usize,
}

impl ConfigResult {
    pub fn overhead_for(&self, model: &str) -> Option<f64> {
        self.overhead.iter().find(|r| r.model == model).map(|r| r.overhead_pct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramResult {
    pub name: String,
    pub baseline: BaselineResult,
    pub func: ConfigResult,
    pub cfg: ConfigResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Some(Stats { mean: v.iter().sum::<f64>() / n as f64, median, max: v[n - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub func: Option<Stats>,
    pub cfg: Option<Stats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub func: BrlOutcomes,
    pub cfg: BrlOutcomes,
}

/// Aggregate `report-v1` document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub schema: &'static str,
    pub kind: &'static str,
    pub models: Vec<CycleModel>,
    pub notes: Vec<&'static str>,
    pub programs: Vec<ProgramResult>,
    pub summary: Vec<SummaryRow>,
    pub totals: Totals,
}

pub const NOTES: [&str; 3] = [
    "untaken branches are weighted like ALU ops and jal/jalr like taken branches",
    "SKIP counts brl instructions reached by a direct transfer or fallthrough",
    "percentages describe the synthetic corpus only",
];

struct Job {
    report: ExecutionReport,
    static_info: Option<(SizeReport, AuthorizationPolicy)>,
}

fn run_job(c: &CorpusProgram, config: ConfigKind) -> Result<Job, EvalError> {
    let program = c.name.clone();
    let name = config.name();
    let (runnable, static_info) = match config.instrument_config() {
        None => (c.program.clone(), None),
        Some(cfg) => {
            let out = run_pipeline(&c.program, &cfg)
                .map_err(|error| EvalError::Instrument { program: program.clone(), error })?;
            let size = size_report(&c.program, &out.instrumented);
            (out.instrumented.program, Some((size, out.policy)))
        }
    };
    let mut m =
        Machine::load(&runnable).map_err(|error| EvalError::Load { program: program.clone(), config: name, error })?;
    let before = m.memory().readonly_digest();
    let report =
        m.run(DEFAULT_MAX_STEPS).map_err(|error| EvalError::Run { program: program.clone(), config: name, error })?;
    if let Some(fault) = report.fault.clone() {
        return Err(EvalError::FalsePositive { program, config: name, fault });
    }
    if m.memory().readonly_digest() != before {
        return Err(EvalError::ReadOnlyModified { program, config: name });
    }
    Ok(Job { report, static_info })
}

fn config_result(
    c: &CorpusProgram,
    config: ConfigKind,
    base: &ExecutionReport,
    job: Job,
    func_policy: Option<&AuthorizationPolicy>,
    models: &[CycleModel],
) -> Result<ConfigResult, EvalError> {
    if job.report.output != base.output {
        return Err(EvalError::OutputMismatch { program: c.name.clone(), config: config.name() });
    }
    let (size, policy) = job.static_info.expect("instrumented configs carry static info");
    let overhead = models
        .iter()
        .map(|m| overhead(&base.histogram, &job.report.histogram, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| EvalError::ZeroBaseline { program: c.name.clone() })?;
    Ok(ConfigResult {
        config,
        histogram: job.report.histogram,
        brl_outcomes: job.report.brl_outcomes,
        probe_reads: job.report.probe_reads,
        retired: job.report.retired,
        overhead,
        cfi_density_pct: cfi_density(&job.report.histogram),
        size,
        ec: ec_report(&policy, func_policy),
        protected_sites: policy.sites.len(),
        protected_targets: policy.targets.len(),
    })
}

/// Runs every program under all three configurations (in parallel when
/// `exec` allows) and aggregates in corpus order. Any fault in a legitimate
/// run aborts with a diagnostic.
pub fn evaluate_corpus(corpus: &[CorpusProgram], models: &[CycleModel], exec: Exec) -> Result<CorpusReport, EvalError> {
    let jobs: Vec<(usize, ConfigKind)> =
        (0..corpus.len()).flat_map(|i| ConfigKind::ALL.into_iter().map(move |k| (i, k))).collect();
    let mut results = par::map(&jobs, exec, |&(i, k)| run_job(&corpus[i], k)).into_iter();

    let mut programs = Vec::with_capacity(corpus.len());
    for c in corpus {
        let mut next = || results.next().expect("three jobs per program");
        let (base, func, cfg) = (next()?, next()?, next()?);
        let base = base.report;
        let func_policy = func.static_info.as_ref().map(|(_, p)| p.clone());
        let func = config_result(c, ConfigKind::BrlFunc, &base, func, None, models)?;
        let cfg = config_result(c, ConfigKind::BrlCfg, &base, cfg, func_policy.as_ref(), models)?;
        programs.push(ProgramResult {
            name: c.name.clone(),
            baseline: BaselineResult { histogram: base.histogram, retired: base.retired, output: base.output },
            func,
            cfg,
        });
    }
    let summary = summarize(&programs, models);
    let totals = Totals {
        func: sum_outcomes(programs.iter().map(|p| &p.func)),
        cfg: sum_outcomes(programs.iter().map(|p| &p.cfg)),
    };
    Ok(CorpusReport {
        schema: "report-v1",
        kind: "corpus",
        models: models.to_vec(),
        notes: NOTES.to_vec(),
        programs,
        summary,
        totals,
    })
}

fn sum_outcomes<'a>(rows: impl Iterator<Item = &'a ConfigResult>) -> BrlOutcomes {
    rows.fold(BrlOutcomes::default(), |acc, r| BrlOutcomes {
        pass: acc.pass + r.brl_outcomes.pass,
        skip: acc.skip + r.brl_outcomes.skip,
        fail: acc.fail + r.brl_outcomes.fail,
    })
}

fn summarize(programs: &[ProgramResult], models: &[CycleModel]) -> Vec<SummaryRow> {
    let row = |metric: String, f: &dyn Fn(&ConfigResult) -> Option<f64>| SummaryRow {
        metric,
        func: Stats::of(&programs.iter().filter_map(|p| f(&p.func)).collect::<Vec<_>>()),
        cfg: Stats::of(&programs.iter().filter_map(|p| f(&p.cfg)).collect::<Vec<_>>()),
    };
    let mut out: Vec<SummaryRow> = models
        .iter()
        .map(|m| row(format!("overhead_pct_{}", m.name), &|r: &ConfigResult| r.overhead_for(&m.name)))
        .collect();
    out.push(row("text_overhead_pct".into(), &|r| Some(r.size.text_overhead_pct)));
    out.push(row("total_size_overhead_pct".into(), &|r| Some(r.size.total_overhead_pct)));
    out.push(row("rodata_meta_bytes".into(), &|r| Some(r.size.rodata_meta_bytes as f64)));
    out.push(row("cfi_density_pct".into(), &|r| Some(r.cfi_density_pct)));
    out.push(row("avg_ec".into(), &|r| (r.ec.sites > 0).then_some(r.ec.avg_ec)));
    out.push(row("protected_targets".into(), &|r| Some(r.protected_targets as f64)));
    out
}

/// Recomputes a model's overhead from stored histograms alone.
pub fn recompute_overhead(p: &ProgramResult, which: ConfigKind, model: &CycleModel) -> Option<f64> {
    let inst = match which {
        ConfigKind::Baseline => return None,
        ConfigKind::BrlFunc => &p.func.histogram,
        ConfigKind::BrlCfg => &p.cfg.histogram,
    };
    let base = weighted_cycles(&p.baseline.histogram, model);
    super::cycles::overhead_pct(base, weighted_cycles(inst, model)).ok()
}

/// One row per program and configuration, then mean/median/max rows.
pub fn write_csv<W: io::Write>(report: &CorpusReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["program".to_string(), "config".to_string()];
    header.extend(report.models.iter().map(|m| format!("overhead_pct_{}", m.name)));
    header.extend(
        [
            "text_overhead_pct",
            "total_size_overhead_pct",
            "rodata_meta_bytes",
            "cfi_density_pct",
            "avg_ec",
            "max_ec",
            "protected_targets",
            "pass",
            "skip",
            "fail",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for p in &report.programs {
        for r in [&p.func, &p.cfg] {
            let mut rec = vec![p.name.clone(), r.config.name().to_string()];
            rec.extend(r.overhead.iter().map(|o| format!("{:.4}", o.overhead_pct)));
            rec.extend([
                format!("{:.4}", r.size.text_overhead_pct),
                format!("{:.4}", r.size.total_overhead_pct),
                r.size.rodata_meta_bytes.to_string(),
                format!("{:.4}", r.cfi_density_pct),
                format!("{:.4}", r.ec.avg_ec),
                r.ec.max_ec.to_string(),
                r.protected_targets.to_string(),
                r.brl_outcomes.pass.to_string(),
                r.brl_outcomes.skip.to_string(),
                r.brl_outcomes.fail.to_string(),
            ]);
            w.write_record(&rec)?;
        }
    }
    let n_models = report.models.len();
    for (stat, pick) in [
        ("mean", (|s: &Stats| s.mean) as fn(&Stats) -> f64),
        ("median", |s: &Stats| s.median),
        ("max", |s: &Stats| s.max),
    ] {
        for (config, side) in [("brl_func", 0), ("brl_cfg", 1)] {
            let mut rec = vec![stat.to_string(), config.to_string()];
            let cell = |row: &SummaryRow| {
                let s = if side == 0 { row.func } else { row.cfg };
                s.map(|s| format!("{:.4}", pick(&s))).unwrap_or_default()
            };
            rec.extend(report.summary[..n_models].iter().map(cell));
            let by_name = |name: &str| report.summary.iter().find(|r| r.metric == name).map(cell).unwrap_or_default();
            rec.extend([
                by_name("text_overhead_pct"),
                by_name("total_size_overhead_pct"),
                by_name("rodata_meta_bytes"),
                by_name("cfi_density_pct"),
                by_name("avg_ec"),
                String::new(),
                by_name("protected_targets"),
                String::new(),
                String::new(),
                String::new(),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
