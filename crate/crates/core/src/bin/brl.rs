use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use branch_landing::harness::attack::{derive_scenario, run_scenario, ScenarioKind, Verdict};
use branch_landing::harness::corpus::{default_corpus, load_dir, CorpusProgram};
use branch_landing::harness::eval::{evaluate_corpus, write_csv};
use branch_landing::harness::CycleModel;
use branch_landing::instrument::{run_pipeline, size_report, Config, DEFAULT_FP, DEFAULT_SEEDS};
use branch_landing::ir::{build_callgraph, parse_program, serialize_program, Program};
use branch_landing::par::Exec;
use branch_landing::policy::{
    assign_sids, build_cfg_policy, build_func_policy, ec_report, Granularity, PolicyDocument, PolicyKind,
};
use branch_landing::vm::{Machine, DEFAULT_MAX_STEPS};

#[derive(Parser)]
#[command(name = "brl", version, about = "Branch-landing CFI toolchain and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Func,
    Cfg,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Func => PolicyKind::FuncType,
            PolicyArg::Cfg => PolicyKind::Cfg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Module,
    Function,
    Bb,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Module => Granularity::Module,
            GranularityArg::Function => Granularity::Function,
            GranularityArg::Bb => Granularity::BasicBlock,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a program; print it in canonical form.
    Assemble {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Print the indirect-site inventory as JSON instead.
        #[arg(long)]
        sites: bool,
    },
    /// Insert bld/brl and attach the metadata image.
    Instrument {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cfg")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "function")]
        granularity: GranularityArg,
        #[arg(long, default_value_t = DEFAULT_FP)]
        fp: f64,
        #[arg(long, default_value_t = DEFAULT_SEEDS.0)]
        seed1: u64,
        #[arg(long, default_value_t = DEFAULT_SEEDS.1)]
        seed2: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write the raw metadata image here.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Write the size report JSON here.
        #[arg(long)]
        size_report: Option<PathBuf>,
    },
    /// Execute a program and print its execution report.
    Run {
        input: PathBuf,
        /// Print one line per committed instruction to stderr.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an attack scenario against instrumented programs.
    Attack {
        #[arg(long)]
        scenario: String,
        /// Target program; defaults to every applicable corpus program.
        #[arg(long)]
        program: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cfg")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "function")]
        granularity: GranularityArg,
    },
    /// Evaluate the corpus under baseline, BRL-Func and BRL-CFG.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "brl3,brl5,brl10")]
        models: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Equivalence-class statistics for a policy.
    Ec {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cfg")]
        policy: PolicyArg,
        #[arg(long, value_enum, default_value = "function")]
        granularity: GranularityArg,
        /// Policy to report the reduction against.
        #[arg(long, value_enum)]
        baseline: Option<PolicyArg>,
        /// Write the full policy document here.
        #[arg(long)]
        dump_policy: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad input; exit 2.
    Input(String),
    /// Fault, broken defense or runtime error; exit 1.
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_program(path: &Path) -> Result<Program, Failure> {
    let src = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    parse_program(&src).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_out(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

fn assemble(path: &Path, output: Option<&Path>, sites: bool) -> Outcome {
    let p = read_program(path)?;
    if sites {
        write_out(output, &json(&build_callgraph(&p)))
    } else {
        write_out(output, &serialize_program(&p))
    }
}

#[allow(clippy::too_many_arguments)]
fn instrument(
    path: &Path,
    policy: PolicyArg,
    granularity: GranularityArg,
    fp: f64,
    seeds: (u64, u64),
    output: Option<&Path>,
    meta: Option<&Path>,
    size: Option<&Path>,
) -> Outcome {
    if !(fp > 0.0 && fp < 1.0) {
        return Err(Failure::Input(format!("--fp must lie in (0, 1), got {fp}")));
    }
    let p = read_program(path)?;
    let cfg = Config { policy: policy.into(), granularity: granularity.into(), fp_target: fp, seeds };
    let out = run_pipeline(&p, &cfg).map_err(input)?;
    let ip = &out.instrumented;
    if let Some(m) = meta {
        fs::write(m, ip.metadata_bytes()).map_err(|e| Failure::Runtime(format!("{}: {e}", m.display())))?;
    }
    let report = json(&size_report(&p, ip));
    match size {
        Some(s) => write_out(Some(s), &report)?,
        None if output.is_some() => print!("{report}"),
        None => {}
    }
    write_out(output, &serialize_program(&ip.program))
}

fn run(path: &Path, trace: bool, max_steps: u64, report_path: Option<&Path>) -> Outcome {
    let p = read_program(path)?;
    let mut m = Machine::load(&p).map_err(input)?;
    if trace {
        m.enable_trace();
    }
    let result = m.run(max_steps);
    if let Some(t) = m.trace() {
        for line in t {
            eprintln!("{line}");
        }
    }
    let report = result.map_err(runtime)?;
    write_out(report_path, &json(&report))?;
    match &report.fault {
        Some(f) => Err(Failure::Runtime(format!(
            "fault {} at {:#x} ({})",
            f.kind,
            f.pc,
            f.location.as_deref().unwrap_or("outside text")
        ))),
        None => Ok(()),
    }
}

fn attack(scenario: &str, program: Option<&Path>, policy: PolicyArg, granularity: GranularityArg) -> Outcome {
    let kind: ScenarioKind = scenario.parse().map_err(Failure::Input)?;
    let targets = match program {
        Some(path) => {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("program").to_string();
            vec![CorpusProgram { name, program: read_program(path)? }]
        }
        None => default_corpus().map_err(input)?,
    };
    let cfg = Config::new(policy.into(), granularity.into());
    let mut applicable = 0;
    let mut defended = true;
    for t in &targets {
        let ip = run_pipeline(&t.program, &cfg).map_err(input)?.instrumented;
        let Some(sc) = derive_scenario(kind, &t.program, &ip) else { continue };
        applicable += 1;
        let o = run_scenario(&sc, &ip.program);
        println!("{} {} {}: {}", t.name, kind, o.verdict, o.detail);
        defended &= o.verdict.is_defended();
        if o.verdict == Verdict::Broken {
            eprintln!("{}: {kind} succeeded", t.name);
        }
    }
    if applicable == 0 {
        return Err(Failure::Input(format!("{kind} does not apply to the selected program(s)")));
    }
    if defended {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{kind}: not every run was blocked or rejected")))
    }
}

fn eval(corpus: Option<&Path>, models: &[String], out: Option<&Path>, csv: Option<&Path>, sequential: bool) -> Outcome {
    let models = models.iter().map(|m| CycleModel::named(m)).collect::<Result<Vec<_>, _>>().map_err(input)?;
    let programs = match corpus {
        Some(dir) => load_dir(dir).map_err(input)?,
        None => default_corpus().map_err(input)?,
    };
    let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
    let report = evaluate_corpus(&programs, &models, exec).map_err(runtime)?;
    if let Some(path) = csv {
        let file = fs::File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        write_csv(&report, file).map_err(runtime)?;
    }
    let doc = json(&report);
    match out {
        Some(_) => {
            write_out(out, &doc)?;
            for row in &report.summary {
                let fmt = |s: Option<branch_landing::harness::Stats>| match s {
                    Some(s) => format!("{:>9.3} {:>9.3} {:>9.3}", s.mean, s.median, s.max),
                    None => format!("{:>29}", "-"),
                };
                println!("{:<26} func {}   cfg {}", row.metric, fmt(row.func), fmt(row.cfg));
            }
            println!("fail totals: func {} cfg {}", report.totals.func.fail, report.totals.cfg.fail);
            Ok(())
        }
        None => write_out(None, &doc),
    }
}

fn ec(
    path: &Path,
    policy: PolicyArg,
    granularity: GranularityArg,
    baseline: Option<PolicyArg>,
    dump: Option<&Path>,
) -> Outcome {
    let p = read_program(path)?;
    let sm = assign_sids(&p, &granularity.into()).map_err(input)?;
    let build = |k: PolicyArg| match k {
        PolicyArg::Func => build_func_policy(&p, &sm),
        PolicyArg::Cfg => build_cfg_policy(&p, &sm),
    };
    let pol = build(policy).map_err(input)?;
    let base = baseline.map(build).transpose().map_err(input)?;
    if let Some(d) = dump {
        write_out(Some(d), &json(&PolicyDocument::new(&sm, &pol)))?;
    }
    write_out(None, &json(&ec_report(&pol, base.as_ref())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Assemble { input, output, sites } => assemble(input, output.as_deref(), *sites),
        Command::Instrument { input, policy, granularity, fp, seed1, seed2, output, meta, size_report } => instrument(
            input,
            *policy,
            *granularity,
            *fp,
            (*seed1, *seed2),
            output.as_deref(),
            meta.as_deref(),
            size_report.as_deref(),
        ),
        Command::Run { input, trace, max_steps, report } => run(input, *trace, *max_steps, report.as_deref()),
        Command::Attack { scenario, program, policy, granularity } => {
            attack(scenario, program.as_deref(), *policy, *granularity)
        }
        Command::Eval { corpus, models, out, csv, sequential } => {
            eval(corpus.as_deref(), models, out.as_deref(), csv.as_deref(), *sequential)
        }
        Command::Ec { input, policy, granularity, baseline, dump_policy } => {
            ec(input, *policy, *granularity, *baseline, dump_policy.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
