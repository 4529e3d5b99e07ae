//! Cycle models, attack scenarios, the evaluation corpus and corpus-wide
//! evaluation.

pub mod attack;
pub mod corpus;
pub mod cycles;
pub mod eval;

pub use attack::{derive_scenarios, run_scenario, AttackScenario, ScenarioKind, ScenarioOutcome, Verdict};
pub use corpus::{default_corpus, embedded, load_dir, CorpusProgram};
pub use cycles::{cfi_density, overhead, overhead_report, weighted_cycles, CycleModel, OverheadReport, OverheadRow};
pub use eval::{evaluate_corpus, write_csv, ConfigKind, CorpusReport, EvalError, ProgramResult, Stats};
