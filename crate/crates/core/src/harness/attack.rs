//! Attack scenarios. Each is derived from program structure: which writable
//! blobs hold function pointers, which functions look like gadgets, where the
//! landing sites are.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::instrument::InstrumentedProgram;
use crate::ir::{BlockRef, DataItem, Program, META_SYMBOL};
use crate::vm::{FaultKind, FaultRecord, Machine, DEFAULT_MAX_STEPS};

/// Function the attacker wants to reach; it ends in the goal ecall.
pub const GOAL_FUNCTION: &str = "win";
pub const GADGET_PREFIX: &str = "gadget";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    FnPtrOverwrite,
    JopDispatcherChain,
    BldBypass,
    BrstateReplay,
    MetadataTamper,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::FnPtrOverwrite,
        ScenarioKind::JopDispatcherChain,
        ScenarioKind::BldBypass,
        ScenarioKind::BrstateReplay,
        ScenarioKind::MetadataTamper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::FnPtrOverwrite => "fn_ptr_overwrite",
            ScenarioKind::JopDispatcherChain => "jop_dispatcher_chain",
            ScenarioKind::BldBypass => "bld_bypass",
            ScenarioKind::BrstateReplay => "brstate_replay",
            ScenarioKind::MetadataTamper => "metadata_tamper",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Value {
    Symbol(String),
    Raw(u64),
}

/// An attacker write at `symbol + offset`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Write {
    pub symbol: String,
    pub offset: u64,
    pub value: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HijackPoint {
    Start,
    AfterFirstPass,
}

/// Redirects control to `target` as a corrupted indirect transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hijack {
    pub when: HijackPoint,
    pub target: BlockRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Expected {
    Fault { kinds: Vec<FaultKind>, at: Option<String> },
    Rejection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    pub writes: Vec<Write>,
    pub hijack: Option<Hijack>,
    pub expected: Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Blocked,
    Rejected,
    Broken,
    /// The attack neither succeeded nor met the expected outcome.
    Inconclusive,
}

impl Verdict {
    pub fn is_defended(self) -> bool {
        matches!(self, Verdict::Blocked | Verdict::Rejected)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Blocked => "blocked",
            Verdict::Rejected => "rejected",
            Verdict::Broken => "BROKEN",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioOutcome {
    pub kind: ScenarioKind,
    pub verdict: Verdict,
    pub fault: Option<FaultRecord>,
    pub detail: String,
}

/// Writable blob slots holding function addresses: `(blob, offset, function)`.
fn function_slots(p: &Program) -> Vec<(String, u64, String)> {
    let mut out = Vec::new();
    for blob in &p.data {
        let mut off = 0u64;
        for item in &blob.items {
            if let DataItem::Addr(s) = item {
                if p.function(s).is_some() {
                    out.push((blob.symbol.clone(), off, s.clone()));
                }
            }
            off += item.size() as u64;
        }
    }
    out
}

const CONTROL_FLOW_FAULTS: [FaultKind; 2] = [FaultKind::CfpUnauthorized, FaultKind::CfpMissingLanding];

/// Overwrites the first writable function pointer with the goal function.
pub fn fn_ptr_overwrite(p: &Program) -> Option<AttackScenario> {
    p.function(GOAL_FUNCTION)?;
    let (symbol, offset, _) = function_slots(p).into_iter().next()?;
    Some(AttackScenario {
        kind: ScenarioKind::FnPtrOverwrite,
        writes: vec![Write { symbol, offset, value: Value::Symbol(GOAL_FUNCTION.into()) }],
        hijack: None,
        expected: Expected::Fault { kinds: CONTROL_FLOW_FAULTS.to_vec(), at: None },
    })
}

/// Rewrites a writable dispatch table (two or more function entries) into
/// a gadget chain ending at the goal function. Must fault at the first
/// gadget.
pub fn jop_dispatcher_chain(p: &Program) -> Option<AttackScenario> {
    p.function(GOAL_FUNCTION)?;
    let gadgets: Vec<&str> =
        p.functions.iter().map(|f| f.name.as_str()).filter(|n| n.starts_with(GADGET_PREFIX)).collect();
    if gadgets.is_empty() {
        return None;
    }
    let slots = function_slots(p);
    let table = p.data.iter().map(|b| &b.symbol).find(|s| slots.iter().filter(|(b, _, _)| b == *s).count() >= 2)?;
    let entries: Vec<u64> = slots.iter().filter(|(b, _, _)| b == table).map(|(_, o, _)| *o).collect();
    let last = entries.len() - 1;
    let writes = entries
        .iter()
        .enumerate()
        .map(|(i, &offset)| Write {
            symbol: table.clone(),
            offset,
            value: Value::Symbol(if i == last { GOAL_FUNCTION } else { gadgets[i % gadgets.len()] }.to_string()),
        })
        .collect();
    Some(AttackScenario {
        kind: ScenarioKind::JopDispatcherChain,
        writes,
        hijack: None,
        expected: Expected::Fault { kinds: CONTROL_FLOW_FAULTS.to_vec(), at: Some(gadgets[0].to_string()) },
    })
}

/// Jumps straight to a landing site with no `bld` in effect.
pub fn bld_bypass(ip: &InstrumentedProgram) -> Option<AttackScenario> {
    let target = ip.landing_index.keys().next()?.clone();
    Some(AttackScenario {
        kind: ScenarioKind::BldBypass,
        writes: Vec::new(),
        hijack: Some(Hijack { when: HijackPoint::Start, target }),
        expected: Expected::Fault { kinds: vec![FaultKind::CfpInvalid], at: None },
    })
}

/// After the first authorized landing, re-enters a landing site hoping the
/// consumed authorization is still live.
pub fn brstate_replay(ip: &InstrumentedProgram) -> Option<AttackScenario> {
    if ip.site_index.is_empty() {
        return None;
    }
    let target = ip.landing_index.keys().last()?.clone();
    Some(AttackScenario {
        kind: ScenarioKind::BrstateReplay,
        writes: Vec::new(),
        hijack: Some(Hijack { when: HijackPoint::AfterFirstPass, target }),
        expected: Expected::Fault { kinds: vec![FaultKind::CfpInvalid], at: None },
    })
}

/// Writes into the header, the descriptor table and the bit region.
pub fn metadata_tamper(ip: &InstrumentedProgram) -> Option<AttackScenario> {
    ip.program.blob(META_SYMBOL)?;
    let mut offsets = vec![6u64, 24];
    if !ip.metadata.descriptors.is_empty() {
        offsets.push(crate::bloom::HEADER_LEN as u64 + 8);
        offsets.push((ip.metadata.byte_len() - ip.metadata.bit_region.len()) as u64);
    }
    let writes = offsets
        .into_iter()
        .map(|offset| Write { symbol: META_SYMBOL.into(), offset, value: Value::Raw(u64::MAX) })
        .collect();
    Some(AttackScenario { kind: ScenarioKind::MetadataTamper, writes, hijack: None, expected: Expected::Rejection })
}

/// Every applicable scenario for an instrumented program.
pub fn derive_scenarios(base: &Program, ip: &InstrumentedProgram) -> Vec<AttackScenario> {
    [fn_ptr_overwrite(base), jop_dispatcher_chain(base), bld_bypass(ip), brstate_replay(ip), metadata_tamper(ip)]
        .into_iter()
        .flatten()
        .collect()
}

pub fn derive_scenario(kind: ScenarioKind, base: &Program, ip: &InstrumentedProgram) -> Option<AttackScenario> {
    match kind {
        ScenarioKind::FnPtrOverwrite => fn_ptr_overwrite(base),
        ScenarioKind::JopDispatcherChain => jop_dispatcher_chain(base),
        ScenarioKind::BldBypass => bld_bypass(ip),
        ScenarioKind::BrstateReplay => brstate_replay(ip),
        ScenarioKind::MetadataTamper => metadata_tamper(ip),
    }
}

fn outcome(
    sc: &AttackScenario,
    verdict: Verdict,
    fault: Option<FaultRecord>,
    detail: impl Into<String>,
) -> ScenarioOutcome {
    ScenarioOutcome { kind: sc.kind, verdict, fault, detail: detail.into() }
}

/// Applies the setup, runs, and classifies the result. `Broken` means the
/// goal ecall was reached (or protected metadata was modified).
pub fn run_scenario(sc: &AttackScenario, program: &Program) -> ScenarioOutcome {
    let mut m = match Machine::load(program) {
        Ok(m) => m,
        Err(e) => return outcome(sc, Verdict::Inconclusive, None, format!("load failed: {e}")),
    };
    let mut rejected = 0;
    for w in &sc.writes {
        let (Some(base), Some(value)) = (
            m.symbol(&w.symbol),
            match &w.value {
                Value::Symbol(s) => m.symbol(s),
                Value::Raw(v) => Some(*v),
            },
        ) else {
            return outcome(sc, Verdict::Inconclusive, None, format!("unresolved write target `{}`", w.symbol));
        };
        if m.corrupt(base + w.offset, value).is_err() {
            rejected += 1;
        }
    }
    if sc.expected == Expected::Rejection {
        return if rejected == sc.writes.len() {
            outcome(sc, Verdict::Rejected, None, format!("{rejected} writes refused"))
        } else {
            outcome(
                sc,
                Verdict::Broken,
                None,
                format!("{} of {} writes landed", sc.writes.len() - rejected, sc.writes.len()),
            )
        };
    }
    if rejected > 0 {
        return outcome(sc, Verdict::Inconclusive, None, "setup write refused");
    }
    if let Some(h) = &sc.hijack {
        let Some(target) = m.block_addr(&h.target) else {
            return outcome(sc, Verdict::Inconclusive, None, format!("no block `{}`", h.target));
        };
        if h.when == HijackPoint::AfterFirstPass {
            let mut steps = 0;
            while !m.is_stopped() && m.outcomes().pass == 0 && steps < DEFAULT_MAX_STEPS {
                m.step();
                steps += 1;
            }
            if m.outcomes().pass == 0 {
                return outcome(sc, Verdict::Inconclusive, m.fault().cloned(), "no authorized landing to replay");
            }
        }
        m.hijack(target);
    }
    let report = match m.run(DEFAULT_MAX_STEPS) {
        Ok(r) => r,
        Err(e) => return outcome(sc, Verdict::Inconclusive, None, e.to_string()),
    };
    if report.goal_reached {
        return outcome(sc, Verdict::Broken, None, "goal reached");
    }
    let Expected::Fault { kinds, at } = &sc.expected else { unreachable!("handled above") };
    match report.fault {
        Some(f) if kinds.contains(&f.kind) => {
            if let Some(sym) = at {
                let want = m.symbol(sym);
                if want != Some(f.pc) {
                    let detail = format!("faulted at {:#x}, expected `{sym}`", f.pc);
                    return outcome(sc, Verdict::Inconclusive, Some(f), detail);
                }
            }
            let detail = format!("{} at {}", f.kind, f.location.as_deref().unwrap_or("?"));
            outcome(sc, Verdict::Blocked, Some(f), detail)
        }
        Some(f) => {
            let detail = format!("unexpected fault {}", f.kind);
            outcome(sc, Verdict::Inconclusive, Some(f), detail)
        }
        None => outcome(sc, Verdict::Inconclusive, None, "ran to completion"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::embedded;
    use crate::instrument::{run_pipeline, Config};
    use crate::policy::{Granularity, PolicyKind};

    fn program(name: &str) -> Program {
        embedded().into_iter().find(|c| c.name == name).unwrap().program
    }

    #[test]
    fn jop_chain_shape() {
        let p = program("dispatcher");
        let sc = jop_dispatcher_chain(&p).unwrap();
        let values: Vec<_> = sc.writes.iter().map(|w| w.value.clone()).collect();
        assert_eq!(
            values,
            [Value::Symbol("gadget_load".into()), Value::Symbol("gadget_store".into()), Value::Symbol("win".into())]
        );
        assert!(jop_dispatcher_chain(&program("callback")).is_none());
    }

    #[test]
    fn baseline_is_broken_instrumented_is_not() {
        for name in ["callback", "dispatcher"] {
            let p = program(name);
            for sc in [fn_ptr_overwrite(&p), jop_dispatcher_chain(&p)].into_iter().flatten() {
                assert_eq!(run_scenario(&sc, &p).verdict, Verdict::Broken, "{name} {}", sc.kind);
                for kind in [PolicyKind::FuncType, PolicyKind::Cfg] {
                    let ip = run_pipeline(&p, &Config::new(kind, Granularity::Function)).unwrap().instrumented;
                    let o = run_scenario(&sc, &ip.program);
                    assert_eq!(o.verdict, Verdict::Blocked, "{name} {} {kind:?}: {}", sc.kind, o.detail);
                }
            }
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!("nope".parse::<ScenarioKind>().is_err());
    }
}
