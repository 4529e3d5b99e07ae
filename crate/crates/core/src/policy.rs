//! SID assignment and authorization-set construction.
//!
//! [`assign_sids`] partitions code into regions at a chosen granularity and
//! numbers them in declaration order. Landing sites (address-taken function
//! entries and indirect-jump targets) get their own target SIDs.
//! [`build_func_policy`] authorizes by exact signature match;
//! [`build_cfg_policy`] authorizes only the declared edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{BlockRef, Instruction, Program, Sid, SiteId, SiteKind, TypeSignature};

/// A landing site is identified by its block; function entries use the
/// function's first block.
pub type LandingSite = BlockRef;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Granularity {
    Module,
    Function,
    BasicBlock,
    /// Every block mapped to a named group.
    Custom(BTreeMap<BlockRef, String>),
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::Module => "module",
            Granularity::Function => "function",
            Granularity::BasicBlock => "basic_block",
            Granularity::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Region {
    Module,
    Function(String),
    Block(BlockRef),
    Group(String),
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Module => f.write_str("module"),
            Region::Function(name) => write!(f, "function:{name}"),
            Region::Block(b) => write!(f, "block:{b}"),
            Region::Group(g) => write!(f, "group:{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("SID namespace exhausted")]
    SidExhausted,
    #[error("custom grouping does not cover block `{0}`")]
    UncoveredBlock(BlockRef),
    #[error("custom grouping names unknown block `{0}`")]
    UnknownBlock(BlockRef),
    #[error("indirect call at `{0}` has no declared signature")]
    MissingSignature(SiteId),
    #[error("target `{target}` of site `{site}` is neither address-taken nor a labeled jump target")]
    InvalidTarget { site: SiteId, target: String },
    #[error("block `{0}` has no SID")]
    NoSid(BlockRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidMap {
    granularity: Granularity,
    regions: Vec<(Region, Sid)>,
    block_sid: HashMap<BlockRef, Sid>,
    targets: Vec<(LandingSite, Sid)>,
    target_index: HashMap<LandingSite, Sid>,
}

impl SidMap {
    pub fn granularity(&self) -> &Granularity {
        &self.granularity
    }

    /// Regions and their SIDs in assignment order.
    pub fn regions(&self) -> &[(Region, Sid)] {
        &self.regions
    }

    /// Landing sites and their target SIDs in assignment order.
    pub fn targets(&self) -> &[(LandingSite, Sid)] {
        &self.targets
    }

    /// SID of the region containing `block`.
    pub fn source_sid(&self, block: &BlockRef) -> Option<Sid> {
        self.block_sid.get(block).copied()
    }

    pub fn target_sid(&self, site: &LandingSite) -> Option<Sid> {
        self.target_index.get(site).copied()
    }

    pub fn landing_for(&self, sid_t: Sid) -> Option<&LandingSite> {
        self.targets.iter().find(|(_, s)| *s == sid_t).map(|(l, _)| l)
    }
}

struct Counter(u64);

impl Counter {
    fn next(&mut self) -> Result<Sid, PolicyError> {
        self.0 += 1;
        u32::try_from(self.0).ok().and_then(Sid::new).ok_or(PolicyError::SidExhausted)
    }
}

/// Deterministic SID assignment: functions in declaration order, blocks in
/// layout order, numbering from 1.
pub fn assign_sids(p: &Program, g: &Granularity) -> Result<SidMap, PolicyError> {
    let mut regions = Vec::new();
    let mut block_sid = HashMap::new();
    let mut next = Counter(0);

    if let Granularity::Custom(map) = g {
        for key in map.keys() {
            if p.function(&key.function).and_then(|f| f.block(&key.label)).is_none() {
                return Err(PolicyError::UnknownBlock(key.clone()));
            }
        }
    }

    let mut groups: HashMap<&str, Sid> = HashMap::new();
    for f in &p.functions {
        let fn_sid = match g {
            Granularity::Module if regions.is_empty() => {
                let s = next.next()?;
                regions.push((Region::Module, s));
                Some(s)
            }
            Granularity::Module => Some(regions[0].1),
            Granularity::Function => {
                let s = next.next()?;
                regions.push((Region::Function(f.name.clone()), s));
                Some(s)
            }
            _ => None,
        };
        for b in &f.blocks {
            let r = BlockRef::new(&f.name, &b.label);
            let sid = match (g, fn_sid) {
                (_, Some(s)) => s,
                (Granularity::Custom(map), _) => {
                    let group = map.get(&r).ok_or_else(|| PolicyError::UncoveredBlock(r.clone()))?;
                    match groups.get(group.as_str()) {
                        Some(s) => *s,
                        None => {
                            let s = next.next()?;
                            groups.insert(group, s);
                            regions.push((Region::Group(group.clone()), s));
                            s
                        }
                    }
                }
                _ => {
                    let s = next.next()?;
                    regions.push((Region::Block(r.clone()), s));
                    s
                }
            };
            block_sid.insert(r, sid);
        }
    }

    let jump_targets = p.indirect_jump_targets();
    let mut targets = Vec::new();
    let mut target_index = HashMap::new();
    let mut next_t = Counter(0);
    for f in &p.functions {
        for (i, b) in f.blocks.iter().enumerate() {
            let r = BlockRef::new(&f.name, &b.label);
            let is_landing = (i == 0 && f.address_taken) || jump_targets.contains(&r);
            if is_landing {
                let s = next_t.next()?;
                target_index.insert(r.clone(), s);
                targets.push((r, s));
            }
        }
    }

    Ok(SidMap { granularity: g.clone(), regions, block_sid, targets, target_index })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FuncType,
    Cfg,
}

/// One protected indirect site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SitePolicy {
    pub site: SiteId,
    pub kind: SiteKind,
    pub source_sid: Sid,
    /// The site's equivalence class.
    pub targets: Vec<LandingSite>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProtectedTarget {
    pub landing: LandingSite,
    pub sid_t: Sid,
    pub sources: BTreeSet<Sid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorizationPolicy {
    pub kind: PolicyKind,
    /// Protected sites in layout order.
    pub sites: Vec<SitePolicy>,
    /// Protected landing sites in layout order.
    pub targets: Vec<ProtectedTarget>,
}

impl AuthorizationPolicy {
    pub fn allowed_sources(&self) -> BTreeMap<Sid, BTreeSet<Sid>> {
        self.targets.iter().map(|t| (t.sid_t, t.sources.clone())).collect()
    }

    pub fn allowed(&self, sid_t: Sid) -> Option<&BTreeSet<Sid>> {
        self.targets.iter().find(|t| t.sid_t == sid_t).map(|t| &t.sources)
    }

    pub fn site(&self, id: &SiteId) -> Option<&SitePolicy> {
        self.sites.iter().find(|s| &s.site == id)
    }

    pub fn call_sites(&self) -> impl Iterator<Item = &SitePolicy> {
        self.sites.iter().filter(|s| s.kind == SiteKind::IndirectCall)
    }
}

struct RawSite<'a> {
    id: SiteId,
    kind: SiteKind,
    signature: Option<&'a TypeSignature>,
    targets: &'a [String],
}

fn raw_sites(p: &Program) -> Vec<RawSite<'_>> {
    p.instructions()
        .filter_map(|(f, b, _, ins)| match ins {
            Instruction::Jalr { site: Some(info), .. } => Some(RawSite {
                id: SiteId::new(&f.name, &b.label),
                kind: info.kind,
                signature: info.declared_signature.as_ref(),
                targets: &info.possible_targets,
            }),
            _ => None,
        })
        .collect()
}

fn source_of(sm: &SidMap, site: &SiteId) -> Result<Sid, PolicyError> {
    sm.source_sid(site).ok_or_else(|| PolicyError::NoSid(site.clone()))
}

fn target_of(sm: &SidMap, landing: &LandingSite) -> Result<Sid, PolicyError> {
    sm.target_sid(landing).ok_or_else(|| PolicyError::NoSid(landing.clone()))
}

/// Type-based policy: a target admits every indirect call site whose
/// declared signature equals its own. Indirect jumps stay unprotected.
pub fn build_func_policy(p: &Program, sm: &SidMap) -> Result<AuthorizationPolicy, PolicyError> {
    let taken: Vec<_> = p.functions.iter().filter(|f| f.address_taken).collect();
    let mut sites = Vec::new();
    let mut by_sig: Vec<(&TypeSignature, Sid)> = Vec::new();
    for raw in raw_sites(p).into_iter().filter(|s| s.kind == SiteKind::IndirectCall) {
        let sig = raw.signature.ok_or_else(|| PolicyError::MissingSignature(raw.id.clone()))?;
        let source_sid = source_of(sm, &raw.id)?;
        by_sig.push((sig, source_sid));
        let targets =
            taken.iter().filter(|f| &f.signature == sig).map(|f| LandingSite::new(&f.name, f.entry_label())).collect();
        sites.push(SitePolicy { site: raw.id, kind: raw.kind, source_sid, targets });
    }
    let mut targets = Vec::new();
    for f in taken {
        let landing = LandingSite::new(&f.name, f.entry_label());
        let sid_t = target_of(sm, &landing)?;
        let sources = by_sig.iter().filter(|(s, _)| **s == f.signature).map(|(_, src)| *src).collect();
        targets.push(ProtectedTarget { landing, sid_t, sources });
    }
    Ok(AuthorizationPolicy { kind: PolicyKind::FuncType, sites, targets })
}

/// CFG-based policy: a target admits exactly the regions holding a site
/// that declares an edge to it. Covers indirect calls and jumps.
pub fn build_cfg_policy(p: &Program, sm: &SidMap) -> Result<AuthorizationPolicy, PolicyError> {
    let mut sites = Vec::new();
    let mut edges: HashMap<LandingSite, BTreeSet<Sid>> = HashMap::new();
    for raw in raw_sites(p) {
        let source_sid = source_of(sm, &raw.id)?;
        let mut targets = Vec::with_capacity(raw.targets.len());
        for name in raw.targets {
            let landing = p
                .resolve_target(&raw.id.function, name)
                .filter(|l| sm.target_sid(l).is_some())
                .ok_or_else(|| PolicyError::InvalidTarget { site: raw.id.clone(), target: name.clone() })?;
            edges.entry(landing.clone()).or_default().insert(source_sid);
            if !targets.contains(&landing) {
                targets.push(landing);
            }
        }
        sites.push(SitePolicy { site: raw.id, kind: raw.kind, source_sid, targets });
    }
    let targets = sm
        .targets()
        .iter()
        .map(|(landing, sid_t)| ProtectedTarget {
            landing: landing.clone(),
            sid_t: *sid_t,
            sources: edges.remove(landing).unwrap_or_default(),
        })
        .collect();
    Ok(AuthorizationPolicy { kind: PolicyKind::Cfg, sites, targets })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EcReport {
    /// Static indirect call sites.
    pub sites: usize,
    pub avg_ec: f64,
    pub max_ec: usize,
    /// `100 * (1 - avg / baseline_avg)`, when a baseline was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_pct: Option<f64>,
}

fn ec_stats(policy: &AuthorizationPolicy) -> (usize, f64, usize) {
    let sizes: Vec<usize> = policy.call_sites().map(|s| s.targets.len()).collect();
    if sizes.is_empty() {
        return (0, 0.0, 0);
    }
    let avg = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    (sizes.len(), avg, sizes.iter().copied().max().unwrap_or(0))
}

pub fn ec_report(policy: &AuthorizationPolicy, baseline: Option<&AuthorizationPolicy>) -> EcReport {
    let (sites, avg_ec, max_ec) = ec_stats(policy);
    let reduction_pct = baseline.and_then(|b| {
        let (n, base_avg, _) = ec_stats(b);
        (n > 0 && sites > 0 && base_avg > 0.0).then(|| 100.0 * (1.0 - avg_ec / base_avg))
    });
    EcReport { sites, avg_ec, max_ec, reduction_pct }
}

/// `policy-v1` JSON document.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyDocument {
    pub schema: &'static str,
    pub kind: PolicyKind,
    pub granularity: &'static str,
    pub regions: Vec<RegionEntry>,
    pub landing_sites: Vec<LandingEntry>,
    pub sites: Vec<SitePolicy>,
    pub allowed_sources: Vec<ProtectedTarget>,
    pub ec: EcReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionEntry {
    pub region: String,
    pub sid: Sid,
}

#[derive(Debug, Clone, Serialize)]
pub struct LandingEntry {
    pub landing: LandingSite,
    pub sid_t: Sid,
}

impl PolicyDocument {
    pub fn new(sm: &SidMap, policy: &AuthorizationPolicy) -> Self {
        PolicyDocument {
            schema: "policy-v1",
            kind: policy.kind,
            granularity: sm.granularity().name(),
            regions: sm.regions().iter().map(|(r, s)| RegionEntry { region: r.to_string(), sid: *s }).collect(),
            landing_sites: sm.targets().iter().map(|(l, s)| LandingEntry { landing: l.clone(), sid_t: *s }).collect(),
            sites: policy.sites.clone(),
            allowed_sources: policy.targets.clone(),
            ec: ec_report(policy, None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn sid(v: u32) -> Sid {
        Sid::new(v).unwrap()
    }

    const THREE_FNS: &str = "\
.func f1() -> void
a:
    addi a0, a0, 1
b:
    ecall
.func f2() -> void
a:
    ecall
.func f3() -> void
a:
    ecall
";

    #[test]
    fn function_granularity_numbers_in_order() {
        let p = parse_program(&format!(".entry f1\n{THREE_FNS}")).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        let got: Vec<_> = sm.regions().iter().map(|(r, s)| (r.clone(), s.get())).collect();
        assert_eq!(
            got,
            vec![
                (Region::Function("f1".into()), 1),
                (Region::Function("f2".into()), 2),
                (Region::Function("f3".into()), 3)
            ]
        );
        assert_eq!(sm.source_sid(&BlockRef::new("f1", "b")), Some(sid(1)));
    }

    #[test]
    fn module_granularity_is_one_region() {
        let p = parse_program(&format!(".entry f1\n{THREE_FNS}")).unwrap();
        let sm = assign_sids(&p, &Granularity::Module).unwrap();
        assert_eq!(sm.regions(), &[(Region::Module, sid(1))]);
        for f in ["f1", "f2", "f3"] {
            assert_eq!(sm.source_sid(&BlockRef::new(f, "a")), Some(sid(1)));
        }
    }

    #[test]
    fn basic_block_granularity_two_by_two() {
        let src = "\
.func f() -> void
a:
    addi a0, a0, 1
b:
    ecall
.func main() -> void
c:
    addi a0, a0, 1
d:
    ecall
";
        let p = parse_program(src).unwrap();
        let sm = assign_sids(&p, &Granularity::BasicBlock).unwrap();
        let sids: Vec<u32> = sm.regions().iter().map(|(_, s)| s.get()).collect();
        assert_eq!(sids, vec![1, 2, 3, 4]);
    }

    #[test]
    fn custom_grouping_must_cover() {
        let p = parse_program(&format!(".entry f1\n{THREE_FNS}")).unwrap();
        let mut map = BTreeMap::new();
        map.insert(BlockRef::new("f1", "a"), "priv".to_string());
        map.insert(BlockRef::new("f1", "b"), "gen".to_string());
        map.insert(BlockRef::new("f2", "a"), "priv".to_string());
        assert_eq!(
            assign_sids(&p, &Granularity::Custom(map.clone())).unwrap_err(),
            PolicyError::UncoveredBlock(BlockRef::new("f3", "a"))
        );
        map.insert(BlockRef::new("f3", "a"), "gen".to_string());
        let sm = assign_sids(&p, &Granularity::Custom(map.clone())).unwrap();
        assert_eq!(sm.regions().len(), 2);
        assert_eq!(sm.source_sid(&BlockRef::new("f2", "a")), Some(sid(1)));
        assert_eq!(sm.source_sid(&BlockRef::new("f3", "a")), Some(sid(2)));
        map.insert(BlockRef::new("f9", "a"), "gen".to_string());
        assert!(matches!(assign_sids(&p, &Granularity::Custom(map)), Err(PolicyError::UnknownBlock(_))));
    }

    const FAMILY: &str = "\
.entry main
.func main() -> void
s1:
    la t0, g
    jalr ra, t0, 0 @indirect kind=call sig=(int)->int targets=[g]
s2:
    la t0, h
    jalr ra, t0, 0 @indirect kind=call sig=()->void targets=[u]
done:
    ecall
.func g(int) -> int
e:
    jalr zero, ra, 0
.func h(int) -> int
e:
    jalr zero, ra, 0
.func u() -> void
e:
    jalr zero, ra, 0
.rodata tbl
    .addr u
";

    #[test]
    fn func_policy_groups_same_signature() {
        let p = parse_program(FAMILY).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        let pol = build_func_policy(&p, &sm).unwrap();
        let s1 = pol.site(&SiteId::new("main", "s1")).unwrap();
        assert_eq!(s1.targets, vec![LandingSite::new("g", "e"), LandingSite::new("h", "e")]);
        let g_t = sm.target_sid(&LandingSite::new("g", "e")).unwrap();
        assert_eq!(pol.allowed(g_t).unwrap(), &BTreeSet::from([sid(1)]));
    }

    #[test]
    fn func_policy_site_without_match_has_empty_ec() {
        let src = "\
.func main() -> void
s:
    la t0, g
    jalr ra, t0, 0 @indirect kind=call sig=(ptr)->void targets=[g]
t:
    ecall
.func g(int) -> int
e:
    jalr zero, ra, 0
";
        let p = parse_program(src).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        let pol = build_func_policy(&p, &sm).unwrap();
        assert!(pol.sites[0].targets.is_empty());
        let g_t = sm.target_sid(&LandingSite::new("g", "e")).unwrap();
        assert!(pol.allowed(g_t).unwrap().is_empty());
    }

    #[test]
    fn func_policy_requires_signature() {
        let src = "\
.func main() -> void
s:
    la t0, g
    jalr ra, t0, 0 @indirect kind=call targets=[g]
t:
    ecall
.func g() -> void
e:
    jalr zero, ra, 0
";
        let p = parse_program(src).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        assert!(matches!(build_func_policy(&p, &sm), Err(PolicyError::MissingSignature(_))));
    }

    #[test]
    fn cfg_single_edge_and_refinement() {
        let p = parse_program(FAMILY).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        let cfg = build_cfg_policy(&p, &sm).unwrap();
        let func = build_func_policy(&p, &sm).unwrap();
        let g_t = sm.target_sid(&LandingSite::new("g", "e")).unwrap();
        let main_sid = sm.source_sid(&BlockRef::new("main", "s1")).unwrap();
        assert_eq!(cfg.allowed(g_t).unwrap(), &BTreeSet::from([main_sid]));
        let s1 = SiteId::new("main", "s1");
        assert_eq!(cfg.site(&s1).unwrap().targets, vec![LandingSite::new("g", "e")]);
        assert_eq!(func.site(&s1).unwrap().targets.len(), 2);
        let h_t = sm.target_sid(&LandingSite::new("h", "e")).unwrap();
        assert!(cfg.allowed(h_t).unwrap().is_empty());
    }

    #[test]
    fn cfg_rejects_non_address_taken_target() {
        let src = "\
.func main() -> void
s:
    la t0, g
    jalr ra, t0, 0 @indirect kind=call sig=()->void targets=[g,k]
t:
    ecall
.func g() -> void
e:
    jalr zero, ra, 0
.func k() -> void
e:
    jalr zero, ra, 0
";
        let p = parse_program(src).unwrap();
        let sm = assign_sids(&p, &Granularity::Function).unwrap();
        assert_eq!(
            build_cfg_policy(&p, &sm).unwrap_err(),
            PolicyError::InvalidTarget { site: SiteId::new("main", "s"), target: "k".into() }
        );
    }

    #[test]
    fn cfg_switch_protects_every_case() {
        let mut src = String::from(".func main() -> void\nd:\n    la t0, main.c0\n    @indirect kind=jump targets=[");
        src.push_str(&(0..10).map(|i| format!("c{i}")).collect::<Vec<_>>().join(","));
        src.push_str("]\n    jalr zero, t0, 0\n");
        for i in 0..10 {
            src.push_str(&format!("c{i}:\n    addi a0, a0, {i}\n    jal zero, out\n"));
        }
        src.push_str("out:\n    ecall\n");
        let p = parse_program(&src).unwrap();
        let sm = assign_sids(&p, &Granularity::BasicBlock).unwrap();
        let cfg = build_cfg_policy(&p, &sm).unwrap();
        let dispatch = sm.source_sid(&BlockRef::new("main", "d")).unwrap();
        assert_eq!(cfg.targets.len(), 10);
        for t in &cfg.targets {
            assert_eq!(t.sources, BTreeSet::from([dispatch]));
        }
        let func = build_func_policy(&p, &sm).unwrap();
        assert!(func.targets.is_empty() && func.sites.is_empty());
    }

    #[test]
    fn ec_examples() {
        let mk = |sizes: &[usize]| AuthorizationPolicy {
            kind: PolicyKind::Cfg,
            sites: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| SitePolicy {
                    site: SiteId::new("f", format!("s{i}")),
                    kind: SiteKind::IndirectCall,
                    source_sid: sid(1),
                    targets: (0..n).map(|j| LandingSite::new(format!("t{j}"), "e")).collect(),
                })
                .collect(),
            targets: Vec::new(),
        };
        let r = ec_report(&mk(&[2, 1]), None);
        assert_eq!((r.sites, r.avg_ec, r.max_ec), (2, 1.5, 2));
        let r = ec_report(&mk(&[3, 1]), None);
        assert_eq!((r.avg_ec, r.max_ec), (2.0, 3));
        let r = ec_report(&mk(&[1, 1]), Some(&mk(&[2, 2])));
        assert_eq!(r.reduction_pct, Some(50.0));
        let r = ec_report(&mk(&[]), Some(&mk(&[2])));
        assert_eq!((r.sites, r.avg_ec, r.reduction_pct), (0, 0.0, None));
    }

    #[test]
    fn deterministic() {
        let p = parse_program(FAMILY).unwrap();
        for g in [Granularity::Module, Granularity::Function, Granularity::BasicBlock] {
            let a = assign_sids(&p, &g).unwrap();
            let b = assign_sids(&p, &g).unwrap();
            assert_eq!(a, b);
            assert_eq!(build_cfg_policy(&p, &a).unwrap(), build_cfg_policy(&p, &b).unwrap());
            assert_eq!(build_func_policy(&p, &a).unwrap(), build_func_policy(&p, &b).unwrap());
        }
    }
}
