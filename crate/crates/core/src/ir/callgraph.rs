use serde::Serialize;

use super::{Program, SiteKind, TypeSignature};

/// Identity of an indirect site. A block holds at most one transfer, so the
/// enclosing block names the site.
pub type SiteId = super::BlockRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndirectSite {
    pub id: SiteId,
    pub kind: SiteKind,
    pub declared_signature: Option<TypeSignature>,
    pub possible_targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallGraphSummary {
    pub sites: Vec<IndirectSite>,
    /// `(function, address_taken)` in declaration order.
    pub address_taken: Vec<(String, bool)>,
}

impl CallGraphSummary {
    pub fn edge_count(&self) -> usize {
        self.sites.iter().map(|s| s.possible_targets.len()).sum()
    }

    pub fn is_address_taken(&self, function: &str) -> bool {
        self.address_taken.iter().any(|(f, t)| f == function && *t)
    }
}

pub fn build_callgraph(p: &Program) -> CallGraphSummary {
    let sites = p
        .instructions()
        .filter_map(|(f, b, _, ins)| {
            ins.site().map(|info| IndirectSite {
                id: SiteId::new(&f.name, &b.label),
                kind: info.kind,
                declared_signature: info.declared_signature.clone(),
                possible_targets: info.possible_targets.clone(),
            })
        })
        .collect();
    let address_taken = p.functions.iter().map(|f| (f.name.clone(), f.address_taken)).collect();
    CallGraphSummary { sites, address_taken }
}
