use std::collections::BTreeMap;

use crate::dataplane::{FlowKey, FlowRule, PacketHeader};

/// A single flow table.
///
/// Rules that pin the full 5-tuple (reactive per-flow rules) live in an
/// exact-match index; everything else is scanned in rank order. Lookup takes
/// the better-ranked of the two candidates, so the result is the same as a
/// linear scan over all rules.
#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    exact: BTreeMap<FlowKey, Vec<FlowRule>>,
    general: Vec<FlowRule>,
    len: usize,
}

fn insert_ranked(rules: &mut Vec<FlowRule>, rule: FlowRule) {
    let pos = rules.partition_point(|r| r.rank() <= rule.rank());
    rules.insert(pos, rule);
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rules(rules: impl IntoIterator<Item = FlowRule>) -> Self {
        let mut table = Self::new();
        for r in rules {
            table.insert(r);
        }
        table
    }

    pub fn insert(&mut self, rule: FlowRule) {
        self.len += 1;
        match rule.match_fields.as_exact_flow() {
            Some(key) => insert_ranked(self.exact.entry(key).or_default(), rule),
            None => insert_ranked(&mut self.general, rule),
        }
    }

    /// Highest-priority matching rule; ties go to the smallest rule id.
    pub fn match_packet(&self, pkt: &PacketHeader) -> Option<&FlowRule> {
        let general = self.general.iter().find(|r| r.match_fields.matches(pkt));
        let exact = self.exact.get(&pkt.flow_key()).and_then(|rules| rules.first());
        match (general, exact) {
            (Some(g), Some(e)) => Some(if e.rank() < g.rank() { e } else { g }),
            (g, e) => g.or(e),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.general.iter().chain(self.exact.values().flatten())
    }

    /// Keeps rules for which `keep` holds; returns the removed rules.
    pub fn retain(&mut self, mut keep: impl FnMut(&FlowRule) -> bool) -> Vec<FlowRule> {
        let mut removed = Vec::new();
        let mut split = |rules: &mut Vec<FlowRule>| {
            let (kept, gone): (Vec<_>, Vec<_>) = rules.drain(..).partition(|r| keep(r));
            *rules = kept;
            removed.extend(gone);
        };
        split(&mut self.general);
        for rules in self.exact.values_mut() {
            split(rules);
        }
        self.exact.retain(|_, rules| !rules.is_empty());
        self.len -= removed.len();
        removed
    }
}

/// Free-function form of [`FlowTable::match_packet`].
pub fn match_in_table<'a>(table: &'a FlowTable, pkt: &PacketHeader) -> Option<&'a FlowRule> {
    table.match_packet(pkt)
}
