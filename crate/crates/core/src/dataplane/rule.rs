use std::fmt;
use std::ops::RangeInclusive;

use crate::dataplane::MatchFields;
use crate::{DomainId, PortId, SubscriberId, Tick};

/// Priorities available to rules compiled from remote policy transfers.
pub const REMOTE_RPT_BAND: RangeInclusive<u16> = 0..=9_999;
/// Priorities available to rules compiled from local policy transfers.
pub const LOCAL_PT_BAND: RangeInclusive<u16> = 10_000..=19_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleAction {
    Drop,
    Forward(PortId),
    /// Continue matching in a later table of the same pipeline.
    GotoTable(usize),
    /// Admit at most `max_new_flows` distinct flows per aligned window of
    /// `window_ticks`; admitted packets continue as if the rule had missed.
    RateLimit {
        max_new_flows: u32,
        window_ticks: Tick,
    },
    SendToController,
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleAction::Drop => f.write_str("drop"),
            RuleAction::Forward(p) => write!(f, "forward:{}", p.0),
            RuleAction::GotoTable(t) => write!(f, "goto:{t}"),
            RuleAction::RateLimit {
                max_new_flows,
                window_ticks,
            } => write!(f, "ratelimit:{max_new_flows}/{window_ticks}"),
            RuleAction::SendToController => f.write_str("controller"),
        }
    }
}

/// Who asked for a rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    /// The domain's own control plane: routing, ACL, anti-spoofing.
    LocalCore,
    LocalPt(SubscriberId),
    RemoteRpt(DomainId, SubscriberId),
}

impl Origin {
    pub fn is_peps(&self) -> bool {
        !matches!(self, Origin::LocalCore)
    }

    /// Priority band the origin is confined to, if any.
    pub fn band(&self) -> Option<RangeInclusive<u16>> {
        match self {
            Origin::LocalCore => None,
            Origin::LocalPt(_) => Some(LOCAL_PT_BAND),
            Origin::RemoteRpt(..) => Some(REMOTE_RPT_BAND),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::LocalCore => f.write_str("core"),
            Origin::LocalPt(s) => write!(f, "pt:{s}"),
            Origin::RemoteRpt(d, s) => write!(f, "rpt:{d}/{s}"),
        }
    }
}

/// Selects rules by origin for bulk removal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginFilter {
    LocalCore,
    AnyLocalPt,
    LocalPt(SubscriberId),
    AnyRemoteRpt,
    RemoteRptFrom(DomainId),
    RemoteRpt(DomainId, SubscriberId),
}

impl OriginFilter {
    pub fn matches(&self, origin: &Origin) -> bool {
        match (self, origin) {
            (OriginFilter::LocalCore, Origin::LocalCore) => true,
            (OriginFilter::AnyLocalPt, Origin::LocalPt(_)) => true,
            (OriginFilter::LocalPt(a), Origin::LocalPt(b)) => a == b,
            (OriginFilter::AnyRemoteRpt, Origin::RemoteRpt(..)) => true,
            (OriginFilter::RemoteRptFrom(d), Origin::RemoteRpt(e, _)) => d == e,
            (OriginFilter::RemoteRpt(d, s), Origin::RemoteRpt(e, t)) => d == e && s == t,
            _ => false,
        }
    }
}

/// A rule as requested, before the pipeline assigns it an id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleSpec {
    pub match_fields: MatchFields,
    pub action: RuleAction,
    pub priority: u16,
    pub table_index: usize,
    pub origin: Origin,
}

impl RuleSpec {
    pub fn core(table_index: usize, priority: u16, m: MatchFields, action: RuleAction) -> Self {
        Self {
            match_fields: m,
            action,
            priority,
            table_index,
            origin: Origin::LocalCore,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowRule {
    pub match_fields: MatchFields,
    pub action: RuleAction,
    pub priority: u16,
    pub table_index: usize,
    pub origin: Origin,
    pub rule_id: RuleId,
}

impl FlowRule {
    pub fn from_spec(spec: RuleSpec, rule_id: RuleId) -> Self {
        Self {
            match_fields: spec.match_fields,
            action: spec.action,
            priority: spec.priority,
            table_index: spec.table_index,
            origin: spec.origin,
            rule_id,
        }
    }

    pub fn spec(&self) -> RuleSpec {
        RuleSpec {
            match_fields: self.match_fields,
            action: self.action,
            priority: self.priority,
            table_index: self.table_index,
            origin: self.origin.clone(),
        }
    }

    /// Ordering key: higher priority first, then lower rule id.
    pub(crate) fn rank(&self) -> (std::cmp::Reverse<u16>, RuleId) {
        (std::cmp::Reverse(self.priority), self.rule_id)
    }
}
