use thiserror::Error;

use crate::dataplane::{MatchFields, Origin, PacketHeader, RuleAction, RuleSpec};
use crate::policy::{ComposedPolicySet, Decision, HeaderUniverse, Policy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("{origin} carries {count} policies, band holds {width}")]
    BandOverflow { origin: String, count: usize, width: usize },
}

/// Compiles one transfer's policies into enforcement-table rules.
///
/// Policies are ranked by descending priority (stable, so list order breaks
/// ties) and rank `r` gets rule priority `band_end - r`. `Allow` emits no
/// rule, since a miss in the enforcement table already lets the packet
/// through.
pub fn compile_transfer(
    policies: &[Policy],
    origin: &Origin,
    table_index: usize,
) -> Result<Vec<RuleSpec>, CompileError> {
    let band = origin.band().expect("compile_transfer needs a transfer origin");
    let width = usize::from(band.end() - band.start()) + 1;
    if policies.len() > width {
        return Err(CompileError::BandOverflow {
            origin: origin.to_string(),
            count: policies.len(),
            width,
        });
    }
    let mut ranked: Vec<&Policy> = policies.iter().collect();
    ranked.sort_by_key(|r| std::cmp::Reverse(r.priority));
    let rules = ranked
        .into_iter()
        .enumerate()
        .filter_map(|(rank, p)| {
            let action = match p.decision {
                Decision::Allow => return None,
                Decision::Deny => RuleAction::Drop,
                Decision::RateLimit {
                    max_new_flows,
                    window_ticks,
                } => RuleAction::RateLimit {
                    max_new_flows,
                    window_ticks,
                },
            };
            Some(RuleSpec {
                match_fields: p.match_fields,
                action,
                priority: band.end() - rank as u16,
                table_index,
                origin: origin.clone(),
            })
        })
        .collect();
    Ok(rules)
}

/// Every accepted transfer in `set`, compiled. PTs first, then RPTs, each
/// in key order.
pub fn compile_to_rules(set: &ComposedPolicySet, last_table_index: usize) -> Result<Vec<RuleSpec>, CompileError> {
    let mut out = Vec::new();
    for (sub, pt) in &set.accepted_pt {
        out.extend(compile_transfer(
            &pt.policies,
            &Origin::LocalPt(sub.clone()),
            last_table_index,
        )?);
    }
    for ((dom, sub), rpt) in &set.accepted_rpt {
        out.extend(compile_transfer(
            &rpt.policies,
            &Origin::RemoteRpt(dom.clone(), sub.clone()),
            last_table_index,
        )?);
    }
    Ok(out)
}

fn fields_intersect(a: &MatchFields, b: &MatchFields) -> bool {
    fn same<T: PartialEq>(x: Option<T>, y: Option<T>) -> bool {
        match (x, y) {
            (Some(x), Some(y)) => x == y,
            _ => true,
        }
    }
    let nets = |x: Option<ipnet::Ipv4Net>, y: Option<ipnet::Ipv4Net>| match (x, y) {
        (Some(x), Some(y)) => x.contains(&y.network()) || y.contains(&x.network()),
        _ => true,
    };
    nets(a.src_ip, b.src_ip)
        && nets(a.dst_ip, b.dst_ip)
        && same(a.src_port, b.src_port)
        && same(a.dst_port, b.dst_port)
        && same(a.protocol, b.protocol)
        && same(a.in_port, b.in_port)
        && same(a.eth_src, b.eth_src)
}

/// Two policies conflict when some packet matches both and they decide it
/// differently.
pub fn conflicts(a: &Policy, b: &Policy) -> bool {
    a.decision != b.decision && fields_intersect(&a.match_fields, &b.match_fields)
}

/// A packet in `universe` on which `a` and `b` conflict, if any.
pub fn conflict_witness(a: &Policy, b: &Policy, universe: &HeaderUniverse) -> Option<PacketHeader> {
    if a.decision == b.decision {
        return None;
    }
    universe
        .packets()
        .find(|p| a.match_fields.matches(p) && b.match_fields.matches(p))
}
