use crate::dataplane::PacketHeader;
use crate::policy::{Outcome, Policy};

/// Index of the winning policy: highest priority, earliest in the list on ties.
pub fn winning_policy<'a, I>(policies: I, pkt: &PacketHeader) -> Option<usize>
where
    I: IntoIterator<Item = &'a Policy>,
{
    let mut best: Option<(usize, u32)> = None;
    for (i, p) in policies.into_iter().enumerate() {
        if p.match_fields.matches(pkt) && best.is_none_or(|(_, prio)| p.priority > prio) {
            best = Some((i, p.priority));
        }
    }
    best.map(|(i, _)| i)
}

/// Reference semantics of an ordered policy list. No match is a deny.
pub fn decide(policies: &[Policy], pkt: &PacketHeader) -> Outcome {
    winning_policy(policies, pkt).map_or(Outcome::DefaultDeny, |i| policies[i].decision.into())
}

/// `decide` over `first` followed by `second`, without concatenating.
pub fn decide_merged(first: &[Policy], second: &[Policy], pkt: &PacketHeader) -> Outcome {
    let all: Vec<&Policy> = first.iter().chain(second).collect();
    winning_policy(all.iter().copied(), pkt).map_or(Outcome::DefaultDeny, |i| all[i].decision.into())
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;
    use crate::dataplane::{MatchFields, Protocol};

    const DP: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 5);

    fn to(dst: Ipv4Addr) -> PacketHeader {
        PacketHeader::new(Ipv4Addr::new(10, 0, 0, 1), dst, 1000, 80, Protocol::Tcp)
    }

    #[test]
    fn empty_set_default_denies() {
        assert_eq!(decide(&[], &to(DP)), Outcome::DefaultDeny);
    }

    #[test]
    fn higher_priority_allow_wins() {
        let set = [
            Policy::allow(5, MatchFields::any().dst_host(DP)),
            Policy::deny(1, MatchFields::any()),
        ];
        assert_eq!(decide(&set, &to(DP)), Outcome::Allow);
        assert_eq!(decide(&set, &to(Ipv4Addr::new(10, 0, 0, 6))), Outcome::Deny);
    }

    #[test]
    fn ties_go_to_earliest() {
        let set = [
            Policy::deny(5, MatchFields::any().dst_host(DP)),
            Policy::allow(5, MatchFields::any().dst_host(DP)),
        ];
        assert_eq!(decide(&set, &to(DP)), Outcome::Deny);
        assert_eq!(decide_merged(&set[1..], &set[..1], &to(DP)), Outcome::Allow);
    }
}
