use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::{PortId, SwitchId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ZoneId(pub u32);

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ZoneId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ZoneId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecurityClass {
    Secure,
    NonSecure,
}

impl fmt::Display for SecurityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecurityClass::Secure => "secure",
            SecurityClass::NonSecure => "nonsecure",
        })
    }
}

impl FromStr for SecurityClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secure" => Ok(SecurityClass::Secure),
            "nonsecure" => Ok(SecurityClass::NonSecure),
            other => Err(format!("unknown security class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationZone {
    pub id: ZoneId,
    pub label: String,
    pub class: SecurityClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attachment {
    pub switch: SwitchId,
    pub port: PortId,
    pub last_seen: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeoError {
    #[error("{0}:{1} is not mapped to any zone")]
    UnmappedPort(SwitchId, PortId),
    #[error("{0}:{1} is already mapped to zone {2}")]
    PortAlreadyMapped(SwitchId, PortId, ZoneId),
    #[error("zone {0} declared twice")]
    DuplicateZone(ZoneId),
}

/// Result of a sighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sighting {
    pub zone: ZoneId,
    /// The host was previously attached in a different zone.
    pub moved: bool,
    /// Zone of the previous attachment, if any.
    pub previous: Option<ZoneId>,
}

/// Where each host was last seen, and which zone each access port covers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeoLocationTable {
    attachment: BTreeMap<Ipv4Addr, Attachment>,
    zone_map: BTreeMap<(SwitchId, PortId), ZoneId>,
    zones: BTreeMap<ZoneId, LocationZone>,
}

impl GeoLocationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_zone(
        &mut self,
        zone: LocationZone,
        ports: impl IntoIterator<Item = (SwitchId, PortId)>,
    ) -> Result<(), GeoError> {
        if self.zones.contains_key(&zone.id) {
            return Err(GeoError::DuplicateZone(zone.id));
        }
        let ports: Vec<_> = ports.into_iter().collect();
        for &(sw, p) in &ports {
            if let Some(&z) = self.zone_map.get(&(sw, p)) {
                return Err(GeoError::PortAlreadyMapped(sw, p, z));
            }
        }
        for key in ports {
            self.zone_map.insert(key, zone.id);
        }
        self.zones.insert(zone.id, zone);
        Ok(())
    }

    pub fn zone(&self, id: ZoneId) -> Option<&LocationZone> {
        self.zones.get(&id)
    }

    pub fn zones(&self) -> impl Iterator<Item = &LocationZone> {
        self.zones.values()
    }

    pub fn zone_at(&self, switch: SwitchId, port: PortId) -> Option<ZoneId> {
        self.zone_map.get(&(switch, port)).copied()
    }

    pub fn is_mapped(&self, switch: SwitchId, port: PortId) -> bool {
        self.zone_map.contains_key(&(switch, port))
    }

    pub fn attachment(&self, host: Ipv4Addr) -> Option<Attachment> {
        self.attachment.get(&host).copied()
    }

    pub fn attachments(&self) -> impl Iterator<Item = (Ipv4Addr, Attachment)> + '_ {
        self.attachment.iter().map(|(ip, a)| (*ip, *a))
    }

    pub fn zone_of_host(&self, host: Ipv4Addr) -> Option<ZoneId> {
        let a = self.attachment.get(&host)?;
        self.zone_at(a.switch, a.port)
    }

    /// Hosts currently attached in `zone`, in address order.
    pub fn hosts_in_zone(&self, zone: ZoneId) -> Vec<Ipv4Addr> {
        self.attachment
            .iter()
            .filter(|(_, a)| self.zone_at(a.switch, a.port) == Some(zone))
            .map(|(ip, _)| *ip)
            .collect()
    }

    /// Records that `host` was seen at `(switch, port)`.
    pub fn track_host(
        &mut self,
        host: Ipv4Addr,
        switch: SwitchId,
        port: PortId,
        now: Tick,
    ) -> Result<Sighting, GeoError> {
        let zone = self.zone_at(switch, port).ok_or(GeoError::UnmappedPort(switch, port))?;
        let previous = self.zone_of_host(host);
        self.attachment.insert(
            host,
            Attachment {
                switch,
                port,
                last_seen: now,
            },
        );
        Ok(Sighting {
            zone,
            moved: previous.is_some_and(|z| z != zone),
            previous,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: Ipv4Addr = Ipv4Addr::new(10, 1, 0, 7);

    fn table() -> GeoLocationTable {
        let mut g = GeoLocationTable::new();
        let zone = |id, label: &str| LocationZone {
            id: ZoneId(id),
            label: label.into(),
            class: SecurityClass::Secure,
        };
        g.add_zone(zone(1, "Location 1"), [(SwitchId(1), PortId(1))]).unwrap();
        g.add_zone(zone(2, "Location 2"), [(SwitchId(2), PortId(3))]).unwrap();
        g
    }

    #[test]
    fn first_sighting_then_move() {
        let mut g = table();
        let s = g.track_host(H, SwitchId(1), PortId(1), 0).unwrap();
        assert_eq!((s.zone, s.moved), (ZoneId(1), false));
        let s = g.track_host(H, SwitchId(2), PortId(3), 5).unwrap();
        assert_eq!((s.zone, s.moved, s.previous), (ZoneId(2), true, Some(ZoneId(1))));
        assert_eq!(g.attachment(H).unwrap().last_seen, 5);
        assert_eq!(g.hosts_in_zone(ZoneId(2)), vec![H]);
        assert!(g.hosts_in_zone(ZoneId(1)).is_empty());
    }

    #[test]
    fn unmapped_port_leaves_table_untouched() {
        let mut g = table();
        assert_eq!(
            g.track_host(H, SwitchId(1), PortId(9), 0),
            Err(GeoError::UnmappedPort(SwitchId(1), PortId(9)))
        );
        assert!(g.attachment(H).is_none());
    }

    #[test]
    fn port_maps_to_one_zone() {
        let mut g = table();
        let z = LocationZone {
            id: ZoneId(3),
            label: "x".into(),
            class: SecurityClass::NonSecure,
        };
        assert!(matches!(
            g.add_zone(z.clone(), [(SwitchId(1), PortId(1))]),
            Err(GeoError::PortAlreadyMapped(..))
        ));
        g.add_zone(z.clone(), [(SwitchId(1), PortId(2))]).unwrap();
        assert_eq!(g.add_zone(z, []), Err(GeoError::DuplicateZone(ZoneId(3))));
    }
}
