use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use crate::{DomainId, Tick};

/// Counters for one tick (or the whole run, for totals).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub dropped_at_source_edge: u64,
    pub dropped_in_transit: u64,
    pub dropped_at_dp_network: u64,
    pub dropped_at_dp_app: u64,
    pub delivered: u64,
    pub packet_in_count: u64,
    pub controller_msgs_processed: u64,
    /// Packet-ins the controllers actually handled; flow-handling throughput.
    pub packet_in_handled: u64,
    pub link_bytes: Vec<u64>,
}

impl Counters {
    pub fn with_links(n: usize) -> Self {
        Self {
            link_bytes: vec![0; n],
            ..Self::default()
        }
    }

    pub fn drops(&self) -> u64 {
        self.dropped_at_source_edge + self.dropped_in_transit + self.dropped_at_dp_network + self.dropped_at_dp_app
    }

    /// Packets that left the network one way or the other.
    pub fn finished(&self) -> u64 {
        self.drops() + self.delivered
    }
}

impl AddAssign<&Counters> for Counters {
    fn add_assign(&mut self, o: &Counters) {
        self.dropped_at_source_edge += o.dropped_at_source_edge;
        self.dropped_in_transit += o.dropped_in_transit;
        self.dropped_at_dp_network += o.dropped_at_dp_network;
        self.dropped_at_dp_app += o.dropped_at_dp_app;
        self.delivered += o.delivered;
        self.packet_in_count += o.packet_in_count;
        self.controller_msgs_processed += o.controller_msgs_processed;
        self.packet_in_handled += o.packet_in_handled;
        if self.link_bytes.len() < o.link_bytes.len() {
            self.link_bytes.resize(o.link_bytes.len(), 0);
        }
        for (a, b) in self.link_bytes.iter_mut().zip(&o.link_bytes) {
            *a += b;
        }
    }
}

pub const CSV_COUNTERS: [&str; 7] = [
    "dropped_at_source_edge",
    "dropped_in_transit",
    "dropped_at_dp_network",
    "dropped_at_dp_app",
    "delivered",
    "packet_in_count",
    "controller_msgs_processed",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub link_names: Vec<String>,
    /// Which links cross a domain boundary, parallel to `link_names`.
    pub interdomain: Vec<bool>,
    pub rows: Vec<(Tick, Counters)>,
    pub totals: Counters,
    pub injected: u64,
    pub drops_by_domain: BTreeMap<DomainId, u64>,
    /// Ids of the packets the data providers' inner PEPs granted.
    pub dp_grants: BTreeSet<u64>,
}

impl MetricsReport {
    pub fn link_bytes(&self, name: &str) -> Option<u64> {
        let i = self.link_names.iter().position(|n| n == name)?;
        Some(self.totals.link_bytes[i])
    }

    pub fn interdomain_bytes(&self) -> u64 {
        self.totals
            .link_bytes
            .iter()
            .zip(&self.interdomain)
            .filter(|(_, x)| **x)
            .map(|(b, _)| b)
            .sum()
    }

    /// injected = delivered + all drops.
    pub fn conserved(&self) -> bool {
        self.injected == self.totals.finished()
    }

    pub fn flow_throughput(&self) -> Vec<u64> {
        self.rows.iter().map(|(_, c)| c.packet_in_handled).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["tick".to_owned()];
        header.extend(CSV_COUNTERS.iter().map(|s| (*s).to_owned()));
        header.extend(self.link_names.iter().map(|l| format!("link_bytes:{l}")));
        w.write_record(&header).expect("in-memory write");
        let record = |tick: String, c: &Counters| {
            let mut r = vec![
                tick,
                c.dropped_at_source_edge.to_string(),
                c.dropped_in_transit.to_string(),
                c.dropped_at_dp_network.to_string(),
                c.dropped_at_dp_app.to_string(),
                c.delivered.to_string(),
                c.packet_in_count.to_string(),
                c.controller_msgs_processed.to_string(),
            ];
            r.extend(c.link_bytes.iter().map(u64::to_string));
            r
        };
        for (t, c) in &self.rows {
            w.write_record(record(t.to_string(), c)).expect("in-memory write");
        }
        w.write_record(record("TOTALS".into(), &self.totals))
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }
}
