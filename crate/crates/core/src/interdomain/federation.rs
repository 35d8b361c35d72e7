use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::controller::{
    Controller, ControllerError, PacketInOutcome, Report, Subscriber, SubscriberKind, TransferRef,
};
use crate::crypto::PublicKey;
use crate::dataplane::PacketHeader;
use crate::interdomain::{
    lbac_policies, ChannelId, EastWestChannel, Envelope, LbacSession, MessageType, SessionId, SessionState,
    DEFAULT_LATENCY,
};
use crate::location::ZoneId;
use crate::policy::{text::parse_transfer, RemotePolicyTransfer, ServiceAddress, Transfer};
use crate::{DomainId, PortId, SubscriberId, SwitchId, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FederationError {
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("domain {0} is already present")]
    DuplicateDomain(DomainId),
    #[error("{holder} has no key for {missing}")]
    MissingPeerKey { holder: DomainId, missing: DomainId },
    #[error("no working channel from {from} toward {to}")]
    ChannelDown { from: DomainId, to: DomainId },
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {session} still proposed: {reason}")]
    RptRejected { session: SessionId, reason: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Proof that an envelope was queued.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub channel: ChannelId,
    pub seq: u64,
    pub due: Tick,
}

/// An envelope that reached its hop destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbound {
    pub to: DomainId,
    pub channel: ChannelId,
    pub wire: String,
}

/// What a controller did with one inbound envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at: DomainId,
    pub from: Option<DomainId>,
    pub kind: Option<MessageType>,
    /// Forwarded toward another domain rather than consumed.
    pub relayed: bool,
    pub report: Report,
}

/// All controllers plus the east-west links between them.
#[derive(Debug, Clone)]
pub struct Federation {
    controllers: BTreeMap<DomainId, Controller>,
    channels: BTreeMap<ChannelId, EastWestChannel>,
    sessions: BTreeMap<SessionId, LbacSession>,
    next_session: u64,
    rpt_seq: BTreeMap<(DomainId, DomainId, SubscriberId), u64>,
    latency: Tick,
    now: Tick,
}

fn reject(reason: &'static str) -> Report {
    Report::Reject { reason, witness: None }
}

impl Default for Federation {
    fn default() -> Self {
        Self::new(DEFAULT_LATENCY)
    }
}

impl Federation {
    pub fn new(latency: Tick) -> Self {
        Self {
            controllers: BTreeMap::new(),
            channels: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            rpt_seq: BTreeMap::new(),
            latency,
            now: 0,
        }
    }

    pub fn add_controller(&mut self, ctrl: Controller) -> Result<(), FederationError> {
        let d = ctrl.domain().clone();
        if self.controllers.contains_key(&d) {
            return Err(FederationError::DuplicateDomain(d));
        }
        self.controllers.insert(d, ctrl);
        Ok(())
    }

    pub fn controller(&self, d: &DomainId) -> Option<&Controller> {
        self.controllers.get(d)
    }

    pub fn controller_mut(&mut self, d: &DomainId) -> Option<&mut Controller> {
        self.controllers.get_mut(d)
    }

    fn ctrl_mut(&mut self, d: &DomainId) -> Result<&mut Controller, FederationError> {
        self.controllers
            .get_mut(d)
            .ok_or_else(|| FederationError::UnknownDomain(d.clone()))
    }

    fn ctrl(&self, d: &DomainId) -> Result<&Controller, FederationError> {
        self.controllers
            .get(d)
            .ok_or_else(|| FederationError::UnknownDomain(d.clone()))
    }

    pub fn controllers(&self) -> impl Iterator<Item = &Controller> {
        self.controllers.values()
    }

    pub fn controllers_mut(&mut self) -> impl Iterator<Item = &mut Controller> {
        self.controllers.values_mut()
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainId> {
        self.controllers.keys()
    }

    /// Gives every controller every other controller's public key.
    pub fn provision_keys(&mut self) {
        let keys: Vec<(DomainId, PublicKey)> = self
            .controllers
            .iter()
            .map(|(d, c)| (d.clone(), c.public_key()))
            .collect();
        for (d, c) in &mut self.controllers {
            for (peer, key) in &keys {
                if peer != d {
                    c.add_peer(peer.clone(), *key);
                }
            }
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn advance_to(&mut self, now: Tick) {
        self.now = self.now.max(now);
        for c in self.controllers.values_mut() {
            c.advance_to(self.now);
        }
    }

    // ---- channels ----

    /// Opens (or reopens) the channel between `a` and `b`. Each side must
    /// already hold the other's key.
    pub fn connect_domains(&mut self, a: &DomainId, b: &DomainId) -> Result<ChannelId, FederationError> {
        for (holder, missing) in [(a, b), (b, a)] {
            let expected = self.ctrl(missing)?.public_key();
            if self.ctrl(holder)?.peer_key(missing) != Some(&expected) {
                return Err(FederationError::MissingPeerKey {
                    holder: holder.clone(),
                    missing: missing.clone(),
                });
            }
        }
        let id = ChannelId::new(a.clone(), b.clone());
        let latency = self.latency;
        self.channels
            .entry(id.clone())
            .or_insert_with(|| EastWestChannel::new(id.clone(), latency))
            .up = true;
        Ok(id)
    }

    /// Takes a channel down. Queued envelopes are discarded.
    pub fn disconnect(&mut self, a: &DomainId, b: &DomainId) {
        if let Some(ch) = self.channels.get_mut(&ChannelId::new(a.clone(), b.clone())) {
            ch.up = false;
            for q in &mut ch.queues {
                q.clear();
            }
        }
    }

    pub fn channel(&self, a: &DomainId, b: &DomainId) -> Option<&EastWestChannel> {
        self.channels.get(&ChannelId::new(a.clone(), b.clone()))
    }

    pub fn channels(&self) -> impl Iterator<Item = &EastWestChannel> {
        self.channels.values()
    }

    /// Test hook: corrupts the payload of the next envelope sent `from -> to`
    /// after it has been signed.
    pub fn tamper_next(&mut self, from: &DomainId, to: &DomainId) -> Result<(), FederationError> {
        let id = ChannelId::new(from.clone(), to.clone());
        let ch = self.channels.get_mut(&id).ok_or_else(|| FederationError::ChannelDown {
            from: from.clone(),
            to: to.clone(),
        })?;
        ch.tamper_next[id.direction(from)] = true;
        Ok(())
    }

    /// First hop on a shortest path of working channels.
    pub fn next_hop(&self, from: &DomainId, to: &DomainId) -> Option<DomainId> {
        let mut adj: BTreeMap<&DomainId, Vec<&DomainId>> = BTreeMap::new();
        for ch in self.channels.values().filter(|c| c.up) {
            adj.entry(&ch.id.a).or_default().push(&ch.id.b);
            adj.entry(&ch.id.b).or_default().push(&ch.id.a);
        }
        let mut first: BTreeMap<&DomainId, &DomainId> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for n in adj.get(from).into_iter().flatten() {
            if first.insert(n, n).is_none() {
                queue.push_back(*n);
            }
        }
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                return Some(first[cur].clone());
            }
            let hop = first[cur];
            for n in adj.get(cur).into_iter().flatten() {
                if *n != from && !first.contains_key(n) {
                    first.insert(n, hop);
                    queue.push_back(*n);
                }
            }
        }
        None
    }

    /// Queues `body` for `dest`, via intermediate domains if needed.
    pub fn send(
        &mut self,
        from: &DomainId,
        dest: &DomainId,
        kind: MessageType,
        body: &str,
    ) -> Result<Receipt, FederationError> {
        let down = || FederationError::ChannelDown {
            from: from.clone(),
            to: dest.clone(),
        };
        let hop = self.next_hop(from, dest).ok_or_else(down)?;
        let id = ChannelId::new(from.clone(), hop.clone());
        let key = self.ctrl(from)?.key_pair().clone();
        let ch = self.channels.get_mut(&id).ok_or_else(down)?;
        let dir = id.direction(from);
        let seq = ch.next_seq[dir];
        ch.next_seq[dir] += 1;
        let payload = format!("FOR {dest}\n{body}");
        let env = Envelope::signed(from.clone(), hop, seq, kind, payload, &key);
        let mut wire = env.to_string();
        if std::mem::take(&mut ch.tamper_next[dir]) {
            // flip one payload nibble; the payload starts after "TYPE <kind> "
            let at = wire.find(&format!("TYPE {kind} ")).expect("own format") + 6 + kind.to_string().len();
            let flipped = if wire.as_bytes()[at] == b'0' { "1" } else { "0" };
            wire.replace_range(at..at + 1, flipped);
        }
        let due = self.now + ch.latency;
        ch.queues[dir].push_back((due, wire));
        Ok(Receipt { channel: id, seq, due })
    }

    pub fn send_rpt(
        &mut self,
        from: &DomainId,
        dest: &DomainId,
        rpt: &RemotePolicyTransfer,
        session: Option<SessionId>,
    ) -> Result<Receipt, FederationError> {
        let mut body = String::new();
        if let Some(s) = session {
            body.push_str(&format!("SESSION {s}\n"));
        }
        body.push_str(&rpt.to_text());
        self.send(from, dest, MessageType::Rpt, &body)
    }

    pub fn in_flight(&self) -> usize {
        self.channels.values().map(EastWestChannel::in_flight).sum()
    }

    pub fn next_due(&self) -> Option<Tick> {
        self.channels.values().filter_map(EastWestChannel::next_due).min()
    }

    /// Removes every envelope due at or before `now`, in channel order then
    /// direction then FIFO.
    pub fn take_due(&mut self, now: Tick) -> Vec<Inbound> {
        let mut out = Vec::new();
        for ch in self.channels.values_mut() {
            for dir in 0..2 {
                let to = if dir == 0 { &ch.id.b } else { &ch.id.a };
                while ch.queues[dir].front().is_some_and(|(due, _)| *due <= now) {
                    let (_, wire) = ch.queues[dir].pop_front().expect("front checked");
                    out.push(Inbound {
                        to: to.clone(),
                        channel: ch.id.clone(),
                        wire,
                    });
                }
            }
        }
        out
    }

    /// Delivers queued envelopes until every channel is empty, advancing
    /// time as needed.
    pub fn pump(&mut self) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(due) = self.next_due() {
            self.advance_to(due);
            for inbound in self.take_due(self.now) {
                out.push(self.handle_inbound(inbound));
            }
        }
        out
    }

    /// Verifies and acts on one envelope at its hop destination. Nothing on
    /// the receiving side changes unless the signature and sequence check.
    pub fn handle_inbound(&mut self, inbound: Inbound) -> Delivery {
        let at = inbound.to.clone();
        let mut delivery = Delivery {
            at: at.clone(),
            from: None,
            kind: None,
            relayed: false,
            report: Report::Accept,
        };
        let Ok(env) = inbound.wire.parse::<Envelope>() else {
            delivery.report = reject("Malformed");
            return delivery;
        };
        delivery.from = Some(env.from.clone());
        delivery.kind = Some(env.kind);
        let Some(ctrl) = self.controllers.get(&at) else {
            delivery.report = reject("UnknownDomain");
            return delivery;
        };
        let verified = env.to == at && ctrl.peer_key(&env.from).is_some_and(|k| env.verify(k));
        if !verified {
            delivery.report = reject("BadSignature");
            return delivery;
        }
        let Some(ch) = self.channels.get_mut(&inbound.channel) else {
            delivery.report = reject("ChannelDown");
            return delivery;
        };
        let dir = inbound.channel.direction(&env.from);
        if env.seq <= ch.last_accepted[dir] {
            delivery.report = reject("StaleSequence");
            return delivery;
        }
        ch.last_accepted[dir] = env.seq;

        let Some((dest, body)) = env
            .payload
            .split_once('\n')
            .and_then(|(first, body)| Some((first.strip_prefix("FOR ")?, body)))
        else {
            delivery.report = reject("Malformed");
            return delivery;
        };
        let dest = DomainId::new(dest);
        if dest != at {
            delivery.relayed = true;
            if self.send(&at, &dest, env.kind, body).is_err() {
                delivery.report = reject("ChannelDown");
            }
            return delivery;
        }
        delivery.report = match env.kind {
            MessageType::Rpt => self.on_rpt(&at, body),
            MessageType::Session | MessageType::Binding => self.on_bindings(&at, body),
        };
        delivery
    }

    fn on_rpt(&mut self, at: &DomainId, body: &str) -> Report {
        let (session, text) = match body.split_once('\n') {
            Some((first, rest)) if first.starts_with("SESSION ") => match first["SESSION ".len()..].parse::<u64>() {
                Ok(id) => (Some(SessionId(id)), rest),
                Err(_) => return reject("Malformed"),
            },
            _ => (None, body),
        };
        let Ok(Transfer::Remote(rpt)) = parse_transfer(text) else {
            return reject("Malformed");
        };
        if let Some(sid) = session {
            match self.sessions.get(&sid) {
                Some(s) if s.state == SessionState::TornDown => return reject("SessionClosed"),
                Some(s) if s.requestor == *at => {}
                _ => return reject("UnknownSession"),
            }
        }
        let result = match self.controllers.get_mut(at) {
            Some(c) => c.receive_rpt(&rpt),
            None => return reject("UnknownDomain"),
        };
        let report = Report::from_result(&result);
        if let Some(s) = session.and_then(|sid| self.sessions.get_mut(&sid)) {
            match &result {
                Ok(_) => {
                    s.state = SessionState::Active;
                    s.last_error = None;
                }
                Err(e) => s.last_error = Some(e.reason().to_owned()),
            }
        }
        report
    }

    /// Provider side of a session open or binding update.
    fn on_bindings(&mut self, at: &DomainId, body: &str) -> Report {
        let mut lines = body.lines();
        let Some(head) = lines.next() else {
            return reject("Malformed");
        };
        let toks: Vec<&str> = head.split(' ').collect();
        let sid = match toks[..] {
            ["OPEN", sid, _] | ["UPDATE", sid] => match sid.parse() {
                Ok(n) => SessionId(n),
                Err(_) => return reject("Malformed"),
            },
            _ => return reject("Malformed"),
        };
        let mut bindings = BTreeSet::new();
        for line in lines {
            let toks: Vec<&str> = line.split(' ').collect();
            let ["BIND", ip, zone] = toks[..] else {
                return reject("Malformed");
            };
            match (ip.parse::<Ipv4Addr>(), zone.parse::<ZoneId>()) {
                (Ok(ip), Ok(z)) => bindings.insert((ip, z)),
                _ => return reject("Malformed"),
            };
        }
        let Some(s) = self.sessions.get_mut(&sid) else {
            return reject("UnknownSession");
        };
        if s.provider != *at {
            return reject("UnknownSession");
        }
        if s.state == SessionState::TornDown {
            return reject("SessionClosed");
        }
        let opening = head.starts_with("OPEN");
        s.bindings = bindings;
        let permitted = s.permitted_hosts();
        if !opening && permitted == s.bound_hosts {
            return Report::Accept;
        }
        s.bound_hosts = permitted.clone();
        let (requestor, sub) = (s.requestor.clone(), s.subscriber.clone());
        match self.issue_session_rpt(sid, at, &requestor, &sub, &permitted) {
            Ok(_) => Report::Accept,
            Err(FederationError::Controller(e)) => Report::from_error(&e),
            Err(FederationError::ChannelDown { .. }) => reject("ChannelDown"),
            Err(_) => reject("UnknownSubscriber"),
        }
    }

    fn issue_session_rpt(
        &mut self,
        sid: SessionId,
        provider: &DomainId,
        requestor: &DomainId,
        sub: &SubscriberId,
        permitted: &BTreeSet<Ipv4Addr>,
    ) -> Result<Receipt, FederationError> {
        let ctrl = self.ctrl(provider)?;
        let scope = ctrl
            .subscriber(sub)
            .ok_or_else(|| ControllerError::UnknownSubscriber(sub.to_string()))?
            .service_address
            .clone();
        let key = ctrl.key_pair().clone();
        let seq = self
            .rpt_seq
            .entry((provider.clone(), requestor.clone(), sub.clone()))
            .or_insert(0);
        *seq += 1;
        let rpt = RemotePolicyTransfer::new(
            provider.clone(),
            sub.clone(),
            scope.clone(),
            *seq,
            lbac_policies(permitted, &scope),
        )
        .signed(&key);
        self.send_rpt(provider, requestor, &rpt, Some(sid))
    }

    /// Next sequence number this federation would use for an RPT from
    /// `provider` to `requestor` about `sub`; reserves it.
    pub fn reserve_rpt_seq(&mut self, provider: &DomainId, requestor: &DomainId, sub: &SubscriberId) -> u64 {
        let seq = self
            .rpt_seq
            .entry((provider.clone(), requestor.clone(), sub.clone()))
            .or_insert(0);
        *seq += 1;
        *seq
    }

    // ---- subscribers ----

    /// Registers a service at its home domain and, as a remote subscriber,
    /// at every other domain.
    pub fn announce_subscriber(
        &mut self,
        home: &DomainId,
        id: SubscriberId,
        address: ServiceAddress,
        key: PublicKey,
    ) -> Result<(), FederationError> {
        let home_key = self.ctrl(home)?.public_key();
        for (d, c) in &mut self.controllers {
            let (kind, key) = if d == home {
                (SubscriberKind::LocalApp, key)
            } else {
                (SubscriberKind::RemoteDomainApp(home.clone()), home_key)
            };
            c.register_subscriber(Subscriber {
                id: id.clone(),
                service_address: address.clone(),
                key,
                kind,
            })?;
        }
        Ok(())
    }

    // ---- sessions ----

    pub fn session(&self, id: SessionId) -> Option<&LbacSession> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &LbacSession> {
        self.sessions.values()
    }

    fn binding_lines(&self, requestor: &DomainId) -> String {
        let Some(ctrl) = self.controllers.get(requestor) else {
            return String::new();
        };
        let geo = ctrl.geo();
        geo.attachments()
            .filter_map(|(ip, _)| geo.zone_of_host(ip).map(|z| format!("BIND {ip} {z}\n")))
            .collect()
    }

    /// Starts a session: the requestor reports its current host bindings
    /// and the provider answers with an RPT. Returns while the session is
    /// still `Proposed`; deliveries happen as channels are serviced.
    pub fn start_lbac_session(
        &mut self,
        provider: &DomainId,
        requestor: &DomainId,
        subscriber: SubscriberId,
        allowed_zones: BTreeSet<ZoneId>,
    ) -> Result<SessionId, FederationError> {
        self.ctrl(provider)?
            .subscriber(&subscriber)
            .ok_or_else(|| ControllerError::UnknownSubscriber(subscriber.to_string()))?;
        self.ctrl(requestor)?;
        let id = SessionId(self.next_session);
        let body = format!("OPEN {id} {subscriber}\n{}", self.binding_lines(requestor));
        self.send(requestor, provider, MessageType::Session, &body)?;
        self.next_session += 1;
        self.sessions.insert(
            id,
            LbacSession {
                id,
                provider: provider.clone(),
                requestor: requestor.clone(),
                subscriber,
                allowed_zones,
                bindings: BTreeSet::new(),
                bound_hosts: BTreeSet::new(),
                state: SessionState::Proposed,
                last_error: None,
            },
        );
        Ok(id)
    }

    /// Starts a session and services channels until it settles.
    pub fn open_lbac_session(
        &mut self,
        provider: &DomainId,
        requestor: &DomainId,
        subscriber: SubscriberId,
        allowed_zones: BTreeSet<ZoneId>,
    ) -> Result<SessionId, FederationError> {
        let id = self.start_lbac_session(provider, requestor, subscriber, allowed_zones)?;
        self.pump();
        let s = &self.sessions[&id];
        match s.state {
            SessionState::Active => Ok(id),
            _ => Err(FederationError::RptRejected {
                session: id,
                reason: s.last_error.clone().unwrap_or_else(|| "no answer".into()),
            }),
        }
    }

    /// Revokes the session's rules at the requestor. Idempotent; a session
    /// that never became active is left as is.
    pub fn teardown(&mut self, id: SessionId) -> Result<(), FederationError> {
        let s = self.sessions.get_mut(&id).ok_or(FederationError::UnknownSession(id))?;
        if s.state != SessionState::Active {
            return Ok(());
        }
        s.state = SessionState::TornDown;
        let t = TransferRef::Remote(s.provider.clone(), s.subscriber.clone());
        let requestor = s.requestor.clone();
        let still_used = self.sessions.values().any(|o| {
            o.state == SessionState::Active
                && o.requestor == requestor
                && TransferRef::Remote(o.provider.clone(), o.subscriber.clone()) == t
        });
        if !still_used {
            match self.ctrl_mut(&requestor)?.revoke_transfer(&t) {
                Ok(_) | Err(ControllerError::NotFound(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Pushes the requestor's current bindings to every live session it
    /// takes part in.
    pub fn push_bindings(&mut self, requestor: &DomainId) -> Vec<Result<Receipt, FederationError>> {
        let live: Vec<(SessionId, DomainId)> = self
            .sessions
            .values()
            .filter(|s| s.requestor == *requestor && s.state != SessionState::TornDown)
            .map(|s| (s.id, s.provider.clone()))
            .collect();
        let lines = self.binding_lines(requestor);
        live.into_iter()
            .map(|(id, provider)| {
                let body = format!("UPDATE {id}\n{lines}");
                self.send(requestor, &provider, MessageType::Binding, &body)
            })
            .collect()
    }

    /// Packet-in at `domain`. A new or moved host triggers a binding push.
    pub fn handle_packet_in(
        &mut self,
        domain: &DomainId,
        sw: SwitchId,
        port: PortId,
        pkt: &PacketHeader,
    ) -> Result<PacketInOutcome, FederationError> {
        let out = self.ctrl_mut(domain)?.handle_packet_in(sw, port, pkt)?;
        if let Some(s) = out.sighting {
            if s.previous != Some(s.zone) {
                // a dead channel only delays the update; the session keeps
                // its last rules until the next push
                let _ = self.push_bindings(domain);
            }
        }
        Ok(out)
    }
}
