use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::{KeyPair, PublicKey, Signature};
use crate::DomainId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageType {
    Rpt,
    Session,
    Binding,
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageType::Rpt => "RPT",
            MessageType::Session => "SESSION",
            MessageType::Binding => "BINDING",
        })
    }
}

impl FromStr for MessageType {
    type Err = EnvelopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RPT" => Ok(MessageType::Rpt),
            "SESSION" => Ok(MessageType::Session),
            "BINDING" => Ok(MessageType::Binding),
            other => Err(EnvelopeError::Malformed(format!("unknown type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

/// One hop of an east-west message. The payload is UTF-8 text, carried
/// hex-encoded on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: DomainId,
    pub to: DomainId,
    pub seq: u64,
    pub kind: MessageType,
    pub payload: String,
    pub signature: Signature,
}

impl Envelope {
    pub fn signed(from: DomainId, to: DomainId, seq: u64, kind: MessageType, payload: String, key: &KeyPair) -> Self {
        let mut env = Self {
            from,
            to,
            seq,
            kind,
            payload,
            signature: Signature::from_bytes([0; 64]),
        };
        env.signature = key.sign(env.signing_input().as_bytes());
        env
    }

    /// The wire line without its ` SIG <hex>` suffix.
    pub fn signing_input(&self) -> String {
        format!(
            "EW {} {} SEQ {} TYPE {} {}",
            self.from,
            self.to,
            self.seq,
            self.kind,
            hex::encode(self.payload.as_bytes())
        )
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(self.signing_input().as_bytes(), &self.signature)
    }
}

impl fmt::Display for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} SIG {}", self.signing_input(), self.signature.to_hex())
    }
}

impl FromStr for Envelope {
    type Err = EnvelopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| EnvelopeError::Malformed(m.to_owned());
        let toks: Vec<&str> = s.trim().split(' ').collect();
        let [ew, from, to, seq_kw, seq, type_kw, kind, payload, sig_kw, sig] = toks[..] else {
            return Err(bad("expected 10 fields"));
        };
        if (ew, seq_kw, type_kw, sig_kw) != ("EW", "SEQ", "TYPE", "SIG") {
            return Err(bad("keywords out of place"));
        }
        let payload = hex::decode(payload).map_err(|_| bad("payload is not hex"))?;
        Ok(Self {
            from: DomainId::new(from),
            to: DomainId::new(to),
            seq: seq.parse().map_err(|_| bad("bad sequence number"))?,
            kind: kind.parse()?,
            payload: String::from_utf8(payload).map_err(|_| bad("payload is not UTF-8"))?,
            signature: Signature::from_hex(sig).map_err(|e| EnvelopeError::Malformed(e.to_string()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip_and_tamper() {
        let key = KeyPair::derive(3, "A");
        let env = Envelope::signed(
            "A".into(),
            "B".into(),
            7,
            MessageType::Binding,
            "FOR B\nUPDATE 1\n".into(),
            &key,
        );
        let text = env.to_string();
        assert!(text.starts_with("EW A B SEQ 7 TYPE BINDING 464f522042"));
        let back: Envelope = text.parse().unwrap();
        assert_eq!(back, env);
        assert!(back.verify(&key.public()));
        let mut moved = back.clone();
        moved.seq = 8;
        assert!(!moved.verify(&key.public()));
        assert!("EW A B SEQ 7 TYPE NOPE 00 SIG 00".parse::<Envelope>().is_err());
        assert!("EW A B".parse::<Envelope>().is_err());
    }
}
