use std::fmt;

use crate::controller::ControllerError;
use crate::dataplane::FlowKey;

/// One-line transfer outcome: `ACCEPT` or `REJECT <reason> [witness=<5-tuple>]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Report {
    Accept,
    Reject {
        reason: &'static str,
        witness: Option<FlowKey>,
    },
}

impl Report {
    pub fn from_result<T>(r: &Result<T, ControllerError>) -> Self {
        match r {
            Ok(_) => Report::Accept,
            Err(e) => Report::from_error(e),
        }
    }

    pub fn from_error(e: &ControllerError) -> Self {
        let witness = match e {
            ControllerError::Validation(v) => v.witness(),
            _ => None,
        };
        Report::Reject {
            reason: e.reason(),
            witness,
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, Report::Accept)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Report::Accept => f.write_str("ACCEPT"),
            Report::Reject { reason, witness } => {
                write!(f, "REJECT {reason}")?;
                if let Some(w) = witness {
                    write!(f, " witness={w}")?;
                }
                Ok(())
            }
        }
    }
}
