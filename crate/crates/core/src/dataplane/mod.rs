//! Switch model: header matching, flow tables and the multi-table pipeline.

mod header;
mod pipeline;
mod rule;
mod table;

pub use header::{host_net, FlowKey, MatchFields, PacketHeader, Protocol};
pub use pipeline::{process_pipeline, FlowTablePipeline, PipelineError, PipelineVerdict};
pub use rule::{FlowRule, Origin, OriginFilter, RuleAction, RuleId, RuleSpec, LOCAL_PT_BAND, REMOTE_RPT_BAND};
pub use table::{match_in_table, FlowTable};
