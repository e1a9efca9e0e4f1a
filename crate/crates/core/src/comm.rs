//! Byte accounting of federated exchange. Body bytes are always
//! 4 bytes per trainable value at f32 wire precision; metadata overhead is
//! computed from the same record layout the serializer emits, so analytic
//! sizes and measured payloads agree exactly.

use crate::fed::RoundRecord;
use crate::model::{count_params, shape_plan, ModelConfig, Strategy};
use crate::wire;

/// Analytic per-client, per-direction payload size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadBytes {
    /// 4 bytes x trainable value count.
    pub body: u64,
    /// Header plus per-record metadata.
    pub overhead: u64,
}

impl PayloadBytes {
    pub fn total(&self) -> u64 {
        self.body + self.overhead
    }
}

/// Payload for one client update (or one broadcast) under a strategy.
/// Factors are counted in factored form; reference ratios use the body
/// alone, because headers are a fixed artifact of the framing.
pub fn payload_bytes(
    cfg: &ModelConfig,
    strategy: Strategy,
    rank: usize,
    num_classes: usize,
) -> PayloadBytes {
    let counts = count_params(cfg, strategy, rank, num_classes);
    let body = 4 * counts.trainable;

    let mut eff = cfg.clone();
    eff.num_classes = num_classes.max(2);
    let dense_meta: u64 = shape_plan(&eff)
        .iter()
        .filter(|e| strategy.trains_group(e.group))
        .map(|e| wire::dense_record_meta_bytes(e.name.len(), e.shape.len()))
        .sum();
    let adapter_meta = if strategy.uses_lora() {
        2 * eff.lora_layer_specs().len() as u64 * wire::ADAPTER_RECORD_META_BYTES
    } else {
        0
    };
    PayloadBytes {
        body,
        overhead: wire::HEADER_BYTES + dense_meta + adapter_meta,
    }
}

/// Body-bytes ratio of two strategies at the same config. Headers are
/// excluded; the ratio is exactly the trainable-parameter ratio.
pub fn reduction_ratio(
    a: Strategy,
    b: Strategy,
    cfg: &ModelConfig,
    rank: usize,
    num_classes: usize,
) -> f64 {
    let pa = payload_bytes(cfg, a, rank, num_classes);
    let pb = payload_bytes(cfg, b, rank, num_classes);
    pa.body as f64 / pb.body as f64
}

/// One ledger row: bytes moved for one client in one round, one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRow {
    pub round: u64,
    pub client: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Append-only record of every exchanged byte in a run.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    pub rows: Vec<LedgerRow>,
}

impl CommLedger {
    pub fn new() -> CommLedger {
        CommLedger::default()
    }

    pub fn add_round(&mut self, record: &RoundRecord) {
        for cb in &record.per_client {
            self.rows.push(LedgerRow {
                round: record.round,
                client: cb.client,
                bytes_up: cb.bytes_up,
                bytes_down: cb.bytes_down,
            });
        }
    }

    /// All bytes moved, both directions, headers included.
    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_up + r.bytes_down).sum()
    }

    /// CSV export: one row per (round, client, direction, bytes), sorted by
    /// round, client, direction (down before up).
    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| (r.round, r.client));
        let mut out = String::from("round,client,direction,bytes\n");
        for r in rows {
            out.push_str(&format!("{},{},down,{}\n", r.round, r.client, r.bytes_down));
            out.push_str(&format!("{},{},up,{}\n", r.round, r.client, r.bytes_up));
        }
        out
    }
}
