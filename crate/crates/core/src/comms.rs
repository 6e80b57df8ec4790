//! Sparse model wire format and communication-cost accounting.
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! magic  "FPSB"                       4 bytes
//! version u16, layer count u16        4 bytes
//! per prunable layer: offset u32, weight count u32
//! bitmap, one bit per prunable weight, LSB first, ceil(n / 8) bytes
//! surviving weight values, f32, ascending mask index
//! non-prunable parameters, f32, ascending parameter index
//! ```
//!
//! The parameter count is implied: prunable weights plus the trailing
//! non-prunable values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenseModel;
use crate::pruning::Mask;

pub const MAGIC: [u8; 4] = *b"FPSB";
pub const VERSION: u16 = 1;
const FIXED_HEADER: usize = 8;
const LAYER_ENTRY: usize = 8;

/// Bytes per kilobyte in reports.
pub const BYTES_PER_KB: f64 = 1024.0;
/// Kilobytes per megabyte in reports.
pub const KB_PER_MB: f64 = 1000.0;

pub fn bytes_to_kb(bytes: f64) -> f64 {
    bytes / BYTES_PER_KB
}

pub fn bytes_to_mb(bytes: f64) -> f64 {
    bytes / BYTES_PER_KB / KB_PER_MB
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseBlob {
    /// `(parameter offset, weight count)` per prunable layer.
    pub layers: Vec<(u32, u32)>,
    pub bitmap: Vec<u8>,
    pub values: Vec<f32>,
    pub dense: Vec<f32>,
}

impl SparseBlob {
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|&(_, n)| n as usize).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.dense.len()
    }

    pub fn byte_len(&self) -> usize {
        FIXED_HEADER + LAYER_ENTRY * self.layers.len() + self.bitmap.len() + 4 * (self.values.len() + self.dense.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for &(offset, count) in &self.layers {
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        out.extend_from_slice(&self.bitmap);
        for v in self.values.iter().chain(&self.dense) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and structurally validates a blob. Never panics on bad input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(Error::Truncated { needed, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(FIXED_HEADER)?;
        if bytes[..4] != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let layer_count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let mut pos = FIXED_HEADER;
        need(pos + LAYER_ENTRY * layer_count)?;
        let mut layers = Vec::with_capacity(layer_count);
        let mut weights: u64 = 0;
        for _ in 0..layer_count {
            let offset = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"));
            let count = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
            layers.push((offset, count));
            weights += count as u64;
            pos += LAYER_ENTRY;
        }
        let bitmap_len = weights.div_ceil(8);
        if ((bytes.len() - pos) as u64) < bitmap_len {
            return Err(Error::Truncated { needed: pos.saturating_add(bitmap_len as usize), found: bytes.len() });
        }
        let bitmap = bytes[pos..pos + bitmap_len as usize].to_vec();
        pos += bitmap_len as usize;
        let spare_bits = (bitmap_len * 8 - weights) as u32;
        if spare_bits > 0 && bitmap.last().is_some_and(|&b| b >> (8 - spare_bits) != 0) {
            return Err(Error::Malformed("bitmap padding bits are set".into()));
        }
        let survivors: usize = bitmap.iter().map(|b| b.count_ones() as usize).sum();
        need(pos + 4 * survivors)?;
        let rest = bytes.len() - pos - 4 * survivors;
        if !rest.is_multiple_of(4) {
            return Err(Error::Malformed(format!("{rest} trailing bytes do not form whole values")));
        }
        let read = |chunk: &[u8]| f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        let values: Vec<f32> = bytes[pos..pos + 4 * survivors].chunks_exact(4).map(read).collect();
        let dense: Vec<f32> = bytes[pos + 4 * survivors..].chunks_exact(4).map(read).collect();
        let blob = SparseBlob { layers, bitmap, values, dense };
        blob.check_layout()?;
        Ok(blob)
    }

    fn check_layout(&self) -> Result<()> {
        let total = self.param_count() as u64;
        let mut end = 0u64;
        for &(offset, count) in &self.layers {
            let (offset, count) = (offset as u64, count as u64);
            if offset < end || offset + count > total {
                return Err(Error::Malformed(format!("layer at {offset} (+{count}) overlaps or exceeds {total} params")));
            }
            end = offset + count;
        }
        let n = self.weight_count();
        if self.bitmap.len() != n.div_ceil(8) {
            return Err(Error::Malformed("bitmap length does not match weight count".into()));
        }
        let pop: usize = self.bitmap.iter().map(|b| b.count_ones() as usize).sum();
        if pop != self.values.len() {
            return Err(Error::Malformed(format!("popcount {pop} but {} stored values", self.values.len())));
        }
        Ok(())
    }
}

/// Encodes `params` under `mask`. Fails if a pruned position is non-zero.
pub fn encode_sparse(params: &[f32], mask: &Mask) -> Result<SparseBlob> {
    if let Some(last) = mask.segments().last() {
        if last.end > params.len() {
            return Err(Error::Alignment(format!("mask reaches parameter {} of {}", last.end, params.len())));
        }
    }
    if let Some((index, value)) = mask.closure_violation(params) {
        return Err(Error::Integrity { index, value });
    }
    if mask.segments().len() > u16::MAX as usize {
        return Err(Error::Malformed("too many prunable layers for the header".into()));
    }
    let layers = mask
        .segments()
        .iter()
        .map(|r| Ok((u32::try_from(r.start)?, u32::try_from(r.len())?)))
        .collect::<std::result::Result<Vec<_>, std::num::TryFromIntError>>()
        .map_err(|_| Error::Malformed("parameter offsets exceed u32".into()))?;
    let mut bitmap = vec![0u8; mask.len().div_ceil(8)];
    let mut values = Vec::with_capacity(mask.survivors());
    for (j, p, keep) in mask.positions() {
        if keep {
            bitmap[j / 8] |= 1 << (j % 8);
            values.push(params[p]);
        }
    }
    let mut dense = Vec::with_capacity(params.len() - mask.len());
    let mut next = 0;
    for r in mask.segments() {
        dense.extend_from_slice(&params[next..r.start]);
        next = r.end;
    }
    dense.extend_from_slice(&params[next..]);
    Ok(SparseBlob { layers, bitmap, values, dense })
}

/// Inverse of [`encode_sparse`].
pub fn decode_sparse(blob: &SparseBlob) -> Result<(Vec<f32>, Mask)> {
    blob.check_layout()?;
    let total = blob.param_count();
    let segments: Vec<_> = blob.layers.iter().map(|&(o, n)| o as usize..o as usize + n as usize).collect();
    let bits: Vec<bool> = (0..blob.weight_count()).map(|j| blob.bitmap[j / 8] >> (j % 8) & 1 == 1).collect();
    let mask = Mask::from_parts(segments, bits)?;
    let mut params = vec![0.0f32; total];
    let mut values = blob.values.iter();
    for (_, p, keep) in mask.positions() {
        if keep {
            params[p] = *values.next().expect("popcount checked");
        }
    }
    let mut dense = blob.dense.iter();
    let mut next = 0;
    for r in mask.segments() {
        for slot in &mut params[next..r.start] {
            *slot = *dense.next().expect("layout checked");
        }
        next = r.end;
    }
    for slot in &mut params[next..] {
        *slot = *dense.next().expect("layout checked");
    }
    Ok((params, mask))
}

pub fn decode_bytes(bytes: &[u8]) -> Result<(Vec<f32>, Mask)> {
    decode_sparse(&SparseBlob::from_bytes(bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// Four bytes per surviving weight and per non-prunable parameter.
    Idealized,
    /// Exact encoded blob length.
    Wire,
}

/// Idealized byte count from parameter counts.
pub fn idealized_bytes(param_count: usize, prunable: usize, survivors: usize) -> u64 {
    4 * (survivors + param_count - prunable) as u64
}

/// Encoded blob length from counts, without encoding.
pub fn wire_bytes(layers: usize, param_count: usize, prunable: usize, survivors: usize) -> u64 {
    (FIXED_HEADER + LAYER_ENTRY * layers + prunable.div_ceil(8) + 4 * (survivors + param_count - prunable)) as u64
}

pub fn cost_of(model: &DenseModel, mask: &Mask, cost: CostModel) -> Result<u64> {
    mask.check_aligned(model)?;
    Ok(match cost {
        CostModel::Idealized => idealized_bytes(model.param_count(), mask.len(), mask.survivors()),
        CostModel::Wire => wire_bytes(mask.segments().len(), model.param_count(), mask.len(), mask.survivors()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub idealized: u64,
    pub wire: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounts {
    pub idealized: u64,
    pub wire: u64,
}

impl ByteCounts {
    pub fn get(&self, cost: CostModel) -> u64 {
        match cost {
            CostModel::Idealized => self.idealized,
            CostModel::Wire => self.wire,
        }
    }

    fn add(&mut self, e: &CostEntry) {
        self.idealized += e.idealized;
        self.wire += e.wire;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub upload: ByteCounts,
    pub download: ByteCounts,
    pub clients: usize,
    /// Both directions, all rounds, averaged over clients, idealized model.
    pub per_client_mb: f64,
    pub per_client_mb_wire: f64,
}

impl LedgerTotals {
    pub fn total(&self, cost: CostModel) -> u64 {
        self.upload.get(cost) + self.download.get(cost)
    }
}

/// Append-only record of transferred bytes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, client: usize, direction: Direction, idealized: u64, wire: u64) {
        self.entries.push(CostEntry { round, client, direction, idealized, wire });
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Upload and download bytes recorded for `round`.
    pub fn round_totals(&self, round: usize) -> (ByteCounts, ByteCounts) {
        let mut up = ByteCounts::default();
        let mut down = ByteCounts::default();
        for e in self.entries.iter().filter(|e| e.round == round) {
            match e.direction {
                Direction::Upload => up.add(e),
                Direction::Download => down.add(e),
            }
        }
        (up, down)
    }

    pub fn totals(&self) -> LedgerTotals {
        let mut t = LedgerTotals::default();
        let mut clients = std::collections::BTreeSet::new();
        for e in &self.entries {
            clients.insert(e.client);
            match e.direction {
                Direction::Upload => t.upload.add(e),
                Direction::Download => t.download.add(e),
            }
        }
        t.clients = clients.len();
        if t.clients > 0 {
            let k = t.clients as f64;
            t.per_client_mb = bytes_to_mb(t.total(CostModel::Idealized) as f64) / k;
            t.per_client_mb_wire = bytes_to_mb(t.total(CostModel::Wire) as f64) / k;
        }
        t
    }
}

/// Fraction of communication saved relative to a baseline total.
pub fn saved_fraction(method_bytes: f64, baseline_bytes: f64) -> f64 {
    if baseline_bytes <= 0.0 {
        0.0
    } else {
        1.0 - method_bytes / baseline_bytes
    }
}
