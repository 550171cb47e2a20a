//! Simulated network: wire framing, byte accounting, message routing.
//!
//! Sites and the aggregator exchange [`Matrix`] payloads through framed
//! binary messages. Every transfer really is serialized and deserialized,
//! so the byte ledger counts actual wire bytes (never estimates) and an
//! `f32` wire dtype genuinely rounds the values in flight.
//!
//! # Frame layout (little-endian)
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DADM"
//! 4       2     version (currently 1)
//! 6       2     message kind
//! 8       2     layer index
//! 10      2     site id (0xFFFF = aggregator)
//! 12      1     dtype: 0 = f64, 1 = f32
//! 13      1     matrix count (0, 1 or 2)
//! 14      4+4   matrix 0 rows, cols
//! 22      4+4   matrix 1 rows, cols
//! 30      2     reserved (zero)
//! 32      ...   payload: matrices row-major
//! ```
//!
//! Total size is always `32 + sum(rows * cols) * dtype_size`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FRAME_HEADER_BYTES: u64 = 32;
pub const MAGIC: [u8; 4] = *b"DADM";
pub const VERSION: u16 = 1;
/// Site id used by the aggregator in broadcast frames.
pub const AGGREGATOR_ID: u16 = 0xFFFF;

/// Wire float width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireDtype {
    F64,
    F32,
}

impl WireDtype {
    pub fn size(self) -> usize {
        match self {
            WireDtype::F64 => 8,
            WireDtype::F32 => 4,
        }
    }

    fn code(self) -> u8 {
        match self {
            WireDtype::F64 => 0,
            WireDtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(WireDtype::F64),
            1 => Ok(WireDtype::F32),
            other => Err(Error::Encoding(format!("unknown dtype code {other}"))),
        }
    }
}

/// What a frame carries; bias traffic is tagged separately so weight-factor
/// byte counts can be compared against the closed-form bandwidth model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u16)]
pub enum MsgKind {
    /// Full weight gradient, site -> aggregator.
    GradUp = 1,
    /// Aggregated weight gradient, aggregator -> sites.
    GradDown = 2,
    /// Raw (A, Delta) factors, site -> aggregator.
    FactorsUp = 3,
    /// Concatenated factors, aggregator -> sites.
    FactorsDown = 4,
    /// Low-rank (Q, G) factors, site -> aggregator.
    LowRankUp = 5,
    /// Re-compressed (Q, G), aggregator -> sites.
    LowRankDown = 6,
    /// PowerSGD left-factor partials, site -> aggregator.
    PowerPUp = 7,
    /// Orthogonalized left factor, aggregator -> sites.
    PowerPDown = 8,
    /// PowerSGD right-factor partials, site -> aggregator.
    PowerVUp = 9,
    /// Aggregated right factor, aggregator -> sites.
    PowerVDown = 10,
    /// Bias gradient, site -> aggregator.
    BiasUp = 11,
    /// Aggregated bias gradient, aggregator -> sites.
    BiasDown = 12,
}

impl MsgKind {
    fn from_code(code: u16) -> Result<Self> {
        use MsgKind::*;
        Ok(match code {
            1 => GradUp,
            2 => GradDown,
            3 => FactorsUp,
            4 => FactorsDown,
            5 => LowRankUp,
            6 => LowRankDown,
            7 => PowerPUp,
            8 => PowerPDown,
            9 => PowerVUp,
            10 => PowerVDown,
            11 => BiasUp,
            12 => BiasDown,
            other => return Err(Error::Encoding(format!("unknown message kind {other}"))),
        })
    }

    /// Bias vectors ride their own frames; they are excluded from the
    /// closed-form weight-traffic comparisons.
    pub fn is_bias(self) -> bool {
        matches!(self, MsgKind::BiasUp | MsgKind::BiasDown)
    }
}

/// Decoded frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: MsgKind,
    pub layer_index: u16,
    pub site_id: u16,
    pub dtype: WireDtype,
}

/// Encodes up to two matrices into one frame.
pub fn serialize(matrices: &[&Matrix], header: &FrameHeader) -> Result<Vec<u8>> {
    if matrices.len() > 2 {
        return Err(Error::Encoding(format!(
            "frame carries at most 2 matrices, got {}",
            matrices.len()
        )));
    }
    let mut payload_elems = 0usize;
    for m in matrices {
        if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
            return Err(Error::Encoding("matrix dimension exceeds u32".into()));
        }
        payload_elems += m.rows() * m.cols();
    }
    let mut out = Vec::with_capacity(32 + payload_elems * header.dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.kind as u16).to_le_bytes());
    out.extend_from_slice(&header.layer_index.to_le_bytes());
    out.extend_from_slice(&header.site_id.to_le_bytes());
    out.push(header.dtype.code());
    out.push(matrices.len() as u8);
    for slot in 0..2 {
        if let Some(m) = matrices.get(slot) {
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&[0u8; 8]);
        }
    }
    out.extend_from_slice(&[0u8; 2]);
    debug_assert_eq!(out.len(), 32);
    for m in matrices {
        let start = out.len();
        match header.dtype {
            WireDtype::F64 => {
                out.resize(start + m.data().len() * 8, 0);
                for (chunk, &v) in out[start..].chunks_exact_mut(8).zip(m.data()) {
                    chunk.copy_from_slice(&v.to_le_bytes());
                }
            }
            WireDtype::F32 => {
                out.resize(start + m.data().len() * 4, 0);
                for (chunk, &v) in out[start..].chunks_exact_mut(4).zip(m.data()) {
                    chunk.copy_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Decodes a frame produced by [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<(FrameHeader, Vec<Matrix>)> {
    if bytes.len() < 32 {
        return Err(Error::Encoding("frame shorter than header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Encoding("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Encoding(format!("unsupported version {version}")));
    }
    let kind = MsgKind::from_code(u16::from_le_bytes([bytes[6], bytes[7]]))?;
    let layer_index = u16::from_le_bytes([bytes[8], bytes[9]]);
    let site_id = u16::from_le_bytes([bytes[10], bytes[11]]);
    let dtype = WireDtype::from_code(bytes[12])?;
    let n_matrices = bytes[13] as usize;
    if n_matrices > 2 {
        return Err(Error::Encoding(format!("matrix count {n_matrices} out of range")));
    }
    let mut dims = [(0usize, 0usize); 2];
    for (slot, dim) in dims.iter_mut().enumerate() {
        let off = 14 + slot * 8;
        let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        *dim = (rows, cols);
    }
    let elem = dtype.size();
    let payload_elems: usize = dims[..n_matrices].iter().map(|&(r, c)| r * c).sum();
    let expected = 32 + payload_elems * elem;
    if bytes.len() != expected {
        return Err(Error::Encoding(format!(
            "frame length {} does not match header-declared {}",
            bytes.len(),
            expected
        )));
    }
    let mut matrices = Vec::with_capacity(n_matrices);
    let mut off = 32;
    for &(rows, cols) in &dims[..n_matrices] {
        let count = rows * cols;
        let mut data = Vec::with_capacity(count);
        match dtype {
            WireDtype::F64 => {
                for chunk in bytes[off..off + count * 8].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                off += count * 8;
            }
            WireDtype::F32 => {
                for chunk in bytes[off..off + count * 4].chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
                off += count * 4;
            }
        }
        matrices.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok((FrameHeader { kind, layer_index, site_id, dtype }, matrices))
}

/// Transfer direction relative to the aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
}

/// One accounted transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: usize,
    pub layer: usize,
    pub site: usize,
    pub direction: Direction,
    pub kind: MsgKind,
    /// Full frame size including the 32-byte header.
    pub bytes: u64,
}

/// Exact per-(round, layer, site, direction) byte counts. Counts come from
/// the serialized frames themselves.
#[derive(Debug, Clone, Default)]
pub struct ByteLedger {
    entries: Vec<LedgerEntry>,
}

impl ByteLedger {
    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    fn record(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    /// Total frame bytes in a direction (headers included).
    pub fn total(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Payload bytes (headers excluded) for weight-factor traffic of one
    /// layer and direction, summed per site.
    pub fn layer_weight_payload(
        &self,
        round: usize,
        layer: usize,
        site: usize,
        direction: Direction,
    ) -> u64 {
        self.entries
            .iter()
            .filter(|e| {
                e.round == round
                    && e.layer == layer
                    && e.site == site
                    && e.direction == direction
                    && !e.kind.is_bias()
            })
            .map(|e| e.bytes - FRAME_HEADER_BYTES)
            .sum()
    }

    /// Cumulative payload+header bytes grouped by message kind.
    pub fn totals_by_kind(&self) -> BTreeMap<MsgKind, u64> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            *map.entry(e.kind).or_insert(0) += e.bytes;
        }
        map
    }
}

/// Star-topology message router with exact byte accounting.
///
/// `upload` moves matrices from a site to the aggregator; `broadcast` moves
/// them from the aggregator to every site (the full broadcast size is
/// charged to each site, the originator included). Both return the
/// post-wire values, so lossy dtypes propagate honestly.
pub struct Network {
    ledger: ByteLedger,
    dtype: WireDtype,
    sites: usize,
    round: usize,
    dump_dir: Option<PathBuf>,
    dump_seq: u64,
}

impl Network {
    pub fn new(sites: usize, dtype: WireDtype) -> Self {
        Network { ledger: ByteLedger::default(), dtype, sites, round: 0, dump_dir: None, dump_seq: 0 }
    }

    /// Enables raw frame dumps for inspection, one file per frame.
    pub fn with_dump_dir(mut self, dir: PathBuf) -> Self {
        self.dump_dir = Some(dir);
        self
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    pub fn dtype(&self) -> WireDtype {
        self.dtype
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn dump(&mut self, frame: &[u8], header: &FrameHeader) -> Result<()> {
        if let Some(dir) = &self.dump_dir {
            std::fs::create_dir_all(dir)?;
            let name = format!(
                "r{:05}_l{:02}_s{:04}_k{:02}_{:06}.frame",
                self.round, header.layer_index, header.site_id, header.kind as u16, self.dump_seq
            );
            self.dump_seq += 1;
            let mut f = std::fs::File::create(dir.join(name))?;
            f.write_all(frame)?;
        }
        Ok(())
    }

    /// Site -> aggregator transfer.
    pub fn upload(
        &mut self,
        site: usize,
        layer: usize,
        kind: MsgKind,
        matrices: &[&Matrix],
    ) -> Result<Vec<Matrix>> {
        let header = FrameHeader {
            kind,
            layer_index: layer as u16,
            site_id: site as u16,
            dtype: self.dtype,
        };
        let frame = serialize(matrices, &header)?;
        self.dump(&frame, &header)?;
        self.ledger.record(LedgerEntry {
            round: self.round,
            layer,
            site,
            direction: Direction::Up,
            kind,
            bytes: frame.len() as u64,
        });
        let (_, decoded) = deserialize(&frame)?;
        Ok(decoded)
    }

    /// Aggregator -> all sites transfer. Decodes once; every site observes
    /// the same post-wire values.
    pub fn broadcast(
        &mut self,
        layer: usize,
        kind: MsgKind,
        matrices: &[&Matrix],
    ) -> Result<Vec<Matrix>> {
        let header = FrameHeader {
            kind,
            layer_index: layer as u16,
            site_id: AGGREGATOR_ID,
            dtype: self.dtype,
        };
        let frame = serialize(matrices, &header)?;
        self.dump(&frame, &header)?;
        for site in 0..self.sites {
            self.ledger.record(LedgerEntry {
                round: self.round,
                layer,
                site,
                direction: Direction::Down,
                kind,
                bytes: frame.len() as u64,
            });
        }
        let (_, decoded) = deserialize(&frame)?;
        Ok(decoded)
    }
}
