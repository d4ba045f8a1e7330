//! Single-node, append-only hash chain with per-device request
//! authentication.
//!
//! Devices hold a pre-shared 32-byte key and sign each request with
//! HMAC-SHA-256. Every handled request lands in a [`Block`] that commits to
//! the SHA-256 of the request and to the previous block's hash, so any
//! retroactive edit breaks [`verify_blocks`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use hmac::{Hmac, Mac};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical::{Decoder, Encoder};
use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

pub type Hash = [u8; 32];
pub type Nonce = [u8; 16];

pub const ZERO_HASH: Hash = [0u8; 32];

pub fn sha256(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

fn hmac(key: &[u8; 32], message: &[u8]) -> Hash {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// Source of millisecond timestamps.
pub trait Clock {
    fn now_ms(&mut self) -> u64;
}

/// Wall-clock time since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&mut self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Counter advancing by `step` on every read. Makes runs reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalClock {
    pub next: u64,
    pub step: u64,
}

impl LogicalClock {
    pub fn new(start: u64, step: u64) -> Self {
        LogicalClock { next: start, step }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        LogicalClock::new(1, 1)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.next;
        self.next += self.step;
        t
    }
}

// ---------------------------------------------------------------------------
// Devices and requests
// ---------------------------------------------------------------------------

/// Enrolled devices and their secret keys.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRegistry {
    #[serde(with = "hex_key_map")]
    keys: BTreeMap<String, [u8; 32]>,
}

impl DeviceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws a fresh 32-byte key for `device_id`.
    pub fn enroll<R: Rng + ?Sized>(&mut self, device_id: &str, rng: &mut R) -> Result<()> {
        if self.keys.contains_key(device_id) {
            return Err(Error::Config(format!("device '{device_id}' already enrolled")));
        }
        let mut key = [0u8; 32];
        rng.fill(&mut key);
        self.keys.insert(device_id.to_string(), key);
        Ok(())
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.keys.contains_key(device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn key(&self, device_id: &str) -> Option<&[u8; 32]> {
        self.keys.get(device_id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

mod hex_key_map {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, [u8; 32]>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.clone(), hex::encode(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, [u8; 32]>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                let mut key = [0u8; 32];
                hex::decode_to_slice(&v, &mut key).map_err(D::Error::custom)?;
                Ok((k, key))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub device_id: String,
    #[serde(with = "hex::serde")]
    pub nonce: Nonce,
    pub timestamp: u64,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub tag: Hash,
}

impl SignedRequest {
    /// Bytes covered by the tag.
    pub fn signed_bytes(&self) -> Vec<u8> {
        Encoder::new()
            .str(&self.device_id)
            .fixed(&self.nonce)
            .u64(self.timestamp)
            .bytes(&self.payload)
            .finish()
    }

    /// Full request including the tag.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut bytes = self.signed_bytes();
        bytes.extend_from_slice(&self.tag);
        bytes
    }
}

pub fn sign_request<R: Rng + ?Sized, C: Clock + ?Sized>(
    registry: &DeviceRegistry,
    device_id: &str,
    payload: &[u8],
    rng: &mut R,
    clock: &mut C,
) -> Result<SignedRequest> {
    let key = registry
        .key(device_id)
        .ok_or_else(|| Error::DeviceNotEnrolled(device_id.to_string()))?;
    let mut nonce = [0u8; 16];
    rng.fill(&mut nonce);
    let mut req = SignedRequest {
        device_id: device_id.to_string(),
        nonce,
        timestamp: clock.now_ms(),
        payload: payload.to_vec(),
        tag: ZERO_HASH,
    };
    req.tag = hmac(key, &req.signed_bytes());
    Ok(req)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestVerdict {
    Valid,
    BadTag,
    Replay,
    UnknownDevice,
}

/// Previously accepted `(device_id, nonce)` pairs.
pub type NonceSet = HashSet<(String, Nonce)>;

/// Checks device, tag and nonce freshness in that order. Does not record
/// the nonce.
pub fn verify_request(registry: &DeviceRegistry, req: &SignedRequest, seen: &NonceSet) -> RequestVerdict {
    let Some(key) = registry.key(&req.device_id) else {
        return RequestVerdict::UnknownDevice;
    };
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&req.signed_bytes());
    if mac.verify_slice(&req.tag).is_err() {
        return RequestVerdict::BadTag;
    }
    if seen.contains(&(req.device_id.clone(), req.nonce)) {
        return RequestVerdict::Replay;
    }
    RequestVerdict::Valid
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Outcome recorded in a block. Codes below `0x100` are acceptances; the
/// high byte of a rejection names the phase that rejected it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VerdictCode(pub u16);

impl VerdictCode {
    pub const GENESIS: VerdictCode = VerdictCode(0x0000);
    pub const ACCEPTED_PATTERN: VerdictCode = VerdictCode(0x0002);
    pub const ACCEPTED_CLASSIFIER: VerdictCode = VerdictCode(0x0003);
    pub const BAD_TAG: VerdictCode = VerdictCode(0x0101);
    pub const REPLAY: VerdictCode = VerdictCode(0x0102);
    pub const UNKNOWN_DEVICE: VerdictCode = VerdictCode(0x0103);
    pub const MALFORMED: VerdictCode = VerdictCode(0x0104);
    pub const KNOWN_ATTACK: VerdictCode = VerdictCode(0x0201);
    pub const CLASSIFIED_ATTACK: VerdictCode = VerdictCode(0x0301);

    pub fn is_accepted(self) -> bool {
        self.0 < 0x100
    }

    pub fn reason(self) -> &'static str {
        match self {
            Self::GENESIS => "genesis",
            Self::ACCEPTED_PATTERN => "known_benign",
            Self::ACCEPTED_CLASSIFIER => "classified_benign",
            Self::BAD_TAG => "bad_tag",
            Self::REPLAY => "replay",
            Self::UNKNOWN_DEVICE => "unknown_device",
            Self::MALFORMED => "malformed",
            Self::KNOWN_ATTACK => "known_attack",
            Self::CLASSIFIED_ATTACK => "classified_attack",
            _ => "unknown",
        }
    }
}

impl From<RequestVerdict> for VerdictCode {
    fn from(v: RequestVerdict) -> Self {
        match v {
            RequestVerdict::Valid => VerdictCode::ACCEPTED_CLASSIFIER,
            RequestVerdict::BadTag => VerdictCode::BAD_TAG,
            RequestVerdict::Replay => VerdictCode::REPLAY,
            RequestVerdict::UnknownDevice => VerdictCode::UNKNOWN_DEVICE,
        }
    }
}

/// Serialized size of a block.
pub const BLOCK_BYTES: usize = 8 + 8 + 32 + 32 + 2 + 32 + 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub timestamp: u64,
    #[serde(with = "hex::serde")]
    pub prev_hash: Hash,
    /// SHA-256 of the request's canonical bytes.
    #[serde(with = "hex::serde")]
    pub payload_hash: Hash,
    pub verdict: VerdictCode,
    /// Ledger-key HMAC over the preceding fields on accepted blocks, all
    /// zero on rejections and genesis.
    #[serde(with = "hex::serde")]
    pub countersignature: Hash,
    #[serde(with = "hex::serde")]
    pub block_hash: Hash,
}

impl Block {
    fn header_bytes(index: u64, timestamp: u64, prev_hash: &Hash, payload_hash: &Hash, verdict: VerdictCode) -> Vec<u8> {
        Encoder::new()
            .u64(index)
            .u64(timestamp)
            .fixed(prev_hash)
            .fixed(payload_hash)
            .u16(verdict.0)
            .finish()
    }

    /// Hash over every field except `block_hash`.
    pub fn compute_hash(&self) -> Hash {
        let mut bytes = Self::header_bytes(self.index, self.timestamp, &self.prev_hash, &self.payload_hash, self.verdict);
        bytes.extend_from_slice(&self.countersignature);
        sha256(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Self::header_bytes(self.index, self.timestamp, &self.prev_hash, &self.payload_hash, self.verdict);
        bytes.extend_from_slice(&self.countersignature);
        bytes.extend_from_slice(&self.block_hash);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes);
        let block = Block {
            index: d.u64()?,
            timestamp: d.u64()?,
            prev_hash: d.array()?,
            payload_hash: d.array()?,
            verdict: VerdictCode(d.u16()?),
            countersignature: d.array()?,
            block_hash: d.array()?,
        };
        d.finish()?;
        Ok(block)
    }

    pub fn genesis() -> Self {
        let mut b = Block {
            index: 0,
            timestamp: 0,
            prev_hash: ZERO_HASH,
            payload_hash: ZERO_HASH,
            verdict: VerdictCode::GENESIS,
            countersignature: ZERO_HASH,
            block_hash: ZERO_HASH,
        };
        b.block_hash = b.compute_hash();
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainFault {
    HashMismatch,
    LinkMismatch,
    IndexGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ChainStatus {
    Ok,
    Broken { broken_at: u64, cause: ChainFault },
}

impl ChainStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainStatus::Ok)
    }
}

/// Checks each block in order: position index, own hash, then link to the
/// predecessor (32 zero bytes for the first). Reports the first fault.
pub fn verify_blocks(blocks: &[Block]) -> ChainStatus {
    let mut prev = &ZERO_HASH;
    for (i, b) in blocks.iter().enumerate() {
        let cause = if b.block_hash != b.compute_hash() {
            Some(ChainFault::HashMismatch)
        } else if b.index != i as u64 {
            Some(ChainFault::IndexGap)
        } else if &b.prev_hash != prev {
            Some(ChainFault::LinkMismatch)
        } else {
            None
        };
        if let Some(cause) = cause {
            return ChainStatus::Broken {
                broken_at: i as u64,
                cause,
            };
        }
        prev = &b.block_hash;
    }
    ChainStatus::Ok
}

/// Hash chain starting at the fixed genesis block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    blocks: Vec<Block>,
    countersign_key: Option<[u8; 32]>,
}

impl Ledger {
    /// Fresh chain that countersigns accepted blocks with `key`.
    pub fn new(key: [u8; 32]) -> Self {
        Ledger {
            blocks: vec![Block::genesis()],
            countersign_key: Some(key),
        }
    }

    /// Chain read back from storage. Without a key it can be verified but
    /// not extended with accepted blocks.
    pub fn from_blocks(blocks: Vec<Block>, key: Option<[u8; 32]>) -> Self {
        Ledger {
            blocks,
            countersign_key: key,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Direct access for audits and tamper experiments.
    pub fn blocks_mut(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn verify_chain(&self) -> ChainStatus {
        verify_blocks(&self.blocks)
    }

    /// Whether an accepted block's countersignature is genuine.
    pub fn countersignature_valid(&self, block: &Block) -> bool {
        match (&self.countersign_key, block.verdict.is_accepted() && block.index > 0) {
            (_, false) => block.countersignature == ZERO_HASH,
            (Some(key), true) => block.countersignature == countersign(key, block),
            (None, true) => false,
        }
    }

    /// Chains a block for `req` onto the tip. The tip must recompute to its
    /// stored hash and sit at the right position.
    pub fn append_block<C: Clock + ?Sized>(&mut self, req: &SignedRequest, verdict: VerdictCode, clock: &mut C) -> Result<&Block> {
        let tip = self
            .blocks
            .last()
            .ok_or_else(|| Error::ChainInvalid("ledger has no genesis block".into()))?;
        let tip_pos = self.blocks.len() as u64 - 1;
        if tip.block_hash != tip.compute_hash() || tip.index != tip_pos {
            return Err(Error::ChainInvalid(format!("tip block {tip_pos} does not verify")));
        }
        let mut block = Block {
            index: tip.index + 1,
            timestamp: clock.now_ms(),
            prev_hash: tip.block_hash,
            payload_hash: sha256(&req.canonical_bytes()),
            verdict,
            countersignature: ZERO_HASH,
            block_hash: ZERO_HASH,
        };
        if verdict.is_accepted() {
            let key = self
                .countersign_key
                .as_ref()
                .ok_or_else(|| Error::Config("ledger has no countersigning key".into()))?;
            block.countersignature = countersign(key, &block);
        }
        block.block_hash = block.compute_hash();
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for b in &self.blocks {
            serde_json::to_writer(&mut writer, b)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<ledger>", e))?;
        }
        Ok(())
    }

    /// Reads blocks without verifying them; see [`Ledger::verify_chain`].
    pub fn read_jsonl<R: Read>(reader: R) -> Result<Vec<Block>> {
        let mut blocks = Vec::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io("<ledger>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let b = serde_json::from_str(&line).map_err(|e| Error::Decode(format!("ledger line {}: {e}", n + 1)))?;
            blocks.push(b);
        }
        Ok(blocks)
    }

    pub fn load_blocks(path: impl AsRef<Path>) -> Result<Vec<Block>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(file)
    }
}

fn countersign(key: &[u8; 32], block: &Block) -> Hash {
    hmac(
        key,
        &Block::header_bytes(block.index, block.timestamp, &block.prev_hash, &block.payload_hash, block.verdict),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup() -> (DeviceRegistry, ChaCha8Rng, LogicalClock) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = DeviceRegistry::new();
        reg.enroll("pump-1", &mut rng).unwrap();
        (reg, rng, LogicalClock::default())
    }

    #[test]
    fn sign_then_verify() {
        let (reg, mut rng, mut clock) = setup();
        let req = sign_request(&reg, "pump-1", b"hello", &mut rng, &mut clock).unwrap();
        assert_eq!(verify_request(&reg, &req, &NonceSet::new()), RequestVerdict::Valid);
    }

    #[test]
    fn unknown_device_cannot_sign() {
        let (reg, mut rng, mut clock) = setup();
        let err = sign_request(&reg, "ghost", b"x", &mut rng, &mut clock).unwrap_err();
        assert!(err.to_string().contains("device not enrolled"));
    }

    #[test]
    fn duplicate_enrollment_rejected() {
        let (mut reg, mut rng, _) = setup();
        assert!(reg.enroll("pump-1", &mut rng).is_err());
    }

    #[test]
    fn request_from_unknown_device() {
        let (reg, mut rng, mut clock) = setup();
        let mut req = sign_request(&reg, "pump-1", b"x", &mut rng, &mut clock).unwrap();
        req.device_id = "other".into();
        assert_eq!(verify_request(&reg, &req, &NonceSet::new()), RequestVerdict::UnknownDevice);
    }

    #[test]
    fn replayed_nonce_flagged() {
        let (reg, mut rng, mut clock) = setup();
        let req = sign_request(&reg, "pump-1", b"x", &mut rng, &mut clock).unwrap();
        let mut seen = NonceSet::new();
        seen.insert((req.device_id.clone(), req.nonce));
        assert_eq!(verify_request(&reg, &req, &seen), RequestVerdict::Replay);
    }

    #[test]
    fn logical_clock_steps() {
        let mut c = LogicalClock::new(10, 5);
        assert_eq!([c.now_ms(), c.now_ms(), c.now_ms()], [10, 15, 20]);
    }

    #[test]
    fn genesis_is_fixed() {
        let g = Block::genesis();
        assert_eq!(g.index, 0);
        assert_eq!(g.prev_hash, ZERO_HASH);
        assert_eq!(g, Block::genesis());
        assert!(verify_blocks(&[g]).is_ok());
    }

    #[test]
    fn block_bytes_round_trip() {
        let (reg, mut rng, mut clock) = setup();
        let mut ledger = Ledger::new([9; 32]);
        let req = sign_request(&reg, "pump-1", b"abc", &mut rng, &mut clock).unwrap();
        let b = ledger.append_block(&req, VerdictCode::ACCEPTED_CLASSIFIER, &mut clock).unwrap().clone();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), BLOCK_BYTES);
        assert_eq!(Block::from_bytes(&bytes).unwrap(), b);
        assert!(ledger.countersignature_valid(&b));
    }

    #[test]
    fn rejected_blocks_are_not_countersigned() {
        let (reg, mut rng, mut clock) = setup();
        let mut ledger = Ledger::new([9; 32]);
        let req = sign_request(&reg, "pump-1", b"abc", &mut rng, &mut clock).unwrap();
        let b = ledger.append_block(&req, VerdictCode::BAD_TAG, &mut clock).unwrap();
        assert_eq!(b.countersignature, ZERO_HASH);
    }

    #[test]
    fn keyless_ledger_refuses_acceptances() {
        let (reg, mut rng, mut clock) = setup();
        let mut ledger = Ledger::from_blocks(vec![Block::genesis()], None);
        let req = sign_request(&reg, "pump-1", b"abc", &mut rng, &mut clock).unwrap();
        assert!(ledger.append_block(&req, VerdictCode::ACCEPTED_PATTERN, &mut clock).is_err());
        assert!(ledger.append_block(&req, VerdictCode::REPLAY, &mut clock).is_ok());
    }

    #[test]
    fn registry_json_round_trip() {
        let (reg, _, _) = setup();
        let text = serde_json::to_string(&reg).unwrap();
        let back: DeviceRegistry = serde_json::from_str(&text).unwrap();
        assert_eq!(back, reg);
    }

    #[test]
    fn verdict_codes_partition() {
        assert!(VerdictCode::ACCEPTED_PATTERN.is_accepted());
        assert!(!VerdictCode::KNOWN_ATTACK.is_accepted());
        assert_eq!(VerdictCode::REPLAY.reason(), "replay");
    }
}
