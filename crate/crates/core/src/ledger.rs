//! Hash-chained credit ledger.
//!
//! Every stake, payment, reward and penalty is recorded as a
//! [`CreditOperation`] inside a signed [`CreditBlock`]. Blocks are linked by
//! parent hash, validated against the current [`LedgerState`] and finalized
//! by a strict majority of online peers.
//!
//! The block hash covers a canonical byte layout:
//!
//! ```text
//! parent_id     32 bytes
//! timestamp     u64 LE (simulation milliseconds)
//! proposer      u32 LE length + UTF-8 bytes
//! op count      u32 LE
//! per op:       kind tag u8, presence flags u8
//!               (bit0 from, bit1 to, bit2 request_id, bit3 duel_id),
//!               [from], [to], amount u64 LE micro-credits,
//!               [request_id u64 LE], [duel_id u64 LE]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::credits::Credits;
use crate::ids::{DuelId, NodeId, RequestId};

/// 256-bit block hash.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub [u8; 32]);

impl BlockId {
    pub const ZERO: BlockId = BlockId([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(BlockId(out))
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockId({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlockId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    GenesisGrant,
    StakeLock,
    StakeRelease,
    OffloadPayment,
    DuelWinReward,
    DuelPenalty,
    JudgeReward,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::GenesisGrant,
        OpKind::StakeLock,
        OpKind::StakeRelease,
        OpKind::OffloadPayment,
        OpKind::DuelWinReward,
        OpKind::DuelPenalty,
        OpKind::JudgeReward,
    ];

    pub fn tag(self) -> u8 {
        match self {
            OpKind::GenesisGrant => 0,
            OpKind::StakeLock => 1,
            OpKind::StakeRelease => 2,
            OpKind::OffloadPayment => 3,
            OpKind::DuelWinReward => 4,
            OpKind::DuelPenalty => 5,
            OpKind::JudgeReward => 6,
        }
    }

    /// Which of (`from`, `to`) the kind requires.
    fn parties(self) -> (bool, bool) {
        match self {
            OpKind::OffloadPayment => (true, true),
            OpKind::GenesisGrant | OpKind::DuelWinReward | OpKind::JudgeReward => (false, true),
            OpKind::DuelPenalty | OpKind::StakeLock | OpKind::StakeRelease => (true, false),
        }
    }
}

/// One credit-related record inside a block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditOperation {
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<NodeId>,
    pub amount: Credits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<RequestId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duel_id: Option<DuelId>,
}

impl CreditOperation {
    fn new(kind: OpKind, from: Option<NodeId>, to: Option<NodeId>, amount: Credits) -> Self {
        CreditOperation {
            kind,
            from,
            to,
            amount,
            request_id: None,
            duel_id: None,
        }
    }

    pub fn genesis_grant(to: NodeId, amount: Credits) -> Self {
        Self::new(OpKind::GenesisGrant, None, Some(to), amount)
    }

    pub fn stake_lock(from: NodeId, amount: Credits) -> Self {
        Self::new(OpKind::StakeLock, Some(from), None, amount)
    }

    pub fn stake_release(from: NodeId, amount: Credits) -> Self {
        Self::new(OpKind::StakeRelease, Some(from), None, amount)
    }

    pub fn offload_payment(from: NodeId, to: NodeId, amount: Credits, request: RequestId) -> Self {
        CreditOperation {
            request_id: Some(request),
            ..Self::new(OpKind::OffloadPayment, Some(from), Some(to), amount)
        }
    }

    pub fn duel_win_reward(to: NodeId, amount: Credits, duel: DuelId) -> Self {
        CreditOperation {
            duel_id: Some(duel),
            ..Self::new(OpKind::DuelWinReward, None, Some(to), amount)
        }
    }

    pub fn duel_penalty(from: NodeId, amount: Credits, duel: DuelId) -> Self {
        CreditOperation {
            duel_id: Some(duel),
            ..Self::new(OpKind::DuelPenalty, Some(from), None, amount)
        }
    }

    pub fn judge_reward(to: NodeId, amount: Credits, duel: DuelId) -> Self {
        CreditOperation {
            duel_id: Some(duel),
            ..Self::new(OpKind::JudgeReward, None, Some(to), amount)
        }
    }

    /// Checks that exactly the parties required by `kind` are present.
    pub fn check_shape(&self) -> Result<(), &'static str> {
        let (need_from, need_to) = self.kind.parties();
        match (need_from, self.from.is_some()) {
            (true, false) => return Err("missing `from`"),
            (false, true) => return Err("unexpected `from`"),
            _ => {}
        }
        match (need_to, self.to.is_some()) {
            (true, false) => Err("missing `to`"),
            (false, true) => Err("unexpected `to`"),
            _ => Ok(()),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind.tag());
        let mut flags = 0u8;
        if self.from.is_some() {
            flags |= 0b0001;
        }
        if self.to.is_some() {
            flags |= 0b0010;
        }
        if self.request_id.is_some() {
            flags |= 0b0100;
        }
        if self.duel_id.is_some() {
            flags |= 0b1000;
        }
        out.push(flags);
        if let Some(from) = &self.from {
            encode_node(from, out);
        }
        if let Some(to) = &self.to {
            encode_node(to, out);
        }
        out.extend_from_slice(&self.amount.micros().to_le_bytes());
        if let Some(r) = self.request_id {
            out.extend_from_slice(&r.to_le_bytes());
        }
        if let Some(d) = self.duel_id {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
}

fn encode_node(node: &NodeId, out: &mut Vec<u8>) {
    let bytes = node.as_str().as_bytes();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Canonical byte layout hashed into the block id.
pub fn canonical_bytes(
    parent_id: &BlockId,
    timestamp: u64,
    proposer: &NodeId,
    operations: &[CreditOperation],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + operations.len() * 40);
    out.extend_from_slice(&parent_id.0);
    out.extend_from_slice(&timestamp.to_le_bytes());
    encode_node(proposer, &mut out);
    out.extend_from_slice(&(operations.len() as u32).to_le_bytes());
    for op in operations {
        op.encode_into(&mut out);
    }
    out
}

pub fn compute_block_id(
    parent_id: &BlockId,
    timestamp: u64,
    proposer: &NodeId,
    operations: &[CreditOperation],
) -> BlockId {
    let digest = Sha256::digest(canonical_bytes(parent_id, timestamp, proposer, operations));
    BlockId(digest.into())
}

/// A signed, hash-linked batch of credit operations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditBlock {
    pub block_id: BlockId,
    pub parent_id: BlockId,
    /// Simulation milliseconds.
    pub timestamp: u64,
    pub proposer: NodeId,
    pub operations: Vec<CreditOperation>,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

impl CreditBlock {
    pub fn recompute_id(&self) -> BlockId {
        compute_block_id(&self.parent_id, self.timestamp, &self.proposer, &self.operations)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Signing and verification over block ids.
pub trait KeyRing {
    /// `None` when no key is held for `node`.
    fn sign(&self, node: &NodeId, block_id: &BlockId) -> Option<Vec<u8>>;
    fn verify(&self, node: &NodeId, block_id: &BlockId, signature: &[u8]) -> bool;
}

/// Default simulation signature: `sha256(secret || block_id)` with a
/// per-node secret.
#[derive(Clone, Debug, Default)]
pub struct KeyedHashKeys {
    secrets: BTreeMap<NodeId, [u8; 32]>,
}

impl KeyedHashKeys {
    pub fn new() -> Self {
        Self::default()
    }

    /// Derives a deterministic secret for every node from a seed.
    pub fn derive<'a>(seed: u64, nodes: impl IntoIterator<Item = &'a NodeId>) -> Self {
        let mut keys = Self::new();
        for node in nodes {
            keys.insert_derived(seed, node.clone());
        }
        keys
    }

    pub fn insert_derived(&mut self, seed: u64, node: NodeId) {
        let mut h = Sha256::new();
        h.update(b"meshserve-node-secret");
        h.update(seed.to_le_bytes());
        h.update(node.as_str().as_bytes());
        self.secrets.insert(node, h.finalize().into());
    }

    pub fn insert(&mut self, node: NodeId, secret: [u8; 32]) {
        self.secrets.insert(node, secret);
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.secrets.contains_key(node)
    }

    fn mac(secret: &[u8; 32], block_id: &BlockId) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(secret);
        h.update(block_id.0);
        h.finalize().to_vec()
    }
}

impl KeyRing for KeyedHashKeys {
    fn sign(&self, node: &NodeId, block_id: &BlockId) -> Option<Vec<u8>> {
        self.secrets.get(node).map(|s| Self::mac(s, block_id))
    }

    fn verify(&self, node: &NodeId, block_id: &BlockId, signature: &[u8]) -> bool {
        self.secrets
            .get(node)
            .is_some_and(|s| Self::mac(s, block_id) == signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("a block must carry at least one operation")]
    EmptyBlock,
    #[error("no signing key for proposer {0}")]
    UnknownKey(NodeId),
    #[error("operation {index} is malformed: {reason}")]
    MalformedOp { index: usize, reason: &'static str },
}

/// Why a block was refused by a validator. Operation indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("parent does not match the current head")]
    BadParent,
    #[error("block id does not match its contents")]
    BadHash,
    #[error("signature does not verify for the proposer")]
    BadSignature,
    #[error("operation {0} is malformed")]
    MalformedOp(usize),
    #[error("operation {op_index} overdraws {node}")]
    Overdraft { node: NodeId, op_index: usize },
    #[error("operation {0} overflows a balance")]
    Overflow(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Accept,
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finality {
    Finalized,
    Dropped,
}

/// Free and staked balance of one node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub free: Credits,
    pub staked: Credits,
}

impl Account {
    pub fn total(&self) -> Credits {
        self.free.saturating_add(self.staked)
    }
}

/// Balances and supply counters obtained by folding finalized blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerState {
    pub balances: BTreeMap<NodeId, Account>,
    pub head: BlockId,
    /// Number of applied blocks.
    pub height: u64,
    pub genesis_total: Credits,
    pub supply_minted: Credits,
    pub supply_burned: Credits,
}

/// Balance effects of one block, computed without touching the state.
struct Transition {
    touched: BTreeMap<NodeId, Account>,
    genesis: Credits,
    minted: Credits,
    burned: Credits,
}

impl LedgerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(0, 0)` for unknown nodes.
    pub fn balance_of(&self, node: &NodeId) -> Account {
        self.balances.get(node).copied().unwrap_or_default()
    }

    pub fn total_held(&self) -> Credits {
        self.balances.values().map(Account::total).sum()
    }

    /// Σ(free + staked) == genesis + minted − burned, exactly.
    pub fn supply_identity_holds(&self) -> bool {
        let rhs = self
            .genesis_total
            .checked_add(self.supply_minted)
            .and_then(|v| v.checked_sub(self.supply_burned));
        rhs == Some(self.total_held())
    }

    fn transition(&self, ops: &[CreditOperation]) -> Result<Transition, Reject> {
        let mut t = Transition {
            touched: BTreeMap::new(),
            genesis: Credits::ZERO,
            minted: Credits::ZERO,
            burned: Credits::ZERO,
        };
        for (index, op) in ops.iter().enumerate() {
            op.check_shape().map_err(|_| Reject::MalformedOp(index))?;
            let overflow = || Reject::Overflow(index);
            let account = |t: &mut Transition, node: &NodeId| -> Account {
                *t.touched
                    .entry(node.clone())
                    .or_insert_with(|| self.balance_of(node))
            };
            let amount = op.amount;
            match op.kind {
                OpKind::GenesisGrant | OpKind::DuelWinReward | OpKind::JudgeReward => {
                    let to = op.to.as_ref().expect("shape checked");
                    let mut acc = account(&mut t, to);
                    acc.free = acc.free.checked_add(amount).ok_or_else(overflow)?;
                    t.touched.insert(to.clone(), acc);
                    if op.kind == OpKind::GenesisGrant {
                        t.genesis = t.genesis.checked_add(amount).ok_or_else(overflow)?;
                    } else {
                        t.minted = t.minted.checked_add(amount).ok_or_else(overflow)?;
                    }
                }
                OpKind::OffloadPayment => {
                    let from = op.from.as_ref().expect("shape checked");
                    let to = op.to.as_ref().expect("shape checked");
                    let mut src = account(&mut t, from);
                    src.free = src.free.checked_sub(amount).ok_or_else(|| Reject::Overdraft {
                        node: from.clone(),
                        op_index: index,
                    })?;
                    t.touched.insert(from.clone(), src);
                    let mut dst = account(&mut t, to);
                    dst.free = dst.free.checked_add(amount).ok_or_else(overflow)?;
                    t.touched.insert(to.clone(), dst);
                }
                OpKind::StakeLock | OpKind::StakeRelease => {
                    let from = op.from.as_ref().expect("shape checked");
                    let mut acc = account(&mut t, from);
                    let overdraft = || Reject::Overdraft {
                        node: from.clone(),
                        op_index: index,
                    };
                    if op.kind == OpKind::StakeLock {
                        acc.free = acc.free.checked_sub(amount).ok_or_else(overdraft)?;
                        acc.staked = acc.staked.checked_add(amount).ok_or_else(overflow)?;
                    } else {
                        acc.staked = acc.staked.checked_sub(amount).ok_or_else(overdraft)?;
                        acc.free = acc.free.checked_add(amount).ok_or_else(overflow)?;
                    }
                    t.touched.insert(from.clone(), acc);
                }
                OpKind::DuelPenalty => {
                    let from = op.from.as_ref().expect("shape checked");
                    let mut acc = account(&mut t, from);
                    let taken = amount.min(acc.staked);
                    acc.staked = acc.staked.saturating_sub(taken);
                    t.burned = t.burned.checked_add(taken).ok_or_else(overflow)?;
                    t.touched.insert(from.clone(), acc);
                }
            }
        }
        Ok(t)
    }

    /// Amount a `DuelPenalty` of `amount` would actually burn right now.
    pub fn penalty_burn(&self, node: &NodeId, amount: Credits) -> Credits {
        amount.min(self.balance_of(node).staked)
    }
}

/// Builds and signs a block on top of `parent`.
pub fn propose_block(
    ops: Vec<CreditOperation>,
    proposer: &NodeId,
    keys: &dyn KeyRing,
    parent: BlockId,
    timestamp: u64,
) -> Result<CreditBlock, LedgerError> {
    if ops.is_empty() {
        return Err(LedgerError::EmptyBlock);
    }
    for (index, op) in ops.iter().enumerate() {
        op.check_shape()
            .map_err(|reason| LedgerError::MalformedOp { index, reason })?;
    }
    let block_id = compute_block_id(&parent, timestamp, proposer, &ops);
    let signature = keys
        .sign(proposer, &block_id)
        .ok_or_else(|| LedgerError::UnknownKey(proposer.clone()))?;
    Ok(CreditBlock {
        block_id,
        parent_id: parent,
        timestamp,
        proposer: proposer.clone(),
        operations: ops,
        signature,
    })
}

/// Checks parent linkage, hash, signature and sequential solvency of every
/// operation against `state`.
pub fn validate_block(
    block: &CreditBlock,
    state: &LedgerState,
    keys: &dyn KeyRing,
) -> Result<(), Reject> {
    if block.parent_id != state.head {
        return Err(Reject::BadParent);
    }
    if block.recompute_id() != block.block_id {
        return Err(Reject::BadHash);
    }
    if !keys.verify(&block.proposer, &block.block_id, &block.signature) {
        return Err(Reject::BadSignature);
    }
    state.transition(&block.operations).map(|_| ())
}

/// Strict-majority rule over the online peer set. Votes from peers outside
/// `online_peers` are ignored; an empty peer set self-finalizes.
pub fn finalize(votes: &BTreeMap<NodeId, Vote>, online_peers: &BTreeSet<NodeId>) -> Finality {
    let n = online_peers.len();
    if n == 0 {
        return Finality::Finalized;
    }
    let accepts = votes
        .iter()
        .filter(|(node, vote)| **vote == Vote::Accept && online_peers.contains(*node))
        .count();
    if accepts >= majority_threshold(n) {
        Finality::Finalized
    } else {
        Finality::Dropped
    }
}

pub fn majority_threshold(n_peers: usize) -> usize {
    n_peers / 2 + 1
}

/// Applies a block that has been validated against `state`.
///
/// # Panics
///
/// If the block was not validated first and one of its operations overdraws
/// or overflows a balance.
pub fn apply_block(mut state: LedgerState, block: &CreditBlock) -> LedgerState {
    let t = state
        .transition(&block.operations)
        .unwrap_or_else(|r| panic!("apply_block on an invalid block: {r}"));
    state.balances.extend(t.touched);
    state.genesis_total = state.genesis_total.saturating_add(t.genesis);
    state.supply_minted = state.supply_minted.saturating_add(t.minted);
    state.supply_burned = state.supply_burned.saturating_add(t.burned);
    state.head = block.block_id;
    state.height += 1;
    state
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("block at height {height} rejected: {reject}")]
pub struct ReplayError {
    pub height: u64,
    pub reject: Reject,
}

#[derive(Debug, Error)]
pub enum ChainIoError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An append-only chain together with the state it folds to.
#[derive(Clone, Debug, Default)]
pub struct Chain {
    blocks: Vec<CreditBlock>,
    state: LedgerState,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[CreditBlock] {
        &self.blocks
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn head(&self) -> BlockId {
        self.state.head
    }

    /// Validates `block` against the current state and appends it.
    pub fn append(&mut self, block: CreditBlock, keys: &dyn KeyRing) -> Result<(), Reject> {
        validate_block(&block, &self.state, keys)?;
        self.append_validated(block);
        Ok(())
    }

    /// Appends a block already validated against this chain's state.
    pub fn append_validated(&mut self, block: CreditBlock) {
        let state = std::mem::take(&mut self.state);
        self.state = apply_block(state, &block);
        self.blocks.push(block);
    }

    /// Folds `blocks` from an empty state, validating each in turn.
    pub fn replay(blocks: &[CreditBlock], keys: &dyn KeyRing) -> Result<LedgerState, ReplayError> {
        let mut state = LedgerState::new();
        for (height, block) in blocks.iter().enumerate() {
            validate_block(block, &state, keys).map_err(|reject| ReplayError {
                height: height as u64,
                reject,
            })?;
            state = apply_block(state, block);
        }
        Ok(state)
    }

    pub fn from_blocks(blocks: Vec<CreditBlock>, keys: &dyn KeyRing) -> Result<Self, ReplayError> {
        let state = Self::replay(&blocks, keys)?;
        Ok(Chain { blocks, state })
    }

    /// One JSON object per line, field order mirroring the canonical layout.
    pub fn to_jsonl(&self) -> String {
        blocks_to_jsonl(&self.blocks)
    }
}

pub fn blocks_to_jsonl(blocks: &[CreditBlock]) -> String {
    let mut out = String::new();
    for block in blocks {
        out.push_str(&serde_json::to_string(block).expect("block serializes"));
        out.push('\n');
    }
    out
}

pub fn blocks_from_jsonl(text: &str) -> Result<Vec<CreditBlock>, ChainIoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| ChainIoError::Json { line: i + 1, source }))
        .collect()
}
