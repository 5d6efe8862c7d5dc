"""Deterministic in-process blockchain.

A single sealer drains a FIFO of transactions into hash-chained blocks.  Each
transaction is dispatched to the native contracts in :mod:`chainfl.contracts`;
a failing call is kept in the block with a failure receipt and changes no
state.  After every block the state root is SHA-256 over the canonical
encoding of ``{"accounts": [...], "contracts": [[name, state], ...]}`` with
contracts sorted by name, so replaying the block list from the chain seed must
land on the same root at every height.

The ledger is single-writer.  Callers serialize ``submit_transaction`` and
``seal_block`` themselves (the bridge does this); reads are safe only while no
block is being sealed.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import codec, contracts

GENESIS_ACCOUNTS = 10
ZERO_HASH = bytes(32)
LOG_MAGIC = b"CFLBLOG1"
_LEN = struct.Struct(">I")


# ---------------------------------------------------------------- errors


class LedgerError(Exception):
    pass


class UnknownSender(LedgerError):
    pass


class BadNonce(LedgerError):
    pass


class SchemaViolation(LedgerError):
    pass


class NotFound(LedgerError, KeyError):
    pass


class ReplayError(LedgerError):
    """Replay stopped at ``height``; every earlier block checked out."""

    def __init__(self, height: int, message: str):
        super().__init__(f"height {height}: {message}")
        self.height = height


class BrokenHashChain(ReplayError):
    pass


class StateRootMismatch(ReplayError):
    pass


# ---------------------------------------------------------------- records


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_address(chain_seed: int, index: int) -> bytes:
    return sha256(b"chainfl-account" + chain_seed.to_bytes(8, "big") + index.to_bytes(4, "big"))


@dataclass(frozen=True)
class Transaction:
    nonce: int
    sender: bytes
    contract: str
    method: str
    payload: bytes
    round_tag: int = 0

    @classmethod
    def call(cls, nonce: int, sender: bytes, contract: str, method: str,
             args: dict, round_tag: int = 0) -> "Transaction":
        return cls(nonce, sender, contract, method, codec.encode(args), round_tag)

    def to_obj(self) -> list:
        return [self.nonce, self.sender, self.contract, self.method, self.payload, self.round_tag]

    @classmethod
    def from_obj(cls, obj: Any) -> "Transaction":
        nonce, sender, contract, method, payload, round_tag = obj
        return cls(nonce, sender, contract, method, payload, round_tag)

    @property
    def digest(self) -> bytes:
        return sha256(codec.encode(self.to_obj()))

    def args(self) -> Any:
        return codec.decode(self.payload)


@dataclass(frozen=True)
class Receipt:
    ok: bool
    error: str = ""
    message: str = ""
    result: Any = None

    def to_obj(self) -> list:
        return [self.ok, self.error, self.message, self.result]

    @classmethod
    def from_obj(cls, obj: Any) -> "Receipt":
        ok, error, message, result = obj
        return cls(ok, error, message, result)


def _well_typed(tx: Transaction) -> bool:
    return (type(tx.nonce) is int and tx.nonce >= 0
            and isinstance(tx.sender, bytes) and len(tx.sender) == 32
            and isinstance(tx.contract, str) and isinstance(tx.method, str)
            and isinstance(tx.payload, bytes)
            and type(tx.round_tag) is int and tx.round_tag >= 0)


def block_hash_of(index: int, prev_hash: bytes, txs: Iterable[Transaction], state_root: bytes) -> bytes:
    return sha256(codec.encode([index, prev_hash, [t.digest for t in txs], state_root]))


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    receipts: tuple[Receipt, ...]
    state_root: bytes
    block_hash: bytes

    def recompute_hash(self) -> bytes:
        return block_hash_of(self.index, self.prev_hash, self.txs, self.state_root)

    def to_obj(self) -> list:
        return [self.index, self.prev_hash, [t.to_obj() for t in self.txs],
                [r.to_obj() for r in self.receipts], self.state_root, self.block_hash]

    def encode(self) -> bytes:
        return codec.encode(self.to_obj())

    @classmethod
    def from_obj(cls, obj: Any) -> "Block":
        index, prev_hash, txs, receipts, state_root, block_hash = obj
        return cls(index, prev_hash, tuple(Transaction.from_obj(t) for t in txs),
                   tuple(Receipt.from_obj(r) for r in receipts), state_root, block_hash)


def state_root_of(accounts, contract_states: dict) -> bytes:
    ordered = [[name, contract_states[name]] for name in sorted(contract_states)]
    return sha256(codec.encode({"accounts": list(accounts), "contracts": ordered}))


# ---------------------------------------------------------------- ledger


@dataclass
class Ledger:
    """The whole chain: accounts, contract states, pending queue, blocks."""

    chain_seed: int
    accounts: tuple[bytes, ...]
    contract_states: dict = field(default_factory=dict)
    pending: list[Transaction] = field(default_factory=list)
    chain: list[Block] = field(default_factory=list)
    _next_nonce: dict[bytes, int] = field(default_factory=dict)
    _log: Path | None = None

    @property
    def height(self) -> int:
        """Number of sealed blocks, genesis included."""
        return len(self.chain)

    @property
    def head(self) -> Block:
        return self.chain[-1]

    @property
    def state_root(self) -> bytes:
        return state_root_of(self.accounts, self.contract_states)

    def next_nonce(self, sender: bytes) -> int:
        return self._next_nonce.get(sender, 0)

    def submit_transaction(self, tx: Transaction) -> int:
        """Queue ``tx``; returns its position in the pending FIFO."""
        if not _well_typed(tx):
            raise SchemaViolation("transaction fields have the wrong types")
        if tx.sender not in self.accounts:
            raise UnknownSender(f"sender {tx.sender.hex()} is not a ledger account")
        expected = self.next_nonce(tx.sender)
        if tx.nonce != expected:
            raise BadNonce(f"sender {tx.sender.hex()[:12]} nonce {tx.nonce}, expected {expected}")
        try:
            args = codec.decode(tx.payload)
        except codec.CodecError as exc:
            raise SchemaViolation(f"payload does not decode: {exc}") from exc
        problem = contracts.check_args(tx.contract, tx.method, args)
        if problem:
            raise SchemaViolation(problem)
        self.pending.append(tx)
        self._next_nonce[tx.sender] = expected + 1
        return len(self.pending) - 1

    def seal_block(self) -> Block:
        prev = self.head
        index = len(self.chain)
        receipts = []
        for tx in self.pending:
            ctx = contracts.ExecContext(tx.sender, index, prev.block_hash, self.accounts)
            try:
                new_states, result = contracts.execute(
                    self.contract_states, ctx, tx.contract, tx.method, tx.args())
            except contracts.ContractError as exc:
                receipts.append(Receipt(False, exc.code, str(exc)))
            else:
                self.contract_states = new_states
                receipts.append(Receipt(True, result=result))
        txs = tuple(self.pending)
        root = self.state_root
        block = Block(index, prev.block_hash, txs, tuple(receipts), root,
                      block_hash_of(index, prev.block_hash, txs, root))
        self.chain.append(block)
        self.pending = []
        if self._log is not None:
            append_block(self._log, block)
        return block

    def get_block(self, index: int) -> Block:
        if not 0 <= index < len(self.chain):
            raise NotFound(f"no block at index {index}")
        return self.chain[index]

    def get_state(self, contract: str) -> bytes:
        if contract not in self.contract_states:
            raise NotFound(f"contract {contract!r} is not deployed")
        return codec.encode(self.contract_states[contract])

    def attach_log(self, path) -> None:
        """Write everything sealed so far to ``path`` and append future blocks."""
        path = Path(path)
        write_log(path, self.chain_seed, len(self.accounts), self.chain)
        self._log = path


def init_chain(chain_seed: int, n_accounts: int = GENESIS_ACCOUNTS) -> Ledger:
    if not 0 <= chain_seed < 1 << 64:
        raise ValueError("chain_seed must fit in 64 unsigned bits")
    if n_accounts < GENESIS_ACCOUNTS:
        raise ValueError(f"at least {GENESIS_ACCOUNTS} accounts are required")
    accounts = tuple(derive_address(chain_seed, i) for i in range(n_accounts))
    ledger = Ledger(chain_seed, accounts)
    root = ledger.state_root
    ledger.chain.append(Block(0, ZERO_HASH, (), (), root, block_hash_of(0, ZERO_HASH, (), root)))
    return ledger


def replay(blocks: list[Block], chain_seed: int, n_accounts: int = GENESIS_ACCOUNTS) -> Ledger:
    """Rebuild a ledger from ``blocks``, checking every link and state root."""
    fresh = init_chain(chain_seed, n_accounts)
    if not blocks:
        raise BrokenHashChain(0, "empty block list")
    genesis = blocks[0]
    expected = fresh.chain[0]
    if genesis.index != 0 or genesis.prev_hash != ZERO_HASH or genesis.txs or genesis.receipts:
        raise BrokenHashChain(0, "malformed genesis block")
    if genesis.recompute_hash() != genesis.block_hash:
        raise BrokenHashChain(0, "genesis hash does not match its fields")
    if genesis.state_root != expected.state_root:
        raise StateRootMismatch(0, "genesis state does not match the chain seed")
    for i, block in enumerate(blocks[1:], start=1):
        if block.index != i:
            raise BrokenHashChain(i, f"block claims index {block.index}")
        if block.prev_hash != fresh.head.block_hash:
            raise BrokenHashChain(i, "prev_hash does not link to the previous block")
        if block.recompute_hash() != block.block_hash:
            raise BrokenHashChain(i, "block hash does not match its fields")
        if len(block.receipts) != len(block.txs):
            raise StateRootMismatch(i, "receipt count differs from transaction count")
        for tx in block.txs:
            try:
                fresh.submit_transaction(tx)
            except LedgerError as exc:
                raise StateRootMismatch(i, f"transaction rejected on replay: {exc}") from exc
        sealed = fresh.seal_block()
        if sealed.state_root != block.state_root:
            raise StateRootMismatch(i, "recomputed state root differs")
        if _receipt_bytes(sealed) != _receipt_bytes(block):
            raise StateRootMismatch(i, "recomputed receipts differ")
    return fresh


def _receipt_bytes(block: Block) -> bytes:
    # receipts are outside the block hash, so compare their exact encoding
    return codec.encode([r.to_obj() for r in block.receipts])


# ---------------------------------------------------------------- block log


def _record(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def write_log(path, chain_seed: int, n_accounts: int, blocks: Iterable[Block]) -> None:
    header = codec.encode({"chain_seed": chain_seed, "n_accounts": n_accounts})
    with open(path, "wb") as fh:
        fh.write(LOG_MAGIC)
        fh.write(_record(header))
        for b in blocks:
            fh.write(_record(b.encode()))


def append_block(path, block: Block) -> None:
    with open(path, "ab") as fh:
        fh.write(_record(block.encode()))


def _block_from_bytes(raw: bytes, height: int) -> Block:
    try:
        obj = codec.decode(raw)
        block = Block.from_obj(obj)
    except (codec.CodecError, TypeError, ValueError) as exc:
        raise BrokenHashChain(height, f"undecodable block record: {exc}") from exc
    if block.encode() != raw:
        raise BrokenHashChain(height, "block record is not in canonical form")
    return block


def _parse_header(raw: bytes) -> tuple[int, int]:
    try:
        header = codec.decode(raw)
        if not isinstance(header, dict) or set(header) != {"chain_seed", "n_accounts"}:
            raise ValueError("unexpected header fields")
        chain_seed, n_accounts = header["chain_seed"], header["n_accounts"]
        if not (type(chain_seed) is int and type(n_accounts) is int):
            raise ValueError("header fields must be integers")
    except (codec.CodecError, ValueError) as exc:
        raise BrokenHashChain(0, f"bad log header: {exc}") from exc
    return chain_seed, n_accounts


def parse_log(data: bytes) -> tuple[int, int, list[Block]]:
    """Split a block log into (chain_seed, n_accounts, blocks).

    Records are decoded as soon as they are framed, so a damaged length prefix
    is reported at its own height rather than at a later block.  The header
    counts as height 0, like the genesis block.
    """
    if data[:len(LOG_MAGIC)] != LOG_MAGIC:
        raise BrokenHashChain(0, "not a block log (bad magic)")
    pos = len(LOG_MAGIC)
    header: tuple[int, int] | None = None
    blocks: list[Block] = []
    while pos < len(data):
        height = len(blocks)
        if pos + _LEN.size > len(data):
            raise BrokenHashChain(height, "truncated record length")
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + n > len(data):
            raise BrokenHashChain(height, "truncated record")
        raw = data[pos:pos + n]
        pos += n
        if header is None:
            header = _parse_header(raw)
        else:
            blocks.append(_block_from_bytes(raw, height))
    if header is None:
        raise BrokenHashChain(0, "missing header")
    return header[0], header[1], blocks


def read_log(path) -> tuple[int, int, list[Block]]:
    return parse_log(Path(path).read_bytes())


def replay_log(path) -> Ledger:
    chain_seed, n_accounts, blocks = read_log(path)
    try:
        return replay(blocks, chain_seed, n_accounts)
    except ValueError as exc:  # seed/account count out of range
        raise StateRootMismatch(0, str(exc)) from exc
