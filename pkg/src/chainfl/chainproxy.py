"""Bridge between the FL engine and the ledger.

:class:`ChainProxy` wraps every contract method as a typed call, owns the
per-sender nonces and the order in which transactions enter the queue, and
seals exactly one block per logical step:

====================  ==============================================
open_session          deploy (setup block)
bind_clients          registrations + election of round 1
submit_round(r)       records (ascending client_id), settlement of r,
                      election of r + 1
finalize_model        watermark issuance + token mint
====================  ==============================================

accounts[0] signs only server-role transactions (deploy, election,
settlement, issuance); client transactions are signed by the client's own
address.  The session is the single serialization point: a second mutating
call while one is in flight raises :class:`ConcurrentSessionUse`.
"""
from __future__ import annotations

import functools
import threading
from pathlib import Path
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import contracts, ledger as lg
from . import watermark as wm


class BridgeError(Exception):
    pass


class TooManyClients(BridgeError):
    pass


class UnboundClient(BridgeError):
    pass


class AlreadyBound(BridgeError):
    pass


class OutOfOrderRound(BridgeError):
    pass


class ConcurrentSessionUse(BridgeError):
    pass


class WatermarkEmbeddingFailed(BridgeError):
    pass


@dataclass(frozen=True)
class ContractConfig:
    watermark_bits: int = 32


@dataclass(frozen=True)
class RoundMeta:
    """Per-client round result in on-chain units (micro-units for metrics)."""

    client_id: str
    accuracy: int
    loss: int
    dataset_size: int


@dataclass(frozen=True)
class RoundReceipt:
    next_election: contracts.ElectionResult
    block_hash: bytes
    rewards: dict[str, int]


@dataclass(frozen=True)
class Finalized:
    token: contracts.ModelToken
    spec: contracts.WatermarkSpec
    params: object
    block_hash: bytes


def _exclusive(method):
    @functools.wraps(method)
    def wrapper(self, *args, **kwargs):
        if not self._busy.acquire(blocking=False):
            raise ConcurrentSessionUse(f"{method.__name__} called while another call is in flight")
        try:
            return method(self, *args, **kwargs)
        finally:
            self._busy.release()
    return wrapper


class ChainProxy:
    def __init__(self, ledger: lg.Ledger, config: ContractConfig):
        self.ledger = ledger
        self.config = config
        self.bindings: dict[str, bytes] = {}
        self.round_tag = 0
        self._nonces: dict[bytes, int] = {}
        self._busy = threading.Lock()

    # -------------------------------------------------------------- plumbing

    @property
    def accounts(self) -> tuple[bytes, ...]:
        return self.ledger.accounts

    @property
    def server(self) -> bytes:
        return self.ledger.accounts[0]

    @property
    def states(self) -> dict:
        return self.ledger.contract_states

    def client_of(self, address: bytes) -> str:
        for cid, a in self.bindings.items():
            if a == address:
                return cid
        raise UnboundClient(f"address {address.hex()} is not bound to a client")

    def address_of(self, client_id: str) -> bytes:
        try:
            return self.bindings[client_id]
        except KeyError:
            raise UnboundClient(f"client {client_id!r} is not bound") from None

    def _submit(self, sender: bytes, contract: str, method: str, args: dict) -> None:
        nonce = self._nonces.get(sender, 0)
        tx = lg.Transaction.call(nonce, sender, contract, method, args, self.round_tag)
        self.ledger.submit_transaction(tx)
        self._nonces[sender] = nonce + 1

    def _seal(self) -> lg.Block:
        block = self.ledger.seal_block()
        for tx, receipt in zip(block.txs, block.receipts):
            if not receipt.ok:
                raise contracts.error_from_code(
                    receipt.error, f"{tx.contract}.{tx.method} failed in block {block.index}: "
                                   f"{receipt.message}")
        return block

    # -------------------------------------------------------------- calls

    @_exclusive
    def bind_clients(self, client_ids: Sequence[str]) -> dict[str, bytes]:
        """Client i gets accounts[i + 1]; registrations and round-1 election share a block."""
        if self.bindings:
            raise AlreadyBound("clients are already bound for this session")
        client_ids = list(client_ids)
        if len(set(client_ids)) != len(client_ids):
            raise contracts.DuplicateClientId("client ids must be unique")
        if len(client_ids) > len(self.accounts) - 1:
            raise TooManyClients(
                f"{len(client_ids)} clients need {len(client_ids) + 1} accounts "
                f"(accounts[0] is the server); ledger has {len(self.accounts)}")
        bindings = {cid: self.accounts[i + 1] for i, cid in enumerate(client_ids)}
        for cid, addr in bindings.items():
            self._submit(addr, "clients", "register_client", {"address": addr, "client_id": cid})
        self._submit(self.server, "election", "elect_aggregator", {"round": 1})
        self._seal()
        self.bindings = bindings
        return dict(bindings)

    @_exclusive
    def submit_round(self, round_: int, metas: Sequence[RoundMeta], budget: int) -> RoundReceipt:
        if round_ != self.round_tag + 1:
            raise OutOfOrderRound(f"expected round {self.round_tag + 1}, got {round_}")
        ordered = sorted(metas, key=lambda m: m.client_id)
        for m in ordered:
            self.address_of(m.client_id)
            for v in (m.accuracy, m.loss, m.dataset_size):
                if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                    raise TypeError(f"{m.client_id}: on-chain metrics must be integers, got {v!r}")
        if isinstance(budget, bool) or not isinstance(budget, int):
            raise TypeError(f"budget must be an integer, got {budget!r}")
        # everything is validated, so the queue cannot be left half-filled
        self.round_tag = round_
        for m in ordered:
            addr = self.bindings[m.client_id]
            self._submit(addr, "records", "record_training", {
                "round": round_, "client": addr, "accuracy": int(m.accuracy),
                "loss": int(m.loss), "dataset_size": int(m.dataset_size)})
        self._submit(self.server, "incentives", "distribute_incentives",
                     {"round": round_, "budget": budget})
        self._submit(self.server, "election", "elect_aggregator", {"round": round_ + 1})
        block = self._seal()
        rewards = {self.client_of(a): r for a, r in block.receipts[-2].result.items()}
        return RoundReceipt(contracts.election_result(self.states, round_ + 1),
                            block.block_hash, rewards)

    @_exclusive
    def finalize_model(self, model_id: str, owner_client_id: str, final_params,
                       embed: Callable | None = None) -> Finalized:
        """Issue a watermark, embed it, commit and mint, all in one block.

        ``embed(params, bits, key_seed)`` returns the watermarked parameters.
        The issued bits depend only on the model id and the current head hash,
        so they are computed here exactly as the contract will compute them.
        """
        owner = self.address_of(owner_client_id)
        if contracts.watermark_spec(self.states, model_id) is not None:
            raise contracts.DuplicateModelId(f"model {model_id!r} already has a watermark")
        k = self.states["watermarks"]["k"]
        bits, key_seed = contracts.watermark_bits_and_seed(model_id, self.ledger.head.block_hash, k)
        params = embed(final_params, np.array(bits), key_seed) if embed else final_params
        commitment = wm.commitment(bits, key_seed)
        self._submit(self.server, "watermarks", "issue_watermark", {"model_id": model_id})
        self._submit(owner, "watermarks", "mint_model_token",
                     {"owner": owner, "model_id": model_id, "commitment": commitment})
        block = self._seal()
        spec = contracts.watermark_spec(self.states, model_id)
        if list(spec.bits) != bits or spec.key_seed != key_seed:
            raise BridgeError("issued watermark differs from the precomputed one")
        token_id = block.receipts[-1].result["token_id"]
        return Finalized(contracts.token(self.states, token_id), spec, params, block.block_hash)

    # -------------------------------------------------------------- queries

    def election(self, round_: int) -> contracts.ElectionResult | None:
        return contracts.election_result(self.states, round_)

    def records(self, round_: int) -> list[contracts.RoundRecord]:
        return contracts.round_records(self.states, round_)

    def balances(self) -> dict[str, int]:
        return {self.client_of(a): v for a, v in contracts.balances(self.states).items()}

    def verify_ownership(self, token_id: int, bits, key_seed: int) -> bool:
        return contracts.verify_ownership(self.states, token_id, bits, key_seed)


def open_session(chain_seed: int, contract_config: ContractConfig | None = None,
                 n_accounts: int = lg.GENESIS_ACCOUNTS, log_path=None) -> ChainProxy:
    """Start a chain, deploy the contracts from accounts[0] and seal the setup block."""
    config = contract_config or ContractConfig()
    if config.watermark_bits < 1:
        raise contracts.BadDimensions(
            f"watermark bit length must be >= 1, got {config.watermark_bits}")
    ledger = lg.init_chain(chain_seed, n_accounts)
    if log_path is not None:
        ledger.attach_log(log_path)
    session = ChainProxy(ledger, config)
    session._submit(session.server, contracts.DEPLOYER, "deploy",
                    {"watermark_bits": config.watermark_bits})
    session._seal()
    return session


def resume_session(log_path) -> ChainProxy:
    """Rebuild a session from a block log (bindings, nonces and round tag included)."""
    ledger = lg.replay_log(log_path)
    ledger._log = Path(log_path)
    k = ledger.contract_states.get("watermarks", {}).get("k", ContractConfig.watermark_bits)
    session = ChainProxy(ledger, ContractConfig(k))
    session._nonces = {a: ledger.next_nonce(a) for a in ledger.accounts if ledger.next_nonce(a)}
    if ledger.contract_states:
        session.bindings = {c.client_id: c.address for c in contracts.clients(ledger.contract_states)}
    session.round_tag = max((tx.round_tag for b in ledger.chain for tx in b.txs), default=0)
    return session
