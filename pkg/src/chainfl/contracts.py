"""Native contract state machines executed by the ledger's sealer.

Five contracts live side by side in one ``states`` mapping:

``clients``     client registration (address <-> client_id)
``records``     per-round training results (fixed-point metrics)
``election``    per-round aggregator draw
``incentives``  token balances and per-round settlements
``watermarks``  watermark issuance and the model-token registry

Each method is a pure function of ``(states, ctx, args)``.  The ledger runs it
against a private copy of the states and keeps the copy only if the method
returns normally, so a raised :class:`ContractError` leaves nothing behind.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .watermark import BadDimensions as _WatermarkBadDimensions

CONTRACT_NAMES = ("clients", "election", "incentives", "records", "watermarks")
DEPLOYER = "deployer"
MICRO = 1_000_000


# ---------------------------------------------------------------- errors


class ContractError(Exception):
    code = "ContractError"


class NotDeployed(ContractError):
    code = "NotDeployed"


class NotServerAccount(ContractError):
    code = "NotServerAccount"


class AlreadyDeployed(ContractError):
    code = "AlreadyDeployed"


class BadDimensions(ContractError, _WatermarkBadDimensions):
    code = "BadDimensions"


class SenderMismatch(ContractError):
    code = "SenderMismatch"


class DuplicateAddress(ContractError):
    code = "DuplicateAddress"


class DuplicateClientId(ContractError):
    code = "DuplicateClientId"


class UnknownAccount(ContractError):
    code = "UnknownAccount"


class UnregisteredClient(ContractError):
    code = "UnregisteredClient"


class DuplicateRecord(ContractError):
    code = "DuplicateRecord"


class InvalidMetric(ContractError):
    code = "InvalidMetric"


class InvalidRound(ContractError):
    code = "InvalidRound"


class NoRegisteredClients(ContractError):
    code = "NoRegisteredClients"


class AlreadyElected(ContractError):
    code = "AlreadyElected"


class RoundNotRecorded(ContractError):
    code = "RoundNotRecorded"


class AlreadySettled(ContractError):
    code = "AlreadySettled"


class InvalidBudget(ContractError):
    code = "InvalidBudget"


class DuplicateModelId(ContractError):
    code = "DuplicateModelId"


class NoWatermarkIssued(ContractError):
    code = "NoWatermarkIssued"


class CommitmentMismatch(ContractError):
    code = "CommitmentMismatch"


class AlreadyTokenized(ContractError):
    code = "AlreadyTokenized"


class UnregisteredOwner(ContractError):
    code = "UnregisteredOwner"


class NotOwner(ContractError):
    code = "NotOwner"


class UnknownToken(ContractError):
    code = "UnknownToken"


class UnregisteredRecipient(ContractError):
    code = "UnregisteredRecipient"


ERRORS: dict[str, type[ContractError]] = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, ContractError)
}


def error_from_code(code: str, message: str = "") -> ContractError:
    return ERRORS.get(code, ContractError)(message or code)


# ---------------------------------------------------------------- views


@dataclass(frozen=True)
class ClientRecord:
    address: bytes
    client_id: str
    registered_at: int


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client: bytes
    accuracy: int
    loss: int
    dataset_size: int


@dataclass(frozen=True)
class ElectionResult:
    round: int
    aggregator: bytes
    seed_digest: bytes


@dataclass(frozen=True)
class WatermarkSpec:
    model_id: str
    k: int
    bits: tuple[int, ...]
    key_seed: int
    issued_at: int


@dataclass(frozen=True)
class ModelToken:
    token_id: int
    owner: bytes
    model_id: str
    commitment: bytes
    history: tuple[tuple[bytes, bytes, int], ...] = ()


@dataclass(frozen=True)
class ExecContext:
    """What a contract method may see besides its arguments."""

    sender: bytes
    height: int
    prev_hash: bytes
    accounts: tuple[bytes, ...]

    @property
    def server(self) -> bytes:
        return self.accounts[0]


# ---------------------------------------------------------------- pure rules


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def election_seed(prev_hash: bytes, round_: int) -> bytes:
    return sha256(prev_hash, round_.to_bytes(8, "big"))


def _draw_word(seed_digest: bytes, j: int) -> int:
    if j == 0:
        return int.from_bytes(seed_digest[:8], "big")
    return int.from_bytes(sha256(seed_digest, j.to_bytes(8, "big"))[:8], "big")


def weighted_draw(seed_digest: bytes, weights: list[int]) -> int:
    """Index drawn with probability weight/sum(weights).

    64-bit words are taken from the seed digest (word 0 is its first 8 bytes,
    word j >= 1 is the first 8 bytes of SHA-256(seed_digest | j as 8-byte BE))
    and rejected above the largest multiple of the total, so the reduction
    modulo the total is unbiased.
    """
    total = sum(weights)
    if total <= 0 or any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative with a positive sum")
    limit = (1 << 64) - ((1 << 64) % total)
    j = 0
    while True:
        word = _draw_word(seed_digest, j)
        if word < limit:
            break
        j += 1
    target = word % total
    acc = 0
    for i, w in enumerate(weights):
        acc += w
        if target < acc:
            return i
    raise AssertionError("unreachable")


def largest_remainder(budget: int, shares: list[tuple[str, int]]) -> dict[str, int]:
    """Split ``budget`` proportionally to integer shares; keys are tie-break ids.

    Floors of the exact quotas are handed out first, then the leftover units go
    one each to the largest remainders, ties resolved by ascending id.
    """
    total = sum(s for _, s in shares)
    if total <= 0:
        raise ValueError("shares must have a positive sum")
    floors = {}
    remainders = []
    for ident, s in shares:
        q, r = divmod(budget * s, total)
        floors[ident] = q
        remainders.append((-r, ident))
    leftover = budget - sum(floors.values())
    for _, ident in sorted(remainders)[:leftover]:
        floors[ident] += 1
    return floors


def watermark_bits_and_seed(model_id: str, prev_hash: bytes, k: int) -> tuple[list[int], int]:
    """Issuance rule: bit i comes from digest block i // 256, MSB first."""
    mid = model_id.encode("utf-8")
    bits = []
    blocks: dict[int, bytes] = {}
    for i in range(k):
        b = i // 256
        if b not in blocks:
            blocks[b] = sha256(mid, prev_hash, b"bits", b.to_bytes(4, "big"))
        byte = blocks[b][(i % 256) // 8]
        bits.append(1 if (byte >> (7 - i % 8)) & 1 else -1)
    key_seed = int.from_bytes(sha256(mid, prev_hash, b"seed")[:8], "big")
    return bits, key_seed


def _commit(bits, key_seed: int) -> bytes:
    # kept separate from watermark.commitment on purpose; the two are cross-checked
    encoded = bytearray()
    for b in bits:
        if b == 1:
            encoded.append(1)
        elif b == -1:
            encoded.append(0)
        else:
            raise ValueError(f"watermark bit must be +1 or -1, got {b!r}")
    if not 0 <= key_seed < 1 << 64:
        raise ValueError("key seed must fit in 64 unsigned bits")
    return sha256(bytes(encoded), key_seed.to_bytes(8, "big"))


# ---------------------------------------------------------------- methods


def _require_deployed(states):
    if not states:
        raise NotDeployed("contracts are not deployed")


def _require_server(ctx: ExecContext):
    if ctx.sender != ctx.server:
        raise NotServerAccount("only accounts[0] may call this method")


def _require_sender(ctx: ExecContext, who: bytes):
    if ctx.sender != who:
        raise SenderMismatch("transaction sender does not match the acting address")


def deploy(states, ctx, watermark_bits):
    if ctx.sender != ctx.server:
        raise NotServerAccount("contracts must be deployed from accounts[0]")
    if states:
        raise AlreadyDeployed("contracts already deployed")
    if watermark_bits < 1:
        raise BadDimensions(f"watermark bit length must be >= 1, got {watermark_bits}")
    states["clients"] = {"by_address": {}, "by_id": {}}
    states["records"] = {"rounds": {}}
    states["election"] = {"results": {}}
    states["incentives"] = {"balances": {}, "total_minted": 0, "settled": {}}
    states["watermarks"] = {
        "k": watermark_bits,
        "specs": {},
        "tokens": {},
        "by_model": {},
        "next_token_id": 1,
    }
    return {"deployer": ctx.sender, "height": ctx.height}


def register_client(states, ctx, address, client_id):
    _require_deployed(states)
    _require_sender(ctx, address)
    if address not in ctx.accounts:
        raise UnknownAccount("address is not a ledger account")
    reg = states["clients"]
    if address in reg["by_address"]:
        raise DuplicateAddress(f"address {address.hex()} already registered")
    if client_id in reg["by_id"]:
        raise DuplicateClientId(f"client_id {client_id!r} already registered")
    reg["by_address"][address] = {"client_id": client_id, "registered_at": ctx.height}
    reg["by_id"][client_id] = address
    return {"client_id": client_id, "registered_at": ctx.height}


def record_training(states, ctx, round, client, accuracy, loss, dataset_size):
    _require_deployed(states)
    _require_sender(ctx, client)
    if client not in states["clients"]["by_address"]:
        raise UnregisteredClient(f"client {client.hex()} is not registered")
    if round < 1:
        raise InvalidRound("round must be >= 1")
    if not 0 <= accuracy <= MICRO or loss < 0 or dataset_size < 1:
        raise InvalidMetric("accuracy, loss or dataset_size out of range")
    rounds = states["records"]["rounds"]
    per_round = rounds.setdefault(round, {})
    if client in per_round:
        raise DuplicateRecord(f"round {round} already has a record for this client")
    per_round[client] = {"accuracy": accuracy, "loss": loss, "dataset_size": dataset_size}
    return {"round": round, "client": client}


def election_weights(states, round_: int) -> tuple[list[bytes], list[int]]:
    """Candidates in ascending client_id order and their draw weights."""
    by_id = states["clients"]["by_id"]
    candidates = [by_id[cid] for cid in sorted(by_id)]
    if round_ == 1:
        return candidates, [1] * len(candidates)
    prev = states["records"]["rounds"].get(round_ - 1, {})
    return candidates, [prev[a]["dataset_size"] if a in prev else 0 for a in candidates]


def elect_aggregator(states, ctx, round):
    _require_deployed(states)
    _require_server(ctx)
    if round < 1:
        raise InvalidRound("round must be >= 1")
    if not states["clients"]["by_id"]:
        raise NoRegisteredClients("no registered clients to elect from")
    results = states["election"]["results"]
    if round in results:
        raise AlreadyElected(f"round {round} already has an aggregator")
    if round > 1 and not states["records"]["rounds"].get(round - 1):
        raise RoundNotRecorded(f"round {round - 1} has no training records")
    candidates, weights = election_weights(states, round)
    seed_digest = election_seed(ctx.prev_hash, round)
    winner = candidates[weighted_draw(seed_digest, weights)]
    results[round] = {"aggregator": winner, "seed_digest": seed_digest}
    return {"round": round, "aggregator": winner, "seed_digest": seed_digest}


def distribute_incentives(states, ctx, round, budget):
    _require_deployed(states)
    _require_server(ctx)
    if budget < 1:
        raise InvalidBudget("budget must be >= 1")
    records = states["records"]["rounds"].get(round)
    if not records:
        raise RoundNotRecorded(f"round {round} has no training records")
    inc = states["incentives"]
    if round in inc["settled"]:
        raise AlreadySettled(f"round {round} already settled")
    by_address = states["clients"]["by_address"]
    shares = [(by_address[a]["client_id"], r["dataset_size"]) for a, r in records.items()]
    split = largest_remainder(budget, shares)
    by_id = states["clients"]["by_id"]
    rewards = {by_id[cid]: amount for cid, amount in split.items()}
    for addr, amount in rewards.items():
        inc["balances"][addr] = inc["balances"].get(addr, 0) + amount
    inc["total_minted"] += budget
    inc["settled"][round] = rewards
    return rewards


def issue_watermark(states, ctx, model_id):
    _require_deployed(states)
    _require_server(ctx)
    wm = states["watermarks"]
    if model_id in wm["specs"]:
        raise DuplicateModelId(f"model {model_id!r} already has a watermark")
    bits, key_seed = watermark_bits_and_seed(model_id, ctx.prev_hash, wm["k"])
    spec = {"k": wm["k"], "bits": bits, "key_seed": key_seed, "issued_at": ctx.height}
    wm["specs"][model_id] = spec
    return dict(spec, model_id=model_id)


def mint_model_token(states, ctx, owner, model_id, commitment):
    _require_deployed(states)
    _require_sender(ctx, owner)
    if owner not in states["clients"]["by_address"]:
        raise UnregisteredOwner("token owner is not a registered client")
    wm = states["watermarks"]
    spec = wm["specs"].get(model_id)
    if spec is None:
        raise NoWatermarkIssued(f"no watermark issued for model {model_id!r}")
    if model_id in wm["by_model"]:
        raise AlreadyTokenized(f"model {model_id!r} already tokenized")
    if commitment != _commit(spec["bits"], spec["key_seed"]):
        raise CommitmentMismatch("commitment does not match the issued watermark")
    token_id = wm["next_token_id"]
    wm["next_token_id"] = token_id + 1
    wm["tokens"][token_id] = {
        "owner": owner,
        "model_id": model_id,
        "commitment": commitment,
        "minted_at": ctx.height,
        "history": [],
    }
    wm["by_model"][model_id] = token_id
    return {"token_id": token_id}


def transfer_token(states, ctx, token_id, sender, recipient):
    _require_deployed(states)
    token = states["watermarks"]["tokens"].get(token_id)
    if token is None:
        raise UnknownToken(f"token {token_id} does not exist")
    if sender != token["owner"] or ctx.sender != token["owner"]:
        raise NotOwner("only the current owner may transfer the token")
    if recipient not in states["clients"]["by_address"]:
        raise UnregisteredRecipient("recipient is not a registered client")
    token["owner"] = recipient
    token["history"].append([sender, recipient, ctx.height])
    return {"token_id": token_id, "owner": recipient}


# ---------------------------------------------------------------- catalog


@dataclass(frozen=True)
class MethodSpec:
    contract: str
    name: str
    fn: Callable
    args: tuple[tuple[str, str], ...]
    errors: tuple[str, ...]
    signer: str
    doc: str = field(default="", compare=False)


_GENERIC = ("NotDeployed",)

METHODS: dict[tuple[str, str], MethodSpec] = {
    (m.contract, m.name): m
    for m in [
        MethodSpec(DEPLOYER, "deploy", deploy, (("watermark_bits", "int"),),
                   ("NotServerAccount", "AlreadyDeployed", "BadDimensions"), "server",
                   "initialize all contract states"),
        MethodSpec("clients", "register_client", register_client,
                   (("address", "address"), ("client_id", "str")),
                   _GENERIC + ("SenderMismatch", "UnknownAccount", "DuplicateAddress",
                               "DuplicateClientId"), "self"),
        MethodSpec("records", "record_training", record_training,
                   (("round", "int"), ("client", "address"), ("accuracy", "int"),
                    ("loss", "int"), ("dataset_size", "int")),
                   _GENERIC + ("SenderMismatch", "UnregisteredClient", "InvalidRound",
                               "InvalidMetric", "DuplicateRecord"), "self"),
        MethodSpec("election", "elect_aggregator", elect_aggregator, (("round", "int"),),
                   _GENERIC + ("NotServerAccount", "InvalidRound", "NoRegisteredClients",
                               "AlreadyElected", "RoundNotRecorded"), "server"),
        MethodSpec("incentives", "distribute_incentives", distribute_incentives,
                   (("round", "int"), ("budget", "int")),
                   _GENERIC + ("NotServerAccount", "InvalidBudget", "RoundNotRecorded",
                               "AlreadySettled"), "server"),
        MethodSpec("watermarks", "issue_watermark", issue_watermark, (("model_id", "str"),),
                   _GENERIC + ("NotServerAccount", "DuplicateModelId"), "server"),
        MethodSpec("watermarks", "mint_model_token", mint_model_token,
                   (("owner", "address"), ("model_id", "str"), ("commitment", "digest")),
                   _GENERIC + ("SenderMismatch", "UnregisteredOwner", "NoWatermarkIssued",
                               "AlreadyTokenized", "CommitmentMismatch"), "self"),
        MethodSpec("watermarks", "transfer_token", transfer_token,
                   (("token_id", "int"), ("sender", "address"), ("recipient", "address")),
                   _GENERIC + ("UnknownToken", "NotOwner", "UnregisteredRecipient"), "self"),
    ]
}


def _type_ok(kind: str, value: Any) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind in ("address", "digest"):
        return isinstance(value, bytes) and len(value) == 32
    return False


def check_args(contract: str, method: str, args: Any) -> str | None:
    """Return a description of the schema violation, or None if ``args`` fit."""
    spec = METHODS.get((contract, method))
    if spec is None:
        return f"unknown method {contract}.{method}"
    if not isinstance(args, dict):
        return "payload must decode to a mapping"
    expected = [name for name, _ in spec.args]
    if sorted(args) != sorted(expected):
        return f"{contract}.{method} expects arguments {expected}, got {sorted(args)}"
    for name, kind in spec.args:
        if not _type_ok(kind, args[name]):
            return f"argument {name!r} of {contract}.{method} must be {kind}"
    return None


def execute(states: dict, ctx: ExecContext, contract: str, method: str, args: dict):
    """Run one method; returns ``(new_states, result)`` or raises ContractError."""
    spec = METHODS[(contract, method)]
    work = copy.deepcopy(states)
    result = spec.fn(work, ctx, **args)
    return work, result


def manifest() -> dict:
    """Machine-readable method catalog shared by the bridge and the CLI."""
    out: dict[str, dict] = {}
    for (contract, name), spec in sorted(METHODS.items()):
        out.setdefault(contract, {})[name] = {
            "args": [{"name": n, "type": t} for n, t in spec.args],
            "errors": list(spec.errors),
            "signer": spec.signer,
        }
    return {"contracts": out, "types": {
        "int": "signed integer",
        "str": "utf-8 string",
        "address": "32-byte account identifier",
        "digest": "32-byte SHA-256 digest",
    }}


def manifest_json() -> str:
    return json.dumps(manifest(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- queries


def clients(states) -> list[ClientRecord]:
    _require_deployed(states)
    return [
        ClientRecord(addr, rec["client_id"], rec["registered_at"])
        for addr, rec in sorted(states["clients"]["by_address"].items(),
                                key=lambda kv: kv[1]["client_id"])
    ]


def round_records(states, round_: int) -> list[RoundRecord]:
    _require_deployed(states)
    per_round = states["records"]["rounds"].get(round_, {})
    by_address = states["clients"]["by_address"]
    rows = [
        RoundRecord(round_, a, r["accuracy"], r["loss"], r["dataset_size"])
        for a, r in per_round.items()
    ]
    return sorted(rows, key=lambda r: by_address[r.client]["client_id"])


def election_result(states, round_: int) -> ElectionResult | None:
    _require_deployed(states)
    res = states["election"]["results"].get(round_)
    if res is None:
        return None
    return ElectionResult(round_, res["aggregator"], res["seed_digest"])


def balances(states) -> dict[bytes, int]:
    _require_deployed(states)
    return dict(states["incentives"]["balances"])


def total_minted(states) -> int:
    _require_deployed(states)
    return states["incentives"]["total_minted"]


def watermark_spec(states, model_id: str) -> WatermarkSpec | None:
    _require_deployed(states)
    s = states["watermarks"]["specs"].get(model_id)
    if s is None:
        return None
    return WatermarkSpec(model_id, s["k"], tuple(s["bits"]), s["key_seed"], s["issued_at"])


def token(states, token_id: int) -> ModelToken:
    _require_deployed(states)
    t = states["watermarks"]["tokens"].get(token_id)
    if t is None:
        raise UnknownToken(f"token {token_id} does not exist")
    return ModelToken(token_id, t["owner"], t["model_id"], t["commitment"],
                      tuple(tuple(h) for h in t["history"]))


def tokens(states) -> list[ModelToken]:
    _require_deployed(states)
    return [token(states, tid) for tid in sorted(states["watermarks"]["tokens"])]


def verify_ownership(states, token_id: int, claimed_bits, claimed_seed: int) -> bool:
    t = token(states, token_id)
    try:
        return _commit(list(claimed_bits), int(claimed_seed)) == t.commitment
    except ValueError:
        return False
