import hashlib
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from chainfl import contracts, ledger as lg
from chainfl import watermark as wm
from conftest import Caller, deployed_ledger


def registered(n=3, seed=1, k=32):
    led = deployed_ledger(seed, k=k)
    call = Caller(led)
    for i in range(1, n + 1):
        a = led.accounts[i]
        call(a, "clients", "register_client", address=a, client_id=f"c{i}")
    call.seal()
    return led, call


def lr_oracle(budget, shares):
    """Largest remainder with exact rationals; ties by ascending id."""
    total = sum(s for _, s in shares)
    quotas = {i: Fraction(budget * s, total) for i, s in shares}
    out = {i: q.numerator // q.denominator for i, q in quotas.items()}
    left = budget - sum(out.values())
    order = sorted(quotas, key=lambda i: (-(quotas[i] - out[i]), i))
    for i in order[:left]:
        out[i] += 1
    return out


# -------------------------------------------------------------- deploy


def test_deploy_from_server():
    led = deployed_ledger()
    assert led.head.receipts[0].ok
    assert contracts.clients(led.contract_states) == []
    assert contracts.tokens(led.contract_states) == []
    assert contracts.total_minted(led.contract_states) == 0
    assert sorted(led.contract_states) == sorted(contracts.CONTRACT_NAMES)


def test_deploy_from_client_rejected():
    led = lg.init_chain(1)
    rc = Caller(led).one(led.accounts[1], contracts.DEPLOYER, "deploy", watermark_bits=32)
    assert rc.error == "NotServerAccount"
    assert led.contract_states == {}


def test_deploy_twice_rejected():
    led = deployed_ledger()
    rc = Caller(led).one(led.accounts[0], contracts.DEPLOYER, "deploy", watermark_bits=32)
    assert rc.error == "AlreadyDeployed"


def test_deploy_zero_bits_rejected():
    led = lg.init_chain(1)
    rc = Caller(led).one(led.accounts[0], contracts.DEPLOYER, "deploy", watermark_bits=0)
    assert rc.error == "BadDimensions"


def test_calls_before_deploy_fail():
    led = lg.init_chain(1)
    a = led.accounts[1]
    rc = Caller(led).one(a, "clients", "register_client", address=a, client_id="c1")
    assert rc.error == "NotDeployed"


# -------------------------------------------------------------- registration


def test_register_records_height():
    led = deployed_ledger()
    a = led.accounts[1]
    rc = Caller(led).one(a, "clients", "register_client", address=a, client_id="c1")
    assert rc.ok
    [rec] = contracts.clients(led.contract_states)
    assert (rec.address, rec.client_id, rec.registered_at) == (a, "c1", led.head.index)


def test_register_duplicate_address():
    led, call = registered(1)
    a = led.accounts[1]
    rc = call.one(a, "clients", "register_client", address=a, client_id="c2")
    assert rc.error == "DuplicateAddress"


def test_register_duplicate_client_id():
    led, call = registered(1)
    a = led.accounts[2]
    rc = call.one(a, "clients", "register_client", address=a, client_id="c1")
    assert rc.error == "DuplicateClientId"


def test_register_for_someone_else_rejected():
    led, call = registered(0)
    rc = call.one(led.accounts[1], "clients", "register_client",
                  address=led.accounts[2], client_id="c2")
    assert rc.error == "SenderMismatch"


def test_ten_registrations():
    led = deployed_ledger(n_accounts=11)
    call = Caller(led)
    for i in range(1, 11):
        call(led.accounts[i], "clients", "register_client", address=led.accounts[i],
             client_id=f"c{i:02d}")
    call.seal()
    assert len(contracts.clients(led.contract_states)) == 10


# -------------------------------------------------------------- records


def test_record_round_trip():
    led, call = registered(1)
    a = led.accounts[1]
    rc = call.one(a, "records", "record_training", round=1, client=a, accuracy=500000,
                  loss=693147, dataset_size=120)
    assert rc.ok
    [r] = contracts.round_records(led.contract_states, 1)
    assert (r.accuracy, r.loss, r.dataset_size) == (500000, 693147, 120)
    assert r.accuracy / contracts.MICRO == 0.5
    assert abs(r.loss / contracts.MICRO - np.log(2)) < 1e-6


def test_record_duplicate():
    led, call = registered(1)
    a = led.accounts[1]
    call(a, "records", "record_training", round=1, client=a, accuracy=1, loss=1, dataset_size=1)
    rc = call.one(a, "records", "record_training", round=1, client=a, accuracy=2, loss=2,
                  dataset_size=2)
    assert rc.error == "DuplicateRecord"
    assert contracts.round_records(led.contract_states, 1)[0].accuracy == 1


def test_record_unregistered():
    led, call = registered(1)
    a = led.accounts[5]
    rc = call.one(a, "records", "record_training", round=1, client=a, accuracy=1, loss=1,
                  dataset_size=1)
    assert rc.error == "UnregisteredClient"


@pytest.mark.parametrize("acc,loss,size", [(-1, 0, 1), (1_000_001, 0, 1), (0, -1, 1), (0, 0, 0)])
def test_record_invalid_metric(acc, loss, size):
    led, call = registered(1)
    a = led.accounts[1]
    rc = call.one(a, "records", "record_training", round=1, client=a, accuracy=acc, loss=loss,
                  dataset_size=size)
    assert rc.error == "InvalidMetric"


# -------------------------------------------------------------- election


def test_single_client_always_elected():
    led, call = registered(1)
    rc = call.one(led.accounts[0], "election", "elect_aggregator", round=1)
    assert rc.result["aggregator"] == led.accounts[1]


def test_election_deterministic():
    winners = []
    for _ in range(2):
        led, call = registered(5, seed=77)
        winners.append(call.one(led.accounts[0], "election", "elect_aggregator", round=1).result)
    assert winners[0] == winners[1]


def test_election_errors():
    led = deployed_ledger()
    call = Caller(led)
    assert call.one(led.accounts[0], "election", "elect_aggregator", round=1).error == \
        "NoRegisteredClients"
    led, call = registered(2)
    assert call.one(led.accounts[1], "election", "elect_aggregator", round=1).error == \
        "NotServerAccount"
    assert call.one(led.accounts[0], "election", "elect_aggregator", round=1).ok
    assert call.one(led.accounts[0], "election", "elect_aggregator", round=1).error == \
        "AlreadyElected"
    assert call.one(led.accounts[0], "election", "elect_aggregator", round=2).error == \
        "RoundNotRecorded"


def test_election_seed_rule():
    prev = bytes(range(32))
    assert contracts.election_seed(prev, 3) == hashlib.sha256(prev + (3).to_bytes(8, "big")).digest()


def test_weighted_draw_zero_weight_never_wins():
    for i in range(200):
        seed = hashlib.sha256(i.to_bytes(4, "big")).digest()
        assert contracts.weighted_draw(seed, [0, 5, 0]) == 1


def test_weighted_draw_heavy_client_monte_carlo():
    wins = sum(contracts.weighted_draw(hashlib.sha256(b"mc" + i.to_bytes(4, "big")).digest(),
                                       [90, 10]) == 0 for i in range(10_000))
    assert abs(wins / 10_000 - 0.9) <= 0.02


def test_weighted_draw_fairness():
    counts = np.bincount([contracts.weighted_draw(hashlib.sha256(b"f" + i.to_bytes(4, "big")).digest(),
                                                  [1] * 10) for i in range(1000)], minlength=10)
    assert np.all((counts / 1000 >= 0.05) & (counts / 1000 <= 0.15))


def test_weighted_draw_rejection_path():
    # total 3 does not divide 2**64; a word at or above the limit must be redrawn
    total = 3
    limit = (1 << 64) - ((1 << 64) % total)
    digest = (2**64 - 1).to_bytes(8, "big") + bytes(24)
    assert int.from_bytes(digest[:8], "big") >= limit
    nxt = int.from_bytes(hashlib.sha256(digest + (1).to_bytes(8, "big")).digest()[:8], "big")
    assert contracts.weighted_draw(digest, [1, 1, 1]) == nxt % 3


def test_later_rounds_weighted_by_previous_sizes():
    led, call = registered(3)
    s = led.accounts[0]
    call(s, "election", "elect_aggregator", round=1)
    for i, size in zip((1, 2, 3), (0, 7, 0)):
        a = led.accounts[i]
        if size:
            call(a, "records", "record_training", round=1, client=a, accuracy=1, loss=1,
                 dataset_size=size)
    call.seal()
    rc = call.one(s, "election", "elect_aggregator", round=2)
    assert rc.result["aggregator"] == led.accounts[2]


# -------------------------------------------------------------- incentives


@pytest.mark.parametrize("budget,sizes,expected", [
    (100, {"a": 50, "b": 30, "c": 20}, {"a": 50, "b": 30, "c": 20}),
    (10, {"a": 7}, {"a": 10}),
    (10, {"a": 1, "b": 1, "c": 1}, {"a": 4, "b": 3, "c": 3}),
    (7, {"b": 1, "a": 1}, {"a": 4, "b": 3}),
])
def test_largest_remainder_examples(budget, sizes, expected):
    assert contracts.largest_remainder(budget, list(sizes.items())) == expected


@given(st.integers(1, 10**9),
       st.dictionaries(st.text("abcdef", min_size=1, max_size=4), st.integers(1, 10**6),
                       min_size=1, max_size=12))
def test_largest_remainder_matches_rational_oracle(budget, sizes):
    got = contracts.largest_remainder(budget, list(sizes.items()))
    assert got == lr_oracle(budget, list(sizes.items()))
    assert sum(got.values()) == budget
    total = sum(sizes.values())
    for cid, r in got.items():
        assert abs(r - Fraction(budget * sizes[cid], total)) < 1


def test_settlement_through_contract():
    led, call = registered(3)
    for i, size in zip((1, 2, 3), (1, 1, 1)):
        a = led.accounts[i]
        call(a, "records", "record_training", round=1, client=a, accuracy=1, loss=1,
             dataset_size=size)
    call.seal()
    s = led.accounts[0]
    rc = call.one(s, "incentives", "distribute_incentives", round=1, budget=10)
    assert rc.ok
    bal = contracts.balances(led.contract_states)
    assert [bal[led.accounts[i]] for i in (1, 2, 3)] == [4, 3, 3]
    assert contracts.total_minted(led.contract_states) == 10
    assert call.one(s, "incentives", "distribute_incentives", round=1, budget=10).error == \
        "AlreadySettled"
    assert call.one(s, "incentives", "distribute_incentives", round=2, budget=10).error == \
        "RoundNotRecorded"
    assert call.one(s, "incentives", "distribute_incentives", round=1, budget=0).error == \
        "InvalidBudget"


# -------------------------------------------------------------- watermark registry


def issue(call, led, model_id):
    return call.one(led.accounts[0], "watermarks", "issue_watermark", model_id=model_id)


def test_issue_duplicate():
    led, call = registered(1)
    assert issue(call, led, "m1").ok
    assert issue(call, led, "m1").error == "DuplicateModelId"


def test_issue_deterministic():
    specs = []
    for _ in range(2):
        led, call = registered(1, seed=3)
        issue(call, led, "m1")
        specs.append(contracts.watermark_spec(led.contract_states, "m1"))
    assert specs[0] == specs[1]
    assert specs[0].k == 32 and set(specs[0].bits) <= {1, -1}


def test_issue_rule_matches_hand_derivation():
    prev = hashlib.sha256(b"prev").digest()
    bits, seed = contracts.watermark_bits_and_seed("m1", prev, 300)
    d0 = hashlib.sha256(b"m1" + prev + b"bits" + (0).to_bytes(4, "big")).digest()
    d1 = hashlib.sha256(b"m1" + prev + b"bits" + (1).to_bytes(4, "big")).digest()
    stream = np.unpackbits(np.frombuffer(d0 + d1, dtype=np.uint8))
    assert bits[:256] == [1 if b else -1 for b in stream[:256]]
    assert bits[256:] == [1 if b else -1 for b in stream[256:300]]
    assert seed == int.from_bytes(hashlib.sha256(b"m1" + prev + b"seed").digest()[:8], "big")


def test_issued_bits_are_balanced():
    prev = hashlib.sha256(b"head").digest()
    frac = np.mean([np.mean(np.array(contracts.watermark_bits_and_seed(f"model-{i}", prev, 32)[0]) == 1)
                    for i in range(256)])
    assert abs(frac - 0.5) <= 0.05


def minted(n_models=1):
    led, call = registered(3)
    for m in range(n_models):
        issue(call, led, f"m{m}")
        spec = contracts.watermark_spec(led.contract_states, f"m{m}")
        rc = call.one(led.accounts[1], "watermarks", "mint_model_token", owner=led.accounts[1],
                      model_id=f"m{m}", commitment=wm.commitment(spec.bits, spec.key_seed))
        assert rc.ok
    return led, call


def test_mint_first_token_is_one():
    led, _ = minted()
    [t] = contracts.tokens(led.contract_states)
    assert t.token_id == 1 and t.owner == led.accounts[1] and t.model_id == "m0"


def test_two_models_distinct_tokens():
    led, _ = minted(2)
    ids = [t.token_id for t in contracts.tokens(led.contract_states)]
    assert ids == [1, 2]


def test_mint_errors():
    led, call = registered(3)
    a = led.accounts[1]
    assert call.one(a, "watermarks", "mint_model_token", owner=a, model_id="m0",
                    commitment=bytes(32)).error == "NoWatermarkIssued"
    issue(call, led, "m0")
    spec = contracts.watermark_spec(led.contract_states, "m0")
    good = wm.commitment(spec.bits, spec.key_seed)
    flipped = bytes([good[0] ^ 1]) + good[1:]
    assert call.one(a, "watermarks", "mint_model_token", owner=a, model_id="m0",
                    commitment=flipped).error == "CommitmentMismatch"
    stranger = led.accounts[7]
    assert call.one(stranger, "watermarks", "mint_model_token", owner=stranger, model_id="m0",
                    commitment=good).error == "UnregisteredOwner"
    assert call.one(a, "watermarks", "mint_model_token", owner=a, model_id="m0",
                    commitment=good).ok
    assert call.one(a, "watermarks", "mint_model_token", owner=a, model_id="m0",
                    commitment=good).error == "AlreadyTokenized"


def transfer(call, who, token_id, frm, to):
    return call.one(who, "watermarks", "transfer_token", token_id=token_id, sender=frm, recipient=to)


def test_transfer_by_owner():
    led, call = minted()
    a, b = led.accounts[1], led.accounts[2]
    assert transfer(call, a, 1, a, b).ok
    assert contracts.token(led.contract_states, 1).owner == b


def test_transfer_by_non_owner_changes_nothing():
    led, call = minted()
    b = led.accounts[2]
    before = led.state_root
    rc = transfer(call, b, 1, b, led.accounts[3])
    assert rc.error == "NotOwner"
    assert led.state_root == before


def test_transfer_round_trip_history():
    led, call = minted()
    a, b = led.accounts[1], led.accounts[2]
    transfer(call, a, 1, a, b)
    transfer(call, b, 1, b, a)
    t = contracts.token(led.contract_states, 1)
    assert t.owner == a and len(t.history) == 2
    assert [h[:2] for h in t.history] == [(a, b), (b, a)]


def test_transfer_errors():
    led, call = minted()
    a = led.accounts[1]
    assert transfer(call, a, 9, a, led.accounts[2]).error == "UnknownToken"
    assert transfer(call, a, 1, a, led.accounts[8]).error == "UnregisteredRecipient"


def test_verify_ownership():
    led, _ = minted()
    spec = contracts.watermark_spec(led.contract_states, "m0")
    st_ = led.contract_states
    assert contracts.verify_ownership(st_, 1, spec.bits, spec.key_seed)
    flipped = list(spec.bits)
    flipped[5] = -flipped[5]
    assert not contracts.verify_ownership(st_, 1, flipped, spec.key_seed)
    assert not contracts.verify_ownership(st_, 1, spec.bits, spec.key_seed + 1)
    assert not contracts.verify_ownership(st_, 1, spec.bits, -1)
    with pytest.raises(contracts.UnknownToken):
        contracts.verify_ownership(st_, 2, spec.bits, spec.key_seed)


# -------------------------------------------------------------- catalog


def test_manifest_covers_every_method():
    m = json.loads(contracts.manifest_json())["contracts"]
    assert {(c, n) for c, methods in m.items() for n in methods} == set(contracts.METHODS)
    for spec in contracts.METHODS.values():
        for code in spec.errors:
            assert code in contracts.ERRORS


def test_error_codes_round_trip():
    for code, cls in contracts.ERRORS.items():
        assert isinstance(contracts.error_from_code(code), cls)
        assert cls.code == code


# -------------------------------------------------------------- state machine


class ContractMachine(RuleBasedStateMachine):
    """Random call sequences, valid or not; invariants checked after every block."""

    def __init__(self):
        super().__init__()
        self.led = deployed_ledger(seed=11)
        self.call = Caller(self.led)
        self.sealed_records: dict = {}

    accounts = st.integers(1, 6)

    @rule(i=accounts, cid=st.integers(0, 6))
    def register(self, i, cid):
        a = self.led.accounts[i]
        self.call(a, "clients", "register_client", address=a, client_id=f"c{cid}")

    @rule(i=accounts, r=st.integers(1, 3), size=st.integers(1, 50))
    def record(self, i, r, size):
        a = self.led.accounts[i]
        self.call(a, "records", "record_training", round=r, client=a, accuracy=1000, loss=5,
                  dataset_size=size)

    @rule(r=st.integers(1, 3), budget=st.integers(1, 1000))
    def settle(self, r, budget):
        self.call(self.led.accounts[0], "incentives", "distribute_incentives", round=r,
                  budget=budget)

    @rule(r=st.integers(1, 4))
    def elect(self, r):
        self.call(self.led.accounts[0], "election", "elect_aggregator", round=r)

    @rule(m=st.integers(0, 2), i=accounts)
    def issue_and_mint(self, m, i):
        s = self.led.contract_states
        self.call(self.led.accounts[0], "watermarks", "issue_watermark", model_id=f"m{m}")
        spec = contracts.watermark_spec(s, f"m{m}")
        if spec is not None:
            a = self.led.accounts[i]
            self.call(a, "watermarks", "mint_model_token", owner=a, model_id=f"m{m}",
                      commitment=wm.commitment(spec.bits, spec.key_seed))

    @rule(t=st.integers(1, 3), i=accounts, j=accounts)
    def move(self, t, i, j):
        a = self.led.accounts[i]
        self.call(a, "watermarks", "transfer_token", token_id=t, sender=a,
                  recipient=self.led.accounts[j])

    @rule()
    def seal(self):
        self.call.seal()
        s = self.led.contract_states
        for r, recs in s["records"]["rounds"].items():
            for a, rec in recs.items():
                key = (r, a)
                assert self.sealed_records.setdefault(key, dict(rec)) == rec

    @invariant()
    def conservation(self):
        s = self.led.contract_states
        assert sum(contracts.balances(s).values()) == contracts.total_minted(s)

    @invariant()
    def tokens_unique(self):
        toks = contracts.tokens(self.led.contract_states)
        assert len({t.token_id for t in toks}) == len(toks)
        assert len({t.model_id for t in toks}) == len(toks)

    @invariant()
    def elections_valid(self):
        s = self.led.contract_states
        registered_ = {c.address for c in contracts.clients(s)}
        for r in s["election"]["results"]:
            assert contracts.election_result(s, r).aggregator in registered_


ContractMachine.TestCase.settings = settings(max_examples=40, stateful_step_count=25,
                                             deadline=None)
TestContractMachine = ContractMachine.TestCase
