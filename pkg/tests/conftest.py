import json
from pathlib import Path

import pytest

from chainfl import cli, contracts, ledger as lg

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.yaml"

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One ``chainfl run`` of the default benchmark, shared read-only by tests."""
    out = tmp_path_factory.mktemp("default_run")
    code = cli.main(["run", "--config", str(DEFAULT_CONFIG), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    return out, report


def deployed_ledger(seed=1, n_accounts=10, k=32):
    """Ledger with contracts deployed in block 1."""
    led = lg.init_chain(seed, n_accounts)
    led.submit_transaction(lg.Transaction.call(0, led.accounts[0], contracts.DEPLOYER, "deploy",
                                               {"watermark_bits": k}))
    led.seal_block()
    return led


class Caller:
    """Nonce bookkeeping for tests that talk to the ledger directly."""

    def __init__(self, ledger):
        self.ledger = ledger

    def __call__(self, _who, _contract, _method, /, **args):
        tx = lg.Transaction.call(self.ledger.next_nonce(_who), _who, _contract, _method, args)
        return self.ledger.submit_transaction(tx)

    def seal(self):
        return self.ledger.seal_block()

    def one(self, _who, _contract, _method, /, **args):
        """Submit one call, seal it, return its receipt."""
        self(_who, _contract, _method, **args)
        return self.seal().receipts[-1]
