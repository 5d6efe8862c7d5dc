"""``chainfl`` command line.

Exit codes: 0 success, 1 runtime/replay failure, 2 config error,
3 ownership check answered NOT-OWNED.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import contracts, ledger as lg
from . import watermark as wm
from .fl_core import modelio
from .fl_core.config import ConfigError, load_config
from .fl_core.task import open_bridge, run_task

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NOT_OWNED = 0, 1, 2, 3

log = logging.getLogger("chainfl")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _micro(v: int) -> str:
    return f"{v / 1_000_000:.6f}"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- run


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except FileNotFoundError:
        _err(f"config file not found: {args.config}")
        return EXIT_CONFIG
    except ConfigError as exc:
        _err(f"config: {exc}")
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "blocks.log"
    try:
        bridge = open_bridge(config, log_path=log_path)
        report = run_task(config, bridge)
    except Exception as exc:  # runtime failures map to exit 1 with the reason
        _err(f"run failed: {type(exc).__name__}: {exc}")
        return EXIT_FAIL

    artifacts = {"block_log": log_path}
    artifacts["report"] = out / "report.json"
    artifacts["report"].write_text(report.to_json())
    artifacts["summary"] = out / "report.txt"
    artifacts["summary"].write_text("\n".join(report.summary_lines()) + "\n")
    artifacts["rounds"] = out / "rounds.tsv"
    artifacts["rounds"].write_text(report.rounds_tsv())
    artifacts["contracts"] = out / "contracts.json"
    artifacts["contracts"].write_text(contracts.manifest_json())
    artifacts["model"] = out / "model.bin"
    modelio.save_model(artifacts["model"], report.final_params, report.wm_slice)
    if not args.no_figures:
        from .plotting import plot_incentives, plot_round_metrics

        figs = out / "figures"
        figs.mkdir(exist_ok=True)
        artifacts["fig_metrics"] = plot_round_metrics(report, figs / "round_metrics.png")
        artifacts["fig_incentives"] = plot_incentives(report, figs / "incentives.png")

    manifest = {
        "config": str(args.config),
        "out": str(out),
        "artifacts": {k: {"path": p.name if p.parent == out else str(p.relative_to(out)),
                          "sha256": _sha256_file(p)} for k, p in sorted(artifacts.items())},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------- ledger


def _replay(path) -> lg.Ledger:
    return lg.replay_log(path)


def _print_block(block: lg.Block) -> None:
    print(f"index\t{block.index}")
    print(f"prev_hash\t{block.prev_hash.hex()}")
    print(f"block_hash\t{block.block_hash.hex()}")
    print(f"state_root\t{block.state_root.hex()}")
    print(f"tx_count\t{len(block.txs)}")
    for tx, rc in zip(block.txs, block.receipts):
        status = "ok" if rc.ok else f"failed:{rc.error}"
        print(f"tx\t{tx.nonce}\t{tx.sender.hex()}\t{tx.contract}.{tx.method}\t"
              f"round={tx.round_tag}\t{status}")


def cmd_ledger(args) -> int:
    try:
        ledger = _replay(args.log)
    except FileNotFoundError:
        _err(f"block log not found: {args.log}")
        return EXIT_FAIL
    except lg.ReplayError as exc:
        _err(f"replay failed at height {exc.height}: {exc}")
        return EXIT_FAIL
    states = ledger.contract_states
    if args.block is not None:
        try:
            _print_block(ledger.get_block(args.block))
        except lg.NotFound as exc:
            _err(str(exc))
            return EXIT_FAIL
        return EXIT_OK
    if not states:
        _err("contracts are not deployed on this chain")
        return EXIT_FAIL
    names = {c.address: c.client_id for c in contracts.clients(states)}
    if args.records is not None:
        print("client_id\taddress\taccuracy\tloss\tdataset_size")
        for r in contracts.round_records(states, args.records):
            print(f"{names[r.client]}\t{r.client.hex()}\t{_micro(r.accuracy)}\t"
                  f"{_micro(r.loss)}\t{r.dataset_size}")
    elif args.balances:
        print("client_id\taddress\tbalance")
        for addr, bal in sorted(contracts.balances(states).items(), key=lambda kv: names[kv[0]]):
            print(f"{names[addr]}\t{addr.hex()}\t{bal}")
        print(f"total_minted\t-\t{contracts.total_minted(states)}")
    elif args.tokens:
        print("token_id\towner\tmodel_id\tcommitment\ttransfers")
        for t in contracts.tokens(states):
            print(f"{t.token_id}\t{names.get(t.owner, t.owner.hex())}\t{t.model_id}\t"
                  f"{t.commitment.hex()}\t{len(t.history)}")
    else:
        print(f"height\t{ledger.height}")
        print(f"head\t{ledger.head.block_hash.hex()}")
        print(f"state_root\t{ledger.state_root.hex()}")
        print(f"clients\t{len(names)}")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    try:
        seed = int(args.seed, 0)
        params, wm_slice = modelio.load_model(args.model)
        ledger = _replay(args.log)
        states = ledger.contract_states
        token = contracts.token(states, args.token)
        spec = contracts.watermark_spec(states, token.model_id)
        if wm_slice is None:
            raise modelio.ModelFileError("model file has no watermark slice record")
        key = wm.derive_key(seed, spec.k, wm_slice.length)
        bits = wm.extract(wm_slice.take(params.values), key)
    except lg.ReplayError as exc:
        _err(f"replay failed at height {exc.height}: {exc}")
        return EXIT_FAIL
    except (contracts.ContractError, modelio.ModelFileError, wm.BadDimensions,
            FileNotFoundError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    rate = wm.detection_rate(bits, spec.bits)
    owned = contracts.verify_ownership(states, token.token_id, bits.tolist(), seed)
    verdict = "OWNED" if owned else "NOT-OWNED"
    print(f"token_id\t{token.token_id}")
    print(f"model_id\t{token.model_id}")
    print(f"owner\t{token.owner.hex()}")
    print(f"detection_rate\t{rate:.6f}")
    print(f"verdict\t{verdict}")
    return EXIT_OK if owned else EXIT_NOT_OWNED


def cmd_manifest(args) -> int:
    text = contracts.manifest_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chainfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated task from a config file")
    run.add_argument("--config", required=True, metavar="PATH")
    run.add_argument("--out", required=True, metavar="DIR")
    run.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    run.set_defaults(func=cmd_run)

    led = sub.add_parser("ledger", help="replay a block log and print a view")
    led.add_argument("--log", required=True, metavar="PATH")
    view = led.add_mutually_exclusive_group()
    view.add_argument("--block", type=int, metavar="N")
    view.add_argument("--records", type=int, metavar="ROUND")
    view.add_argument("--balances", action="store_true")
    view.add_argument("--tokens", action="store_true")
    led.set_defaults(func=cmd_ledger)

    ver = sub.add_parser("verify", help="check model ownership against a token")
    ver.add_argument("--model", required=True, metavar="PATH")
    ver.add_argument("--log", required=True, metavar="PATH")
    ver.add_argument("--token", required=True, type=int, metavar="ID")
    ver.add_argument("--seed", required=True, metavar="S", help="watermark key seed")
    ver.set_defaults(func=cmd_verify)

    man = sub.add_parser("manifest", help="print the contract method catalog")
    man.add_argument("--out", metavar="PATH")
    man.set_defaults(func=cmd_manifest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
