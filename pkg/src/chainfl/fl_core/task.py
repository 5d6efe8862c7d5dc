"""End-to-end federated task driven through the chain bridge."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import chainproxy as cp
from .. import ledger as lg
from .. import watermark as wm
from .config import TaskConfig
from .data import Dataset, DatasetPartition, load_task_data, split_dataset
from .models import ModelParams, init_model
from .training import (ModelUpdate, WatermarkContext, aggregate, evaluate, local_train,
                       objective, to_micro)

log = logging.getLogger(__name__)


@dataclass
class ClientRound:
    client_id: str
    accuracy: float
    loss: float
    dataset_size: int
    reward: int


@dataclass
class RoundSummary:
    round: int
    aggregator: str  # hex address
    aggregator_client: str
    mean_accuracy: float
    mean_loss: float
    global_accuracy: float | None
    global_loss: float | None
    block_hash: str
    clients: list[ClientRound] = field(default_factory=list)


@dataclass
class FinalSummary:
    detection_rate: float | None
    token_id: int | None
    state_root: str
    block_height: int
    model_id: str | None = None
    owner: str | None = None
    key_seed: int | None = None
    test_accuracy: float | None = None
    test_loss: float | None = None


@dataclass
class TaskReport:
    rounds: list[RoundSummary]
    final: FinalSummary
    config: dict
    # not serialized; carried for the CLI's model file
    final_params: ModelParams | None = field(default=None, repr=False)
    wm_slice: wm.ParamSlice | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "rounds": [asdict(r) for r in self.rounds],
            "final": asdict(self.final),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_lines(self) -> list[str]:
        out = []
        for r in self.rounds:
            test = "" if r.global_accuracy is None else f"\ttest_acc={r.global_accuracy:.6f}"
            out.append(
                f"round={r.round}\taggregator={r.aggregator_client}\t"
                f"mean_acc={r.mean_accuracy:.6f}\tmean_loss={r.mean_loss:.6f}{test}\t"
                f"block={r.block_hash}")
        f = self.final
        rate = "-" if f.detection_rate is None else f"{f.detection_rate:.6f}"
        token = "-" if f.token_id is None else str(f.token_id)
        out.append(f"final\tdetection_rate={rate}\ttoken_id={token}\tkey_seed={f.key_seed}\t"
                   f"height={f.block_height}\tstate_root={f.state_root}")
        return out

    def rounds_tsv(self) -> str:
        rows = ["round\tclient_id\taccuracy\tloss\tdataset_size\treward\taggregator"]
        for r in self.rounds:
            for c in r.clients:
                rows.append(f"{r.round}\t{c.client_id}\t{c.accuracy:.6f}\t{c.loss:.6f}\t"
                            f"{c.dataset_size}\t{c.reward}\t{int(c.client_id == r.aggregator_client)}")
        return "\n".join(rows) + "\n"


def client_ids_for(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"client_{i:0{width}d}" for i in range(n)]


def client_seed(seed: int, round_: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, round_, index]).generate_state(1, np.uint64)[0])


def accounts_needed(config: TaskConfig) -> int:
    return max(lg.GENESIS_ACCOUNTS, config.global_args.client_number + 1)


def open_bridge(config: TaskConfig, log_path=None) -> cp.ChainProxy:
    return cp.open_session(config.global_args.seed,
                           cp.ContractConfig(config.train_args.watermark.k),
                           n_accounts=accounts_needed(config), log_path=log_path)


def watermark_slice(config: TaskConfig, params: ModelParams) -> wm.ParamSlice:
    w = config.train_args.watermark
    offset = params.final_layer_offset() if w.slice_offset is None else w.slice_offset
    sl = wm.ParamSlice(offset, w.slice_length)
    sl.take(params.values)  # bounds check
    return sl


def embed_watermark(params: ModelParams, data: Dataset, config: TaskConfig,
                    bits, key_seed: int) -> ModelParams:
    """Fine-tune on the owner's data with the hinge term until every bit has margin.

    Full-batch gradient steps on the local objective plus the watermark
    penalty; stops once the penalty is zero, or raises
    :class:`WatermarkEmbeddingFailed` if some bit still reads wrong when the
    step budget runs out.
    """
    w = config.train_args.watermark
    sl = watermark_slice(config, params)
    key = wm.derive_key(key_seed, len(bits), sl.length)
    ctx = WatermarkContext(key, np.asarray(bits), sl.offset, w.gamma, w.lam)
    lr = config.train_args.learning_rate
    for step in range(w.max_steps):
        hinge, _ = wm.regularizer(sl.take(params.values), key, bits, w.gamma)
        if hinge == 0.0:
            break
        _, grad = objective(params, data.X, data.y, config.train_args, "fedavg", None, ctx)
        params = params.with_values(params.values - lr * grad)
    rate = wm.detection_rate(wm.extract(sl.take(params.values), key), bits)
    if rate < 1.0:
        raise cp.WatermarkEmbeddingFailed(
            f"detection rate {rate:.4f} after {w.max_steps} steps")
    log.info("watermark embedded after %d steps", step)
    return params


def _train_clients(global_params, parts, config, round_, pool):
    ga, ta = config.global_args, config.train_args

    def one(i):
        return local_train(global_params, parts[i], ta, config.algorithm,
                           seed=client_seed(ga.seed, round_, i), label=f"client {i} round {round_}")

    idx = range(len(parts))
    if pool is None:
        return [one(i) for i in idx]
    return list(pool.map(one, idx))


def run_task(config: TaskConfig, bridge: cp.ChainProxy | None = None) -> TaskReport:
    """Register, train R rounds, tokenize the final model; one block per round."""
    ga, ta = config.global_args, config.train_args
    if bridge is None:
        bridge = open_bridge(config)
    if ga.client_number > len(bridge.accounts) - 1:
        raise cp.TooManyClients(
            f"client_number {ga.client_number} needs {ga.client_number + 1} ledger accounts")

    train, test = load_task_data(ga)
    partition: DatasetPartition = split_dataset(train.y, ga.client_number, ga.partition,
                                                ga.seed, ga.alpha)
    parts = [train.subset(partition.assignments[i]) for i in range(ga.client_number)]
    ids = client_ids_for(ga.client_number)
    params = init_model(ga.model, ga.seed, train.n_features, train.n_classes, ga.hidden_units)

    bridge.bind_clients(ids)
    rounds: list[RoundSummary] = []
    pool = ThreadPoolExecutor(ga.workers) if ga.workers > 1 else None
    try:
        for r in range(1, ga.communication_rounds + 1):
            elected = bridge.election(r)
            updates: list[ModelUpdate] = _train_clients(params, parts, config, r, pool)
            metas = [cp.RoundMeta(cid, to_micro(u.accuracy), to_micro(u.loss), u.dataset_size)
                     for cid, u in zip(ids, updates)]
            receipt = bridge.submit_round(r, metas, ga.incentive_budget)
            # aggregation runs here but is attributed to the elected client
            params = aggregate(updates)
            g = evaluate(params, test) if len(test) else None
            summary = RoundSummary(
                round=r,
                aggregator=elected.aggregator.hex(),
                aggregator_client=bridge.client_of(elected.aggregator),
                mean_accuracy=float(np.mean([u.accuracy for u in updates])),
                mean_loss=float(np.mean([u.loss for u in updates])),
                global_accuracy=None if g is None else g.accuracy,
                global_loss=None if g is None else g.loss,
                block_hash=receipt.block_hash.hex(),
                clients=[ClientRound(cid, u.accuracy, u.loss, u.dataset_size,
                                     receipt.rewards.get(cid, 0))
                         for cid, u in zip(ids, updates)],
            )
            rounds.append(summary)
            log.info("round %d aggregator %s mean loss %.4f", r, summary.aggregator_client,
                     summary.mean_loss)
    finally:
        if pool is not None:
            pool.shutdown()

    wa = ta.watermark
    final = FinalSummary(None, None, "", 0)
    wm_slice = None
    if wa.enabled:
        owner = wa.owner or ids[0]
        if owner not in ids:
            raise cp.UnboundClient(f"watermark owner {owner!r} is not a client")
        model_id = wa.model_id or f"{ga.dataset}-{ga.model}-s{ga.seed}"
        wm_slice = watermark_slice(config, params)
        owner_data = parts[ids.index(owner)]
        done = bridge.finalize_model(
            model_id, owner, params,
            embed=lambda p, bits, seed: embed_watermark(p, owner_data, config, bits, seed))
        params = done.params
        key = wm.derive_key(done.spec.key_seed, done.spec.k, wm_slice.length)
        rate = wm.detection_rate(wm.extract(wm_slice.take(params.values), key), done.spec.bits)
        final = FinalSummary(rate, done.token.token_id, "", 0, model_id, owner, done.spec.key_seed)

    g = evaluate(params, test) if len(test) else None
    final.state_root = bridge.ledger.state_root.hex()
    final.block_height = bridge.ledger.height
    if g is not None:
        final.test_accuracy, final.test_loss = g.accuracy, g.loss
    return TaskReport(rounds, final, config.to_dict(), params, wm_slice)
