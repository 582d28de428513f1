import json
import logging
import math
import time
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from .dataset import DatasetError, InteractionGraph
from .encoder import ProfileStore
from .exceptions import (
    CheckpointFormatError,
    ConfigError,
    DataIOError,
    TrainingDivergedError,
)
from .graphconv import BaseEmbeddings, PropagatedEmbeddings, backprop_graph, propagate
from .mfa import (
    Direction,
    Pooling,
    ProjectionSet,
    attend,
    attend_backward,
    init_mlp,
    mlp_backward,
    mlp_forward,
    sample_key_batch,
)
from .seeding import INIT, NEGATIVES, substream

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "rfmckpt1"
TABLE_NAMES = ("user_table", "item_table")


class AttentionKind(StrEnum):
    mfa = "mfa"
    mlp = "mlp"


class SizeMode(StrEnum):
    per_branch = "per_branch"
    # 256 after concatenation: both halves 128
    total_256 = "total_256"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4096
    l2_lambda: float = 1e-4
    n_keys: int = 3
    layers: int = 3
    d_g: int = 256
    d_star: int = 256
    size_mode: SizeMode = SizeMode.per_branch
    max_epochs: int = 100
    patience: int = 10
    eval_interval: int = 1
    include_layer0: bool = False
    pooling: Pooling = Pooling.max
    attention: AttentionKind = AttentionKind.mfa
    init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "n_keys", "layers", "d_g", "d_star", "max_epochs", "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "l2_lambda", "patience", "init_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must not be negative, got {getattr(self, name)}")
        if self.n_keys > 5:
            logger.warning("n_keys=%d is outside the usual 1..5 range", self.n_keys)
        for name, kind in (("size_mode", SizeMode), ("pooling", Pooling), ("attention", AttentionKind)):
            try:
                object.__setattr__(self, name, kind(getattr(self, name)))
            except ValueError:
                raise ConfigError(f"Unknown train.{name}: {getattr(self, name)!r}") from None

    @property
    def dims(self) -> tuple[int, int]:
        """(d_g, d*) after applying the size mode"""
        if SizeMode(self.size_mode) is SizeMode.total_256:
            return 128, 128
        return self.d_g, self.d_star


@dataclass(eq=False)
class AdamState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(eq=False)
class ModelParams:
    tensors: dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def init(
        cls, cfg: TrainConfig, num_users: int, num_items: int, profile_dim: int
    ) -> "ModelParams":
        d_g, d_star = cfg.dims
        base = BaseEmbeddings.init(
            substream(cfg.seed, INIT, 0), num_users, num_items, d_g, cfg.init_std
        )
        tensors = {"user_table": base.users, "item_table": base.items}
        rng = substream(cfg.seed, INIT, 1)
        if AttentionKind(cfg.attention) is AttentionKind.mfa:
            tensors |= ProjectionSet.init(rng, profile_dim, d_star).as_dict()
        else:
            tensors |= init_mlp(rng, profile_dim, d_star)
        return cls(tensors)

    @property
    def base(self) -> BaseEmbeddings:
        return BaseEmbeddings(self.tensors["user_table"], self.tensors["item_table"])

    @property
    def proj(self) -> ProjectionSet:
        return ProjectionSet(**{n: self.tensors[n] for n in ProjectionSet.names()})

    @property
    def attention(self) -> AttentionKind:
        return AttentionKind.mfa if "w_q_user" in self.tensors else AttentionKind.mlp

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    state = params.adam
    state.step += 1
    b1, b2 = betas
    for name, grad in grads.items():
        m = state.first.setdefault(name, np.zeros_like(grad))
        v = state.second.setdefault(name, np.zeros_like(grad))
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad**2
        m_hat = m / (1 - b1**state.step)
        v_hat = v / (1 - b2**state.step)
        params.tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True, eq=False)
class AttentiveTables:
    users: np.ndarray
    items: np.ndarray


def fuse(graph_half: np.ndarray, attentive_half: np.ndarray) -> np.ndarray:
    """e = [e^g; e^a]"""
    return np.concatenate([graph_half, attentive_half], axis=-1)


def fuse_and_score(
    u: int, i: int, e_g: PropagatedEmbeddings, e_a: AttentiveTables
) -> float:
    return float(fuse(e_g.users[u], e_a.users[u]) @ fuse(e_g.items[i], e_a.items[i]))


def bpr_loss(pos, neg):
    """-ln sigmoid(pos - neg) as softplus(neg - pos).

    Example::
        >>> round(float(bpr_loss(1.0, 1.0)), 6)
        0.693147
    """
    return np.logaddexp(0.0, -(np.asarray(pos) - np.asarray(neg)))


@dataclass(frozen=True, eq=False)
class TripletBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def dump(self, limit: int = 20) -> str:
        rows = np.stack([self.users, self.pos, self.neg], axis=1)[:limit]
        return json.dumps({"size": len(self), "triples": rows.tolist()})


def train_edges(graph: InteractionGraph) -> tuple[np.ndarray, np.ndarray]:
    users = np.repeat(np.arange(graph.num_users), graph.user_degree)
    return users, graph.user_items.indices.astype(np.int64)


def sample_triplets(
    graph: InteractionGraph,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    batch_index: int = 0,
) -> TripletBatch:
    """Positives uniformly with replacement; negatives by rejection"""
    users, items = train_edges(graph)
    saturated = graph.user_degree >= graph.num_items
    if saturated.any():
        if batch_index == 0:
            logger.warning(
                "Skipping %d user(s) who interacted with every item", int(saturated.sum())
            )
        keep = ~saturated[users]
        users, items = users[keep], items[keep]
    if not len(users):
        raise DatasetError("No training interaction admits a negative item")
    rng = substream(seed, NEGATIVES, epoch, batch_index)
    picks = rng.integers(len(users), size=batch_size)
    users, pos = users[picks], items[picks]
    neg = rng.integers(graph.num_items, size=batch_size)
    while (bad := graph.contains(users, neg)).any():
        neg[bad] = rng.integers(graph.num_items, size=int(bad.sum()))
    return TripletBatch(users, pos, neg)


@dataclass(frozen=True)
class LossParts:
    loss: float
    bpr: float
    reg: float


def _attention_names(params: ModelParams) -> list[str]:
    return [n for n in params.tensors if n not in TABLE_NAMES]


def batch_loss(
    params: ModelParams,
    graph: InteractionGraph,
    profiles: ProfileStore,
    batch: TripletBatch,
    cfg: TrainConfig,
    epoch: int = 0,
    with_grad: bool = True,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Mean BPR plus L2 over one batch and, optionally, its exact gradients"""
    t = params.tensors
    size = len(batch)
    prop = propagate(graph, params.base, cfg.layers, cfg.include_layer0)
    g_u, g_i, g_j = prop.users[batch.users], prop.items[batch.pos], prop.items[batch.neg]

    anchor_users, inv_u = np.unique(batch.users, return_inverse=True)
    anchor_items, inv_ij = np.unique(np.concatenate([batch.pos, batch.neg]), return_inverse=True)
    inv_u, inv_ij = inv_u.ravel(), inv_ij.ravel()
    if params.attention is AttentionKind.mfa:
        keys_u = sample_key_batch(graph, Direction.user_side, anchor_users, cfg.n_keys, cfg.seed, epoch)
        keys_i = sample_key_batch(graph, Direction.item_side, anchor_items, cfg.n_keys, cfg.seed, epoch)
        weights_u = t["w_q_user"], t["w_k_item"], t["w_v_user"]
        weights_i = t["w_q_item"], t["w_k_user"], t["w_v_item"]
        att_u, cache_u = attend(
            profiles.users[anchor_users], profiles.items, keys_u, *weights_u, cfg.pooling
        )
        att_i, cache_i = attend(
            profiles.items[anchor_items], profiles.users, keys_i, *weights_i, cfg.pooling
        )
    else:
        att_u, cache_u = mlp_forward(t, "user", profiles.users[anchor_users])
        att_i, cache_i = mlp_forward(t, "item", profiles.items[anchor_items])
    a_u, a_i, a_j = att_u[inv_u], att_i[inv_ij[:size]], att_i[inv_ij[size:]]

    pos = (g_u * g_i).sum(axis=1) + (a_u * a_i).sum(axis=1)
    neg = (g_u * g_j).sum(axis=1) + (a_u * a_j).sum(axis=1)
    bpr = float(bpr_loss(pos, neg).mean())
    lam = cfg.l2_lambda
    table_sq = sum(
        float((rows**2).sum())
        for rows in (t["user_table"][batch.users], t["item_table"][batch.pos], t["item_table"][batch.neg])
    )
    weight_sq = sum(float((t[n] ** 2).sum()) for n in _attention_names(params))
    reg = lam * 0.5 * (table_sq / size + weight_sq)
    parts = LossParts(bpr + reg, bpr, reg)
    if not math.isfinite(parts.loss):
        raise TrainingDivergedError(f"Non-finite loss {parts.loss} at epoch {epoch}: {batch.dump()}", batch)
    if not with_grad:
        return parts, {}

    # d mean(softplus(-(pos - neg))) / d pos
    d_pos = (-expit(-(pos - neg)) / size)[:, None]
    d_neg = -d_pos

    grad_prop_users = np.zeros_like(prop.users)
    grad_prop_items = np.zeros_like(prop.items)
    np.add.at(grad_prop_users, batch.users, d_pos * g_i + d_neg * g_j)
    np.add.at(grad_prop_items, batch.pos, d_pos * g_u)
    np.add.at(grad_prop_items, batch.neg, d_neg * g_u)
    grad_users, grad_items = backprop_graph(
        graph, cfg.layers, grad_prop_users, grad_prop_items, cfg.include_layer0
    )
    np.add.at(grad_users, batch.users, lam / size * t["user_table"][batch.users])
    np.add.at(grad_items, batch.pos, lam / size * t["item_table"][batch.pos])
    np.add.at(grad_items, batch.neg, lam / size * t["item_table"][batch.neg])
    grads = {"user_table": grad_users, "item_table": grad_items}

    grad_att_u = np.zeros_like(att_u)
    grad_att_i = np.zeros_like(att_i)
    np.add.at(grad_att_u, inv_u, d_pos * a_i + d_neg * a_j)
    np.add.at(grad_att_i, inv_ij[:size], d_pos * a_u)
    np.add.at(grad_att_i, inv_ij[size:], d_neg * a_u)
    if params.attention is AttentionKind.mfa:
        grads |= dict(zip(("w_q_user", "w_k_item", "w_v_user"), attend_backward(cache_u, grad_att_u)))
        grads |= dict(zip(("w_q_item", "w_k_user", "w_v_item"), attend_backward(cache_i, grad_att_i)))
    else:
        grads |= mlp_backward(t, cache_u, grad_att_u)
        grads |= mlp_backward(t, cache_i, grad_att_i)
    for name in _attention_names(params):
        grads[name] = grads[name] + lam * t[name]
    return parts, grads


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    bpr: float
    reg: float
    batches: int
    elapsed_ms: float


def batches_per_epoch(graph: InteractionGraph, batch_size: int) -> int:
    return max(1, math.ceil(int(graph.user_degree.sum()) / batch_size))


def train_epoch(
    params: ModelParams,
    graph: InteractionGraph,
    profiles: ProfileStore,
    cfg: TrainConfig,
    epoch: int = 1,
) -> EpochStats:
    start = time.perf_counter()
    totals = np.zeros(3)
    count = batches_per_epoch(graph, cfg.batch_size)
    for index in range(count):
        batch = sample_triplets(graph, cfg.batch_size, cfg.seed, epoch, index)
        parts, grads = batch_loss(params, graph, profiles, batch, cfg, epoch)
        adam_step(params, grads, cfg.learning_rate)
        totals += (parts.loss, parts.bpr, parts.reg)
    loss, bpr, reg = (totals / count).tolist()
    elapsed = (time.perf_counter() - start) * 1000
    logger.debug("epoch %d loss %.6f (bpr %.6f, reg %.6f)", epoch, loss, bpr, reg)
    return EpochStats(epoch, loss, bpr, reg, count, elapsed)


@dataclass
class FitResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_metric: float
    epochs_run: int


def fit(
    params: ModelParams,
    graph: InteractionGraph,
    profiles: ProfileStore,
    cfg: TrainConfig,
    validate: Callable[[ModelParams], float],
    log_path: Path | None = None,
    config_hash: str = "",
    progress: bool = False,
) -> FitResult:
    """Train with early stopping on `validate` (validation Recall@20).

    Stops after `patience` consecutive non-improving evaluations and restores the
    best parameters.
    """
    history: list[dict] = []
    best_metric, best_epoch, best = -math.inf, 0, params.copy()
    stale = 0
    epoch = 0
    log = log_path.open("w", encoding="utf8") if log_path else None
    try:
        for epoch in tqdm(range(1, cfg.max_epochs + 1), desc="epochs", disable=not progress):
            stats = train_epoch(params, graph, profiles, cfg, epoch)
            record = {
                "epoch": epoch,
                "loss": stats.loss,
                "val_recall@20": None,
                "elapsed_ms": round(stats.elapsed_ms, 3),
            }
            stop = False
            if epoch % cfg.eval_interval == 0:
                metric = record["val_recall@20"] = float(validate(params))
                history.append(record)
                if metric > best_metric:
                    best_metric, best_epoch, best = metric, epoch, params.copy()
                    stale = 0
                else:
                    stale += 1
                    stop = stale >= cfg.patience
            if log:
                log.write(json.dumps(record | {"config_hash": config_hash}) + "\n")
                log.flush()
            if stop:
                logger.info("Early stop at epoch %d, best %d", epoch, best_epoch)
                break
    finally:
        if log:
            log.close()
    if history:
        params.tensors = best.tensors
    return FitResult(params, history, best_epoch, max(best_metric, 0.0), epoch)


def save_checkpoint(path: Path, params: ModelParams, **meta) -> None:
    header = {
        "magic": CHECKPOINT_MAGIC,
        **meta,
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in params.tensors.items()],
    }
    with path.open("wb") as f:
        f.write(json.dumps(header).encode("utf8") + b"\n")
        for tensor in params.tensors.values():
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"Cannot read checkpoint {path}: {e}") from e
    end = raw.find(b"\n")
    try:
        header = json.loads(raw[:end]) if end >= 0 else {}
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: invalid header: {e}") from e
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    offset = end + 1
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        size = 4 * math.prod(shape)
        if offset + size > len(raw):
            raise CheckpointFormatError(
                f"{path}: tensor {spec['name']} needs bytes up to offset {offset + size}, "
                f"file ends at {len(raw)}"
            )
        chunk = np.frombuffer(raw, dtype="<f4", count=math.prod(shape), offset=offset)
        tensors[spec["name"]] = chunk.astype(np.float64).reshape(shape)
        offset += size
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes after offset {offset}")
    meta = {k: v for k, v in header.items() if k not in ("magic", "tensors")}
    return ModelParams(tensors), meta


def config_dict(cfg: TrainConfig) -> dict:
    return {k: str(v) if isinstance(v, StrEnum) else v for k, v in asdict(cfg).items()}
