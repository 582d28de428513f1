"""Multi-factor cross attention between an anchor's profile and its counterparts'.

For an anchor with profile X (M x d) and n key profiles Y_1..Y_n::

    Q = X W_q, V = X W_v, K_k = Y_k W_k
    A_k = row_softmax(Q K_k^T / sqrt(d*))      one M x M map per key
    P = max_k A_k                               elementwise, or the mean for avg pooling
    e^a = mean over rows of (P V)

Everything here is batched over anchors; keys are padded to a common n and masked.
"""

import logging
from dataclasses import dataclass, fields
from enum import StrEnum

import numpy as np

from .dataset import InteractionGraph
from .exceptions import AttentionNumericError, ShapeError
from .seeding import KEYS, substream

logger = logging.getLogger(__name__)

DEFAULT_KEY_CAP = 50


class Direction(StrEnum):
    user_side = "user_side"
    item_side = "item_side"

    @property
    def code(self) -> int:
        return 0 if self is Direction.user_side else 1

    @property
    def graph_side(self) -> str:
        return "user" if self is Direction.user_side else "item"


class Pooling(StrEnum):
    max = "max"
    avg = "avg"


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    w_q_user: np.ndarray
    w_k_item: np.ndarray
    w_v_user: np.ndarray
    w_q_item: np.ndarray
    w_k_user: np.ndarray
    w_v_item: np.ndarray

    def __post_init__(self):
        shapes = {w.shape for w in self.as_dict().values()}
        if len(shapes) != 1:
            raise ShapeError(f"Projection shapes differ: {sorted(shapes)}")

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_star: int) -> "ProjectionSet":
        return cls(*(glorot(rng, d, d_star) for _ in cls.names()))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @staticmethod
    def weight_names(direction: Direction) -> tuple[str, str, str]:
        """(query, key, value) weight names used by one direction"""
        if direction is Direction.user_side:
            return "w_q_user", "w_k_item", "w_v_user"
        return "w_q_item", "w_k_user", "w_v_item"

    def for_direction(self, direction: Direction) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in self.weight_names(Direction(direction)))


@dataclass(frozen=True, eq=False)
class KeySample:
    anchor: int
    keys: np.ndarray


@dataclass(frozen=True, eq=False)
class KeyBatch:
    """Padded key indices (B, n); `mask` marks the real ones"""

    index: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_lists(cls, lists: list[np.ndarray]) -> "KeyBatch":
        width = max([len(k) for k in lists] + [1])
        index = np.zeros((len(lists), width), dtype=np.int64)
        mask = np.zeros((len(lists), width), dtype=bool)
        for row, keys in enumerate(lists):
            index[row, : len(keys)] = keys
            mask[row, : len(keys)] = True
        return cls(index, mask)


@dataclass(frozen=True, eq=False)
class AttentiveEmbedding:
    direction: Direction
    anchor: int
    vector: np.ndarray


def project(profile: np.ndarray, w: np.ndarray) -> np.ndarray:
    if profile.shape[-1] != w.shape[0]:
        raise ShapeError(f"Cannot project {profile.shape} with {w.shape}")
    return profile @ w


def sample_keys(
    graph: InteractionGraph,
    anchor: int,
    n: int,
    seed: int,
    epoch: int = 0,
    direction: Direction = Direction.user_side,
) -> KeySample:
    """n distinct training neighbours of `anchor`, all of them when there are fewer"""
    direction = Direction(direction)
    neighbors = graph.neighbors(direction.graph_side, anchor)
    if len(neighbors) <= n:
        return KeySample(anchor, neighbors.copy())
    rng = substream(seed, KEYS, epoch, direction.code, anchor)
    return KeySample(anchor, rng.choice(neighbors, size=n, replace=False))


def sample_key_batch(
    graph: InteractionGraph,
    direction: Direction,
    anchors: np.ndarray,
    n: int,
    seed: int,
    epoch: int,
) -> KeyBatch:
    return KeyBatch.from_lists(
        [sample_keys(graph, int(a), n, seed, epoch, direction).keys for a in anchors]
    )


def inference_key_batch(
    graph: InteractionGraph,
    direction: Direction,
    anchors: np.ndarray,
    cap: int = DEFAULT_KEY_CAP,
) -> KeyBatch:
    """First `cap` neighbours in index order, so scoring is deterministic"""
    side = Direction(direction).graph_side
    return KeyBatch.from_lists([graph.neighbors(side, int(a))[:cap] for a in anchors])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class PoolState:
    maps: np.ndarray  # (B, n, M, M)
    pooled: np.ndarray  # (B, M, M)
    source: np.ndarray  # (B, M, M) argmax key per cell
    mask: np.ndarray  # (B, n)
    pooling: Pooling


def _attend_core(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, pooling: Pooling
) -> tuple[np.ndarray, PoolState]:
    scale = np.sqrt(q.shape[-1])
    logits = np.einsum("bmd,bkcd->bkmc", q, k) / scale
    if not np.isfinite(logits).all():
        raise AttentionNumericError("Non-finite attention logits")
    maps = _softmax_rows(logits)
    live = mask[:, :, None, None]
    count = mask.sum(axis=1)
    if Pooling(pooling) is Pooling.max:
        masked = np.where(live, maps, -np.inf)
        # argmax keeps the lowest key index among ties
        source = masked.argmax(axis=1)
        pooled = np.take_along_axis(maps, source[:, None], axis=1)[:, 0]
    else:
        source = np.zeros(maps.shape[:1] + maps.shape[2:], dtype=np.int64)
        pooled = (maps * live).sum(axis=1) / np.maximum(count, 1)[:, None, None]
    pooled = np.where((count > 0)[:, None, None], pooled, 0.0)
    output = pooled @ v
    return output, PoolState(maps, pooled, source, mask, Pooling(pooling))


def _attend_core_backward(
    state: PoolState, q: np.ndarray, k: np.ndarray, v: np.ndarray, grad_output: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (Q, K, V) given the gradient w.r.t. P V"""
    grad_pooled = grad_output @ np.swapaxes(v, -1, -2)
    grad_v = np.swapaxes(state.pooled, -1, -2) @ grad_output
    n = state.maps.shape[1]
    live = state.mask[:, :, None, None]
    if state.pooling is Pooling.max:
        route = np.arange(n)[None, :, None, None] == state.source[:, None]
        grad_maps = np.where(route & live, grad_pooled[:, None], 0.0)
    else:
        count = np.maximum(state.mask.sum(axis=1), 1)[:, None, None, None]
        grad_maps = np.where(live, grad_pooled[:, None] / count, 0.0)
    maps = state.maps
    inner = (grad_maps * maps).sum(axis=-1, keepdims=True)
    grad_logits = maps * (grad_maps - inner) / np.sqrt(q.shape[-1])
    grad_q = np.einsum("bkmc,bkcd->bmd", grad_logits, k)
    grad_k = np.einsum("bkmc,bmd->bkcd", grad_logits, q)
    return grad_q, grad_k, grad_v


@dataclass(frozen=True, eq=False)
class MfaOutput:
    output: np.ndarray
    pooled: np.ndarray
    source: np.ndarray
    maps: np.ndarray


def mfa_forward(
    q: np.ndarray, k_list: list[np.ndarray] | np.ndarray, v: np.ndarray, pooling: Pooling = Pooling.max
) -> MfaOutput:
    """Single-anchor attention over n keys; see the module docstring"""
    k = np.asarray(k_list, dtype=np.float64)
    if not len(k):
        raise ShapeError("Need at least one key")
    if k.shape[1:] != q.shape or v.shape != q.shape:
        raise ShapeError(f"Q {q.shape}, K {k.shape[1:]}, V {v.shape} must agree")
    mask = np.ones((1, len(k)), dtype=bool)
    output, state = _attend_core(q[None], k[None], v[None], mask, pooling)
    return MfaOutput(output[0], state.pooled[0], state.source[0], state.maps[0])


def factor_average(output: np.ndarray) -> np.ndarray:
    """Mean over the M factor rows.

    Example::
        >>> factor_average(np.array([[1.0, 3.0], [3.0, 1.0]])).tolist()
        [2.0, 2.0]
    """
    return output.mean(axis=-2)


@dataclass(eq=False)
class AttentionCache:
    anchor_profiles: np.ndarray
    key_profiles: np.ndarray  # distinct key entities only
    key_inverse: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    state: PoolState


def attend(
    anchor_profiles: np.ndarray,
    key_table: np.ndarray,
    keys: KeyBatch,
    w_q: np.ndarray,
    w_k: np.ndarray,
    w_v: np.ndarray,
    pooling: Pooling = Pooling.max,
) -> tuple[np.ndarray, AttentionCache]:
    """Attentive embeddings (B, d*) for a batch of anchors.

    `key_table` is the full counterpart profile table; `keys.index` points into it.
    """
    used, inverse = np.unique(keys.index, return_inverse=True)
    inverse = inverse.reshape(keys.index.shape)
    key_profiles = key_table[used]
    q = project(anchor_profiles, w_q)
    v = project(anchor_profiles, w_v)
    k = project(key_profiles, w_k)[inverse]
    output, state = _attend_core(q, k, v, keys.mask, pooling)
    cache = AttentionCache(anchor_profiles, key_profiles, inverse, q, k, v, state)
    return factor_average(output), cache


def attend_backward(
    cache: AttentionCache, grad_embedding: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (W_q, W_k, W_v); profiles are frozen"""
    m = cache.q.shape[1]
    grad_output = np.repeat(grad_embedding[:, None, :] / m, m, axis=1)
    grad_q, grad_k, grad_v = _attend_core_backward(cache.state, cache.q, cache.k, cache.v, grad_output)
    grad_k_used = np.zeros((len(cache.key_profiles),) + grad_k.shape[2:])
    np.add.at(grad_k_used, cache.key_inverse.ravel(), grad_k.reshape((-1,) + grad_k.shape[2:]))
    x = cache.anchor_profiles
    return (
        np.einsum("bmi,bmj->ij", x, grad_q),
        np.einsum("umi,umj->ij", cache.key_profiles, grad_k_used),
        np.einsum("bmi,bmj->ij", x, grad_v),
    )


def _tables(direction: Direction, user_profiles: np.ndarray, item_profiles: np.ndarray):
    if Direction(direction) is Direction.user_side:
        return user_profiles, item_profiles
    return item_profiles, user_profiles


def mfa_embed(
    direction: Direction,
    anchor: int,
    keys: KeySample,
    user_profiles: np.ndarray,
    item_profiles: np.ndarray,
    proj: ProjectionSet,
    pooling: Pooling = Pooling.max,
) -> AttentiveEmbedding:
    direction = Direction(direction)
    anchors, counterparts = _tables(direction, user_profiles, item_profiles)
    if not 0 <= anchor < len(anchors):
        raise ShapeError(f"No profile for {direction.graph_side} {anchor}")
    if len(keys.keys) and (keys.keys.min() < 0 or keys.keys.max() >= len(counterparts)):
        raise ShapeError(f"Key outside the counterpart profile table: {keys.keys.tolist()}")
    batch = KeyBatch.from_lists([keys.keys])
    vector, _ = attend(
        anchors[anchor][None], counterparts, batch, *proj.for_direction(direction), pooling
    )
    return AttentiveEmbedding(direction, anchor, vector[0])


def mfa_backward(
    direction: Direction, cache: AttentionCache, grad_embedding: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the three projections one direction uses, keyed by name"""
    names = ProjectionSet.weight_names(Direction(direction))
    return dict(zip(names, attend_backward(cache, grad_embedding)))


def embed_all(
    direction: Direction,
    graph: InteractionGraph,
    user_profiles: np.ndarray,
    item_profiles: np.ndarray,
    proj: ProjectionSet,
    pooling: Pooling = Pooling.max,
    key_cap: int = DEFAULT_KEY_CAP,
    chunk: int = 128,
) -> np.ndarray:
    """Inference-time e^a for every anchor of one side"""
    direction = Direction(direction)
    anchors, counterparts = _tables(direction, user_profiles, item_profiles)
    weights = proj.for_direction(direction)
    out = np.zeros((len(anchors), weights[0].shape[1]))
    for start in range(0, len(anchors), chunk):
        ids = np.arange(start, min(start + chunk, len(anchors)))
        keys = inference_key_batch(graph, direction, ids, key_cap)
        out[ids], _ = attend(anchors[ids], counterparts, keys, *weights, pooling)
    return out


# Replacement for the attention branch: d -> d* -> d*, ReLU in between,
# applied to the factor mean of the raw profile.
MLP_NAMES = (
    "mlp_w1_user",
    "mlp_b1_user",
    "mlp_w2_user",
    "mlp_b2_user",
    "mlp_w1_item",
    "mlp_b1_item",
    "mlp_w2_item",
    "mlp_b2_item",
)


def init_mlp(rng: np.random.Generator, d: int, d_star: int) -> dict[str, np.ndarray]:
    params = {}
    for side in ("user", "item"):
        params[f"mlp_w1_{side}"] = glorot(rng, d, d_star)
        params[f"mlp_b1_{side}"] = np.zeros(d_star)
        params[f"mlp_w2_{side}"] = glorot(rng, d_star, d_star)
        params[f"mlp_b2_{side}"] = np.zeros(d_star)
    return params


@dataclass(eq=False)
class MlpCache:
    side: str
    x: np.ndarray
    hidden: np.ndarray


def mlp_forward(
    params: dict[str, np.ndarray], side: str, profiles: np.ndarray
) -> tuple[np.ndarray, MlpCache]:
    x = factor_average(profiles)
    hidden = x @ params[f"mlp_w1_{side}"] + params[f"mlp_b1_{side}"]
    out = np.maximum(hidden, 0.0) @ params[f"mlp_w2_{side}"] + params[f"mlp_b2_{side}"]
    return out, MlpCache(side, x, hidden)


def mlp_backward(
    params: dict[str, np.ndarray], cache: MlpCache, grad_out: np.ndarray
) -> dict[str, np.ndarray]:
    side = cache.side
    active = np.maximum(cache.hidden, 0.0)
    grad_hidden = (grad_out @ params[f"mlp_w2_{side}"].T) * (cache.hidden > 0)
    return {
        f"mlp_w2_{side}": active.T @ grad_out,
        f"mlp_b2_{side}": grad_out.sum(axis=0),
        f"mlp_w1_{side}": cache.x.T @ grad_hidden,
        f"mlp_b1_{side}": grad_hidden.sum(axis=0),
    }
