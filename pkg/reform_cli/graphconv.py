from dataclasses import dataclass

import numpy as np

from .dataset import InteractionGraph
from .exceptions import ShapeError


@dataclass(frozen=True, eq=False)
class BaseEmbeddings:
    """Layer-0 tables E^(0), trained directly"""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        if self.users.ndim != 2 or self.users.shape[1:] != self.items.shape[1:]:
            raise ShapeError(f"Base tables disagree: {self.users.shape} vs {self.items.shape}")

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    @classmethod
    def init(
        cls, rng: np.random.Generator, num_users: int, num_items: int, dim: int, std: float = 0.01
    ) -> "BaseEmbeddings":
        return cls(
            rng.normal(0.0, std, size=(num_users, dim)),
            rng.normal(0.0, std, size=(num_items, dim)),
        )


@dataclass(frozen=True, eq=False)
class PropagatedEmbeddings:
    # layers[l] = (users, items) for l = 1..L
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    users: np.ndarray
    items: np.ndarray


def _check(graph: InteractionGraph, users: np.ndarray, items: np.ndarray) -> None:
    if len(users) != graph.num_users or len(items) != graph.num_items:
        raise ShapeError(
            f"Tables have {len(users)} users / {len(items)} items, "
            f"graph has {graph.num_users} / {graph.num_items}"
        )


def propagate_layer(
    graph: InteractionGraph, users: np.ndarray, items: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One normalized neighbourhood sum in each direction"""
    _check(graph, users, items)
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    return graph.norm_user_items @ items, graph.norm_item_users @ users


def _layer_sum(
    graph: InteractionGraph,
    users: np.ndarray,
    items: np.ndarray,
    layers: int,
    include_layer0: bool,
) -> PropagatedEmbeddings:
    if layers < 1:
        raise ShapeError(f"Need at least one layer, got {layers}")
    out: list[tuple[np.ndarray, np.ndarray]] = []
    current = np.asarray(users, dtype=np.float64), np.asarray(items, dtype=np.float64)
    total_users = current[0].copy() if include_layer0 else np.zeros_like(current[0])
    total_items = current[1].copy() if include_layer0 else np.zeros_like(current[1])
    for _ in range(layers):
        current = propagate_layer(graph, *current)
        out.append(current)
        total_users += current[0]
        total_items += current[1]
    return PropagatedEmbeddings(tuple(out), total_users, total_items)


def propagate(
    graph: InteractionGraph,
    base: BaseEmbeddings,
    layers: int = 3,
    include_layer0: bool = False,
) -> PropagatedEmbeddings:
    """e^g as the sum of layers 1..L, or 0..L with `include_layer0`"""
    return _layer_sum(graph, base.users, base.items, layers, include_layer0)


def backprop_graph(
    graph: InteractionGraph,
    layers: int,
    grad_users: np.ndarray,
    grad_items: np.ndarray,
    include_layer0: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient w.r.t. E^(0) given the gradient w.r.t. e^g.

    The normalized adjacency is symmetric, so the adjoint is the forward map itself.
    """
    summed = _layer_sum(graph, grad_users, grad_items, layers, include_layer0)
    return summed.users, summed.items


def dense_adjacency(graph: InteractionGraph) -> np.ndarray:
    """Materialized (U+I)x(U+I) normalized adjacency, for small graphs only"""
    n = graph.num_users + graph.num_items
    adj = np.zeros((n, n))
    block = graph.norm_user_items.toarray()
    adj[: graph.num_users, graph.num_users :] = block
    adj[graph.num_users :, : graph.num_users] = block.T
    return adj
