import json
from collections.abc import Callable
from contextlib import contextmanager, redirect_stdout
from io import StringIO
from pathlib import Path

import numpy as np

from reform_cli.dataset import DataSplit, InteractionGraph, Review, build_graph


@contextmanager
def capture_stdout():
    stream = StringIO()
    with redirect_stdout(stream):
        yield stream


def write_reviews(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), "utf8")
    return path


def review(user: str, item: str, text="Nice place.", review_id=0, **kw) -> Review:
    return Review(user, item, text, review_id=review_id, **kw)


def empty_pairs() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def make_split(
    train: list[tuple[int, int]],
    num_users: int,
    num_items: int,
    val: list[tuple[int, int]] | None = None,
    test: list[tuple[int, int]] | None = None,
) -> DataSplit:
    def pairs(rows):
        return np.array(sorted(rows), dtype=np.int64).reshape(-1, 2) if rows else empty_pairs()

    return DataSplit(num_users, num_items, pairs(train), pairs(val), pairs(test))


def make_graph(train: list[tuple[int, int]], num_users: int, num_items: int) -> InteractionGraph:
    return build_graph(make_split(train, num_users, num_items))


def random_graph(rng: np.random.Generator, num_users: int, num_items: int, p=0.5):
    """Random bipartite graph where every node keeps at least one edge"""
    adj = rng.random((num_users, num_items)) < p
    for u in range(num_users):
        adj[u, rng.integers(num_items)] = True
    for i in range(num_items):
        adj[rng.integers(num_users), i] = True
    return make_graph([tuple(e) for e in np.argwhere(adj).tolist()], num_users, num_items)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h=1e-4) -> np.ndarray:
    """Central differences of f w.r.t. every entry of x, mutating x in place"""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8) -> float:
    """Largest deviation relative to the tensor's largest gradient entry"""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)
