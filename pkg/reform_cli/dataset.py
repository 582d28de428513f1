import json
import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .exceptions import DataFormatError, DataIOError, ReformError, ReviewFormatError
from .seeding import SPLIT, substream

logger = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.5
DEFAULT_RATIOS = (3, 1, 1)
SPLIT_NAMES = ("train", "val", "test")


class ReviewFormat(StrEnum):
    jsonl = "jsonl"
    tsv = "tsv"


class DatasetError(ReformError, ValueError):
    exit_code = 4


@dataclass(frozen=True, slots=True)
class Review:
    user_id: str
    item_id: str
    text: str
    rating: float | None = None
    timestamp: int | None = None
    # Ordinal position in the loaded corpus, used for provenance and tie-breaks
    review_id: int = 0


class LoadedReviews(NamedTuple):
    reviews: list[Review]
    malformed: int


def _make_review(user_id, item_id, text, rating, timestamp, review_id: int) -> Review:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty review text")
    user_id, item_id = str(user_id).strip(), str(item_id).strip()
    if not user_id or not item_id:
        raise ValueError("missing user_id or item_id")
    if rating is not None:
        rating = float(rating)
        if not 1.0 <= rating <= 5.0:
            raise ValueError(f"rating out of range: {rating}")
    if timestamp is not None:
        if isinstance(timestamp, bool) or int(timestamp) != float(timestamp):
            raise ValueError(f"timestamp is not integer seconds: {timestamp!r}")
        timestamp = int(timestamp)
    return Review(user_id, item_id, text, rating, timestamp, review_id)


def _parse_jsonl(line: str, review_id: int) -> Review:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    return _make_review(
        obj["user_id"],
        obj["item_id"],
        obj["text"],
        obj.get("rating"),
        obj.get("timestamp"),
        review_id,
    )


def _parse_tsv(line: str, review_id: int) -> Review:
    cols = line.rstrip("\r\n").split("\t")
    if not 3 <= len(cols) <= 5:
        raise ValueError(f"expected 3-5 tab separated columns, got {len(cols)}")
    cols += [""] * (5 - len(cols))
    user_id, item_id, text, rating, timestamp = cols
    return _make_review(
        user_id,
        item_id,
        text,
        rating or None,
        int(timestamp) if timestamp else None,
        review_id,
    )


def load_reviews(path: Path | str, fmt: ReviewFormat | str = "jsonl") -> LoadedReviews:
    """Read reviews line by line; malformed lines are counted, not fatal (below 50%)"""
    path = Path(path)
    parse = _parse_tsv if ReviewFormat(fmt) == ReviewFormat.tsv else _parse_jsonl
    try:
        content = path.read_text("utf8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"Cannot read reviews file {path}: {e}") from e
    reviews: list[Review] = []
    seen: set[tuple[str, str, int]] = set()
    total = malformed = 0
    for lineno, line in enumerate(content.splitlines(), 1):
        if not line.strip():
            continue
        total += 1
        try:
            review = parse(line, len(reviews))
        except (ValueError, KeyError, TypeError) as e:
            malformed += 1
            logger.debug("%s:%d malformed: %s", path, lineno, e)
            continue
        if review.timestamp is not None:
            key = (review.user_id, review.item_id, review.timestamp)
            if key in seen:
                malformed += 1
                logger.debug("%s:%d duplicate (user, item, timestamp)", path, lineno)
                continue
            seen.add(key)
        reviews.append(review)
    if malformed:
        logger.warning("%s: %d of %d lines malformed", path, malformed, total)
        if malformed > total * MALFORMED_LIMIT:
            raise ReviewFormatError(
                f"{path}: {malformed} of {total} lines malformed (limit 50%)"
            )
    return LoadedReviews(reviews, malformed)


def _dense_index(keys) -> dict[str, int]:
    return {k: n for n, k in enumerate(sorted(set(keys)))}


def k_core_filter(reviews: list[Review], k: int) -> list[Review]:
    """Peel users then items with fewer than k distinct interactions to a fixed point"""
    if k < 1:
        raise DatasetError(f"k must be >= 1, got {k}")
    if not reviews:
        return []
    users = _dense_index(r.user_id for r in reviews)
    items = _dense_index(r.item_id for r in reviews)
    codes = np.array(
        [(users[r.user_id], items[r.item_id]) for r in reviews], dtype=np.int64
    )
    pairs = np.unique(codes, axis=0)
    while True:
        before = len(pairs)
        user_count = np.bincount(pairs[:, 0], minlength=len(users))
        pairs = pairs[user_count[pairs[:, 0]] >= k]
        item_count = np.bincount(pairs[:, 1], minlength=len(items))
        pairs = pairs[item_count[pairs[:, 1]] >= k]
        if len(pairs) == before:
            break
    keep = set(map(tuple, pairs.tolist()))
    result = [r for r, c in zip(reviews, codes.tolist()) if tuple(c) in keep]
    if not result:
        logger.warning("%d-core filtering left no interactions", k)
    return result


@dataclass(frozen=True)
class IdMap:
    users: dict[str, int]
    items: dict[str, int]

    @classmethod
    def from_reviews(cls, reviews: list[Review]) -> "IdMap":
        return cls(
            _dense_index(r.user_id for r in reviews),
            _dense_index(r.item_id for r in reviews),
        )

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_items(self) -> int:
        return len(self.items)

    def encode(self, reviews: list[Review]) -> np.ndarray:
        """Distinct (user_index, item_index) pairs sorted by user then item"""
        codes = np.array(
            [(self.users[r.user_id], self.items[r.item_id]) for r in reviews],
            dtype=np.int64,
        ).reshape(-1, 2)
        return np.unique(codes, axis=0)

    def save(self, path: Path) -> None:
        text = json.dumps({"users": self.users, "items": self.items}, indent=1)
        path.write_text(text + "\n", "utf8")

    @classmethod
    def load(cls, path: Path) -> "IdMap":
        try:
            data = json.loads(path.read_text("utf8"))
            return cls(dict(data["users"]), dict(data["items"]))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise DataFormatError(f"Invalid id map {path}: {e}") from e


def _sorted_pairs(rows: list[tuple[int, int]]) -> np.ndarray:
    pairs = np.array(rows, dtype=np.int64).reshape(-1, 2)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


@dataclass(frozen=True, eq=False)
class DataSplit:
    num_users: int
    num_items: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def parts(self) -> dict[str, np.ndarray]:
        return dict(zip(SPLIT_NAMES, (self.train, self.validation, self.test)))

    def items_by_user(self, part: str = "test") -> list[np.ndarray]:
        pairs = self.parts()[part]
        bounds = np.searchsorted(pairs[:, 0], np.arange(self.num_users + 1))
        return [pairs[a:b, 1] for a, b in zip(bounds[:-1], bounds[1:])]

    def save_tsv(self, path: Path) -> None:
        lines = [
            f"{u}\t{i}\t{name}"
            for name, pairs in self.parts().items()
            for u, i in pairs.tolist()
        ]
        path.write_text("".join(line + "\n" for line in lines), "utf8")

    @classmethod
    def load_tsv(cls, path: Path, num_users: int, num_items: int) -> "DataSplit":
        rows: dict[str, list[tuple[int, int]]] = {name: [] for name in SPLIT_NAMES}
        try:
            for line in path.read_text("utf8").splitlines():
                if line.strip():
                    u, i, name = line.split("\t")
                    rows[name].append((int(u), int(i)))
        except (OSError, ValueError, KeyError) as e:
            raise DataFormatError(f"Invalid split file {path}: {e}") from e
        return cls(num_users, num_items, *(_sorted_pairs(rows[n]) for n in SPLIT_NAMES))


def split_interactions(
    reviews: list[Review],
    ratios: tuple[int, int, int] = DEFAULT_RATIOS,
    seed: int = 0,
    id_map: IdMap | None = None,
) -> DataSplit:
    """Per-user random partition; floor for val/test, remainders go to train"""
    if len(ratios) != 3 or min(ratios) < 0 or ratios[0] <= 0:
        raise DatasetError(f"Invalid split ratios: {ratios}")
    id_map = id_map or IdMap.from_reviews(reviews)
    pairs = id_map.encode(reviews)
    total = sum(ratios)
    rng = substream(seed, SPLIT)
    bounds = np.searchsorted(pairs[:, 0], np.arange(id_map.num_users + 1))
    out: dict[str, list[tuple[int, int]]] = {name: [] for name in SPLIT_NAMES}
    for u, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        n = int(b - a)
        if not n:
            continue
        shuffled = rng.permutation(pairs[a:b, 1]).tolist()
        n_val, n_test = n * ratios[1] // total, n * ratios[2] // total
        out["val"] += [(u, i) for i in shuffled[:n_val]]
        out["test"] += [(u, i) for i in shuffled[n_val : n_val + n_test]]
        out["train"] += [(u, i) for i in shuffled[n_val + n_test :]]
    return DataSplit(
        id_map.num_users,
        id_map.num_items,
        *(_sorted_pairs(out[name]) for name in SPLIT_NAMES),
    )


def _inv_sqrt(degree: np.ndarray) -> np.ndarray:
    out = np.zeros(len(degree), dtype=np.float64)
    nz = degree > 0
    out[nz] = 1.0 / np.sqrt(degree[nz])
    return out


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    num_users: int
    num_items: int
    user_items: sp.csr_matrix
    item_users: sp.csr_matrix
    user_degree: np.ndarray
    item_degree: np.ndarray
    # 1 / (sqrt|N_u| sqrt|N_i|) on every edge, both orientations
    norm_user_items: sp.csr_matrix
    norm_item_users: sp.csr_matrix
    pair_codes: np.ndarray = field(repr=False)

    def neighbors(self, side: str, anchor: int) -> np.ndarray:
        adj = self.user_items if side == "user" else self.item_users
        return adj.indices[adj.indptr[anchor] : adj.indptr[anchor + 1]]

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Whether each (user, item) is a training edge"""
        query = np.asarray(users, dtype=np.int64) * self.num_items + items
        if not len(self.pair_codes):
            return np.zeros(query.shape, dtype=bool)
        pos = np.searchsorted(self.pair_codes, query)
        pos = np.minimum(pos, len(self.pair_codes) - 1)
        return self.pair_codes[pos] == query


def build_graph(split: DataSplit) -> InteractionGraph:
    """Bipartite CSR graph from TRAIN interactions only"""
    train = split.train
    if not len(train):
        raise DatasetError("Cannot build a graph from an empty training set")
    shape = (split.num_users, split.num_items)
    ones = np.ones(len(train), dtype=np.float64)
    user_items = sp.csr_matrix((ones, (train[:, 0], train[:, 1])), shape=shape)
    user_items.sum_duplicates()
    user_items.data[:] = 1.0
    user_items.sort_indices()
    item_users = user_items.T.tocsr()
    item_users.sort_indices()
    user_degree = np.diff(user_items.indptr)
    item_degree = np.diff(item_users.indptr)
    norm = sp.diags(_inv_sqrt(user_degree)) @ user_items @ sp.diags(_inv_sqrt(item_degree))
    norm_user_items = sp.csr_matrix(norm)
    norm_user_items.sort_indices()
    norm_item_users = norm_user_items.T.tocsr()
    norm_item_users.sort_indices()
    rows = np.repeat(np.arange(split.num_users, dtype=np.int64), user_degree)
    codes = rows * split.num_items + user_items.indices.astype(np.int64)
    return InteractionGraph(
        split.num_users,
        split.num_items,
        user_items,
        item_users,
        user_degree,
        item_degree,
        norm_user_items,
        norm_item_users,
        codes,
    )


def dataset_stats(
    raw: list[Review], filtered: list[Review], split: DataSplit, k: int
) -> dict:
    parts = split.parts()
    return {
        "raw_reviews": len(raw),
        "filtered_reviews": len(filtered),
        "k_core": k,
        "users": split.num_users,
        "items": split.num_items,
        "interactions": sum(len(p) for p in parts.values()),
        **{name: len(pairs) for name, pairs in parts.items()},
    }
