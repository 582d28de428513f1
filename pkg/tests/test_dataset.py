import json

import numpy as np
import pytest

from reform_cli.dataset import (
    DatasetError,
    DataSplit,
    IdMap,
    build_graph,
    k_core_filter,
    load_reviews,
    split_interactions,
)
from reform_cli.exceptions import DataIOError, ReviewFormatError
from tests.utils import make_graph, make_split, review, write_reviews


def test_load_reviews(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert load_reviews(empty) == ([], 0)

    one = write_reviews(tmp_path / "one.jsonl", [{"user_id": "u", "item_id": "i", "text": "Good."}])
    reviews, malformed = load_reviews(one)
    assert malformed == 0
    assert [(r.user_id, r.item_id, r.text) for r in reviews] == [("u", "i", "Good.")]

    rows = [json.dumps({"user_id": f"u{n}", "item_id": "i", "text": "ok", "rating": 4}) for n in range(3)]
    mixed = tmp_path / "mixed.jsonl"
    mixed.write_text("\n".join(rows[:2] + ["{not json"] + rows[2:]) + "\n")
    reviews, malformed = load_reviews(mixed)
    assert len(reviews) == 3
    assert malformed == 1
    assert [r.review_id for r in reviews] == [0, 1, 2]


def test_load_reviews_errors(tmp_path):
    with pytest.raises(DataIOError):
        load_reviews(tmp_path / "missing.jsonl")
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"user_id": "u", "item_id": "i", "text": "ok"}\n{"text": ""}\nnope\n')
    with pytest.raises(ReviewFormatError):
        load_reviews(bad)


def test_load_reviews_tsv_and_duplicates(tmp_path):
    path = tmp_path / "r.tsv"
    path.write_text("u\ti\tGreat food\t5\t100\nu\ti\tAgain\t4\t100\nu\ti2\tFine\n")
    reviews, malformed = load_reviews(path, "tsv")
    assert malformed == 1
    assert [(r.item_id, r.timestamp) for r in reviews] == [("i", 100), ("i2", None)]
    assert reviews[0].rating == 5.0


def test_k_core_filter():
    reviews = [review(u, i) for u in ("a", "b") for i in ("x", "y")]
    assert k_core_filter(reviews, 2) == reviews
    assert k_core_filter(reviews, 1) == reviews
    chain = [review("u1", "i1"), review("u1", "i2"), review("u2", "i2")]
    assert k_core_filter(chain, 2) == []
    with pytest.raises(DatasetError):
        k_core_filter(chain, 0)


def test_k_core_invariant():
    rng = np.random.default_rng(3)
    reviews = [review(f"u{rng.integers(30)}", f"i{rng.integers(20)}") for _ in range(300)]
    kept = k_core_filter(reviews, 4)
    pairs = {(r.user_id, r.item_id) for r in kept}
    for side in (0, 1):
        counts: dict[str, int] = {}
        for p in pairs:
            counts[p[side]] = counts.get(p[side], 0) + 1
        assert min(counts.values()) >= 4


def test_split_interactions():
    reviews = [review("a", f"i{n}") for n in range(10)]
    reviews += [review("b", f"i{n}") for n in range(5)]
    reviews += [review("c", "i0")]
    split = split_interactions(reviews, seed=7)
    counts = {
        name: np.bincount(pairs[:, 0], minlength=3).tolist() for name, pairs in split.parts().items()
    }
    assert counts == {"train": [6, 3, 1], "val": [2, 1, 0], "test": [2, 1, 0]}

    everything = np.concatenate(list(split.parts().values()))
    assert len({tuple(p) for p in everything.tolist()}) == len(everything) == 16
    again = split_interactions(reviews, seed=7)
    for a, b in zip(split.parts().values(), again.parts().values()):
        assert a.tobytes() == b.tobytes()


def test_split_file_roundtrip(tmp_path):
    reviews = [review(u, f"i{n}") for u in "ab" for n in range(5)]
    split = split_interactions(reviews, seed=1)
    split.save_tsv(tmp_path / "split.tsv")
    loaded = DataSplit.load_tsv(tmp_path / "split.tsv", split.num_users, split.num_items)
    for a, b in zip(split.parts().values(), loaded.parts().values()):
        assert np.array_equal(a, b)
    id_map = IdMap.from_reviews(reviews)
    id_map.save(tmp_path / "ids.json")
    assert IdMap.load(tmp_path / "ids.json") == id_map
    assert json.loads((tmp_path / "ids.json").read_text())["users"] == {"a": 0, "b": 1}
    shuffled = IdMap.from_reviews([review("zed", "i9"), review("amy", "i10"), review("amy", "i1")])
    assert shuffled.users == {"amy": 0, "zed": 1}
    assert shuffled.items == {"i1": 0, "i10": 1, "i9": 2}


def test_build_graph():
    single = make_graph([(0, 0)], 1, 1)
    assert single.user_degree.tolist() == [1]
    assert single.item_degree.tolist() == [1]
    assert single.neighbors("user", 0).tolist() == [0]

    square = make_graph([(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2)
    assert square.user_degree.tolist() == [2, 2]
    assert square.item_degree.tolist() == [2, 2]
    assert (square.item_users != square.user_items.T).nnz == 0


def test_graph_uses_train_only():
    split = make_split([(0, 0), (1, 1)], 2, 3, val=[(0, 1)], test=[(1, 2)])
    graph = build_graph(split)
    assert graph.contains(np.array([0, 1, 0, 1]), np.array([0, 1, 1, 2])).tolist() == [
        True,
        True,
        False,
        False,
    ]
    assert graph.item_degree.tolist() == [1, 1, 0]
    with pytest.raises(DatasetError):
        build_graph(make_split([], 1, 1))
