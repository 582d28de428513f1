import json
import logging

import numpy as np
import pytest

from reform_cli.dataset import IdMap, split_interactions
from reform_cli.exceptions import BackendError, DataFormatError
from reform_cli.llm import UNKNOWN, ChatBackend, LlmBackendConfig, MockChatBackend, ResponseCache
from reform_cli.rpg import (
    DEFAULT_FACTORS,
    EntityKind,
    FactorProfile,
    FactorSet,
    FactorSetError,
    ProfileConfig,
    ProfileGenerator,
    ProfileParseError,
    RpgError,
    build_prompt,
    build_profiles,
    build_request,
    generate_profile,
    inject_noise,
    load_profiles,
    parse_response,
    run_jobs,
    sample_item_reviews,
    sample_user_reviews,
    save_profiles,
)
from tests.utils import review


class ScriptedBackend(ChatBackend):
    """Replies from a fixed list, one per call"""

    def __init__(self, replies: list[str]):
        super().__init__(LlmBackendConfig())
        self.replies = list(replies)

    def _complete(self, request):
        return self.replies.pop(0)


def reviews_of(user: str, count: int, start=0) -> list:
    return [review(user, f"i{n}", f"Review {n} by {user}.", review_id=start + n) for n in range(count)]


def test_factor_set(tmp_path):
    assert DEFAULT_FACTORS.M == 7
    assert DEFAULT_FACTORS.index("waiting") == 5
    assert DEFAULT_FACTORS.index(2) == DEFAULT_FACTORS.index("2") == 2
    assert DEFAULT_FACTORS.subset(0).names == ("cuisine type",)
    with pytest.raises(FactorSetError):
        FactorSet((), ())
    with pytest.raises(FactorSetError):
        FactorSet(("a", "a"), ("x", "y"))
    with pytest.raises(FactorSetError):
        DEFAULT_FACTORS.index("parking")
    with pytest.raises(FactorSetError):
        DEFAULT_FACTORS.index(7)

    path = tmp_path / "factors.toml"
    path.write_text('[[factor]]\nname = "noise"\ndescription = "How loud it is."\n')
    assert FactorSet.load(path) == FactorSet(("noise",), ("How loud it is.",))
    path.write_text("[[factor]]\nname = 'noise'\n")
    with pytest.raises(FactorSetError):
        FactorSet.load(path)


def test_sample_user_reviews():
    few = reviews_of("u", 30)
    assert sample_user_reviews(few, 100) == few
    many = reviews_of("u", 250)
    picked = sample_user_reviews(many, 100, seed=1, entity=4)
    assert len({r.review_id for r in picked}) == 100
    assert picked == sample_user_reviews(many, 100, seed=1, entity=4)
    assert [r.review_id for r in picked] == sorted(r.review_id for r in picked)


def test_sample_item_reviews():
    texts = [review("a", "i", "x" * 5, review_id=0), review("b", "i", "y" * 300, review_id=1)]
    texts.append(review("c", "i", "z" * 40, review_id=2))
    assert [r.review_id for r in sample_item_reviews(texts, 2)] == [1, 2]
    assert sample_item_reviews(texts[:1], 2) == texts[:1]
    tied = [review("a", "i", "same", review_id=9), review("b", "i", "same", review_id=3)]
    assert [r.review_id for r in sample_item_reviews(tied, 2)] == [3, 9]


def test_inject_noise(caplog):
    own = reviews_of("u", 10)
    pool = reviews_of("v", 40, start=100) + reviews_of("u", 5, start=200)
    assert inject_noise(own, pool, 0.0) == own
    replaced = inject_noise(own, pool, 1.0, seed=2)
    assert len(replaced) == 10 and all(r.user_id == "v" for r in replaced)
    half = inject_noise(own, pool, 0.5, seed=2, entity=1)
    assert sum(r in own for r in half) == 5
    assert half == inject_noise(own, pool, 0.5, seed=2, entity=1)

    with caplog.at_level(logging.WARNING):
        short = inject_noise(own, reviews_of("w", 3, start=300), 1.0)
    assert all(r.user_id == "w" for r in short)
    assert "with replacement" in caplog.text
    with pytest.raises(RpgError):
        inject_noise(own, pool, 1.5)
    with pytest.raises(RpgError):
        inject_noise(own, own, 0.5)


def test_inject_noise_random_fixtures():
    rng = np.random.default_rng(7)
    for seed in range(100):
        n_own = int(rng.integers(1, 30))
        own = reviews_of("u", n_own)
        pool = reviews_of("v", int(rng.integers(1, 60)), start=1000)
        pool += reviews_of("u", int(rng.integers(0, 5)), start=2000)
        assert inject_noise(own, pool, 0.0, seed=seed, entity=seed) == own
        replaced = inject_noise(own, pool, 1.0, seed=seed, entity=seed)
        assert len(replaced) == n_own
        assert not any(r in own for r in replaced)
        assert all(r.user_id == "v" for r in replaced)
        half = inject_noise(own, pool, 0.5, seed=seed, entity=seed)
        assert sum(r in own for r in half) == n_own - int(np.floor(0.5 * n_own + 0.5))


def test_build_prompt(caplog):
    reviews = reviews_of("u", 3)
    prompt = build_prompt(DEFAULT_FACTORS, reviews, "user")
    positions = [prompt.index(f"- {name}:") for name in DEFAULT_FACTORS.names]
    assert positions == sorted(positions)
    assert "single user" in prompt and "Review 2 by u." in prompt
    assert prompt == build_prompt(DEFAULT_FACTORS, reviews, EntityKind.user)
    assert "single restaurant" in build_prompt(DEFAULT_FACTORS, reviews, "item")
    with pytest.raises(RpgError):
        build_prompt(DEFAULT_FACTORS, [], "user")

    with caplog.at_level(logging.WARNING):
        request = build_request(DEFAULT_FACTORS, reviews_of("u", 40), "user", max_tokens=500)
    assert 1 <= len(request.reviews) < 40
    assert "kept" in caplog.text


def test_parse_response(caplog):
    answer = {name: f"about {name}" for name in DEFAULT_FACTORS.names if name != "waiting"}
    with caplog.at_level(logging.WARNING):
        factors = parse_response("Sure!\n" + json.dumps(answer), DEFAULT_FACTORS)
    assert factors[5] == UNKNOWN
    assert factors[0] == "about cuisine type"
    assert "waiting" in caplog.text
    listed = parse_response('{"Cuisine Type": ["Greek", "Seafood"]}', DEFAULT_FACTORS.subset(0))
    assert listed == ("Greek, Seafood",)
    with pytest.raises(ProfileParseError):
        parse_response("no json here", DEFAULT_FACTORS)
    with pytest.raises(ProfileParseError):
        parse_response("{broken: }", DEFAULT_FACTORS)


def test_generate_profile_with_cache(tmp_path):
    backend = MockChatBackend(LlmBackendConfig())
    reviews = [review("u", "i", "The flavor was spicy. The price was fair.")]
    request = build_request(DEFAULT_FACTORS, reviews, "user")
    cache = ResponseCache(tmp_path / "cache")
    first = generate_profile(backend, request, DEFAULT_FACTORS, cache, EntityKind.user, 3)
    assert first.entity_index == 3 and len(first.factors) == 7
    assert first.factors[1] == "flavor: spicy"
    assert first.factors[0] == UNKNOWN
    assert backend.calls == 1
    fresh = MockChatBackend(LlmBackendConfig())
    again = generate_profile(fresh, request, DEFAULT_FACTORS, ResponseCache(tmp_path / "cache"))
    assert again.factors == first.factors
    assert fresh.calls == 0


def test_generate_profile_repairs_once():
    names = DEFAULT_FACTORS.subset(1)
    backend = ScriptedBackend(["I cannot answer", '{"flavor": "sweet"}'])
    profile = generate_profile(backend, "prompt", names)
    assert profile.factors == ("sweet",)
    assert backend.calls == 2
    hopeless = ScriptedBackend(["nope", "still nope"])
    with pytest.raises(BackendError):
        generate_profile(hopeless, "prompt", names)


def test_profile_file_roundtrip(tmp_path):
    fs = DEFAULT_FACTORS.subset(0)
    profiles = [
        FactorProfile(EntityKind.item, 0, ("Greek",)),
        FactorProfile(EntityKind.user, 1, ("Thai",), (4, 5), 0.5),
        FactorProfile(EntityKind.user, 0, ("Korean",), (1,)),
    ]
    path = tmp_path / "profiles.jsonl"
    save_profiles(path, profiles, fs)
    loaded = load_profiles(path, fs)
    assert [(p.entity_kind, p.entity_index) for p in loaded] == [("user", 0), ("user", 1), ("item", 0)]
    assert loaded[1] == profiles[1]
    assert json.loads(path.read_text().splitlines()[0]) == {
        "kind": "user",
        "index": 0,
        "factors": {"cuisine type": "Korean"},
        "provenance": [1],
        "noise_ratio": 0.0,
    }
    with pytest.raises(DataFormatError):
        load_profiles(path, DEFAULT_FACTORS)


def test_run_jobs_keeps_order():
    jobs = [lambda n=n: n * n for n in range(20)]
    assert run_jobs(jobs, 1) == run_jobs(jobs, 4) == [n * n for n in range(20)]

    def fail():
        raise RpgError("job failed")

    with pytest.raises(RpgError, match="job failed"):
        run_jobs([fail, lambda: 1], 2)


def test_build_profiles():
    reviews = [
        review(u, i, f"The flavor was {taste}.", review_id=n)
        for n, (u, i, taste) in enumerate(
            [("a", "x", "sweet"), ("a", "y", "spicy"), ("b", "x", "sour"), ("b", "y", "sweet")]
        )
    ]
    id_map = IdMap.from_reviews(reviews)
    split = split_interactions(reviews, id_map=id_map)
    backend = MockChatBackend(LlmBackendConfig())
    settings = ProfileConfig(in_flight=2, noise_ratio=0.5)
    generator = ProfileGenerator(backend, DEFAULT_FACTORS, settings)
    profiles = build_profiles(generator, reviews, split, id_map)
    assert [(p.entity_kind, p.entity_index) for p in profiles] == [
        ("user", 0),
        ("user", 1),
        ("item", 0),
        ("item", 1),
    ]
    assert [p.noise_ratio for p in profiles] == [0.5, 0.5, 0.0, 0.0]
    item_x = profiles[2]
    assert item_x.factors[1] in {"flavor: sour sweet", "flavor: sweet sour", "flavor: sweet", "flavor: sour"}
    assert set(item_x.provenance) <= {0, 2}

    per_factor = ProfileGenerator(MockChatBackend(LlmBackendConfig()), DEFAULT_FACTORS, ProfileConfig(per_factor=True))
    single = per_factor.item_profile(0, reviews[:1])
    assert per_factor.backend.calls == 7
    assert single.factors[1] == "flavor: sweet"
    empty = per_factor.item_profile(1, [])
    assert empty.factors == (UNKNOWN,) * 7
