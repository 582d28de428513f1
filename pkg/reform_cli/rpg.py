import json
import logging
import re
import tomllib
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from string import Template
from typing import TypeVar

import anyio
import anyio.to_thread
import numpy as np
from tqdm import tqdm

from .dataset import DataSplit, IdMap, Review
from .exceptions import BackendError, DataFormatError, ReformError
from .llm import UNKNOWN, ChatBackend, ChatRequest, ResponseCache, estimate_tokens
from .seeding import NOISE, PROFILE, substream

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_N_MAX = 100
DEFAULT_MAX_PROMPT_TOKENS = 100_000


class EntityKind(StrEnum):
    user = "user"
    item = "item"


class FactorSetError(ReformError, ValueError):
    exit_code = 2


class RpgError(ReformError, ValueError):
    exit_code = 2


class ProfileParseError(ValueError):
    ...


@dataclass(frozen=True)
class FactorSet:
    names: tuple[str, ...]
    descriptions: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise FactorSetError("A factor set needs at least one factor")
        if len(self.names) != len(self.descriptions):
            raise FactorSetError("Every factor needs exactly one description")
        if len(set(self.names)) != len(self.names) or not all(self.names):
            raise FactorSetError(f"Factor names must be unique and non-empty: {self.names}")

    @property
    def M(self) -> int:
        return len(self.names)

    def index(self, factor: str | int) -> int:
        """Position of a factor given by name or by index"""
        if isinstance(factor, int) or factor.isdigit():
            m = int(factor)
            if not 0 <= m < self.M:
                raise FactorSetError(f"Factor index {m} outside [0, {self.M})")
            return m
        try:
            return self.names.index(factor)
        except ValueError:
            raise FactorSetError(f"Unknown factor {factor!r}; choose from {self.names}") from None

    def subset(self, m: int) -> "FactorSet":
        return FactorSet((self.names[m],), (self.descriptions[m],))

    @classmethod
    def load(cls, path: Path) -> "FactorSet":
        """TOML file with one `[[factor]]` table (name, description) per factor"""
        try:
            data = tomllib.loads(path.read_text("utf8"))
            rows = data["factor"]
            return cls(
                tuple(str(r["name"]) for r in rows),
                tuple(str(r["description"]) for r in rows),
            )
        except (OSError, tomllib.TOMLDecodeError, KeyError, TypeError) as e:
            raise FactorSetError(f"Invalid factor set file {path}: {e}") from e


DEFAULT_FACTORS = FactorSet(
    names=(
        "cuisine type",
        "flavor",
        "atmosphere",
        "price",
        "time",
        "waiting",
        "companion",
    ),
    descriptions=(
        "The specific types of food offered appeal to users' preferences and dietary restrictions.",
        "The tastes and seasoning styles that satisfy, such as spicy, sweet, savory or mild dishes.",
        "The ambience, decor, noise level and overall mood of the place.",
        "The price range and the sense of value for money.",
        "The times of day, days of the week or occasions of the visits.",
        "Tolerance for waiting times, queues, reservations and speed of service.",
        "Who the meal is shared with, such as family, friends, a partner, colleagues or nobody.",
    ),
)


@dataclass(frozen=True)
class FactorProfile:
    entity_kind: EntityKind
    entity_index: int
    factors: tuple[str, ...]
    provenance: tuple[int, ...] = ()
    noise_ratio: float = 0.0

    def to_json(self, factor_set: FactorSet) -> dict:
        return {
            "kind": str(self.entity_kind),
            "index": self.entity_index,
            "factors": dict(zip(factor_set.names, self.factors)),
            "provenance": list(self.provenance),
            "noise_ratio": self.noise_ratio,
        }

    @classmethod
    def from_json(cls, obj: dict, factor_set: FactorSet) -> "FactorProfile":
        factors = obj["factors"]
        if list(factors) != list(factor_set.names):
            raise DataFormatError(
                f"Profile factors {list(factors)} do not match {list(factor_set.names)}"
            )
        return cls(
            EntityKind(obj["kind"]),
            int(obj["index"]),
            tuple(str(v) for v in factors.values()),
            tuple(int(i) for i in obj.get("provenance", ())),
            float(obj.get("noise_ratio", 0.0)),
        )


def save_profiles(path: Path, profiles: Sequence[FactorProfile], factor_set: FactorSet) -> None:
    ordered = sorted(profiles, key=lambda p: (p.entity_kind != EntityKind.user, p.entity_index))
    lines = [json.dumps(p.to_json(factor_set), ensure_ascii=False) for p in ordered]
    path.write_text("".join(line + "\n" for line in lines), "utf8")


def load_profiles(path: Path, factor_set: FactorSet) -> list[FactorProfile]:
    try:
        lines = path.read_text("utf8").splitlines()
        return [FactorProfile.from_json(json.loads(s), factor_set) for s in lines if s.strip()]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"Invalid profile file {path}: {e}") from e


def sample_user_reviews(
    reviews: Sequence[Review], n_max: int = DEFAULT_N_MAX, seed: int = 0, entity: int = 0
) -> list[Review]:
    """Uniform sample without replacement, kept in corpus order"""
    if len(reviews) <= n_max:
        return list(reviews)
    rng = substream(seed, PROFILE, entity)
    picked = np.sort(rng.choice(len(reviews), size=n_max, replace=False))
    return [reviews[n] for n in picked]


def sample_item_reviews(reviews: Sequence[Review], n_max: int = DEFAULT_N_MAX) -> list[Review]:
    """Longest reviews first, ties by review id"""
    return sorted(reviews, key=lambda r: (-len(r.text), r.review_id))[:n_max]


def inject_noise(
    own: Sequence[Review],
    pool: Sequence[Review],
    ratio: float,
    seed: int = 0,
    entity: int = 0,
) -> list[Review]:
    """Swap round(ratio * |own|) of `own` for reviews written by other users"""
    if not 0.0 <= ratio <= 1.0:
        raise RpgError(f"Noise ratio must lie in [0, 1], got {ratio}")
    count = int(np.floor(ratio * len(own) + 0.5))
    if not count:
        return list(own)
    rng = substream(seed, NOISE, entity)
    owners = {r.user_id for r in own}
    # Oversample then reject the owners' reviews; fall back to a full scan if short
    draw = min(len(pool), 2 * count + 16)
    candidates = [pool[n] for n in rng.choice(len(pool), size=draw, replace=False)] if draw else []
    candidates = [r for r in candidates if r.user_id not in owners]
    if len(candidates) < count:
        candidates = [r for r in pool if r.user_id not in owners]
    if not candidates:
        raise RpgError("Noise pool has no reviews from other users")
    with_replacement = len(candidates) < count
    if with_replacement:
        logger.warning(
            "Noise pool has %d reviews for %d replacements, sampling with replacement",
            len(candidates),
            count,
        )
    picks = rng.choice(len(candidates), size=count, replace=with_replacement)
    slots = rng.choice(len(own), size=count, replace=False)
    out = list(own)
    for slot, pick in zip(slots, picks):
        out[slot] = candidates[pick]
    return out


ROLE_PREAMBLES = {
    EntityKind.user: (
        "You are analysing restaurant reviews written by a single user. For each factor "
        "below, describe what this user prefers, using only evidence found in the reviews."
    ),
    EntityKind.item: (
        "You are analysing reviews written about a single restaurant. For each factor "
        "below, describe the restaurant as its reviewers evaluated it, using only evidence "
        "found in the reviews."
    ),
}

DEFAULT_TEMPLATE = """$role

Factors:
$factors

Reviews:
$reviews

$format
"""


def format_directive(factor_set: FactorSet) -> str:
    keys = ", ".join(json.dumps(name) for name in factor_set.names)
    return (
        f"Answer with only a JSON object with exactly these keys: {keys}. Each value is "
        f'a short description. Use "{UNKNOWN}" when the reviews give no evidence.'
    )


def _render(
    template: str, factor_set: FactorSet, reviews: Sequence[Review], kind: EntityKind
) -> str:
    factors = "\n".join(f"- {n}: {d}" for n, d in zip(factor_set.names, factor_set.descriptions))
    block = "\n".join(f"<review>\n{r.text.strip()}\n</review>" for r in reviews)
    return Template(template).substitute(
        role=ROLE_PREAMBLES[EntityKind(kind)],
        factors=factors,
        reviews=block,
        format=format_directive(factor_set),
    )


def build_request(
    factor_set: FactorSet,
    reviews: Sequence[Review],
    entity_kind: EntityKind | str,
    template: str = DEFAULT_TEMPLATE,
    max_tokens: int = DEFAULT_MAX_PROMPT_TOKENS,
) -> ChatRequest:
    if not reviews:
        raise RpgError("Cannot build a prompt without reviews")
    kind = EntityKind(entity_kind)
    n = len(reviews)
    prompt = _render(template, factor_set, reviews, kind)
    while n > 1 and estimate_tokens(prompt) > max_tokens:
        n -= 1
        prompt = _render(template, factor_set, reviews[:n], kind)
    if n < len(reviews):
        logger.warning("Prompt over %d tokens, kept %d of %d reviews", max_tokens, n, len(reviews))
    return ChatRequest(
        ({"role": "user", "content": prompt},),
        factor_set.names,
        tuple(r.text for r in reviews[:n]),
    )


def build_prompt(
    factor_set: FactorSet,
    reviews: Sequence[Review],
    entity_kind: EntityKind | str,
    template: str = DEFAULT_TEMPLATE,
    max_tokens: int = DEFAULT_MAX_PROMPT_TOKENS,
) -> str:
    return build_request(factor_set, reviews, entity_kind, template, max_tokens).text


def parse_response(reply: str, factor_set: FactorSet) -> tuple[str, ...]:
    """Factor descriptions in factor-set order; missing keys become the sentinel"""
    if (match := re.search(r"\{.*\}", reply, re.DOTALL)) is None:
        raise ProfileParseError("no JSON object in response")
    try:
        obj = json.loads(match.group(0))
    except json.JSONDecodeError as e:
        raise ProfileParseError(str(e)) from e
    if not isinstance(obj, dict):
        raise ProfileParseError("response is not a JSON object")
    lowered = {str(k).strip().lower(): v for k, v in obj.items()}
    factors, missing = [], []
    for name in factor_set.names:
        value = lowered.get(name.lower())
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        if value is None or not str(value).strip():
            missing.append(name)
            value = UNKNOWN
        factors.append(str(value).strip())
    if missing:
        logger.warning("Profile response has no usable %s, using %r", missing, UNKNOWN)
    return tuple(factors)


def repair_instruction(factor_set: FactorSet) -> str:
    return "Your previous answer could not be parsed. " + format_directive(factor_set)


def _ask(backend: ChatBackend, request: ChatRequest, cache: ResponseCache | None) -> str:
    if cache is None:
        return backend.complete(request)
    key = ResponseCache.key(backend.tag, json.dumps(request.messages))
    reply, _ = cache.get_or_create(key, lambda: backend.complete(request))
    return reply


def generate_profile(
    backend: ChatBackend,
    prompt: str | ChatRequest,
    factor_set: FactorSet,
    cache: ResponseCache | None = None,
    kind: EntityKind = EntityKind.user,
    index: int = 0,
    provenance: tuple[int, ...] = (),
    noise_ratio: float = 0.0,
) -> FactorProfile:
    if isinstance(prompt, ChatRequest):
        request = prompt
    else:
        request = ChatRequest(({"role": "user", "content": prompt},), factor_set.names)
    reply = _ask(backend, request, cache)
    try:
        factors = parse_response(reply, factor_set)
    except ProfileParseError as e:
        logger.warning("Unparseable profile for %s %d (%s), asking once more", kind, index, e)
        repair = ChatRequest(
            request.messages
            + (
                {"role": "assistant", "content": reply},
                {"role": "user", "content": repair_instruction(factor_set)},
            ),
            request.factor_names,
            request.reviews,
        )
        reply = _ask(backend, repair, cache)
        try:
            factors = parse_response(reply, factor_set)
        except ProfileParseError as e2:
            raise BackendError(f"Unparseable profile for {kind} {index}: {e2}") from e2
    return FactorProfile(kind, index, factors, provenance, noise_ratio)


@dataclass(frozen=True)
class ProfileConfig:
    n_max: int = DEFAULT_N_MAX
    noise_ratio: float = 0.0
    per_factor: bool = False
    template: str | None = None
    max_prompt_tokens: int = DEFAULT_MAX_PROMPT_TOKENS
    in_flight: int = 4


class ProfileGenerator:
    def __init__(
        self,
        backend: ChatBackend,
        factor_set: FactorSet,
        settings: ProfileConfig = ProfileConfig(),
        cache: ResponseCache | None = None,
        seed: int = 0,
    ):
        self.backend = backend
        self.factor_set = factor_set
        self.settings = settings
        self.cache = cache
        self.seed = seed
        template = settings.template
        self.template = Path(template).read_text("utf8") if template else DEFAULT_TEMPLATE

    def user_profile(
        self, index: int, reviews: Sequence[Review], pool: Sequence[Review] = ()
    ) -> FactorProfile:
        sampled = sample_user_reviews(reviews, self.settings.n_max, self.seed, index)
        ratio = self.settings.noise_ratio
        if ratio > 0:
            sampled = inject_noise(sampled, pool, ratio, self.seed, index)
        return self._generate(EntityKind.user, index, sampled, ratio)

    def item_profile(self, index: int, reviews: Sequence[Review]) -> FactorProfile:
        sampled = sample_item_reviews(reviews, self.settings.n_max)
        return self._generate(EntityKind.item, index, sampled, 0.0)

    def _generate(
        self, kind: EntityKind, index: int, reviews: list[Review], ratio: float
    ) -> FactorProfile:
        if not reviews:
            logger.debug("%s %d has no training reviews", kind, index)
            return FactorProfile(kind, index, (UNKNOWN,) * self.factor_set.M, (), ratio)
        fs = self.factor_set
        parts = [fs.subset(m) for m in range(fs.M)] if self.settings.per_factor else [fs]
        factors: list[str] = []
        provenance: tuple[int, ...] = ()
        for part in parts:
            request = build_request(
                part, reviews, kind, self.template, self.settings.max_prompt_tokens
            )
            provenance = tuple(r.review_id for r in reviews[: len(request.reviews)])
            factors += generate_profile(self.backend, request, part, self.cache, kind, index).factors
        return FactorProfile(kind, index, tuple(factors), provenance, ratio)


def run_jobs(
    jobs: Sequence[Callable[[], T]], in_flight: int = 1, desc: str | None = None
) -> list[T]:
    """Run jobs in worker threads, at most `in_flight` at once; results keep job order"""
    bar = tqdm(total=len(jobs), desc=desc, disable=desc is None, leave=False)
    if in_flight <= 1:
        out = []
        for job in jobs:
            out.append(job())
            bar.update()
        bar.close()
        return out

    results: list = [None] * len(jobs)

    async def main() -> None:
        limiter = anyio.CapacityLimiter(in_flight)

        async def run(n: int, job: Callable[[], T]) -> None:
            results[n] = await anyio.to_thread.run_sync(job, limiter=limiter)
            bar.update()

        async with anyio.create_task_group() as tg:
            for n, job in enumerate(jobs):
                tg.start_soon(run, n, job)

    try:
        anyio.run(main)
    except BaseExceptionGroup as group:
        first: BaseException = group
        while isinstance(first, BaseExceptionGroup):
            first = first.exceptions[0]
        raise first from None
    finally:
        bar.close()
    return results


def build_profiles(
    generator: ProfileGenerator,
    reviews: Sequence[Review],
    split: DataSplit,
    id_map: IdMap,
    progress: bool = False,
) -> list[FactorProfile]:
    """User and item profiles from the reviews behind TRAIN interactions"""
    train = {tuple(p) for p in split.train.tolist()}
    user_reviews: list[list[Review]] = [[] for _ in range(split.num_users)]
    item_reviews: list[list[Review]] = [[] for _ in range(split.num_items)]
    pool: list[Review] = []
    for r in reviews:
        u, i = id_map.users.get(r.user_id), id_map.items.get(r.item_id)
        if u is None or i is None or (u, i) not in train:
            continue
        user_reviews[u].append(r)
        item_reviews[i].append(r)
        pool.append(r)
    jobs: list[Callable[[], FactorProfile]] = [
        lambda u=u: generator.user_profile(u, user_reviews[u], pool)
        for u in range(split.num_users)
    ]
    jobs += [lambda i=i: generator.item_profile(i, item_reviews[i]) for i in range(split.num_items)]
    desc = "profiles" if progress else None
    return run_jobs(jobs, generator.settings.in_flight, desc)
