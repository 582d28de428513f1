"""Synthetic review corpora with planted factor preferences.

Every user cares about one dominant factor and prefers one value of it; items carry
one value per factor. A user interacts with matching items far more often than with
the rest, and each review names the dominant factor and the item's value for it, so
profiles built from these reviews expose the planted signal.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .rpg import DEFAULT_FACTORS
from .seeding import SYNTH, substream

logger = logging.getLogger(__name__)

VOCABULARY = {
    "cuisine type": ("greek", "italian", "korean", "mexican", "thai", "french"),
    "flavor": ("spicy", "sweet", "savory", "sour", "smoky", "mild"),
    "atmosphere": ("cozy", "lively", "quiet", "romantic", "rustic", "modern"),
    "price": ("cheap", "affordable", "pricey", "expensive", "moderate", "bargain"),
    "time": ("breakfast", "lunch", "dinner", "brunch", "latenight", "weekend"),
    "waiting": ("instant", "short", "long", "endless", "reasonable", "brief"),
    "companion": ("family", "friends", "date", "coworkers", "solo", "kids"),
}


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 200
    num_items: int = 300
    factors: tuple[str, ...] = DEFAULT_FACTORS.names
    values_per_factor: int = 4
    # Share of users whose dominant factor is each key
    dominant: dict[str, float] = field(
        default_factory=lambda: {"cuisine type": 0.7, "flavor": 0.3}
    )
    interactions_per_user: int = 20
    # Share of a user's expected interactions drawn from non-matching items
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if min(self.num_users, self.num_items, self.values_per_factor, self.interactions_per_user) < 1:
            raise ConfigError("synth counts must be positive")
        if not 0 <= self.noise_rate <= 1:
            raise ConfigError(f"synth.noise_rate must be in [0, 1], got {self.noise_rate}")
        if unknown := set(self.dominant) - set(self.factors):
            raise ConfigError(f"Dominant factors not in the factor list: {sorted(unknown)}")
        weights = list(self.dominant.values())
        if not weights or min(weights) < 0 or sum(weights) <= 0:
            raise ConfigError(f"Invalid dominant-factor distribution: {self.dominant}")


def factor_values(factor: str, count: int) -> list[str]:
    words = VOCABULARY.get(factor, ())
    if count <= len(words):
        return list(words[:count])
    stem = factor.split()[-1]
    return list(words) + [f"{stem}{v}" for v in range(len(words), count)]


@dataclass
class SynthDataset:
    config: SynthConfig
    reviews: list[dict]
    dominant: list[str]
    preferred: list[str]
    attributes: np.ndarray  # (items, M) value indices
    pairs: np.ndarray  # (n, 2) user, item
    expected_interactions: float

    @property
    def planted_factors(self) -> list[str]:
        return sorted(set(self.dominant))

    def truth(self) -> dict:
        cfg = self.config
        values = {f: factor_values(f, cfg.values_per_factor) for f in cfg.factors}
        return {
            "config": asdict(cfg),
            "planted_factors": self.planted_factors,
            "never_planted": [f for f in cfg.factors if f not in cfg.dominant],
            "expected_interactions": self.expected_interactions,
            "interactions": len(self.pairs),
            "users": {
                user_id(u): {"dominant": d, "preferred": p}
                for u, (d, p) in enumerate(zip(self.dominant, self.preferred))
            },
            "items": {
                item_id(i): {f: values[f][v] for f, v in zip(cfg.factors, row)}
                for i, row in enumerate(self.attributes.tolist())
            },
        }

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        reviews = out_dir / "reviews.jsonl"
        reviews.write_text("".join(json.dumps(r) + "\n" for r in self.reviews), "utf8")
        truth = out_dir / "synth_truth.json"
        truth.write_text(json.dumps(self.truth(), indent=2), "utf8")
        return reviews, truth


def user_id(u: int) -> str:
    return f"u{u:04d}"


def item_id(i: int) -> str:
    return f"i{i:04d}"


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = substream(cfg.seed, SYNTH)
    m_count, v_count = len(cfg.factors), cfg.values_per_factor
    values = [factor_values(f, v_count) for f in cfg.factors]
    attributes = rng.integers(v_count, size=(cfg.num_items, m_count))

    names = list(cfg.dominant)
    weights = np.array([cfg.dominant[n] for n in names], dtype=np.float64)
    dominant_idx = rng.choice(len(names), size=cfg.num_users, p=weights / weights.sum())
    preferred_idx = rng.integers(v_count, size=cfg.num_users)

    k, noise = cfg.interactions_per_user, cfg.noise_rate
    reviews: list[dict] = []
    pairs: list[tuple[int, int]] = []
    expected = 0.0
    for u in range(cfg.num_users):
        m = cfg.factors.index(names[dominant_idx[u]])
        match = attributes[:, m] == preferred_idx[u]
        n_match = int(match.sum())
        n_other = cfg.num_items - n_match
        p_match = min(1.0, (1 - noise) * k / n_match) if n_match else 0.0
        p_other = min(1.0, noise * k / n_other) if n_other else 0.0
        expected += p_match * n_match + p_other * n_other
        chosen = np.flatnonzero(rng.random(cfg.num_items) < np.where(match, p_match, p_other))
        for i in chosen.tolist():
            value = values[m][attributes[i, m]]
            reviews.append(
                {
                    "user_id": user_id(u),
                    "item_id": item_id(i),
                    "text": f"The {cfg.factors[m]} was {value}. Would come back.",
                    "rating": 5.0 if match[i] else 3.0,
                    "timestamp": len(reviews),
                }
            )
            pairs.append((u, i))
    logger.info("Generated %d interactions (expected %.1f)", len(pairs), expected)
    return SynthDataset(
        cfg,
        reviews,
        [names[d] for d in dominant_idx],
        [values[cfg.factors.index(names[d])][p] for d, p in zip(dominant_idx, preferred_idx)],
        attributes,
        np.array(pairs, dtype=np.int64).reshape(-1, 2),
        expected,
    )
