import hashlib
import json
import logging
import os
import threading
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
import openai

from .exceptions import ConfigError, DataIOError, EmbeddingFormatError, ReformError, ShapeError
from .llm import call_with_backoff
from .rpg import EntityKind, FactorProfile

logger = logging.getLogger(__name__)

MAGIC = "rfmemb1"
HASH_MOCK_DIM = 32
EXTERNAL_DIM = 768


class EncoderKind(StrEnum):
    file_import = "file_import"
    http_embeddings = "http_embeddings"
    hash_mock = "hash_mock"


class MissingProfileError(ReformError, KeyError):
    exit_code = 4

    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class EncoderProvider:
    kind: EncoderKind = EncoderKind.hash_mock
    dim: int = HASH_MOCK_DIM
    endpoint: str | None = None
    path: str | None = None
    model_name: str = "text-embedding-3-small"
    max_retries: int = 5
    timeout: float = 60.0
    api_key_env: str = "OPENAI_API_KEY"
    batch_size: int = 64


@dataclass(frozen=True, eq=False)
class ProfileMatrix:
    entity_kind: EntityKind
    entity_index: int
    matrix: np.ndarray


@dataclass(frozen=True, eq=False)
class ProfileStore:
    """Profile matrices of every user and item, shaped (count, M, d)"""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        if self.users.shape[1:] != self.items.shape[1:]:
            raise ShapeError(f"User {self.users.shape} and item {self.items.shape} profiles differ")

    @property
    def M(self) -> int:
        return self.users.shape[1]

    @property
    def d(self) -> int:
        return self.users.shape[2]

    @property
    def num_users(self) -> int:
        return self.users.shape[0]

    @property
    def num_items(self) -> int:
        return self.items.shape[0]

    def side(self, kind: EntityKind | str) -> np.ndarray:
        return self.users if EntityKind(kind) == EntityKind.user else self.items

    def matrix(self, kind: EntityKind | str, index: int) -> ProfileMatrix:
        table = self.side(kind)
        if not 0 <= index < len(table):
            raise MissingProfileError(f"No profile for {kind} {index}")
        return ProfileMatrix(EntityKind(kind), index, table[index])

    def mask_factor(self, m: int) -> "ProfileStore":
        if not 0 <= m < self.M:
            raise ShapeError(f"Factor index {m} outside [0, {self.M})")
        users, items = self.users.copy(), self.items.copy()
        users[:, m] = 0.0
        items[:, m] = 0.0
        return ProfileStore(users, items)

    def header(self) -> dict:
        return {
            "magic": MAGIC,
            "M": self.M,
            "d": self.d,
            "users": self.num_users,
            "items": self.num_items,
        }


def hash_vector(text: str, dim: int) -> np.ndarray:
    """Unit vector seeded by a 64-bit hash of `text`"""
    digest = hashlib.blake2b(text.encode("utf8"), digest_size=8).digest()
    vector = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    return vector / np.linalg.norm(vector)


def sentence_vector(output) -> np.ndarray:
    """One vector per text; token-level outputs are mean pooled"""
    array = np.asarray(output, dtype=np.float64)
    return array.mean(axis=0) if array.ndim == 2 else array


class TextEncoder:
    def __init__(self, provider: EncoderProvider):
        self.provider = provider
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(text: str) -> str:
        return hashlib.sha256(text.encode("utf8")).hexdigest()

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        with self._lock:
            todo = sorted({t for t in texts if self._key(t) not in self._cache})
        if todo:
            vectors = [sentence_vector(v) for v in self._embed(todo)]
            for text, vector in zip(todo, vectors):
                if vector.shape != (self.provider.dim,):
                    raise ShapeError(
                        f"Encoder returned {vector.shape[-1]}-dim vectors, "
                        f"config expects d={self.provider.dim}"
                    )
            with self._lock:
                for text, vector in zip(todo, vectors):
                    self._cache[self._key(text)] = vector
        with self._lock:
            return np.stack([self._cache[self._key(t)] for t in texts])

    def _embed(self, texts: list[str]) -> list:
        raise NotImplementedError

    def encode(self, profile: FactorProfile) -> np.ndarray:
        return self.encode_texts(profile.factors)


class HashMockEncoder(TextEncoder):
    def _embed(self, texts: list[str]) -> list:
        return [hash_vector(t, self.provider.dim) for t in texts]


class HttpEmbeddingEncoder(TextEncoder):
    def __init__(self, provider: EncoderProvider):
        super().__init__(provider)
        if not (api_key := os.getenv(provider.api_key_env)):
            raise ConfigError(f"Environment variable {provider.api_key_env} is not set")
        self.client = openai.OpenAI(
            api_key=api_key,
            base_url=provider.endpoint,
            timeout=provider.timeout,
            max_retries=0,
        )

    def _embed(self, texts: list[str]) -> list:
        out: list = []
        size = self.provider.batch_size
        for start in range(0, len(texts), size):
            response = call_with_backoff(
                self.client.embeddings.create,
                model=self.provider.model_name,
                input=texts[start : start + size],
                max_retries=self.provider.max_retries,
                what="embedding request",
            )
            out += [row.embedding for row in response.data]
        return out


class FileImportEncoder(TextEncoder):
    """Precomputed matrices looked up by entity rather than by text"""

    def __init__(self, provider: EncoderProvider):
        super().__init__(provider)
        if not provider.path:
            raise ConfigError("encoder.path is required for file_import")
        self.store = load_embedding_file(Path(provider.path), {"d": provider.dim})

    def encode(self, profile: FactorProfile) -> np.ndarray:
        matrix = self.store.matrix(profile.entity_kind, profile.entity_index).matrix
        if len(matrix) != len(profile.factors):
            raise ShapeError(f"Imported matrix has {len(matrix)} rows for {len(profile.factors)} factors")
        return matrix


def make_encoder(provider: EncoderProvider) -> TextEncoder:
    encoders = {
        EncoderKind.hash_mock: HashMockEncoder,
        EncoderKind.http_embeddings: HttpEmbeddingEncoder,
        EncoderKind.file_import: FileImportEncoder,
    }
    return encoders[EncoderKind(provider.kind)](provider)


def encode_profile(encoder: TextEncoder, profile: FactorProfile) -> ProfileMatrix:
    matrix = encoder.encode(profile)
    if not np.isfinite(matrix).all():
        raise ShapeError(f"Non-finite embedding for {profile.entity_kind} {profile.entity_index}")
    return ProfileMatrix(profile.entity_kind, profile.entity_index, matrix)


def encode_profiles(
    encoder: TextEncoder,
    profiles: Sequence[FactorProfile],
    num_users: int,
    num_items: int,
) -> ProfileStore:
    by_entity = {(p.entity_kind, p.entity_index): p for p in profiles}
    tables = []
    for kind, count in ((EntityKind.user, num_users), (EntityKind.item, num_items)):
        rows = []
        for index in range(count):
            if (profile := by_entity.get((kind, index))) is None:
                raise MissingProfileError(f"No profile for {kind} {index}")
            rows.append(encode_profile(encoder, profile).matrix)
        tables.append(np.stack(rows) if rows else np.zeros((0, 0, encoder.provider.dim)))
    if not len(tables[0]) or not len(tables[1]):
        m = max(t.shape[1] for t in tables)
        tables = [t if len(t) else np.zeros((0, m, encoder.provider.dim)) for t in tables]
    return ProfileStore(*tables)


def save_embedding_file(path: Path, store: ProfileStore, **meta) -> None:
    header = json.dumps({**store.header(), **meta}).encode("utf8") + b"\n"
    with path.open("wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(store.users, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(store.items, dtype="<f4").tobytes())


def load_embedding_file(path: Path, expected: dict | None = None) -> ProfileStore:
    """Read a header line plus little-endian f32 payload; `expected` pins header keys"""
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"Cannot read embedding file {path}: {e}") from e
    if (end := raw.find(b"\n")) < 0:
        raise EmbeddingFormatError(f"{path}: no header line")
    try:
        header = json.loads(raw[:end])
        M, d, n_users, n_items = (int(header[k]) for k in ("M", "d", "users", "items"))
    except (ValueError, KeyError, TypeError) as e:
        raise EmbeddingFormatError(f"{path}: invalid header: {e}") from e
    if header.get("magic") != MAGIC:
        raise EmbeddingFormatError(f"{path}: magic {header.get('magic')!r} != {MAGIC!r}")
    if diff := [
        f"{k}: expected {v!r}, found {header.get(k)!r}"
        for k, v in (expected or {}).items()
        if header.get(k) != v
    ]:
        raise EmbeddingFormatError(f"{path}: header mismatch ({'; '.join(diff)})")
    offset = end + 1
    size = 4 * M * d * (n_users + n_items)
    if len(raw) - offset != size:
        raise EmbeddingFormatError(
            f"{path}: payload must end at byte offset {offset + size}, "
            f"data ends at byte offset {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64)
    split = n_users * M * d
    store = ProfileStore(
        data[:split].reshape(n_users, M, d), data[split:].reshape(n_items, M, d)
    )
    if not np.isfinite(data).all():
        bad = offset + 4 * int(np.flatnonzero(~np.isfinite(data))[0])
        raise EmbeddingFormatError(f"{path}: non-finite value at byte offset {bad}")
    return store
