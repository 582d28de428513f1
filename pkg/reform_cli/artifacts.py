import json
from dataclasses import dataclass
from pathlib import Path

from .dataset import DataSplit, IdMap
from .encoder import ProfileStore, load_embedding_file
from .exceptions import ConfigError
from .rpg import FactorProfile, FactorSet, load_profiles


@dataclass(frozen=True)
class Artifacts:
    """Layout of one output directory, shared by every command"""

    root: Path

    @property
    def id_map(self) -> Path:
        return self.root / "id_map.json"

    @property
    def split(self) -> Path:
        return self.root / "split.tsv"

    @property
    def stats(self) -> Path:
        return self.root / "stats.json"

    @property
    def profiles(self) -> Path:
        return self.root / "profiles.jsonl"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings.bin"

    @property
    def cache_dir(self) -> Path:
        return self.root / "cache"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint.bin"

    @property
    def train_log(self) -> Path:
        return self.root / "train_log.jsonl"

    def reports(self, name: str) -> Path:
        return self.root / "reports" / name

    def profiles_for(self, noise_ratio: float) -> Path:
        if not noise_ratio:
            return self.profiles
        return self.root / f"profiles_noise_{noise_ratio:g}.jsonl"

    def embeddings_for(self, noise_ratio: float) -> Path:
        if not noise_ratio:
            return self.embeddings
        return self.root / f"embeddings_noise_{noise_ratio:g}.bin"

    @staticmethod
    def require(path: Path, command: str) -> Path:
        if not path.exists():
            raise ConfigError(f"Missing {path}; run `reform {command}` first")
        return path

    def write_json(self, path: Path, data: dict) -> None:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf8")

    def load_id_map(self) -> IdMap:
        return IdMap.load(self.require(self.id_map, "ingest"))

    def load_split(self) -> DataSplit:
        id_map = self.load_id_map()
        path = self.require(self.split, "ingest")
        return DataSplit.load_tsv(path, id_map.num_users, id_map.num_items)

    def load_profiles(self, factor_set: FactorSet, noise_ratio: float = 0.0) -> list[FactorProfile]:
        return load_profiles(self.require(self.profiles_for(noise_ratio), "profile"), factor_set)

    def load_store(self, expected: dict | None = None, noise_ratio: float = 0.0) -> ProfileStore:
        return load_embedding_file(self.require(self.embeddings_for(noise_ratio), "encode"), expected)
