import csv
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .dataset import DatasetError, DataSplit, InteractionGraph
from .encoder import ProfileStore
from .exceptions import ReformError
from .graphconv import propagate
from .mfa import DEFAULT_KEY_CAP, Direction, Pooling, embed_all, mlp_forward
from .rpg import run_jobs
from .trainer import (
    AttentionKind,
    FitResult,
    ModelParams,
    TrainConfig,
    fit,
    fuse,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
VALIDATION_METRIC = "recall@20"


class EvaluationError(ReformError, ValueError):
    exit_code = 2


class AblationSpecError(EvaluationError):
    ...


class Variant(StrEnum):
    full = "full"
    avg_pool = "avg_pool"
    no_mfa_mlp = "no_mfa_mlp"
    mask_factor = "mask_factor"
    noise = "noise"


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    baseline: str | None = None
    key_cap: int = DEFAULT_KEY_CAP
    threads: int = 1
    chunk: int = 256

    def __post_init__(self):
        if not self.ks or min(self.ks) < 1:
            raise EvaluationError(f"eval.ks must be positive, got {self.ks}")
        if not self.seeds:
            raise EvaluationError("eval.seeds is empty")
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


def recall_at_k(ranked: Sequence[int], relevant: set[int], k: int) -> float:
    """Share of `relevant` inside the top k.

    Example::
        >>> recall_at_k([3, 1, 2], {1, 5}, 2)
        0.5
    """
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    if not relevant:
        return 0.0
    return len(set(list(ranked)[:k]) & relevant) / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: set[int], k: int) -> float:
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    if not relevant:
        return 0.0
    dcg = sum(1 / math.log2(p + 2) for p, item in enumerate(list(ranked)[:k]) if item in relevant)
    idcg = sum(1 / math.log2(p + 2) for p in range(min(k, len(relevant))))
    return dcg / idcg


def rank_items(scores: np.ndarray, exclude: np.ndarray | Sequence[int] = ()) -> np.ndarray:
    """Item indices by descending score, lower index first on ties"""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(exclude):
        order = order[~np.isin(order, exclude)]
    return order


@dataclass(frozen=True, eq=False)
class InferenceModel:
    """Fused vectors [e^g; e^a] of every user and item.

    Inference keys are always max pooled, whatever pooling the model trained with.
    """

    users: np.ndarray
    items: np.ndarray
    graph: InteractionGraph

    @classmethod
    def build(
        cls,
        params: ModelParams,
        graph: InteractionGraph,
        profiles: ProfileStore,
        cfg: TrainConfig,
        key_cap: int = DEFAULT_KEY_CAP,
    ) -> "InferenceModel":
        prop = propagate(graph, params.base, cfg.layers, cfg.include_layer0)
        if params.attention is AttentionKind.mfa:
            att_u, att_i = (
                embed_all(d, graph, profiles.users, profiles.items, params.proj, Pooling.max, key_cap)
                for d in (Direction.user_side, Direction.item_side)
            )
        else:
            att_u, _ = mlp_forward(params.tensors, "user", profiles.users)
            att_i, _ = mlp_forward(params.tensors, "item", profiles.items)
        return cls(fuse(prop.users, att_u), fuse(prop.items, att_i), graph)

    def scores(self, u: int) -> np.ndarray:
        return self.items @ self.users[u]

    def rank_all(self, u: int) -> np.ndarray:
        return rank_items(self.scores(u), self.graph.neighbors("user", u))

    def top_k(self, users: np.ndarray, k: int) -> list[np.ndarray]:
        scores = self.users[users] @ self.items.T
        out = []
        for row, u in zip(scores, users):
            row[self.graph.neighbors("user", int(u))] = -np.inf
            order = np.argsort(-row, kind="stable")[:k]
            out.append(order[np.isfinite(row[order])])
        return out


def user_metrics(
    model: InferenceModel,
    relevant: list[np.ndarray],
    ks: Sequence[int],
    threads: int = 1,
    chunk: int = 256,
) -> dict[str, float]:
    """Recall/NDCG means over users with a non-empty relevant set, in user order"""
    users = np.array([u for u, items in enumerate(relevant) if len(items)], dtype=np.int64)
    if not len(users):
        raise DatasetError("No user has held-out interactions to evaluate")
    k_max = max(ks)

    def job(batch: np.ndarray) -> np.ndarray:
        rows = []
        for u, ranked in zip(batch, model.top_k(batch, k_max)):
            truth = set(relevant[u].tolist())
            ranked = ranked.tolist()
            rows.append(
                [recall_at_k(ranked, truth, k) for k in ks] + [ndcg_at_k(ranked, truth, k) for k in ks]
            )
        return np.array(rows)

    chunks = [users[s : s + chunk] for s in range(0, len(users), chunk)]
    table = np.concatenate(run_jobs([lambda c=c: job(c) for c in chunks], threads))
    means = table.mean(axis=0).tolist()
    names = [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    return dict(zip(names, means))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value, df = n - 1"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or len(a) < 2:
        raise EvaluationError(f"Need two equal-length samples of size >= 2, got {a.shape} {b.shape}")
    diff = a - b
    mean, sd = diff.mean(), diff.std(ddof=1)
    if sd == 0:
        logger.warning("Paired differences have zero variance (mean %g)", mean)
        return 0.0 if mean != 0 else 1.0
    t = mean / (sd / math.sqrt(len(diff)))
    df = len(diff) - 1
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    return float(betainc(df / 2, 0.5, df / (df + t * t)))


@dataclass
class EvalReport:
    variant: str = Variant.full
    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)
    baseline: str | None = None
    x: float | None = None

    @property
    def metrics(self) -> list[str]:
        return list(next(iter(self.per_seed.values()), {}))

    @property
    def means(self) -> dict[str, float]:
        return {
            m: float(np.mean([row[m] for row in self.per_seed.values()])) for m in self.metrics
        }

    def series(self, metric: str) -> list[float]:
        return [self.per_seed[s][metric] for s in sorted(self.per_seed)]

    def compare(self, baseline: "EvalReport") -> None:
        self.baseline = baseline.variant
        shared = sorted(set(self.per_seed) & set(baseline.per_seed))
        if len(shared) < 2:
            logger.warning("p-values need at least two shared seeds, got %d", len(shared))
            return
        self.p_values = {
            m: paired_t_test(
                [self.per_seed[s][m] for s in shared], [baseline.per_seed[s][m] for s in shared]
            )
            for m in self.metrics
        }

    def rows(self, run_id: str) -> list[dict]:
        out = []
        for seed, values in sorted(self.per_seed.items()):
            for name, value in values.items():
                metric, k = name.split("@")
                out.append(
                    {
                        "run_id": run_id,
                        "variant": self.variant,
                        "seed": seed,
                        "metric": metric,
                        "K": int(k),
                        "value": value,
                    }
                )
        return out

    def summary(self) -> dict:
        return {
            "variant": str(self.variant),
            "x": self.x,
            "seeds": sorted(self.per_seed),
            "means": self.means,
            "baseline": self.baseline,
            "p_values": self.p_values,
        }


@dataclass
class Experiment:
    """Everything a train-then-test run needs"""

    graph: InteractionGraph
    split: DataSplit
    profiles: ProfileStore
    train: TrainConfig
    eval: EvalConfig = EvalConfig()
    out_dir: Path | None = None
    config_hash: str = ""
    progress: bool = False

    def with_train(self, **changes) -> "Experiment":
        return replace(self, train=replace(self.train, **changes))


def fit_model(experiment: Experiment, seed: int, run_dir: Path | None = None) -> FitResult:
    """Train one seed with early stopping; writes log and checkpoint into `run_dir`"""
    ex = experiment
    cfg = replace(ex.train, seed=seed)
    val = ex.split.items_by_user("val")
    if not any(len(v) for v in val):
        raise DatasetError("The validation split is empty; early stopping needs it")
    params = ModelParams.init(cfg, ex.split.num_users, ex.split.num_items, ex.profiles.d)

    def validate(p: ModelParams) -> float:
        model = InferenceModel.build(p, ex.graph, ex.profiles, cfg, ex.eval.key_cap)
        return user_metrics(model, val, (20,), ex.eval.threads, ex.eval.chunk)[VALIDATION_METRIC]

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    result = fit(
        params,
        ex.graph,
        ex.profiles,
        cfg,
        validate,
        run_dir / "train_log.jsonl" if run_dir else None,
        ex.config_hash,
        ex.progress,
    )
    if run_dir is not None:
        save_checkpoint(
            run_dir / "checkpoint.bin",
            result.params,
            config_hash=ex.config_hash,
            seed=seed,
            epoch=result.best_epoch,
            metric=result.best_metric,
        )
    return result


def held_out_metrics(experiment: Experiment, params: ModelParams) -> dict[str, float]:
    ex = experiment
    model = InferenceModel.build(params, ex.graph, ex.profiles, ex.train, ex.eval.key_cap)
    test = ex.split.items_by_user("test")
    return user_metrics(model, test, ex.eval.ks, ex.eval.threads, ex.eval.chunk)


def train_and_test(experiment: Experiment, seed: int, run_name: str = "full") -> dict[str, float]:
    run_dir = None
    if experiment.out_dir is not None:
        run_dir = experiment.out_dir / "runs" / run_name / f"seed_{seed}"
    result = fit_model(experiment, seed, run_dir)
    return held_out_metrics(experiment, result.params)


def evaluate(
    experiment: Experiment,
    seeds: Sequence[int] | None = None,
    variant: str = Variant.full,
    run_name: str | None = None,
) -> EvalReport:
    """Train and test once per seed; means are over users, then over seeds"""
    report = EvalReport(variant)
    for seed in seeds if seeds is not None else experiment.eval.seeds:
        logger.info("%s: seed %d", variant, seed)
        report.per_seed[int(seed)] = train_and_test(experiment, int(seed), run_name or str(variant))
    return report


@dataclass(frozen=True)
class AblationSpec:
    variant: Variant
    factor: int | None = None
    ratio: float | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise AblationSpecError(f"Unknown variant {self.variant!r}") from None
        if self.variant is Variant.mask_factor and self.factor is None:
            raise AblationSpecError("mask_factor needs a factor index")
        if self.variant is Variant.noise and not (self.ratio is not None and 0 <= self.ratio <= 1):
            raise AblationSpecError(f"noise needs a ratio in [0, 1], got {self.ratio}")

    @property
    def name(self) -> str:
        if self.variant is Variant.mask_factor:
            return f"mask_factor_{self.factor}"
        if self.variant is Variant.noise:
            return f"noise_{self.ratio:g}"
        return str(self.variant)


def apply_ablation(
    spec: AblationSpec,
    experiment: Experiment,
    regenerate: Callable[[float], ProfileStore] | None = None,
) -> Experiment:
    match spec.variant:
        case Variant.full:
            return experiment
        case Variant.avg_pool:
            return experiment.with_train(pooling=Pooling.avg)
        case Variant.no_mfa_mlp:
            return experiment.with_train(attention=AttentionKind.mlp)
        case Variant.mask_factor:
            m = spec.factor
            if m is None or not 0 <= m < experiment.profiles.M:
                raise AblationSpecError(f"Factor index {m} outside [0, {experiment.profiles.M})")
            return replace(experiment, profiles=experiment.profiles.mask_factor(m))
        case Variant.noise:
            if regenerate is None:
                raise AblationSpecError("The noise variant needs profiles regenerated from reviews")
            return replace(experiment, profiles=regenerate(float(spec.ratio or 0.0)))
    raise AblationSpecError(f"Unknown variant {spec.variant!r}")


def run_ablation(
    spec: AblationSpec,
    experiment: Experiment,
    regenerate: Callable[[float], ProfileStore] | None = None,
) -> EvalReport:
    report = evaluate(apply_ablation(spec, experiment, regenerate), variant=spec.name, run_name=spec.name)
    report.x = spec.ratio if spec.variant is Variant.noise else None
    return report


def sweep_n(experiment: Experiment, n_values: Sequence[int] = (1, 2, 3, 4, 5)) -> list[EvalReport]:
    """One report per key count n, with `x` = n"""
    reports = []
    for n in n_values:
        report = evaluate(experiment.with_train(n_keys=int(n)), run_name=f"n_{n}")
        report.x = float(n)
        reports.append(report)
    return reports


def noise_curve(
    experiment: Experiment,
    ratios: Sequence[float],
    regenerate: Callable[[float], ProfileStore],
) -> list[EvalReport]:
    return [
        run_ablation(AblationSpec(Variant.noise, ratio=float(r)), experiment, regenerate)
        for r in ratios
    ]


def plot_rows(reports: Sequence[EvalReport]) -> list[dict]:
    return [
        {"x": r.x, "metric": metric, "value": value}
        for r in reports
        for metric, value in r.means.items()
    ]


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with path.open("w", newline="", encoding="utf8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


METRIC_COLUMNS = ("run_id", "variant", "seed", "metric", "K", "value")
PLOT_COLUMNS = ("x", "metric", "value")


def write_reports(
    out_dir: Path,
    run_id: str,
    reports: Sequence[EvalReport],
    config_hash: str,
    plot: bool = False,
    **extra,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [row for r in reports for row in r.rows(run_id)]
    write_csv(out_dir / "metrics.csv", rows, METRIC_COLUMNS)
    summary = {"run_id": run_id, "config_hash": config_hash, "reports": [r.summary() for r in reports], **extra}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), "utf8")
    if plot:
        write_csv(out_dir / "plot.csv", plot_rows(reports), PLOT_COLUMNS)
