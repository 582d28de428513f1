import importlib.metadata
import logging
from dataclasses import replace
from pathlib import Path

import typer
from rich.logging import RichHandler
from typer import Exit, Option, echo, secho

from .artifacts import Artifacts
from .config import RunConfig, load_bool, load_config, require_path, with_runtime
from .dataset import (
    DatasetError,
    IdMap,
    build_graph,
    dataset_stats,
    k_core_filter,
    load_reviews,
    split_interactions,
)
from .encoder import EncoderKind, encode_profiles, make_encoder, save_embedding_file
from .evaluation import (
    AblationSpec,
    EvalReport,
    Experiment,
    Variant,
    evaluate,
    fit_model,
    held_out_metrics,
    noise_curve,
    run_ablation,
    sweep_n,
    write_csv,
    write_reports,
)
from .exceptions import EXIT_CODES, ReformError, ShapeError
from .llm import BackendKind, ResponseCache, make_backend
from .rpg import DEFAULT_FACTORS, FactorSet, ProfileGenerator, build_profiles, save_profiles
from .synth import generate
from .trainer import load_checkpoint

__version__ = importlib.metadata.version(Path(__file__).parent.name)

EPILOG = "Exit codes: " + "; ".join(f"{code} {text}" for code, text in EXIT_CODES.items())

cli = typer.Typer(epilog=EPILOG, no_args_is_help=True)

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    root = logging.getLogger("reform_cli")
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        root.addHandler(RichHandler(show_path=False))
    root.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


def parse_list(text: str, kind=float) -> list:
    """Comma separated values.

    Example::
        >>> parse_list("1,2, 3", int)
        [1, 2, 3]
    """
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        secho(f"Invalid list: {text!r}", fg="red")
        raise Exit(2) from None


def factor_set_of(cfg: RunConfig) -> FactorSet:
    if cfg.data.factors:
        return FactorSet.load(require_path(cfg.data.factors, "data.factors"))
    return DEFAULT_FACTORS


class Stage:
    """One command: `plan` lists the steps, `execute` performs them"""

    def __init__(self, cfg: RunConfig, dry=False):
        self.cfg = cfg
        self.dry = dry
        self.artifacts = Artifacts(cfg.out_dir)
        self.progress = not load_bool("REFORM_NO_PROGRESS")

    def plan(self) -> list[str]:
        raise NotImplementedError

    def execute(self) -> None:
        raise NotImplementedError

    def run(self) -> None:
        for step in self.plan():
            echo(f"--> {step}")
        if self.dry:
            return
        try:
            self.artifacts.root.mkdir(parents=True, exist_ok=True)
            self.execute()
        except ReformError as e:
            secho(f"{type(e).__name__}: {e}", fg="red", err=True)
            raise Exit(e.exit_code) from e

    def experiment(self, noise_ratio: float = 0.0) -> Experiment:
        split = self.artifacts.load_split()
        factor_set = factor_set_of(self.cfg)
        expected = {"M": factor_set.M}
        if self.cfg.encoder.kind != EncoderKind.file_import:
            expected["d"] = self.cfg.encoder.dim
        store = self.artifacts.load_store(expected, noise_ratio)
        if (store.num_users, store.num_items) != (split.num_users, split.num_items):
            raise ShapeError(
                f"Embeddings cover {store.num_users} users / {store.num_items} items, "
                f"the split has {split.num_users} / {split.num_items}; re-run `reform encode`"
            )
        return Experiment(
            build_graph(split),
            split,
            store,
            self.cfg.train,
            self.cfg.eval,
            self.artifacts.root,
            self.cfg.hash,
            self.progress,
        )


class Ingest(Stage):
    def plan(self) -> list[str]:
        d = self.cfg.data
        return [
            f"load {d.format} reviews from {d.reviews}",
            f"{d.k_core}-core filter",
            f"split {':'.join(map(str, d.ratios))} with seed {self.cfg.seed}",
            f"write id map, split and stats to {self.artifacts.root}",
        ]

    def execute(self) -> None:
        d, a = self.cfg.data, self.artifacts
        loaded = load_reviews(require_path(d.reviews, "data.reviews"), d.format)
        if loaded.malformed:
            secho(f"Skipped {loaded.malformed} malformed line(s)", fg="yellow")
        filtered = k_core_filter(loaded.reviews, d.k_core)
        if not filtered:
            raise DatasetError(f"Nothing survives {d.k_core}-core filtering")
        id_map = IdMap.from_reviews(filtered)
        split = split_interactions(filtered, d.ratios, self.cfg.seed, id_map)
        build_graph(split)
        id_map.save(a.id_map)
        split.save_tsv(a.split)
        stats = dataset_stats(loaded.reviews, filtered, split, d.k_core)
        stats |= {"malformed": loaded.malformed, "seed": self.cfg.seed, "config_hash": self.cfg.hash}
        a.write_json(a.stats, stats)
        secho(
            f"{stats['users']} users, {stats['items']} items, {stats['interactions']} interactions",
            fg="green",
        )


class Profile(Stage):
    def __init__(self, cfg: RunConfig, noise_ratio: float | None = None, dry=False):
        if noise_ratio is not None:
            cfg = replace(cfg, profile=replace(cfg.profile, noise_ratio=noise_ratio))
        super().__init__(cfg, dry)

    @property
    def noise_ratio(self) -> float:
        return self.cfg.profile.noise_ratio

    def plan(self) -> list[str]:
        c = self.cfg
        return [
            f"sample up to {c.profile.n_max} train reviews per user and item"
            + (f", user noise ratio {self.noise_ratio:g}" if self.noise_ratio else ""),
            f"ask the {c.llm.kind} backend ({c.llm.model_name}) for factor profiles",
            f"write {self.artifacts.profiles_for(self.noise_ratio)}",
        ]

    def execute(self) -> None:
        c, a = self.cfg, self.artifacts
        loaded = load_reviews(require_path(c.data.reviews, "data.reviews"), c.data.format)
        split, id_map = a.load_split(), a.load_id_map()
        factor_set = factor_set_of(c)
        backend = make_backend(c.llm)
        generator = ProfileGenerator(
            backend, factor_set, c.profile, ResponseCache(a.cache_dir), c.seed
        )
        profiles = build_profiles(generator, loaded.reviews, split, id_map, self.progress)
        save_profiles(a.profiles_for(self.noise_ratio), profiles, factor_set)
        secho(
            f"{len(profiles)} profiles; {backend.calls} backend call(s), "
            f"~{backend.tokens} tokens",
            fg="green",
        )


class Encode(Stage):
    def __init__(self, cfg: RunConfig, noise_ratio: float = 0.0, dry=False):
        self.noise_ratio = noise_ratio
        super().__init__(cfg, dry)

    def plan(self) -> list[str]:
        e = self.cfg.encoder
        return [
            f"encode {self.artifacts.profiles_for(self.noise_ratio)} with {e.kind} (d={e.dim})",
            f"write {self.artifacts.embeddings_for(self.noise_ratio)}",
        ]

    def execute(self) -> None:
        a = self.artifacts
        factor_set = factor_set_of(self.cfg)
        split = a.load_split()
        profiles = a.load_profiles(factor_set, self.noise_ratio)
        store = encode_profiles(
            make_encoder(self.cfg.encoder), profiles, split.num_users, split.num_items
        )
        save_embedding_file(
            a.embeddings_for(self.noise_ratio),
            store,
            config_hash=self.cfg.hash,
            factors=list(factor_set.names),
        )
        secho(f"Encoded {store.num_users} users and {store.num_items} items", fg="green")


class Synth(Stage):
    def __init__(self, cfg: RunConfig, reviews_only=False, dry=False):
        self.reviews_only = reviews_only
        reviews = Artifacts(cfg.out_dir).root / "reviews.jsonl"
        cfg = replace(
            cfg,
            data=replace(cfg.data, reviews=str(reviews), format="jsonl"),
            llm=replace(cfg.llm, kind=BackendKind.mock),
        )
        super().__init__(cfg, dry)

    def steps(self) -> list[Stage]:
        if self.reviews_only:
            return []
        return [Ingest(self.cfg), Profile(self.cfg), Encode(self.cfg)]

    def plan(self) -> list[str]:
        s = self.cfg.synth
        head = [
            f"plant preferences for {s.num_users} users over {s.num_items} items "
            f"(noise rate {s.noise_rate:g}, seed {s.seed})",
            f"write {self.cfg.data.reviews} and synth_truth.json",
        ]
        return head + [step for stage in self.steps() for step in stage.plan()]

    def execute(self) -> None:
        dataset = generate(self.cfg.synth)
        dataset.write(self.artifacts.root)
        secho(
            f"{len(dataset.pairs)} interactions "
            f"(expected {dataset.expected_interactions:.1f})",
            fg="green",
        )
        for stage in self.steps():
            stage.execute()


class Train(Stage):
    def plan(self) -> list[str]:
        t = self.cfg.train
        d_g, d_star = t.dims
        return [
            f"train {t.attention} model (d_g={d_g}, d*={d_star}, L={t.layers}, n={t.n_keys}) "
            f"for up to {t.max_epochs} epochs, seed {t.seed}",
            f"write {self.artifacts.checkpoint} and {self.artifacts.train_log}",
        ]

    def execute(self) -> None:
        result = fit_model(self.experiment(), self.cfg.train.seed, self.artifacts.root)
        secho(
            f"Best validation recall@20 {result.best_metric:.4f} at epoch {result.best_epoch} "
            f"({result.epochs_run} epochs run)",
            fg="green",
        )


class Evaluate(Stage):
    def __init__(self, cfg: RunConfig, checkpoint: Path | None = None, dry=False):
        self.checkpoint = checkpoint
        super().__init__(cfg, dry)

    def plan(self) -> list[str]:
        e = self.cfg.eval
        if self.checkpoint:
            head = [f"score {self.checkpoint} on the test split"]
        else:
            head = [f"train and test with seeds {list(e.seeds)}"]
            if e.baseline:
                head.append(f"train and test the {e.baseline} baseline for p-values")
        return head + [f"write metrics to {self.artifacts.reports('eval')}"]

    def execute(self) -> None:
        experiment = self.experiment()
        reports: list[EvalReport] = []
        if self.checkpoint:
            params, meta = load_checkpoint(self.checkpoint)
            if meta.get("config_hash") not in (None, self.cfg.hash):
                logger.warning("Checkpoint was trained under config %s", meta["config_hash"])
            if params.attention != self.cfg.train.attention:
                experiment = experiment.with_train(attention=params.attention)
            seed = int(meta.get("seed", self.cfg.train.seed))
            reports.append(EvalReport(per_seed={seed: held_out_metrics(experiment, params)}))
        else:
            report = evaluate(experiment)
            reports.append(report)
            if baseline := self.cfg.eval.baseline:
                other = run_ablation(AblationSpec(baseline), experiment)
                report.compare(other)
                reports.append(other)
        write_reports(self.artifacts.reports("eval"), self.cfg.hash, reports, self.cfg.hash)
        show(reports)


class Ablate(Stage):
    def __init__(
        self,
        cfg: RunConfig,
        variant: Variant,
        factor: str | None = None,
        ratios: list[float] | None = None,
        dry=False,
    ):
        self.variant = Variant(variant)
        self.factor = factor
        self.ratios = ratios or [0.0, 0.5, 1.0]
        super().__init__(cfg, dry)

    def spec(self) -> AblationSpec:
        if self.variant is not Variant.mask_factor:
            return AblationSpec(self.variant)
        if self.factor is None:
            secho("--factor is required for mask_factor", fg="red")
            raise Exit(2)
        return AblationSpec(self.variant, factor=factor_set_of(self.cfg).index(self.factor))

    def plan(self) -> list[str]:
        out = self.artifacts.reports(f"ablate_{self.variant}")
        if self.variant is Variant.noise:
            return [
                f"regenerate user profiles at noise ratio {r:g}, encode, train and test"
                for r in self.ratios
            ] + [f"write metrics and noise curve to {out}"]
        name = self.variant if self.factor is None else f"{self.variant} {self.factor!r}"
        return [
            "train and test the full model",
            f"train and test {name}",
            f"write metrics to {out}",
        ]

    def regenerate(self, ratio: float):
        Profile(self.cfg, noise_ratio=ratio).execute()
        Encode(self.cfg, noise_ratio=ratio).execute()
        return self.experiment(ratio).profiles

    def execute(self) -> None:
        out = self.artifacts.reports(f"ablate_{self.variant}")
        if self.variant is Variant.noise:
            reports = noise_curve(self.experiment(), self.ratios, self.regenerate)
            write_reports(out, self.cfg.hash, reports, self.cfg.hash, plot=True)
            show(reports)
            return
        spec = self.spec()
        experiment = self.experiment()
        full = evaluate(experiment)
        ablated = run_ablation(spec, experiment)
        ablated.compare(full)
        extra = {}
        if spec.factor is not None:
            extra["masked_factor"] = factor_set_of(self.cfg).names[spec.factor]
        write_reports(out, self.cfg.hash, [full, ablated], self.cfg.hash, **extra)
        show([full, ablated])


class Sweep(Stage):
    def __init__(self, cfg: RunConfig, n_values: list[int], dry=False):
        self.n_values = n_values
        super().__init__(cfg, dry)

    def plan(self) -> list[str]:
        return [f"train and test with n = {n} key(s)" for n in self.n_values] + [
            f"write sweep table and plot CSV to {self.artifacts.reports('sweep')}"
        ]

    def execute(self) -> None:
        out = self.artifacts.reports("sweep")
        reports = sweep_n(self.experiment(), self.n_values)
        write_reports(out, self.cfg.hash, reports, self.cfg.hash, plot=True)
        rows = [{"n": int(r.x or 0), **r.means} for r in reports]
        write_csv(out / "sweep.csv", rows, ["n", *reports[0].metrics])
        show(reports)


def show(reports: list[EvalReport]) -> None:
    for r in reports:
        label = r.variant if r.x is None else f"{r.variant} x={r.x:g}"
        means = ", ".join(f"{k}={v:.4f}" for k, v in r.means.items())
        secho(f"{label}: {means}", fg="green")
        for k, p in r.p_values.items():
            echo(f"    p({k} vs {r.baseline}) = {p:.4g}")


def resolve(
    config: Path | None,
    overrides: list[str] | None,
    seed: int | None = None,
    out: Path | None = None,
    threads: int | None = None,
    deterministic: bool = False,
) -> RunConfig:
    try:
        cfg, source = load_config(config, overrides or [])
        cfg = with_runtime(cfg, seed, out, threads, deterministic)
    except ReformError as e:
        secho(f"{type(e).__name__}: {e}", fg="red", err=True)
        raise Exit(e.exit_code) from e
    logger.debug("config %s from %s", cfg.hash, source or "defaults")
    return cfg


CONFIG = Option(None, "--config", "-c", help="TOML config file (default: search reform.toml upwards)")
SET = Option(None, "--set", "-s", help="Override a config key: section.key=value (repeatable)")
SEED = Option(None, "--seed", help="Root seed for every random stream")
OUT = Option(None, "--out", "-o", help="Output directory (data.out_dir)")
THREADS = Option(None, "--threads", help="Cap on worker threads")
DETERMINISTIC = Option(False, "--deterministic", help="Single-threaded, bit-exact mode")
DRY = Option(False, "--dry", help="Only print the planned steps")


@cli.callback()
def main(
    verbose: bool = Option(False, "--verbose", "-v", help="Debug logging"),
    quiet: bool = Option(False, "--quiet", "-q", help="Warnings and errors only"),
):
    """Factor-aware recommendation: review profiles, multi-factor attention, graph CF"""
    setup_logging(verbose, quiet)


@cli.command()
def version():
    """Show the version of this tool"""
    echo(__version__)


@cli.command()
def ingest(
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    dry: bool = DRY,
):
    """Load reviews, k-core filter, split 3:1:1 and build the training graph"""
    Ingest(resolve(config, overrides, seed, out), dry=dry).run()


@cli.command()
def profile(
    noise_ratio: float = Option(None, "--noise-ratio", help="Replace this share of user reviews"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    threads: int = THREADS,
    deterministic: bool = DETERMINISTIC,
    dry: bool = DRY,
):
    """Generate factor profiles for every user and item with the LLM backend"""
    cfg = resolve(config, overrides, seed, out, threads, deterministic)
    Profile(cfg, noise_ratio, dry=dry).run()


@cli.command()
def encode(
    noise_ratio: float = Option(0.0, "--noise-ratio", help="Encode the profiles of this noise ratio"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    out: Path = OUT,
    dry: bool = DRY,
):
    """Encode profile texts into the binary embedding file"""
    Encode(resolve(config, overrides, out=out), noise_ratio, dry=dry).run()


@cli.command()
def synth(
    reviews_only: bool = Option(False, "--reviews-only", help="Skip ingest, profile and encode"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    dry: bool = DRY,
):
    """Generate a synthetic corpus with planted factor preferences"""
    Synth(resolve(config, overrides, seed, out), reviews_only, dry=dry).run()


@cli.command()
def train(
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    threads: int = THREADS,
    deterministic: bool = DETERMINISTIC,
    dry: bool = DRY,
):
    """Train one model with early stopping and write its checkpoint"""
    Train(resolve(config, overrides, seed, out, threads, deterministic), dry=dry).run()


@cli.command(name="eval")
def evaluate_command(
    checkpoint: Path = Option(None, "--checkpoint", help="Score this checkpoint instead of training"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    threads: int = THREADS,
    deterministic: bool = DETERMINISTIC,
    dry: bool = DRY,
):
    """All-ranking Recall/NDCG over eval.seeds, with p-values against eval.baseline"""
    cfg = resolve(config, overrides, seed, out, threads, deterministic)
    Evaluate(cfg, checkpoint, dry=dry).run()


@cli.command()
def ablate(
    variant: Variant = Option(..., "--variant", help="Which part of the model to change"),
    factor: str = Option(None, "--factor", help="Factor name or index for mask_factor"),
    ratios: str = Option("0,0.5,1.0", "--ratios", help="Noise ratios for the noise variant"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    threads: int = THREADS,
    deterministic: bool = DETERMINISTIC,
    dry: bool = DRY,
):
    """Compare a model variant against the full model"""
    cfg = resolve(config, overrides, seed, out, threads, deterministic)
    Ablate(cfg, variant, factor, parse_list(ratios), dry=dry).run()


@cli.command()
def sweep(
    n: str = Option("1,2,3,4,5", "--n", help="Key counts to try"),
    config: Path = CONFIG,
    overrides: list[str] = SET,
    seed: int = SEED,
    out: Path = OUT,
    threads: int = THREADS,
    deterministic: bool = DETERMINISTIC,
    dry: bool = DRY,
):
    """Train and test once per key count n"""
    cfg = resolve(config, overrides, seed, out, threads, deterministic)
    Sweep(cfg, parse_list(n, int), dry=dry).run()


if __name__ == "__main__":
    cli()  # pragma: no cover
