import json

import pytest
from typer.testing import CliRunner

from reform_cli import __version__, cli
from reform_cli.cli import parse_list
from reform_cli.encoder import load_embedding_file
from reform_cli.trainer import load_checkpoint

runner = CliRunner()

TINY = [
    "synth.num_users=30",
    "synth.num_items=40",
    "synth.interactions_per_user=8",
    "data.k_core=2",
    "encoder.dim=8",
    "train.d_g=8",
    "train.d_star=8",
    "train.layers=1",
    "train.n_keys=1",
    "train.batch_size=64",
    "train.max_epochs=2",
    "train.patience=1",
    "train.learning_rate=0.01",
    "eval.ks=[5, 10]",
    "eval.seeds=[0]",
]


def invoke(*args: str, overrides=TINY):
    sets = [a for item in overrides for a in ("--set", item)]
    return runner.invoke(cli, [*args, *sets])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("REFORM_NO_PROGRESS", "1")
    monkeypatch.delenv("REFORM_DETERMINISTIC", raising=False)
    return tmp_path


@pytest.fixture
def synthesized(workdir):
    out = workdir / "out"
    result = invoke("synth", "--out", str(out), "--seed", "3")
    assert result.exit_code == 0, result.output
    return out


def test_version():
    result = runner.invoke(cli, ["version"])
    assert result.exit_code == 0
    assert result.output.strip() == __version__


def test_parse_list():
    assert parse_list("0, 0.5,1") == [0.0, 0.5, 1.0]
    assert parse_list("1,2", int) == [1, 2]


def test_missing_input(workdir):
    result = invoke("ingest", overrides=["data.reviews=missing.jsonl"])
    assert result.exit_code == 2
    assert "missing.jsonl" in result.output


def test_bad_override(workdir):
    result = invoke("train", overrides=["train.momentum=0.9"])
    assert result.exit_code == 2
    assert "momentum" in result.output


def test_missing_artifacts(workdir):
    result = invoke("train", "--out", str(workdir / "empty"))
    assert result.exit_code == 2
    assert "reform ingest" in result.output


def test_dry_runs(workdir):
    out = workdir / "out"
    for command in (["synth"], ["train"], ["eval"], ["sweep", "--n", "1,2"], ["profile"]):
        result = invoke(*command, "--dry", "--out", str(out))
        assert result.exit_code == 0, result.output
        assert result.output.startswith("--> ")
    assert not out.exists()
    result = invoke("ablate", "--variant", "noise", "--ratios", "0,0.5", "--dry")
    assert result.output.count("regenerate user profiles") == 2


def test_synth_pipeline(synthesized):
    for name in ("reviews.jsonl", "synth_truth.json", "id_map.json", "split.tsv", "stats.json", "profiles.jsonl"):
        assert (synthesized / name).exists()
    stats = json.loads((synthesized / "stats.json").read_text())
    store = load_embedding_file(synthesized / "embeddings.bin", {"M": 7, "d": 8})
    assert (store.num_users, store.num_items) == (stats["users"], stats["items"])


def test_train_and_eval(synthesized):
    result = invoke("train", "--out", str(synthesized))
    assert result.exit_code == 0, result.output
    assert "Best validation recall@20" in result.output
    params, meta = load_checkpoint(synthesized / "checkpoint.bin")
    assert meta["seed"] == 0
    log = (synthesized / "train_log.jsonl").read_text().splitlines()
    assert 1 <= len(log) <= 2

    result = invoke("eval", "--out", str(synthesized), "--checkpoint", str(synthesized / "checkpoint.bin"))
    assert result.exit_code == 0, result.output
    summary = json.loads((synthesized / "reports" / "eval" / "summary.json").read_text())
    means = summary["reports"][0]["means"]
    assert set(means) == {"recall@5", "recall@10", "ndcg@5", "ndcg@10"}
    assert all(0 <= v <= 1 for v in means.values())


def test_deterministic_runs_are_byte_identical(synthesized):
    runs = []
    for _ in range(2):
        assert invoke("train", "--out", str(synthesized), "--deterministic").exit_code == 0
        result = invoke("eval", "--out", str(synthesized), "--deterministic")
        assert result.exit_code == 0, result.output
        runs.append(
            (
                (synthesized / "checkpoint.bin").read_bytes(),
                (synthesized / "runs" / "full" / "seed_0" / "checkpoint.bin").read_bytes(),
                (synthesized / "reports" / "eval" / "metrics.csv").read_bytes(),
            )
        )
    assert runs[0] == runs[1]


def test_eval_ignores_thread_count(synthesized):
    outputs = []
    for threads in ("1", "2"):
        result = invoke("eval", "--out", str(synthesized), "--threads", threads)
        assert result.exit_code == 0, result.output
        lines = (synthesized / "reports" / "eval" / "metrics.csv").read_text().splitlines()
        # run_id is the config hash, which includes the thread count
        outputs.append([line.split(",", 1)[1] for line in lines])
    assert outputs[0] == outputs[1]


def test_ablate_mask_factor(synthesized):
    result = invoke("ablate", "--variant", "mask_factor", "--factor", "flavor", "--out", str(synthesized))
    assert result.exit_code == 0, result.output
    summary = json.loads((synthesized / "reports" / "ablate_mask_factor" / "summary.json").read_text())
    assert summary["masked_factor"] == "flavor"
    assert [r["variant"] for r in summary["reports"]] == ["full", "mask_factor_1"]

    result = invoke("ablate", "--variant", "mask_factor", "--out", str(synthesized))
    assert result.exit_code == 2
    result = invoke("ablate", "--variant", "mask_factor", "--factor", "parking", "--out", str(synthesized))
    assert result.exit_code == 2


def test_sweep(synthesized):
    result = invoke("sweep", "--n", "1,2", "--out", str(synthesized))
    assert result.exit_code == 0, result.output
    out = synthesized / "reports" / "sweep"
    header, *rows = (out / "sweep.csv").read_text().splitlines()
    assert header.startswith("n,")
    assert [r.split(",")[0] for r in rows] == ["1", "2"]
    assert (out / "plot.csv").exists()


def test_eval_against_baseline(synthesized):
    seeds = [*TINY[:-1], "eval.seeds=[0, 1]", "eval.baseline=no_mfa_mlp"]
    result = invoke("eval", "--out", str(synthesized), overrides=seeds)
    assert result.exit_code == 0, result.output
    assert "vs no_mfa_mlp" in result.output
    full, baseline = json.loads((synthesized / "reports" / "eval" / "summary.json").read_text())["reports"]
    assert (full["variant"], full["baseline"], full["seeds"]) == ("full", "no_mfa_mlp", [0, 1])
    assert baseline["variant"] == "no_mfa_mlp"
    assert set(full["p_values"]) == set(full["means"])
    assert all(0 <= p <= 1 for p in full["p_values"].values())


def test_ablate_noise(synthesized):
    reviews = f"data.reviews={synthesized / 'reviews.jsonl'}"
    args = ["--variant", "noise", "--ratios", "0,0.5,1", "--out", str(synthesized)]
    result = invoke("ablate", *args, overrides=[*TINY, reviews])
    assert result.exit_code == 0, result.output
    for ratio in ("0.5", "1"):
        assert (synthesized / f"profiles_noise_{ratio}.jsonl").exists()
        assert (synthesized / f"embeddings_noise_{ratio}.bin").exists()
    out = synthesized / "reports" / "ablate_noise"
    summary = json.loads((out / "summary.json").read_text())
    assert [r["variant"] for r in summary["reports"]] == ["noise_0", "noise_0.5", "noise_1"]
    header, *rows = (out / "plot.csv").read_text().splitlines()
    assert header == "x,metric,value"
    assert sorted({float(r.split(",")[0]) for r in rows}) == [0.0, 0.5, 1.0]
