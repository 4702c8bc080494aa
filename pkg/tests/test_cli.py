import json

import pytest

from cellformer.cli import main
from cellformer.data import load_dataset
from cellformer.embedding import StoreProvider, open_store
from cellformer.prompts import read_prompts


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> prompts -> embed-hash pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "120", "--seed", "3", "--text-missing", "0.1",
                "--out-dir", str(root)]) == 0
    data = root / "data.csv"
    schema = root / "schema.json"
    prompts = root / "prompts.tsv"
    assert run(["prompts", "--data", str(data), "--schema", str(schema),
                "--split-seed", "0", "--out", str(prompts)]) == 0
    store = root / "store.cemb"
    assert run(["embed-hash", "--prompts", str(prompts), "--dim", "16",
                "--seed", "0", "--out", str(store)]) == 0
    return root


def write_config(path, data, schema, **overrides):
    doc = {
        "head": "or",
        "data": str(data),
        "schema": str(schema),
        "provider": {"kind": "hash", "dim": 16, "seed": 0},
        "encoder": {"input_dim": 16, "model_dim": 8, "layers": 1, "heads": 2,
                    "ffn_dim": 16},
        "lr": 2e-3,
        "batch_size": 30,
        "max_epochs": 2,
        "patience": 2,
        "seeds": [0],
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_synth_outputs_load(workspace):
    ds = load_dataset(workspace / "data.csv", workspace / "schema.json")
    assert len(ds) == 120


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["synth", "--n", "40", "--seed", "9", "--out-dir", str(out)]) == 0
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    assert (a / "schema.json").read_bytes() == (b / "schema.json").read_bytes()


def test_prompts_cover_present_cells(workspace):
    ds = load_dataset(workspace / "data.csv", workspace / "schema.json")
    entries = read_prompts(workspace / "prompts.tsv")
    # free-text cells stay missing after imputation; everything else renders
    missing_notes = sum(1 for row in ds.rows if row.cells[3].is_missing)
    assert len(entries) == len(ds) * 4 - missing_notes
    assert all(text for _, _, text in entries)


def test_store_round_trip_no_misses(workspace, tmp_path):
    # training through the store must resolve every prompt (fail-fast
    # pre-embedding would raise on any miss)
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json",
                          provider={"kind": "store", "path": str(workspace / "store.cemb")})
    out = tmp_path / "run"
    assert run(["train", "--config", str(config), "--out-dir", str(out)]) == 0
    assert (out / "metrics.json").exists()


def test_store_header(workspace):
    store = open_store(workspace / "store.cemb")
    assert store.dim == 16
    assert store.metadata["normalized"] is True
    provider = StoreProvider(store)
    entries = read_prompts(workspace / "prompts.tsv")
    for _, _, text in entries[:50]:
        assert provider.embed(text).shape == (16,)


def test_train_writes_artifacts_and_is_deterministic(workspace, tmp_path):
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert run(["train", "--config", str(config), "--seed", "7",
                    "--out-dir", str(out)]) == 0
        for name in ("manifest.json", "metrics.json", "history.csv",
                     "predictions_seed7.csv", "checkpoint_seed7.ckpt"):
            assert (out / name).exists(), name
    assert (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()


def test_eval_matches_train_metrics(workspace, tmp_path, capsys):
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    out = tmp_path / "run"
    assert run(["train", "--config", str(config), "--seed", "2",
                "--out-dir", str(out)]) == 0
    trained = json.loads((out / "metrics.json").read_text())
    capsys.readouterr()
    assert run(["eval", "--checkpoint", str(out / "checkpoint_seed2.ckpt")]) == 0
    evaluated = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert evaluated["rmse"] == trained["per_seed"][0]["rmse"]
    assert evaluated["mae"] == trained["per_seed"][0]["mae"]


def test_mlp_flag(workspace, tmp_path):
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    out = tmp_path / "mlp"
    assert run(["train", "--config", str(config), "--mlp",
                "--out-dir", str(out)]) == 0
    assert (out / "metrics.json").exists()


def test_corrupt_bench_curve(workspace, tmp_path):
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    out = tmp_path / "bench"
    assert run(["corrupt-bench", "--config", str(config),
                "--rates", "0,0.3", "--dump-corrupted",
                "--out-dir", str(out)]) == 0
    lines = (out / "curve.csv").read_text().strip().splitlines()
    assert lines[0] == "rate,rmse,mae"
    assert len(lines) == 3
    assert float(lines[1].split(",")[0]) == 0.0
    assert (out / "corrupted_test_rate0p3.csv").exists()
    assert (out / "corrupted_test_rate0p3_flags.csv").exists()


def test_manifest_digests_inputs(workspace, tmp_path):
    import hashlib

    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    out = tmp_path / "run"
    assert run(["train", "--config", str(config), "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    expected = hashlib.sha256((workspace / "data.csv").read_bytes()).hexdigest()
    assert manifest["inputs"][str(workspace / "data.csv")] == expected
    assert manifest["seeds"] == [0]
    assert manifest["config"]["head"] == "or"


def test_corrupt_bench_through_store_resolves_all_prompts(workspace, tmp_path):
    # corrupted cells take values from the column's own marginal, so their
    # prompts already exist in the dump-built store; the benchmark must run
    # without a single store miss
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json",
                          provider={"kind": "store",
                                    "path": str(workspace / "store.cemb")})
    out = tmp_path / "bench"
    assert run(["corrupt-bench", "--config", str(config), "--rates", "0,0.5",
                "--out-dir", str(out)]) == 0
    assert (out / "curve.csv").exists()


def test_store_miss_fails_fast_with_exit_2(workspace, tmp_path, capsys):
    # a store built from a truncated dump is missing prompts; training must
    # fail during pre-embedding, before any epoch runs
    truncated = tmp_path / "truncated.tsv"
    lines = (workspace / "prompts.tsv").read_text().splitlines()
    truncated.write_text("\n".join(lines[:10]) + "\n", encoding="utf-8")
    partial_store = tmp_path / "partial.cemb"
    assert run(["embed-hash", "--prompts", str(truncated), "--dim", "16",
                "--out", str(partial_store)]) == 0
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json",
                          provider={"kind": "store", "path": str(partial_store)})
    code = run(["train", "--config", str(config), "--out-dir", str(tmp_path / "run")])
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "StoreMissError"


def test_out_dir_env_var(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CELLFORMER_OUT_DIR", str(tmp_path / "from_env"))
    assert run(["synth", "--n", "20", "--seed", "1"]) == 0
    assert (tmp_path / "from_env" / "data.csv").exists()


def test_subcommands_do_not_mutate_inputs(workspace, tmp_path):
    data_before = (workspace / "data.csv").read_bytes()
    schema_before = (workspace / "schema.json").read_bytes()
    config = write_config(tmp_path / "config.json", workspace / "data.csv",
                          workspace / "schema.json")
    assert run(["train", "--config", str(config),
                "--out-dir", str(tmp_path / "run")]) == 0
    assert (workspace / "data.csv").read_bytes() == data_before
    assert (workspace / "schema.json").read_bytes() == schema_before


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["prompts"])  # missing required flags
    assert exc.value.code == 1
    err = capsys.readouterr().err
    assert '"error"' in err


def test_data_error_exits_2(tmp_path, capsys):
    code = run(["train", "--data", str(tmp_path / "nope.csv"),
                "--schema", str(tmp_path / "nope.json"),
                "--out-dir", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    parsed = json.loads(err)
    assert parsed["error"]


def test_grad_check_cli(capsys):
    assert run(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "all" in out and "passed" in out
