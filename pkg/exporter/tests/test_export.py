import json

import numpy as np
import pytest

from cemb_exporter.encoders import ModelLoadError, StubEncoder, resolve_encoder
from cemb_exporter.export import ExportError, ExportJob, content_key, export
from cemb_exporter.prompts_io import PromptFileError, read_prompt_file
from cemb_exporter.cli import main as exporter_main

# the primary component is consumed only through its CLI and file formats
from cellformer.cli import main as primary_main
from cellformer.embedding import lookup, open_store
from cellformer.errors import StoreMissError


@pytest.fixture(scope="module")
def prompt_dump(tmp_path_factory):
    """A real dump from the primary `prompts` subcommand."""
    root = tmp_path_factory.mktemp("primary")
    assert primary_main(["synth", "--n", "30", "--seed", "11",
                         "--out-dir", str(root)]) == 0
    dump = root / "prompts.tsv"
    assert primary_main(["prompts", "--data", str(root / "data.csv"),
                         "--schema", str(root / "schema.json"),
                         "--out", str(dump)]) == 0
    return dump


@pytest.fixture(scope="module")
def fifty_prompts(prompt_dump, tmp_path_factory):
    lines = prompt_dump.read_text(encoding="utf-8").splitlines()
    assert len(lines) >= 50
    path = tmp_path_factory.mktemp("fifty") / "fifty.tsv"
    path.write_text("\n".join(lines[:50]) + "\n", encoding="utf-8")
    return path


class TestRoundTrip:
    def test_fifty_prompts_resolve_with_zero_misses(self, fifty_prompts, tmp_path):
        out = tmp_path / "store.cemb"
        summary = export(ExportJob(prompts_path=str(fifty_prompts),
                                   out_path=str(out), model="stub:768"))
        store = open_store(out)
        assert store.dim == 768
        assert summary["dim"] == 768
        entries = read_prompt_file(fifty_prompts)
        assert len(entries) == 50
        misses = 0
        for _, _, text in entries:
            try:
                vec = lookup(store, text)
                assert vec.shape == (768,)
            except StoreMissError:
                misses += 1
        assert misses == 0

    def test_each_prompt_exactly_once(self, fifty_prompts, tmp_path):
        out = tmp_path / "store.cemb"
        export(ExportJob(prompts_path=str(fifty_prompts), out_path=str(out),
                         model="stub:16"))
        store = open_store(out)
        unique = {content_key(text) for _, _, text in read_prompt_file(fifty_prompts)}
        assert set(store.entries) == unique

    def test_deterministic_bytes(self, fifty_prompts, tmp_path):
        a, b = tmp_path / "a.cemb", tmp_path / "b.cemb"
        for out in (a, b):
            export(ExportJob(prompts_path=str(fifty_prompts), out_path=str(out),
                             model="stub:32", normalize=True))
        assert a.read_bytes() == b.read_bytes()


class TestExportSemantics:
    def write_dump(self, path, rows):
        path.write_text("".join(f"{i}\t0\t{text}\n" for i, text in enumerate(rows)),
                        encoding="utf-8")
        return path

    def test_duplicates_collapse(self, tmp_path):
        dump = self.write_dump(tmp_path / "d.tsv",
                               ["same prompt", "same prompt", "other prompt"])
        out = tmp_path / "store.cemb"
        summary = export(ExportJob(prompts_path=str(dump), out_path=str(out),
                                   model="stub:8"))
        assert summary["count"] == 2
        header = json.loads(out.read_text().splitlines()[0])
        assert header["count"] == 2

    def test_truncation_at_max_tokens(self, tmp_path):
        dump = self.write_dump(tmp_path / "d.tsv",
                               ["alpha beta gamma", "alpha beta delta"])
        short_out = tmp_path / "short.cemb"
        long_out = tmp_path / "long.cemb"
        # max_tokens=3 keeps <s> alpha beta for both texts
        export(ExportJob(prompts_path=str(dump), out_path=str(short_out),
                         model="stub:8", max_tokens=3))
        export(ExportJob(prompts_path=str(dump), out_path=str(long_out),
                         model="stub:8", max_tokens=8))
        short = open_store(short_out)
        long_ = open_store(long_out)
        k1, k2 = content_key("alpha beta gamma"), content_key("alpha beta delta")
        np.testing.assert_array_equal(short.entries[k1], short.entries[k2])
        assert not np.array_equal(long_.entries[k1], long_.entries[k2])

    def test_normalize_records_flag_and_unit_norm(self, tmp_path):
        dump = self.write_dump(tmp_path / "d.tsv", ["one prompt", "two prompt"])
        out = tmp_path / "store.cemb"
        export(ExportJob(prompts_path=str(dump), out_path=str(out),
                         model="stub:8", normalize=True))
        store = open_store(out)
        assert store.normalized
        for vec in store.entries.values():
            assert abs(np.linalg.norm(vec.astype(np.float64)) - 1.0) < 1e-4

    def test_header_metadata(self, tmp_path):
        dump = self.write_dump(tmp_path / "d.tsv", ["a prompt"])
        out = tmp_path / "store.cemb"
        export(ExportJob(prompts_path=str(dump), out_path=str(out),
                         model="stub:8", max_tokens=64))
        header = json.loads(out.read_text().splitlines()[0])
        assert header["model"] == "stub:8"
        assert header["max_tokens"] == 64
        assert header["producer"].startswith("cemb-exporter/")

    def test_empty_prompts_file_rejected(self, tmp_path):
        empty = tmp_path / "empty.tsv"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(ExportError, match="no prompts"):
            export(ExportJob(prompts_path=str(empty),
                             out_path=str(tmp_path / "x.cemb"), model="stub:8"))

    def test_malformed_dump_rejected(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("not-tab-separated\n", encoding="utf-8")
        with pytest.raises(PromptFileError):
            export(ExportJob(prompts_path=str(bad),
                             out_path=str(tmp_path / "x.cemb"), model="stub:8"))

    def test_no_temp_files_left_behind(self, tmp_path):
        dump = self.write_dump(tmp_path / "d.tsv", ["a prompt"])
        out_dir = tmp_path / "out"
        out_dir.mkdir()
        export(ExportJob(prompts_path=str(dump),
                         out_path=str(out_dir / "store.cemb"), model="stub:8"))
        assert sorted(p.name for p in out_dir.iterdir()) == ["store.cemb"]


class TestEncoders:
    def test_stub_spec_parsing(self):
        assert resolve_encoder("stub").dim == 768
        assert resolve_encoder("stub:32").dim == 32
        with pytest.raises(ModelLoadError):
            resolve_encoder("stub:banana")

    def test_stub_deterministic(self):
        enc = StubEncoder(dim=16)
        a = enc.token_embeddings("alpha beta", 8)
        b = enc.token_embeddings("alpha beta", 8)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 16)  # <s> + 2 tokens

    def test_real_model_if_available(self):
        pytest.importorskip("transformers")
        try:
            encoder = resolve_encoder("princeton-nlp/sup-simcse-roberta-base")
        except ModelLoadError as exc:
            pytest.skip(f"pre-trained model not loadable here: {exc}")
        assert encoder.dim == 768
        tokens = encoder.token_embeddings("The weight of patient is 70 kilograms", 128)
        assert tokens.shape[1] == 768


class TestCli:
    def test_cli_round_trip(self, fifty_prompts, tmp_path, capsys):
        out = tmp_path / "store.cemb"
        code = exporter_main([str(fifty_prompts), "--model", "stub:768",
                              "--normalize", "--out", str(out)])
        assert code == 0
        assert "dim 768" in capsys.readouterr().out
        assert open_store(out).dim == 768

    def test_cli_error_exit(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("HF_HUB_OFFLINE", "1")
        monkeypatch.setenv("TRANSFORMERS_OFFLINE", "1")
        dump = tmp_path / "d.tsv"
        dump.write_text("0\t0\ta prompt\n", encoding="utf-8")
        code = exporter_main([str(dump), "--model", "definitely/not-a-model",
                              "--out", str(tmp_path / "x.cemb")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_cli_missing_file(self, tmp_path, capsys):
        code = exporter_main([str(tmp_path / "absent.tsv"), "--model", "stub:8",
                              "--out", str(tmp_path / "x.cemb")])
        assert code == 1
