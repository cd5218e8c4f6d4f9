import json
import os

import pytest

from cvrmkit.cli import main
from cvrmkit.records import load_corpus, load_manifest


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = main(["synth", "--n", "120", "--ratio", "0.3", "--seed", "5", "--out", str(out)])
    assert code == 0
    return out


class TestSynth:
    def test_writes_corpus_and_manifest(self, corpus_dir):
        records = load_corpus(corpus_dir / "corpus.jsonl")
        manifest = load_manifest(corpus_dir / "manifest.json")
        assert len(records) == 120
        assert manifest.positive_count == 36

    def test_repeat_seed_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", "--n", "50", "--ratio", "0.4", "--seed", "3",
                         "--out", str(tmp_path / sub)]) == 0
        assert (tmp_path / "a" / "corpus.jsonl").read_bytes() == (
            tmp_path / "b" / "corpus.jsonl"
        ).read_bytes()

    def test_bad_ratio_exits_2(self, tmp_path, capsys):
        code = main(["synth", "--ratio", "1.5", "--out", str(tmp_path)])
        assert code == 2
        assert "ratio" in capsys.readouterr().err

    def test_default_n_matches_dataset_scale(self):
        import argparse

        from cvrmkit.cli import build_parser
        parser = build_parser()
        args = parser.parse_args(["synth", "--out", "x"])
        assert args.n == 3482 and abs(args.ratio - 0.1939) < 1e-12


class TestTokenizerTrain:
    def test_trains_and_saves(self, corpus_dir, tmp_path):
        out = tmp_path / "vocab.json"
        code = main(["tokenizer-train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--vocab-size", "512", "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["specials"] == {"PAD": 0, "UNK": 1, "CLS": 2}


class TestTrainCrossval:
    def test_missing_corpus_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2
        assert "--corpus" in capsys.readouterr().err

    def test_nonexistent_corpus_exits_2(self, tmp_path):
        assert main(["train", "--corpus", str(tmp_path / "nope.jsonl"),
                     "--model", "dummy"]) == 2

    def test_dummy_writes_report(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["crossval", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "dummy", "--set", "data.k_folds=3", "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "root seed: 42" in stdout
        assert (out / "report.json").exists()
        obj = json.loads((out / "report.json").read_text())
        assert len(obj["report"]["folds"]) == 3

    def test_effective_config_echoed_byte_identical(self, corpus_dir, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "dummy", "--seed", "9", "--out", str(out)]) == 0
        config = json.loads((out / "config.json").read_text())
        assert config["training"]["seed"] == 9
        report = json.loads((out / "report.json").read_text())
        snapshot = report["artifact"]["config_snapshot"]
        assert snapshot == (out / "config.json").read_text()[:-1]  # trailing newline added on disk

    def test_bad_override_exits_2(self, corpus_dir):
        assert main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "dummy", "--set", "nonsense"]) == 2

    def test_rerun_from_echoed_config_reproduces_report(self, corpus_dir, tmp_path):
        first = tmp_path / "first"
        assert main(["crossval", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "svc", "--seed", "11",
                     "--set", "data.k_folds=2", "--out", str(first)]) == 0
        second = tmp_path / "second"
        assert main(["crossval", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--config", str(first / "config.json"), "--out", str(second)]) == 0
        a = json.loads((first / "report.json").read_text())
        b = json.loads((second / "report.json").read_text())
        assert a["report"] == b["report"]
        assert a["artifact"]["config_snapshot"] == b["artifact"]["config_snapshot"]

    def test_unknown_family_rejected_by_argparse(self, corpus_dir):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"), "--model", "mlp"])
        assert exc.value.code == 2

    def test_config_file_plus_override(self, corpus_dir, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"model": {"family": "oracle"}, "data": {"k_folds": 2}}))
        out = tmp_path / "run"
        code = main(["crossval", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--config", str(cfg_path), "--out", str(out)])
        assert code == 0
        assert "100.00" in capsys.readouterr().out  # oracle is perfect

    def test_fused_svc_with_precomputed_embedding_file(self, corpus_dir, tmp_path):
        import numpy as np

        from cvrmkit.atc import bundled_table
        from cvrmkit.fusion import MED_EMBED_DIM, save_embedding_file

        rng = np.random.default_rng(0)
        mapping = {code: rng.normal(size=MED_EMBED_DIM) for code in bundled_table().full_codes()}
        emb_path = tmp_path / "meds.tsv"
        save_embedding_file(mapping, emb_path)
        code = main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "svc", "--mode", "fused",
                     "--set", f'fusion.embedding_file="{emb_path}"'])
        assert code == 0

    def test_fused_with_missing_embedding_file_exits_2(self, corpus_dir, tmp_path):
        code = main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "svc", "--mode", "fused",
                     "--set", f'fusion.embedding_file="{tmp_path / "nope.tsv"}"'])
        assert code == 2

    def test_fused_htrans_selects_wide_head(self, corpus_dir, tmp_path):
        # default embed 512 + 768 meds + 3 anthro = 1283-dim head input;
        # epochs=0 keeps the pipeline smoke-fast (initial model, full plumbing)
        out = tmp_path / "run"
        code = main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "htrans", "--mode", "fused", "--pooling", "cls",
                     "--budget", "256", "--epochs", "0",
                     "--set", "model.vocab_size=600", "--out", str(out)])
        assert code == 0
        import numpy as np

        with np.load(out / "fold0.npz") as ckpt:
            assert ckpt["head.net.0.weight"].shape == (256, 1283)


class TestZeroshot:
    def test_mock_backend_deterministic(self, corpus_dir, tmp_path, capsys):
        out1, out2 = tmp_path / "z1", tmp_path / "z2"
        for out in (out1, out2):
            code = main(["zeroshot", "--corpus", str(corpus_dir / "corpus.jsonl"),
                         "--backend", "mock", "--out", str(out)])
            assert code == 0
        a = json.loads((out1 / "zeroshot.json").read_text())
        b = json.loads((out2 / "zeroshot.json").read_text())
        assert a["predictions"] == b["predictions"]
        assert a["report"]["mean"]["f1"] == 1.0

    def test_http_backend_without_key_exits_2(self, corpus_dir, monkeypatch, capsys):
        monkeypatch.delenv("CHAT_API_KEY", raising=False)
        code = main(["zeroshot", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--backend", "http", "--endpoint", "http://example.invalid"])
        assert code == 2
        assert "CHAT_API_KEY" in capsys.readouterr().err

    def test_warm_cache_rerun_issues_zero_calls(self, corpus_dir, tmp_path, capsys):
        cache = tmp_path / "cache.jsonl"
        args = ["zeroshot", "--corpus", str(corpus_dir / "corpus.jsonl"),
                "--backend", "mock", "--cache", str(cache)]
        assert main(args) == 0
        capsys.readouterr()
        assert main(args) == 0
        assert "0 backend calls" in capsys.readouterr().out


class TestReport:
    def test_merges_runs_sorted_by_run_id(self, corpus_dir, tmp_path, capsys):
        dirs = []
        for i, family in enumerate(("dummy", "oracle")):
            out = tmp_path / f"run{i}"
            assert main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                         "--model", family, "--out", str(out)]) == 0
            dirs.append(str(out))
        capsys.readouterr()
        assert main(["report", *dirs]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if "[" in l]
        run_ids = [l.split("[")[1].split("]")[0] for l in lines]
        assert run_ids == sorted(run_ids)

    def test_one_run_one_row(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--corpus", str(corpus_dir / "corpus.jsonl"),
                     "--model", "oracle", "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        body = capsys.readouterr().out.strip().splitlines()
        assert len(body) == 3  # header, rule, single row

    def test_missing_report_dir_exits_2(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 2
