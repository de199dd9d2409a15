from __future__ import annotations

import json

import pytest

from prag.cli import _sha256, env_overrides, load_config, main


def _write_cfg(tmp_path, **extra):
    cfg = {"synth": {"n_users": 8, "n_items": 4, "n_topics": 4, "noise": 0.1, "dim": 16},
           "train": {"epochs": 2, "batch_size": 16},
           "export": {"n_samples": 3}, **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


PIPELINE = ["synth", "train", "retrieve", "explain", "evaluate", "agreement"]


class TestConfig:
    def test_env_overrides_nested(self):
        env = {"PRAG_TRAIN__EPOCHS": "7", "PRAG_SEED": "3", "PRAG_RETRIEVAL__SCOPE": "global",
               "PRAG_NUMBA": "0", "PRAG_ENCODER_URL": "http://x", "HOME": "/"}
        assert env_overrides(env) == {"train": {"epochs": 7}, "seed": 3,
                                      "retrieval": {"scope": "global"}}

    def test_precedence(self, tmp_path):
        path = _write_cfg(tmp_path, seed=1, train={"epochs": 5})
        env = {"PRAG_SEED": "2", "PRAG_TRAIN__EPOCHS": "6"}
        cfg = load_config(path, environ=env)
        assert cfg["seed"] == 2 and cfg["train"]["epochs"] == 6
        cfg = load_config(path, seed=9, environ=env)
        assert cfg["seed"] == 9

    def test_relative_paths_resolve_against_config(self, tmp_path):
        path = _write_cfg(tmp_path, paths={"corpus": "data/corpus"})
        assert load_config(path, environ={})["paths"]["corpus"] == str(tmp_path / "data/corpus")


class TestCommands:
    def test_pipeline_and_determinism(self, tmp_path, capsys, monkeypatch):
        for var in [k for k in __import__("os").environ if k.startswith("PRAG_")]:
            monkeypatch.delenv(var)
        cfg = _write_cfg(tmp_path)
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            for cmd in PIPELINE:
                code, stdout, err = _run(capsys, cmd, "--config", str(cfg), "--out", str(out),
                                         "--seed", "4")
                assert code == 0, err
                assert json.loads(stdout)["command"] == cmd
            digests.append({p.relative_to(out).as_posix(): _sha256(p)
                            for p in sorted(out.rglob("*")) if p.is_file()
                            and not p.name.startswith("manifest")})
            manifest = json.loads((out / "manifest-train.json").read_text())
            assert manifest["seed"] == 4 and set(manifest["versions"]) >= {"prag", "numpy"}
            assert "model.ckpt" in manifest["artifacts"]
        assert digests[0] == digests[1]
        rows = [json.loads(x) for x in (tmp_path / "a" / "explanations.jsonl").read_text()
                .splitlines()]
        assert rows and all(r["evidence"] for r in rows)
        report = json.loads((tmp_path / "a" / "eval_report.json").read_text())
        assert report["rmse"] is not None and report["n_samples"] == len(rows)

    def test_manifest_reproduces_config_hash(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path)
        out = tmp_path / "o"
        assert _run(capsys, "synth", "--config", str(cfg), "--out", str(out))[0] == 0
        m1 = json.loads((out / "manifest-synth.json").read_text())
        assert _run(capsys, "synth", "--config", str(cfg), "--out", str(out))[0] == 0
        m2 = json.loads((out / "manifest-synth.json").read_text())
        assert m1 == m2

    def test_ingest_and_embed(self, tmp_path, capsys):
        src = tmp_path / "reviews.jsonl"
        lines = [{"user": f"u{n % 5}", "item": f"i{n % 3}", "rating": 1 + n % 5,
                  "text": f"review {n} about the pool"} for n in range(15)]
        src.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
        cfg = _write_cfg(tmp_path, paths={"input": "reviews.jsonl"},
                         encoder={"backend": "toy-hash", "dim": 16})
        out = tmp_path / "o"
        assert _run(capsys, "ingest", "--config", str(cfg), "--out", str(out))[0] == 0
        assert _run(capsys, "embed", "--config", str(cfg), "--out", str(out))[0] == 0
        assert (out / "store.bin").exists() and (out / "corpus" / "records.jsonl").exists()

    def test_missing_explanations_exit_2(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path)
        out = tmp_path / "o"
        _run(capsys, "synth", "--config", str(cfg), "--out", str(out))
        code, _, err = _run(capsys, "evaluate", "--config", str(cfg), "--out", str(out))
        assert code == 2
        payload = json.loads(err)
        assert payload["error"] == "missing_artifact"
        assert payload["path"].endswith("explanations.jsonl")

    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert _run(capsys, "train", "--config", str(tmp_path / "nope.json"))[0] == 2

    def test_validation_exit_3(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, train={"tie_axis": "sideways"})
        out = tmp_path / "o"
        _run(capsys, "synth", "--config", str(cfg), "--out", str(out))
        code, _, err = _run(capsys, "train", "--config", str(cfg), "--out", str(out))
        assert code == 3 and json.loads(err)["error"] == "validation"

    def test_malformed_input_exit_3(self, tmp_path, capsys):
        (tmp_path / "reviews.jsonl").write_text('{"user": "u1"}\n')
        cfg = _write_cfg(tmp_path, paths={"input": "reviews.jsonl"})
        code, _, err = _run(capsys, "ingest", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert code == 3 and "line 1" in json.loads(err)["message"]

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        cfg = _write_cfg(tmp_path, encoder={"backend": "http", "dim": 8,
                                            "url": "http://127.0.0.1:9/"})
        out = tmp_path / "o"
        _run(capsys, "synth", "--config", str(cfg), "--out", str(out))
        code, _, err = _run(capsys, "embed", "--config", str(cfg), "--out", str(out))
        assert code == 1 and json.loads(err)["error"] == "runtime"

    def test_unknown_command(self, capsys):
        with pytest.raises(SystemExit):
            main(["dance", "--config", "x"])
