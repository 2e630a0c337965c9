import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from curdkv.cli import main
from curdkv.config import ConfigError, RunConfig, ablation_grid, default_grid
from curdkv.tensorfile import read_cache, read_tensor, write_tensor


@pytest.fixture
def planted(tmp_path):
    out = tmp_path / "cache"
    assert main(["gen", "--kind", "planted_heavy", "-g", "2", "-n", "100", "-d", "16", "--seed", "4", "--out", str(out)]) == 0
    return out


def _write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestGen:
    def test_read_back(self, planted):
        from curdkv.cache import generate_synthetic

        cache, code, manifest = read_cache(planted)
        assert code == 2 and cache.equals(generate_synthetic("planted_heavy", 2, 100, 16, 4))
        assert (manifest["kind"], manifest["seed"], manifest["groups"]) == ("planted_heavy", 4, 2)

    def test_planted_count(self, tmp_path):
        main(["gen", "-g", "1", "-n", "37", "-d", "4", "--p", "0.3", "--out", str(tmp_path)])
        assert len(json.loads((tmp_path / "manifest.json").read_text())["planted"]) == math.ceil(0.3 * 37)

    def test_byte_replay(self, tmp_path):
        for name in ("a", "b"):
            main(["gen", "--kind", "sink_pattern", "-g", "2", "-n", "20", "-d", "4", "--dtype", "f4", "--out", str(tmp_path / name)])
        for f in ("keys.ckv", "values.ckv", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert (tmp_path / "a" / "keys.ckv").read_bytes()[4] == 1

    def test_invalid_params(self, tmp_path, capsys):
        assert main(["gen", "--p", "2.0", "--out", str(tmp_path)]) == 1
        assert main(["gen", "--kind", "laplace", "--out", str(tmp_path)]) == 1


class TestCompress:
    def test_ratio_zero_is_byte_identical(self, planted, tmp_path):
        out = tmp_path / "c"
        assert main(["compress", "--cache", str(planted), "--ratio", "0", "--out", str(out)]) == 0
        for f in ("keys.ckv", "values.ckv"):
            assert (out / f).read_bytes() == (planted / f).read_bytes()

    def test_ratio_point_nine(self, planted, tmp_path):
        out = tmp_path / "c"
        assert main(["compress", "--cache", str(planted), "--ratio", "0.9", "--out", str(out)]) == 0
        keys, _ = read_tensor(out / "keys.ckv")
        assert keys.shape == (2, 10, 16)
        doc = json.loads((out / "selection.json").read_text())
        assert all(ix[:4] == [0, 1, 2, 3] and len(ix) == 10 for ix in doc["indices"])

    def test_rerun_identical_json(self, planted, tmp_path):
        for name in ("a", "b"):
            main(["compress", "--keys", str(planted / "keys.ckv"), "--values", str(planted / "values.ckv"), "--ratio", "0.5", "--seed", "3", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "selection.json").read_bytes() == (tmp_path / "b" / "selection.json").read_bytes()

    def test_adaptive_ragged_output(self, tmp_path):
        from curdkv.cache import KVCache
        from curdkv.tensorfile import write_cache

        rng = np.random.default_rng(0)
        keys = rng.standard_normal((2, 30, 4))
        values = rng.standard_normal((2, 30, 4))
        values[0, 10:20] *= 50.0  # group 0 carries heavy rows
        write_cache(tmp_path / "in", KVCache(keys, values))
        out = tmp_path / "c"
        main(["compress", "--cache", str(tmp_path / "in"), "--policy", "adacurdkv", "--budget-k", "10", "--method", "exact_leverage_kv", "--out", str(out)])
        doc = json.loads((out / "selection.json").read_text())
        assert sum(doc["granted"]) == 20
        sizes = [read_tensor(out / f"keys_g{i}.ckv")[0].shape[0] for i in range(2)]
        assert sizes == doc["granted"]

    def test_budget_above_tokens(self, planted, tmp_path):
        assert main(["compress", "--cache", str(planted), "--budget-k", "101", "--out", str(tmp_path / "c")]) == 1

    def test_ratio_and_budget_exclusive(self, planted, tmp_path):
        assert main(["compress", "--cache", str(planted), "--ratio", "0.5", "--budget-k", "3", "--out", str(tmp_path)]) == 1

    def test_shape_mismatch_names_path(self, tmp_path, capsys):
        write_tensor(tmp_path / "k.ckv", np.ones((1, 3, 2)))
        write_tensor(tmp_path / "v.ckv", np.ones((1, 4, 2)))
        assert main(["compress", "--keys", str(tmp_path / "k.ckv"), "--values", str(tmp_path / "v.ckv"), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "v.ckv" in err and "(1, 3, 2)" in err

    def test_f4_output_keeps_width(self, tmp_path):
        main(["gen", "-g", "1", "-n", "20", "-d", "4", "--dtype", "f4", "--out", str(tmp_path / "in")])
        main(["compress", "--cache", str(tmp_path / "in"), "--ratio", "0.5", "--out", str(tmp_path / "c")])
        assert (tmp_path / "c" / "keys.ckv").read_bytes()[4] == 1


class TestEvalAndSweep:
    def test_empty_grid_rejected(self, tmp_path):
        doc = default_grid()
        doc["grid"]["ratios"] = []
        assert main(["sweep", _write_config(tmp_path / "c.json", doc), "--out", str(tmp_path / "o")]) == 1

    def test_unknown_key_rejected(self, tmp_path):
        doc = default_grid()
        doc["grid"]["colour"] = "red"
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)
        assert main(["sweep", _write_config(tmp_path / "c.json", doc), "--out", str(tmp_path / "o")]) == 1

    def test_single_cell_eval(self, planted, tmp_path):
        out = tmp_path / "o"
        assert main(["eval", "--cache", str(planted), "--ratio", "0", "--out", str(out)]) == 0
        lines = (out / "reports.csv").read_text().splitlines()
        assert len(lines) == 2
        row = dict(zip(lines[0].split(","), lines[1].split(",")))
        assert float(row["eviction_loss"]) == 0.0
        assert not (out / "figures").exists()

    def test_eval_file_queries(self, planted, tmp_path):
        write_tensor(tmp_path / "q.ckv", np.ones((2, 3, 16)))
        out = tmp_path / "o"
        assert main(["eval", "--cache", str(planted), "--ratio", "0.5", "--queries-source", "file", "--queries", str(tmp_path / "q.ckv"), "--out", str(out)]) == 0

    def test_cell_error_exit_code(self, planted, tmp_path):
        write_tensor(tmp_path / "q.ckv", np.ones((2, 3, 5)))
        out = tmp_path / "o"
        assert main(["eval", "--cache", str(planted), "--ratio", "0.5", "--queries-source", "file", "--queries", str(tmp_path / "q.ckv"), "--out", str(out)]) == 2
        assert "ShapeError" in (out / "reports.csv").read_text()

    @pytest.mark.slow
    def test_default_grid_under_a_minute(self, tmp_path):
        cfg = _write_config(tmp_path / "c.json", default_grid())
        t0 = time.perf_counter()
        assert main(["sweep", cfg, "--out", str(tmp_path / "o")]) == 0
        assert time.perf_counter() - t0 < 60
        rows = (tmp_path / "o" / "reports.csv").read_text().splitlines()
        # 3 scored policies x 3 methods x 4 ratios plus window_sinks x 4 ratios
        assert len(rows) == 1 + 3 * 3 * 4 + 4
        for name in ("eviction_loss.png", "eviction_loss_rel.png", "cache_bytes.png"):
            assert (tmp_path / "o" / "figures" / name).stat().st_size > 0

    def test_sweep_replay_bytes(self, tmp_path):
        doc = ablation_grid()
        doc["cache"]["generate"].update(tokens=64, dim=8)
        doc["grid"]["ratios"] = [0.5]
        cfg = _write_config(tmp_path / "c.json", doc)
        for name in ("a", "b"):
            assert main(["sweep", cfg, "--out", str(tmp_path / name), "--workers", "3"]) == 0
        for f in ("reports.csv", "reports.json", "figures/cache_bytes.png"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_output_dir_from_config(self, tmp_path):
        doc = ablation_grid()
        doc["cache"]["generate"].update(tokens=32, dim=4)
        doc["grid"].update(methods=["sketch_kv"], ratios=[0.5])
        doc["output"] = {"dir": "res", "figures": False}
        assert main(["sweep", _write_config(tmp_path / "c.json", doc)]) == 0
        assert (tmp_path / "res" / "reports.json").exists() and not (tmp_path / "res" / "figures").exists()


class TestBoundCheck:
    def test_single_trivial(self, capsys):
        assert main(["bound-check", "--trials", "1", "--max-n", "1"]) == 0
        assert "holds: 1/1" in capsys.readouterr().out

    def test_default_holds(self, capsys):
        assert main(["bound-check"]) == 0
        assert "holds: 1000/1000" in capsys.readouterr().out

    def test_deterministic_text(self, capsys):
        main(["bound-check", "--trials", "50", "--seed", "9"])
        first = capsys.readouterr().out
        main(["bound-check", "--trials", "50", "--seed", "9"])
        assert capsys.readouterr().out == first

    def test_zero_trials_invalid(self):
        assert main(["bound-check", "--trials", "0"]) == 1


def test_usage_errors_exit_one():
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "curdkv", "bound-check", "--trials", "3"], capture_output=True, text=True)
    assert res.returncode == 0 and "holds: 3/3" in res.stdout
