import contextlib
import io
import json
import time

import numpy as np
import pytest

from geomattn import cli
from geomattn.config import RunConfig
from geomattn.data import pnm
from geomattn.data.manifest import load_dataset
from geomattn.model import GeomAttnModel, ModelConfig
from geomattn.training import load_checkpoint, save_checkpoint


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    code, out, _ = run("gen", "--out", root / "data", "--ids", 4, "--per-id", 6, "--seed", 3,
                       "--test-ids", 2)
    assert code == 0
    RunConfig(widths=(4, 6, 8), P=2, K_img=2, epochs=40, max_steps=20).save(root / "run.cfg")
    code, train_out, _ = run("train", "--config", root / "run.cfg", "--data", root / "data",
                             "--out", root / "run")
    assert code == 0
    return {"root": root, "gen": json.loads(out), "train": json.loads(train_out),
            "seconds": time.perf_counter() - t0}


class TestPipeline:
    def test_gen_summary(self, pipeline):
        assert pipeline["gen"] == {"images": 24, "identities": 4, "train": 12, "query": 4,
                                   "gallery": 8}

    def test_train_writes_run_directory(self, pipeline):
        run_dir = pipeline["root"] / "run"
        for name in ("run.cfg", "loss.jsonl", "metrics.json", "ckpt/params.gatn",
                     "ckpt/manifest.tsv", "ckpt/optim.gatn", "ckpt/model.cfg"):
            assert (run_dir / name).is_file(), name
        assert len((run_dir / "loss.jsonl").read_text().splitlines()) == 20
        assert set(pipeline["train"]) == {"imap", "tmap", "top1", "top5", "n_queries",
                                          "n_excluded"}

    def test_pipeline_is_fast(self, pipeline):
        assert pipeline["seconds"] < 60

    def test_eval_matches_train_report_and_repeats(self, pipeline):
        root = pipeline["root"]
        args = ("eval", "--ckpt", root / "run" / "ckpt", "--data", root / "data")
        a, b = run(*args), run(*args)
        assert a[0] == 0 and a[1] == b[1]
        assert json.loads(a[1]) == pipeline["train"]

    def test_per_query_tsv(self, pipeline):
        root = pipeline["root"]
        code, _, _ = run("eval", "--ckpt", root / "run" / "ckpt", "--data", root / "data",
                         "--per-query", root / "pq.tsv")
        lines = (root / "pq.tsv").read_text().splitlines()
        assert code == 0 and lines[0] == "query\tap\tfirst_hit" and len(lines) == 5

    def test_attention_export(self, pipeline):
        root = pipeline["root"]
        image = root / "data" / load_dataset(root / "data").records[0].path
        code, out, _ = run("attn", "--ckpt", root / "run" / "ckpt", "--image", image,
                           "--out", root / "attn" / "q0")
        assert code == 0
        Q = np.loadtxt(root / "attn" / "q0.csv", delimiter=",")
        assert Q.shape == (8, 8) and abs(Q.sum() - 1.0) < 1e-6
        summary = json.loads(out)
        assert abs(summary["sum"] - 1.0) < 1e-6
        assert tuple(summary["argmax"]) == np.unravel_index(np.argmax(Q), Q.shape)
        gray = pnm.read(root / "attn" / "q0.pgm")
        assert gray.shape == (8, 8) and gray.max() == 255
        overlay = pnm.read(root / "attn" / "q0_overlay.ppm")
        assert overlay.shape == pnm.read(image).shape

    def test_csv_round_trips_exactly(self, pipeline):
        root = pipeline["root"]
        m = load_dataset(root / "data")
        image = root / "data" / m.records[1].path
        run("attn", "--ckpt", root / "run" / "ckpt", "--image", image, "--out", root / "q1")
        want = load_checkpoint(root / "run" / "ckpt").attention_maps(pnm.read_chw(image)[None])[0]
        assert np.array_equal(np.loadtxt(root / "q1.csv", delimiter=","), want)


class TestErrors:
    def test_refuses_non_empty_output(self, tmp_path):
        (tmp_path / "keep.txt").write_text("x")
        code, _, err = run("gen", "--out", tmp_path, "--ids", 2, "--per-id", 2)
        assert code == 2 and "--force" in err
        assert (tmp_path / "keep.txt").exists()
        code, _, _ = run("gen", "--out", tmp_path, "--ids", 2, "--per-id", 2, "--force")
        assert code == 0 and not (tmp_path / "keep.txt").exists()

    def test_attn_rejects_non_square(self, pipeline, tmp_path):
        pnm.write(tmp_path / "wide.ppm", np.zeros((64, 72, 3), np.uint8))
        code, _, err = run("attn", "--ckpt", pipeline["root"] / "run" / "ckpt",
                           "--image", tmp_path / "wide.ppm", "--out", tmp_path / "x")
        assert code == 2 and "square" in err

    def test_attn_rejects_side_not_divisible(self, pipeline, tmp_path):
        pnm.write(tmp_path / "odd.ppm", np.zeros((60, 60, 3), np.uint8))
        code, _, err = run("attn", "--ckpt", pipeline["root"] / "run" / "ckpt",
                           "--image", tmp_path / "odd.ppm", "--out", tmp_path / "x")
        assert code == 2 and "divisible" in err

    def test_checkpoint_shape_mismatch(self, pipeline, tmp_path):
        ckpt = tmp_path / "ckpt"
        save_checkpoint(ckpt, GeomAttnModel(ModelConfig(n_ids=2, widths=(4, 6, 8))))
        cfg = (ckpt / "model.cfg").read_text().replace("widths = 4,6,8", "widths = 4,6,10")
        (ckpt / "model.cfg").write_text(cfg)
        code, _, err = run("eval", "--ckpt", ckpt, "--data", pipeline["root"] / "data")
        assert code == 2 and "shape mismatch" in err and "10" in err

    def test_missing_checkpoint(self, tmp_path):
        code, _, err = run("eval", "--ckpt", tmp_path / "none", "--data", tmp_path)
        assert code == 2 and "error" in err

    def test_non_finite_loss_aborts(self, pipeline, tmp_path):
        RunConfig(widths=(4, 6, 8), P=2, K_img=2, max_steps=3,
                  gamma_init=float("nan")).save(tmp_path / "nan.cfg")
        with np.errstate(invalid="ignore"):
            code, _, err = run("train", "--config", tmp_path / "nan.cfg",
                               "--data", pipeline["root"] / "data", "--out", tmp_path / "run")
        assert code == 2 and "l_slb" in err


class TestSeed:
    def test_flag_beats_environment(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "11")
        assert cli._seed_override(None) == 11
        assert cli._seed_override(4) == 4
        monkeypatch.delenv(cli.SEED_ENV)
        assert cli._seed_override(None) is None

    def test_bad_environment_seed(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        code, _, err = run("gen", "--out", tmp_path / "d", "--ids", 2, "--per-id", 2)
        assert code == 2 and cli.SEED_ENV in err

    def test_environment_seed_drives_gen(self, monkeypatch, tmp_path):
        monkeypatch.setenv(cli.SEED_ENV, "8")
        run("gen", "--out", tmp_path / "a", "--ids", 2, "--per-id", 2)
        monkeypatch.delenv(cli.SEED_ENV)
        run("gen", "--out", tmp_path / "b", "--ids", 2, "--per-id", 2, "--seed", 8)
        a = (tmp_path / "a" / "manifest.tsv").read_text()
        assert a == (tmp_path / "b" / "manifest.tsv").read_text()
        first = a.splitlines()[1].split("\t")[0]
        assert (tmp_path / "a" / first).read_bytes() == (tmp_path / "b" / first).read_bytes()


def test_config_command(tmp_path):
    code, out, _ = run("config", "--preset", "gb")
    assert code == 0 and RunConfig.loads(out) == RunConfig(preset="gb")
    run("config", "--out", tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == RunConfig()

