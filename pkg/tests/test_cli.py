import hashlib
import json

import numpy as np
import pytest

from ttprogress.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    """A tiny synthetic bundle plus a trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("clibench")
    data = root / "data"
    spec = root / "synth.cfg"
    spec.write_text(
        "d = 6\nn_tasks = 2\nn_train = 6\nn_eval = 3\nlen_range = 6, 9\n"
        "noise_scale = 0.4\nseed = 42\n")
    assert run(["synth", "--spec", str(spec), "--out", str(data)]) == EXIT_OK
    cfg = root / "train.cfg"
    cfg.write_text(
        "dprime = 2\nd_head = 2\nepochs = 2\nbatch_size = 3\nb = 2\nw_tr = 4\n"
        "lr = 0.01\nlambda_self = 0.1\nseed = 3\n")
    ckpt = root / "model.ttpm"
    assert run(["train", "--data", str(data / "manifest.txt"),
                "--config", str(cfg), "--out", str(ckpt)]) == EXIT_OK
    return {"root": root, "data": data, "spec": spec, "cfg": cfg, "ckpt": ckpt}


class TestSynth:
    def test_refuses_nonempty_without_force(self, bench_dir):
        code = run(["synth", "--spec", str(bench_dir["spec"]),
                    "--out", str(bench_dir["data"])])
        assert code == EXIT_USAGE

    def test_force_overwrite_and_determinism(self, bench_dir, tmp_path):
        out2 = tmp_path / "data2"
        assert run(["synth", "--spec", str(bench_dir["spec"]),
                    "--out", str(out2)]) == EXIT_OK
        for name in ("train.ttpe", "id.ttpe", "es.ttpe", "em.ttpe", "es_em.ttpe"):
            h1 = hashlib.sha256((bench_dir["data"] / name).read_bytes()).hexdigest()
            h2 = hashlib.sha256((out2 / name).read_bytes()).hexdigest()
            assert h1 == h2, name

    def test_bad_spec_key(self, tmp_path):
        spec = tmp_path / "bad.cfg"
        spec.write_text("bogus = 1\n")
        assert run(["synth", "--spec", str(spec),
                    "--out", str(tmp_path / "out")]) == EXIT_DATA

    def test_invalid_spec_values(self, tmp_path):
        spec = tmp_path / "bad.cfg"
        spec.write_text("noise_rho = 1.5\n")
        assert run(["synth", "--spec", str(spec),
                    "--out", str(tmp_path / "out")]) == EXIT_DATA


class TestTrain:
    def test_checkpoint_determinism(self, bench_dir, tmp_path):
        ckpt2 = tmp_path / "again.ttpm"
        assert run(["train", "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--config", str(bench_dir["cfg"]), "--out", str(ckpt2)]) == EXIT_OK
        assert ckpt2.read_bytes() == bench_dir["ckpt"].read_bytes()
        assert ckpt2.with_suffix(".loss.csv").exists()

    def test_missing_manifest(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "none.txt"),
                    "--out", str(tmp_path / "m.ttpm")]) == EXIT_DATA

    def test_bad_config_key(self, bench_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("wrongo = 2\n")
        assert run(["train", "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--config", str(cfg), "--out", str(tmp_path / "m.ttpm")]) == EXIT_DATA


class TestEval:
    def test_eval_runs_and_writes_reports(self, bench_dir, tmp_path, capsys):
        rep = tmp_path / "rep.json"
        preds = tmp_path / "preds.csv"
        code = run(["eval", "--model", str(bench_dir["ckpt"]),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--variant", "ttt-im", "--report-out", str(rep),
                    "--preds-out", str(preds)])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[0].startswith("shift\tsplit")
        payload = json.loads(rep.read_text())
        assert payload["estimator"] == "TTT-IM"
        assert {s["split"] for s in payload["splits"]} == {"id", "es", "em", "es_em"}
        assert preds.read_text().startswith("split,trajectory,frame,prediction")

    def test_ex_with_k0_matches_rs(self, bench_dir, tmp_path):
        outs = {}
        for variant, extra in (("ttt-ex", ["--eta", "0.1", "--k", "0"]),
                               ("ttt-rs", ["--eta", "0.1"])):
            preds = tmp_path / f"{variant}.csv"
            assert run(["eval", "--model", str(bench_dir["ckpt"]),
                        "--data", str(bench_dir["data"] / "manifest.txt"),
                        "--variant", variant, "--splits", "id",
                        "--preds-out", str(preds)] + extra) == EXIT_OK
            outs[variant] = preds.read_text()
        assert outs["ttt-ex"] == outs["ttt-rs"]

    def test_invalid_variant_flag_combo(self, bench_dir):
        code = run(["eval", "--model", str(bench_dir["ckpt"]),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--variant", "ttt-im", "--k", "3"])
        assert code == EXIT_USAGE

    def test_corrupt_checkpoint(self, bench_dir, tmp_path):
        bad = tmp_path / "bad.ttpm"
        bad.write_bytes(b"NOPE" + bench_dir["ckpt"].read_bytes()[4:])
        code = run(["eval", "--model", str(bad),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--variant", "ttt-im"])
        assert code == EXIT_DATA


class TestBaseline:
    def test_clip(self, bench_dir, capsys):
        assert run(["baseline", "--method", "clip",
                    "--data", str(bench_dir["data"] / "manifest.txt")]) == EXIT_OK
        assert "CLIP" in capsys.readouterr().out

    def test_vlmrm_requires_embedding(self, bench_dir):
        assert run(["baseline", "--method", "vlmrm",
                    "--data", str(bench_dir["data"] / "manifest.txt")]) == EXIT_USAGE

    def test_vlmrm_with_embedding(self, bench_dir, tmp_path):
        vec = tmp_path / "base.txt"
        np.savetxt(vec, np.ones(6) * 0.3)
        assert run(["baseline", "--method", "vlmrm", "--baseline-embedding", str(vec),
                    "--data", str(bench_dir["data"] / "manifest.txt")]) == EXIT_OK

    def test_clipft_train_save_reload(self, bench_dir, tmp_path, capsys):
        ckpt = tmp_path / "ft.npz"
        assert run(["baseline", "--method", "clipft", "--train",
                    "--config", str(bench_dir["cfg"]),
                    "--checkpoint-out", str(ckpt),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--splits", "id"]) == EXIT_OK
        first = capsys.readouterr().out
        assert run(["baseline", "--method", "clipft", "--checkpoint", str(ckpt),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--splits", "id"]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_clipft_needs_source(self, bench_dir):
        assert run(["baseline", "--method", "clipft",
                    "--data", str(bench_dir["data"] / "manifest.txt")]) == EXIT_USAGE


class TestGradcheck:
    def test_first_order(self, capsys):
        assert run(["gradcheck"]) == EXIT_OK
        assert "gradcheck passed" in capsys.readouterr().out

    def test_second_order(self, capsys):
        assert run(["gradcheck", "--second-order"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "meta/unrolled" in out and "gradcheck passed" in out


class TestReportAndSweep:
    def test_report_merge(self, bench_dir, tmp_path, capsys):
        r1 = tmp_path / "a.json"
        assert run(["eval", "--model", str(bench_dir["ckpt"]),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--variant", "ttt-rs", "--splits", "id",
                    "--report-out", str(r1)]) == EXIT_OK
        capsys.readouterr()
        assert run(["report", str(r1), "--format", "md"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.startswith("| shift | split | TTT-RS |")

    def test_sweep(self, bench_dir, capsys):
        assert run(["sweep", "--model", str(bench_dir["ckpt"]),
                    "--data", str(bench_dir["data"] / "manifest.txt"),
                    "--variant", "ttt-ex", "--etas", "0.1", "--ks", "0,3",
                    "--splits", "id"]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "eta\tk\tmean_voc"
        assert len(lines) == 3


class TestUsage:
    def test_no_command(self):
        assert run([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert run(["frobnicate"]) == EXIT_USAGE
