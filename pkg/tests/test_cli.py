import os
from pathlib import Path

import pytest

from textcomp import RDCurve, RDPoint
from textcomp.cli import _write_sweep_bd_reports, main
from textcomp.metrics import read_results_csv, write_curve_csv

pytestmark = pytest.mark.usefixtures("no_cache_env")


@pytest.fixture
def no_cache_env(monkeypatch):
    monkeypatch.delenv("TEXTCOMP_CACHE", raising=False)


def write_config(path, **keys):
    lines = [f"{k} = {v}" for k, v in keys.items()]
    Path(path).write_text("\n".join(lines) + "\n")
    return str(path)


def tree_bytes(root):
    """{relative path: content} for every file under root."""
    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def cli_ws(tmp_path_factory, corpus_dir):
    """One precomputed cache plus one short training run, shared read-only."""
    saved = os.environ.pop("TEXTCOMP_CACHE", None)
    root = tmp_path_factory.mktemp("cliws")
    cache = root / "cache"
    run = root / "run"
    argv = ["precompute", "--data", str(corpus_dir), "--cache", str(cache)]
    assert main(argv + ["--split", "train"]) == 0
    assert main(argv + ["--split", "test"]) == 0
    config = write_config(
        root / "train.cfg",
        lmbda=0.01, kappa=0.1, lr=0.001, batch_size=2, epochs=1,
        seed=0, max_steps=2, model_channels=8,
        data=corpus_dir, cache=cache, out=run,
    )
    assert main(["train", "--config", config]) == 0
    yield {
        "root": root,
        "cache": cache,
        "corpus": corpus_dir,
        "config": config,
        "run": run,
        "checkpoint": run / "checkpoint.bin",
    }
    if saved is not None:
        os.environ["TEXTCOMP_CACHE"] = saved


class TestPrecompute:
    def test_success(self, tmp_path, corpus_dir, capsys):
        cache = tmp_path / "cache"
        rc = main(["precompute", "--data", str(corpus_dir),
                   "--cache", str(cache), "--split", "train"])
        assert rc == 0
        manifest = cache / "train_manifest.txt"
        assert manifest.exists()
        assert "manifest:" in capsys.readouterr().out
        assert (cache / "img0" / "regions.idx").exists()

    def test_custom_manifest_path(self, tmp_path, corpus_dir):
        out = tmp_path / "m.txt"
        rc = main(["precompute", "--data", str(corpus_dir),
                   "--cache", str(tmp_path / "c"), "--split", "test",
                   "--out", str(out)])
        assert rc == 0
        assert out.exists()

    def test_no_images_is_fatal(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["precompute", "--data", str(empty),
                   "--cache", str(tmp_path / "c"), "--split", "train"])
        assert rc == 1
        assert "no images found" in capsys.readouterr().err

    def test_no_cache_anywhere_is_fatal(self, corpus_dir, capsys):
        rc = main(["precompute", "--data", str(corpus_dir), "--split", "train"])
        assert rc == 1
        assert "no cache directory" in capsys.readouterr().err

    def test_env_overrides_flag(self, tmp_path, corpus_dir, monkeypatch):
        env_cache = tmp_path / "env_cache"
        flag_cache = tmp_path / "flag_cache"
        monkeypatch.setenv("TEXTCOMP_CACHE", str(env_cache))
        rc = main(["precompute", "--data", str(corpus_dir),
                   "--cache", str(flag_cache), "--split", "train"])
        assert rc == 0
        assert (env_cache / "img0" / "regions.idx").exists()
        assert not flag_cache.exists()

    def test_unreadable_image_warns(self, tmp_path, corpus_dir, capsys):
        data = tmp_path / "data"
        data.mkdir()
        for p in Path(corpus_dir).glob("*.png"):
            (data / p.name).write_bytes(p.read_bytes())
        (data / "broken.png").write_bytes(b"not an image")
        rc = main(["precompute", "--data", str(data),
                   "--cache", str(tmp_path / "c"), "--split", "test"])
        assert rc == 2
        assert "warning:" in capsys.readouterr().err

    def test_jobs_do_not_change_outputs(self, tmp_path, corpus_dir):
        trees = []
        for jobs, name in (("1", "a"), ("3", "b")):
            cache = tmp_path / name
            rc = main(["precompute", "--data", str(corpus_dir),
                       "--cache", str(cache), "--split", "train",
                       "--jobs", jobs])
            assert rc == 0
            trees.append(tree_bytes(cache))
        assert trees[0] == trees[1]


class TestTrain:
    def test_artifacts(self, cli_ws):
        run = cli_ws["run"]
        assert (run / "checkpoint.bin").exists()
        assert (run / "checkpoint.meta").exists()
        assert (run / "trace.csv").exists()
        assert (run / "train.log").exists()

    def test_config_echo(self, cli_ws):
        text = (cli_ws["run"] / "config.txt").read_text()
        assert "kappa = 0.1" in text
        assert "lmbda = 0.01" in text
        assert "model_channels = 8" in text

    def test_log_has_start_and_end(self, cli_ws):
        lines = (cli_ws["run"] / "train.log").read_text().splitlines()
        assert lines[0].startswith("start ")
        assert lines[-1].startswith("end ")

    def test_unknown_config_key(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.cfg", lmbda=0.01, bogus=1,
                              data="d", cache="c", out="o")
        rc = main(["train", "--config", config])
        assert rc == 1
        assert "unknown config key 'bogus'" in capsys.readouterr().err

    def test_missing_config_key(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.cfg", data="d", cache="c", out="o")
        rc = main(["train", "--config", config])
        assert rc == 1
        assert "missing config key 'lmbda'" in capsys.readouterr().err

    def test_duplicate_config_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("lmbda = 0.1\nlmbda = 0.2\n")
        rc = main(["train", "--config", str(tmp_path / "c.cfg")])
        assert rc == 1
        assert "duplicate config key 'lmbda'" in capsys.readouterr().err

    def test_malformed_config_line(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("lmbda=0.1\n")
        rc = main(["train", "--config", str(tmp_path / "c.cfg")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "expected 'key = value'" in err
        assert "c.cfg:1" in err

    def test_kappa_override_changes_only_text_terms(self, tmp_path, cli_ws):
        out = tmp_path / "kap0"
        config = write_config(
            tmp_path / "t.cfg",
            lmbda=0.01, kappa=0.1, lr=0.001, batch_size=2, epochs=1,
            seed=0, max_steps=2, model_channels=8,
            data=cli_ws["corpus"], cache=cli_ws["cache"], out=out,
        )
        rc = main(["train", "--config", config, "--kappa", "0"])
        assert rc == 0
        assert "kappa = 0.0" in (out / "config.txt").read_text()

        base_row = (cli_ws["run"] / "trace.csv").read_text().splitlines()[1]
        zero_row = (out / "trace.csv").read_text().splitlines()[1]
        base = base_row.split(",")
        zero = zero_row.split(",")
        # same seed and data: step-0 model state is identical, so the
        # rate and distortion terms agree and only the text term moves
        assert base[1:4] == zero[1:4]
        assert float(zero[4]) == 0.0
        assert float(base[4]) > 0.0
        assert float(base[5]) != float(zero[5])

    def test_resume_reaches_same_checkpoint(self, tmp_path, cli_ws):
        shared = dict(
            lmbda=0.01, kappa=0.1, lr=0.001, batch_size=2, epochs=1,
            seed=0, max_steps=2, checkpoint_every=1, model_channels=8,
            data=cli_ws["corpus"], cache=cli_ws["cache"],
        )
        full_out = tmp_path / "full"
        config = write_config(tmp_path / "full.cfg", out=full_out, **shared)
        assert main(["train", "--config", config]) == 0

        resumed_out = tmp_path / "resumed"
        config2 = write_config(tmp_path / "resumed.cfg", out=resumed_out, **shared)
        rc = main(["train", "--config", config2,
                   "--resume", str(full_out / "checkpoint_step000001.bin")])
        assert rc == 0
        assert (resumed_out / "checkpoint.bin").read_bytes() == (
            full_out / "checkpoint.bin"
        ).read_bytes()


class TestEval:
    def eval_argv(self, cli_ws, out, *extra):
        return ["eval", "--data", str(cli_ws["corpus"]),
                "--cache", str(cli_ws["cache"]), "--out", str(out), *extra]

    def test_identity_model_perfect(self, tmp_path, cli_ws, capsys):
        out = tmp_path / "r.csv"
        rc = main(self.eval_argv(cli_ws, out, "--model", "identity"))
        assert rc == 0
        assert "results:" in capsys.readouterr().out
        records = read_results_csv(out)
        assert len(records) == 4
        assert all(r.cer == 0.0 and r.wer == 0.0 for r in records)
        assert all(r.psnr == 99.0 and r.bpp == 0.0 for r in records)
        assert "MEAN" in out.read_text()

    def test_checkpoint_eval(self, tmp_path, cli_ws):
        out = tmp_path / "r.csv"
        rc = main(self.eval_argv(
            cli_ws, out, "--checkpoint", str(cli_ws["checkpoint"]),
            "--model-channels", "8",
        ))
        assert rc == 0
        records = read_results_csv(out)
        assert all(r.bpp > 0 for r in records)
        assert all(r.psnr < 99.0 for r in records)

    def test_missing_checkpoint_is_fatal(self, tmp_path, cli_ws, capsys):
        rc = main(self.eval_argv(
            cli_ws, tmp_path / "r.csv", "--checkpoint", str(tmp_path / "nope.bin"),
        ))
        assert rc == 1
        assert "checkpoint not found" in capsys.readouterr().err

    def test_rerun_and_jobs_byte_identical(self, tmp_path, cli_ws):
        outputs = []
        for name, jobs in (("a.csv", "1"), ("b.csv", "1"), ("c.csv", "3")):
            out = tmp_path / name
            rc = main(self.eval_argv(cli_ws, out, "--model", "identity",
                                     "--jobs", jobs))
            assert rc == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1] == outputs[2]

    def test_limit(self, tmp_path, cli_ws):
        out = tmp_path / "r.csv"
        rc = main(self.eval_argv(cli_ws, out, "--model", "identity",
                                 "--limit", "2"))
        assert rc == 0
        assert len(read_results_csv(out)) == 2


def curve_csv(path, label, kind, bpps, values):
    curve = RDCurve(label, kind, [RDPoint(b, v) for b, v in zip(bpps, values)])
    write_curve_csv(path, [curve])
    return path


BPPS = (0.2, 0.4, 0.8, 1.6)
CERS = (0.40, 0.25, 0.12, 0.05)


class TestBd:
    def test_bd_rate(self, tmp_path, capsys):
        ref = curve_csv(tmp_path / "ref.csv", "base", "cer", BPPS, CERS)
        target = curve_csv(tmp_path / "tgt.csv", "ours", "cer",
                           tuple(b * 2 for b in BPPS), CERS)
        out = tmp_path / "report.txt"
        rc = main(["bd", "--reference", str(ref), "--target", str(target),
                   "--metric", "rate", "--out", str(out)])
        assert rc == 0
        text = out.read_text()
        assert text.startswith("textcomp-bd-report v1")
        assert "metric = bd-rate (on cer)" in text
        value = [l for l in text.splitlines() if l.startswith("value_percent")][0]
        assert abs(float(value.split(" = ")[1]) - 100.0) < 1e-6
        assert capsys.readouterr().out == text

    def test_bd_metric(self, tmp_path):
        ref = curve_csv(tmp_path / "ref.csv", "base", "cer", BPPS, CERS)
        target = curve_csv(tmp_path / "tgt.csv", "ours", "cer",
                           BPPS, tuple(c * 0.5 for c in CERS))
        out = tmp_path / "report.txt"
        rc = main(["bd", "--reference", str(ref), "--target", str(target),
                   "--metric", "cer", "--out", str(out)])
        assert rc == 0
        text = out.read_text()
        assert "metric = bd-cer" in text
        value = [l for l in text.splitlines() if l.startswith("value_percent")][0]
        assert abs(float(value.split(" = ")[1]) + 50.0) < 1e-6

    def test_no_overlap_exit_code(self, tmp_path, capsys):
        ref = curve_csv(tmp_path / "ref.csv", "base", "cer", BPPS, CERS)
        target = curve_csv(tmp_path / "tgt.csv", "ours", "cer",
                           (100.0, 200.0, 400.0, 800.0),
                           (0.004, 0.0025, 0.0012, 0.0005))
        out = tmp_path / "report.txt"
        rc = main(["bd", "--reference", str(ref), "--target", str(target),
                   "--metric", "rate", "--out", str(out)])
        assert rc == 3
        assert "curve ranges do not overlap" in capsys.readouterr().err
        assert "valid = false" in out.read_text()  # report is still written

    def test_ambiguous_curves_need_label(self, tmp_path, capsys):
        ref = tmp_path / "ref.csv"
        write_curve_csv(ref, [
            RDCurve("a", "cer", [RDPoint(b, v) for b, v in zip(BPPS, CERS)]),
            RDCurve("b", "cer", [RDPoint(b * 2, v) for b, v in zip(BPPS, CERS)]),
        ])
        target = curve_csv(tmp_path / "tgt.csv", "ours", "cer", BPPS, CERS)
        out = tmp_path / "report.txt"
        argv = ["bd", "--reference", str(ref), "--target", str(target),
                "--metric", "rate", "--out", str(out)]
        assert main(argv) == 1
        assert "ambiguous" in capsys.readouterr().err
        assert main(argv + ["--reference-label", "a"]) == 0

    def test_missing_kind_is_fatal(self, tmp_path, capsys):
        ref = curve_csv(tmp_path / "ref.csv", "base", "psnr", BPPS, (28, 30, 32, 34))
        target = curve_csv(tmp_path / "tgt.csv", "ours", "cer", BPPS, CERS)
        rc = main(["bd", "--reference", str(ref), "--target", str(target),
                   "--metric", "rate", "--out", str(tmp_path / "r.txt")])
        assert rc == 1
        assert "no curve with metric_kind='cer'" in capsys.readouterr().err


class TestSweep:
    def test_single_job_sweep(self, tmp_path, cli_ws):
        out = tmp_path / "sweep"
        config = write_config(
            tmp_path / "s.cfg",
            lmbda=0.01, kappa=0.1, lr=0.001, batch_size=4, epochs=1,
            seed=0, max_steps=1, model_channels=8,
            lambdas="0.01", kappas="0",
            data=cli_ws["corpus"], cache=cli_ws["cache"], out=out,
        )
        rc = main(["sweep", "--config", config])
        assert rc == 0
        assert (out / "sweep_manifest.txt").exists()
        assert (out / "curves.csv").exists()
        assert (out / "curve_cer.png").exists()
        assert (out / "config.txt").exists()
        assert (out / "lam0.01_kap0" / "checkpoint.bin").exists()
        manifest = (out / "sweep_manifest.txt").read_text()
        assert "status=ok" in manifest

    def test_missing_grid_keys(self, tmp_path, cli_ws, capsys):
        config = write_config(
            tmp_path / "s.cfg",
            lmbda=0.01, data=cli_ws["corpus"], cache=cli_ws["cache"],
            out=tmp_path / "sweep",
        )
        rc = main(["sweep", "--config", config])
        assert rc == 1
        assert "missing config key 'kappas'" in capsys.readouterr().err

    def test_flat_quality_axis_skips_rate_report(self, tmp_path):
        # short runs can plateau: every rate lands on the same cer.  that is
        # a fine integration *range* for bd-cer but unusable as the
        # integration *axis* for bd-rate, which must degrade to a warning
        flat = [RDPoint(0.1, 0.5), RDPoint(0.2, 0.5), RDPoint(0.4, 0.5)]
        curves = [
            RDCurve(label="kappa=0", metric_kind="cer", points=flat),
            RDCurve(label="kappa=0.1", metric_kind="cer", points=flat),
        ]
        skipped = _write_sweep_bd_reports(curves, (0.0, 0.1), tmp_path)
        assert len(skipped) == 1
        assert skipped[0].startswith("bd-rate kappa=0.1 skipped:")
        assert "duplicate abscissa" in skipped[0]
        assert (tmp_path / "bd_cer_kap0.1.txt").exists()
        assert not (tmp_path / "bd_rate_kap0.1.txt").exists()
