import pytest

import offnadir.bin.offnadir as offnadir_main
import offnadir.version as version_module
from offnadir.bin.util import read_run_meta
from offnadir.data import Manifest
from offnadir.evaluation import read_ablation_csv, read_report, read_sidecar
from offnadir.netpbm import read_pnm
from offnadir.tensor import read_ten

from .conftest import TINY_ANGLES, TINY_SIZE

ANGLES = "--angles=" + ",".join(str(angle) for angle in TINY_ANGLES)
TINY_MODEL = ["--size", str(TINY_SIZE), "--base-channels", "4", "--depth", "2"]


def run(*args):
    return offnadir_main.main(["--threads", "1", *[str(arg) for arg in args]])


def test_help_main(capsys):
    assert offnadir_main.main(["--help"]) == 0
    assert "offnadir gen-data --help" in capsys.readouterr().out


def test_no_subcommand_is_a_usage_error(capsys):
    assert offnadir_main.main([]) == 1
    assert "usage: offnadir" in capsys.readouterr().out


def test_version(capsys):
    assert offnadir_main.main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == str(offnadir_main.__version__)


def test_unknown_version_fallback(monkeypatch):
    monkeypatch.setattr(version_module, "RESOLVERS", (lambda: None, lambda: ""))
    assert str(version_module.VersionProxy()) == version_module.UNKNOWN_VERSION


def test_all_commands_available():
    assert set(offnadir_main.COMMANDS) == {
        "gen-data", "train", "eval", "ablate-mc", "infer", "export-acm", "table",
    }


@pytest.mark.parametrize("subcommand", offnadir_main.COMMANDS.keys())
def test_help_module(subcommand):
    assert offnadir_main.main([subcommand, "--help"]) == 0


@pytest.mark.parametrize(
    "argv",
    [
        pytest.param(["gen-data"], id="missing_out"),
        pytest.param(["train", "--data", "x"], id="missing_train_out"),
        pytest.param(["--log", "CHATTY", "gen-data", "--out", "x"], id="log_level"),
        pytest.param(["eval", "--ckpt", "a", "--data", "b", "--out", "c",
                      "--corrected-labels", "maybe"], id="on_off"),
        pytest.param(["infer", "--ckpt", "a", "--image", "b", "--out", "c",
                      "--meta", "1,2,3"], id="meta_pair"),
        pytest.param(["table", "--report", "nofile", "--out", "c"], id="named_report"),
    ],
)
def test_usage_errors(argv):
    assert offnadir_main.main(argv) == 1


def test_threads_must_be_positive(tmp_path):
    assert offnadir_main.main(["--threads", "0", "gen-data", "--out", str(tmp_path)]) == 1


def test_threads_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("OFFNADIR_THREADS", "many")
    assert offnadir_main.main(["gen-data", "--out", str(tmp_path)]) == 1


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert run("eval", "--ckpt", tmp_path / "nope.ckpt", "--data", tmp_path,
               "--out", tmp_path / "eval") == 2


def dataset_files(root):
    return {
        path.relative_to(root): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.name != "run.meta"
    }


def test_gen_data_ignores_thread_count(tmp_path):
    args = ["gen-data", "--scenes", "4", "--size", "16", "--seed", "2", "--angles=-7.8,0,44"]
    assert offnadir_main.main(["--threads", "1", *args, "--out", str(tmp_path / "a")]) == 0
    assert offnadir_main.main(["--threads", "3", *args, "--out", str(tmp_path / "b")]) == 0
    first = dataset_files(tmp_path / "a")
    assert first == dataset_files(tmp_path / "b")
    assert len([name for name in first if name.parts[0] == "images"]) == 12

    meta = read_run_meta(tmp_path / "a" / "run.meta")
    assert meta["angles"] == "-7.8,0.0,44.0"
    assert meta["seed"] == "2"
    assert meta["scenes"] == "4"
    assert "version" in meta and "timestamp" in meta
    assert (tmp_path / "a" / "run.meta").read_text().startswith("# offnadir gen-data run\n")


def test_gen_data_needs_reference_angle(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--scenes", "3", "--size", "16",
               "--angles=0,44") == 2


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset plus a metaacm and a dropout-free checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-data", "--out", data, "--scenes", "5", "--size", TINY_SIZE,
               "--seed", "3", ANGLES) == 0
    assert run("train", "--data", data, "--out", root / "both", "--uncertainty", "both",
               "--inject", "metaacm", "--iters", "4", "--batch", "4", "--checkpoint-every",
               "2", *TINY_MODEL) == 0
    assert run("train", "--data", data, "--out", root / "plain", "--uncertainty", "none",
               "--inject", "none", "--iters", "2", "--batch", "4", *TINY_MODEL) == 0
    return root


def test_train_outputs(workspace):
    out = workspace / "both"
    for name in ("loss.log", "checkpoint_2.ckpt", "checkpoint_4.ckpt", "final.ckpt"):
        assert (out / name).exists()
    meta = read_run_meta(out / "run.meta")
    assert meta["model.injection_mode"] == "metaacm"
    assert meta["model.uncertainty_mode"] == "both"
    assert meta["train.iterations"] == "4"


def test_resume_must_match_architecture(workspace, tmp_path):
    assert run("train", "--data", workspace / "data", "--out", tmp_path,
               "--resume", workspace / "both" / "checkpoint_2.ckpt", "--inject", "metacat",
               "--iters", "4", "--batch", "4") == 1


def test_eval_writes_report(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "both" / "final.ckpt", "--data",
               workspace / "data", "--out", tmp_path, "--mc-samples", "3", "--seed", "1") == 0
    report = read_report(tmp_path / "report.tsv")
    assert report.split == "test"
    assert report.ground_truth == "corrected"
    assert report.mc_samples == 3
    assert report.seed == 1
    assert len(report.images) == len(Manifest.read(workspace / "data").rows_for("test"))
    lines = (tmp_path / "per_angle.csv").read_text().splitlines()
    assert lines[0] == "angle,f1,n_images"
    assert len(lines) == 1 + len(TINY_ANGLES)
    assert read_run_meta(tmp_path / "run.meta")["corrected_labels"] == "on"


def test_eval_without_corrected_labels(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "both" / "final.ckpt", "--data",
               workspace / "data", "--out", tmp_path, "--split", "val",
               "--corrected-labels", "on", "--mc-samples", "2") == 2
    assert not (tmp_path / "report.tsv").exists()


def test_eval_threshold_range(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "both" / "final.ckpt", "--data",
               workspace / "data", "--out", tmp_path, "--threshold", "1.5") == 1


def first_image(workspace, angle):
    manifest = Manifest.read(workspace / "data")
    row = next(row for row in manifest if row.off_nadir == angle)
    return manifest.path(row.image_path), row


def test_infer_exports_maps(workspace, tmp_path):
    image, row = first_image(workspace, 44.0)
    prefix = tmp_path / "maps" / "view"
    assert run("infer", "--ckpt", workspace / "both" / "final.ckpt", "--image", image,
               f"--meta={row.off_nadir},{row.gsd}", "--mc-samples", "3", "--out", prefix,
               "--export-samples") == 0
    for name in ("prob", "epistemic", "aleatoric"):
        assert read_pnm(tmp_path / "maps" / f"view_{name}.pgm").shape == (TINY_SIZE, TINY_SIZE)
    assert set(read_sidecar(tmp_path / "maps" / "view_maps.txt")) == \
        {"prob", "epistemic", "aleatoric"}
    for index in range(3):
        sample = read_ten(tmp_path / "maps" / f"view_sample{index:03d}.ten")
        assert sample.shape == (TINY_SIZE, TINY_SIZE)
    assert not (tmp_path / "maps" / "view_sample003.ten").exists()
    assert read_run_meta(tmp_path / "maps" / "run.meta")["mc_samples"] == "3"


def test_infer_needs_metadata(workspace, tmp_path):
    image, _ = first_image(workspace, 0.0)
    assert run("infer", "--ckpt", workspace / "both" / "final.ckpt", "--image", image,
               "--out", tmp_path / "view", "--mc-samples", "2") == 1


def test_infer_without_metadata_model(workspace, tmp_path):
    image, _ = first_image(workspace, 0.0)
    assert run("infer", "--ckpt", workspace / "plain" / "final.ckpt", "--image", image,
               "--out", tmp_path / "view", "--mc-samples", "2") == 0
    assert not (tmp_path / "view_aleatoric.pgm").exists()
    assert (tmp_path / "view_prob.pgm").exists()


def test_export_acm(workspace, tmp_path):
    image, row = first_image(workspace, 54.0)
    assert run("export-acm", "--ckpt", workspace / "both" / "final.ckpt", "--image", image,
               f"--meta={row.off_nadir},{row.gsd}", "--out", tmp_path / "acm") == 0
    levels = read_sidecar(tmp_path / "acm_acm_maps.txt")
    assert list(levels) == [f"acm{level}" for level in range(1, len(levels) + 1)]
    sizes = [read_pnm(tmp_path / f"acm_acm{level}.pgm").shape[0]
             for level in range(1, len(levels) + 1)]
    assert sizes == sorted(sizes)
    for level in range(1, len(levels) + 1):
        assert read_pnm(tmp_path / f"acm_acm{level}_overlay.ppm").shape == \
            (TINY_SIZE, TINY_SIZE, 3)


def test_export_acm_needs_metaacm(workspace, tmp_path):
    image, _ = first_image(workspace, 0.0)
    assert run("export-acm", "--ckpt", workspace / "plain" / "final.ckpt", "--image", image,
               "--meta=0,0.5", "--out", tmp_path / "acm") == 1


def test_table(workspace, tmp_path, capsys):
    assert run("eval", "--ckpt", workspace / "both" / "final.ckpt", "--data",
               workspace / "data", "--out", tmp_path / "both", "--mc-samples", "2") == 0
    assert run("eval", "--ckpt", workspace / "plain" / "final.ckpt", "--data",
               workspace / "data", "--out", tmp_path / "plain") == 0
    capsys.readouterr()
    assert run("table", "--report", f"both={tmp_path / 'both' / 'report.tsv'}",
               "--report", f"none={tmp_path / 'plain' / 'report.tsv'}",
               "--out", tmp_path, "--title", "Uncertainty") == 0
    printed = capsys.readouterr().out
    text = (tmp_path / "table.txt").read_text()
    assert printed == text
    lines = text.splitlines()
    assert lines[:2] == ["# Uncertainty", "# ground truth: corrected"]
    assert "method\tNadir\tOff-Nadir\tVery Off-Nadir\tOverall" in lines
    assert [line.split("\t")[0] for line in lines[-2:]] == ["both", "none"]


def test_table_rejects_duplicate_names(tmp_path):
    assert run("table", "--report", "a=x.tsv", "--report", "a=y.tsv", "--out", tmp_path) == 1


def test_ablate_mc(workspace, tmp_path):
    assert run("ablate-mc", "--ckpt", workspace / "both" / "final.ckpt",
               "--no-dropout-ckpt", workspace / "plain" / "final.ckpt",
               "--data", workspace / "data", "--out", tmp_path, "--samples", "2,1",
               "--seeds", "0,1") == 0
    rows = read_ablation_csv(tmp_path / "ablation.csv")
    assert [row.label for row in rows] == ["1", "2", "regular_dropout", "no_dropout"]
    for name in ("T1_seed0", "T1_seed1", "T2_seed0", "T2_seed1", "regular_dropout_seed0",
                 "no_dropout_seed0"):
        assert (tmp_path / f"report_{name}.tsv").exists()
    assert read_report(tmp_path / "report_T2_seed1.tsv").mc_samples == 2


def test_ablate_mc_without_baseline_model(workspace, tmp_path, caplog):
    assert run("ablate-mc", "--ckpt", workspace / "both" / "final.ckpt",
               "--data", workspace / "data", "--out", tmp_path, "--samples", "1") == 0
    assert [row.label for row in read_ablation_csv(tmp_path / "ablation.csv")] == \
        ["1", "regular_dropout"]
    assert "no_dropout row is omitted" in caplog.text


def test_ablate_mc_needs_dropout(workspace, tmp_path):
    assert run("ablate-mc", "--ckpt", workspace / "plain" / "final.ckpt",
               "--data", workspace / "data", "--out", tmp_path, "--samples", "1") == 2
