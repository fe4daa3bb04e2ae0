import numpy as np
import pytest

from iradonmap import container
from iradonmap.cli import main
from iradonmap.data import make_phantom
from iradonmap.geometry import ImagingGeometry, build_bp_table
from iradonmap.layers import IRadonMap
from iradonmap.train import OptimizerState, TrainingConfig, load_checkpoint, save_checkpoint
from iradonmap.transform import fbp, project_siddon

SUBCOMMANDS = ("simulate", "train", "reconstruct", "gradcheck", "sweep")


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["simulate", "--out", str(out), "--size", "12", "--views", "9", "--phantoms", "4",
                 "--val", "2", "--shepp-logan", "--seed", "5"]) == 0
    return out


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "default" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "a"), "--views", "0"]) == 1
    assert "n_views" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    assert not (tmp_path / "a").exists()


def test_simulate_empty_and_default_geometry(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--phantoms", "0", "--val", "0"]) == 0
    text = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert text[-1] == "image_path\tsino_path\tsplit"
    assert (tmp_path / "config.txt").is_file()
    assert main(["simulate", "--out", str(tmp_path / "one"), "--phantoms", "1", "--val", "0"]) == 0
    assert container.load_tensor(tmp_path / "one" / "sinos" / "train_00000.irdm").shape == (90, 91)


def test_simulate_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_x = 10\nn_views = 7\nn_train = 1\nn_val = 0\n")
    assert main(["simulate", "--out", str(tmp_path / "o"), "--config", str(cfg), "--views", "5"]) == 0
    sino = container.load_tensor(tmp_path / "o" / "sinos" / "train_00000.irdm")
    assert sino.shape[0] == 5
    assert "n_views = 5" in (tmp_path / "o" / "config.txt").read_text()
    cfg.write_text("colour = blue\n")
    assert main(["simulate", "--out", str(tmp_path / "p"), "--config", str(cfg)]) == 1


def test_simulate_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / d), "--size", "8", "--views", "6",
                     "--phantoms", "3", "--val", "1", "--seed", "2"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_train_lr_zero_keeps_initial_params(small_dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--manifest", str(small_dataset), "--lr", "0", "--iters", "3",
                 "--channels", "2", "--blocks", "1", "--ckpt-interval", "0"]) == 0
    first, _, _ = load_checkpoint(out / "ckpt_000000.irdm")
    last, state, cfg = load_checkpoint(out / "ckpt_000003.irdm")
    np.testing.assert_array_equal(first.flatten(), last.flatten())
    assert state.iteration == 3 and cfg.learning_rate == 0
    assert len((out / "loss.csv").read_text().splitlines()) == 4


def test_train_view_factor(small_dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--manifest", str(small_dataset), "--iters", "1",
                 "--channels", "2", "--blocks", "0", "--view-factor", "3"]) == 0
    model = load_checkpoint(out / "ckpt_000001.irdm")[0]
    assert model.geometry.n_views == 3


def test_train_missing_manifest_exits_2(tmp_path):
    out = tmp_path / "never"
    assert main(["train", "--out", str(out), "--manifest", str(tmp_path / "nope.tsv")]) == 2
    assert not out.exists()


def test_train_empty_split_exits_2(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "d"), "--phantoms", "0", "--val", "0"]) == 0
    assert main(["train", "--out", str(tmp_path / "t"), "--manifest", str(tmp_path / "d")]) == 2


def test_reconstruct_fbp_zero_sinogram(tmp_path):
    g = ImagingGeometry.desk(16, 12)
    container.save_tensor(tmp_path / "z.irdm", np.zeros(g.sino_shape, np.float32))
    assert main(["reconstruct", "--out", str(tmp_path / "o"), "--sino", str(tmp_path / "z.irdm"),
                 "--size", "16"]) == 0
    image = container.load_tensor(tmp_path / "o" / "fbp.irdm")
    assert image.shape == (16, 16) and not image.any()
    assert (tmp_path / "o" / "fbp.pgm").is_file() and (tmp_path / "o" / "fbp.png").is_file()


def test_reconstruct_canonical_checkpoint_matches_fbp(tmp_path):
    g = ImagingGeometry.desk(16, 12)
    model = IRadonMap(g, channels=3, blocks=1)
    save_checkpoint(tmp_path / "m.irdm", model, OptimizerState.zeros(model.n_params), TrainingConfig())
    sino = project_siddon(make_phantom("shepp-logan", g), g).astype(np.float32)
    container.save_tensor(tmp_path / "s.irdm", sino)
    assert main(["reconstruct", "--out", str(tmp_path / "o"), "--sino", str(tmp_path / "s.irdm"),
                 "--method", "iradonmap", "--checkpoint", str(tmp_path / "m.irdm")]) == 0
    image = container.load_tensor(tmp_path / "o" / "iradonmap.irdm")
    ref = fbp(sino.astype(np.float64), build_bp_table(g))
    assert np.linalg.norm(image - ref) / np.linalg.norm(ref) < 1e-5


def test_reconstruct_errors(tmp_path):
    g = ImagingGeometry.desk(8, 4)
    container.save_tensor(tmp_path / "s.irdm", np.zeros(g.sino_shape, np.float32))
    assert main(["reconstruct", "--out", str(tmp_path / "o"), "--sino", str(tmp_path / "s.irdm"),
                 "--method", "iradonmap"]) == 1
    assert main(["reconstruct", "--out", str(tmp_path / "o"), "--sino", str(tmp_path / "missing.irdm")]) == 2
    assert not (tmp_path / "o").exists()


def test_gradcheck_pass_and_corrupt(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "ok"), "--instances", "2", "--seed", "3"]) == 0
    rows = (tmp_path / "ok" / "gradcheck.csv").read_text().splitlines()
    assert len(rows) == 7 and all(r.endswith("True") for r in rows[1:])
    capsys.readouterr()
    assert main(["gradcheck", "--out", str(tmp_path / "bad"), "--instances", "2", "--corrupt", "conv2d"]) == 3
    failing = [line for line in capsys.readouterr().out.splitlines() if "FAIL" in line]
    assert len(failing) == 1 and failing[0].startswith("conv2d")


def test_sweep_writes_report(small_dataset, tmp_path):
    ckpt = tmp_path / "m.irdm"
    from iradonmap.data import DatasetManifest
    geometry = DatasetManifest.read(small_dataset).geometry
    model = IRadonMap(geometry, channels=2, blocks=1)
    save_checkpoint(ckpt, model, OptimizerState.zeros(model.n_params), TrainingConfig())
    out = tmp_path / "sw"
    assert main(["sweep", "--out", str(out), "--manifest", str(small_dataset), "--checkpoint", str(ckpt),
                 "--factors", "1,3"]) == 2
    assert main(["sweep", "--out", str(out), "--manifest", str(small_dataset), "--checkpoint", str(ckpt),
                 "--factors", "1"]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "id,n_views,method,mse,psnr" and len(lines) == 1 + 2
    assert main(["sweep", "--out", str(out), "--manifest", str(small_dataset), "--factors", "x"]) == 1


def test_nothing_written_outside_out(small_dataset, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = _tree(tmp_path)
    assert main(["train", "--out", str(tmp_path / "o"), "--manifest", str(small_dataset), "--iters", "1",
                 "--channels", "2", "--blocks", "0"]) == 0
    after = {k: v for k, v in _tree(tmp_path).items() if k.parts[0] != "o"}
    assert after == before
