import numpy as np
import pytest

import data_metrics as dm
import photometric_gan
import renderer
import tensor_core as tc
from geometry import TexturedMesh, export_mesh

MICRO = str(photometric_gan.CONFIG_DIR / "micro.conf")


def _make_dataset(root, n: int = 3, *extra: str) -> None:
    code = photometric_gan.main(["make-dataset", "--config", MICRO, "--out", str(root), "--n", str(n),
                                 "--threads", "1", *extra])
    assert code == 0


def test_missing_required_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as info:
        photometric_gan.parse_args(["make-dataset"])
    assert info.value.code == 2


def test_unknown_config_key_returns_2(tmp_path):
    code = photometric_gan.main(["make-dataset", "--out", str(tmp_path / "d"), "--set", "train.bogus=1"])
    assert code == 2


def test_missing_checkpoint_returns_3(tmp_path):
    assert photometric_gan.main(["render", "--ckpt", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 3


def test_eval_ground_truth_against_itself(tmp_path, capsys):
    _make_dataset(tmp_path / "d")
    report = tmp_path / "report.txt"
    code = photometric_gan.main(["eval", "--data", str(tmp_path / "d"), "--metric", "side", "--out", str(report)])
    assert code == 0
    assert capsys.readouterr().out.strip().endswith("metric=side n=3 side_x100=0.000000")
    assert photometric_gan.main(["eval", "--data", str(tmp_path / "d"), "--metric", "pfd", "--n", "2",
                                 "--out", str(report)]) == 0
    lines = report.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "metric=side n=3 side_x100=0.000000"
    assert lines[1].startswith("metric=pfd n=2 value=")
    assert float(lines[1].split("value=")[1]) < 1e-4


def test_view_poses_include_frontal():
    cfg = photometric_gan.micro_config()
    poses = photometric_gan.view_poses(cfg, 3)
    assert [p.yaw for p in poses][1] == pytest.approx(0.0)
    assert photometric_gan.view_poses(cfg, 1)[0].yaw == 0.0
    with pytest.raises(ValueError):
        photometric_gan.view_poses(cfg, 0)


def test_selfcheck_subset_passes(capsys):
    assert photometric_gan.main(["selfcheck", "--only", "volume-weights", "--only", "side-metric"]) == 0
    out = capsys.readouterr().out
    assert "ok   volume-weights" in out and "all self-checks passed" in out


def test_selfcheck_catches_shading_sign_bug(monkeypatch, capsys):
    original = renderer.shading_map
    monkeypatch.setattr(renderer, "shading_map", lambda normals, light: original(-tc.as_tensor(normals), light))
    assert photometric_gan.main(["selfcheck", "--only", "photometric-oracle"]) == 1
    assert "FAIL photometric-oracle" in capsys.readouterr().out


def test_unknown_selfcheck_is_usage_error():
    assert photometric_gan.main(["selfcheck", "--only", "nonsense"]) == 2


def test_train_render_mesh_and_eval_pipeline(tmp_path):
    data, run = tmp_path / "d", tmp_path / "run"
    _make_dataset(data, 4)
    assert photometric_gan.main(["train", "--config", MICRO, "--data", str(data), "--out", str(run)]) == 0
    ckpt = str(run / "checkpoints" / "final")

    renders = tmp_path / "renders"
    assert photometric_gan.main(["render", "--ckpt", ckpt, "--res", "8", "--buffers", "--grad-normal",
                                 "--light-sweep", "2", "--out", str(renders), "--threads", "2"]) == 0
    written = sorted(p.name for p in renders.iterdir())
    for name in ("final", "albedo", "shading", "specular", "normal", "depth", "grad_normal"):
        assert f"view00_{name}.png" in written
    assert "sweep01.png" in written

    sweep = tmp_path / "sweep.csv"
    assert photometric_gan.main(["extract-mesh", "--ckpt", ckpt, "--res", "12", "--sweep",
                                 "--out", str(sweep)]) == 0
    assert sweep.read_text(encoding="utf-8").splitlines()[0] == "threshold,vertices,triangles"

    assert photometric_gan.main(["eval", "--ckpt", ckpt, "--data", str(data), "--metric", "pfd"]) == 0


def test_relight_mesh_command(tmp_path):
    corners = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.float64)
    faces = np.array([[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
                      [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]])
    mesh = export_mesh(TexturedMesh((corners - 0.5) * 0.4, faces, np.full((8, 3), 0.5)), tmp_path / "cube.obj")
    out = tmp_path / "preview.png"
    code = photometric_gan.main(["relight-mesh", "--mesh", str(mesh), "--res", "16", "--out", str(out)])
    assert code == 0
    image = dm.read_png(out)
    assert image.shape == (16, 16, 3)
    assert image[8, 8, 0] == pytest.approx(0.5, abs=1 / 255)
