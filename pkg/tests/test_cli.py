import json

import numpy as np
import pandas as pd
import pytest

from src.datasets.dataset import Sample, SnapshotDataset, load_dataset, save_dataset
from src.main import MANIFEST_FILE, TRACE_FILE, main
from src.mesh.io import write_mesh
from src.mesh.locator import interpolate_at
from src.mesh.triangle_mesh import rectangle_mesh
from src.morphing.checkpoint import read_checkpoint
from src.schemas.run_config import RunConfig


def _config(tmp_path, payload, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _manifest(directory):
    return json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))


@pytest.fixture
def toy_dir(tmp_path):
    out = tmp_path / "toy"
    config = _config(tmp_path, {"toy": {"n": 4, "nx": 8, "ny": 10}}, "toy.json")
    assert main(["gen-toy", "--config", config, "--out", str(out)]) == 0
    return out


def test_gen_toy_writes_the_ridge_family(tmp_path):
    out = tmp_path / "toy"
    config = _config(tmp_path, {"toy": {"nx": 4, "ny": 10}})

    assert main(["gen-toy", "--config", config, "--out", str(out)]) == 0
    dataset = load_dataset(out)
    betas = dataset.parameters[:, 0]
    assert dataset.size == 30
    assert betas[0] == pytest.approx(-0.38)
    assert betas[-1] == pytest.approx(0.38)
    assert betas[10] == pytest.approx(-0.126, abs=1e-2)
    assert interpolate_at(dataset.reference, dataset.samples[7].field, np.array([-1.0, 0.0])) == pytest.approx([1.0])

    manifest = _manifest(out)
    assert manifest["exit_status"] == 0
    assert manifest["summary"]["samples"] == 30
    assert manifest["config_hash"] == RunConfig.model_validate(manifest["config"]).digest()


def test_gen_toy_with_a_single_sample(tmp_path):
    out = tmp_path / "one"
    config = _config(tmp_path, {"toy": {"nx": 4, "ny": 5}})

    assert main(["gen-toy", "--config", config, "--out", str(out), "--n", "1"]) == 0
    assert load_dataset(out).size == 1


def test_unknown_config_key_exits_with_two(tmp_path, capsys):
    config = _config(tmp_path, {"optimizer": {"bogus": 1}})

    assert main(["optimize", "--config", config, "--out", str(tmp_path / "out")]) == 2
    assert "unknown key 'optimizer.bogus'" in capsys.readouterr().err


def test_pod_rejects_rank_above_family_size(tmp_path, toy_dir):
    out = tmp_path / "pod"
    config = _config(tmp_path, {"dataset_dir": str(toy_dir), "optimizer": {"r": 5}})

    assert main(["pod", "--config", config, "--out", str(out)]) == 2
    manifest = _manifest(out)
    assert manifest["exit_status"] == 2
    assert "exceeds" in manifest["error"]


def test_pod_of_identical_snapshots(tmp_path, toy_dir):
    toy = load_dataset(toy_dir)
    first = toy.samples[0]
    samples = [Sample(name=f"copy{i}", mesh=toy.reference, field=first.field, mu=np.array([float(i)])) for i in range(3)]
    data = tmp_path / "copies"
    save_dataset(data, SnapshotDataset(reference=toy.reference, samples=samples, parameter_names=["i"]))
    out = tmp_path / "pod"
    config = _config(tmp_path, {"dataset_dir": str(data)})

    assert main(["pod", "--config", config, "--out", str(out)]) == 0
    decay = pd.read_csv(out / "pod_decay.csv")
    assert decay["raw_fraction"].iloc[0] == pytest.approx(1.0)
    assert list(decay.columns) == ["k", "raw_fraction", "raw_J"]


def test_predict_without_bundle_exits_with_two(tmp_path, unit_square):
    write_mesh(tmp_path / "target.mesh", unit_square)

    code = main(
        ["predict", "--bundle", str(tmp_path / "nowhere"), "--mesh", str(tmp_path / "target.mesh"), "--out", str(tmp_path / "p")]
    )
    assert code == 2
    assert _manifest(tmp_path / "p")["exit_status"] == 2


def test_optimize_then_resume(tmp_path, toy_dir):
    out = tmp_path / "opt"
    config = _config(
        tmp_path, {"dataset_dir": str(toy_dir), "optimizer": {"max_iters": 4, "checkpoint_every": 2}}
    )

    assert main(["optimize", "--config", config, "--out", str(out), "--workers", "2"]) == 0
    trace = pd.read_csv(out / TRACE_FILE)
    assert list(trace.columns) == ["iter", "J", "I", "c1", "c2", "min_area", "max_normal_violation", "step"]
    assert trace["iter"].tolist() == [1, 2, 3, 4]
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["bijective"]
    assert report["iterations"] == 4
    assert (out / "morphings.ckpt").is_file()
    assert (out / "checkpoints" / "checkpoint_00004.ckpt").is_file()
    assert _manifest(out)["workers"] == 2

    assert main(["checkpoint-resume", "--resume", str(out / "checkpoints" / "checkpoint_00002.ckpt")]) == 0
    resumed = pd.read_csv(out / TRACE_FILE)
    assert resumed["iter"].tolist() == [1, 2, 3, 4]
    assert np.allclose(resumed["J"], trace["J"], rtol=0.0, atol=1e-12)
    assert _manifest(out)["command"] == "checkpoint-resume"


def test_train_predict_and_eval(tmp_path, toy_dir):
    out = tmp_path / "run"
    config = _config(
        tmp_path,
        {
            "dataset_dir": str(toy_dir),
            "optimizer": {"max_iters": 3},
            "surrogate": {"gp_restarts": 2},
        },
    )

    assert main(["train", "--config", config, "--out", str(out)]) == 0
    assert (out / "bundle" / "bundle.json").is_file()

    mesh_path = tmp_path / "toy.mesh"
    write_mesh(mesh_path, load_dataset(toy_dir).reference)
    predicted = tmp_path / "predicted"
    assert main(["predict", "--bundle", str(out / "bundle"), "--mesh", str(mesh_path), "--mu", "0.1", "--out", str(predicted)]) == 0
    assert (predicted / "prediction.field").is_file()
    assert (predicted / "prediction.vtk").is_file()

    evaluated = tmp_path / "eval"
    assert main(["eval", "--config", config, "--out", str(evaluated)]) == 0
    report = pd.read_csv(evaluated / "rmse_report.csv")
    assert report["sample"].tolist()[-1] == "overall"
    assert len(report) == 5


def test_optimize_on_a_coarse_mesh_transfers_to_the_fine_one(tmp_path, toy_dir):
    coarse_path = tmp_path / "coarse.mesh"
    write_mesh(coarse_path, rectangle_mesh(-1.0, 1.0, -1.25, 1.25, 4, 5, name="coarse"))
    out = tmp_path / "coarse_run"
    config = _config(tmp_path, {"dataset_dir": str(toy_dir), "optimizer": {"max_iters": 2, "checkpoint_every": 1}})

    assert main(["optimize", "--config", config, "--out", str(out), "--coarse-mesh", str(coarse_path)]) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    fine = load_dataset(toy_dir).reference
    assert report["coarse_nodes"] == 30
    assert report["fine_nodes"] == fine.node_count
    assert report["fine_bijective"]

    final = read_checkpoint(out / "morphings.ckpt")
    assert final.displacements.shape == (4, fine.node_count, 2)
    assert final.config.coarse_mesh is None
    periodic = read_checkpoint(out / "checkpoints" / "checkpoint_00001.ckpt")
    assert periodic.displacements.shape == (4, 30, 2)
    assert periodic.config.coarse_mesh == coarse_path
