import json

import numpy as np
import pytest

from vecmap.cli import EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from vecmap.config import replace, save_config
from vecmap.io import read_json, read_predictions, read_sequence, write_predictions

from conftest import tiny_config


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    last = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(last)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = replace(tiny_config(), data={"num_train": 7, "num_val": 3}, scene={"num_frames": 3},
                  output_dir=str(root / "run"))
    save_config(cfg, root / "cfg.yaml")
    assert main(["generate", "--config", str(root / "cfg.yaml")]) == EXIT_OK
    assert main(["train", "--config", str(root / "cfg.yaml")]) == EXIT_OK
    return root, cfg


def test_generate_split_counts_and_leak_free(workspace):
    root, cfg = workspace
    meta = read_json(root / "run" / "data" / "dataset.json")
    assert len(meta["splits"]["train"]) == 7 and len(meta["splits"]["val"]) == 3
    assert not set(meta["splits"]["train"]) & set(meta["splits"]["val"])
    for split, names in meta["splits"].items():
        for n in names:
            assert read_sequence(root / "run" / "data" / split / f"{n}.jsonl")[0].sequence_id == n


def test_generate_same_seed_identical(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, line = _run(capsys, ["generate", "--config", root / "cfg.yaml", "--output-dir", tmp_path])
    assert code == EXIT_OK and line["num_train"] == 7
    a, b = root / "run" / "data" / "train", tmp_path / "data" / "train"
    for p in sorted(a.glob("*.jsonl")):
        assert p.read_bytes() == (b / p.name).read_bytes()
        za, zb = np.load(p.with_suffix(".npz")), np.load((b / p.name).with_suffix(".npz"))
        assert za.files == zb.files and all(np.array_equal(za[k], zb[k]) for k in za.files)


def test_train_artifacts_and_manifest(workspace):
    root, cfg = workspace
    run = root / "run"
    for name in ("model.pt", "config.yaml", "train_memory.jsonl", "checkpoints/epoch_000.pt",
                 "checkpoints/epoch_001.pt", "reports/eval_single_frame.json", "reports/eval_temporal.json"):
        assert (run / name).exists(), name
    man = read_json(run / "manifest_train.json")
    assert man["config_hash"] == cfg.config_hash() and len(man["epoch_losses"]) == 1
    assert man["code_version"] and man["timings"]["total"] > 0


def test_eval_both_modes_reproducible(workspace, capsys, tmp_path):
    root, _ = workspace
    model = root / "run" / "model.pt"
    data = root / "run" / "data"
    code, line = _run(capsys, ["eval", "--checkpoint", model, "--data", data, "--output-dir", tmp_path])
    assert code == EXIT_OK
    assert {"mAP_single_frame", "mAP_temporal"} <= set(line)
    train_rep = read_json(root / "run" / "reports" / "eval_temporal.json")
    assert read_json(tmp_path / "reports" / "eval_temporal.json") == train_rep
    preds = read_predictions(tmp_path / "predictions" / "temporal" / "seq00007.jsonl")
    assert preds[0]["mode"] == "single_frame" and preds[1]["mode"] == "temporal"


def test_eval_k_prev_zero_equals_single_frame(workspace, capsys, tmp_path):
    root, _ = workspace
    code, _ = _run(capsys, ["eval", "--checkpoint", root / "run" / "model.pt", "--data", root / "run" / "data",
                            "--mode", "temporal", "--k-prev", "0", "--output-dir", tmp_path])
    assert code == EXIT_OK
    single = read_json(root / "run" / "reports" / "eval_single_frame.json")
    assert read_json(tmp_path / "reports" / "eval_temporal.json") == single


def test_eval_refuses_mismatched_config(workspace, capsys, tmp_path):
    root, cfg = workspace
    other = replace(cfg, decoder={"num_layers": 2})
    save_config(other, tmp_path / "other.yaml")
    code, line = _run(capsys, ["eval", "--checkpoint", root / "run" / "model.pt", "--config",
                               tmp_path / "other.yaml", "--data", root / "run" / "data"])
    assert code == EXIT_MISMATCH and line["status"] == "checkpoint_mismatch"


def test_usage_errors(workspace, capsys, tmp_path):
    root, _ = workspace
    code, _ = _run(capsys, ["eval", "--checkpoint", tmp_path / "nope.pt"])
    assert code == EXIT_USAGE
    code, _ = _run(capsys, ["train", "--config", root / "cfg.yaml", "--output-dir", tmp_path])
    assert code == EXIT_USAGE  # no dataset there
    code, _ = _run(capsys, ["generate", "--set", "scene.frame_rate=0", "--output-dir", tmp_path])
    assert code == EXIT_USAGE


def test_stream_and_render(workspace, capsys, tmp_path):
    root, _ = workspace
    seq = root / "run" / "data" / "val" / "seq00007.jsonl"
    code, line = _run(capsys, ["stream", "--checkpoint", root / "run" / "model.pt", "--sequence", seq,
                               "--output-dir", tmp_path])
    assert code == EXIT_OK and line["sequences"]["seq00007"]["temporal_frames"] == 2
    preds = tmp_path / "predictions" / "seq00007.jsonl"
    assert (tmp_path / "memory" / "seq00007.jsonl").exists()
    code, line = _run(capsys, ["render", "--sequence", seq, "--predictions", preds, "--frames", "0:2",
                               "--output-dir", tmp_path])
    assert code == EXIT_OK and line["rendered"] == 2
    assert sorted(p.name for p in (tmp_path / "render").glob("*.png")) == ["seq00007_0000.png",
                                                                          "seq00007_0001.png"]
    empty = tmp_path / "empty.jsonl"
    write_predictions(empty, [])
    code, line = _run(capsys, ["render", "--sequence", seq, "--predictions", empty,
                               "--output-dir", tmp_path / "gt_only"])
    assert code == EXIT_OK and line["rendered"] == 3
