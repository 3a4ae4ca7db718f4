import numpy as np
import pytest
import torch

from vecmap.config import replace
from vecmap.data import FrameIndex, generate_split_in_memory
from vecmap.geometry import Category, MapElement, PerceptionRange, Polyline, Pose2
from vecmap.model import MapModel
from vecmap.queries import Mode, build_prevpred_queries, top_k_select
from vecmap.runtime import PredictionMemory, prev_sample_id, run_stream, training_step_hook
from vecmap.synth import generate_sequence

from conftest import tiny_config


def _els(rs, n, Nv=10):
    out = []
    for _ in range(n):
        pts = np.column_stack([rs.uniform(-25, 25, Nv), rs.uniform(-12, 12, Nv)])
        out.append(MapElement(Category(int(rs.integers(3))), Polyline(pts), float(rs.uniform(0, 1))))
    return out


@pytest.fixture(scope="module")
def stream_setup():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = MapModel(cfg).double()
    frames = generate_sequence(cfg.scene, "s0")
    return cfg, model, frames


def test_store_fetch_same_pose_is_identity():
    mem = PredictionMemory(10)
    els = _els(np.random.default_rng(0), 4)
    pose = Pose2(3.0, -1.0, 0.4)
    mem.store("a", els, pose)
    got = mem.fetch_previous("a", pose)
    srt = top_k_select(els, 10)
    assert [e.confidence for e in got] == [e.confidence for e in srt]
    for a, b in zip(got, srt):
        assert np.array_equal(a.points, b.points) and a.category == b.category
    assert mem.fetch_previous("missing", pose) is None


def test_store_twice_second_wins_and_step_increases():
    mem = PredictionMemory(10)
    rs = np.random.default_rng(1)
    mem.store("a", _els(rs, 3), Pose2())
    s1 = mem.entries["a"].step
    second = _els(rs, 2)
    mem.store("a", second, Pose2())
    assert mem.entries["a"].step > s1
    assert len(mem.entries["a"].elements) == 2


def test_store_keeps_top_k_sorted():
    mem = PredictionMemory(10)
    els = _els(np.random.default_rng(2), 25)
    mem.store("a", els, Pose2())
    kept = mem.entries["a"].elements
    order = sorted(range(25), key=lambda i: (-els[i].confidence, i))[:10]
    assert kept == [els[i] for i in order]
    confs = [e.confidence for e in kept]
    assert confs == sorted(confs, reverse=True)


def test_store_applies_score_threshold():
    mem = PredictionMemory(10, score_threshold=0.4)
    els = _els(np.random.default_rng(3), 20)
    mem.store("a", els, Pose2())
    assert all(e.confidence > 0.4 for e in mem.entries["a"].elements)


def test_fetch_drops_elements_left_behind():
    mem = PredictionMemory(10, perception_range=PerceptionRange())
    behind = MapElement(Category.DIVIDER, Polyline([(-12, -1), (-8, -1)]), 0.9)
    ahead = MapElement(Category.DIVIDER, Polyline([(40, 1), (50, 1)]), 0.8)
    mem.store("a", [behind, ahead], Pose2(0, 0, 0))
    got = mem.fetch_previous("a", Pose2(60, 0, 0))
    assert len(got) == 1
    assert np.allclose(got[0].points, [(-20, 1), (-10, 1)])
    assert got[0].confidence == 0.8


def test_memory_snapshot_is_picklable():
    import pickle

    mem = PredictionMemory(3)
    mem.store(("s", 0), _els(np.random.default_rng(4), 5), Pose2(1, 2, 3))
    back = pickle.loads(pickle.dumps(mem))
    assert back.entries[("s", 0)].elements == mem.entries[("s", 0)].elements
    back.store(("s", 1), [], Pose2())


def test_prev_sample_id():
    assert prev_sample_id(("s", 0)) is None
    assert prev_sample_id(("s", 4)) == ("s", 3)


def test_one_frame_stream(stream_setup):
    cfg, model, frames = stream_setup
    res = run_stream(model, frames[:1])
    assert res.modes == [Mode.SINGLE_FRAME] and res.memory_reads == [False]


def test_stream_first_frame_never_reads_memory(stream_setup):
    cfg, model, frames = stream_setup
    res = run_stream(model, frames, score_threshold=0.0)
    assert res.memory_reads[0] is False and res.modes[0] is Mode.SINGLE_FRAME
    assert all(res.memory_reads[1:])
    assert all(m is Mode.TEMPORAL for m in res.modes[1:])


def test_forced_single_frame_equals_independent_inference(stream_setup):
    cfg, model, frames = stream_setup
    res = run_stream(model, frames, mode_override=Mode.SINGLE_FRAME)
    for t, f in enumerate(frames):
        alone = run_stream(model, [f])
        assert res.outputs[t] == alone.outputs[0]
    assert not any(res.memory_reads)


def test_k_prev_zero_stream_equals_single_frame(stream_setup):
    cfg, model, frames = stream_setup
    t = run_stream(model, frames, k_prev=0, score_threshold=0.0)
    s = run_stream(model, frames, mode_override=Mode.SINGLE_FRAME)
    assert t.outputs == s.outputs
    assert t.modes[1:] == [Mode.TEMPORAL] * (len(frames) - 1)


def test_stream_determinism(stream_setup):
    cfg, model, frames = stream_setup
    assert run_stream(model, frames).outputs == run_stream(model, frames).outputs


def test_pose_jump_falls_back_to_single_frame(stream_setup):
    cfg, model, frames = stream_setup
    f2 = list(frames[:3])
    from dataclasses import replace as dc_replace

    p = f2[2].ego_pose
    f2[2] = dc_replace(f2[2], ego_pose=Pose2(p.x + 100, p.y, p.yaw))
    res = run_stream(model, f2, score_threshold=0.0)
    assert res.modes[2] is Mode.SINGLE_FRAME
    assert res.warnings and res.warnings[0]["frame_index"] == 2


def _sample_ids(cfg):
    seqs = generate_split_in_memory(cfg, "train")
    return FrameIndex(seqs), seqs


def test_training_hook_empty_memory_is_single_frame():
    cfg = tiny_config(querygen={"p_single": 0.0})
    index, _ = _sample_ids(cfg)
    rs = np.random.default_rng(0)
    ids = [index.ids[i] for i in rs.permutation(len(index))[:4]]
    mem = PredictionMemory(cfg.querygen.k_prev)
    modes, prevs = training_step_hook(mem, ids, [index[i].ego_pose for i in ids], rs, cfg.querygen)
    assert modes == [Mode.SINGLE_FRAME] * 4 and prevs == [None] * 4


def test_sequential_epoch_gets_priors_and_matches_replay():
    cfg = tiny_config(querygen={"p_single": 0.0})
    index, _ = _sample_ids(cfg)
    rs = np.random.default_rng(0)
    mem = PredictionMemory(cfg.querygen.k_prev, 0.0)
    replay = {}
    fake = np.random.default_rng(9)
    for sid in index.ids:
        f = index[sid]
        modes, prevs = training_step_hook(mem, [sid], [f.ego_pose], rs, cfg.querygen)
        assert (modes[0] is Mode.TEMPORAL) == (sid[1] > 0)
        preds = _els(fake, 6)
        mem.store(sid, preds, f.ego_pose)
        replay[sid] = (top_k_select(preds, cfg.querygen.k_prev), f.ego_pose)
    assert set(mem.entries) == set(replay)
    for sid, (els, pose) in replay.items():
        assert mem.entries[sid].elements == els and mem.entries[sid].pose == pose
        assert len(mem.entries[sid].elements) <= cfg.querygen.k_prev


def test_prior_queries_carry_no_gradient_into_memory():
    cfg = tiny_config()
    torch.manual_seed(0)
    model = MapModel(cfg).double()
    raster = torch.tensor(generate_sequence(cfg.scene)[0].observation.grid, dtype=torch.float64)[None]
    out = model(raster)
    from vecmap.model import to_map_elements

    els = to_map_elements(out.layers[-1].class_logits[0], out.layers[-1].locations[0])
    assert all(isinstance(e.points, np.ndarray) for e in els)
    qs = build_prevpred_queries(els[:3], model.bank, cfg.querygen)
    assert not qs.init_locations.requires_grad
    loss = qs.content.sum() + qs.position.sum()
    loss.backward()
    assert model.bank.q_pos_ins.grad is None
