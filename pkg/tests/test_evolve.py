import numpy as np
import pytest
import torch

from evofeat import evolve, model
from evofeat.io import DataError
from evofeat.evolve import EvolveConfig, lr_schedule
from evofeat.synthetic import synthetic_dataset


def test_lr_schedule_traces():
    assert lr_schedule([1, 0.9, 0.8]) == [1e-3, 1e-3, 1e-3]
    assert lr_schedule([1, 1, 1]) == pytest.approx([1e-3, 1e-3, 1e-4])
    assert lr_schedule([1, 0.99, 1.2, 1.2]) == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4])


def test_lr_schedule_resets_and_floors():
    # after a decay the counter restarts, so two more flat epochs decay again
    out = lr_schedule([1] * 5, lr=1e-5, floor=1e-6)
    assert out == pytest.approx([1e-5, 1e-5, 1e-6, 1e-6, 1e-6])


def test_flat_round_trip_and_unknown_keys():
    cfg = EvolveConfig.from_flat({"desc.margin": "0.5", "iterations": "2", "affine_adaptation": "off"})
    assert cfg.desc.margin == 0.5 and cfg.iterations == 2 and cfg.affine_adaptation is False
    assert EvolveConfig.from_flat(cfg.to_flat()) == cfg
    for bad in ({"nope": 1}, {"desc.nope": 1}, {"desc": 1}, {"seed.x": 1}):
        with pytest.raises(KeyError):
            EvolveConfig.from_flat(bad)


def test_config_hash_tracks_every_field():
    base = EvolveConfig()
    assert base.config_hash() == EvolveConfig().config_hash()
    for key, value in (("desc.margin", 0.5), ("det.use_rep", False), ("seed", 1),
                       ("reliability.use_distinctness", False)):
        assert EvolveConfig.from_flat({key: value}).config_hash() != base.config_hash()


def test_invalid_values_rejected():
    with pytest.raises(ValueError):
        EvolveConfig(iterations=0)
    with pytest.raises(ValueError):
        EvolveConfig(initial_lr=0)


def tiny_cfg(**kw):
    flat = {"epochs_per_phase": 1, "iterations": 1, "arch.stem": 4, "arch.widths": [4, 4, 4],
            "arch.desc_dim": 4, "reliability.m": 1, "detect_warps": 1, "initial_keypoints": 60}
    flat.update(kw)
    return EvolveConfig.from_flat(flat)


@pytest.fixture(scope="module")
def images():
    return synthetic_dataset(3, seed=0, shape=(64, 80))


def state_of(net):
    return {k: v.clone() for k, v in net.state_dict().items()}


def test_tiny_run_writes_checkpoints(images, tmp_path):
    net, report = evolve.run_self_evolve(tiny_cfg(), images, out_dir=tmp_path)
    assert sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*.ckpt")) == \
        ["0/descriptor.ckpt", "0/detector.ckpt", "final.ckpt"]
    meta = model.load_checkpoint(tmp_path / "0/detector.ckpt").meta
    assert meta["phase"] == "detector" and meta["iteration"] == 0
    assert [c["kind"] for c in report.caches] == ["Q", "Y"]
    assert len([r for r in report.rows if r["phase"] == "descriptor"]) == len(images)
    assert (tmp_path / "metrics.jsonl").read_text().count('"kind": "step"') == 2 * len(images)


def test_one_snapshot_per_phase(images, monkeypatch):
    calls = []
    real = evolve.snapshot

    def counting(net):
        calls.append(1)
        return real(net)

    monkeypatch.setattr(evolve, "snapshot", counting)
    evolve.run_self_evolve(tiny_cfg(iterations=2), images)
    assert len(calls) == 4


def test_resume_matches_uninterrupted(images, tmp_path):
    cfg = tiny_cfg(iterations=2)
    full, rep_full = evolve.run_self_evolve(cfg, images, out_dir=tmp_path / "a")
    for ckpt in ("0/detector.ckpt", "0/descriptor.ckpt"):
        resumed, _ = evolve.run_self_evolve(cfg, images, resume_from=tmp_path / "a" / ckpt)
        a, b = state_of(full), state_of(resumed)
        assert a.keys() == b.keys()
        for k in a:
            assert torch.equal(a[k], b[k]), (ckpt, k)


def test_same_seed_same_caches(images):
    _, r1 = evolve.run_self_evolve(tiny_cfg(), images)
    _, r2 = evolve.run_self_evolve(tiny_cfg(), images)
    for c1, c2 in zip(r1.caches, r2.caches):
        for k in c1["points"]:
            np.testing.assert_array_equal(c1["points"][k], c2["points"][k])


def test_non_finite_loss_raises(images, monkeypatch):
    def bad_step(*a, **k):
        return {"L1": float("nan"), "L_des": float("nan")}

    monkeypatch.setattr(evolve, "descriptor_update_step", bad_step)
    with pytest.raises(FloatingPointError, match="L1"):
        evolve.run_self_evolve(tiny_cfg(), images)


def test_rejects_tiny_images():
    with pytest.raises(DataError):
        evolve.run_self_evolve(tiny_cfg(), {"a": np.zeros((10, 10))})


def test_running_mean_windows():
    rep = evolve.EvolveReport("x", rows=[{"phase": "descriptor", "L_des": v} for v in (4.0, 2.0, 0.0)]
                              + [{"phase": "descriptor", "skipped": True}])
    assert rep.running_mean("descriptor", "L_des") == pytest.approx([4, 3, 2])
    assert rep.running_mean("descriptor", "L_des", window=2) == pytest.approx([4, 3, 1])
