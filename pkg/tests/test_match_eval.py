import json

import numpy as np
import pytest

from evofeat import geometry
from evofeat import match_eval as me
from evofeat.detect import KeypointSet


def exhaustive_nn(da, db, cross_check):
    out = set()
    for i in range(len(da)):
        d = [np.linalg.norm(da[i] - db[j]) for j in range(len(db))]
        j = int(np.argmin(d))
        if cross_check:
            back = [np.linalg.norm(da[k] - db[j]) for k in range(len(da))]
            if int(np.argmin(back)) != i:
                continue
        out.add((i, j))
    return out


def exhaustive_ratio(da, db, ratio):
    out = set()
    for i in range(len(da)):
        d = sorted((np.linalg.norm(da[i] - db[j]), j) for j in range(len(db)))
        d2 = d[1][0] if len(d) > 1 else np.inf
        if d[0][0] / d2 < ratio:
            out.add((i, d[0][1]))
    return out


def test_matching_matches_exhaustive_scan():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        da = rng.normal(size=(int(rng.integers(1, 40)), 8))
        db = rng.normal(size=(int(rng.integers(1, 40)), 8))
        assert me.nn_match(da, db, True).pairs() == exhaustive_nn(da, db, True)
        assert me.nn_match(da, db, False).pairs() == exhaustive_nn(da, db, False)
        assert me.ratio_test_match(da, db, 0.8).pairs() == exhaustive_ratio(da, db, 0.8)


def test_cross_check_symmetric():
    rng = np.random.default_rng(1)
    da, db = rng.normal(size=(30, 4)), rng.normal(size=(25, 4))
    ab = me.nn_match(da, db).pairs()
    ba = {(j, i) for i, j in me.nn_match(db, da).pairs()}
    assert ab == ba


def test_single_candidate_ratio_accepts():
    m = me.ratio_test_match(np.ones((1, 3)), np.zeros((1, 3)))
    assert m.pairs() == {(0, 0)}


def random_homography(rng):
    h = np.eye(3)
    h[:2, :2] += rng.normal(scale=0.1, size=(2, 2))
    h[:2, 2] = rng.uniform(-20, 20, 2)
    h[2, :2] = rng.normal(scale=1e-4, size=2)
    return h


def test_dlt_exact_four_points():
    rng = np.random.default_rng(0)
    h = random_homography(rng)
    src = np.array([[0, 0], [100, 5], [90, 80], [3, 70]], float)
    est = me.dlt_homography(src, me.project(h, src))
    assert np.abs(me.project(est, src) - me.project(h, src)).max() < 1e-6


def test_ransac_exact_correspondences():
    rng = np.random.default_rng(1)
    h = random_homography(rng)
    src = rng.uniform(0, 200, size=(100, 2))
    est, mask = me.estimate_homography(src, me.project(h, src))
    assert mask.all()
    assert me.corner_error(est, h, (160, 240)) < 0.5


def test_ransac_half_outliers():
    rng = np.random.default_rng(2)
    h = random_homography(rng)
    src = rng.uniform(0, 200, size=(200, 2))
    dst = me.project(h, src)
    out = rng.permutation(200)[:100]
    dst[out] = rng.uniform(0, 200, size=(100, 2))
    est, mask = me.estimate_homography(src, dst, me.RansacConfig(seed=3))
    assert me.corner_error(est, h, (160, 240)) < 1.0
    inl = np.ones(200, bool)
    inl[out] = False
    assert mask[inl].all()


def test_ransac_too_few():
    with pytest.raises(me.EstimationError):
        me.estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)))


def test_corner_error_closed_forms():
    shape = (10, 20)
    assert me.corner_error(np.eye(3), np.eye(3), shape) == 0.0
    t = np.eye(3)
    t[0, 2] = 3.0
    assert me.corner_error(t, np.eye(3), shape) == pytest.approx(3.0)
    assert me.homography_accuracy(t, np.eye(3), shape, 3)
    assert not me.homography_accuracy(t, np.eye(3), shape, 2)
    assert not me.homography_accuracy(None, np.eye(3), shape, 10)


def test_report_aggregation_by_hand(tmp_path):
    rep = me.HAReport()
    rep.add("i_a", "illumination", 2, 0.5)
    rep.add("i_a", "illumination", 3, 4.0)
    rep.add("v_b", "viewpoint", 2, 2.5)
    rep.add("v_b", "viewpoint", 3, None)
    acc = rep.accuracy()
    assert acc[1] == 0.25 and acc[3] == 0.5 and acc[4] == 0.75 and acc[10] == 0.75
    ill = rep.accuracy("illumination")
    assert ill[1] == 0.5 and ill[4] == 1.0
    assert rep.average("viewpoint") == pytest.approx((0 + 0 + 0.5 * 8) / 10)
    vals = list(acc.values())
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    path = tmp_path / "r.jsonl"
    rep.write(path)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines[-1]["kind"] == "summary" and len(lines) == 5
    rep.plot(tmp_path / "r.png")
    assert (tmp_path / "r.png").stat().st_size > 0


def test_identity_pairs_are_perfect():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(64, 80))
    seq = me.Sequence("i_same", [img, img.copy()], {2: np.eye(3)})
    pts = rng.integers(0, 64, size=(50, 2))
    desc = rng.normal(size=(50, 16))

    def extract(_):
        return KeypointSet(pts, np.ones(50), desc)

    rep = me.evaluate_sequences(None, [seq], extract=extract)
    assert all(v == 1.0 for v in rep.accuracy().values())


def test_load_hpatches_layout(tmp_path):
    from evofeat.io import write_image
    seq = tmp_path / "v_toy"
    seq.mkdir()
    rng = np.random.default_rng(0)
    for k in range(1, 4):
        write_image(seq / f"{k}.png", rng.uniform(size=(40, 60)))
    h = np.eye(3)
    h[0, 2] = 2.0
    np.savetxt(seq / "H_1_2", h)
    np.savetxt(seq / "H_1_3", np.eye(3))
    (tmp_path / "notes.txt").write_text("ignored")
    seqs = me.load_hpatches(tmp_path)
    assert len(seqs) == 1 and seqs[0].subset == "viewpoint"
    assert len(seqs[0].images) == 3 and set(seqs[0].homographies) == {2, 3}
    small = me.load_hpatches(tmp_path, max_side=30)[0]
    assert max(small.images[0].shape) == 30
    np.testing.assert_allclose(small.homographies[2][0, 2], 1.0)


def test_perfect_extractor_diagnostics():
    pts = np.array([[20, 20], [20, 40], [40, 20], [40, 40], [32, 32]])
    a = geometry.AffineTransform.translation(2, 1)
    warped = geometry.warp_keypoints(pts, a, np.ones((64, 64), bool))[1]
    desc = np.eye(5)
    kp_a = KeypointSet(pts, np.ones(5), desc)
    kp_b = KeypointSet(warped, np.ones(5), desc)
    rep, ms, n = me.pair_diagnostics(kp_a, kp_b, a, np.ones((64, 64), bool))
    assert (rep, ms, n) == (1.0, 1.0, 5)


def test_diagnostics_code_path_runs():
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(size=(48, 48)) for _ in range(2)]

    def extract(lum):
        from evofeat.detect import random_keypoints
        k = random_keypoints(lum.shape, 20, np.random.default_rng(1))
        k.descriptors = rng.normal(size=(len(k), 4))
        return k

    d = me.repeatability_and_matching_score(extract, imgs, 4, np.random.default_rng(2))
    assert 0 <= d.repeatability <= 1 and 0 <= d.matching_score <= 1
    assert len(d.per_trial) == 4
