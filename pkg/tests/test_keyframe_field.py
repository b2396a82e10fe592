import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import RegularGridInterpolator

from nvfi.diffcore import ParamStore, tape as T
from nvfi.keyframe_field import SPACE_PLANES, TIME_PLANES, KeyframeField, KeyframeSchedule, plane_tv

AABB = np.array([[-1.0] * 3, [1.0] * 3])


def make_field(R=6, K=3, seed=0, dtype=np.float64, **kw):
    ps = ParamStore(dtype)
    sched = KeyframeSchedule.uniform(K, 1.0)
    kw = {"n_density": 4, "n_app": 5, "feat_dim": 6, "hidden": 16, **kw}
    f = KeyframeField.create(ps, sched, AABB, R, np.random.default_rng(seed), **kw)
    return f, ps


def randomize(f, ps, seed=1):
    rng = np.random.default_rng(seed)
    for n in f.plane_names():
        ps.set(n, rng.uniform(-1, 1, ps[n].shape))


def test_index_of_examples():
    s = KeyframeSchedule.uniform(4, 1.0)
    assert s.times == (0.25, 0.5, 0.75, 1.0)
    assert s.index_of(0.3) == 0
    assert s.index_of(0.375) == 0
    assert s.index_of(1.7) == 3
    np.testing.assert_array_equal(s.index_of(np.array([0.0, 0.6, 0.9])), [0, 1, 3])


def test_snapped_schedule():
    stamps = [j / 29 for j in range(22)]
    s = KeyframeSchedule.uniform(4, stamps[-1], stamps)
    assert all(t in stamps for t in s.times)
    assert s.times[-1] == stamps[-1]


def test_constant_planes_density():
    f, ps = make_field()
    v = 0.7
    for n in f.plane_names():
        if ".density." in n:
            ps.set(n, np.full(ps[n].shape, v))
    raw, sigma = f.density(np.random.default_rng(0).uniform(-1, 1, (20, 3)), 1)
    np.testing.assert_allclose(raw.data, 4 * v ** 6)
    np.testing.assert_allclose(sigma.data, np.log1p(np.exp(4 * v ** 6)))


def test_zero_plane_annihilates():
    f, ps = make_field()
    randomize(f, ps)
    ps.set("kf.density.yt", np.zeros_like(ps["kf.density.yt"]))
    ps.set("kf.app.xz", np.zeros_like(ps["kf.app.xz"]))
    raw, _, e = f.eval_density_feature(np.random.default_rng(0).uniform(-1, 1, (10, 3)), 0)
    np.testing.assert_array_equal(raw.data, 0.0)
    np.testing.assert_array_equal(e.data, 0.0)


def _node_coords(R, idx):
    return -1 + 2 * idx / (R - 1)


def _dense_tensor(f, ps, kind):
    # materialize the outer-product tensor [R, R, R, K, M]
    P = {n: ps[f.plane_name(kind, n)] for n in ("xy", "xz", "yz", "zt", "yt", "xt")}
    return np.einsum("abm,acm,bcm,ckm,bkm,akm->abckm", P["xy"], P["xz"], P["yz"], P["zt"], P["yt"], P["xt"])


def test_matches_dense_tensor_at_nodes():
    R, K = 7, 3
    f, ps = make_field(R, K)
    randomize(f, ps)
    rng = np.random.default_rng(5)
    idx = rng.integers(0, R, (1000, 3))
    k = rng.integers(0, K, 1000)
    p = _node_coords(R, idx)
    for kind in ("density", "app"):
        dense = _dense_tensor(f, ps, kind)
        expect = dense[idx[:, 0], idx[:, 1], idx[:, 2], k]
        got = f._fuse(kind, T.constant(p), k).data
        np.testing.assert_allclose(got, expect, atol=1e-5)
    raw, _ = f.density(p, k)
    np.testing.assert_allclose(raw.data, _dense_tensor(f, ps, "density")[idx[:, 0], idx[:, 1], idx[:, 2], k].sum(-1),
                               atol=1e-5)


def test_matches_independent_interpolation_between_nodes():
    R, K = 8, 2
    f, ps = make_field(R, K)
    randomize(f, ps)
    rng = np.random.default_rng(6)
    p = rng.uniform(-1, 1, (1000, 3))
    k = rng.integers(0, K, 1000)
    g = np.linspace(-1, 1, R)
    expect = 1.0
    for (sname, a, b), (tname, c) in zip(SPACE_PLANES, TIME_PLANES):
        sp = RegularGridInterpolator((g, g), ps[f.plane_name("density", sname)])(p[:, [a, b]])
        tp = ps[f.plane_name("density", tname)]
        tl = np.stack([RegularGridInterpolator((g,), tp[:, kk])(p[:, c]) for kk in range(K)], 1)
        expect = expect * sp * tl[np.arange(1000), k]
    raw, _ = f.density(p, k)
    np.testing.assert_allclose(raw.data, expect.sum(-1), atol=1e-5)


def test_piecewise_constant_in_time():
    f, ps = make_field(K=4)
    randomize(f, ps)
    p = np.random.default_rng(0).uniform(-1, 1, (5, 3))
    s = f.schedule
    a = f.eval_density_feature(p, s.index_of(0.30))
    b = f.eval_density_feature(p, s.index_of(0.35))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_density_nonnegative(seed):
    f, ps = make_field(seed=seed)
    randomize(f, ps, seed)
    p = np.random.default_rng(seed).uniform(-1.5, 1.5, (50, 3))
    _, sigma = f.density(p, 2)
    assert np.all(sigma.data >= 0)


def test_outside_points_clamped():
    f, ps = make_field()
    randomize(f, ps)
    inside = f.density(np.array([[1.0, -1.0, 0.3]]), 0)[0].data
    outside = f.density(np.array([[1.5, -3.0, 0.3]]), 0)[0].data
    np.testing.assert_allclose(inside, outside)


def test_decode_color_zero_weights_gray():
    f, ps = make_field()
    for n in ps.names("kf.color"):
        ps.set(n, np.zeros_like(ps[n]))
    c = f.decode_color(np.random.default_rng(0).normal(size=(4, 6)), np.tile([0, 0, 1.0], (4, 1)))
    np.testing.assert_allclose(c.data, 0.5)


def test_decode_color_range_and_view_dependence():
    f, ps = make_field()
    e = np.tile(np.random.default_rng(0).normal(size=(1, 6)), (2, 1))
    d = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    c = f.decode_color(e, d).data
    assert np.all((c > 0) & (c < 1))
    assert not np.allclose(c[0], c[1])


def test_upsample_identity_and_error():
    f, ps = make_field(R=6)
    before = {n: ps[n].copy() for n in f.plane_names()}
    assert f.upsample(6) == []
    for n in before:
        np.testing.assert_array_equal(ps[n], before[n])
    with pytest.raises(ValueError):
        f.upsample(4)


def test_upsample_reproduces_affine_plane():
    f, ps = make_field(R=5, K=2)
    ramp = lambda n: 0.3 * np.linspace(-1, 1, n)[:, None, None] - 0.2 * np.linspace(-1, 1, n)[None, :, None] + 1.0
    ps.set("kf.density.xy", np.broadcast_to(ramp(5), ps["kf.density.xy"].shape))
    f.upsample(9)
    np.testing.assert_allclose(ps["kf.density.xy"], np.broadcast_to(ramp(9), (9, 9, 4)), atol=1e-12)


def test_upsample_constant_plane_stays_constant():
    f, ps = make_field(R=4)
    for n in f.plane_names():
        ps.set(n, np.full(ps[n].shape, 0.8))
    f.upsample(11)
    for n in f.plane_names():
        np.testing.assert_allclose(ps[n], 0.8)
        assert ps[n].shape[1] == (11 if n.split(".")[-1] in ("xy", "xz", "yz") else f.schedule.K)


def test_upsample_agrees_at_old_nodes():
    f, ps = make_field(R=5, K=2)
    randomize(f, ps)
    idx = np.random.default_rng(0).integers(0, 5, (50, 3))
    p = _node_coords(5, idx)
    before = f.density(p, 1)[0].data
    f.upsample(9)
    np.testing.assert_allclose(f.density(p, 1)[0].data, before, atol=1e-12)


def test_tv_examples():
    assert float(T.data_of(plane_tv(np.array([[0.0, 1.0]])[..., None]))) == pytest.approx(1.0)
    f, ps = make_field()
    for n in f.plane_names():
        ps.set(n, np.full(ps[n].shape, 0.3))
    assert float(T.data_of(f.tv_loss())) == 0.0
    plane = np.random.default_rng(0).normal(size=(4, 5, 2))
    a = float(T.data_of(plane_tv(plane)))
    assert float(T.data_of(plane_tv(2 * plane))) == pytest.approx(4 * a)


def test_tv_ignores_time_axis():
    f, ps = make_field(R=4, K=3)
    for n in f.plane_names():
        ps.set(n, np.ones(ps[n].shape))
    t = ps["kf.density.zt"].copy()
    t[:, 1] = 5.0  # varies only along the keyframe axis
    ps.set("kf.density.zt", t)
    assert float(T.data_of(f.tv_loss())) == 0.0
