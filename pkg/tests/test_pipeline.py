import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csitwin.channel import SystemConfig, delay_domain_channel, frequency_channel
from csitwin.pipeline import (DatasetError, ZeroChannelError, channels_for_positions,
                              from_delay_angular, generate_dataset, load_dataset, normalize,
                              retained_energy, save_dataset, sidecar_path, split, to_delay_angular,
                              truncate)
from csitwin.raytrace import PathParams
from csitwin.scene import builtin_scenes


def _rand(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _dft(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def test_delay_angular_matches_matrix_form():
    rng = np.random.default_rng(0)
    H = _rand(rng, (16, 4))
    Fd, Fa = _dft(16), _dft(4)
    np.testing.assert_allclose(to_delay_angular(H), Fd @ H @ Fa.conj().T, atol=1e-12)


def test_delay_angular_zero():
    assert not to_delay_angular(np.zeros((8, 4))).any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), k=st.sampled_from([32, 64, 256]), n=st.sampled_from([1, 4, 32]))
def test_round_trip_and_unitarity(seed, k, n):
    H = _rand(np.random.default_rng(seed), (k, n))
    G = to_delay_angular(H)
    assert np.linalg.norm(from_delay_angular(G) - H) / np.linalg.norm(H) < 1e-10
    assert np.linalg.norm(G) == pytest.approx(np.linalg.norm(H), rel=1e-10)


def test_single_tap_broadside_concentrates_energy():
    cfg = SystemConfig()
    h = delay_domain_channel([PathParams(1.0 + 0j, 0.0, np.pi / 2, 0.0)], cfg)
    G = to_delay_angular(frequency_channel(h, cfg))
    energy = np.abs(G) ** 2
    assert energy[0, 0] / energy.sum() > 0.99


def test_truncate():
    rng = np.random.default_rng(1)
    G = _rand(rng, (256, 32))
    T = truncate(G)
    assert T.shape == (32, 32)
    np.testing.assert_array_equal(T, G[:32])
    assert not truncate(np.zeros((64, 4))).any()
    with pytest.raises(DatasetError):
        truncate(np.zeros((16, 4)))


def test_normalize():
    rng = np.random.default_rng(2)
    G = _rand(rng, (32, 4))
    G *= 5.0 / np.linalg.norm(G)
    x = normalize(G)
    assert np.linalg.norm(x.entries) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(x.entries * 5.0, G)
    np.testing.assert_allclose(normalize(x.entries).entries, x.entries, atol=1e-15)
    with pytest.raises(ZeroChannelError):
        normalize(np.zeros((32, 4)))


def test_builtin_truncation_energy(small_datasets):
    target, twin, baseline = builtin_scenes()
    cfg = SystemConfig()
    for scene in (target, twin, baseline):
        grid = scene.service_grid
        idx = np.random.default_rng(0).choice(grid.size, 300, replace=False)
        chans = [H for H in channels_for_positions(scene, cfg, grid.positions(idx))
                 if np.abs(H.entries).sum() > 0]
        assert np.mean([retained_energy(H) for H in chans]) >= 0.99


def test_generate_dataset_basic(small_datasets):
    ds = small_datasets["target"]
    assert len(ds) == 200
    assert ds.shape == (32, 32)
    assert ds.scenario == "target"
    assert np.all(np.diff(ds.grid_indices) > 0)
    norms = np.linalg.norm(ds.samples.reshape(len(ds), -1), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    assert ds.meta["scene"] == "target"


def test_generate_dataset_count_zero():
    target, _, _ = builtin_scenes()
    ds = generate_dataset(target, SystemConfig(), seed=0, count=0)
    assert len(ds) == 0 and ds.shape == (32, 32)


def test_generate_dataset_deterministic():
    target, _, _ = builtin_scenes()
    a = generate_dataset(target, SystemConfig(), seed=5, count=50)
    b = generate_dataset(target, SystemConfig(), seed=5, count=50)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.grid_indices, b.grid_indices)


def test_generate_dataset_errors():
    target, _, _ = builtin_scenes()
    with pytest.raises(DatasetError):
        generate_dataset(target, SystemConfig(), seed=0, count=target.service_grid.size + 1)
    with pytest.raises(DatasetError):
        generate_dataset(target, SystemConfig(num_antennas=8), seed=0, count=1)


def test_twin_target_pairing(small_datasets):
    t, w = small_datasets["target"], small_datasets["twin"]
    np.testing.assert_array_equal(t.grid_indices, w.grid_indices)
    corr = np.abs(np.einsum("nij,nij->n", t.samples.conj(), w.samples))
    assert np.all(corr <= 1 + 1e-9)
    assert np.sum(corr < 1 - 1e-6) > 0.2 * len(t)   # foliage alters a good share of the UEs


def test_split_sizes_and_disjointness(small_datasets):
    ds = small_datasets["target"].head(10)
    tr, te = split(ds, 0.8, seed=3)
    assert (len(tr), len(te)) == (8, 2)
    a, b = set(tr.grid_indices), set(te.grid_indices)
    assert not a & b and a | b == set(ds.grid_indices)
    tr2, te2 = split(ds, 0.8, seed=3)
    np.testing.assert_array_equal(tr.grid_indices, tr2.grid_indices)
    one_tr, one_te = split(ds.head(1), 0.8, seed=0)
    assert (len(one_tr), len(one_te)) == (0, 1)
    with pytest.raises(DatasetError):
        split(ds.head(0), 0.8, seed=0)


def test_dataset_file_layout(tmp_path, small_datasets):
    ds = small_datasets["twin"].head(3)
    path = tmp_path / "twin.csid"
    save_dataset(ds, path)
    raw = path.read_bytes()
    magic, version, tag, n, rows, cols = struct.unpack_from("<4sIIIII", raw)
    assert (magic, version, tag, n, rows, cols) == (b"CSID", 1, 1, 3, 32, 32)
    body = np.frombuffer(raw, "<f4", count=3 * 32 * 32 * 2, offset=24).reshape(3, 32, 32, 2)
    np.testing.assert_array_equal(body[..., 0], ds.samples.real.astype("<f4"))
    np.testing.assert_array_equal(body[..., 1], ds.samples.imag.astype("<f4"))
    grid = np.frombuffer(raw, "<u4", offset=24 + body.nbytes)
    np.testing.assert_array_equal(grid, ds.grid_indices)
    assert sidecar_path(path).exists()


def test_dataset_roundtrip(tmp_path, small_datasets):
    ds = small_datasets["baseline"]
    path = tmp_path / "b.csid"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.scenario == "baseline" and len(back) == len(ds)
    np.testing.assert_array_equal(back.grid_indices, ds.grid_indices)
    np.testing.assert_allclose(back.samples, ds.samples, atol=1e-6)
    norms = np.linalg.norm(back.samples.reshape(len(back), -1), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    assert back.sys == ds.sys
    # same data written twice gives identical bytes
    save_dataset(back, tmp_path / "c.csid")
    save_dataset(ds, tmp_path / "d.csid")
    assert (tmp_path / "d.csid").read_bytes() == path.read_bytes()


def test_dataset_file_rejects_corruption(tmp_path, small_datasets):
    path = tmp_path / "x.csid"
    save_dataset(small_datasets["target"].head(2), path)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.csid"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(DatasetError):
        load_dataset(bad)
    bad.write_bytes(bytes(raw[:-3]))
    with pytest.raises(DatasetError):
        load_dataset(bad)
