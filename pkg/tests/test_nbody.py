"""Geometry layer: configurations, centering, rigid motions, force helpers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbalign.errors import ConfigError, ContractViolation, EmptySystemError
from nbalign.nbody import (Configuration, RigidMotion, apply_rigid_motion,
                           center_positions, clip_force, format_configuration,
                           load_configuration, ordered_pairs,
                           parse_configuration, project_com, random_rotation,
                           rms_force, save_configuration)
from nbalign.rng import stream


def random_config(rng, n=4, d_h=2):
    return Configuration(center_positions(rng.standard_normal((n, 3))),
                         rng.standard_normal((n, d_h)))


# --- ordered pairs ----------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_ordered_pairs_cover_all_directed_edges(n):
    dst, src = ordered_pairs(n)
    assert dst.shape == src.shape == (n * (n - 1),)
    assert not np.any(dst == src)
    assert set(zip(dst.tolist(), src.tolist())) == {
        (i, j) for i in range(n) for j in range(n) if i != j}


def test_ordered_pairs_grouped_by_destination():
    dst, _ = ordered_pairs(5)
    np.testing.assert_array_equal(dst, np.repeat(np.arange(5), 4))


# --- configurations ---------------------------------------------------------


def test_configuration_validation():
    rng = stream(0, "nbody")
    with pytest.raises(ContractViolation):
        Configuration(rng.standard_normal((3, 2)), rng.standard_normal((3, 1)))
    with pytest.raises(ContractViolation):
        Configuration(rng.standard_normal((3, 3)), rng.standard_normal((4, 1)))
    with pytest.raises(EmptySystemError):
        Configuration(np.zeros((0, 3)), np.zeros((0, 1)))
    bad = rng.standard_normal((3, 3))
    bad[1, 2] = np.inf
    with pytest.raises(ContractViolation):
        Configuration(bad, np.zeros((3, 1)))


def test_configuration_copies_and_freezes():
    pos = np.zeros((2, 3))
    cfg = Configuration(pos, np.zeros((2, 1)))
    pos[0, 0] = 5.0
    assert cfg.positions[0, 0] == 0.0
    with pytest.raises(ValueError):
        cfg.positions[0, 0] = 1.0


def test_centered_and_com_magnitude():
    rng = stream(1, "nbody")
    cfg = Configuration(rng.standard_normal((6, 3)) + 3.0,
                        rng.standard_normal((6, 2)))
    cen = cfg.centered()
    assert cen.com_magnitude() <= 1e-8
    np.testing.assert_array_equal(cen.features, cfg.features)
    assert cfg.n_bodies == 6 and cfg.feature_dim == 2


def test_project_com_idempotent_bitwise():
    rng = stream(2, "nbody")
    pos = rng.standard_normal((7, 3)) * 1e6 + 1e3
    once = project_com(pos)
    np.testing.assert_array_equal(project_com(once), once)
    assert np.linalg.norm(once.mean(axis=0)) <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=9), st.integers(min_value=0, max_value=2**31))
def test_project_com_idempotent_property(n, seed):
    pos = stream(seed, "nbody", "prop").standard_normal((n, 3)) * 100
    once = project_com(pos)
    np.testing.assert_array_equal(project_com(once), once)


def test_project_com_rejects_empty_and_bad_shape():
    with pytest.raises(EmptySystemError):
        project_com(np.zeros((0, 3)))
    with pytest.raises(ContractViolation):
        project_com(np.zeros((3, 2)))


# --- rigid motions ----------------------------------------------------------


def test_rigid_motion_requires_orthogonal_matrix():
    with pytest.raises(ContractViolation):
        RigidMotion(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ContractViolation):
        RigidMotion(np.eye(4), np.zeros(3))


def test_random_rotation_is_orthogonal():
    rng = stream(3, "nbody")
    dets = [np.linalg.det(random_rotation(rng).rotation) for _ in range(50)]
    assert {-1, 1} == set(int(round(d)) for d in dets)  # both parities appear
    rng = stream(3, "nbody")
    for _ in range(20):
        m = random_rotation(rng, reflections=False)
        np.testing.assert_allclose(m.rotation @ m.rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(m.rotation) > 0


def test_apply_rigid_motion_moves_positions_only():
    rng = stream(4, "nbody")
    cfg = random_config(rng)
    m = random_rotation(rng)
    out = apply_rigid_motion(cfg, m)
    np.testing.assert_allclose(out.positions,
                               cfg.positions @ m.rotation.T + m.translation,
                               rtol=0, atol=1e-12)
    np.testing.assert_array_equal(out.features, cfg.features)


def test_compose_matches_sequential_application():
    rng = stream(5, "nbody")
    cfg = random_config(rng)
    m1, m2 = random_rotation(rng), random_rotation(rng)
    m1 = RigidMotion(m1.rotation, rng.standard_normal(3))
    m2 = RigidMotion(m2.rotation, rng.standard_normal(3))
    seq = apply_rigid_motion(apply_rigid_motion(cfg, m1), m2)
    joint = apply_rigid_motion(cfg, m2.compose(m1))
    np.testing.assert_allclose(seq.positions, joint.positions, rtol=0, atol=1e-10)
    ident = apply_rigid_motion(cfg, RigidMotion.identity())
    np.testing.assert_array_equal(ident.positions, cfg.positions)


# --- force helpers ----------------------------------------------------------


def test_rms_force_value():
    f = np.array([[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
    assert rms_force(f) == pytest.approx(np.sqrt(25.0 / 2.0), rel=1e-15)
    with pytest.raises(EmptySystemError):
        rms_force(np.zeros((0, 3)))
    with pytest.raises(ContractViolation):
        rms_force(np.zeros(3))


def test_clip_force_rescales_long_rows_only():
    f = np.array([[4.0, 0.0, 0.0], [0.1, 0.2, 0.0], [0.0, 0.0, 0.0]])
    out = clip_force(f, 2.0)
    np.testing.assert_allclose(out[0], [2.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(out[1:], f[1:])
    with pytest.raises(ConfigError):
        clip_force(f, 0.0)


# --- text round trips -------------------------------------------------------


def test_format_parse_roundtrip_exact():
    rng = stream(6, "nbody")
    cfg = random_config(rng, n=5, d_h=3)
    back = parse_configuration(format_configuration(cfg))
    np.testing.assert_array_equal(back.positions, cfg.positions)
    np.testing.assert_array_equal(back.features, cfg.features)


def test_save_load_roundtrip(tmp_path):
    rng = stream(7, "nbody")
    cfg = random_config(rng, n=3, d_h=1)
    path = tmp_path / "conf.txt"
    save_configuration(cfg, path)
    back = load_configuration(path)
    np.testing.assert_array_equal(back.positions, cfg.positions)


@pytest.mark.parametrize("text,message", [
    ("", "empty configuration record"),
    ("banana\n", "bad header"),
    ("2 1\n0 0 0 0 0\n", "expected 2 body records"),
    ("1 1\n0 0 nope 0 0\n", "bad body record"),
    ("1 1\n7 0 0 0 0\n", "body index out of range"),
])
def test_parse_configuration_diagnostics(text, message):
    with pytest.raises(ContractViolation, match=message):
        parse_configuration(text)
