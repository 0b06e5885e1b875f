import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dereflect.datagen import (
    HeuristicRealismScorer,
    ManifestRecord,
    MixCoefficients,
    MixTriple,
    filter_by_realism,
    generate_scene,
    mix,
    mix_unclamped,
    read_manifest,
    retained_count,
    sample_coefficients,
    write_manifest,
)
from dereflect.errors import DimensionError, ValidationError
from dereflect.textures import procedural_texture, reflection_pool, reflection_texture, texture_pool


def scalar_mix(t, r, g1, g2):
    return g1 * t + g2 * r - g1 * g2 * t * r


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_mix_reflection_free(rng):
    t = rng.random((16, 16, 3))
    out = mix(t, np.zeros_like(t), MixCoefficients(0.9, 0.5))
    np.testing.assert_array_equal(out, 0.9 * t)


def test_mix_transmission_free(rng):
    r = rng.random((16, 16, 3))
    out = mix(np.zeros_like(r), r, MixCoefficients(0.9, 0.5))
    np.testing.assert_array_equal(out, 0.5 * r)


def test_mix_single_pixel():
    t = np.full((8, 8, 3), 0.5)
    out = mix(t, t, MixCoefficients(0.8, 0.4))
    np.testing.assert_allclose(out, 0.52, atol=1e-12)


def test_mix_shape_mismatch():
    with pytest.raises(DimensionError):
        mix(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), MixCoefficients(0.9, 0.5))


@pytest.mark.parametrize("g1,g2", [(0.79, 0.5), (1.01, 0.5), (0.9, 0.39), (0.9, 1.2)])
def test_coefficients_validated(g1, g2):
    with pytest.raises(ValidationError):
        MixCoefficients(g1, g2)


unit = arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1))
g1s = st.floats(0.8, 1.0)
g2s = st.floats(0.4, 1.0)


@settings(max_examples=60, deadline=None)
@given(unit, unit, g1s, g2s)
def test_mix_range_and_formula(t, r, g1, g2):
    coeffs = MixCoefficients(g1, g2)
    raw = mix_unclamped(t, r, coeffs)
    assert raw.min() >= -1e-12 and raw.max() <= 1 + 1e-12
    out = mix(t, r, coeffs)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out, np.clip(scalar_mix(t, r, g1, g2), 0, 1), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(unit, unit, g1s, g2s)
def test_mix_monotone_in_transmission(t, r, g1, g2):
    coeffs = MixCoefficients(g1, g2)
    h = 1e-6
    t_lo = np.clip(t - h, 0, 1)
    t_hi = np.clip(t + h, 0, 1)
    slope = mix_unclamped(t_hi, r, coeffs) - mix_unclamped(t_lo, r, coeffs)
    assert np.all(slope >= -1e-15)
    # analytic derivative g1 * (1 - g2 * R) against the finite difference
    width = t_hi - t_lo
    ok = width > 0
    np.testing.assert_allclose(slope[ok] / width[ok], (g1 * (1 - g2 * r))[ok], atol=1e-6)


def test_sample_coefficients_deterministic():
    a = sample_coefficients(np.random.default_rng(5))
    b = sample_coefficients(np.random.default_rng(5))
    assert a == b


def test_sample_coefficients_distribution():
    rng = np.random.default_rng(1)
    draws = [sample_coefficients(rng) for _ in range(10_000)]
    g1 = np.array([d.gamma1 for d in draws])
    g2 = np.array([d.gamma2 for d in draws])
    assert g1.min() >= 0.8 and g1.max() <= 1.0
    assert g2.min() >= 0.4 and g2.max() <= 1.0
    assert abs(g2.mean() - 0.7) < 0.02


def test_generate_scene_cardinality(rng):
    t = procedural_texture(rng, 16)
    refl = [procedural_texture(rng, 16) for _ in range(3)]
    group = generate_scene(t, refl, rng, scene_id="s1")
    assert len(group) == 3
    assert {tr.scene_id for tr in group.triples} == {"s1"}
    assert len({tr.coeffs for tr in group.triples}) == 3
    for tr in group.triples:
        assert tr.transmission is t
        assert tr.formula_error() <= 1e-6


def test_generate_scene_identity_case(rng):
    t = procedural_texture(rng, 16)
    group = generate_scene(t, [np.zeros_like(t)], rng, sampler=lambda r: MixCoefficients(1.0, 0.7))
    np.testing.assert_array_equal(group.triples[0].mixed, t)


def test_generate_scene_deterministic():
    def run():
        rng = np.random.default_rng(42)
        t, r1, r2 = texture_pool(3, 3, 16)
        g = generate_scene(t, [r1, r2], rng)
        return g.scene_id, [(tr.coeffs, tr.mixed.tobytes()) for tr in g.triples]

    assert run() == run()


def test_generate_scene_requires_reflection(rng):
    with pytest.raises(ValidationError):
        generate_scene(np.zeros((16, 16, 3)), [], rng)


# ----------------------------------------------------------------------------- filtering


def stubs(n):
    return [SimpleNamespace(scene_id=f"s{i:06d}", value=(i * 7919) % 1000) for i in range(n)]


def test_filter_keep_all_sorts_by_score():
    items = stubs(50)
    out = filter_by_realism(items, lambda s: s.value, keep_fraction=1.0)
    assert sorted(id(x) for x in out) == sorted(id(x) for x in items)
    expected = sorted(items, key=lambda s: (-s.value, s.scene_id))
    assert out == expected
    # idempotent
    assert filter_by_realism(out, lambda s: s.value, 1.0) == out


def test_filter_reference_operating_point():
    assert retained_count(69443, 0.30) == 20833
    assert retained_count(69443, 20833 / 69443) == 20833


def test_filter_constant_scorer_tiebreak():
    items = stubs(40)[::-1]
    out = filter_by_realism(items, lambda s: 1.0, keep_fraction=0.25)
    assert [s.scene_id for s in out] == sorted(s.scene_id for s in items)[:10]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(1, 200))
def test_filter_monotone(a, b, n):
    a, b = min(a, b), max(a, b)
    items = stubs(n)
    small = filter_by_realism(items, lambda s: s.value, a)
    large = filter_by_realism(items, lambda s: s.value, b)
    assert {s.scene_id for s in small} <= {s.scene_id for s in large}
    assert len(small) == math.ceil(round(a * n, 6))


def test_filter_empty_and_bad_fraction():
    assert filter_by_realism([], lambda s: 0.0, 0.5) == []
    with pytest.raises(ValidationError):
        filter_by_realism(stubs(3), lambda s: 0.0, 0.0)


def test_filter_threshold_mode():
    items = stubs(100)
    out = filter_by_realism(items, lambda s: s.value, threshold=500)
    assert all(s.value >= 500 for s in out)
    assert len(out) == sum(s.value >= 500 for s in items)


def test_heuristic_scorer_prefers_structured_reflection(rng):
    t = procedural_texture(rng, 32)
    flat = np.full_like(t, 0.3)
    textured = procedural_texture(np.random.default_rng(9), 32)
    coeffs = MixCoefficients(0.9, 0.8)
    scorer = HeuristicRealismScorer()
    flat_t = MixTriple(t, flat, mix(t, flat, coeffs), coeffs, "a")
    tex_t = MixTriple(t, textured, mix(t, textured, coeffs), coeffs, "b")
    assert scorer(tex_t) > scorer(flat_t)
    assert scorer(tex_t) == scorer(tex_t)
    blown = np.ones_like(t)
    saturating = MixCoefficients(0.9, 1.0)
    blown_t = MixTriple(t, blown, mix(t, blown, saturating), saturating, "c")
    assert scorer(blown_t) < scorer(flat_t)


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("s1", "t.png", "r.png", "m.png", 0.9, 0.5, None),
            ManifestRecord("s2", "t2.png", "r2.png", "m2.png", 0.85, 0.6, 0.25)]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs


def test_textures_deterministic_and_in_range():
    a, b = texture_pool(4, 3, 32), texture_pool(4, 3, 32)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.shape == (32, 32, 3) and x.min() >= 0 and x.max() <= 1
    np.testing.assert_array_equal(reflection_pool(4, 2, 32)[1], reflection_pool(4, 2, 32)[1])


def test_reflection_texture_is_defocused():
    sharp = procedural_texture(np.random.default_rng(2), 64)
    soft = reflection_texture(np.random.default_rng(2), 64)

    def hf(img):
        g = img.mean(axis=2)
        return np.abs(np.diff(g, axis=0)).mean() + np.abs(np.diff(g, axis=1)).mean()

    assert hf(soft) < hf(sharp)
    assert soft.min() >= 0 and soft.max() <= 1
