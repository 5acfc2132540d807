import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from savfi.clutter import casorati, svd_filter


def _speckle(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_identity_full_range(rng):
    x = _speckle(rng, (6, 8, 8))
    out = svd_filter(x, 0, 6)
    assert np.linalg.norm(out - x) <= 1e-5 * np.linalg.norm(x)


def test_static_stack_removed(rng):
    frame = _speckle(rng, (16, 16))
    x = np.repeat(frame[None], 5, axis=0)
    assert np.linalg.norm(svd_filter(x, 1)) < 1e-6 * np.linalg.norm(x)


def test_static_plus_speckle_separation(rng):
    n = 8
    speckle = _speckle(rng, (n, 32, 32)) / np.sqrt(2)
    static = 10 * _speckle(rng, (32, 32)) / np.sqrt(2)
    stack = static[None] + speckle
    out = svd_filter(stack, 1)
    # project the output onto each component's subspace
    s_dir = static.ravel() / np.linalg.norm(static)
    flat = out.reshape(n, -1)
    static_res = np.sum(np.abs(flat @ s_dir.conj()) ** 2)
    static_e = n * np.linalg.norm(static) ** 2
    assert static_res / static_e < 0.05
    sp = speckle.reshape(n, -1)
    kept = np.sum(np.abs(np.sum(flat.conj() * sp, axis=1)) ** 2 / np.sum(np.abs(sp) ** 2, axis=1))
    assert kept / np.sum(np.abs(sp) ** 2) > 0.7


def test_real_stack_stays_real(rng):
    out = svd_filter(rng.normal(size=(4, 5, 5)), 1)
    assert not np.iscomplexobj(out)


def test_bad_cuts(rng):
    x = rng.normal(size=(4, 3, 3))
    for lo, hi in [(4, 4), (2, 1), (-1, 2), (0, 5)]:
        with pytest.raises(ValueError):
            svd_filter(x, lo, hi)
    with pytest.raises(ValueError):
        casorati(x[:1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.integers(0, 3))
def test_filter_is_projection(seed, lo):
    x = _speckle(np.random.default_rng(seed), (5, 6, 6))
    once = svd_filter(x, lo)
    twice = svd_filter(once, 0, 5)
    np.testing.assert_allclose(twice, once, atol=1e-9 * max(1.0, np.abs(x).max()))
    # removed and kept parts are orthogonal and sum to the input
    rest = x - once
    assert abs(np.vdot(rest.ravel(), once.ravel())) < 1e-8 * np.linalg.norm(x) ** 2
