import struct

import numpy as np
import pytest

from genimpute import kernels
from genimpute import _kernels_py as pyk

MASK64 = (1 << 64) - 1

backends = [pytest.param(kernels.python_backend, id="python")]
if kernels.compiled_backend is not None:
    backends.append(pytest.param(kernels.compiled_backend, id="compiled"))


# -- scalar oracles written directly from the published reference algorithms --

def fnv1a_oracle(words):
    h = 0xCBF29CE484222325
    for b in b"".join(struct.pack("<Q", w & MASK64) for w in words):
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix_oracle(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro_oracle(s, n):
    s = list(s)
    out = []
    for _ in range(n):
        out.append((rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64)
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_xoshiro_reference_sequence():
    # first outputs of xoshiro256** from state (1, 2, 3, 4)
    expected = [11520, 0, 1509978240, 1215971899390074240]
    assert xoshiro_oracle([1, 2, 3, 4], 4) == expected
    state = tuple(np.array([v], dtype=np.uint64) for v in (1, 2, 3, 4))
    got = []
    for _ in range(4):
        r, state = pyk.xoshiro_step(state)
        got.append(int(r[0]))
    assert got == expected


def test_splitmix_reference_value():
    assert splitmix_oracle(0)[1] == 0xE220A8397B1DCDAF
    _, z = pyk._splitmix64(np.array([0], dtype=np.uint64))
    assert int(z[0]) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("backend", backends)
def test_fnv_matches_bytewise_oracle(backend):
    rng = np.random.default_rng(3)
    q = rng.integers(-10**12, 10**12, size=(20, 5), dtype=np.int64)
    salt = 0xDEADBEEF
    got = backend.fnv1a_rows(q, salt)
    for i in range(q.shape[0]):
        assert int(got[i]) == fnv1a_oracle([salt] + [int(v) for v in q[i]])


def test_fnv_empty_row_is_hash_of_salt():
    h = pyk.fnv1a_rows(np.zeros((1, 0), dtype=np.int64), 7)
    assert int(h[0]) == fnv1a_oracle([7])


@pytest.mark.parametrize("backend", backends)
def test_uniform_rows_match_scalar_oracle(backend):
    seeds = np.array([0, 1, 2**63 + 5, 123456789], dtype=np.uint64)
    got = backend.uniform_rows(seeds, 6)
    for i, seed in enumerate(seeds):
        x, state = int(seed), []
        for _ in range(4):
            x, z = splitmix_oracle(x)
            state.append(z)
        expected = [(r >> 11) * 2.0**-53 for r in xoshiro_oracle(state, 6)]
        assert got[i].tolist() == expected


def test_uniform_rows_in_unit_interval():
    u = pyk.uniform_rows(np.arange(1000, dtype=np.uint64), 8)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


@pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled extension not built")
class TestBackendParity:
    def test_integer_kernels_bit_identical(self):
        rng = np.random.default_rng(0)
        q = rng.integers(-2**40, 2**40, size=(50, 7), dtype=np.int64)
        a = kernels.python_backend.fnv1a_rows(q, 99)
        b = kernels.compiled_backend.fnv1a_rows(q, 99)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(kernels.python_backend.uniform_rows(a, 11),
                                      kernels.compiled_backend.uniform_rows(a, 11))

    def test_adam_update_agrees(self):
        start = np.random.default_rng(1).normal(size=40)
        g = np.linspace(-1, 1, 40)
        outs = []
        for be in (kernels.python_backend, kernels.compiled_backend):
            p, m, v = start.copy(), np.zeros(40), np.zeros(40)
            for t in range(1, 4):
                be.adam_update(p, g, m, v, 1e-3, 0.5, 0.999, 1e-8, t)
            outs.append(p)
        np.testing.assert_allclose(outs[0], outs[1], rtol=0, atol=1e-15)

    def test_batchnorm_agrees(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(16, 5))
        gamma, beta = rng.normal(size=5), rng.normal(size=5)
        ya = kernels.python_backend.bn_forward_train(x, gamma, beta, 1e-5)
        yb = kernels.compiled_backend.bn_forward_train(x, gamma, beta, 1e-5)
        for a, b in zip(ya, yb):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
        g = rng.normal(size=(16, 5))
        dga, dba, dgb, dbb = (np.zeros(5) for _ in range(4))
        dxa = kernels.python_backend.bn_backward(g, ya[1], gamma, ya[4], dga, dba)
        dxb = kernels.compiled_backend.bn_backward(g, yb[1], gamma, yb[4], dgb, dbb)
        np.testing.assert_allclose(dxa, dxb, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(dga, dgb, rtol=1e-12, atol=1e-12)


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")
