"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx``. The integer kernels
(hashing and the xoshiro streams) match it bit for bit and are vectorized
across rows so the fallback stays usable on large datasets; the float kernels
agree to rounding.
"""
import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)
_BYTE = np.uint64(0xFF)


def fnv1a_rows(q, salt):
    """64-bit FNV-1a of ``salt`` followed by each row of ``q``.

    Bytes are consumed little-endian, 8 per value, salt first.
    """
    q = np.ascontiguousarray(q, dtype=np.int64)
    if q.ndim != 2:
        raise ValueError("expected a 2-D int64 array, got shape %r" % (q.shape,))
    n, d = q.shape
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    words = [np.full(n, np.uint64(salt), dtype=np.uint64)]
    words += [q[:, j].view(np.uint64) for j in range(d)]
    with np.errstate(over="ignore"):
        for w in words:
            for b in range(8):
                h ^= (w >> np.uint64(8 * b)) & _BYTE
                h *= FNV_PRIME
    return h


def _splitmix64(x):
    # x: uint64 array, returns (new_x, output)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        z = x.copy()
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return x, z


def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def xoshiro_step(state):
    """One xoshiro256** step on a 4-tuple of uint64 arrays. Returns ``(output, new_state)``."""
    s0, s1, s2, s3 = state
    with np.errstate(over="ignore"):
        r = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
    return r, (s0, s1, s2, s3)


def uniform_rows(seeds, d):
    """``len(seeds) x d`` uniforms in [0, 1); row i comes from xoshiro256** seeded by ``seeds[i]``.

    The generator state is filled by four successive splitmix64 outputs of the
    seed, and each double uses the top 53 bits of a draw.
    """
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64).ravel()
    n = seeds.shape[0]
    x = seeds.copy()
    state = []
    for _ in range(4):
        x, z = _splitmix64(x)
        state.append(z)
    out = np.empty((n, d), dtype=np.float64)
    scale = 1.0 / 9007199254740992.0
    for j in range(d):
        r, state = xoshiro_step(state)
        out[:, j] = (r >> np.uint64(11)).astype(np.float64) * scale
    return out


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam step on flat arrays; ``t`` is the new step count."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def bn_forward_train(x, gamma, beta, eps):
    """Batch-statistics normalization. Returns ``(y, xhat, mean, var, inv_std)``."""
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    return y, xhat, mean, var, inv_std


def bn_backward(g, xhat, gamma, inv_std, dgamma, dbeta):
    """Backward through training-mode batch norm; writes parameter grads in place, returns dx."""
    n = g.shape[0]
    dbeta[...] = g.sum(axis=0)
    dgamma[...] = (g * xhat).sum(axis=0)
    return (gamma * inv_std / n) * (n * g - dbeta - xhat * dgamma)
