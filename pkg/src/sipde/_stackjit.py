"""Compiled fast path for three-layer 3x3 correction stacks.

The kernel computes the same zero-padded correlation chain as the numpy layer
primitives, fused into one pass with row accumulators. Import is optional;
callers fall back to the numpy path when numba is unavailable.
"""

from numba import njit


@njit(cache=True, fastmath=True)
def stack3(xp, w1, w2, w3, m1, m2, out, scratch):
    """Apply layers (c1,3,3) <- (c2,c1,3,3) <- (c2,3,3) to padded input xp.

    xp: (h+2, w+2) with a zero rim; m1, m2: zeroed padded channel buffers of
    shapes (c1, h+2, w+2) and (c2, h+2, w+2); out: (h, w); scratch: (w,).
    """
    hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    c1 = w1.shape[0]
    c2 = w2.shape[0]
    for o in range(c1):
        for y in range(h):
            for x in range(w):
                scratch[x] = 0.0
            for a in range(3):
                row_in = xp[y + a]
                for b in range(3):
                    coef = w1[o, a, b]
                    for x in range(w):
                        scratch[x] += coef * row_in[x + b]
            for x in range(w):
                m1[o, y + 1, x + 1] = scratch[x]
    for o in range(c2):
        for y in range(h):
            for x in range(w):
                scratch[x] = 0.0
            for c in range(c1):
                for a in range(3):
                    row_in = m1[c, y + a]
                    for b in range(3):
                        coef = w2[o, c, a, b]
                        for x in range(w):
                            scratch[x] += coef * row_in[x + b]
            for x in range(w):
                m2[o, y + 1, x + 1] = scratch[x]
    for y in range(h):
        for x in range(w):
            scratch[x] = 0.0
        for c in range(c2):
            for a in range(3):
                row_in = m2[c, y + a]
                for b in range(3):
                    coef = w3[c, a, b]
                    for x in range(w):
                        scratch[x] += coef * row_in[x + b]
        for x in range(w):
            out[y, x] = scratch[x]
