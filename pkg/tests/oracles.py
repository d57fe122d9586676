"""Scalar reference implementations used as independent test oracles."""

import numpy as np


def _requant(acc: int, shift: int) -> int:
    if shift > 0:
        acc = (acc + (1 << (shift - 1))) >> shift
    elif shift < 0:
        acc = max(-32768, min(32767, acc)) << (-shift)
    return max(-32768, min(32767, acc))


def conv_scalar(x, w, b, stride, shift):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    oh, ow = -(-h // stride), -(-wd // stride)
    out = np.zeros((o, oh, ow), dtype=np.int64)
    for oc in range(o):
        for y in range(oh):
            for xx in range(ow):
                acc = int(b[oc])
                for ic in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            iy, ix = y * stride + ki - p, xx * stride + kj - p
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += int(w[oc, ic, ki, kj]) * int(x[ic, iy, ix])
                out[oc, y, xx] = _requant(acc, shift)
    return out


def deconv_scalar(x, w, b, stride, shift):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    oh, ow = h * stride, wd * stride
    acc = [[[int(b[oc]) for _ in range(ow)] for _ in range(oh)] for oc in range(o)]
    for oc in range(o):
        for ic in range(c):
            for y in range(h):
                for xx in range(wd):
                    v = int(x[ic, y, xx])
                    if v == 0:
                        continue
                    for ki in range(k):
                        for kj in range(k):
                            oy, ox = y * stride + ki - p, xx * stride + kj - p
                            if 0 <= oy < oh and 0 <= ox < ow:
                                acc[oc][oy][ox] += int(w[oc, ic, ki, kj]) * v
    return np.array([[[_requant(a, shift) for a in row] for row in plane] for plane in acc], dtype=np.int64)


def entropy_bits_counter(values, contexts) -> float:
    """Plug-in conditional entropy, total bits, via plain dictionaries."""
    import math
    from collections import Counter

    joint = Counter(zip(contexts, values))
    marg = Counter(contexts)
    return -sum(n * math.log2(n / marg[c]) for (c, _), n in joint.items())
