"""Pure-Python (numpy) fallback for the compiled kernels.

Same signatures and semantics as _ckernels; used when the extension is not
built or when ROUTEKIT_KERNELS=python is set.
"""

import numpy as np

BACKEND = "python"


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max()
    out = np.exp(shifted)
    out /= out.sum()
    return out


def mlp_forward(w1, b1, w2, b2, idx, val):
    h = b1 + val @ w1[idx]
    np.maximum(h, 0.0, out=h)
    y = softmax(h @ w2 + b2)
    return h, y


def mlp_backward(w2, h, y, idx, val, target, weight, scale,
                 gw1, gb1, gw2, gb2):
    dz2 = weight * (y - target)
    gb2 += scale * dz2
    gw2 += scale * np.outer(h, dz2)
    dz1 = (w2 @ dz2) * (h > 0.0)
    gb1 += scale * dz1
    # idx entries are unique by the SparseVector contract, so fancy-index
    # accumulation is safe.
    gw1[idx] += (scale * val)[:, None] * dz1[None, :]


def head_forward(w, b, x):
    return softmax(x @ w + b)


def head_backward(x, y, target, weight, scale, gw, gb):
    dz = weight * (y - target)
    gb += scale * dz
    gw += scale * np.outer(x, dz)


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    p *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def argmax_cosine(mat, norms, q):
    qnorm = float(np.sqrt(q @ q))
    if qnorm == 0.0:
        return -1, 0.0
    dots = mat @ q
    sims = np.where(norms == 0.0, 0.0, dots / (np.where(norms == 0.0, 1.0, norms) * qnorm))
    best_i = int(np.argmax(sims))
    return best_i, float(sims[best_i])
