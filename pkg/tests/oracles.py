"""Slow, obviously-correct reference implementations used as test oracles."""
import numpy as np


def conv2d_naive(x, w, b=None, stride=(1, 1), pad=(0, 0)):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    y = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for q in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                r, s = i * sh - ph + u, j * sw - pw + v
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[b_, q, r, s]) * float(w[o, q, u, v])
                    y[b_, o, i, j] = acc + (0.0 if b is None else float(b[o]))
    return y


def deconv2d_naive(x, w, b=None, stride=1, pad=0, output_padding=0):
    """Scatter form: each input pixel stamps its kernel onto the output grid."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k + output_padding
    wo = (wd - 1) * stride - 2 * pad + k + output_padding
    y = np.zeros((n, co, ho, wo))
    for b_ in range(n):
        for q in range(ci):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for u in range(k):
                            for v in range(k):
                                r, s = i * stride - pad + u, j * stride - pad + v
                                if 0 <= r < ho and 0 <= s < wo:
                                    y[b_, o, r, s] += float(x[b_, q, i, j]) * float(w[q, o, u, v])
    if b is not None:
        y += np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1)
    return y


def maxpool2_naive(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    idx = np.zeros((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for q in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, arg = None, 0
                    for k, (u, v) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                        val = x[b, q, 2 * i + u, 2 * j + v]
                        if best is None or val > best:
                            best, arg = val, k
                    y[b, q, i, j] = best
                    idx[b, q, i, j] = arg
    return y, idx


def bilinear_naive(x, factor):
    """Half-pixel-centre bilinear interpolation evaluated pixel by pixel."""
    n, c, h, w = x.shape
    ho, wo = h * factor, w * factor
    y = np.zeros((n, c, ho, wo))

    def src(i, n_in):
        s = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(s)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for i in range(ho):
        r0, r1, a = src(i, h)
        for j in range(wo):
            c0, c1, b = src(j, w)
            y[:, :, i, j] = ((1 - a) * (1 - b) * x[:, :, r0, c0] + (1 - a) * b * x[:, :, r0, c1]
                             + a * (1 - b) * x[:, :, r1, c0] + a * b * x[:, :, r1, c1])
    return y


def batchnorm_naive(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / scale)


def f1_scalar(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return 2 * p * r / (p + r) if p + r else 0.0


def _counts(pairs, t):
    tp = fp = fn = 0
    for pair in pairs:
        for p, g in zip(pair.prob.ravel().tolist(), pair.gt.ravel().tolist()):
            hit = p >= t
            tp += hit and g == 1
            fp += hit and g == 0
            fn += (not hit) and g == 1
    return tp, fp, fn


def ods_ois_brute_force(pairs, thresholds):
    """Pixel-by-pixel recount for every threshold, no vectorization.

    Returns (ods, ods_threshold, ois); ODS ties go to the lower threshold.
    """
    fs = [f1_scalar(*_counts(pairs, t)) for t in thresholds]
    k = max(range(len(fs)), key=lambda i: (fs[i], -i))
    best = [max(f1_scalar(*_counts([pair], t)) for t in thresholds) for pair in pairs]
    return fs[k], float(thresholds[k]), sum(best) / len(best)


def noisy_pairs(rng, n, size, prevalence, noise):
    """Ground truth at ``prevalence`` and probabilities 0.65*gt + 0.15 + noise, clipped."""
    from carnet.evaluation import PredictionPair

    pairs = []
    for i in range(n):
        gt = (rng.random(size) < prevalence).astype(np.uint8)
        prob = np.clip(0.65 * gt + 0.15 + noise * rng.standard_normal(size), 0, 1)
        pairs.append(PredictionPair(prob, gt, f"img{i}"))
    return pairs


def random_eval_datasets(seed, count):
    """Small datasets whose images share size, prevalence and noise level."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 6))
        size = (int(rng.integers(16, 33)), int(rng.integers(16, 33)))
        yield noisy_pairs(rng, n, size, rng.uniform(0.05, 0.2), rng.uniform(0.1, 0.5))


def ois_below_ods_count(datasets):
    from carnet.evaluation import ods, ois

    return sum(ois(p) < ods(p)[0] for p in datasets)
