"""Reference implementations kept independent of the code under test."""
import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def naive_conv_same(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Direct 7-loop same-padded convolution."""
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ph, pw = kh // 2, kw // 2
    y = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                acc = b[co]
                for u in range(kh):
                    for v in range(kw):
                        ii, jj = i + u - ph, j + v - pw
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                acc += x[ii, jj, ci] * k[u, v, ci, co]
                y[i, j, co] = acc
    return y


def pair_count_auc(labels, scores, positive=0) -> float:
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    p, n = s[y == positive], s[y != positive]
    wins = ties = 0
    for a in p:
        for c in n:
            wins += a > c
            ties += a == c
    return (wins + 0.5 * ties) / (len(p) * len(n))


def bilinear_point(img2d: np.ndarray, r: float, c: float) -> float:
    """Evaluate the bilinear interpolant of a 2-D grid at (r, c)."""
    h, w = img2d.shape
    r0, c0 = int(np.floor(r)), int(np.floor(c))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    top = img2d[r0, c0] * (1 - fc) + img2d[r0, c1] * fc
    bot = img2d[r1, c0] * (1 - fc) + img2d[r1, c1] * fc
    return top * (1 - fr) + bot * fr
