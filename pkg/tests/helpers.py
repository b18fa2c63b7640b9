import numpy as np


def fd_grad(f, params, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of every array."""
    out = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[i][idx] += h
            dn[i][idx] -= h
            g[idx] = (f(up) - f(dn)) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    """Max absolute deviation relative to the largest reference entry."""
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


# acceptance verdicts, printed in the terminal summary by conftest
ACCEPTANCE: list = []


def verdict(number: int, name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append((number, name, bool(ok), detail))
    return bool(ok)
