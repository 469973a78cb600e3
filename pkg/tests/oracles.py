"""Independent oracles shared by the regular and acceptance suites.

These deliberately avoid the code paths they check: the grid supremum is
derivative-free (no Newton, no analytic gradients) and the double-path sum
never touches the renewal recursion.
"""

import itertools

import numpy as np

from rwspace.lattice import StepSet
from rwspace.rate import log_phi


def grid_sup_rate(q, xi, lo=-6.0, hi=6.0, final_step=1e-3):
    """Refining grid search for sup_theta <theta, xi> - log phi(theta).

    Strict concavity keeps the maximizer within one coarse cell of the grid
    argmax, so shrinking the window around it cannot lose the optimum; the
    final grid step is <= final_step.
    """
    q = np.asarray(q, dtype=np.float64)
    d = len(xi)
    qp, qm = q[0::2], q[1::2]
    center = np.zeros(d)
    half = (hi - lo) / 2
    best = -np.inf
    while True:
        axes = [np.linspace(c - half, c + half, 17) for c in center]
        grids = np.meshgrid(*axes, indexing="ij")
        theta = np.stack([g.ravel() for g in grids], axis=1)
        lphi = np.log(sum(qp[k] * np.exp(theta[:, k]) + qm[k] * np.exp(-theta[:, k])
                          for k in range(d)))
        vals = theta @ np.asarray(xi) - lphi
        i = int(np.argmax(vals))
        best = max(best, float(vals[i]))
        center = theta[i]
        step = axes[0][1] - axes[0][0]
        if step <= final_step:
            return best
        half = 2.5 * step


def brute_force_G(dist, theta, N):
    """Double-path enumeration of the second moment G_N: per-level cell
    moments (second moment on collisions, product of means otherwise),
    tilted and normalized. O((2d)^{2N}); practical for N <= 4 in d = 3."""
    d = dist.d
    steps = StepSet(d).steps
    two_d = 2 * d
    q = dist.mean_kernel()
    m2 = dist.second_moment()
    theta = np.asarray(theta, dtype=np.float64)
    lp = log_phi(q, theta)
    seqs = np.array(list(itertools.product(range(two_d), repeat=N)),
                    dtype=np.int64)
    pos = np.concatenate([np.zeros((len(seqs), 1, d), dtype=np.int64),
                          np.cumsum(steps[seqs], axis=1)], axis=1)
    tilt = np.exp(pos[:, N].astype(np.float64) @ theta - N * lp)
    W = np.ones((len(seqs), len(seqs)))
    for i in range(N):
        collide = (pos[:, None, i, :] == pos[None, :, i, :]).all(axis=2)
        zz_m2 = m2[seqs[:, i][:, None], seqs[None, :, i]]
        zz_qq = q[seqs[:, i]][:, None] * q[seqs[:, i]][None, :]
        W *= np.where(collide, zz_m2, zz_qq)
    return float(tilt @ W @ tilt)
