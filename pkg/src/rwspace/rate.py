"""Averaged large-deviation machinery for the mean velocity.

The averaged path marginal is a classical random walk with step law q, so
the rate function is the convex conjugate of the log moment generating
function

    log phi(theta),   phi(theta) = sum_z q(z) exp(<theta, z>),

and the dual pair (xi, theta) is linked by xi = grad log phi(theta). The
solver is a damped Newton iteration on that gradient equation; strict
convexity of log phi (a consequence of ellipticity) makes the solve
globally convergent, and damping only guards floating-point edge cases for
velocities close to the boundary of the unit L1 ball.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NonConvergenceError
from .lattice import StepSet

GRAD_TOL = 1e-10
MAX_NEWTON_ITERS = 200


def _split(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(q_plus, q_minus) per axis from canonical step order."""
    q = np.asarray(q, dtype=np.float64)
    return q[0::2], q[1::2]


def phi(q: np.ndarray, theta) -> float:
    """phi(theta) = sum_z q(z) e^{<theta,z>} over the 2d unit steps."""
    qp, qm = _split(q)
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.sum(qp * np.exp(theta) + qm * np.exp(-theta)))


def log_phi(q: np.ndarray, theta) -> float:
    return float(np.log(phi(q, theta)))


def tilted_step_law(q: np.ndarray, theta) -> np.ndarray:
    """q^theta(z) = q(z) e^{<theta,z>} / phi(theta), a valid step law whose
    mean is grad log phi(theta)."""
    q = np.asarray(q, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    expo = np.empty_like(q)
    expo[0::2] = np.exp(theta)
    expo[1::2] = np.exp(-theta)
    w = q * expo
    return w / w.sum()


def grad_log_phi(q: np.ndarray, theta) -> np.ndarray:
    """The tilted mean step: component i is q^theta(+e_i) - q^theta(-e_i)."""
    qt = tilted_step_law(q, theta)
    return qt[0::2] - qt[1::2]


def hess_log_phi(q: np.ndarray, theta) -> np.ndarray:
    """Tilted step covariance: diag(q^t(+e_i)+q^t(-e_i)) - g g^T. Symmetric
    positive definite for elliptic q."""
    qt = tilted_step_law(q, theta)
    g = qt[0::2] - qt[1::2]
    m = qt[0::2] + qt[1::2]
    return np.diag(m) - np.outer(g, g)


def velocity_lln(q: np.ndarray) -> np.ndarray:
    """The law-of-large-numbers velocity xi_o = sum_z q(z) z."""
    return grad_log_phi(q, np.zeros(len(q) // 2))


@dataclass(frozen=True)
class TiltSolution:
    """The dual pair for one velocity: xi = grad log phi(theta), together
    with log phi(theta) and the rate <theta,xi> - log phi(theta)."""

    xi: np.ndarray
    theta: np.ndarray
    log_phi: float
    rate: float
    converged: bool
    iterations: int

    def to_dict(self) -> dict:
        return {"xi": self.xi.tolist(), "theta": self.theta.tolist(),
                "log_phi": self.log_phi, "rate": self.rate,
                "converged": self.converged, "iterations": self.iterations}


def solve_theta(q: np.ndarray, xi) -> TiltSolution:
    """Solve grad log phi(theta) = xi for xi strictly inside the unit L1
    ball. Damped Newton from theta = 0; residual tolerance 1e-10 per
    component (fixed, so downstream tests are unambiguous)."""
    xi = np.asarray(xi, dtype=np.float64)
    d = len(q) // 2
    if xi.shape != (d,):
        raise DomainError(f"xi has shape {xi.shape}, expected ({d},)")
    if np.abs(xi).sum() >= 1.0:
        raise DomainError(
            f"|xi|_1 = {np.abs(xi).sum()} is not inside the open unit L1 ball")

    theta = np.zeros(d)
    resid = grad_log_phi(q, theta) - xi
    for it in range(1, MAX_NEWTON_ITERS + 1):
        if np.max(np.abs(resid)) <= GRAD_TOL:
            lp = log_phi(q, theta)
            return TiltSolution(xi=xi, theta=theta, log_phi=lp,
                                rate=float(theta @ xi - lp),
                                converged=True, iterations=it - 1)
        step = np.linalg.solve(hess_log_phi(q, theta), -resid)
        lam = 1.0
        norm0 = np.max(np.abs(resid))
        while lam > 1e-12:
            cand = theta + lam * step
            cand_resid = grad_log_phi(q, cand) - xi
            if np.max(np.abs(cand_resid)) < norm0:
                theta, resid = cand, cand_resid
                break
            lam *= 0.5
        else:
            break  # no productive step length; report non-convergence
    raise NonConvergenceError(
        f"Newton solve for xi={xi.tolist()} stalled after {MAX_NEWTON_ITERS} "
        f"iterations, residual {np.max(np.abs(resid)):.3e}")


def rate_function(q: np.ndarray, xi) -> float:
    """I_a(xi): the Legendre transform value for xi inside the unit L1 ball,
    +inf outside. On the boundary, only the 2d vertices are reachable (one
    forced step every time unit), giving -log q(z); every other boundary
    point costs +inf."""
    xi = np.asarray(xi, dtype=np.float64)
    steps = StepSet(len(q) // 2).steps
    l1 = np.abs(xi).sum()
    if l1 < 1.0:
        return solve_theta(q, xi).rate
    vertex = np.nonzero((np.abs(steps - xi) < 1e-12).all(axis=1))[0]
    if l1 <= 1.0 + 1e-12 and vertex.size == 1:
        return float(-np.log(q[vertex[0]]))
    return float("inf")
