"""Closed-form quadratic bilevel problems for the convergence harness.

f(x, y) = 1/2 y'Hy + y'(Px + b) + 1/2 x'Qx with H symmetric positive
definite, so the lower level is strongly convex with the exact solution
y*(x) = -H^{-1}(Px + b) and the reduced objective and its gradient are
available in closed form. Quadratics have constant second derivatives, which
turns the smoothness constants and every bound in the convergence analysis
into exactly computable quantities.
"""

from __future__ import annotations

import numpy as np

from .linalg import as_matrix


class QuadraticBilevel:
    """Quadratic bilevel instance with exact reduced objective."""

    def __init__(self, h, p, q, b):
        self.h = as_matrix(h, "h")
        self.p = as_matrix(p, "p")
        self.q = as_matrix(q, "q")
        self.b = np.asarray(b, dtype=float).ravel()
        n_y, n_x = self.p.shape
        if self.h.shape != (n_y, n_y) or self.q.shape != (n_x, n_x):
            raise ValueError("block shapes disagree with the coupling matrix")
        if self.b.shape != (n_y,):
            raise ValueError(f"offset must have length {n_y}, got {self.b.shape}")
        if not np.allclose(self.h, self.h.T) or not np.allclose(self.q, self.q.T):
            raise ValueError("h and q must be symmetric")
        h_eigs = np.linalg.eigvalsh(self.h)
        if h_eigs[0] <= 0:
            raise ValueError("h must be positive definite")
        #: strong-convexity modulus of the lower level
        self.strong_convexity = float(h_eigs[0])
        joint = np.block([[self.q, self.p.T], [self.p, self.h]])
        #: joint smoothness constant (largest absolute eigenvalue of the full Hessian)
        self.smoothness = float(np.max(np.abs(np.linalg.eigvalsh(joint))))

    @property
    def n_x(self) -> int:
        return self.p.shape[1]

    @property
    def n_y(self) -> int:
        return self.p.shape[0]

    @property
    def condition_number(self) -> float:
        return self.smoothness / self.strong_convexity

    # -- bilevel task protocol (batch arguments accepted and ignored) --------

    def loss(self, x, y, batch=None) -> float:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        return float(0.5 * y @ self.h @ y + y @ (self.p @ x + self.b)
                     + 0.5 * x @ self.q @ x)

    def grad_x(self, x, y, batch=None) -> np.ndarray:
        return self.p.T @ np.asarray(y, dtype=float) + self.q @ np.asarray(x, dtype=float)

    def grad_y(self, x, y, batch=None) -> np.ndarray:
        return self.h @ np.asarray(y, dtype=float) + self.p @ np.asarray(x, dtype=float) + self.b

    def cross_hvp(self, x, y, v, batch=None) -> np.ndarray:
        return self.p.T @ np.asarray(v, dtype=float)

    # -- closed forms --------------------------------------------------------

    def exact_lower_solution(self, x) -> np.ndarray:
        return -np.linalg.solve(self.h, self.p @ np.asarray(x, dtype=float) + self.b)

    def phi(self, x) -> float:
        return self.loss(x, self.exact_lower_solution(x))

    def phi_grad(self, x) -> np.ndarray:
        return self.grad_x(x, self.exact_lower_solution(x))


def quadratic_phi_and_grad(problem: QuadraticBilevel, x) -> tuple[float, np.ndarray]:
    """Exact reduced objective value and gradient at x."""
    y_star = problem.exact_lower_solution(x)
    return problem.loss(x, y_star), problem.grad_x(x, y_star)


def _random_symmetric(dim: int, eig_low: float, eig_high: float,
                      rng: np.random.Generator) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eigs = rng.uniform(eig_low, eig_high, size=dim)
    return (basis * eigs) @ basis.T


def random_instance(n_x: int, n_y: int, rng: np.random.Generator,
                    mu: float = 1.0, y_spread: float = 1.5,
                    coupling: float = 0.3,
                    phi_curvature: tuple[float, float] = (0.6, 1.5)) -> QuadraticBilevel:
    """Well-conditioned random instance with a convex reduced objective.

    Q is built as P'H^{-1}P plus a positive-definite part, so the reduced
    Hessian Q - P'H^{-1}P stays positive definite and the run converges to a
    stationary point with vanishing gradient.
    """
    h = _random_symmetric(n_y, mu, mu * y_spread, rng)
    p = rng.normal(size=(n_y, n_x))
    p *= coupling / max(np.linalg.norm(p, 2), 1e-12)
    s = _random_symmetric(n_x, phi_curvature[0], phi_curvature[1], rng)
    schur = p.T @ np.linalg.solve(h, p)
    q = s + (schur + schur.T) / 2.0
    b = rng.normal(size=n_y)
    return QuadraticBilevel(h=h, p=p, q=q, b=b)
