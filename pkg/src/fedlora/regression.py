"""Two-level low-rank regression objective and the reduced-rank oracle.

The per-client model is ``W = W0 + shared.left @ shared.right + local.left @
local.right`` and the loss is the per-sample squared Frobenius residual of
``X @ W - Y``. Normalizing by the sample count (the mean rather than the sum)
keeps learning rates comparable across dataset sizes; distances to ground
truth and rank diagnostics are unaffected by the convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterPair
from .linalg import as_matrix


@dataclass
class RegressionData:
    """Paired design/target matrices for one client."""

    inputs: np.ndarray   # (samples, n_in)
    targets: np.ndarray  # (samples, n_out)
    role: str = "train"

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs, "inputs")
        self.targets = as_matrix(self.targets, "targets")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"inputs and targets disagree on sample count: "
                f"{self.inputs.shape[0]} vs {self.targets.shape[0]}")

    @property
    def samples(self) -> int:
        return self.inputs.shape[0]

    def subset(self, index) -> tuple[np.ndarray, np.ndarray]:
        if index is None:
            return self.inputs, self.targets
        return self.inputs[index], self.targets[index]


def _combined_update(shared: AdapterPair, local: AdapterPair | None) -> np.ndarray:
    update = shared.product()
    if local is not None and local.rank > 0:
        update = update + local.product()
    return update


def model_matrix(w0: np.ndarray, shared: AdapterPair, local: AdapterPair | None) -> np.ndarray:
    return w0 + _combined_update(shared, local)


def _residual(w0, shared, local, data: RegressionData, batch):
    x, y = data.subset(batch)
    w = model_matrix(w0, shared, local)
    if x.shape[1] != w.shape[0] or y.shape[1] != w.shape[1]:
        raise ValueError(
            f"data of shape {x.shape}x{y.shape} incompatible with model {w.shape}")
    return x, x @ w - y


def two_level_loss(w0, shared: AdapterPair, local: AdapterPair | None,
                   data: RegressionData, batch=None) -> float:
    x, r = _residual(w0, shared, local, data, batch)
    return float(np.sum(r * r) / x.shape[0])


def two_level_grads(w0, shared: AdapterPair, local: AdapterPair | None,
                    data: RegressionData, batch=None):
    """Analytic gradients ((g_shared_left, g_shared_right), (g_local_left, g_local_right)).

    With residual R = X W - Y and c = 2/samples:
    d/d(left) = c * X'R right', d/d(right) = c * left' X'R, for each pair.
    """
    x, r = _residual(w0, shared, local, data, batch)
    c = 2.0 / x.shape[0]
    xtr = x.T @ r
    shared_grads = (c * (xtr @ shared.right.T), c * (shared.left.T @ xtr))
    if local is None:
        return shared_grads, None
    local_grads = (c * (xtr @ local.right.T), c * (local.left.T @ xtr))
    return shared_grads, local_grads


def two_level_cross_hvp(w0, shared: AdapterPair, local: AdapterPair,
                        data: RegressionData, v_left, v_right, batch=None):
    """Mixed second derivative of the loss applied to a local-adapter direction.

    Returns the derivative of the shared-factor gradient along
    (v_left, v_right): with c = 2/samples and V = v_left @ local.right +
    local.left @ v_right, the result is (c X'X V right', c left' X'X V).
    Linear in the direction, independent of the targets.
    """
    x, _ = data.subset(batch)
    if v_left.shape != local.left.shape or v_right.shape != local.right.shape:
        raise ValueError("direction shapes must match the local adapter")
    c = 2.0 / x.shape[0]
    v = v_left @ local.right + local.left @ v_right
    xtxv = x.T @ (x @ v)
    return (c * (xtxv @ shared.right.T), c * (shared.left.T @ xtxv))


class TwoLevelRegressionTask:
    """Bilevel view of the regression: x = shared factors, y = local factors.

    Parameters travel as (left, right) tuples of ndarrays so the generic
    optimizer and stepping code stay structure-agnostic.
    """

    def __init__(self, w0: np.ndarray, data: RegressionData):
        self.w0 = as_matrix(w0, "w0")
        self.data = data

    @staticmethod
    def _pair(params) -> AdapterPair:
        return AdapterPair(params[0], params[1])

    def loss(self, x, y, batch=None) -> float:
        local = self._pair(y) if y is not None else None
        return two_level_loss(self.w0, self._pair(x), local, self.data, batch)

    def grad_x(self, x, y, batch=None):
        local = self._pair(y) if y is not None else None
        shared_grads, _ = two_level_grads(self.w0, self._pair(x), local, self.data, batch)
        return shared_grads

    def grad_y(self, x, y, batch=None):
        _, local_grads = two_level_grads(self.w0, self._pair(x), self._pair(y),
                                         self.data, batch)
        return local_grads

    def cross_hvp(self, x, y, v, batch=None):
        return two_level_cross_hvp(self.w0, self._pair(x), self._pair(y),
                                   self.data, v[0], v[1], batch)


# ---------------------------------------------------------------------------
# Reduced-rank regression oracle
# ---------------------------------------------------------------------------

@dataclass
class RankConstrainedFit:
    """Closed-form optimum of least squares under a rank constraint."""

    coefficients: np.ndarray        # (n_in, n_out)
    loss: float                     # per-sample squared residual it attains
    eigenvalues: np.ndarray = field(repr=False, default=None)  # descending, of the covariance quotient


def rrr_eigenvalues(data: RegressionData) -> np.ndarray:
    """Descending eigenvalues of Cov(Y,X) Cov(X)^-1 Cov(X,Y) (identity weighting).

    The trailing sum lambda_{j+1} + ... equals the per-sample excess loss the
    rank-j optimum pays over ordinary least squares, so sqrt of the trailing
    sum is the X-metric distance between the rank-j fit and the full fit.
    """
    x, y = data.inputs, data.targets
    s = data.samples
    gram = x.T @ x
    try:
        cross = np.linalg.solve(gram, x.T @ y)    # OLS coefficients
    except np.linalg.LinAlgError as exc:
        raise ValueError("X'X is singular; cannot form the regression oracle") from exc
    quotient = (y.T @ x) @ cross / s
    values = np.linalg.eigvalsh((quotient + quotient.T) / 2.0)
    return values[::-1]


def rrr_best_fit(data: RegressionData, rank: int) -> RankConstrainedFit:
    """Best rank-constrained regression matrix and the loss it attains.

    Projects the least-squares solution onto the top eigenvectors of the
    covariance quotient matrix; the optimum is exact, which makes this the
    ground-truth oracle for "best achievable at a given rank".
    """
    x, y = data.inputs, data.targets
    max_rank = min(x.shape[1], y.shape[1])
    if not 0 <= rank <= max_rank:
        raise ValueError(f"rank must be in [0, {max_rank}], got {rank}")
    s = data.samples
    gram = x.T @ x
    try:
        w_ols = np.linalg.solve(gram, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError("X'X is singular; cannot form the regression oracle") from exc
    quotient = (y.T @ x) @ w_ols / s
    eigvals, eigvecs = np.linalg.eigh((quotient + quotient.T) / 2.0)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    top = eigvecs[:, order[:rank]]
    coefficients = w_ols @ top @ top.T
    residual = x @ coefficients - y
    return RankConstrainedFit(coefficients=coefficients,
                              loss=float(np.sum(residual * residual) / s),
                              eigenvalues=eigvals)
