"""Max-margin learners over 0/1 feature matrices.

All SVM variants share one SMO solver (second-order working-set selection)
on a precomputed Gram matrix.  The bias is unregularized; after the dual
converges it is refined by an exact 1-D minimization of the primal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import EmptySelection, FeatureVector, PredicateBank, feature_text

CLASSIFICATION = "classification"
REGRESSION = "regression"
DEFAULT_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
SV_TOL = 1e-6
_TAU = 1e-12


class SingleClass(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class DidNotConverge(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    C: float = 1.0
    tolerance: float = 1e-4
    max_epochs: int = 200
    mode: str = CLASSIFICATION
    epsilon: float = 0.05

    def __post_init__(self):
        if self.C <= 0 or self.tolerance <= 0:
            raise ValueError("C and tolerance must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.mode not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    duals: np.ndarray
    C: float
    bank: PredicateBank | None = None
    mode: str = CLASSIFICATION
    converged: bool = True
    # negated dual objective recorded once per epoch; non-increasing
    history: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def decision(self, X) -> np.ndarray:
        X = _matrix(X)
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X @ self.weights + self.bias

    def decision_events(self, events_or_cols) -> np.ndarray:
        """Decision values straight from events; needs ``bank``."""
        if self.bank is None:
            raise ValueError("model has no bank")
        return self.bank.decision(events_or_cols, self.weights, self.bias)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision(X) >= 0, 1, -1)

    def predict_rating(self, X) -> np.ndarray:
        return np.clip(self.decision(X), -1.0, 1.0)


@dataclass
class KernelModel:
    duals: np.ndarray  # alpha_i * y_i for retained vectors
    bias: float
    degree: int
    vectors: np.ndarray
    gamma: float = 1.0
    C: float = 1.0
    converged: bool = True
    history: list = field(default_factory=list)
    support: np.ndarray | None = None

    def kernel(self, X) -> np.ndarray:
        return poly_kernel(_matrix(X), self.vectors, self.degree, self.gamma)

    def decision(self, X) -> np.ndarray:
        X = _matrix(X)
        if X.shape[1] != self.vectors.shape[1]:
            raise DimensionMismatch(f"expected {self.vectors.shape[1]} features, got {X.shape[1]}")
        return self.kernel(X) @ self.duals + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision(X) >= 0, 1, -1)


def _matrix(X) -> np.ndarray:
    if isinstance(X, FeatureVector):
        X = [X.bits]
    elif len(X) and isinstance(X[0], FeatureVector):
        X = [v.bits for v in X]
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise SingleClass("training data must contain both classes")
    return y


def poly_kernel(A: np.ndarray, B: np.ndarray, degree: int, gamma: float = 1.0) -> np.ndarray:
    return (gamma * (A @ B.T) + 1.0) ** degree


def _smo(K: np.ndarray, p: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int, alpha=None):
    """min 1/2 a'Qa + p'a  s.t. y'a = 0, 0 <= a <= C, with Q_ij = y_i y_j K_ij.

    Working pairs are chosen by maximal violation for i and second-order
    gain for j.  Returns (alpha, gradient, rho, history, converged).
    """
    n = len(p)
    a = np.zeros(n) if alpha is None else np.clip(np.asarray(alpha, dtype=np.float64), 0.0, C)
    G = p.astype(np.float64) + (y * (K @ (a * y)) if alpha is not None else 0.0)
    g = -y * G  # scaled gradient; KKT holds when max over "up" <= min over "low"
    KD = np.diag(K).copy()
    pos = y > 0
    up = np.where(pos, a < C, a > 0)
    low = np.where(pos, a > 0, a < C)
    history = [0.5 * float(a @ (G + p))]
    epoch = max(n, 1)
    converged = False
    it = 0
    ninf, inf = -np.inf, np.inf
    while it < max_iter:
        cu = np.where(up, g, ninf)
        i = int(cu.argmax())
        gmax = cu[i]
        if gmax - np.where(low, g, inf).min() < tol:
            converged = True
            break
        Ki = K[i]
        quad = np.maximum(KD[i] + KD - 2.0 * Ki, _TAU)
        bb = np.where(low, np.maximum(gmax - g, 0.0), 0.0)
        j = int((bb * bb / quad).argmax())
        yi, yj = y[i], y[j]
        ai, aj = a[i], a[j]
        Gi, Gj = -yi * g[i], -yj * g[j]
        q = quad[j]
        if yi != yj:
            delta = (-Gi - Gj) / q
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            delta = (Gi - Gj) / q
            s = ai + aj
            ni, nj = ai - delta, aj + delta
            if s > C:
                if ni > C:
                    ni, nj = C, s - C
            elif nj < 0:
                nj, ni = 0.0, s
            if s > C:
                if nj > C:
                    nj, ni = C, s - C
            elif ni < 0:
                ni, nj = 0.0, s
        # dG = y * (y_i K_i da_i + y_j K_j da_j), so dg = -(...)
        g -= (yi * (ni - ai)) * Ki + (yj * (nj - aj)) * K[j]
        a[i], a[j] = ni, nj
        for k, v in ((i, ni), (j, nj)):
            if pos[k]:
                up[k], low[k] = v < C, v > 0
            else:
                up[k], low[k] = v > 0, v < C
        it += 1
        if it % epoch == 0:
            G = -y * g
            history.append(0.5 * float(a @ (G + p)))
    G = -y * g
    history.append(0.5 * float(a @ (G + p)))
    rho = _rho(a, G, y, C)
    return a, G, rho, history, converged


def _rho(a, G, y, C) -> float:
    yG = y * G
    at_up = a >= C
    at_low = a <= 0
    free = ~(at_up | at_low)
    if free.any():
        return float(yG[free].mean())
    ub_mask = (at_up & (y < 0)) | (at_low & (y > 0))
    lb_mask = (at_up & (y > 0)) | (at_low & (y < 0))
    ub = yG[ub_mask].min() if ub_mask.any() else np.inf
    lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
    if not np.isfinite(ub):
        return float(lb)
    if not np.isfinite(lb):
        return float(ub)
    return float((ub + lb) / 2)


def _best_bias(f: np.ndarray, target: np.ndarray, b0: float, eps: float | None = None) -> float:
    """Exact minimizer over b of the hinge (or eps-insensitive) loss of f + b.

    The loss is convex and piecewise linear, so its minimum sits on a
    breakpoint.  Among equally good breakpoints the one nearest ``b0`` wins.
    """
    if eps is None:
        bps = target - f  # hinge kinks: 1 - y (f + b) = 0  <=>  b = y - f
        cand = np.unique(np.append(bps, b0))
        margins = target[None, :] * (f[None, :] + cand[:, None])
        loss = np.maximum(0.0, 1.0 - margins).sum(axis=1)
    else:
        r = target - f
        cand = np.unique(np.concatenate([r - eps, r + eps, [b0]]))
        loss = np.maximum(0.0, np.abs(f[None, :] + cand[:, None] - target[None, :]) - eps).sum(axis=1)
    best = loss.min()
    ok = np.flatnonzero(loss <= best + 1e-12 * max(1.0, abs(best)))
    k = ok[np.argmin(np.abs(cand[ok] - b0))]
    return float(cand[k])


def primal_objective(w, b, X, y, C) -> float:
    X = _matrix(X)
    m = np.asarray(y, dtype=float) * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - m).sum())


def primal_gradient(w, b, X, y, C) -> tuple[np.ndarray, float]:
    """Gradient of the hinge primal; exact away from the kinks."""
    X = _matrix(X)
    y = np.asarray(y, dtype=float)
    act = (y * (X @ w + b)) < 1.0
    gw = w - C * (y[act] @ X[act])
    gb = -C * float(y[act].sum())
    return gw, gb


def regression_objective(w, b, X, r, C, eps) -> float:
    X = _matrix(X)
    res = np.abs(X @ w + b - np.asarray(r, dtype=float))
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, res - eps).sum())


def _max_iter(cfg: TrainConfig, n: int) -> int:
    return max(1, cfg.max_epochs) * max(n, 1)


def _warn(converged: bool):
    if not converged:
        warnings.warn("SMO hit the iteration limit; returning best-so-far", DidNotConverge, stacklevel=3)


def train_linear_svm(
    X, y, cfg: TrainConfig | None = None, bank: PredicateBank | None = None, alpha=None
) -> LinearModel:
    """Soft-margin linear SVM: min 1/2|w|^2 + C sum hinge(y (w.x + b)).

    ``alpha`` optionally warm-starts the dual; it must satisfy y'alpha = 0.
    """
    cfg = cfg or TrainConfig()
    X = _matrix(X)
    y = _labels(y)
    if X.shape[0] != len(y):
        raise DimensionMismatch("X and y differ in length")
    if bank is not None and len(bank) != X.shape[1]:
        raise DimensionMismatch("bank and X disagree on the number of features")
    K = X @ X.T
    a, _, rho, hist, ok = _smo(K, -np.ones(len(y)), y, cfg.C, cfg.tolerance, _max_iter(cfg, len(y)), alpha)
    _warn(ok)
    w = X.T @ (a * y)
    b = _best_bias(X @ w, y, -rho)
    return LinearModel(w, b, a, cfg.C, bank, CLASSIFICATION, ok, hist)


def train_regression(X, ratings, cfg: TrainConfig | None = None, bank: PredicateBank | None = None) -> LinearModel:
    """Epsilon-insensitive linear regression via the same dual solver.

    ``duals`` holds ``alpha+ - alpha-`` per example.
    """
    cfg = cfg or TrainConfig(mode=REGRESSION)
    X = _matrix(X)
    r = np.asarray(ratings, dtype=np.float64).reshape(-1)
    n = len(r)
    if X.shape[0] != n:
        raise DimensionMismatch("X and ratings differ in length")
    if n == 0:
        raise ValueError("no training data")
    K = X @ X.T
    K2 = np.block([[K, K], [K, K]])
    y = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([cfg.epsilon - r, cfg.epsilon + r])
    a, _, rho, hist, ok = _smo(K2, p, y, cfg.C, cfg.tolerance, _max_iter(cfg, 2 * n))
    _warn(ok)
    beta = a[:n] - a[n:]
    w = X.T @ beta
    b = _best_bias(X @ w, r, -rho, eps=cfg.epsilon)
    return LinearModel(w, b, beta, cfg.C, bank, REGRESSION, ok, hist)


def train_kernel_svm(
    X, y, degree: int = 6, cfg: TrainConfig | None = None, gamma: float = 1.0, alpha=None
) -> KernelModel:
    """Dual soft-margin SVM with kernel (gamma x.x' + 1)^degree."""
    if degree < 1:
        raise ValueError("degree must be positive")
    cfg = cfg or TrainConfig()
    X = _matrix(X)
    y = _labels(y)
    K = poly_kernel(X, X, degree, gamma)
    a, _, rho, hist, ok = _smo(K, -np.ones(len(y)), y, cfg.C, cfg.tolerance, _max_iter(cfg, len(y)), alpha)
    _warn(ok)
    sv = np.flatnonzero(a > SV_TOL)
    coef = a[sv] * y[sv]
    f = K[:, sv] @ coef
    b = _best_bias(f, y, -rho)
    return KernelModel(coef, b, degree, X[sv].copy(), gamma, cfg.C, ok, hist, sv)


def decision_value(m, x) -> float | np.ndarray:
    """w.x + b; a single vector gives a float."""
    single = isinstance(x, FeatureVector) or np.ndim(x) == 1
    d = m.decision(x)
    return float(d[0]) if single else d


def classify_value(v) -> int:
    return 1 if v >= 0 else -1


def support_vectors(m, tol: float = SV_TOL) -> list[int]:
    if isinstance(m, KernelModel) and m.support is not None:
        return sorted(int(i) for i in m.support)
    return [int(i) for i in np.flatnonzero(np.abs(m.duals) > tol)]


def lasso_select(X, y, lam: float = 0.01, max_iter: int = 5000) -> list[int]:
    """Indices with nonzero coefficients in an L1-penalized least-squares fit."""
    from sklearn.linear_model import Lasso

    X = _matrix(X)
    y = _labels(y)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = Lasso(alpha=lam, max_iter=max_iter, tol=1e-4).fit(X, y)
    idx = np.flatnonzero(np.abs(model.coef_) > 1e-10)
    if len(idx) == 0:
        raise EmptySelection(f"lambda {lam} zeroes every coefficient")
    return [int(i) for i in idx]


def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Test-index arrays; each class is shuffled then dealt round-robin."""
    y = np.asarray(y)
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in (1, -1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        for t, i in enumerate(idx):
            folds[(t + offset) % k].append(int(i))
        offset += len(idx)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def tune_C(
    X,
    y,
    folds: int = 3,
    grid: Sequence[float] = DEFAULT_C_GRID,
    seed: int = 0,
    trainer: Callable | None = None,
    fallback: float = 1.0,
    tolerance: float = 1e-3,
    max_epochs: int = 50,
    **kw,
) -> float:
    """Grid value with the best mean k-fold accuracy; ties go to the smallest C.

    When a class has fewer than 2 examples no split is possible and
    ``fallback`` (or the grid's only value) is returned.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    grid = sorted(grid)
    if len(grid) == 1:
        return grid[0]
    X = _matrix(X)
    y = np.asarray(y)
    k = min(folds, int((y == 1).sum()), int((y == -1).sum()))
    if k < 2:
        return fallback
    trainer = trainer or train_linear_svm
    parts = stratified_folds(y, k, np.random.default_rng(seed))
    acc = np.zeros((len(grid), k))
    for f, test in enumerate(parts):
        train = np.setdiff1d(np.arange(len(y)), test)
        alpha, prev = None, None
        for g, C in enumerate(grid):
            # the previous dual scaled by C/prev stays feasible and is a good start
            start = None if alpha is None else alpha * (C / prev)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DidNotConverge)
                m = trainer(X[train], y[train], TrainConfig(C=C, tolerance=tolerance, max_epochs=max_epochs),
                            alpha=start, **kw)
            alpha, prev = _full_duals(m, len(train)), C
            acc[g, f] = float((m.predict(X[test]) == y[test]).mean())
    scores = acc.mean(axis=1)
    best = max(scores)
    return next(C for C, s in zip(grid, scores) if s >= best - 1e-12)


def _full_duals(m, n: int) -> np.ndarray:
    if isinstance(m, KernelModel):
        a = np.zeros(n)
        a[m.support] = np.abs(m.duals)
        return a
    return np.asarray(m.duals, dtype=np.float64)


def dump_model(m: LinearModel, bank: PredicateBank | None = None) -> str:
    """One ``weight<TAB>feature`` line per feature, then ``bias<TAB>b``."""
    bank = bank or m.bank
    if bank is None or len(bank) != m.n_features:
        raise DimensionMismatch("a bank aligned with the weights is required")
    lines = [f"{w:.10g}\t{feature_text(f)}" for w, f in zip(m.weights, bank.features)]
    lines.append(f"bias\t{m.bias:.10g}")
    return "\n".join(lines) + "\n"


def load_model(text: str) -> tuple[np.ndarray, float, list[str]]:
    weights, names, bias = [], [], 0.0
    for line in text.splitlines():
        if not line:
            continue
        head, _, rest = line.partition("\t")
        if head == "bias":
            bias = float(rest)
        else:
            weights.append(float(head))
            names.append(rest)
    return np.array(weights), bias, names
