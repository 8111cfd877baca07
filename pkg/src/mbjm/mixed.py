"""Per-layer mixed-model estimators.

Continuous layers use a Gaussian linear mixed model fitted by maximum
likelihood; the covariance of subject ``i`` is ``sigma2 * I + Z Omega Z'``.
Categorical layers use a logistic mixed model whose marginal likelihood is
computed by adaptive Gauss-Hermite quadrature centred at each subject's
conditional mode.

Rows must be sorted by group. ``groups`` is any integer label array that is
constant within a contiguous block; :func:`group_starts` turns it into the
start offsets used by ``np.add.reduceat``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit

from .survival import ConvergenceError, FitError

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class LayerDesign:
    """Column layout of one layer's regression.

    Fixed effects, in order: intercept, visit time, baseline covariates,
    same-visit values of the lower-layer biomarkers and ``g(T)`` (omitted for
    long-term-survivor layers). Random effects: ``[1]`` or ``[1, t]``.
    """

    biomarker: str
    kind: str = "continuous"
    covariates: tuple = ()
    previous: tuple = ()
    include_g: bool = True
    g_transform: str = "identity"
    random_effects: str = "intercept"

    @property
    def column_names(self):
        cols = ["(intercept)", "t", *self.covariates, *self.previous]
        if self.include_g:
            cols.append(f"{self.g_transform}(T)")
        return cols

    @property
    def n_fixed(self):
        return len(self.column_names)

    @property
    def n_random(self):
        return 1 if self.random_effects == "intercept" else 2

    @property
    def random_names(self):
        return ["(intercept)"] if self.n_random == 1 else ["(intercept)", "t"]

    def build(self, t, V, Yprev, gT=None):
        """Return ``(X, Z)`` for rows with times ``t``.

        ``V`` is (N, p) baseline covariates repeated per row, ``Yprev`` is
        (N, m-1), ``gT`` is the transformed event time per row.
        """
        t = np.asarray(t, dtype=float)
        N = len(t)
        cols = [np.ones(N), t, np.asarray(V, dtype=float).reshape(N, -1),
                np.asarray(Yprev, dtype=float).reshape(N, -1)]
        if self.include_g:
            if gT is None:
                raise ValueError("design includes g(T) but no event times were given")
            cols.append(np.broadcast_to(np.asarray(gT, dtype=float), (N,)))
        X = np.column_stack(cols)
        Z = np.ones((N, 1)) if self.n_random == 1 else np.column_stack([np.ones(N), t])
        return X, Z

    def to_json(self):
        return {"biomarker": self.biomarker, "kind": self.kind, "covariates": list(self.covariates),
                "previous": list(self.previous), "include_g": self.include_g,
                "g_transform": self.g_transform, "random_effects": self.random_effects}

    @classmethod
    def from_json(cls, d):
        return cls(d["biomarker"], d.get("kind", "continuous"), tuple(d.get("covariates", ())),
                   tuple(d.get("previous", ())), bool(d.get("include_g", True)),
                   d.get("g_transform", "identity"), d.get("random_effects", "intercept"))


@dataclass
class LmmFit:
    design: LayerDesign
    beta: np.ndarray
    omega: np.ndarray
    sigma2: float
    loglik: float = math.nan
    n_groups: int = 0
    n_obs: int = 0
    n_iter: int = 0
    converged: bool = True
    notes: list = field(default_factory=list)

    kind = "continuous"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))

    def variance_params(self):
        names, vals = _omega_entries(self.omega, self.design.random_names)
        return names + ["sigma2"], vals + [self.sigma2]

    def to_json(self):
        return {"kind": "continuous", "design": self.design.to_json(), "beta": self.beta.tolist(),
                "omega": self.omega.tolist(), "sigma2": self.sigma2, "loglik": self.loglik,
                "n_groups": self.n_groups, "n_obs": self.n_obs, "n_iter": self.n_iter,
                "converged": self.converged, "notes": list(self.notes)}


@dataclass
class GlmmFit:
    design: LayerDesign
    beta: np.ndarray
    omega: np.ndarray
    loglik: float = math.nan
    quadrature_nodes: int = 15
    n_groups: int = 0
    n_obs: int = 0
    n_iter: int = 0
    converged: bool = True
    notes: list = field(default_factory=list)

    kind = "categorical"

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))

    def variance_params(self):
        return _omega_entries(self.omega, self.design.random_names)

    def to_json(self):
        return {"kind": "categorical", "design": self.design.to_json(), "beta": self.beta.tolist(),
                "omega": self.omega.tolist(), "loglik": self.loglik,
                "quadrature_nodes": self.quadrature_nodes, "n_groups": self.n_groups,
                "n_obs": self.n_obs, "n_iter": self.n_iter, "converged": self.converged,
                "notes": list(self.notes)}


def layer_fit_from_json(d):
    design = LayerDesign.from_json(d["design"])
    common = dict(loglik=d.get("loglik", math.nan), n_groups=d.get("n_groups", 0),
                  n_obs=d.get("n_obs", 0), n_iter=d.get("n_iter", 0),
                  converged=d.get("converged", True), notes=list(d.get("notes", [])))
    if d["kind"] == "continuous":
        return LmmFit(design, np.array(d["beta"]), np.array(d["omega"]), float(d["sigma2"]),
                      **common)
    return GlmmFit(design, np.array(d["beta"]), np.array(d["omega"]),
                   quadrature_nodes=int(d.get("quadrature_nodes", 15)), **common)


def _omega_entries(omega, names):
    q = omega.shape[0]
    out_n, out_v = [], []
    for a in range(q):
        for b in range(a + 1):
            if a == b:
                out_n.append(f"var[{names[a]}]")
            else:
                out_n.append(f"cov[{names[b]},{names[a]}]")
            out_v.append(float(omega[a, b]))
    return out_n, out_v


# ---------------------------------------------------------------------------
# grouping helpers
# ---------------------------------------------------------------------------


def group_starts(groups):
    groups = np.asarray(groups)
    if len(groups) == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(groups[1:] != groups[:-1]) + 1
    return np.concatenate([[0], change]).astype(np.int64)


def _row_group(starts, N):
    idx = np.zeros(N, dtype=np.int64)
    idx[starts[1:]] = 1
    return np.cumsum(idx)


def _tril_to_mat(v, q):
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = v
    return L


# ---------------------------------------------------------------------------
# linear mixed model
# ---------------------------------------------------------------------------


class _LmmStats:
    """Per-group cross products; the likelihood only needs these."""

    def __init__(self, X, Z, y, starts):
        self.n = np.diff(np.append(starts, len(y))).astype(float)
        self.XtX = np.add.reduceat(X[:, :, None] * X[:, None, :], starts, axis=0)
        self.XtZ = np.add.reduceat(X[:, :, None] * Z[:, None, :], starts, axis=0)
        self.ZtZ = np.add.reduceat(Z[:, :, None] * Z[:, None, :], starts, axis=0)
        self.Xty = np.add.reduceat(X * y[:, None], starts, axis=0)
        self.Zty = np.add.reduceat(Z * y[:, None], starts, axis=0)
        self.yty = np.add.reduceat(y * y, starts)
        self.N = float(len(y))
        self.q = Z.shape[1]

    def profiled(self, L):
        """Profiled ML pieces for relative covariance factor ``L``.

        Returns ``(deviance, beta, sigma2)`` where deviance is -2 loglik.
        """
        q = self.q
        ZtZL = self.ZtZ @ L                               # G x q x q
        A = np.eye(q) + L.T @ ZtZL                        # I + L' ZtZ L
        A = 0.5 * (A + np.swapaxes(A, 1, 2))
        sign, logdetA = np.linalg.slogdet(A)
        XtZL = self.XtZ @ L                               # G x p x q
        ZtyL = self.Zty @ L                               # G x q
        Ainv = np.linalg.inv(A)
        XtZLAi = XtZL @ Ainv                              # G x p x q
        XVX = self.XtX.sum(0) - np.einsum("gpq,grq->pr", XtZLAi, XtZL)
        XVy = self.Xty.sum(0) - np.einsum("gpq,gq->p", XtZLAi, ZtyL)
        yVy = self.yty.sum() - np.einsum("gq,gqr,gr->", ZtyL, Ainv, ZtyL)
        try:
            beta = np.linalg.solve(XVX, XVy)
        except np.linalg.LinAlgError:
            raise FitError("LMM fixed-effects design is rank deficient") from None
        rss = float(yVy - beta @ XVy)
        sigma2 = max(rss / self.N, 1e-300)
        dev = self.N * (LOG_2PI + math.log(sigma2)) + float(logdetA.sum()) + self.N
        return dev, beta, sigma2


def _check_rank(X, names, what):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        # find the first column making the design rank deficient
        for j in range(1, X.shape[1] + 1):
            if np.linalg.matrix_rank(X[:, :j]) < j:
                raise FitError(f"{what} design is rank deficient at column {names[j - 1]!r}")
        raise FitError(f"{what} design is rank deficient")


def fit_lmm(X, Z, y, groups, design: LayerDesign | None = None, tol=1e-8,
            max_iter=500) -> LmmFit:
    """ML fit of a Gaussian linear mixed model.

    ``beta`` and ``sigma2`` are profiled out; the optimiser works on the
    Cholesky factor of ``Omega / sigma2`` with non-negative diagonal, so
    ``Omega = 0`` is reachable.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    q = Z.shape[1]
    design = design or LayerDesign("y", covariates=tuple(f"x{j}" for j in range(X.shape[1] - 2)),
                                   include_g=False,
                                   random_effects="intercept" if q == 1 else "intercept+slope")
    starts = group_starts(groups)
    G = len(starts)
    if G < 2:
        raise FitError("LMM needs at least two subjects")
    _check_rank(X, design.column_names, "LMM")
    stats = _LmmStats(X, Z, y, starts)
    notes = []
    tri = np.tril_indices(q)
    diag_pos = [k for k, (a, b) in enumerate(zip(*tri)) if a == b]
    if stats.n.max() < 2:
        msg = "every subject has a single row: random effects are not identifiable; boundary fit"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        dev, beta, sigma2 = stats.profiled(np.zeros((q, q)))
        return LmmFit(design, beta, np.zeros((q, q)), sigma2, -0.5 * dev, G, len(y), 0, True,
                      notes)

    def obj(v):
        return stats.profiled(_tril_to_mat(v, q))[0]

    # the deviance is even in L, so L = 0 is a stationary point a first step
    # can land on; start from the best multiple of the identity instead
    x0 = np.zeros(len(tri[0]))
    grid = np.concatenate([[0.0], np.logspace(-3, 2, 31)])
    devs = []
    for c in grid:
        x0[diag_pos] = c
        devs.append(obj(x0))
    x0[diag_pos] = grid[int(np.argmin(devs))]
    bounds = [(0.0, None) if k in diag_pos else (None, None) for k in range(len(x0))]
    trace = []
    res = optimize.minimize(obj, x0, method="L-BFGS-B", bounds=bounds,
                            callback=lambda xk: trace.append(xk.copy()),
                            options=dict(maxiter=max_iter, ftol=1e-15, gtol=tol * 10))
    if not np.all(np.isfinite(res.x)) or (not res.success and res.nit >= max_iter):
        raise ConvergenceError(f"LMM optimisation failed: {res.message}", res.x, None, trace)
    L = _tril_to_mat(res.x, q)
    dev, beta, sigma2 = stats.profiled(L)
    if sigma2 < 1e-10:
        msg = "residual variance collapsed; floored at 1e-10"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        sigma2 = 1e-10
    omega = sigma2 * (L @ L.T)
    return LmmFit(design, beta, omega, sigma2, -0.5 * dev, G, len(y), int(res.nit), True, notes)


def lmm_group_loglik(beta, omega, sigma2, X, Z, y, groups):
    """Per-group marginal Gaussian log-likelihood."""
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    y = np.asarray(y, dtype=float)
    starts = group_starts(groups)
    r = y - X @ beta
    n = np.diff(np.append(starts, len(y))).astype(float)
    rr = np.add.reduceat(r * r, starts)
    Zr = np.add.reduceat(Z * r[:, None], starts, axis=0)
    ZtZ = np.add.reduceat(Z[:, :, None] * Z[:, None, :], starts, axis=0)
    q = Z.shape[1]
    M = sigma2 * np.eye(q) + omega @ ZtZ                       # G x q x q
    K = np.linalg.solve(M, np.broadcast_to(omega, M.shape))    # M^{-1} Omega
    quad = (rr - np.einsum("gq,gqr,gr->g", Zr, K, Zr)) / sigma2
    _, logdetM = np.linalg.slogdet(M)
    logdetV = (n - q) * math.log(sigma2) + logdetM
    return -0.5 * (n * LOG_2PI + logdetV + quad)


def marginal_loglik_lmm(fit: LmmFit, X, Z, y, groups=None):
    """Marginal log-likelihood of the rows under ``fit`` (summed over groups)."""
    y = np.asarray(y, dtype=float)
    groups = np.zeros(len(y), int) if groups is None else groups
    return float(lmm_group_loglik(fit.beta, fit.omega, fit.sigma2, X, Z, y, groups).sum())


def lmm_loglik_gradient(beta, omega, sigma2, X, Z, y, groups):
    """Analytic gradient of the LMM marginal log-likelihood.

    Returns ``(d_beta, d_sigma2, d_omega)`` where ``d_omega`` is the
    derivative with respect to the lower-triangular entries of ``omega``
    (off-diagonals perturb both symmetric positions).
    """
    starts = group_starts(groups)
    ends = np.append(starts[1:], len(y))
    q = Z.shape[1]
    tri = np.tril_indices(q)
    gb = np.zeros(len(beta))
    gs = 0.0
    go = np.zeros(len(tri[0]))
    for a, b in zip(starts, ends):
        Xi, Zi, yi = X[a:b], Z[a:b], y[a:b]
        Vi = sigma2 * np.eye(b - a) + Zi @ omega @ Zi.T
        Vinv = np.linalg.inv(Vi)
        r = yi - Xi @ beta
        alpha = Vinv @ r
        gb += Xi.T @ alpha
        P = np.outer(alpha, alpha) - Vinv
        gs += 0.5 * np.trace(P)
        ZPZ = Zi.T @ P @ Zi
        for k, (u, v) in enumerate(zip(*tri)):
            go[k] += 0.5 * ZPZ[u, v] * (1.0 if u == v else 2.0)
    return gb, gs, go


# ---------------------------------------------------------------------------
# logistic mixed model with adaptive Gauss-Hermite quadrature
# ---------------------------------------------------------------------------


_GH_CACHE: dict = {}


def gh_rule(Q, q=1):
    """Tensor-product Gauss-Hermite nodes ``(K, q)`` and log-weights ``(K,)``."""
    key = (Q, q)
    if key not in _GH_CACHE:
        x, w = np.polynomial.hermite.hermgauss(Q)
        if q == 1:
            nodes = x[:, None]
            logw = np.log(w)
        else:
            grids = np.meshgrid(*([x] * q), indexing="ij")
            nodes = np.column_stack([g.ravel() for g in grids])
            wg = np.meshgrid(*([np.log(w)] * q), indexing="ij")
            logw = sum(g.ravel() for g in wg)
        _GH_CACHE[key] = (nodes, logw)
    return _GH_CACHE[key]


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def _conditional_modes(eta0, A, y, starts, z0=None, max_iter=100):
    """Newton search for each group's mode of ``log p(y | z) - |z|^2 / 2``.

    Steps are halved per group until the objective does not decrease, so
    groups far from their mode cannot oscillate.
    """
    G = len(starts)
    q = A.shape[1]
    row_g = _row_group(starts, len(y))
    z = np.zeros((G, q)) if z0 is None else z0.copy()
    eye = np.eye(q)

    def objective(z):
        eta = eta0 + np.einsum("nq,nq->n", A, z[row_g])
        return np.add.reduceat(y * eta - _log1pexp(eta), starts) - 0.5 * (z ** 2).sum(1), eta

    obj, eta = objective(z)
    for _ in range(max_iter):
        p = expit(eta)
        grad = np.add.reduceat(A * (y - p)[:, None], starts, axis=0) - z
        w = p * (1 - p)
        negH = np.add.reduceat(A[:, :, None] * A[:, None, :] * w[:, None, None], starts,
                               axis=0) + eye
        if q == 1:
            step = grad / negH[:, :, 0]
        else:
            step = np.linalg.solve(negH, grad[:, :, None])[:, :, 0]
        t = np.ones((G, 1))
        for _ in range(30):
            cand = z + t * step
            new, eta_new = objective(cand)
            worse = new < obj - 1e-12 * np.abs(obj)
            if not worse.any():
                break
            t[worse] *= 0.5
        z = cand
        obj, eta = new, eta_new
        if np.abs(t * step).max() < 1e-10:
            break
    p = expit(eta)
    negH = np.add.reduceat(A[:, :, None] * A[:, None, :] * (p * (1 - p))[:, None, None], starts,
                           axis=0) + eye
    return z, negH


def aghq_loglik(beta, L, X, Z, y, starts, Q=15, want_grad=False, z0=None):
    """Adaptive Gauss-Hermite marginal log-likelihood of a logistic GLMM.

    Random effects are written ``b = L z`` with ``z ~ N(0, I)``. Returns the
    per-group log-likelihoods, the gradient with respect to ``(beta, tril(L))``
    computed at fixed quadrature nodes (when requested) and the modes.
    """
    q = Z.shape[1]
    N = len(y)
    row_g = _row_group(starts, N)
    eta0 = X @ beta
    A = Z @ L
    mu, negH = _conditional_modes(eta0, A, y, starts, z0)
    if q == 1:
        C = (1.0 / np.sqrt(negH[:, 0, 0]))[:, None, None]
        logdetC = np.log(C[:, 0, 0])
    else:
        cov = np.linalg.inv(negH)
        C = np.linalg.cholesky(cov)
        logdetC = np.log(np.abs(np.diagonal(C, axis1=1, axis2=2))).sum(1)
    nodes, logw = gh_rule(Q, q)
    zk = mu[:, None, :] + math.sqrt(2.0) * np.einsum("gab,kb->gka", C, nodes)   # G x K x q
    eta = eta0[:, None] + np.einsum("nq,nkq->nk", A, zk[row_g])                # N x K
    ll_rows = y[:, None] * eta - _log1pexp(eta)
    h = np.add.reduceat(ll_rows, starts, axis=0) - 0.5 * (zk ** 2).sum(-1)      # G x K
    terms = h + logw[None, :] + (nodes ** 2).sum(1)[None, :]
    mx = terms.max(1, keepdims=True)
    s = np.exp(terms - mx)
    tot = s.sum(1)
    ll = mx[:, 0] + np.log(tot) + logdetC + 0.5 * q * math.log(2.0) - 0.5 * q * LOG_2PI
    if not want_grad:
        return ll, None, mu
    pi = s / tot[:, None]                                                       # G x K
    R = pi[row_g] * (y[:, None] - expit(eta))                                   # N x K
    gbeta = X.T @ R.sum(1)
    tri = np.tril_indices(q)
    gL = np.empty(len(tri[0]))
    zr = zk[row_g]
    for k, (a, b) in enumerate(zip(*tri)):
        gL[k] = float(Z[:, a] @ (R * zr[:, :, b]).sum(1))
    return ll, np.concatenate([gbeta, gL]), mu


def _pooled_logistic(X, y, max_iter=50):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = expit(X @ beta)
        g = X.T @ (y - p)
        H = (X.T * (p * (1 - p))) @ X
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(len(beta)), g)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.abs(step).max() < 1e-10 or np.abs(beta).max() > 50:
            break
    return beta


def logistic_mle(X, y):
    """Plain (no random effect) logistic regression MLE."""
    return _pooled_logistic(np.asarray(X, float), np.asarray(y, float))


def _check_separation(X, y, names):
    if np.all(y == y[0]):
        raise FitError(f"complete separation: outcome is constant ({int(y[0])}); "
                       f"offending covariate {names[0]!r}")
    for j in range(1, X.shape[1]):
        x = X[:, j]
        if np.ptp(x) == 0:
            continue
        x1, x0 = x[y == 1], x[y == 0]
        if x1.min() >= x0.max() or x0.min() >= x1.max():
            raise FitError(f"complete separation on covariate {names[j]!r}")


def fit_glmm(X, Z, y, groups, design: LayerDesign | None = None, Q=15, tol=1e-8,
             max_iter=500) -> GlmmFit:
    """ML fit of a logistic mixed model by adaptive Gauss-Hermite quadrature.

    The variance is parameterised through the Cholesky factor ``L`` of
    ``Omega`` (sign-free, so ``Omega = 0`` is an interior point of the search
    space).
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    q = Z.shape[1]
    design = design or LayerDesign("y", "categorical",
                                   covariates=tuple(f"x{j}" for j in range(X.shape[1] - 2)),
                                   include_g=False,
                                   random_effects="intercept" if q == 1 else "intercept+slope")
    if not np.all((y == 0) | (y == 1)):
        raise FitError("GLMM outcome must be binary")
    starts = group_starts(groups)
    G = len(starts)
    if G < 2:
        raise FitError("GLMM needs at least two subjects")
    names = design.column_names
    _check_rank(X, names, "GLMM")
    _check_separation(X, y, names)
    p = X.shape[1]
    # optimise on standardised columns; time and g(T) are strongly collinear
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    beta0 = _pooled_logistic(Xs, y)
    if np.abs(beta0 / scale).max() > 30:
        j = int(np.argmax(np.abs(beta0 / scale)))
        raise FitError(f"complete separation suspected on covariate {names[j]!r}")
    tri = np.tril_indices(q)
    x0 = np.concatenate([beta0, np.zeros(len(tri[0]))])
    state = {"z": None}
    trace = []

    def f(theta):
        L = _tril_to_mat(theta[p:], q)
        ll, g, mu = aghq_loglik(theta[:p], L, Xs, Z, y, starts, Q, True, state["z"])
        state["z"] = mu
        val = -float(ll.sum())
        if not np.isfinite(val):
            return 1e300, np.zeros_like(theta)
        return val, -g

    # L = 0 is a stationary point of the even likelihood; start away from it
    diag = [k for k, (a, b) in enumerate(zip(*tri)) if a == b]
    best = None
    for c in (0.1, 0.3, 1.0, 2.0, 3.0):
        x0[p + np.array(diag)] = c
        state["z"] = None
        val = f(x0)[0]
        if best is None or val < best[0]:
            best = (val, c)
    x0[p + np.array(diag)] = best[1]
    state["z"] = None
    f0 = f(x0)[0]
    gtol = tol * max(1.0, abs(f0))
    res = optimize.minimize(f, x0, jac=True, method="BFGS",
                            callback=lambda xk: trace.append(xk.copy()),
                            options=dict(gtol=gtol, maxiter=max_iter))
    theta, n_iter = res.x, int(res.nit)
    fval, g = f(theta)
    if float(np.abs(g).max()) > gtol:
        theta, fval, g, extra = _newton_polish(f, theta, fval, g, gtol)
        n_iter += extra
    gn = float(np.abs(g).max())
    if not np.isfinite(fval) or gn > 1e-4 * max(1.0, abs(fval)) or res.nit >= max_iter:
        raise ConvergenceError(f"GLMM optimisation failed: {res.message} (|grad|={gn:.3g})",
                               theta, gn, trace)
    beta = theta[:p] / scale
    if np.abs(beta).max() > 30:
        j = int(np.argmax(np.abs(beta)))
        raise FitError(f"complete separation suspected on covariate {names[j]!r}")
    L = _tril_to_mat(theta[p:], q)
    return GlmmFit(design, beta, L @ L.T, -fval, Q, G, len(y), n_iter, True)


def _newton_polish(f, theta, fval, g, gtol, max_iter=20, h=1e-5):
    """Newton steps with a finite-difference Hessian of the analytic gradient."""
    k = len(theta)
    it = 0
    for it in range(1, max_iter + 1):
        H = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = h
            H[:, j] = (f(theta + e)[1] - f(theta - e)[1]) / (2 * h)
        H = 0.5 * (H + H.T)
        w, U = np.linalg.eigh(H)
        step = -U @ ((U.T @ g) / np.maximum(np.abs(w), 1e-8))
        t = 1.0
        while t > 1e-8:
            cand = theta + t * step
            fc, gc = f(cand)
            if fc <= fval + 1e-10 * abs(fval):
                break
            t *= 0.5
        else:
            break
        theta, fval, g = cand, fc, gc
        if float(np.abs(g).max()) <= gtol:
            break
    return theta, fval, g, it


def _omega_factor(omega):
    q = omega.shape[0]
    try:
        return np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(omega)
        return U @ np.diag(np.sqrt(np.clip(w, 0, None)))


def glmm_group_loglik(beta, omega, X, Z, y, groups, Q=15):
    starts = group_starts(groups)
    L = _omega_factor(np.atleast_2d(omega))
    ll, _, _ = aghq_loglik(np.asarray(beta, float), L, np.atleast_2d(X), np.atleast_2d(Z),
                           np.asarray(y, float), starts, Q)
    return ll


def marginal_loglik_glmm(fit: GlmmFit, X, Z, y, groups=None, Q=None):
    """Marginal log-likelihood of the rows under ``fit`` (summed over groups)."""
    y = np.asarray(y, dtype=float)
    groups = np.zeros(len(y), int) if groups is None else groups
    return float(glmm_group_loglik(fit.beta, fit.omega, X, Z, y, groups,
                                   Q or fit.quadrature_nodes).sum())
