"""Gaussian-process surrogate of a flow map.

One independent zero-mean GP per output dimension with a Matern kernel
(smoothness 3/2 or 5/2), ARD lengthscales, and a relative noise term.  The
signal variance is profiled out of the likelihood in closed form, so the
optimizer only sees log-lengthscales and the log relative-noise deviation.
Periodic input dimensions measure kernel distance with the wrapped
difference; targets on periodic dimensions are trained on the unwrapped
representative closest to the input's coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, get_lapack_funcs
from scipy.optimize import minimize
from scipy.stats import norm

from .dynamics import TrajectoryDataset
from .grid import StateBox

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)


class FitError(RuntimeError):
    """Hyperparameter fit could not produce a usable model."""


def _chol_inverse(L: np.ndarray) -> np.ndarray:
    """Full inverse of C from its lower Cholesky factor (LAPACK potri)."""
    potri = get_lapack_funcs(("potri",), (L,))[0]
    inv, info = potri(L, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"potri failed with info={info}")
    # potri fills one triangle only; mirror it and drop factor leftovers
    out = np.tril(inv)
    out += np.tril(inv, -1).T
    return out


@dataclass
class KernelSpec:
    """Matern kernel family: smoothness, ARD lengthscales, input periods.

    ``periods[d]`` is the wrap length of input dimension ``d`` (0 for
    non-periodic).  ``lengthscales`` are per input dimension; ``None`` until
    fitted.
    """

    nu: float = 2.5
    lengthscales: np.ndarray | None = None
    periods: np.ndarray | None = None

    def __post_init__(self):
        if self.nu not in (1.5, 2.5):
            raise ValueError("nu must be 1.5 or 2.5")
        if self.lengthscales is not None:
            ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
            if np.any(ls <= 0):
                raise ValueError("lengthscales must be positive")
            self.lengthscales = ls
        if self.periods is not None:
            self.periods = np.atleast_1d(np.asarray(self.periods, dtype=float))


@dataclass
class FitOptions:
    """Multi-start optimizer settings for the marginal-likelihood fit."""

    restarts: int = 8
    max_iter: int = 200
    grad_tol: float = 1e-6
    noise_floor_rel2: float = 1e-8
    max_jitter: float = 1e-4
    init_lengthscales: list | None = None  # per output dim, warm start
    init_noise_rel: list | None = None


def _wrapped_deltas(A: np.ndarray, B: np.ndarray, periods: np.ndarray | None) -> np.ndarray:
    """Per-dimension distances |A_i - B_j|, shape (na, nb, M).

    Periodic dimensions use the chordal distance ``(P/pi) sin(pi d/P)`` of
    the wrapped difference ``d``: it agrees with the wrapped difference to
    second order but, unlike the raw wrapped difference, keeps Matern Gram
    matrices positive semidefinite (the radial function is evaluated on a
    Euclidean circle embedding).
    """
    d = np.abs(A[:, None, :] - B[None, :, :])
    if periods is not None:
        for k in np.nonzero(periods > 0)[0]:
            P = periods[k]
            dk = np.mod(d[:, :, k], P)
            dk = np.minimum(dk, P - dk)
            d[:, :, k] = (P / np.pi) * np.sin(np.pi * dk / P)
    return d


def _scaled_r2(A: np.ndarray, B: np.ndarray, lengthscales: np.ndarray,
               periods: np.ndarray | None) -> np.ndarray:
    """Sum over dims of (distance / lengthscale)^2, shape (na, nb).

    Accumulates one (na, nb) buffer per dimension instead of materializing
    the (na, nb, M) tensor; this is the prediction hot path.
    """
    r2 = np.zeros((len(A), len(B)))
    for k in range(A.shape[1]):
        d = np.subtract.outer(A[:, k], B[:, k])
        np.abs(d, out=d)
        if periods is not None and periods[k] > 0:
            P = periods[k]
            np.mod(d, P, out=d)
            np.minimum(d, P - d, out=d)
            np.sin(np.pi / P * d, out=d)
            d *= P / np.pi
        d /= lengthscales[k]
        r2 += d * d
    return r2


def _matern_value(r: np.ndarray, nu: float) -> np.ndarray:
    if nu == 1.5:
        return (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
    return (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _matern_dr2(r: np.ndarray, nu: float) -> np.ndarray:
    """d k / d(r^2); smooth at r = 0."""
    if nu == 1.5:
        return -1.5 * np.exp(-SQRT3 * r)
    return -(5.0 / 6.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """Correlation matrix k(A_i, B_j); unit diagonal by construction."""
    if spec.lengthscales is None:
        raise ValueError("kernel has no lengthscales")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    r2 = _scaled_r2(A, B, spec.lengthscales, spec.periods)
    return _matern_value(np.sqrt(r2), spec.nu)


def _ll_from_d2(
    d2: list[np.ndarray],
    y: np.ndarray,
    nu: float,
    log_lengthscales: np.ndarray,
    log_noise_rel: float,
) -> tuple[float, np.ndarray]:
    """Profiled log likelihood and gradient from per-dim squared deltas."""
    N = len(y)
    ls = np.exp(np.asarray(log_lengthscales, dtype=float))
    eta2 = np.exp(2.0 * log_noise_rel)
    r2 = np.zeros((N, N))
    for k in range(len(ls)):
        r2 += d2[k] / ls[k] ** 2
    r = np.sqrt(r2)
    C = _matern_value(r, nu)
    C[np.diag_indices_from(C)] += eta2
    try:
        L = cholesky(C, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros(len(ls) + 1)
    alpha = cho_solve((L, True), y)
    sigma2 = max(float(y @ alpha) / N, 1e-300)
    ll = -0.5 * N * np.log(sigma2) - np.sum(np.log(np.diag(L))) - 0.5 * N * (
        1.0 + np.log(2.0 * np.pi)
    )
    Cinv = _chol_inverse(L)
    dk = _matern_dr2(r, nu)
    grad = np.empty(len(ls) + 1)
    for k in range(len(ls)):
        dC = dk * (-2.0 * d2[k] / ls[k] ** 2)
        grad[k] = 0.5 * (alpha @ dC @ alpha) / sigma2 - 0.5 * np.sum(Cinv * dC)
    # noise contributes 2*eta2*I to dC/dlog_noise
    grad[-1] = eta2 * ((alpha @ alpha) / sigma2 - np.trace(Cinv))
    return float(ll), grad


def _squared_deltas(X: np.ndarray, periods: np.ndarray | None) -> list[np.ndarray]:
    d = _wrapped_deltas(X, X, periods)
    return [np.ascontiguousarray(d[:, :, k] ** 2) for k in range(X.shape[1])]


def profiled_log_likelihood(
    X: np.ndarray,
    y: np.ndarray,
    nu: float,
    periods: np.ndarray | None,
    log_lengthscales: np.ndarray,
    log_noise_rel: float,
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood with the signal variance profiled out.

    Returns ``(ll, grad)`` where ``grad`` is with respect to
    ``[log_lengthscales..., log_noise_rel]``.  Evaluating at an
    indefinite point returns ``-inf`` with a zero gradient.
    """
    return _ll_from_d2(_squared_deltas(X, periods), y, nu, log_lengthscales, log_noise_rel)


class OutputGp:
    """Fitted posterior for one output dimension."""

    def __init__(self, kernel: KernelSpec, noise_rel2: float, X: np.ndarray, y: np.ndarray,
                 max_jitter: float = 1e-4):
        self.kernel = kernel
        self.noise_rel2 = noise_rel2
        self.y = y
        self.jitter = 0.0
        C = kernel_matrix(kernel, X, X)
        diag = np.diag_indices_from(C)
        C[diag] += noise_rel2
        jitter = 0.0
        while True:
            try:
                self.chol = cholesky(C + jitter * np.eye(len(X)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = 1e-10 if jitter == 0.0 else 10.0 * jitter
                if jitter > max_jitter:
                    raise FitError(
                        f"Cholesky failed at max jitter {max_jitter:g}"
                    ) from None
        self.jitter = jitter
        self.weights = cho_solve((self.chol, True), y)
        self.sigma2 = max(float(y @ self.weights) / len(y), 1e-300)
        self.log_likelihood = (
            -0.5 * len(y) * np.log(self.sigma2)
            - np.sum(np.log(np.diag(self.chol)))
            - 0.5 * len(y) * (1.0 + np.log(2.0 * np.pi))
        )
        self._Cinv: np.ndarray | None = None

    @property
    def Cinv(self) -> np.ndarray:
        if self._Cinv is None:
            self._Cinv = _chol_inverse(self.chol)
        return self._Cinv


class GpSurrogate:
    """Independent per-output-dimension GP posterior of a flow map.

    Immutable once built: prediction is pure and safe for concurrent use.
    """

    def __init__(self, X: np.ndarray, outputs: list[OutputGp], periods: np.ndarray | None,
                 start_log_likelihoods: list | None = None):
        self.X = X
        self.outputs = outputs
        self.periods = periods
        self.start_log_likelihoods = start_log_likelihoods or []

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_train(self) -> int:
        return len(self.X)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.array([o.kernel.lengthscales for o in self.outputs])

    @property
    def log_likelihood(self) -> float:
        return float(sum(o.log_likelihood for o in self.outputs))

    def predict(self, Xq: np.ndarray, with_std: bool = True):
        """Posterior mean and standard deviation at query points.

        ``Xq`` has shape ``(B, dim)`` (a single point is also accepted);
        returns ``(mu, sigma)`` of the same shape, or ``(mu, None)`` when
        ``with_std`` is false.
        """
        Xq = np.asarray(Xq, dtype=float)
        single = Xq.ndim == 1
        if single:
            Xq = Xq[None, :]
        if not np.all(np.isfinite(Xq)):
            raise ValueError("query points must be finite")
        if Xq.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}")
        mu = np.empty((len(Xq), self.dim))
        sd = np.empty((len(Xq), self.dim)) if with_std else None
        # chunked to bound the (chunk, n_train) temporaries
        chunk = max(1, int(4e6 / max(self.n_train, 1)))
        for lo in range(0, len(Xq), chunk):
            sel = slice(lo, min(lo + chunk, len(Xq)))
            Xc = Xq[sel]
            for ell, out in enumerate(self.outputs):
                kq = kernel_matrix(out.kernel, Xc, self.X)
                mu[sel, ell] = kq @ out.weights
                if self._delta_output(ell):
                    # periodic outputs model the increment; restore the level
                    mu[sel, ell] += Xc[:, ell]
                if with_std:
                    quad = np.einsum("bn,nb->b", kq, out.Cinv @ kq.T)
                    var = out.sigma2 * np.maximum(1.0 - quad, 0.0)
                    sd[sel, ell] = np.sqrt(var)
        if single:
            return (mu[0], sd[0] if sd is not None else None)
        return mu, sd

    def _delta_output(self, ell: int) -> bool:
        return self.periods is not None and self.periods[ell] > 0

    def confidence_hypercube(self, x, delta: float) -> StateBox:
        """Axis-aligned box with joint pointwise confidence ``1 - delta``.

        Each side is ``mu_n(x) +- z * sigma_n(x)`` with
        ``z = ppf(1 - alpha/2)`` and ``alpha = 1 - (1 - delta)**(1/M)``.
        """
        z = confidence_z(delta, self.dim)
        mu, sd = self.predict(np.asarray(x, dtype=float))
        return StateBox(mu - z * sd, mu + z * sd)

    def with_data(self, dataset: TrajectoryDataset) -> "GpSurrogate":
        """Rebuild the posterior on new data keeping the fitted kernels."""
        X, Y = _prepare_targets(dataset, self.periods)
        outs = [
            OutputGp(o.kernel, o.noise_rel2, X, np.ascontiguousarray(Y[:, ell]))
            for ell, o in enumerate(self.outputs)
        ]
        return GpSurrogate(X, outs, self.periods)

    # -- serialization ----------------------------------------------------

    def save(self, path):
        """Flat text dump: kernels, variances, and training data.

        Target columns are stored as trained: periodic output dimensions
        hold wrapped increments rather than absolute coordinates.
        """
        with open(path, "w") as fh:
            fh.write("gpmorse-model 1\n")
            fh.write(f"dim {self.dim}\n")
            fh.write(f"n_train {self.n_train}\n")
            pers = self.periods if self.periods is not None else np.zeros(self.dim)
            fh.write("periods " + " ".join(f"{p:.17g}" for p in pers) + "\n")
            for ell, o in enumerate(self.outputs):
                fh.write(f"output {ell}\n")
                fh.write(f"nu {o.kernel.nu:.17g}\n")
                fh.write(
                    "lengthscales "
                    + " ".join(f"{v:.17g}" for v in o.kernel.lengthscales)
                    + "\n"
                )
                fh.write(f"sigma2 {o.sigma2:.17g}\n")
                fh.write(f"noise_rel2 {o.noise_rel2:.17g}\n")
            fh.write("data\n")
            Y = np.stack([o.y for o in self.outputs], axis=1)
            for xi, yi in zip(self.X, Y):
                nums = np.concatenate([xi, yi])
                fh.write(" ".join(f"{v:.17g}" for v in nums) + "\n")

    @classmethod
    def load(cls, path) -> "GpSurrogate":
        with open(path) as fh:
            tokens = fh.readline().split()
            if tokens[:1] != ["gpmorse-model"]:
                raise ValueError(f"{path}: not a surrogate model file")
            dim = n_train = None
            periods = None
            kernels: list[dict] = []
            current: dict | None = None
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                key = parts[0]
                if key == "dim":
                    dim = int(parts[1])
                elif key == "n_train":
                    n_train = int(parts[1])
                elif key == "periods":
                    periods = np.array([float(v) for v in parts[1:]])
                elif key == "output":
                    current = {}
                    kernels.append(current)
                elif key == "data":
                    break
                elif current is not None:
                    current[key] = [float(v) for v in parts[1:]]
            rows = np.loadtxt(fh, ndmin=2)
        if dim is None or len(kernels) != dim or rows.shape != (n_train, 2 * dim):
            raise ValueError(f"{path}: inconsistent model file")
        # contiguous copies: strided views round differently in BLAS, which
        # would break byte-identical save/load/save round trips
        X = np.ascontiguousarray(rows[:, :dim])
        Y = np.ascontiguousarray(rows[:, dim:])
        if periods is not None and not np.any(periods > 0):
            periods_arg = None
        else:
            periods_arg = periods
        outputs = []
        for ell, kv in enumerate(kernels):
            spec = KernelSpec(
                nu=kv["nu"][0], lengthscales=np.array(kv["lengthscales"]), periods=periods_arg
            )
            outputs.append(
                OutputGp(spec, kv["noise_rel2"][0], X, np.ascontiguousarray(Y[:, ell]))
            )
        return cls(X, outputs, periods_arg)


def confidence_z(delta: float, dim: int) -> float:
    """Normal critical value for the per-dimension confidence interval."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    alpha = 1.0 - (1.0 - delta) ** (1.0 / dim)
    return float(norm.ppf(1.0 - alpha / 2.0))


def _prepare_targets(dataset: TrajectoryDataset, periods: np.ndarray | None):
    """Regression targets per output dimension.

    A periodic output trains on the wrapped increment ``y - x`` (nearest
    representative): unlike the raw coordinate, the increment is continuous
    across the seam for period-equivariant flows, so the GP never has to
    model an artificial jump.  The input coordinate is added back at
    prediction time.
    """
    X = np.array(dataset.x, dtype=float)
    Y = np.array(dataset.y, dtype=float)
    if periods is not None:
        for d in np.nonzero(periods > 0)[0]:
            P = periods[d]
            Y[:, d] = np.mod(Y[:, d] - X[:, d] + 0.5 * P, P) - 0.5 * P
    return X, Y


def _check_degenerate(X: np.ndarray, Y: np.ndarray):
    order = np.lexsort(X.T)
    Xs, Ys = X[order], Y[order]
    same = np.all(Xs[1:] == Xs[:-1], axis=1)
    if not np.any(same):
        return
    spread = np.abs(Ys[1:][same] - Ys[:-1][same]).max()
    tol = max(1e-8, 1e-6 * float(np.ptp(Y)))
    if spread > tol:
        raise FitError(
            f"degenerate dataset: duplicate inputs with conflicting outputs "
            f"(spread {spread:g})"
        )


def fit(
    dataset: TrajectoryDataset,
    kernel: KernelSpec | None = None,
    options: FitOptions | None = None,
    seed=0,
) -> GpSurrogate:
    """Maximum-likelihood fit, one independent GP per output dimension.

    Hyperparameters are optimized on a log scale with an analytic gradient
    (L-BFGS-B) from ``options.restarts`` starting points; the signal variance
    is profiled in closed form.  Deterministic for a fixed seed.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 training pairs")
    kernel = kernel or KernelSpec()
    options = options or FitOptions()
    rng = np.random.default_rng(seed)
    periods = kernel.periods
    X, Y = _prepare_targets(dataset, periods)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    _check_degenerate(X, Y)
    M = X.shape[1]

    spans = np.ptp(X, axis=0)
    if periods is not None:
        wrap = periods > 0
        spans = np.where(wrap, periods, spans)
    spans = np.maximum(spans, 1e-6)
    lo_b = np.log(1e-3 * spans)
    hi_b = np.log(10.0 * spans)
    noise_lo = 0.5 * np.log(options.noise_floor_rel2)
    bounds = [(lo_b[d], hi_b[d]) for d in range(M)] + [(noise_lo, 0.0)]

    # median pairwise distance per dim seeds the first start
    sub = X[rng.choice(len(X), size=min(len(X), 128), replace=False)]
    med = np.zeros(M)
    d = _wrapped_deltas(sub, sub, periods)
    for k in range(M):
        vals = d[:, :, k][np.triu_indices(len(sub), 1)]
        med[k] = np.median(vals[vals > 0]) if np.any(vals > 0) else spans[k]
    med = np.clip(med, np.exp(lo_b), np.exp(hi_b))

    d2 = _squared_deltas(X, periods)  # hyperparameter-independent, reused per eval
    outputs = []
    all_start_lls = []
    for ell in range(M):
        y = np.ascontiguousarray(Y[:, ell])
        starts = []
        if options.init_lengthscales is not None:
            init_ls = np.asarray(options.init_lengthscales[ell], dtype=float)
            init_eta = (
                options.init_noise_rel[ell] if options.init_noise_rel is not None else 1e-2
            )
            starts.append(np.concatenate([np.log(init_ls), [np.log(init_eta)]]))
        starts.append(np.concatenate([np.log(med), [np.log(1e-2)]]))
        while len(starts) < options.restarts:
            ls = np.exp(rng.uniform(np.log(0.05 * spans), np.log(2.0 * spans)))
            eta = np.exp(rng.uniform(np.log(1e-4), np.log(0.3)))
            starts.append(np.concatenate([np.log(ls), [np.log(eta)]]))
        starts = starts[: max(options.restarts, 1)]

        def objective(p):
            ll, g = _ll_from_d2(d2, y, kernel.nu, p[:M], p[M])
            if not np.isfinite(ll):
                return 1e25, np.zeros(M + 1)
            return -ll, -g

        best_p, best_val = None, np.inf
        start_lls = []
        for p0 in starts:
            p0 = np.clip(p0, [b[0] for b in bounds], [b[1] for b in bounds])
            ll0, _ = _ll_from_d2(d2, y, kernel.nu, p0[:M], p0[M])
            start_lls.append(ll0)
            res = minimize(
                objective,
                p0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": options.max_iter, "gtol": options.grad_tol},
            )
            if res.fun < best_val:
                best_val, best_p = res.fun, res.x
        if best_p is None:
            raise FitError("all optimizer starts failed")
        fitted = KernelSpec(
            nu=kernel.nu, lengthscales=np.exp(best_p[:M]), periods=periods
        )
        outputs.append(
            OutputGp(fitted, float(np.exp(2.0 * best_p[M])), X, y, options.max_jitter)
        )
        all_start_lls.append(start_lls)
    return GpSurrogate(X, outputs, periods, start_log_likelihoods=all_start_lls)
