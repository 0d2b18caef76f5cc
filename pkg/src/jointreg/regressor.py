"""Sparse non-negative vertex-to-joint regressor: fitting and application.

Each joint row w solves

    min_w  sum_f ||X_f[m] - V_f^T w||^2 + lambda_sum * (sum(w) - 1)^2 + ridge * ||w||^2
    s.t.   w >= 0

Rows do not interact, so the problem is solved row by row in Gram form
(0.5 w^T G w - c^T w) with G shared across rows.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .body_model import BodyModel, BodyParams, forward
from .errors import DataError, DimensionError, EmptyProblemError

logger = logging.getLogger(__name__)

SOLVERS = ("pg", "active_set")


@dataclass(frozen=True, eq=False)
class JointRegressor:
    """M x N non-negative weights mapping vertices to joints."""

    weights: np.ndarray
    lambda_sum: float = 0.0
    solver: str = "loaded"
    converged: bool = True
    warnings: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"regressor weights must be 2-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise DataError("regressor weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def n_joints(self) -> int:
        return self.weights.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.weights.shape[1]

    def __call__(self, vertices) -> np.ndarray:
        return regress_joints(self, vertices)


def regress_joints(regressor: JointRegressor, vertices) -> np.ndarray:
    """Joint positions J V for one (N x 3) or a batch (F x N x 3) of vertex sets."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape[-2:] != (regressor.n_vertices, 3):
        raise DimensionError(
            f"vertices have shape {v.shape}, regressor expects (..., {regressor.n_vertices}, 3)"
        )
    return regressor.weights @ v


@dataclass
class FitProblem:
    """Vertex sets paired with target joints, plus fitting options.

    ``max_support`` caps the number of non-zero weights per row (default 5% of N);
    rows exceeding it are pruned to their largest entries and refit on that support.
    ``support_radius`` restricts each row to the R vertices nearest its mean target.
    """

    frames: Sequence[tuple]
    lambda_sum: float = 1e3
    max_support: int | None = None
    support_radius: int | None = None
    ridge: float = 1e-9
    solver: str = "pg"
    max_iter: int = 10_000
    tol: float = 1e-10
    n_jobs: int | None = None

    def arrays(self):
        if len(self.frames) == 0:
            raise EmptyProblemError("fit problem has no frames")
        verts = np.stack([np.asarray(f[0], dtype=np.float64) for f in self.frames])
        targets = np.stack([np.asarray(f[1], dtype=np.float64) for f in self.frames])
        if verts.ndim != 3 or verts.shape[2] != 3:
            raise DimensionError("every frame needs N x 3 vertices")
        if targets.ndim != 3 or targets.shape[2] != 3:
            raise DimensionError("every frame needs M x 3 target joints")
        if not (np.all(np.isfinite(verts)) and np.all(np.isfinite(targets))):
            raise DataError("fit problem contains non-finite values")
        # canonical frame order makes every sum, and so the fit, independent of input order
        order = sorted(range(len(verts)), key=lambda i: (verts[i].tobytes(), targets[i].tobytes()))
        return verts[order], targets[order]

    def support_cap(self, n_vertices: int) -> int:
        if self.max_support is not None:
            return int(self.max_support)
        return max(1, int(np.floor(0.05 * n_vertices)))


def _projected_gradient(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.where(w > 0, g, np.minimum(g, 0.0))


def _face_minimize(gram, c, w):
    """Minimize over the face {w_i = 0 for inactive i}, dropping variables that hit zero.

    Each pass moves toward the face minimizer and stops at the first bound; the
    blocking variable leaves the face. Returns the new iterate (strictly positive on
    its support) and the number of passes.
    """
    passes = 0
    free = np.flatnonzero(w > 0)
    while free.size:
        passes += 1
        target = np.linalg.solve(gram[np.ix_(free, free)], c[free])
        if np.all(target > 0):
            w = np.zeros_like(w)
            w[free] = target
            return w, passes
        d = target - w[free]
        neg = d < 0
        ratios = w[free][neg] / -d[neg]
        i = np.argmin(ratios)
        t = min(ratios[i], 1.0)
        w = w.copy()
        w[free] = np.maximum(w[free] + t * d, 0.0)
        w[free[np.flatnonzero(neg)[i]]] = 0.0
        free = np.flatnonzero(w > 0)
    return w, passes


def solve_pg(gram: np.ndarray, c: np.ndarray, tol: float, max_iter: int):
    """Projected gradient with exact line search, alternated with face minimization.

    The gradient-projection step can free or fix many variables at once; the face
    step then solves exactly on the resulting support. The objective decreases
    strictly between face minimizers, so no support is visited twice.
    Returns (w, iterations, converged).
    """
    n = c.shape[0]
    w = np.zeros(n)
    it = 0
    while it < max_iter:
        g = gram @ w - c
        d = -_projected_gradient(g, w)
        if np.linalg.norm(d) < tol:
            return w, it, True
        it += 1
        curv = d @ gram @ d
        step = (d @ d) / curv if curv > 0 else np.inf
        shrinking = np.flatnonzero(d < 0)
        hit = None
        if shrinking.size:
            ratios = w[shrinking] / -d[shrinking]
            k = np.argmin(ratios)
            if ratios[k] < step:
                step, hit = ratios[k], shrinking[k]
        w = np.maximum(w + step * d, 0.0)
        if hit is not None:
            w[hit] = 0.0
        w, passes = _face_minimize(gram, c, w)
        it += passes
    g = gram @ w - c
    return w, it, bool(np.linalg.norm(_projected_gradient(g, w)) < tol)


def solve_active_set(gram: np.ndarray, c: np.ndarray, tol: float, max_iter: int):
    """Lawson-Hanson active-set NNLS in Gram form. Returns (w, iterations, converged)."""
    n = c.shape[0]
    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad = c.copy()
    it = 0
    while it < max_iter:
        cand = np.where(passive, -np.inf, grad)
        if passive.all() or cand.max() <= tol:
            return w, it, True
        passive[np.argmax(cand)] = True
        while True:
            it += 1
            idx = np.flatnonzero(passive)
            s = np.zeros(n)
            s[idx] = np.linalg.solve(gram[np.ix_(idx, idx)], c[idx])
            if np.all(s[idx] > 0) or it >= max_iter:
                break
            blocking = passive & (s <= 0)
            alpha = np.min(w[blocking] / (w[blocking] - s[blocking]))
            w = w + alpha * (s - w)
            passive &= w > 1e-15
            w[~passive] = 0.0
        w = np.maximum(s, 0.0)
        grad = c - gram @ w
    return w, it, False


_SOLVER_FUNCS = {"pg": solve_pg, "active_set": solve_active_set}


def _gram(verts: np.ndarray, lambda_sum: float, ridge: float) -> np.ndarray:
    n = verts.shape[1]
    flat = verts.transpose(1, 0, 2).reshape(n, -1)
    gram = flat @ flat.T
    gram += lambda_sum
    gram[np.diag_indices(n)] += ridge
    return gram


def row_objective(problem: FitProblem, row: int, w) -> float:
    """The fitted objective for one joint row (data term, sum penalty and ridge)."""
    verts, targets = problem.arrays()
    w = np.asarray(w, dtype=np.float64)
    resid = targets[:, row] - np.einsum("fnc,n->fc", verts, w)
    return float(
        np.sum(resid**2) + problem.lambda_sum * (w.sum() - 1.0) ** 2 + problem.ridge * (w @ w)
    )


def fit_objective(problem: FitProblem, weights) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    return sum(row_objective(problem, m, weights[m]) for m in range(weights.shape[0]))


def _candidate_support(verts, targets, radius):
    if radius is None:
        return [None] * targets.shape[1]
    mean_v = verts.mean(axis=0)
    mean_t = targets.mean(axis=0)
    out = []
    for m in range(targets.shape[1]):
        d = np.linalg.norm(mean_v - mean_t[m], axis=1)
        out.append(np.sort(np.argsort(d, kind="stable")[:radius]))
    return out


def _fit_row(gram, c, support, cap, solve, tol, max_iter):
    n = c.shape[0]
    idx = np.arange(n) if support is None else support
    sub_w, iters, ok = solve(gram[np.ix_(idx, idx)], c[idx], tol, max_iter)
    pruned = False
    if np.count_nonzero(sub_w > 1e-6) > cap:
        keep = np.sort(idx[np.argsort(-sub_w, kind="stable")[:cap]])
        sub_w, more, ok = solve(gram[np.ix_(keep, keep)], c[keep], tol, max_iter)
        iters += more
        idx = keep
        pruned = True
    w = np.zeros(n)
    w[idx] = sub_w
    return w, iters, ok, pruned


def fit(problem: FitProblem) -> JointRegressor:
    """Fit the regressor row by row; see module docstring for the objective."""
    if problem.solver not in _SOLVER_FUNCS:
        raise ValueError(f"unknown solver {problem.solver!r}; choose from {SOLVERS}")
    verts, targets = problem.arrays()
    n_frames, n, _ = verts.shape
    m = targets.shape[1]
    gram = _gram(verts, problem.lambda_sum, problem.ridge)
    cap = problem.support_cap(n)
    supports = _candidate_support(verts, targets, problem.support_radius)
    solve = _SOLVER_FUNCS[problem.solver]

    def run(row):
        c = np.einsum("fnc,fc->n", verts, targets[:, row]) + problem.lambda_sum
        return _fit_row(gram, c, supports[row], cap, solve, problem.tol, problem.max_iter)

    n_jobs = problem.n_jobs or int(os.environ.get("JOINTREG_THREADS", "1"))
    if n_jobs > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(m)))
    else:
        results = [run(row) for row in range(m)]

    weights = np.stack([r[0] for r in results])
    converged = all(r[2] for r in results)
    notes = []
    if not converged:
        notes.append("solver did not reach the projected-gradient tolerance on every row")
    n_candidates = n if problem.support_radius is None else min(n, problem.support_radius)
    if 3 * n_frames < n_candidates:
        notes.append(
            f"underdetermined: {3 * n_frames} equations per row for {n_candidates} candidate weights"
        )
    resid = targets - weights @ verts
    per_joint_rmse = np.sqrt(np.mean(np.sum(resid**2, axis=2), axis=0))
    diagnostics = {
        "frames": int(n_frames),
        "rmse": float(np.sqrt(np.mean(np.sum(resid**2, axis=2)))),
        "per_joint_rmse": per_joint_rmse.tolist(),
        "row_sums": weights.sum(axis=1).tolist(),
        "nonzeros": [int(np.count_nonzero(r > 1e-6)) for r in weights],
        "iterations": [int(r[1]) for r in results],
        "pruned_rows": [i for i, r in enumerate(results) if r[3]],
        "objective": float(fit_objective(problem, weights)),
    }
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
        logger.warning(note)
    return JointRegressor(
        weights,
        lambda_sum=problem.lambda_sum,
        solver=problem.solver,
        converged=converged,
        warnings=tuple(notes),
        diagnostics=diagnostics,
    )


def realize_vertices(model: BodyModel, params: BodyParams, translation=None) -> np.ndarray:
    verts = forward(model, params).vertices
    if translation is not None:
        verts = verts + np.asarray(translation, dtype=np.float64)
    return verts


def bootstrap_spin_regressor(model: BodyModel, frames, **options) -> JointRegressor:
    """Fit a regressor from estimated body parameters to ground-truth joints.

    ``frames`` holds (params, gt_joints) or (params, translation, gt_joints) tuples.
    The result is meant to stay fixed while poses are refined.
    """
    pairs = []
    for frame in frames:
        if len(frame) == 2:
            params, gt = frame
            trans = None
        else:
            params, trans, gt = frame
        pairs.append((realize_vertices(model, params, trans), gt))
    return fit(FitProblem(pairs, **options))
