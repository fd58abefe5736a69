"""Hessian eigenpairs and curvature-weighted parameter sensitivity.

Per-parameter sensitivity is ``(sum_i |lambda_i| q_i**2) * w**2`` over the
top Hessian eigenpairs; per-channel sensitivity reduces that tensor over
every axis except the layer's input-channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .nn import Network, hvp

AGGREGATIONS = ("sum", "max", "mean", "mse")


class EigenConvergenceError(RuntimeError):
    def __init__(self, index, best_residual, eigenvalue):
        super().__init__(
            f"eigenpair {index} did not converge (best relative residual {best_residual:.3g})"
        )
        self.index = index
        self.best_residual = best_residual
        self.eigenvalue = eigenvalue


@dataclass(frozen=True)
class EigenPair:
    eigenvalue: float
    vector: np.ndarray
    residual: float = 0.0  # ||Hq - lambda q|| / |lambda|
    iterations: int = 0


@dataclass
class SensitivityMap:
    per_param: list[np.ndarray]
    per_channel: list[np.ndarray] | None = None
    n_pairs: int = 0
    aggregation: str = "sum"
    meta: dict = field(default_factory=dict)

    def layer_totals(self):
        return [float(s.sum()) for s in self.per_param]


def power_iteration(matvec, dim, n, *, max_iter=200, tol=1e-2, seed=0):
    """Top-``n`` eigenpairs of a symmetric operator by |eigenvalue|.

    Each pair runs plain power iteration with earlier eigenvectors projected
    out (Gram-Schmidt deflation) before and after every product. A pair has
    converged once ``||Av - lambda v|| <= tol * |lambda|``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    found: list[EigenPair] = []

    def deflate(x):
        for pair in found:
            x = x - (pair.vector @ x) * pair.vector
        return x

    for index in range(n):
        v = deflate(rng.normal(size=dim))
        v /= np.linalg.norm(v)
        best = (np.inf, 0.0, v)
        for it in range(1, max_iter + 1):
            w = deflate(matvec(v))
            lam = float(v @ w)
            res = float(np.linalg.norm(w - lam * v))
            rel = res / abs(lam) if lam != 0 else (0.0 if res == 0 else np.inf)
            if rel < best[0]:
                best = (rel, lam, v)
            if rel <= tol:
                break
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            v = deflate(w / norm)
            v /= np.linalg.norm(v)
        rel, lam, v = best
        if rel > tol:
            raise EigenConvergenceError(index, rel, lam)
        found.append(EigenPair(lam, v, rel, it))
    return sorted(found, key=lambda p: -abs(p.eigenvalue))


def block_power_iteration(matvec, dim, n, *, block=None, max_iter=200, tol=1e-2, seed=0):
    """Orthogonal (block) power iteration with a Rayleigh-Ritz step.

    Iterates a block of ``n + 3`` vectors, re-orthonormalised by Gram-Schmidt
    (QR) after every product, so pair ``i`` converges at rate
    ``|lambda_{block+1} / lambda_i|`` instead of ``|lambda_{i+1} / lambda_i|``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    block = min(dim, max(n, block or n + 3))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, block)))
    rel = np.full(n, np.inf)
    for it in range(1, max_iter + 1):
        aq = np.column_stack([matvec(q[:, j]) for j in range(block)])
        small = q.T @ aq
        small = (small + small.T) / 2
        vals, vecs = np.linalg.eigh(small)
        order = np.argsort(-np.abs(vals), kind="stable")
        vals, vecs = vals[order], vecs[:, order]
        ritz = q @ vecs
        a_ritz = aq @ vecs
        res = np.linalg.norm(a_ritz - ritz * vals, axis=0)[:n]
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(vals[:n] != 0, res / np.abs(vals[:n]), np.where(res == 0, 0.0, np.inf))
        if np.all(rel <= tol):
            break
        q, _ = np.linalg.qr(a_ritz)
    bad = np.flatnonzero(rel > tol)
    if bad.size:
        i = int(bad[0])
        raise EigenConvergenceError(i, float(rel[i]), float(vals[i]))
    return [EigenPair(float(vals[i]), ritz[:, i] / np.linalg.norm(ritz[:, i]), float(rel[i]), it) for i in range(n)]


def top_eigenpairs(net: Network, data, n=5, *, method="block", max_iter=200, tol=1e-2, eps=1e-5, seed=0):
    """Leading Hessian eigenpairs of the cross-entropy loss over ``data``.

    ``method="block"`` (default) uses :func:`block_power_iteration`;
    ``"deflation"`` runs one vector at a time.
    """
    solver = {"block": block_power_iteration, "deflation": power_iteration}[method]
    return solver(lambda v: hvp(net, data, v, eps), net.num_params, n, max_iter=max_iter, tol=tol, seed=seed)


def param_sensitivity(pairs, net: Network) -> SensitivityMap:
    if not pairs:
        raise ValueError("need at least one eigenpair")
    curvature = np.zeros(net.num_params)
    for pair in pairs:
        curvature += abs(pair.eigenvalue) * np.asarray(pair.vector, dtype=np.float64) ** 2
    s = curvature * net.flat_weights() ** 2
    return SensitivityMap(
        per_param=net.unflatten(s),
        n_pairs=len(pairs),
        meta={"eigenvector_normalization": "global", "eigenvalues": [float(p.eigenvalue) for p in pairs]},
    )


def _reduce(s, axes, how):
    if how == "sum":
        return s.sum(axis=axes)
    if how == "max":
        return s.max(axis=axes)
    if how == "mean":
        return s.mean(axis=axes)
    if how == "mse":
        return (s ** 2).mean(axis=axes)
    raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


def channel_axes(weight_ndim: int):
    """Axes to reduce so only the input-channel axis remains."""
    return (0, 1, 3) if weight_ndim == 4 else (1,)


def channel_sensitivity(smap: SensitivityMap, net: Network, aggregation="sum") -> SensitivityMap:
    per_channel = []
    for p, s in enumerate(smap.per_param):
        if s.shape != net.weights[p].shape:
            raise ValueError(f"layer {p}: sensitivity shape {s.shape} != weight shape {net.weights[p].shape}")
        per_channel.append(np.asarray(_reduce(s, channel_axes(s.ndim), aggregation), dtype=np.float64))
    return SensitivityMap(smap.per_param, per_channel, smap.n_pairs, aggregation, dict(smap.meta))


def compute(net, data, n=5, aggregation="sum", **kwargs) -> SensitivityMap:
    pairs = top_eigenpairs(net, data, n, **kwargs)
    smap = channel_sensitivity(param_sensitivity(pairs, net), net, aggregation)
    smap.meta["residuals"] = [float(p.residual) for p in pairs]
    return smap


def save(smap: SensitivityMap, path):
    blobs = {f"param{p}": s for p, s in enumerate(smap.per_param)}
    if smap.per_channel is not None:
        blobs.update({f"channel{p}": s for p, s in enumerate(smap.per_channel)})
    meta = {"n_pairs": smap.n_pairs, "aggregation": smap.aggregation, "layers": len(smap.per_param), **smap.meta}
    container.write(path, "sensitivity", meta, blobs)


def load(path) -> SensitivityMap:
    meta, arrays = container.read(path, "sensitivity")
    meta = dict(meta)
    n_layers = meta.pop("layers")
    per_param = [arrays[f"param{p}"] for p in range(n_layers)]
    per_channel = [arrays[f"channel{p}"] for p in range(n_layers)] if "channel0" in arrays else None
    return SensitivityMap(per_param, per_channel, meta.pop("n_pairs"), meta.pop("aggregation"), meta)
