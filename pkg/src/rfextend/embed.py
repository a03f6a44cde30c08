"""Reference RF-PHATE-style embedding.

Pipeline: RF-GAP kernel -> row-normalized diffusion operator -> ``t``-step
diffusion -> log potential distances -> metric MDS (classical start,
SMACOF refinement).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .proximity import symmetrize, train_proximities

POTENTIAL_EPS = 1e-7


class EmbedError(ValueError):
    pass


@dataclass
class Embedding:
    coords: np.ndarray
    source: str = "reference_pipeline"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2:
            raise EmbedError("embedding coordinates must be a 2-D matrix")
        if not np.all(np.isfinite(self.coords)):
            raise EmbedError("embedding has non-finite coordinates")

    @property
    def k(self) -> int:
        return self.coords.shape[1]

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def to_csv(self, path, row_index=None) -> None:
        row_index = np.arange(self.n) if row_index is None else np.asarray(row_index)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + [f"dim_{j}" for j in range(self.k)])
            for i, row in zip(row_index, self.coords):
                w.writerow([int(i)] + [repr(float(v)) for v in row])

    def write(self, path, row_index=None) -> Path:
        """CSV plus a ``.meta.json`` sidecar; returns the sidecar path."""
        path = Path(path)
        self.to_csv(path, row_index)
        sidecar = path.with_suffix(".meta.json")
        sidecar.write_text(json.dumps({"source": self.source, **self.meta}, indent=2))
        return sidecar

    @classmethod
    def read_csv(cls, path, source="reference_pipeline") -> "Embedding":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        coords = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        sidecar = Path(path).with_suffix(".meta.json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        source = meta.pop("source", source)
        return cls(coords, source, meta)


@dataclass(frozen=True)
class DiffusionConfig:
    t: int | str = "auto"
    k_dim: int = 2
    mds_iters: int = 500
    mds_tol: float = 1e-6
    t_max: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.t != "auto" and (not isinstance(self.t, (int, np.integer)) or self.t < 1):
            raise EmbedError(f"t must be a positive integer or 'auto', got {self.t!r}")
        if self.k_dim < 1:
            raise EmbedError("k_dim must be >= 1")


def diffusion_operator(K, return_degrees=False):
    """Row-normalize a symmetric nonnegative kernel into a Markov matrix."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise EmbedError(f"kernel must be square, got {K.shape}")
    if np.any(K < 0):
        raise EmbedError("kernel has negative entries")
    deg = K.sum(axis=1)
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        raise EmbedError(f"row {zero[0]} of the kernel is zero (isolated point)")
    P = K / deg[:, None]
    return (P, deg) if return_degrees else P


def entropy_curve(P_op, t_max, degrees=None) -> np.ndarray:
    """Von Neumann entropy of the diffusion spectrum for ``t = 1..t_max``.

    Eigenvalues come from the symmetric conjugate ``D^1/2 P D^-1/2`` when
    ``degrees`` is known; otherwise from ``P_op`` directly (same spectrum).
    """
    P_op = np.asarray(P_op, dtype=np.float64)
    if degrees is not None:
        s = np.sqrt(np.asarray(degrees, dtype=np.float64))
        A = s[:, None] * P_op / s[None, :]
        lam = np.linalg.eigvalsh((A + A.T) / 2.0)
    else:
        lam = np.linalg.eigvals(P_op).real
    lam = np.abs(lam)
    H = np.empty(t_max)
    for t in range(1, t_max + 1):
        w = lam**t
        p = w / w.sum()
        p = p[p > 0]
        H[t - 1] = -np.sum(p * np.log(p))
    return H


def knee_point(y) -> int:
    """Index (0-based) of the point farthest from the chord joining the curve's ends.

    Distances within rounding noise of the maximum count as ties and go to
    the smaller index, so a flat curve returns 0.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    dist = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / np.hypot(dx, dy)
    slack = 1e-12 * max(1.0, float(np.max(np.abs(y))))
    return int(np.flatnonzero(dist >= dist.max() - slack)[0])


def von_neumann_entropy_t(P_op, t_max: int = 64, degrees=None) -> int:
    """Diffusion time at the knee of the entropy curve (ties go to smaller t)."""
    if t_max < 3:
        raise EmbedError("t_max must be >= 3")
    return knee_point(entropy_curve(P_op, t_max, degrees)) + 1


def potential_distances(P_op, t: int, eps: float = POTENTIAL_EPS) -> np.ndarray:
    """Euclidean distances between rows of ``-log(P_op**t + eps)``."""
    if t < 1:
        raise EmbedError("t must be >= 1")
    Pt = np.linalg.matrix_power(np.asarray(P_op, dtype=np.float64), int(t))
    U = -np.log(Pt + eps)
    return squareform(pdist(U))


def stress(X, D) -> float:
    """Raw stress: sum over pairs ``i < j`` of squared distance residuals."""
    iu = np.triu_indices(len(D), 1)
    return float(np.sum((pdist(X) - D[iu]) ** 2))


def _power_eigs(B, k, rng, max_iter=5000, tol=1e-13):
    """Top-``k`` algebraic eigenpairs of symmetric ``B`` by power iteration with deflation."""
    n = B.shape[0]
    vals, vecs = [], []
    scale = max(np.abs(B).sum(axis=1).max(), np.finfo(float).tiny)

    def deflated(v, shift):
        w = B @ v + shift * v
        for lam, u in zip(vals, vecs):
            w -= (lam + shift) * u * (u @ v)
        return w

    for _ in range(min(k, n)):
        shift = 0.0
        for _attempt in range(2):
            v = rng.standard_normal(n)
            for u in vecs:
                v -= u * (u @ v)
            v /= np.linalg.norm(v)
            for _it in range(max_iter):
                w = deflated(v, shift)
                lam = v @ w
                if np.linalg.norm(w - lam * v) < tol * scale:
                    break
                for u in vecs:
                    w -= u * (u @ w)
                norm = np.linalg.norm(w)
                if norm == 0.0:
                    break
                v = w / norm
            lam = v @ deflated(v, shift) - shift
            if lam >= 0 or shift > 0:
                break
            # dominant eigenvalue is negative: shift the spectrum and retry
            shift = -lam
        vals.append(lam)
        vecs.append(v)
    return np.array(vals), np.column_stack(vecs)


def classical_mds(D, k, seed=0) -> np.ndarray:
    """Torgerson scaling via power iteration on the double-centered Gram matrix."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D**2) @ J
    B = (B + B.T) / 2.0
    vals, vecs = _power_eigs(B, k, np.random.default_rng(seed))
    X = vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]
    if X.shape[1] < k:
        X = np.hstack([X, np.zeros((n, k - X.shape[1]))])
    return X


def smacof(D, X0, max_iter=500, tol=1e-6):
    """Metric SMACOF from ``X0``. Returns ``(X, stress_history)``.

    Stops after ``max_iter`` Guttman transforms or when the relative stress
    decrease falls below ``tol``.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    X = np.array(X0, dtype=np.float64)
    history = [stress(X, D)]
    for _ in range(max_iter):
        if history[-1] <= 1e-300:
            break
        dx = squareform(pdist(X))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dx > 0, D / dx, 0.0)
        Bx = -ratio
        np.fill_diagonal(Bx, ratio.sum(axis=1) - np.diag(ratio))
        X = Bx @ X / n
        history.append(stress(X, D))
        prev, cur = history[-2], history[-1]
        if prev - cur < tol * prev:
            break
    return X, np.array(history)


def mds(D, k: int = 2, mds_iters: int = 500, mds_tol: float = 1e-6, seed: int = 0) -> Embedding:
    """Metric MDS: classical initialization refined by SMACOF."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise EmbedError(f"distance matrix must be square, got {D.shape}")
    if not np.array_equal(D, D.T):
        raise EmbedError("distance matrix is not symmetric")
    if np.any(np.diag(D) != 0) or np.any(D < 0):
        raise EmbedError("distance matrix needs a zero diagonal and nonnegative entries")
    X0 = classical_mds(D, k, seed)
    X, history = smacof(D, X0, mds_iters, mds_tol)
    total = float(np.sum(np.triu(D, 1) ** 2))
    meta = {
        "stress": float(history[-1]),
        "normalized_stress": float(np.sqrt(history[-1] / total)) if total > 0 else 0.0,
        "iterations": len(history) - 1,
        "stress_history": history.tolist(),
        "seed": seed,
    }
    return Embedding(X, "reference_pipeline", meta)


def rfphate_embed(f, ds, cfg: DiffusionConfig | None = None) -> Embedding:
    """RF-PHATE-style embedding of a forest's training rows."""
    cfg = cfg or DiffusionConfig()
    K = symmetrize(train_proximities(f, ds, mode="zero"))
    P_op, deg = diffusion_operator(K, return_degrees=True)
    t = von_neumann_entropy_t(P_op, cfg.t_max, deg) if cfg.t == "auto" else int(cfg.t)
    D = potential_distances(P_op, t)
    E = mds(D, cfg.k_dim, cfg.mds_iters, cfg.mds_tol, cfg.seed)
    E.meta.pop("stress_history", None)
    E.meta.update(
        {
            "t": t,
            "t_requested": cfg.t,
            "potential_eps": POTENTIAL_EPS,
            "config": asdict(cfg),
        }
    )
    return E
