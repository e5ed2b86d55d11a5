"""Synthetic settings with known per-individual graphs, and the metrics used to
score estimates against them.

Observations are ``ambient``-dimensional; following the experimental setup a
setting labelled with ``p`` samples ``p + 1`` variables unless ``ambient`` is
given explicitly. Ground-truth graphs always match the sampled dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cholesky, solve_triangular

from covgraph.errors import InvalidArgumentError, UndefinedMetricError

KINDS = (
    "uni-continuous",
    "multi-continuous",
    "discrete-independent",
    "discrete-dependent",
    "covariate-free",
    "high-dim",
    "contaminated",
    "t-noise",
)
CONTAMINATION_SHIFT = 3.0


@dataclass
class SimulatedData:
    """One draw of a setting.

    ``covariates`` is ``None`` for the covariate-free setting. ``omegas`` and
    ``truths`` have one ``(q, q)`` slice per individual.
    """

    data: NDArray[np.float64]
    covariates: NDArray[np.float64] | None
    omegas: NDArray[np.float64]
    truths: NDArray[np.int8]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class SimSetting:
    kind: str
    p: int = 10
    ambient: int | None = None
    c: float = 15.0
    n1: int = 50
    n2: int = 50
    n_per_group: int | None = None
    fraction: float = 0.05
    df: float = 6.0
    base: str = "discrete-independent"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(
                f"unknown setting {self.kind!r}; valid settings: {', '.join(KINDS)}"
            )

    def dim(self) -> int:
        return self.ambient if self.ambient is not None else self.p + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def truth_from_precision(omega: ArrayLike) -> NDArray[np.int8]:
    """Support of the off-diagonal entries."""
    om = np.asarray(omega)
    g = (om != 0).astype(np.int8)
    idx = np.arange(om.shape[-1])
    g[..., idx, idx] = 0
    return g


def _check_spd(omega: NDArray[np.float64]) -> None:
    if not np.allclose(omega, np.swapaxes(omega, -1, -2)):
        raise InvalidArgumentError("precision matrix is not symmetric")
    if np.min(np.linalg.eigvalsh(omega)) <= 0:
        raise InvalidArgumentError("precision matrix is not positive definite")


def sample_mvn_precision(omega: ArrayLike, count: int, seed=None) -> NDArray[np.float64]:
    """Draw ``count`` rows from ``N(0, omega^{-1})``.

    With ``omega = L L'`` the draw is ``x = L'^{-1} e`` for standard normal ``e``,
    so no explicit inverse is formed.
    """
    om = np.asarray(omega, dtype=np.float64)
    L = cholesky(om, lower=True)  # raises LinAlgError if not SPD
    e = _rng(seed).standard_normal((om.shape[0], count))
    return solve_triangular(L.T, e, lower=False).T


def sample_mvt_precision(omega: ArrayLike, count: int, df: float, seed=None) -> NDArray[np.float64]:
    """Multivariate t with scale matrix ``omega^{-1}`` and ``df`` degrees of freedom."""
    if not df >= 1:
        raise InvalidArgumentError(f"df must be >= 1, got {df}")
    rng = _rng(seed)
    z = sample_mvn_precision(omega, count, rng)
    g = rng.chisquare(df, size=count)
    return z / np.sqrt(g / df)[:, None]


def _sample_rows(omegas: NDArray[np.float64], rng, sampler) -> NDArray[np.float64]:
    return np.vstack([sampler(om, 1, rng) for om in omegas])


def _gaussian(om, count, rng):
    return sample_mvn_precision(om, count, rng)


def uni_precision(z: float, q: int) -> NDArray[np.float64]:
    """Precision of an individual with scalar covariate ``z`` (variables 1-3 carry the signal)."""
    if q < 3:
        raise InvalidArgumentError("need at least 3 variables")
    om = 2.0 * np.eye(q)
    om[1, 2] = om[2, 1] = 1.0
    om[0, 1] = om[1, 0] = float(z < 1) * min(1.0, 0.5 - 0.5 * z)
    om[0, 2] = om[2, 0] = float(z > -1) * min(1.0, 0.5 + 0.5 * z)
    return om


def multi_precision(z: ArrayLike, q: int) -> NDArray[np.float64]:
    """As :func:`uni_precision`, with edge (1,2) driven by ``z[0]`` and (1,3) by ``z[1]``."""
    z1, z2 = float(z[0]), float(z[1])
    om = 2.0 * np.eye(q)
    om[1, 2] = om[2, 1] = 1.0
    om[0, 1] = om[1, 0] = float(z1 < 1) * min(1.0, 0.5 - 0.5 * z1)
    om[0, 2] = om[2, 0] = float(z2 > -1) * min(1.0, 0.5 + 0.5 * z2)
    return om


def _finish(z, omegas, rng, sampler, meta) -> SimulatedData:
    for om in omegas:
        _check_spd(om)
    data = _sample_rows(omegas, rng, sampler)
    return SimulatedData(data, z, omegas, truth_from_precision(omegas), meta)


def gen_uni_continuous(
    p: int = 10, n_per_cluster: int = 50, seed=None, ambient: int | None = None, sampler=_gaussian
) -> SimulatedData:
    """Covariate uniform on [-3,-1], [-1,1], [1,3] (``n_per_cluster`` each)."""
    q = ambient if ambient is not None else p + 1
    if q < 3:
        raise InvalidArgumentError("need at least 3 variables")
    rng = _rng(seed)
    z = np.concatenate([rng.uniform(a, a + 2.0, n_per_cluster) for a in (-3.0, -1.0, 1.0)])
    omegas = np.stack([uni_precision(v, q) for v in z])
    return _finish(z[:, None], omegas, rng, sampler, {"kind": "uni-continuous", "p": p, "ambient": q})


def gen_multi_continuous(
    p: int = 10, n_per_cell: int = 25, seed=None, ambient: int | None = None, sampler=_gaussian
) -> SimulatedData:
    """``n_per_cell`` uniform draws in each cell of the 3x3 partition of [-3,3]^2."""
    q = ambient if ambient is not None else p + 1
    if q < 3:
        raise InvalidArgumentError("need at least 3 variables")
    rng = _rng(seed)
    cells = []
    for a in (-3.0, -1.0, 1.0):
        for b in (-3.0, -1.0, 1.0):
            cells.append(
                np.column_stack(
                    [rng.uniform(a, a + 2.0, n_per_cell), rng.uniform(b, b + 2.0, n_per_cell)]
                )
            )
    z = np.vstack(cells)
    omegas = np.stack([multi_precision(v, q) for v in z])
    return _finish(z, omegas, rng, sampler, {"kind": "multi-continuous", "p": p, "ambient": q})


def discrete_loading(level: int, c: float, q: int, dependent: bool) -> NDArray[np.float64]:
    lam = np.zeros(q)
    if dependent and level == 2:
        lam[q - 4 :] = c
    else:
        lam[:4] = c
    return lam


def gen_discrete(
    setting: str = "dependent",
    c: float = 15.0,
    n1: int = 50,
    n2: int = 50,
    p: int = 10,
    seed=None,
    ambient: int | None = None,
    sampler=_gaussian,
) -> SimulatedData:
    """Binary covariate (individuals ``1..n1`` at level 1, the rest at level 2) with
    precision ``lambda lambda' + 10 I``.

    ``setting='independent'`` puts the loading on the first four variables at both
    levels; ``'dependent'`` moves it to the last four at level 2.
    """
    if setting not in ("independent", "dependent"):
        raise InvalidArgumentError(f"setting must be 'independent' or 'dependent', got {setting!r}")
    if c < 0:
        raise InvalidArgumentError("c must be non-negative")
    q = ambient if ambient is not None else p + 1
    if q < 4:
        raise InvalidArgumentError("need at least 4 variables")
    rng = _rng(seed)
    z = np.concatenate([np.ones(n1), np.full(n2, 2.0)])
    omegas = np.stack(
        [
            np.outer(lam, lam) + 10.0 * np.eye(q)
            for lam in (discrete_loading(int(v), c, q, setting == "dependent") for v in z)
        ]
    )
    meta = {"kind": f"discrete-{setting}", "p": p, "ambient": q, "c": c, "n1": n1, "n2": n2}
    return _finish(z[:, None], omegas, rng, sampler, meta)


def _base(setting: SimSetting, seed, sampler=_gaussian) -> SimulatedData:
    kind = setting.base if setting.kind in ("contaminated", "t-noise") else setting.kind
    q = setting.dim()
    if kind == "uni-continuous":
        return gen_uni_continuous(setting.p, setting.n_per_group or 50, seed, q, sampler)
    if kind == "multi-continuous":
        return gen_multi_continuous(setting.p, setting.n_per_group or 25, seed, q, sampler)
    if kind in ("discrete-independent", "covariate-free"):
        sim = gen_discrete("independent", setting.c, setting.n1, setting.n2, setting.p, seed, q, sampler)
        if kind == "covariate-free":
            sim.covariates = None
            sim.meta["kind"] = "covariate-free"
        return sim
    if kind in ("discrete-dependent", "high-dim"):
        sim = gen_discrete("dependent", setting.c, setting.n1, setting.n2, setting.p, seed, q, sampler)
        sim.meta["kind"] = kind
        return sim
    raise InvalidArgumentError(f"setting {kind!r} cannot serve as a base setting")


def gen_robustness(
    kind: str,
    base: SimSetting,
    seed=None,
    fraction: float = 0.05,
    df: float = 6.0,
) -> SimulatedData:
    """Contaminated or heavy-tailed version of a base setting.

    ``contaminated`` replaces ``ceil(fraction * n)`` randomly chosen rows by draws
    from ``N(3 * 1, I)``; rows of the base draw are unchanged otherwise, so
    ``fraction=0`` reproduces the base generator exactly. ``t-noise`` swaps the
    Gaussian sampler for a multivariate t with the same scale matrix.
    """
    if kind == "contaminated":
        if not 0.0 <= fraction <= 0.5:
            raise InvalidArgumentError("fraction must lie in [0, 0.5]")
        sim = _base(base, seed)
        n, q = sim.data.shape
        k = math.ceil(fraction * n - 1e-12)
        crng = np.random.default_rng([0 if seed is None else int(seed), 0xC0])
        rows = np.sort(crng.choice(n, size=k, replace=False)) if k else np.array([], dtype=int)
        sim.data[rows] = CONTAMINATION_SHIFT + crng.standard_normal((k, q))
        sim.meta.update(kind="contaminated", fraction=fraction, contaminated_rows=rows.tolist())
        return sim
    if kind == "t-noise":
        if not df >= 1:
            raise InvalidArgumentError("df must be >= 1")
        sim = _base(base, seed, lambda om, c, r: sample_mvt_precision(om, c, df, r))
        sim.meta.update(kind="t-noise", df=df)
        return sim
    raise InvalidArgumentError(f"kind must be 'contaminated' or 't-noise', got {kind!r}")


def simulate(setting: SimSetting, seed=None) -> SimulatedData:
    """Draw one dataset for a named setting (``seed`` defaults to ``setting.seed``)."""
    seed = setting.seed if seed is None else seed
    if setting.kind in ("contaminated", "t-noise"):
        return gen_robustness(setting.kind, setting, seed, setting.fraction, setting.df)
    return _base(setting, seed)


# -- metrics --


def sensitivity_specificity(truth: ArrayLike, estimate: ArrayLike) -> tuple[float, float]:
    """True-positive and true-negative rates over ordered off-diagonal pairs.

    An undefined rate (no true edges, or no true non-edges) is returned as NaN.
    """
    t = np.asarray(truth)
    e = np.asarray(estimate)
    if t.shape != e.shape or t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise InvalidArgumentError(f"shape mismatch: truth {t.shape}, estimate {e.shape}")
    off = ~np.eye(t.shape[0], dtype=bool)
    t = t[off] != 0
    e = e[off] != 0
    pos, neg = t.sum(), (~t).sum()
    sens = float((t & e).sum() / pos) if pos else float("nan")
    spec = float((~t & ~e).sum() / neg) if neg else float("nan")
    return sens, spec


def auc(labels: ArrayLike, probs: ArrayLike) -> float:
    """Fraction of (negative, positive) pairs whose scores are strictly ordered.

    Tied scores count as incorrectly ordered.

    Raises:
        UndefinedMetricError: only one class present.
    """
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(probs, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise InvalidArgumentError("labels and probabilities differ in length")
    neg = np.sort(s[~y])
    pos = s[y]
    if neg.size == 0 or pos.size == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    below = np.searchsorted(neg, pos, side="left")
    return float(below.sum() / (neg.size * pos.size))


def graph_auc(truth: ArrayLike, prob: ArrayLike) -> float:
    """AUC over the upper-triangular variable pairs of one individual."""
    t = np.asarray(truth)
    iu = np.triu_indices(t.shape[0], 1)
    return auc(t[iu], np.asarray(prob)[iu])


def greedy_sort_covariates(covariates: ArrayLike) -> NDArray[np.int64]:
    """Nearest-neighbour chain starting from the first individual.

    Returns ``order`` with ``order[t]`` the index of the individual sorted to
    position ``t``; ties go to the lowest original index.
    """
    z = np.asarray(covariates, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n < 1:
        raise InvalidArgumentError("need at least one individual")
    remaining = np.ones(n, dtype=bool)
    order = [0]
    remaining[0] = False
    for _ in range(1, n):
        d = np.sum((z - z[order[-1]]) ** 2, axis=1)
        d[~remaining] = np.inf
        nxt = int(np.argmin(d))
        order.append(nxt)
        remaining[nxt] = False
    return np.asarray(order, dtype=np.int64)


def time_index(order: ArrayLike) -> NDArray[np.int64]:
    """1-based position of each individual in a greedy ordering."""
    order = np.asarray(order)
    v = np.empty_like(order)
    v[order] = np.arange(1, order.size + 1)
    return v


@dataclass
class MetricReport:
    sensitivity: float
    specificity: float
    auc: float | None
    per_individual: list[dict]


def evaluate(truths: ArrayLike, adjacencies: ArrayLike, probs: ArrayLike | None = None) -> MetricReport:
    """Per-individual metrics and their means (NaN entries are skipped in the means)."""
    truths = np.asarray(truths)
    adjacencies = np.asarray(adjacencies)
    rows = []
    for i, (t, a) in enumerate(zip(truths, adjacencies)):
        sens, spec = sensitivity_specificity(t, a)
        row = {"individual": i, "sensitivity": sens, "specificity": spec, "auc": float("nan")}
        if probs is not None:
            try:
                row["auc"] = graph_auc(t, np.nan_to_num(np.asarray(probs[i]), nan=0.0))
            except UndefinedMetricError:
                pass
        rows.append(row)

    def mean(key):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")

    return MetricReport(
        sensitivity=mean("sensitivity"),
        specificity=mean("specificity"),
        auc=mean("auc") if probs is not None else None,
        per_individual=rows,
    )
