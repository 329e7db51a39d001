"""Multi-objective search over architectures.

All objectives are minimized. With the default two objectives an entry's
vector is (normalized energy, -normalized proxy score). Gradients over the
discrete space are local ridge fits in embedding space; the search direction
at each front entry is the weighted min-norm combination of those gradients.
"""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

NEIGHBORS = 15
RIDGE = 1e-3
FW_MAX_ITER = 200
FW_TOL = 1e-8
FRONT_HEADER = ("iteration", "arch_id", "energy_mJ", "energy_norm", "score_raw", "score_norm", "provenance")


class OracleError(RuntimeError):
    """A predict/measure oracle failed; the iteration was not applied."""


# ---------------------------------------------------------------------------
# normalization and dominance
# ---------------------------------------------------------------------------

def normalize_energy(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("normalize_energy needs at least one value")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _log_scores(values) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v) & (v > 0)
    out = np.full(v.shape, np.nan)
    out[ok] = np.log(v[ok])
    return out, ok


def score_floor(values: Sequence[float]) -> float:
    """Value assigned to non-positive or non-finite scores: one below the
    lowest finite log-score (or -1 if there is none)."""
    logs, ok = _log_scores(values)
    return float(logs[ok].min() - 1.0) if ok.any() else -1.0


def normalize_score(values: Sequence[float], floor: float | None = None) -> np.ndarray:
    logs, ok = _log_scores(values)
    if floor is None:
        floor = score_floor(values)
    logs[~ok] = floor
    return logs


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("objective vectors differ in length")
    return bool(np.all(a <= b) and np.any(a < b))


def nondominated_mask(points: np.ndarray) -> np.ndarray:
    """Boolean mask of non-dominated rows (minimization)."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=bool)
    if pts.shape[1] == 2:
        return _mask_2d(pts)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        le = np.all(pts <= pts[i], axis=1)
        lt = np.any(pts < pts[i], axis=1)
        keep[i] = not np.any(le & lt)
    return keep


def _mask_2d(pts: np.ndarray) -> np.ndarray:
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    keep = np.zeros(len(pts), dtype=bool)
    best = math.inf  # lowest f2 among points with strictly smaller f1
    i = 0
    while i < len(order):
        j = i
        f1 = pts[order[i], 0]
        while j < len(order) and pts[order[j], 0] == f1:
            j += 1
        group = order[i:j]
        low = pts[group[0], 1]  # group is sorted by f2
        if low < best:
            keep[group[pts[group, 1] == low]] = True
            best = low
        i = j
    return keep


@dataclass(eq=False)
class FrontEntry:
    arch_id: str
    embedding: np.ndarray
    objectives: tuple[float, ...]
    provenance: str = "measured"  # predicted | measured
    energy_mJ: float = math.nan
    score_raw: float = math.nan
    accuracy: float | None = None

    def __post_init__(self):
        if self.provenance not in ("predicted", "measured"):
            raise ValueError(f"bad provenance {self.provenance!r}")
        self.objectives = tuple(float(x) for x in self.objectives)
        if not all(math.isfinite(x) for x in self.objectives):
            raise ValueError(f"non-finite objectives for {self.arch_id}")


@dataclass
class ParetoFront:
    entries: list[FrontEntry]

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.arch_id for e in self.entries]

    def objectives(self) -> np.ndarray:
        return np.array([e.objectives for e in self.entries], dtype=float).reshape(len(self.entries), -1)


def pareto_front(points: Sequence[FrontEntry]) -> ParetoFront:
    points = list(points)
    if not points:
        return ParetoFront([])
    mask = nondominated_mask(np.array([p.objectives for p in points]))
    kept = [p for p, k in zip(points, mask) if k]
    kept.sort(key=lambda p: (p.objectives[0], p.arch_id))
    return ParetoFront(kept)


def hypervolume_2d(points: np.ndarray, ref: Sequence[float]) -> float:
    """Area dominated by ``points`` and bounded by ``ref`` (minimization)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    r1, r2 = float(ref[0]), float(ref[1])
    pts = pts[(pts[:, 0] < r1) & (pts[:, 1] < r2)]
    if not len(pts):
        return 0.0
    pts = pts[nondominated_mask(pts)]
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    # exact rational sum, so adding a point can never lower the result by rounding
    xs = [Fraction(float(v)) for v in pts[:, 0]] + [Fraction(r1)]
    area = Fraction(0)
    for k, f2 in enumerate(pts[:, 1]):
        area += (xs[k + 1] - xs[k]) * (Fraction(r2) - Fraction(float(f2)))
    return float(area)


# ---------------------------------------------------------------------------
# gradients and min-norm direction
# ---------------------------------------------------------------------------

@dataclass
class GradientEstimate:
    g: np.ndarray  # (m, D)
    anchor: str
    neighbor_count: int


def nearest_neighbors(anchor: FrontEntry, pool: Sequence[FrontEntry], k: int = NEIGHBORS) -> list[FrontEntry]:
    others = [p for p in pool if p.arch_id != anchor.arch_id]
    if not others:
        return []
    d = np.sum((np.array([p.embedding for p in others]) - anchor.embedding) ** 2, axis=1)
    order = sorted(range(len(others)), key=lambda i: (d[i], others[i].arch_id))
    return [others[i] for i in order[:k]]


def _ridge_slopes(x: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    n, dim = x.shape
    if n < dim:
        # dual form, same solution as the primal ridge problem
        g = x.T @ np.linalg.solve(x @ x.T + ridge * np.eye(n), y)
    else:
        g = np.linalg.solve(x.T @ x + ridge * np.eye(dim), x.T @ y)
    return g.T.copy()


def estimate_gradients(anchor: FrontEntry, neighbors: Sequence[FrontEntry], ridge: float = RIDGE) -> GradientEstimate:
    """Ridge least-squares slope of each objective against embedding displacement."""
    if len(neighbors) < 3:
        raise ValueError("insufficient neighborhood")
    x = np.array([n.embedding - anchor.embedding for n in neighbors], dtype=float)
    y = np.array([n.objectives for n in neighbors], dtype=float) - np.asarray(anchor.objectives)
    return GradientEstimate(_ridge_slopes(x, y, ridge), anchor.arch_id, len(neighbors))


@dataclass
class MinNormResult:
    lam: np.ndarray  # raw simplex weights
    lam_tilde: np.ndarray  # after ws scaling
    g_star: np.ndarray
    converged: bool
    iterations: int


def min_norm_weights(g: np.ndarray, max_iter: int = FW_MAX_ITER, tol: float = FW_TOL) -> tuple[np.ndarray, int]:
    """Away-step Frank-Wolfe for min ||lam @ g|| over the simplex.

    Away steps shrink weight on the worst active vertex, which avoids the
    zig-zagging of plain Frank-Wolfe when the optimum lies on a face.
    """
    g = np.atleast_2d(np.asarray(g, dtype=float))
    m = g.shape[0]
    gram = g @ g.T
    lam = np.full(m, 1.0 / m)
    it = 0
    for it in range(1, max_iter + 1):
        grad = gram @ lam
        t = int(np.argmin(grad))
        gap = float(lam @ grad - grad[t])
        if gap <= tol:
            break
        active = np.flatnonzero(lam > 0)
        a = int(active[np.argmax(grad[active])])
        away_gain = float(grad[a] - lam @ grad)
        if gap >= away_gain or lam[a] >= 1.0:
            d = -lam.copy()
            d[t] += 1.0
            gamma_max = 1.0
        else:
            d = lam.copy()
            d[a] -= 1.0
            gamma_max = lam[a] / (1.0 - lam[a])
        curv = float(d @ gram @ d)
        if curv <= 0:
            break
        gamma = min(max(-float(d @ grad) / curv, 0.0), gamma_max)
        lam = lam + gamma * d
        lam[np.abs(lam) < 1e-15] = 0.0
        lam = np.maximum(lam, 0.0)
        lam /= lam.sum()
    return lam, it


def closed_form_two(g1: np.ndarray, g2: np.ndarray) -> float:
    """Weight on g1 minimizing ||a g1 + (1-a) g2||."""
    diff = np.asarray(g1, float) - np.asarray(g2, float)
    den = float(diff @ diff)
    if den == 0:
        return 0.5
    return float(np.clip(((np.asarray(g2) - np.asarray(g1)) @ np.asarray(g2)) / den, 0.0, 1.0))


def min_norm_direction(g: GradientEstimate | np.ndarray, ws: Sequence[float] | None = None) -> MinNormResult:
    rows = np.atleast_2d(np.asarray(getattr(g, "g", g), dtype=float))
    m = rows.shape[0]
    ws = np.ones(m) if ws is None else np.asarray(ws, dtype=float)
    if ws.shape != (m,) or np.any(ws <= 0):
        raise ValueError("ws must have one positive weight per objective")
    lam, iters = min_norm_weights(rows)
    scale = max(1.0, float(np.max(np.linalg.norm(rows, axis=1))))
    if np.linalg.norm(lam @ rows) <= 1e-9 * scale:
        return MinNormResult(lam, lam, np.zeros(rows.shape[1]), True, iters)
    lam_tilde = ws * lam / float(ws @ lam)
    return MinNormResult(lam, lam_tilde, lam_tilde @ rows, False, iters)


# ---------------------------------------------------------------------------
# candidate ranking and selection
# ---------------------------------------------------------------------------

ANCHOR_RULE = "max"


def alignment_scores(
    candidates: np.ndarray, anchors: np.ndarray, directions: np.ndarray, rule: str | None = None
) -> np.ndarray:
    """Per candidate, max over anchors of <c - a, -g*> / ||c - a||.

    Zero displacements are skipped; a candidate with no usable anchor scores -inf.
    """
    cands = np.asarray(candidates, dtype=float)
    rule = rule or ANCHOR_RULE
    if rule == "nearest":
        anchors = np.asarray(anchors, float)
        d = ((cands[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
        near = np.argmin(d, axis=1)
        disp = cands - anchors[near]
        norm = np.linalg.norm(disp, axis=1)
        ok = norm > 0
        s = np.full(len(cands), -np.inf)
        g = np.asarray(directions, float)[near]
        s[ok] = np.einsum("ij,ij->i", disp[ok], -g[ok]) / norm[ok]
        return s
    best = np.full(len(cands), -np.inf)
    for a, g in zip(np.asarray(anchors, float), np.asarray(directions, float)):
        disp = cands - a
        norm = np.linalg.norm(disp, axis=1)
        ok = np.any(disp != 0, axis=1)
        s = np.full(len(cands), -np.inf)
        s[ok] = (disp[ok] @ -g) / norm[ok]
        best = np.maximum(best, s)
    return best


def rank_candidates(
    candidates: Sequence[FrontEntry],
    anchors: Sequence[FrontEntry],
    directions: Sequence[np.ndarray],
    n_batch: int,
) -> list[str]:
    if not candidates:
        raise ValueError("empty candidate pool")
    if not anchors:
        scores = np.zeros(len(candidates))
    else:
        scores = alignment_scores(
            np.array([c.embedding for c in candidates]),
            np.array([a.embedding for a in anchors]),
            np.array(directions),
        )
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].arch_id))
    order = [i for i in order if np.isfinite(scores[i])] or order
    return [candidates[i].arch_id for i in order[:n_batch]]


def select_best(
    front: ParetoFront | Sequence[FrontEntry],
    wd: Sequence[float],
    gradients: Mapping[str, GradientEstimate],
) -> str:
    """Front entry with the smallest weighted gradient norm ||sum_i wd_i g_i||."""
    entries = list(getattr(front, "entries", front))
    if not entries:
        raise ValueError("empty front")
    if len(entries) == 1:
        return entries[0].arch_id
    wd = np.asarray(wd, dtype=float)
    if np.any(wd < 0):
        raise ValueError("wd must be non-negative")
    scored = []
    for e in entries:
        est = gradients.get(e.arch_id)
        if est is None:
            continue
        scored.append((float(np.linalg.norm(wd @ est.g)), e.arch_id))
    if not scored:
        raise ValueError("no gradient estimates for front entries")
    return min(scored)[1]


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    energy_mJ: float
    score_raw: float
    accuracy: float | None = None


@dataclass(frozen=True)
class Normalizer:
    energy_lo: float
    energy_hi: float
    score_floor: float

    @classmethod
    def fit(cls, energies: Sequence[float], scores: Sequence[float]) -> "Normalizer":
        e = np.asarray(energies, dtype=float)
        return cls(float(e.min()), float(e.max()), score_floor(scores))

    def energy(self, e: float) -> float:
        span = self.energy_hi - self.energy_lo
        return 0.0 if span == 0 else (e - self.energy_lo) / span

    def score(self, s: float) -> float:
        return float(normalize_score([s], self.score_floor)[0])

    def objectives(self, obs: Observation) -> tuple[float, float]:
        return (self.energy(obs.energy_mJ), -self.score(obs.score_raw))


@dataclass(frozen=True)
class Constraints:
    max_energy_mJ: float | None = None
    min_accuracy: float | None = None

    @property
    def empty(self) -> bool:
        return self.max_energy_mJ is None and self.min_accuracy is None

    def satisfied_by(self, e: FrontEntry) -> bool:
        if self.empty:
            return False
        if self.max_energy_mJ is not None and not e.energy_mJ <= self.max_energy_mJ:
            return False
        if self.min_accuracy is not None and (e.accuracy is None or e.accuracy < self.min_accuracy):
            return False
        return True


@dataclass
class SearchState:
    front: ParetoFront
    evaluated: dict[str, FrontEntry]
    iteration: int
    ws: tuple[float, ...]
    wd: tuple[float, ...]
    normalizer: Normalizer
    hv_ref: tuple[float, float]
    pool: dict[str, np.ndarray] = field(repr=False, default_factory=dict)  # arch_id -> embedding
    predictions: dict[str, Observation] = field(repr=False, default_factory=dict)
    gradient_source: str = "measured"  # or "predicted": whole pool, measured values where known
    n_init: int = 100
    n_batch: int = 10
    constraints: Constraints = Constraints()
    max_iterations: int = 10
    neighbors: int = NEIGHBORS
    ridge: float = RIDGE
    hv_history: list[float] = field(default_factory=list)
    batches: list[list[str]] = field(default_factory=list)

    def hypervolume(self) -> float:
        return hypervolume_2d(self.front.objectives(), self.hv_ref)

    def constraints_met(self) -> bool:
        return any(self.constraints.satisfied_by(e) for e in self.front.entries)

    def should_continue(self) -> bool:
        return self.iteration < self.max_iterations and not self.constraints_met()


def make_entry(arch_id: str, emb: np.ndarray, obs: Observation, norm: Normalizer, provenance="measured") -> FrontEntry:
    return FrontEntry(arch_id, emb, norm.objectives(obs), provenance, obs.energy_mJ, obs.score_raw, obs.accuracy)


def _measure_all(ids: Sequence[str], measure_oracle: Callable[[str], Observation]) -> list[Observation]:
    out = []
    for i in ids:
        try:
            out.append(measure_oracle(i))
        except Exception as exc:  # surfaced as one error type for the caller
            raise OracleError(f"measurement of {i} failed: {exc}") from exc
    return out


def init_search(
    pool: Mapping[str, np.ndarray],
    predictions: Mapping[str, Observation],
    measure_oracle: Callable[[str], Observation],
    seed: int,
    n_init: int = 100,
    n_batch: int = 10,
    ws: Sequence[float] = (3.0, 1.0),
    wd: Sequence[float] = (1.0, 1.0),
    constraints: Constraints = Constraints(),
    max_iterations: int = 10,
    strata: int = 4,
    gradient_source: str = "measured",
) -> SearchState:
    """Normalize on predictions, measure ``n_init`` models drawn across
    predicted-energy quartiles, and build the first front."""
    ids = sorted(pool)
    if n_init > len(ids):
        raise ValueError(f"n_init {n_init} exceeds pool size {len(ids)}")
    norm = Normalizer.fit([predictions[i].energy_mJ for i in ids], [predictions[i].score_raw for i in ids])
    pred_obj = np.array([norm.objectives(predictions[i]) for i in ids])
    hv_ref = (1.1, float(pred_obj[:, 1].max()) + 0.1)

    rng = np.random.default_rng(seed)
    energies = np.array([predictions[i].energy_mJ for i in ids])
    order = np.argsort(energies, kind="stable")
    bucket_of = np.empty(len(ids), dtype=int)
    bucket_of[order] = (np.arange(len(ids)) * strata) // len(ids)
    chosen: list[str] = []
    for b, k in enumerate(n_init // strata + (1 if b < n_init % strata else 0) for b in range(strata)):
        members = np.flatnonzero(bucket_of == b)
        chosen.extend(ids[i] for i in rng.choice(members, size=min(k, len(members)), replace=False))
    if len(chosen) < n_init:
        rest = sorted(set(ids) - set(chosen))
        chosen.extend(rng.choice(rest, size=n_init - len(chosen), replace=False).tolist())
    chosen = sorted(chosen)

    obs = _measure_all(chosen, measure_oracle)
    evaluated = {i: make_entry(i, pool[i], o, norm) for i, o in zip(chosen, obs)}
    state = SearchState(
        front=pareto_front(evaluated.values()),
        evaluated=evaluated,
        iteration=0,
        ws=tuple(float(x) for x in ws),
        wd=tuple(float(x) for x in wd),
        normalizer=norm,
        hv_ref=hv_ref,
        pool=dict(pool),
        predictions=dict(predictions),
        gradient_source=gradient_source,
        n_init=n_init,
        n_batch=n_batch,
        constraints=constraints,
        max_iterations=max_iterations,
        batches=[chosen],
    )
    state.hv_history.append(state.hypervolume())
    return state


def neighbor_table(state: SearchState, source: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(ids, embeddings, objectives) that gradients are fitted on: measured
    entries only, or the whole pool with measured values overriding predictions."""
    if source == "measured":
        ids = sorted(state.evaluated)
        objs = [state.evaluated[i].objectives for i in ids]
    elif source == "predicted":
        ids = sorted(state.pool)
        objs = [
            state.evaluated[i].objectives if i in state.evaluated else state.normalizer.objectives(state.predictions[i])
            for i in ids
        ]
    else:
        raise ValueError(f"unknown gradient source {source!r}")
    emb = np.array([state.pool[i] for i in ids], dtype=float)
    return ids, emb, np.array(objs, dtype=float).reshape(len(ids), -1)


def front_gradients(
    state: SearchState, entries: Sequence[FrontEntry] | None = None, source: str = "measured"
) -> dict[str, GradientEstimate]:
    """Gradient estimates at each front entry from its nearest neighbors
    (measured neighbors by default). Entries with < 3 neighbors are skipped."""
    ids, emb, objs = neighbor_table(state, source)
    out = {}
    for e in entries if entries is not None else state.front.entries:
        d = np.sum((emb - e.embedding) ** 2, axis=1)
        order = [k for k in np.argsort(d, kind="stable") if ids[k] != e.arch_id][: state.neighbors]
        if len(order) < 3:
            continue
        x = emb[order] - e.embedding
        y = objs[order] - np.asarray(e.objectives)
        out[e.arch_id] = GradientEstimate(_ridge_slopes(x, y, state.ridge), e.arch_id, len(order))
    return out


def search_directions(state: SearchState) -> dict[str, MinNormResult]:
    grads = front_gradients(state, source=state.gradient_source)
    return {k: min_norm_direction(g, state.ws) for k, g in grads.items()}


def refresh_predictions(state: SearchState, predictions: Mapping[str, Observation]) -> SearchState:
    """Swap in new pool predictions; normalization stays fixed."""
    return replace(state, predictions=dict(predictions))


def search_iteration(
    state: SearchState,
    measure_oracle: Callable[[str], Observation],
) -> SearchState:
    """One refinement step; returns a new state and leaves ``state`` untouched."""
    remaining = [i for i in sorted(state.pool) if i not in state.evaluated]
    if not remaining:
        raise ValueError("candidate pool exhausted")
    dirs = search_directions(state)
    anchors = [e for e in state.front.entries if e.arch_id in dirs]
    # candidates carry placeholder objectives; ranking only uses embeddings
    cands = [FrontEntry(i, state.pool[i], (0.0, 0.0), "predicted") for i in remaining]
    picked = rank_candidates(cands, anchors, [dirs[a.arch_id].g_star for a in anchors], state.n_batch)
    obs = _measure_all(picked, measure_oracle)

    evaluated = dict(state.evaluated)
    for i, o in zip(picked, obs):
        evaluated[i] = make_entry(i, state.pool[i], o, state.normalizer)
    new = replace(
        state,
        evaluated=evaluated,
        front=pareto_front(evaluated.values()),
        iteration=state.iteration + 1,
        hv_history=list(state.hv_history),
        batches=state.batches + [picked],
    )
    new.hv_history.append(new.hypervolume())
    return new


def run_search(
    state: SearchState,
    measure_oracle: Callable[[str], Observation],
    on_iteration: Callable[[SearchState], None] | None = None,
) -> tuple[SearchState, str]:
    """Iterate until a front entry meets the constraints or the iteration
    budget is spent. Status: constraints_met | budget_exhausted | completed."""
    while state.should_continue():
        if len(state.evaluated) >= len(state.pool):
            break
        state = search_iteration(state, measure_oracle)
        if on_iteration:
            on_iteration(state)
    if state.constraints_met():
        return state, "constraints_met"
    if state.constraints.empty:
        return state, "completed"
    return state, "budget_exhausted"


def best_models(state: SearchState, wd_sets: Mapping[str, Sequence[float]]) -> dict[str, str]:
    grads = front_gradients(state)
    return {name: select_best(state.front, wd, grads) for name, wd in wd_sets.items()}


def front_rows(state: SearchState, iteration: int | None = None) -> list[tuple]:
    it = state.iteration if iteration is None else iteration
    rows = []
    for e in state.front.entries:
        rows.append(
            (it, e.arch_id, repr(float(e.energy_mJ)), repr(e.objectives[0]), repr(float(e.score_raw)), repr(-e.objectives[1]), e.provenance)
        )
    return rows


def write_front_csv(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRONT_HEADER)
        w.writerows(rows)
