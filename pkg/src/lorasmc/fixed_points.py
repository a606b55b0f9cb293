"""Fixed points of the deterministic low-rank piecewise-linear dynamics.

Continuous-time form tau dz/dt = -z + N^T phi(M z [+ H s]).  Units with a
D-term activation are expanded to N*D relu units; each activation pattern
d in {0,1}^{ND} fixes a linear system whose solution is a fixed point if it
is consistent with d.  Only regions of the hyperplane arrangement
{m_i^T z = h_i} can host fixed points, and those are enumerated from the
intersection points of R-subsets of hyperplanes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ShapeError
from .model import COND_LIMIT, LowRankRNN, PiecewiseLinearSpec, activation_eval

BOUNDARY_TOL = 1e-9
MERGE_RADIUS = 1e-6
BRUTE_FORCE_MAX_UNITS = 20


@dataclass(frozen=True)
class ExpandedNet:
    M: np.ndarray       # (ND, R)
    N: np.ndarray       # (ND, R), rows scaled by slopes
    h: np.ndarray       # (ND,)
    family: np.ndarray  # (ND,) originating unit


class Degenerate:
    """Returned by solve_region when the region's linear system is singular."""

    def __init__(self, cond):
        self.cond = cond

    def __repr__(self):
        return f"Degenerate(cond={self.cond:.3g})"

    def __bool__(self):
        return False


def expand_basis(M, N_cont, spec: PiecewiseLinearSpec, s_shift=None) -> ExpandedNet:
    """Row (i, d) -> unit-major index i*D + d.

    ``s_shift`` (length N) is a constant input H s folded into the
    thresholds: phi(m z + (Hs)_i) has kinks at m z = h - (Hs)_i.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Nc = np.atleast_2d(np.asarray(N_cont, dtype=float))
    n, D = spec.slopes.shape
    if M.shape[0] != n or Nc.shape != M.shape:
        raise ShapeError("M, N and the activation must agree on the unit count")
    th = spec.thresholds if s_shift is None else spec.thresholds - np.asarray(s_shift, float)[:, None]
    return ExpandedNet(
        M=np.repeat(M, D, axis=0),
        N=(Nc[:, None, :] * spec.slopes[:, :, None]).reshape(n * D, -1),
        h=th.reshape(-1).copy(),
        family=np.repeat(np.arange(n), D),
    )


def vector_field(M, N_cont, spec, z, s_shift=None):
    """f(z) = -z + N^T phi(M z + s_shift)."""
    z = np.asarray(z, dtype=float)
    pre = z @ np.asarray(M).T
    if s_shift is not None:
        pre = pre + s_shift
    return -z + activation_eval(spec, pre) @ np.asarray(N_cont)


def vector_field_expanded(ex: ExpandedNet, z):
    z = np.asarray(z, dtype=float)
    return -z + np.maximum(z @ ex.M.T - ex.h, 0.0) @ ex.N


def _region_system(Nmat, M, h, d):
    Nd = Nmat * np.asarray(d, dtype=float)[..., :, None]
    A = np.swapaxes(Nd, -1, -2) @ M - np.eye(M.shape[1])
    b = np.einsum("...ir,i->...r", Nd, h)
    return A, b


def solve_region(Nmat, M, h, region):
    """z* = (N^T D M - I)^-1 N^T D h, or Degenerate."""
    A, b = _region_system(np.asarray(Nmat, float), np.asarray(M, float), np.asarray(h, float), region)
    c = np.linalg.cond(A)
    if not np.isfinite(c) or c > COND_LIMIT:
        return Degenerate(c)
    return np.linalg.solve(A, b)


def _consistency(M, h, d, z, tol=BOUNDARY_TOL):
    """(consistent, on_boundary) for one or many z (last axis R)."""
    s = np.asarray(z, float) @ np.asarray(M, float).T - h
    d = np.asarray(d).astype(bool)
    band = np.abs(s) <= tol
    ok = np.all(((s > 0) == d) | band, axis=-1)
    return ok, np.any(band, axis=-1)


def consistency_check(M, h, region, z, tol=BOUNDARY_TOL):
    ok, _ = _consistency(M, h, region, z, tol)
    return bool(ok)


def region_bound(N, R, D=1):
    return sum(D ** r * math.comb(N, r) for r in range(R + 1))


# ----------------------------------------------------------------------
# region enumeration
# ----------------------------------------------------------------------

def _distinct_family_subsets(rows, family, r):
    for c in itertools.combinations(rows, r):
        if len({family[i] for i in c}) == r:
            yield c


def _sign_feasible(Mi, signs):
    """Is there u with signs_i * m_i . u >= 1 for all incident rows?"""
    A = -(signs[:, None] * Mi)
    res = linprog(np.zeros(Mi.shape[1]), A_ub=A, b_ub=-np.ones(len(signs)),
                  bounds=[(None, None)] * Mi.shape[1], method="highs")
    return res.status == 0


def _local_patterns(Mi, cache):
    """All realisable on/off patterns of hyperplanes through one point."""
    key = Mi.tobytes()
    if key in cache:
        return cache[key]
    k = Mi.shape[0]
    pats = np.array(list(itertools.product((0, 1), repeat=k)), dtype=np.uint8)
    if np.linalg.matrix_rank(Mi) == k:
        out = pats
    else:
        out = np.array([p for p in pats if _sign_feasible(Mi, 2.0 * p - 1.0)], dtype=np.uint8)
    cache[key] = out
    return out


def candidate_regions(M, h, family=None, tol=1e-9):
    """All activation patterns of regions of the arrangement {m_i z = h_i}.

    Returns a (n_regions, P) uint8 array of unique rows in lexicographic
    order.  Rows of one parallel family share ``family`` and are never
    intersected with each other.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    P, R = M.shape
    family = np.arange(P) if family is None else np.asarray(family)
    norms = np.linalg.norm(M, axis=1)
    zero = norms <= 1e-14 * max(1.0, norms.max(initial=0.0))
    live = np.flatnonzero(~zero)
    fixed = np.zeros(P, dtype=np.uint8)
    fixed[zero] = (h[zero] < 0).astype(np.uint8)
    if live.size == 0:
        return fixed[None, :].copy()

    Ml = M[live]
    scale = tol * np.maximum(1.0, np.abs(h[live]) + norms[live])
    fam = family[live]

    def patterns_at(points, chosen=None):
        """Patterns for points p (n, R); chosen are subset rows known incident."""
        s = points @ Ml.T - h[live]
        inc = np.abs(s) <= scale
        if chosen is not None:
            inc[np.arange(len(points))[:, None], chosen] = True
        base = (s > 0).astype(np.uint8)
        out = []
        n_inc = inc.sum(1)
        simple = (n_inc == (R if chosen is not None else -1))
        if chosen is not None and np.any(simple):
            idx = np.flatnonzero(simple)
            togg = np.array(list(itertools.product((0, 1), repeat=R)), dtype=np.uint8)
            b = np.repeat(base[idx], len(togg), axis=0)
            rows = np.repeat(idx, len(togg))
            b[np.arange(len(rows))[:, None], chosen[rows]] = np.tile(togg, (len(idx), 1))
            out.append(b)
        cache = {}
        for j in np.flatnonzero(~simple):
            I = np.flatnonzero(inc[j])
            loc = _local_patterns(Ml[I], cache)
            b = np.repeat(base[j][None], len(loc), axis=0)
            b[:, I] = loc
            out.append(b)
        return out

    blocks = []
    subsets = np.array(list(_distinct_family_subsets(range(live.size), fam, R)), dtype=int).reshape(-1, R)
    degenerate = np.linalg.matrix_rank(Ml) < R
    if len(subsets):
        Ms = Ml[subsets]
        conds = np.linalg.cond(Ms) if len(Ms) else np.zeros(0)
        good = np.isfinite(conds) & (conds <= COND_LIMIT)
        degenerate |= not np.all(good)
        if np.any(good):
            pts = np.linalg.solve(Ms[good], h[live][subsets[good]][..., None])[..., 0]
            blocks += patterns_at(pts, subsets[good])
    if degenerate:
        # flats of lower dimension: every independent r-subset, r < R,
        # contributes the point of its flat nearest the origin
        for r in range(1, R):
            subs = np.array(list(_distinct_family_subsets(range(live.size), fam, r)), dtype=int).reshape(-1, r)
            if not len(subs):
                continue
            Ms = Ml[subs]
            sv = np.linalg.svd(Ms, compute_uv=False)
            ok = sv[:, -1] > sv[:, 0] * 1e-12
            if not np.any(ok):
                continue
            pts = (np.linalg.pinv(Ms[ok]) @ h[live][subs[ok]][..., None])[..., 0]
            blocks += patterns_at(pts)
    if not blocks:
        # no hyperplanes meet: a single region around the origin-side
        blocks += patterns_at(np.zeros((1, R)))
    pats = np.unique(np.concatenate(blocks), axis=0)
    full = np.repeat(fixed[None], len(pats), axis=0)
    full[:, live] = pats
    return np.unique(full, axis=0)


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

@dataclass
class FixedPoint:
    z: np.ndarray
    region: np.ndarray
    jacobian: np.ndarray
    eigenvalues: np.ndarray
    stability: str
    boundary: bool = False


@dataclass
class FixedPointReport:
    points: list
    regions_examined: int
    bound: int
    degenerate_regions: list = field(default_factory=list)
    n_solves: int = 0
    rank_deficient: bool = False
    method: str = "exact"
    dim: int = 0

    def zs(self):
        R = self.points[0].z.size if self.points else self.dim
        return np.array([p.z for p in self.points], dtype=float).reshape(-1, R)

    def counts(self):
        out = {}
        for p in self.points:
            out[p.stability] = out.get(p.stability, 0) + 1
        return out

    def to_dict(self):
        return {
            "method": self.method,
            "regions_examined": int(self.regions_examined),
            "bound": int(self.bound),
            "n_solves": int(self.n_solves),
            "rank_deficient": bool(self.rank_deficient),
            "dim": int(self.dim),
            "degenerate_regions": [r.astype(int).tolist() for r in self.degenerate_regions],
            "points": [{
                "z": p.z.tolist(),
                "region": p.region.astype(int).tolist(),
                "jacobian": p.jacobian.tolist(),
                "eigenvalues_re": np.real(p.eigenvalues).tolist(),
                "eigenvalues_im": np.imag(p.eigenvalues).tolist(),
                "stability": p.stability,
                "boundary": bool(p.boundary),
            } for p in self.points],
        }

    def rows(self):
        """Tidy rows (one per point) for plotting."""
        out = []
        for i, p in enumerate(self.points):
            row = {"index": i, "stability": p.stability, "boundary": int(p.boundary)}
            row.update({f"z{r}": float(v) for r, v in enumerate(p.z)})
            row.update({f"eig{r}_re": float(np.real(v)) for r, v in enumerate(p.eigenvalues)})
            row.update({f"eig{r}_im": float(np.imag(v)) for r, v in enumerate(p.eigenvalues)})
            out.append(row)
        return out


def classify(eigs, tol=1e-9):
    re = np.real(eigs)
    if np.any(np.abs(re) <= tol):
        return "marginal"
    if np.all(re < 0):
        return "stable"
    if np.all(re > 0):
        return "unstable"
    return "saddle"


def _continuous_params(model: LowRankRNN, s=None):
    if model.a >= 1.0:
        raise ValueError("a = 1 (no leak) has no fixed-point analysis")
    shift = None
    if model.H is not None:
        s = np.zeros(model.H.shape[1]) if s is None else np.asarray(s, dtype=float)
        shift = model.H @ s
    elif s is not None:
        raise ShapeError("stimulus given but model has no input weights")
    return model.M, model.N_cont, model.activation, shift


def _solve_patterns(ex: ExpandedNet, pats, tol):
    """Solve every pattern; returns list of FixedPoint, degenerate list, n_solves."""
    R = ex.M.shape[1]
    pts, degen = [], []
    chunk = 4096
    for i0 in range(0, len(pats), chunk):
        d = pats[i0:i0 + chunk].astype(float)
        A, b = _region_system(ex.N, ex.M, ex.h, d)
        conds = np.linalg.cond(A)
        good = np.isfinite(conds) & (conds <= COND_LIMIT)
        for j in np.flatnonzero(~good):
            degen.append(pats[i0 + j].copy())
        if not np.any(good):
            continue
        z = np.linalg.solve(A[good], b[good][..., None])[..., 0]
        ok, bd = _consistency(ex.M, ex.h, d[good], z)
        for j in np.flatnonzero(ok):
            gi = np.flatnonzero(good)[j]
            reg = pats[i0 + gi].copy()
            J = A[good][j]
            pts.append((z[j], reg, J, bool(bd[j])))
    out = []
    for z, reg, J, bd in pts:
        res = np.max(np.abs(vector_field_expanded(ex, z)))
        if res >= tol * max(1.0, np.abs(z).max()):
            continue
        eig = np.linalg.eigvals(J)
        out.append(FixedPoint(z, reg, J, eig, classify(eig), bd))
    return out, degen, len(pats)


def _dedupe(points):
    points = sorted(points, key=lambda p: tuple(p.region.tolist()))
    kept = []
    for p in points:
        if any(np.linalg.norm(p.z - q.z) < MERGE_RADIUS for q in kept):
            continue
        kept.append(p)
    return kept


def find_all_fixed_points(model: LowRankRNN, tol=1e-8, s=None) -> FixedPointReport:
    """Exact enumeration over the candidate regions of the arrangement."""
    M, Nc, act, shift = _continuous_params(model, s)
    ex = expand_basis(M, Nc, act, shift)
    pats = candidate_regions(ex.M, ex.h, ex.family)
    pts, degen, n = _solve_patterns(ex, pats, tol)
    R = M.shape[1]
    return FixedPointReport(
        points=_dedupe(pts), regions_examined=len(pats),
        bound=region_bound(model.N, R, act.D), degenerate_regions=degen, n_solves=n,
        rank_deficient=bool(np.linalg.matrix_rank(M) < R), method="exact", dim=R)


def brute_force_fixed_points(model: LowRankRNN, tol=1e-8, s=None) -> FixedPointReport:
    """Every one of the 2^{ND} patterns (oracle; ND <= 20)."""
    M, Nc, act, shift = _continuous_params(model, s)
    ex = expand_basis(M, Nc, act, shift)
    P = ex.M.shape[0]
    if P > BRUTE_FORCE_MAX_UNITS:
        raise ValueError(f"brute force over 2^{P} patterns refused (N*D must be <= {BRUTE_FORCE_MAX_UNITS})")
    bits = ((np.arange(2 ** P)[:, None] >> np.arange(P - 1, -1, -1)) & 1).astype(np.uint8)
    pts, degen, n = _solve_patterns(ex, bits, tol)
    return FixedPointReport(_dedupe(pts), 2 ** P, region_bound(model.N, M.shape[1], act.D),
                            degen, n, bool(np.linalg.matrix_rank(M) < M.shape[1]), "brute_force",
                            M.shape[1])


# ----------------------------------------------------------------------
# approximate search
# ----------------------------------------------------------------------

@dataclass
class SearchResult:
    report: FixedPointReport
    n_inverses: int
    precompute_solves: int
    trace: list          # (inverses used, distinct points found) after each restart


def _uniform_init(ex: ExpandedNet, n_units, D, rng):
    # pick one of the D+1 intervals per unit: the k lowest thresholds active
    k = rng.integers(0, D + 1, n_units)
    th = ex.h.reshape(n_units, D)
    rank = np.argsort(np.argsort(th, axis=1), axis=1)
    return (rank < k[:, None]).reshape(-1).astype(np.uint8)


def approximate_search(model: LowRankRNN, max_iters=50, restarts=100, init_mode="uniform",
                       rng=None, budget=None, s=None, tol=1e-8) -> SearchResult:
    """Iterate d <- pattern(virtual fixed point of d) from random regions.

    ``budget`` caps the number of linear solves (matrix inverses); the
    constrained mode draws starting regions from candidate_regions, whose
    enumeration cost is reported separately as ``precompute_solves``.
    """
    rng = np.random.default_rng() if rng is None else rng
    M, Nc, act, shift = _continuous_params(model, s)
    ex = expand_basis(M, Nc, act, shift)
    R = M.shape[1]
    cands = None
    pre = 0
    if init_mode == "constrained":
        cands = candidate_regions(ex.M, ex.h, ex.family)
        pre = math.comb(ex.M.shape[0], R)
    elif init_mode != "uniform":
        raise ValueError(f"unknown init_mode {init_mode!r}")
    found = {}
    visited = set()       # patterns already solved in any restart
    used = 0
    trace = []
    budget = np.inf if budget is None else budget
    order = rng.permutation(len(cands)) if cands is not None else None
    r = 0
    while r < restarts and used < budget:
        if cands is not None:
            # random selection from the candidate set, without replacement
            if r and r % len(cands) == 0:
                order = rng.permutation(len(cands))
            d = cands[order[r % len(cands)]].copy()
        else:
            # redraw starts already solved; a few tries, then take the repeat
            for _ in range(32):
                d = _uniform_init(ex, act.N, act.D, rng)
                if d.tobytes() not in visited:
                    break
        for _ in range(max_iters):
            key = d.tobytes()
            if key in visited or used >= budget:
                # the rest of this path is already known
                break
            visited.add(key)
            used += 1
            z = solve_region(ex.N, ex.M, ex.h, d)
            if isinstance(z, Degenerate):
                break
            ok, bd = _consistency(ex.M, ex.h, d, z)
            if ok:
                J = _region_system(ex.N, ex.M, ex.h, d)[0]
                eig = np.linalg.eigvals(J)
                found[key] = FixedPoint(z, d.copy(), J, eig, classify(eig), bool(bd))
                break
            d = ((z @ ex.M.T - ex.h) > 0).astype(np.uint8)
        r += 1
        trace.append((used, len(found)))
    pts = _dedupe(list(found.values()))
    rep = FixedPointReport(pts, used, region_bound(model.N, R, act.D), [], used,
                           bool(np.linalg.matrix_rank(M) < R), f"approximate_{init_mode}", R)
    return SearchResult(rep, used, pre, trace)


def match_point_sets(A, B, atol=1e-8):
    """True when two (n, R) point sets agree up to ordering."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    if len(A) != len(B):
        return False
    if len(A) == 0:
        return True
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape != B.shape:
        return False
    used = np.zeros(len(B), bool)
    for a in A:
        dist = np.max(np.abs(B - a), axis=1) if len(B) else np.zeros(0)
        dist[used] = np.inf
        j = int(np.argmin(dist)) if len(dist) else -1
        if j < 0 or dist[j] > atol:
            return False
        used[j] = True
    return True
