"""Small dense semidefinite programs over complex Hermitian blocks.

Problems are posed in standard primal form::

    minimize    <C, X>
    subject to  <A_i, X> = b_i,   i = 1..m
                X = diag(X_1, ..., X_B) >= 0

with ``<A, X> = Re tr(A X)`` and every ``A_i``, ``C`` Hermitian.  The dual is
``max b.y  s.t.  Z = C - sum_i y_i A_i >= 0``.

The solver is an infeasible-start primal-dual path-following method with the
HKM search direction and Mehrotra predictor-corrector steps.  Constraint
matrices are kept sparse; the Schur complement is assembled from the
nonzeros so problems with a few thousand constraints on blocks of size ~60
stay cheap.  Infeasibility is decided by a bounded phase-I problem whose
dual supplies a Farkas-type witness.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack
import scipy.sparse as sp

from .exceptions import DimensionError, SDPError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200
STALL_ITERS = 15        # iterations without halving the best residual

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class ProblemBuilder:
    """Incrementally assemble an :class:`SDPProblem` from sparse functionals.

    A complex functional ``l(X) = tr(M X)`` is given by the nonzeros of ``M``
    as ``(block, row, col, value)`` terms; :meth:`add_complex` emits its real
    and imaginary parts as two real constraints.
    """

    def __init__(self):
        self.blocks = []
        self._rows = []   # per constraint: list of (block, r, c, v) with Hermitian A
        self._b = []
        self._obj = []

    def add_block(self, n):
        self.blocks.append(int(n))
        return len(self.blocks) - 1

    @staticmethod
    def _herm_part(terms, imag):
        out = []
        for blk, r, c, v in terms:
            if imag:
                out.append((blk, r, c, v / 2j))
                out.append((blk, c, r, -np.conj(v) / 2j))
            else:
                out.append((blk, r, c, v / 2))
                out.append((blk, c, r, np.conj(v) / 2))
        return out

    def add_real(self, terms, value):
        """Constrain ``Re tr(M X) = value``."""
        self._rows.append(self._herm_part(terms, imag=False))
        self._b.append(float(np.real(value)))

    def add_imag(self, terms, value):
        """Constrain ``Im tr(M X) = value``."""
        self._rows.append(self._herm_part(terms, imag=True))
        self._b.append(float(value))

    def add_complex(self, terms, value):
        self.add_real(terms, np.real(value))
        self.add_imag(terms, np.imag(value))

    def add_objective(self, terms):
        """Add ``Re tr(M X)`` to the (minimized) objective."""
        self._obj.extend(self._herm_part(terms, imag=False))

    @property
    def n_constraints(self):
        return len(self._b)

    def build(self, maximize=False):
        nb = len(self.blocks)
        A = []
        for k in range(nb):
            n = self.blocks[k]
            rows, cols, vals = [], [], []
            for i, terms in enumerate(self._rows):
                for blk, r, c, v in terms:
                    if blk == k:
                        rows.append(i)
                        cols.append(r * n + c)
                        vals.append(v)
            A.append(sp.csr_matrix((np.asarray(vals, dtype=complex), (rows, cols)),
                                   shape=(len(self._b), n * n)))
        C = [np.zeros((n, n), dtype=complex) for n in self.blocks]
        for blk, r, c, v in self._obj:
            C[blk][r, c] += v
        return SDPProblem(tuple(self.blocks), C, A, np.asarray(self._b, dtype=float), maximize)


@dataclass
class SDPProblem:
    """Standard-form SDP.

    ``A[k]`` is a sparse ``(m, n_k**2)`` matrix whose row ``i`` is the
    row-major vectorization of block ``k`` of the Hermitian ``A_i``.
    """

    blocks: tuple
    C: list
    A: list
    b: np.ndarray
    maximize: bool = False

    def __post_init__(self):
        if len(self.C) != len(self.blocks) or len(self.A) != len(self.blocks):
            raise DimensionError("objective/constraint blocks do not match block list")
        m = len(self.b)
        for n, c, a in zip(self.blocks, self.C, self.A):
            if c.shape != (n, n) or a.shape != (m, n * n):
                raise DimensionError("block dimension mismatch")
        if m == 0 and all(np.all(c == 0) for c in self.C):
            raise DimensionError("problem has neither constraints nor objective")

    @property
    def m(self):
        return len(self.b)

    def apply_A(self, X):
        out = np.zeros(self.m)
        for a, x in zip(self.A, X):
            out += np.real(a @ x.T.ravel())
        return out

    def apply_At(self, y):
        return [np.asarray((a.T @ y)).reshape(n, n) for a, n in zip(self.A, self.blocks)]

    def objective_value(self, X):
        return float(sum(np.real(np.sum(c * x.T)) for c, x in zip(self.C, X)))


@dataclass
class SDPSolution:
    primal: list
    dual: np.ndarray
    slack: list
    primal_objective: float
    dual_objective: float
    gap: float
    status: str
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    iterations: int = 0
    witness: dict = field(default_factory=dict)

    @property
    def min_eig(self):
        return min((float(np.linalg.eigvalsh(x)[0]) for x in self.primal if x.size), default=0.0)


def _inner(X, Z):
    return float(sum(np.real(np.sum(x * z.conj())) for x, z in zip(X, Z)))


def _herm(x):
    return (x + x.conj().T) / 2


def _max_step(X, D):
    """Largest ``a <= 1/0`` (possibly inf) keeping ``X + a D`` PSD."""
    amax = np.inf
    for x, d in zip(X, D):
        try:
            L = np.linalg.cholesky(x)
        except np.linalg.LinAlgError:
            return 0.0
        Li = sla.solve_triangular(L, np.eye(len(x)), lower=True)
        w = np.linalg.eigvalsh(_herm(Li @ d @ Li.conj().T))
        if w[0] < 0:
            amax = min(amax, -1.0 / w[0])
    return amax


class _Schur:
    """Schur complement assembly from the sparse constraint nonzeros."""

    CHUNK_BYTES = 48 * 2 ** 20

    def __init__(self, problem):
        self.p = problem
        self.parts = []
        for n, a in zip(problem.blocks, problem.A):
            coo = a.tocoo()
            order = np.lexsort((coo.col, coo.row))
            rows, cols, vals = coo.row[order], coo.col[order], coo.data[order]
            self.parts.append((n, a, rows, cols // n, cols % n, vals))

    def assemble(self, X, Zinv):
        m = self.p.m
        M = np.zeros((m, m))
        for (n, a, rows, r, s, v), x, zi in zip(self.parts, X, Zinv):
            nnz = len(v)
            if nnz == 0:
                continue
            chunk = max(1, int(self.CHUNK_BYTES // (16 * n * n)))
            start = 0
            while start < nnz:
                stop = min(nnz, start + chunk)
                # extend to a constraint boundary so each column is complete
                while stop < nnz and rows[stop] == rows[stop - 1]:
                    stop += 1
                sl = slice(start, stop)
                T = (zi[s[sl], :][:, :, None] * x[:, r[sl]].T[:, None, :]).reshape(stop - start, n * n)
                j0 = rows[start]
                j1 = rows[stop - 1] + 1
                sel = sp.csr_matrix((v[sl], (rows[sl] - j0, np.arange(stop - start))),
                                    shape=(j1 - j0, stop - start))
                W = sel @ T                      # (j1-j0, n*n): vec of W_j^T
                M[:, j0:j1] += np.real(a @ W.T)
                start = stop
        return (M + M.T) / 2


def _factor(M):
    d = np.max(np.abs(np.diag(M)), initial=1.0)
    for ridge in (0.0, 1e-14, 1e-12, 1e-10, 1e-8):
        try:
            return sla.cho_factor(M + ridge * d * np.eye(len(M)), lower=True), None
        except np.linalg.LinAlgError:
            continue
    return None, np.linalg.pinv(M, rcond=1e-13, hermitian=True)


def _solve_factored(fac, pinv, rhs):
    if fac is not None:
        return sla.cho_solve(fac, rhs)
    return pinv @ rhs


def _ipm(p, tol, max_iter):
    blocks = p.blocks
    m = p.m
    C = [_herm(c) for c in p.C]
    if p.maximize:
        C = [-c for c in C]
    bnorm = 1.0 + np.linalg.norm(p.b)
    cnorm = 1.0 + np.sqrt(sum(np.sum(np.abs(c) ** 2) for c in C))

    X, Z = [], []
    for k, n in enumerate(blocks):
        a = p.A[k]
        anorm = np.sqrt(np.asarray(abs(a).power(2).sum(axis=1)).ravel()) if m else np.zeros(0)
        xi = max(10.0, np.sqrt(n), n * np.max((1 + np.abs(p.b)) / (1 + anorm), initial=0.0))
        eta = max(10.0, np.sqrt(n), np.max(anorm, initial=0.0), np.linalg.norm(C[k]))
        X.append(xi * np.eye(n, dtype=complex))
        Z.append(eta * np.eye(n, dtype=complex))
    y = np.zeros(m)
    ntot = sum(blocks)
    schur = _Schur(p) if m else None
    status = MAX_ITER
    it = 0
    relp = reld = gap = np.inf
    best = None
    last_gain = 0
    for it in range(1, max_iter + 1):
        AX = p.apply_A(X) if m else np.zeros(0)
        Aty = p.apply_At(y) if m else [np.zeros_like(c) for c in C]
        Rp = p.b - AX
        Rd = [c - z - at for c, z, at in zip(C, Z, Aty)]
        pobj = _inner(C, X)
        dobj = float(p.b @ y)
        mu = _inner(X, Z) / ntot
        relp = np.linalg.norm(Rp) / bnorm
        reld = np.sqrt(sum(np.sum(np.abs(r) ** 2) for r in Rd)) / cnorm
        gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        score = max(relp, reld, gap)
        logger.debug("ipm %3d  relp %.2e  reld %.2e  gap %.2e  pobj %.10g", it, relp, reld, gap, pobj)
        if best is None or score < best[0]:
            if best is None or score < 0.5 * best[0]:
                last_gain = it
            best = (score, [x.copy() for x in X], y.copy(), [z.copy() for z in Z], pobj, dobj, relp, reld, gap)
        if relp <= tol and reld <= tol and gap <= tol:
            status = OPTIMAL
            break
        if it - last_gain >= STALL_ITERS:
            status = "stalled"
            break
        xnorm = max(np.max(np.abs(x)) for x in X)
        if not np.isfinite(xnorm) or not np.all(np.isfinite(y)):
            status = "diverged"
            break
        if xnorm > 1e12 or np.max(np.abs(y), initial=0.0) > 1e12:
            status = "diverged"
            break

        Zinv = []
        try:
            for z in Z:
                Lz = np.linalg.cholesky(z)
                Li = sla.solve_triangular(Lz, np.eye(len(z)), lower=True)
                Zinv.append(Li.conj().T @ Li)
        except np.linalg.LinAlgError:
            # the dual slack left the cone numerically; report the best iterate
            status = "stalled"
            break
        if m:
            M = schur.assemble(X, Zinv)
            fac, pinv = _factor(M)
        XRdZi = [x @ rd @ zi for x, rd, zi in zip(X, Rd, Zinv)]

        def direction(Rc):
            # Rc: list of (sigma mu I - X Z - corr) blocks
            if m:
                W = [rc @ zi - xr for rc, zi, xr in zip(Rc, Zinv, XRdZi)]
                rhs = Rp - p.apply_A([_herm(w) for w in W])
                dy = _solve_factored(fac, pinv, rhs)
                # iterative refinement against the unregularized M: keeps A(X) = b near the optimum
                for _ in range(2):
                    r = rhs - M @ dy
                    if np.linalg.norm(r) <= 1e-15 * (1 + np.linalg.norm(rhs)):
                        break
                    dy = dy + _solve_factored(fac, pinv, r)
                Atdy = p.apply_At(dy)
            else:
                dy = np.zeros(0)
                Atdy = [np.zeros_like(c) for c in C]
            dZ = [rd - at for rd, at in zip(Rd, Atdy)]
            dX = [_herm((rc - x @ dz) @ zi) for rc, x, dz, zi in zip(Rc, X, dZ, Zinv)]
            return dX, dy, dZ

        XZ = [x @ z for x, z in zip(X, Z)]
        dXa, dya, dZa = direction([-xz for xz in XZ])
        ap = min(1.0, _max_step(X, dXa))
        ad = min(1.0, _max_step(Z, dZa))
        mu_aff = _inner([x + ap * d for x, d in zip(X, dXa)], [z + ad * d for z, d in zip(Z, dZa)]) / ntot
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        Rc = [sigma * mu * np.eye(len(x)) - xz - dxa @ dza for x, xz, dxa, dza in zip(X, XZ, dXa, dZa)]
        dX, dy, dZ = direction(Rc)
        gamma = 0.9 + 0.09 * min(ap, ad)
        ap = min(1.0, gamma * _max_step(X, dX))
        ad = min(1.0, gamma * _max_step(Z, dZ))
        X = [_herm(x + ap * d) for x, d in zip(X, dX)]
        y = y + ad * dy
        Z = [_herm(z + ad * d) for z, d in zip(Z, dZ)]

    if status != OPTIMAL and best is not None:
        _, X, y, Z, pobj, dobj, relp, reld, gap = best
    else:
        pobj = _inner(C, X)
        dobj = float(p.b @ y)
    if p.maximize:
        pobj, dobj = -pobj, -dobj
    return SDPSolution(
        primal=X, dual=y, slack=Z, primal_objective=pobj, dual_objective=dobj,
        gap=abs(pobj - dobj), status=status, primal_residual=float(relp),
        dual_residual=float(reld), iterations=it,
    )


def _reduce(p, tol):
    """Drop linearly dependent constraints.

    Returns ``(reduced, kept, conflict)``; ``conflict`` is ``None`` or a
    multiplier vector ``y`` on all constraints with ``sum y_i A_i = 0`` and
    ``b.y < 0``, proving infeasibility.
    """
    m = p.m
    if m == 0:
        return p, np.arange(0), None
    G = np.zeros((m, m))
    for a in p.A:
        G += np.real((a @ a.conj().T).toarray())
    scale = np.max(np.diag(G), initial=0.0)
    if scale == 0:
        kept = np.arange(0)
    else:
        c, piv, rank, info = lapack.dpstrf(G, tol=1e-11 * scale, lower=1)
        kept = np.sort(piv[:rank] - 1)
    if len(kept) == m:
        return p, kept, None
    removed = np.setdiff1d(np.arange(m), kept)
    conflict = None
    if len(kept):
        Gk = G[np.ix_(kept, kept)]
        lam = np.linalg.solve(Gk, G[np.ix_(kept, removed)]).T    # A_removed ~ lam A_kept
        res = p.b[removed] - lam @ p.b[kept]
    else:
        lam = np.zeros((len(removed), 0))
        res = p.b[removed]
    bscale = 1.0 + np.max(np.abs(p.b), initial=0.0)
    worst = int(np.argmax(np.abs(res))) if len(res) else 0
    if len(res) and abs(res[worst]) > tol * bscale:
        y = np.zeros(m)
        y[removed[worst]] = 1.0
        y[kept] = -lam[worst]
        y = -np.sign(res[worst]) * y
        conflict = y
    reduced = SDPProblem(p.blocks, p.C, [a[kept] for a in p.A], p.b[kept], p.maximize)
    return reduced, kept, conflict


def _expand(sol, kept, m):
    y = np.zeros(m)
    y[kept] = sol.dual
    sol.dual = y
    return sol


def _phase_one(p, radius):
    """Bounded phase-I problem: min tau s.t. A(X) + tau r = b, tr X + tau + s = R."""
    blocks = tuple(p.blocks) + (1, 1)
    ident = [np.eye(n, dtype=complex) for n in p.blocks]
    r = p.b - p.apply_A(ident)
    m = p.m
    A = []
    for n, a in zip(p.blocks, p.A):
        eye_vec = sp.csr_matrix(np.eye(n).ravel()[None, :].astype(complex))
        A.append(sp.vstack([a, eye_vec]).tocsr())
    A.append(sp.csr_matrix(np.append(r, 1.0)[:, None].astype(complex)))
    s_col = np.zeros((m + 1, 1), dtype=complex)
    s_col[-1] = 1.0
    A.append(sp.csr_matrix(s_col))
    b = np.append(p.b, radius)
    C = [np.zeros((n, n), dtype=complex) for n in p.blocks] + [np.ones((1, 1), dtype=complex),
                                                               np.zeros((1, 1), dtype=complex)]
    return SDPProblem(blocks, C, A, b)


def verify_primal(p, X):
    """Recompute constraint residual and minimum eigenvalue from scratch."""
    res = float(np.max(np.abs(p.apply_A(X) - p.b), initial=0.0))
    lam = min((float(np.linalg.eigvalsh(_herm(x))[0]) for x in X if x.size), default=0.0)
    return res, lam


def feasibility(p, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, radius=None):
    """Decide whether ``{X >= 0 : A(X) = b}`` is nonempty.

    Returns an :class:`SDPSolution` whose ``status`` is ``optimal`` (feasible,
    ``primal`` holds a witness) or ``infeasible`` (``witness`` holds the dual
    multipliers ``y`` with ``sum y_i A_i >= lam I`` and ``b.y < 0``).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    full = p
    p, kept, conflict = _reduce(full, tol)
    if conflict is not None:
        S = full.apply_At(conflict)
        by = float(full.b @ conflict)
        return SDPSolution(primal=[np.zeros((n, n), dtype=complex) for n in full.blocks], dual=conflict,
                           slack=S, primal_objective=np.inf, dual_objective=-by, gap=0.0,
                           status=INFEASIBLE, witness={"y": conflict, "b_dot_y": by,
                                                       "min_eig_Aty": 0.0, "dependent": True})
    ntot = sum(p.blocks)
    if radius is None:
        radius = 1e4 * (ntot + 1.0 + np.max(np.abs(p.b), initial=0.0))
    for attempt in range(2):
        q = _phase_one(p, radius)
        sol = _ipm(q, min(tol, 1e-9), max_iter)
        X = sol.primal[:-2]
        tau = float(np.real(sol.primal[-2][0, 0]))
        yq = sol.dual
        if not (tau <= tol and sol.status == OPTIMAL):
            break
        res, lam = verify_primal(full, X)
        if res <= 10 * tol:
            break
        # the residual scales with the radius; retry with one fitted to the witness
        radius = 4.0 * (sum(float(np.real(np.trace(x))) for x in X) + 1.0)
    if tau <= tol and sol.status == OPTIMAL:
        res, lam = verify_primal(full, X)
        status = OPTIMAL if res <= 10 * tol and lam >= -tol else MAX_ITER
        y = np.zeros(full.m)
        y[kept] = yq[:-1]
        return SDPSolution(primal=X, dual=y, slack=sol.slack[:-2], primal_objective=0.0,
                           dual_objective=0.0, gap=0.0, status=status, primal_residual=res,
                           iterations=sol.iterations, witness={"tau": tau, "min_eig": lam})
    # dual of phase I: -sum y_i A_i - w I >= 0, y.r + w <= 1 ... with w <= 0
    y = np.zeros(full.m)
    y[kept] = -yq[:-1]
    S = [np.asarray(s) for s in full.apply_At(y)]
    lam = min(float(np.linalg.eigvalsh(_herm(s))[0]) for s in S) if S else 0.0
    by = float(full.b @ y)
    status = INFEASIBLE if sol.status == OPTIMAL and tau > tol else MAX_ITER
    return SDPSolution(primal=X, dual=y, slack=S, primal_objective=tau, dual_objective=-by,
                       gap=sol.gap, status=status, primal_residual=sol.primal_residual,
                       iterations=sol.iterations,
                       witness={"tau": tau, "y": y, "b_dot_y": by, "min_eig_Aty": lam})


def solve(p, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve ``p``; on failure to converge, classify infeasibility via phase I."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    full = p
    p, kept, conflict = _reduce(full, tol)
    if conflict is not None:
        feas = feasibility(full, tol=tol, max_iter=max_iter)
        return SDPSolution(primal=feas.primal, dual=conflict, slack=feas.slack, primal_objective=np.inf,
                           dual_objective=np.inf, gap=np.inf, status=INFEASIBLE, witness=feas.witness)
    sol = _expand(_ipm(p, tol, max_iter), kept, full.m)
    if sol.status == OPTIMAL:
        res, _ = verify_primal(full, sol.primal)
        sol.primal_residual = max(sol.primal_residual, res / (1 + np.linalg.norm(full.b)))
        return sol
    if p.m:
        feas = feasibility(full, tol=tol, max_iter=max_iter)
        if feas.status == INFEASIBLE:
            sol.status = INFEASIBLE
            sol.witness = feas.witness
            return sol
    sol.status = MAX_ITER
    return sol


def near_optimal(sol, tol, gap_factor=10.0):
    """Feasible to ``tol`` with a relative gap within ``gap_factor * tol``.

    For callers that only use the primal point (and re-certify whatever they
    derive from it), a run that stalled this close to the optimum is usable.
    """
    if sol.status == OPTIMAL:
        return True
    if sol.status == INFEASIBLE:
        return False
    rel = abs(sol.primal_objective - sol.dual_objective) / (
        1 + abs(sol.primal_objective) + abs(sol.dual_objective))
    return bool(sol.primal_residual <= tol and sol.dual_residual <= tol and rel <= gap_factor * tol)


def require_optimal(sol, what="SDP"):
    if sol.status != OPTIMAL:
        raise SDPError(f"{what} did not reach optimality (status={sol.status})",
                       details={"primal_residual": sol.primal_residual,
                                "dual_residual": sol.dual_residual, "gap": sol.gap,
                                "iterations": sol.iterations})
    return sol
