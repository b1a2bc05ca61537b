"""Concrete operator systems inside block matrix algebras, and linear maps between them.

An :class:`OperatorSystem` is a unital self-adjoint subspace of
``A = M_{d_1} (+) ... (+) M_{d_r}``, stored through a Hermitian basis whose
first element is the identity.  Elements are addressed by (possibly complex)
coordinates on that basis.  Norms are computed in the ambient algebra, which
is a complete isometry onto the represented system.
"""
import logging

import numpy as np

from . import matrix_core as mc
from .certificates import certify
from .exceptions import DimensionError, IllConditionedError

logger = logging.getLogger(__name__)

INDEPENDENCE_TOL = 1e-9
MAX_CONDITION = 1e8


class AmbientAlgebra:
    """Block-diagonal matrix algebra ``M_{d_1} (+) ... (+) M_{d_r}``."""

    def __init__(self, block_dims):
        if isinstance(block_dims, (int, np.integer)):
            block_dims = (int(block_dims),)
        dims = tuple(int(d) for d in block_dims)
        if not dims or any(d < 1 for d in dims):
            raise DimensionError(f"block dims must be positive, got {block_dims}")
        self.block_dims = dims

    @classmethod
    def ell_inf(cls, k, n):
        """``l^inf_k(M_n)``: k copies of M_n."""
        return cls((n,) * k)

    @property
    def size(self):
        return sum(self.block_dims)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.block_dims)]).astype(int)

    def identity(self):
        return np.eye(self.size, dtype=complex)

    def block_mask(self):
        mask = np.zeros((self.size, self.size), dtype=bool)
        off = self.offsets
        for a, b in zip(off[:-1], off[1:]):
            mask[a:b, a:b] = True
        return mask

    def contains(self, m, tol=1e-12):
        m = np.asarray(m)
        if m.shape != (self.size, self.size):
            return False
        return np.max(np.abs(m[~self.block_mask()]), initial=0.0) <= tol

    def blocks(self, m):
        off = self.offsets
        return [np.asarray(m)[a:b, a:b] for a, b in zip(off[:-1], off[1:])]

    def __eq__(self, other):
        return isinstance(other, AmbientAlgebra) and self.block_dims == other.block_dims

    def __hash__(self):
        return hash(self.block_dims)

    def __repr__(self):
        return f"AmbientAlgebra({list(self.block_dims)})"


def _vec(mats):
    """Real vectorization used for independence and Gram computations."""
    return np.array([np.concatenate([m.real.ravel(), m.imag.ravel()]) for m in mats])


class OperatorSystem:
    """Unital self-adjoint subspace of an ambient block algebra.

    :param ambient: an :class:`AmbientAlgebra` or a block-dimension list
    :param basis: Hermitian matrices, ``basis[0]`` must be the identity
    """

    def __init__(self, ambient, basis):
        if not isinstance(ambient, AmbientAlgebra):
            ambient = AmbientAlgebra(ambient)
        self.ambient = ambient
        N = ambient.size
        mats = []
        for b in basis:
            h, _ = mc.as_hermitian(b)
            if h.shape != (N, N):
                raise DimensionError(f"basis element of shape {h.shape} outside ambient of size {N}")
            if not ambient.contains(h, tol=1e-12):
                raise DimensionError("basis element is not block diagonal for the ambient")
            mats.append(h)
        if not mats or not np.array_equal(mats[0], ambient.identity()):
            raise DimensionError("basis[0] must equal the ambient identity exactly")
        self.basis = mats
        self.gram = np.real(np.einsum("iab,jba->ij", np.array(mats), np.array(mats)))
        sv = np.linalg.svd(_vec(mats), compute_uv=False)
        if sv[-1] < INDEPENDENCE_TOL:
            raise DimensionError(f"basis is linearly dependent (smallest singular value {sv[-1]:.3g})")
        self.condition = float(sv[0] / sv[-1])
        self._gram_inv = None

    @property
    def dim(self):
        return len(self.basis)

    @property
    def n(self):
        return self.ambient.size

    @classmethod
    def full(cls, ambient):
        """The whole ambient algebra with its canonical Hermitian basis."""
        if not isinstance(ambient, AmbientAlgebra):
            ambient = AmbientAlgebra(ambient)
        N = ambient.size
        basis = [ambient.identity()]
        off = ambient.offsets
        for bi, (a, b) in enumerate(zip(off[:-1], off[1:])):
            for i in range(a, b):
                if bi == 0 and i == a:
                    continue
                e = np.zeros((N, N), dtype=complex)
                e[i, i] = 1.0
                basis.append(e)
            for i in range(a, b):
                for j in range(i + 1, b):
                    e = np.zeros((N, N), dtype=complex)
                    e[i, j] = e[j, i] = 1 / np.sqrt(2)
                    basis.append(e)
                    e = np.zeros((N, N), dtype=complex)
                    e[i, j] = -1j / np.sqrt(2)
                    e[j, i] = 1j / np.sqrt(2)
                    basis.append(e)
        sys = cls(ambient, basis)
        sys.canonical_full = True
        return sys

    @property
    def is_full(self):
        return self.dim == sum(d * d for d in self.ambient.block_dims)

    def gram_inv(self):
        if self._gram_inv is None:
            self._gram_inv = np.linalg.inv(self.gram)
        return self._gram_inv

    def element(self, coords):
        c = np.asarray(coords, dtype=complex)
        if c.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} coordinates, got shape {c.shape}")
        return np.tensordot(c, np.array(self.basis), axes=1)

    def coords(self, x, check=True, tol=1e-8):
        """Coordinates of ``x`` (complex); ``check`` rejects elements off the span."""
        x = mc.as_matrix(x)
        if x.shape != (self.n, self.n):
            raise DimensionError(f"element of shape {x.shape} outside ambient")
        rhs = np.einsum("iab,ba->i", np.array(self.basis), x)
        c = self.gram_inv() @ rhs
        if check:
            res = np.max(np.abs(self.element(c) - x), initial=0.0)
            if res > tol * max(1.0, np.max(np.abs(x))):
                raise DimensionError(f"element not in the system (residual {res:.3g})")
        return c

    def contains(self, x, tol=1e-8):
        try:
            self.coords(x, check=True, tol=tol)
        except DimensionError:
            return False
        return True

    def dual_basis(self):
        """Matrices ``W_i`` with ``tr(W_i a_j) = delta_ij`` lying in the system."""
        if self.condition > MAX_CONDITION:
            raise IllConditionedError(f"basis condition number {self.condition:.3g} exceeds {MAX_CONDITION:g}")
        return list(np.tensordot(self.gram_inv(), np.array(self.basis), axes=1))

    def amplify(self, coords):
        """Assemble a level-r element from an (r, r, dim) coordinate array."""
        c = np.asarray(coords, dtype=complex)
        if c.ndim != 3 or c.shape[0] != c.shape[1] or c.shape[2] != self.dim:
            raise DimensionError(f"expected (r, r, {self.dim}) coordinates, got {c.shape}")
        r = c.shape[0]
        blocks = np.tensordot(c, np.array(self.basis), axes=1)   # r, r, n, n
        return blocks.transpose(0, 2, 1, 3).reshape(r * self.n, r * self.n)

    def support_components(self, tol=1e-12):
        return support_components([*self.basis], self.n, tol)

    def __eq__(self, other):
        return (isinstance(other, OperatorSystem) and self.ambient == other.ambient
                and self.dim == other.dim
                and all(np.array_equal(a, b) for a, b in zip(self.basis, other.basis)))

    def __repr__(self):
        return f"OperatorSystem(ambient={list(self.ambient.block_dims)}, dim={self.dim})"


def support_components(mats, n, tol=1e-12):
    """Partition of ``range(n)`` into connected components of the joint support.

    Every matrix in ``mats`` is block diagonal with respect to the returned
    index sets, which are sorted and listed by smallest element.
    """
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m in mats:
        rows, cols = np.nonzero(np.abs(np.asarray(m)) > tol)
        for r, c in zip(rows, cols):
            ra, rb = find(int(r)), find(int(c))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [np.array(g) for g in sorted(groups.values(), key=lambda g: g[0])]


def system_span(ambient, generators, tol=1e-10):
    """Operator system spanned by ``{1} + A + A*`` with an orthonormal Hermitian basis.

    Dependent generators are dropped; the number dropped is logged and stored
    on the result as ``dropped``.
    """
    if not isinstance(ambient, AmbientAlgebra):
        ambient = AmbientAlgebra(ambient)
    N = ambient.size
    ident = ambient.identity()
    cands = []
    for g in generators:
        g = mc.as_matrix(g)
        if g.shape != (N, N) or not ambient.contains(g, tol=1e-12):
            raise DimensionError("generator does not lie in the ambient algebra")
        cands.append((g + g.conj().T) / 2)
        cands.append((g - g.conj().T) / 2j)
    basis = [ident]
    # orthonormal working copies in the real inner product Re tr(A B)
    ortho = [ident / np.sqrt(N)]
    dropped = 0
    for h in cands:
        v = h.copy()
        for _ in range(2):  # modified Gram-Schmidt with one reorthogonalization pass
            for q in ortho:
                v = v - np.real(np.sum(q.conj() * v)) * q
        nv = np.sqrt(np.real(np.sum(v.conj() * v)))
        if nv <= tol * max(1.0, np.linalg.norm(h)):
            dropped += 1
            continue
        q = (v + v.conj().T) / (2 * nv)
        ortho.append(q)
        basis.append(q)
    if dropped:
        logger.info("system_span dropped %d dependent generator parts", dropped)
    sys = OperatorSystem(ambient, basis)
    sys.dropped = dropped
    return sys


def element_norm(sys, coords, level=1):
    """Norm of a level-``level`` element given by coordinates in ``sys``."""
    if level < 1:
        raise DimensionError("level must be >= 1")
    c = np.asarray(coords, dtype=complex)
    if level == 1:
        if c.shape == (sys.dim,):
            return mc.operator_norm(sys.element(c))
        c = c.reshape(1, 1, -1)
    if c.shape != (level, level, sys.dim):
        raise DimensionError(f"expected coordinates of shape {(level, level, sys.dim)}, got {c.shape}")
    return mc.operator_norm(sys.amplify(c))


def _is_psd(m):
    try:
        np.linalg.cholesky(m)
        return True
    except np.linalg.LinAlgError:
        return False


def norm_via_positivity(sys, coords, tol=1e-9):
    """Norm recovered from the order: least ``t`` with ``[[t, x], [x*, t]] >= 0``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = sys.element(coords)
    n = len(x)
    ident = np.eye(n)

    def ok(t):
        return _is_psd(np.block([[t * ident, x], [x.conj().T, t * ident]]))

    hi = max(1.0, float(np.sum(np.abs(x))))
    while not ok(hi):
        hi *= 2
    lo = 0.0
    while hi - lo > tol / 4:
        mid = (lo + hi) / 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


def ruan_check(sys, samples=200, seed=0, norm=None, tol=1e-9):
    """Sample the matricial norm axioms on ``sys``.

    Checks ``||a x b|| <= ||a|| ||x|| ||b||`` and ``||x (+) y|| = max(||x||, ||y||)``
    for random rectangular scalars and random matrix elements.  ``norm`` may
    override the level norm (a callable on assembled ambient matrices); this
    exists to exercise the check against a corrupted norm.
    """
    rng = np.random.default_rng(seed)
    norm = norm or mc.operator_norm
    worst = 0.0
    n = sys.n
    for _ in range(samples):
        r = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        x = sys.amplify(mc.random_complex((r, r, sys.dim), rng))
        y = sys.amplify(mc.random_complex((k, k, sys.dim), rng))
        a = mc.random_complex((k, r), rng)
        b = mc.random_complex((r, k), rng)
        axb = np.kron(a, np.eye(n)) @ x @ np.kron(b, np.eye(n))
        lhs = norm(axb)
        rhs = mc.operator_norm(a) * norm(x) * mc.operator_norm(b)
        worst = max(worst, (lhs - rhs) / max(1.0, rhs))
        dsum = norm(mc.direct_sum([x, y]))
        worst = max(worst, abs(dsum - max(norm(x), norm(y))) / max(1.0, dsum))
    return certify("operator-space-axioms.max-violation", 0.0, worst, tol, inputs=(sys,),
                   seed=seed, samples=samples)


def functional_norm_lower(sys, w, rng, starts=8, iters=200):
    """Lower bound for ``sup |tr(w x)|`` over the unit ball of ``sys``."""
    A = np.array(sys.basis)
    lin = np.einsum("ab,iba->i", w, A)  # tr(w a_i)
    best = 0.0
    for s in range(starts):
        c = mc.random_complex(sys.dim, rng) if s else np.conj(lin)
        step = 0.5
        x = sys.element(c)
        nx = mc.operator_norm(x)
        if nx == 0:
            continue
        val = abs(lin @ c) / nx
        for _ in range(iters):
            u, sv, vh = np.linalg.svd(x)
            # gradient of |lin.c| / ||x(c)|| with respect to conj(c)
            phase = np.conj(lin @ c) / max(abs(lin @ c), 1e-300)
            g_num = phase * lin
            g_den = np.einsum("a,iab,b->i", u[:, 0].conj(), A, vh[0].conj())
            g = np.conj(g_num) / nx - val * np.conj(g_den) / nx
            cand = c + step * g / max(np.linalg.norm(g), 1e-300) * np.linalg.norm(c)
            xc = sys.element(cand)
            nc = mc.operator_norm(xc)
            vc = abs(lin @ cand) / nc
            if vc > val:
                c, x, nx, val = cand, xc, nc, vc
                step = min(1.0, step * 1.5)
            else:
                step *= 0.5
                if step < 1e-10:
                    break
        best = max(best, val)
    return best


class SystemMap:
    """Linear map between operator systems stored by basis coefficients.

    ``coeffs[j, i]`` is the ``j``-th codomain coordinate of the image of the
    ``i``-th domain basis element.  Coefficients may be complex; the map is
    self-adjoint exactly when they are real.
    """

    def __init__(self, domain, codomain, coeffs):
        c = np.asarray(coeffs, dtype=complex)
        if c.shape != (codomain.dim, domain.dim):
            raise DimensionError(f"coefficient matrix {c.shape} does not match dims "
                                 f"({codomain.dim}, {domain.dim})")
        if not np.all(np.isfinite(c)):
            raise DimensionError("non-finite coefficients")
        self.domain = domain
        self.codomain = codomain
        self.coeffs = c
        self.cb_bounds = {}

    @classmethod
    def from_images(cls, domain, images, codomain=None):
        """Map sending ``domain.basis[i]`` to ``images[i]``.

        Without an explicit codomain the full ambient algebra of the images
        is used, with ambient blocks read off from their common support.
        """
        images = [mc.as_matrix(y) for y in images]
        if len(images) != domain.dim:
            raise DimensionError(f"{len(images)} images for a {domain.dim}-dimensional domain")
        if codomain is None:
            codomain = OperatorSystem.full(AmbientAlgebra(images[0].shape[0]))
        coeffs = np.array([codomain.coords(y) for y in images]).T
        return cls(domain, codomain, coeffs)

    @classmethod
    def identity(cls, sys):
        return cls(sys, sys, np.eye(sys.dim))

    @classmethod
    def inclusion(cls, sys):
        """Inclusion of ``sys`` into its full ambient algebra."""
        return cls.from_images(sys, sys.basis, OperatorSystem.full(sys.ambient))

    @property
    def images(self):
        return list(np.tensordot(self.coeffs.T, np.array(self.codomain.basis), axes=1))

    @property
    def is_unital(self):
        e0 = np.zeros(self.codomain.dim)
        e0[0] = 1.0
        return bool(np.max(np.abs(self.coeffs[:, 0] - e0)) <= 1e-10)

    @property
    def is_self_adjoint(self):
        return bool(np.max(np.abs(self.coeffs.imag), initial=0.0) <= 1e-12)

    def apply(self, x):
        return self.codomain.element(self.coeffs @ self.domain.coords(x))

    def apply_coords(self, c):
        return self.coeffs @ np.asarray(c, dtype=complex)

    def amplify(self, X):
        """Apply the map entrywise to an element of ``M_r(domain)``."""
        X = mc.as_matrix(X)
        n = self.domain.n
        r = X.shape[0] // n
        if X.shape != (r * n, r * n):
            raise DimensionError("amplified element has wrong shape")
        blocks = X.reshape(r, n, r, n).transpose(0, 2, 1, 3)
        out = np.array([[self.apply(blocks[a, b]) for b in range(r)] for a in range(r)])
        k = self.codomain.n
        return out.transpose(0, 2, 1, 3).reshape(r * k, r * k)

    def compose(self, first):
        """``self o first``."""
        if first.codomain.ambient != self.domain.ambient:
            raise DimensionError("maps are not composable")
        if first.codomain == self.domain:
            return SystemMap(first.domain, self.codomain, self.coeffs @ first.coeffs)
        c = np.array([self.domain.coords(y) for y in first.images]).T
        return SystemMap(first.domain, self.codomain, self.coeffs @ c)

    def __sub__(self, other):
        if other.domain != self.domain or other.codomain.ambient != self.codomain.ambient:
            raise DimensionError("maps differ in domain or codomain")
        if other.codomain != self.codomain:
            other = SystemMap.from_images(other.domain, other.images, self.codomain)
        return SystemMap(self.domain, self.codomain, self.coeffs - other.coeffs)

    def __add__(self, other):
        return self - SystemMap(other.domain, other.codomain, -other.coeffs)

    def scale(self, s):
        return SystemMap(self.domain, self.codomain, s * self.coeffs)

    def star(self):
        """``x -> f(x*)*``; conjugates the coefficients on Hermitian bases."""
        return SystemMap(self.domain, self.codomain, self.coeffs.conj())

    def re_part(self):
        return SystemMap(self.domain, self.codomain, (self.coeffs + self.coeffs.conj()) / 2)

    def im_part(self):
        return SystemMap(self.domain, self.codomain, (self.coeffs - self.coeffs.conj()) / 2j)

    def range_system(self, tol=1e-10):
        """The image as an operator system, basis ``f(a_i)``; needs a unital self-adjoint map."""
        if not self.is_unital or not self.is_self_adjoint:
            raise DimensionError("range system requires a unital self-adjoint map")
        imgs = self.images
        imgs[0] = self.codomain.ambient.identity()
        return OperatorSystem(self.codomain.ambient, imgs)

    def onto_range(self):
        """The same map with codomain replaced by its range system."""
        rng_sys = self.range_system()
        return SystemMap(self.domain, rng_sys, np.eye(self.domain.dim))

    def inverse(self):
        if self.coeffs.shape[0] != self.coeffs.shape[1]:
            raise DimensionError("only maps onto their codomain can be inverted; use onto_range()")
        sv = np.linalg.svd(self.coeffs, compute_uv=False)
        if sv[-1] < 1e-12 * max(1.0, sv[0]):
            raise DimensionError("map is not invertible")
        return SystemMap(self.codomain, self.domain, np.linalg.inv(self.coeffs))

    def __repr__(self):
        return f"SystemMap({self.domain!r} -> {self.codomain!r})"
