"""Explicit ucp maps between block matrix algebras.

A :class:`UcpMap` acts on ``C^N`` matrices, reads only the diagonal blocks
``in_comps`` of its input (it is precomposed with the conditional
expectation onto them) and writes a block-diagonal output with blocks
``out_comps``.  Each (output block, input block) pair carries its own Choi
matrix, so maps like ``x -> diag(x, phi(x))`` stay small even when the
ambient algebras grow.

An optional ``corner`` lists output indices on which the map reproduces its
input: ``Phi(x)[corner, corner] = x`` for ``x`` in the input blocks.  A ucp
map with such a corner is a unital complete isometry, and the compression
to the corner is a ucp left inverse.
"""
import numpy as np

from . import matrix_core as mc
from .exceptions import DimensionError, SDPError
from .systems import AmbientAlgebra, OperatorSystem, SystemMap, support_components


def choi_apply(C, x, n, k):
    """``Phi(x)`` from the Choi matrix ``C = sum_ij E_ij (x) Phi(E_ij)`` of ``Phi: M_n -> M_k``."""
    t = np.asarray(C).reshape(n, k, n, k)
    return np.einsum("ij,iajb->ab", np.asarray(x), t)


def _as_comps(comps):
    return [np.asarray(c, dtype=int) for c in comps]


class UcpMap:
    def __init__(self, N, K, in_comps, out_comps, chois, corner=None):
        self.N = int(N)
        self.K = int(K)
        self.in_comps = _as_comps(in_comps)
        self.out_comps = _as_comps(out_comps)
        if len(chois) != len(self.out_comps) or any(len(r) != len(self.in_comps) for r in chois):
            raise DimensionError("Choi table does not match the component lists")
        self.chois = [[np.asarray(C, dtype=complex) for C in row] for row in chois]
        for oc, row in zip(self.out_comps, self.chois):
            for ic, C in zip(self.in_comps, row):
                if C.shape != (len(ic) * len(oc),) * 2:
                    raise DimensionError("Choi block has the wrong size")
        self.corner = None if corner is None else np.asarray(corner, dtype=int)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_function(cls, fn, N, K, in_comps=None, corner=None, tol=0.0):
        """Tabulate the linear map ``fn`` on matrix units of the input blocks."""
        in_comps = _as_comps(in_comps if in_comps is not None else [np.arange(N)])
        images = []
        for ic in in_comps:
            a = len(ic)
            row = []
            for i in range(a):
                for j in range(a):
                    e = np.zeros((N, N), dtype=complex)
                    e[ic[i], ic[j]] = 1.0
                    row.append(np.asarray(fn(e), dtype=complex))
            images.append(row)
        out_comps = support_components([y for row in images for y in row], K, tol)
        chois = []
        for oc in out_comps:
            k = len(oc)
            crow = []
            for ic, row in zip(in_comps, images):
                a = len(ic)
                t = np.array([y[np.ix_(oc, oc)] for y in row]).reshape(a, a, k, k)
                crow.append(t.transpose(0, 2, 1, 3).reshape(a * k, a * k))
            chois.append(crow)
        return cls(N, K, in_comps, out_comps, chois, corner)

    @classmethod
    def identity(cls, ambient):
        if not isinstance(ambient, AmbientAlgebra):
            ambient = AmbientAlgebra(ambient)
        off = ambient.offsets
        comps = [np.arange(a, b) for a, b in zip(off[:-1], off[1:])]
        N = ambient.size
        return cls.from_function(lambda x: x, N, N, comps, corner=np.arange(N))

    @classmethod
    def conjugation(cls, U, in_comps=None):
        """``x -> U^* x U`` for an isometry ``U`` (N x K)."""
        U = np.asarray(U, dtype=complex)
        N, K = U.shape
        return cls.from_function(lambda x: U.conj().T @ x @ U, N, K, in_comps)

    @classmethod
    def compression(cls, N, indices, in_comps=None):
        """``x -> x[indices, indices]``."""
        idx = np.asarray(indices, dtype=int)
        return cls.from_function(lambda x: x[np.ix_(idx, idx)], N, len(idx), in_comps)

    # -- evaluation ----------------------------------------------------------

    def apply(self, x):
        x = np.asarray(x)
        if x.shape != (self.N, self.N):
            raise DimensionError(f"input of shape {x.shape}, expected {(self.N, self.N)}")
        out = np.zeros((self.K, self.K), dtype=complex)
        for oc, row in zip(self.out_comps, self.chois):
            k = len(oc)
            acc = np.zeros((k, k), dtype=complex)
            for ic, C in zip(self.in_comps, row):
                acc += choi_apply(C, x[np.ix_(ic, ic)], len(ic), k)
            out[np.ix_(oc, oc)] = acc
        return out

    def __call__(self, x):
        return self.apply(x)

    def compose(self, first):
        """``self o first``; corners compose when both are present."""
        if first.K != self.N:
            raise DimensionError("maps are not composable")
        corner = None
        if first.corner is not None and self.corner is not None:
            corner = self.corner[first.corner]
        return UcpMap.from_function(lambda x: self.apply(first.apply(x)), first.N, self.K,
                                    first.in_comps, corner)

    @classmethod
    def stack(cls, maps, corner_of=None):
        """``x -> diag(maps[0](x), maps[1](x), ...)`` on a common input.

        ``corner_of`` picks the summand whose corner becomes the corner of
        the result.
        """
        N = maps[0].N
        if any(m.N != N for m in maps):
            raise DimensionError("stacked maps must share their input size")
        offs = np.concatenate([[0], np.cumsum([m.K for m in maps])]).astype(int)
        K = int(offs[-1])
        corner = None
        if corner_of is not None:
            m = maps[corner_of]
            if m.corner is None:
                raise DimensionError("selected summand has no corner")
            corner = m.corner + offs[corner_of]

        def fn(x):
            return mc.direct_sum([m.apply(x) for m in maps])
        return cls.from_function(fn, N, K, maps[0].in_comps, corner)

    # -- checks ---------------------------------------------------------------

    def min_eig(self):
        return min(mc.min_eig(C) for row in self.chois for C in row)

    def unital_residual(self):
        ident = np.zeros((self.N, self.N), dtype=complex)
        for ic in self.in_comps:
            ident[ic, ic] = 1.0
        return float(np.max(np.abs(self.apply(ident) - np.eye(self.K))))

    def corner_residual(self):
        if self.corner is None:
            return np.inf
        worst = 0.0
        c = self.corner
        for ic in self.in_comps:
            for i in ic:
                for j in ic:
                    e = np.zeros((self.N, self.N), dtype=complex)
                    e[i, j] = 1.0
                    worst = max(worst, float(np.max(np.abs(self.apply(e)[np.ix_(c, c)] - e))))
        return worst

    def isometry_error(self):
        """Residual bound behind the claim that this is a unital complete isometry."""
        return max(self.unital_residual(), max(0.0, -self.min_eig()) * self.N, self.corner_residual())

    def repaired(self):
        """Project Choi blocks to PSD and renormalize to exact unitality (keeps cp)."""
        chois = []
        for oc, row in zip(self.out_comps, self.chois):
            k = len(oc)
            row = [mc.psd_projection(C) for C in row]
            unit = sum(mc.partial_trace(C, (len(ic), k), side="first") for ic, C in zip(self.in_comps, row))
            w, v = np.linalg.eigh((unit + unit.conj().T) / 2)
            if w[0] <= 0:
                raise SDPError("ucp map has a singular unit image")
            s = (v / np.sqrt(w)) @ v.conj().T
            chois.append([np.kron(np.eye(len(ic)), s) @ C @ np.kron(np.eye(len(ic)), s)
                          for ic, C in zip(self.in_comps, row)])
        return UcpMap(self.N, self.K, self.in_comps, self.out_comps, chois, self.corner)

    # -- conversion -------------------------------------------------------------

    def as_map(self, domain=None, codomain=None):
        dom = domain or OperatorSystem.full(AmbientAlgebra(self.N))
        cod = codomain or OperatorSystem.full(AmbientAlgebra(self.K))
        return SystemMap.from_images(dom, [self.apply(b) for b in dom.basis], cod)

    def corner_inverse(self):
        """The ucp compression onto the corner (left inverse on the input blocks)."""
        if self.corner is None:
            raise DimensionError("map has no corner")
        return UcpMap.compression(self.K, self.corner)

    def to_payload(self):
        from .io import enc_matrix
        return {"N": self.N, "K": self.K,
                "in_comps": [c.tolist() for c in self.in_comps],
                "out_comps": [c.tolist() for c in self.out_comps],
                "chois": [[enc_matrix(C) for C in row] for row in self.chois],
                "corner": None if self.corner is None else self.corner.tolist()}

    @classmethod
    def from_payload(cls, p):
        from .io import dec_matrix
        return cls(p["N"], p["K"], p["in_comps"], p["out_comps"],
                   [[dec_matrix(C, "choi") for C in row] for row in p["chois"]], p["corner"])

    def __repr__(self):
        return (f"UcpMap(N={self.N}, K={self.K}, in_blocks={[len(c) for c in self.in_comps]}, "
                f"out_blocks={[len(c) for c in self.out_comps]})")


def verify_extension(f, ext, tol=1e-9):
    """Check that the UcpMap ``ext`` is ucp and agrees with SystemMap ``f`` on its domain.

    Returns ``(ok, err)`` with ``err`` the largest positivity, unitality and
    agreement residual.
    """
    lam = ext.min_eig()
    unit = ext.unital_residual()
    agree = max(float(np.max(np.abs(ext.apply(x) - y))) for x, y in zip(f.domain.basis, f.images))
    err = max(agree * f.domain.dim, unit, max(0.0, -lam))
    return err <= tol, err
