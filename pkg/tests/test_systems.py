import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opsys import matrix_core as mc
from opsys.cb import auerbach_constant
from opsys.systems import (AmbientAlgebra, OperatorSystem, element_norm, norm_via_positivity,
                           ruan_check, system_span)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]])
SZ = np.diag([1.0, -1.0]).astype(complex)


def test_span_of_matrix_unit():
    e12 = np.zeros((2, 2), dtype=complex)
    e12[0, 1] = 1
    E = system_span(AmbientAlgebra(2), [e12])
    assert E.dim == 3
    assert E.contains(np.eye(2)) and E.contains(e12) and E.contains(e12.T)
    assert not E.contains(SZ)
    for b in E.basis:
        assert np.allclose(b, b.conj().T)


def test_empty_span_is_scalars():
    E = system_span(AmbientAlgebra(3), [])
    assert E.dim == 1
    assert E.contains(np.eye(3))


def test_paulis_span_everything():
    E = system_span(AmbientAlgebra(2), [SX, SY, SZ])
    vec = np.array([m.ravel() for m in [np.eye(2), SX, SY, SZ]])
    assert E.dim == np.linalg.matrix_rank(vec) == 4
    assert E.is_full


def test_dual_basis_biorthogonal():
    F = OperatorSystem.full(AmbientAlgebra(2))
    W = F.dual_basis()
    G = np.array([[np.trace(w @ a) for a in F.basis] for w in W])
    assert np.allclose(G, np.eye(4), atol=1e-10)
    C = system_span(AmbientAlgebra(2), [])
    lo, hi = auerbach_constant(C)
    assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0, abs=1e-6)


def test_auerbach_lower_matches_sampling():
    rng = np.random.default_rng(4)
    E = system_span(AmbientAlgebra(3), [mc.random_hermitian(3, rng), mc.random_hermitian(3, rng)])
    lo, hi = auerbach_constant(E, rng=np.random.default_rng(0))
    assert lo <= hi + 1e-9
    # sampling oracle: each dual functional's norm from 1e5 random points on the unit sphere
    samples = 100_000
    coords = rng.standard_normal((samples, E.dim))
    mats = np.tensordot(coords, np.array(E.basis), axes=1)
    norms = np.linalg.norm(mats, ord=2, axis=(1, 2))
    sampled = max(mc.operator_norm(a) for a in E.basis)
    for w in E.dual_basis():
        vals = np.abs(np.einsum("ij,sji->s", w, mats)) / norms
        sampled = max(sampled, vals.max())
    assert sampled <= lo * (1 + 1e-6)
    assert lo <= sampled * 1.02


def test_element_norm_examples():
    F = OperatorSystem.full(AmbientAlgebra(2))
    x = SX
    c = F.coords(x)
    assert element_norm(F, c) == pytest.approx(1.0)
    zero = np.zeros_like(c)
    level2 = np.array([[zero, c], [np.conj(F.coords(x.conj().T)), zero]])
    assert element_norm(F, level2, 2) == pytest.approx(mc.operator_norm(x))
    y = np.array([[1, 2], [0, 1j]])
    cy = F.coords(y)
    block = np.array([[zero, cy], [F.coords(y.conj().T), zero]])
    assert element_norm(F, block, 2) == pytest.approx(np.linalg.svd(y, compute_uv=False)[0])


def test_norm_via_positivity_examples():
    F = OperatorSystem.full(AmbientAlgebra(3))
    assert norm_via_positivity(F, np.zeros(F.dim)) == pytest.approx(0.0, abs=1e-8)
    assert norm_via_positivity(F, F.coords(np.eye(3))) == pytest.approx(1.0, abs=1e-8)
    rng = np.random.default_rng(5)
    x = mc.random_complex((3, 3), rng)
    assert abs(norm_via_positivity(F, F.coords(x)) - mc.operator_norm(x)) <= 1e-6


def test_ruan_check_passes_and_catches_corruption():
    F = OperatorSystem.full(AmbientAlgebra(2))
    cert = ruan_check(F, samples=1000, seed=0)
    assert cert.passed
    assert "samples" in cert.details

    def corrupted(m):
        return mc.operator_norm(m) * (1 + 0.5 * (m.shape[0] > 4))
    assert not ruan_check(F, samples=50, seed=0, norm=corrupted).passed


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 4), k=st.integers(0, 3), seed=st.integers(0, 2**32 - 1))
def test_span_contains_generators_and_adjoints(n, k, seed):
    rng = np.random.default_rng(seed)
    gens = [mc.random_complex((n, n), rng) for _ in range(k)]
    E = system_span(AmbientAlgebra(n), gens)
    assert E.contains(np.eye(n))
    for g in gens:
        assert E.contains(g) and E.contains(g.conj().T)
    assert E.dim <= min(1 + 2 * k, n * n)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_coords_round_trip(seed):
    rng = np.random.default_rng(seed)
    E = system_span(AmbientAlgebra((2, 1)), [mc.direct_sum([mc.random_complex((2, 2), rng), np.ones((1, 1))])])
    c = rng.standard_normal(E.dim) + 1j * rng.standard_normal(E.dim)
    assert np.allclose(E.coords(E.element(c)), c, atol=1e-10)
