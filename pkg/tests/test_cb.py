import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opsys import matrix_core as mc
from opsys.cb import (ChoiMatrix, amplification_ascent, cb_norm_full, cb_norm_subspace, choi, cp_jordan_split,
                      full_map_images, im_bound_check, inverse_choi, is_ucp, re_im_parts, scalar_im_bound,
                      ucp_nearest)
from opsys.systems import AmbientAlgebra, OperatorSystem, SystemMap, system_span

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def full(n):
    return OperatorSystem.full(AmbientAlgebra(n))


def map_from_fn(fn, n, k):
    return SystemMap.from_images(full(n), [fn(b) for b in full(n).basis], full(k))


def transpose(n):
    return map_from_fn(lambda x: x.T, n, n)


def diamond_of_adjoint(f):
    """cb norm via an independent SDP: the diamond norm of the adjoint map (cvxpy oracle)."""
    n, k = f.domain.n, f.codomain.n
    images = full_map_images(f)
    # adjoint: tr(Phi*(y) x) = tr(y Phi(x)), so Phi*(E_ab)[j, i] = Phi(E_ij)[b, a]
    J = np.zeros((k * n, k * n), dtype=complex)
    for a in range(k):
        for b in range(k):
            img = np.array([[images[i][j][b, a] for j in range(n)] for i in range(n)]).T
            Eab = np.zeros((k, k))
            Eab[a, b] = 1
            J += np.kron(Eab, img)
    Y0 = cp.Variable((k * n, k * n), hermitian=True)
    Y1 = cp.Variable((k * n, k * n), hermitian=True)
    blk = cp.bmat([[Y0, -J], [-J.conj().T, Y1]])
    t0, t1 = cp.Variable(), cp.Variable()
    cons = [blk >> 0,
            cp.partial_trace(Y0, (k, n), axis=1) << t0 * np.eye(k),
            cp.partial_trace(Y1, (k, n), axis=1) << t1 * np.eye(k)]
    prob = cp.Problem(cp.Minimize((t0 + t1) / 2), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


def test_choi_identity_and_transpose():
    C = choi(SystemMap.identity(full(2))).matrix
    assert np.trace(C).real == pytest.approx(2.0)
    assert np.linalg.matrix_rank(C, tol=1e-10) == 1
    T = choi(transpose(2)).matrix
    assert np.allclose(np.linalg.eigvalsh(T), [-1, 1, 1, 1])


def test_choi_round_trip():
    rng = np.random.default_rng(0)
    C = mc.random_complex((6, 6), rng)
    f = inverse_choi(ChoiMatrix(2, 3, C), full(3))
    assert np.max(np.abs(choi(f).matrix - C)) <= 1e-10


def test_cb_norm_identity_and_transpose():
    assert cb_norm_full(SystemMap.identity(full(2))).value == pytest.approx(1.0, abs=1e-6)
    for n in (2, 3):
        f = transpose(n)
        val = cb_norm_full(f).value
        assert val == pytest.approx(n, abs=1e-5)
        lower = amplification_ascent(full_map_images(f), n, n, starts=6, rng=np.random.default_rng(1))
        assert lower >= n - 1e-4


def test_cb_norm_sigma_z_stretch():
    delta = 0.04
    f = map_from_fn(lambda x: x + delta * np.trace(SZ @ x) / 2 * SZ, 2, 2)
    val = cb_norm_full(f).value
    assert val == pytest.approx(1 + delta, abs=1e-6)
    lower = amplification_ascent(full_map_images(f), 2, 2, rng=np.random.default_rng(2))
    assert val >= lower - 1e-7 and lower >= 1 + delta - 1e-6


def test_cb_norm_matches_cvxpy_oracle():
    rng = np.random.default_rng(3)
    for n, k in [(2, 2), (2, 3), (3, 2)]:
        C = mc.random_complex((n * k, n * k), rng)
        f = inverse_choi(ChoiMatrix(n, k, C), full(k))
        assert cb_norm_full(f).value == pytest.approx(diamond_of_adjoint(f), rel=1e-5)


def test_cb_norm_subspace_examples():
    rng = np.random.default_rng(4)
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])
    assert cb_norm_subspace(SystemMap.inclusion(E)).value == pytest.approx(1.0, abs=1e-6)
    E2 = system_span(AmbientAlgebra(2), [SX])
    f = SystemMap.from_images(E2, [b.T for b in E2.basis], full(2))
    val = cb_norm_subspace(f).value
    assert 1 - 1e-6 <= val <= 2 + 1e-6


def test_is_ucp_examples():
    ok, wit = is_ucp(SystemMap.identity(full(2)))
    assert ok
    assert not is_ucp(transpose(2))[0]
    # pinching onto a random state-weighted diagonal, restricted to a subsystem of M_3
    rng = np.random.default_rng(5)
    w = rng.random(3)
    w /= w.sum()
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])

    def pinch(x):
        return np.diag(np.diag(x)) * 0.5 + 0.5 * np.trace(np.diag(w) @ x) * np.eye(3)
    f = SystemMap.from_images(E, [pinch(b) for b in E.basis], full(3))
    ok, wit = is_ucp(f)
    assert ok
    ext = wit["extension"]
    # re-verify the witness from scratch
    assert ext.min_eig() >= -1e-9
    assert ext.unital_residual() <= 1e-9
    assert max(np.max(np.abs(ext.apply(x) - y)) for x, y in zip(E.basis, f.images)) <= 1e-7


def test_imaginary_part_bounds():
    f = SystemMap.identity(full(2))
    re, im = re_im_parts(f)
    assert np.allclose(im.coeffs, 0)
    assert im_bound_check(f).computed_value == pytest.approx(0.0, abs=1e-9)
    # a unital map with delta about 0.09
    E = system_span(AmbientAlgebra(2), [SX, SZ])
    imgs = [E.basis[0]] + [b + 0.15j * mc.operator_norm(b) * SZ for b in E.basis[1:]]
    g = SystemMap.from_images(E, imgs, full(2))
    cert = im_bound_check(g)
    assert cert.passed
    assert cert.computed_value <= 4 * np.sqrt(cert.details["delta"]) + 1e-6


def test_scalar_imaginary_bound():
    one = OperatorSystem.full(AmbientAlgebra(1))
    F = full(2)
    state = SystemMap.from_images(F, [np.trace(b).reshape(1, 1) / 2 for b in F.basis], one)
    assert scalar_im_bound(state, SZ).computed_value == 0.0
    delta = 0.25
    perturbed = SystemMap.from_images(
        F, [(np.trace(b) / 2 + 1j * delta * np.trace(SZ @ b) / 2).reshape(1, 1) for b in F.basis], one)
    rng = np.random.default_rng(6)
    norm = cb_norm_subspace(perturbed).value
    for _ in range(20):
        x = mc.random_hermitian(2, rng)
        cert = scalar_im_bound(perturbed, x)
        assert cert.passed
        assert cert.details["functional_norm"] == pytest.approx(norm, abs=1e-6)


def test_cp_jordan_split():
    pos, neg = cp_jordan_split(SystemMap.identity(full(2)))
    assert np.allclose(neg.coeffs, 0, atol=1e-12)
    pos, neg = cp_jordan_split(transpose(2))
    assert np.linalg.matrix_rank(choi(neg).matrix, tol=1e-9) == 1
    rng = np.random.default_rng(7)
    C = mc.random_hermitian(4, rng)
    f = inverse_choi(ChoiMatrix(2, 2, C), full(2))
    pos, neg = cp_jordan_split(f)
    assert np.max(np.abs((pos - neg).coeffs - f.coeffs)) <= 1e-9
    assert np.linalg.eigvalsh(choi(pos).matrix)[0] >= -1e-12
    assert np.linalg.eigvalsh(choi(neg).matrix)[0] >= -1e-12


def test_ucp_nearest_of_ucp_map_is_itself():
    psi, ext, dist, cert = ucp_nearest(SystemMap.identity(full(2)))
    assert dist == pytest.approx(0.0, abs=1e-7)
    assert cert.passed


def test_ucp_nearest_sigma_z_stretch():
    E = system_span(AmbientAlgebra(2), [SZ])
    f = SystemMap.from_images(E, [b if np.allclose(b, np.eye(2) / np.sqrt(2)) or np.allclose(b, b[0, 0] * np.eye(2))
                                  else 1.04 * b for b in E.basis], full(2))
    psi, ext, dist, cert = ucp_nearest(f)
    assert cert.claimed_bound == pytest.approx(20 * 3 * np.sqrt(cert.details["delta"]))
    # brute force over diagonal contractions h: min max(|1.04 - a|, |1.04 + b|) = 0.04
    grid = np.linspace(-1, 1, 401)
    brute = min(max(abs(1.04 - a), abs(-1.04 - b)) for a in grid for b in grid)
    assert dist == pytest.approx(brute, abs=1e-5)
    assert cert.passed


def test_ucp_nearest_random_three_dim():
    rng = np.random.default_rng(8)
    E = system_span(AmbientAlgebra(3), [mc.random_hermitian(3, rng), mc.random_hermitian(3, rng)])
    imgs = [E.basis[0]] + [b + 0.01 * mc.random_hermitian(3, rng) for b in E.basis[1:]]
    f = SystemMap.from_images(E, imgs, full(3))
    _, _, d1, cert = ucp_nearest(f, tol=1e-7)
    _, _, d2, _ = ucp_nearest(f, tol=1e-8)
    assert cert.passed
    assert d1 == pytest.approx(d2, abs=1e-5)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cb_norm_dominates_ascent(seed):
    rng = np.random.default_rng(seed)
    C = mc.random_complex((4, 4), rng)
    f = inverse_choi(ChoiMatrix(2, 2, C), full(2))
    res = cb_norm_full(f)
    lower = amplification_ascent(full_map_images(f), 2, 2, starts=4, rng=rng)
    assert res.value >= lower - 1e-6
    assert res.value - lower <= 1e-4 * max(1.0, res.value)
