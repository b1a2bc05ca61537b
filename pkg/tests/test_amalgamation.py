import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opsys import matrix_core as mc
from opsys.amalgamation import (amalgamate_block, amalgamate_matricial, compose_approximate_isometry,
                                fraisse_distance_upper, joint_embed, nuclear_chain, small_perturbation_map)
from opsys.cb import cb_norm_subspace, directional_cb_norms
from opsys.exceptions import DimensionError, PerturbationTooLarge
from opsys.systems import AmbientAlgebra, OperatorSystem, SystemMap, system_span

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def full(dims):
    return OperatorSystem.full(AmbientAlgebra(dims))


def perturbed_map(E, codomain, fn, eps, rng):
    """Unital map on E: identity image, then ``fn(b) + eps * H`` on the other basis elements."""
    N = codomain.ambient.size
    imgs = [codomain.ambient.identity()]
    for b in E.basis[1:]:
        h = mc.random_hermitian(N, rng)
        imgs.append(fn(b) + eps * h / mc.operator_norm(h))
    return SystemMap.from_images(E, imgs, codomain)


def check_amalgam(res, E):
    assert all(c.passed for c in res.isometry_certificates)
    for m in (res.i, res.j):
        fwd, inv = directional_cb_norms(m)
        assert abs(fwd.value - 1) <= 1e-6 and abs(inv.value - 1) <= 1e-6
    assert res.defect <= 100 * E.dim * np.sqrt(res.delta) + 1e-6
    assert res.certificate.passed


def test_identity_restriction_has_zero_defect():
    rng = np.random.default_rng(0)
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])
    f = SystemMap.from_images(E, E.basis, full(3))
    res = amalgamate_matricial(E, f)
    assert res.delta <= 1e-6
    assert res.defect <= 1e-6
    assert res.target.size == 6
    check_amalgam(res, E)


def test_sigma_z_stretch_within_bound():
    E = system_span(AmbientAlgebra(2), [SZ])
    f = SystemMap.from_images(E, [E.basis[0], 1.01 * E.basis[1]], full(2))
    res = amalgamate_matricial(E, f)
    assert res.delta == pytest.approx(0.01, abs=1e-5)
    assert res.defect <= 20
    check_amalgam(res, E)


def test_random_three_dim_system():
    rng = np.random.default_rng(1)
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])
    U = mc.random_unitary(3, rng)
    f = perturbed_map(E, full(3), lambda x: U @ x @ U.conj().T, 0.02, rng)
    res = amalgamate_matricial(E, f)
    assert res.delta <= 0.25
    check_amalgam(res, E)


def test_block_identity_has_zero_defect():
    amb = AmbientAlgebra((2, 2))
    x = mc.direct_sum([SZ, SX])
    E = system_span(amb, [x])
    f = SystemMap.from_images(E, E.basis, OperatorSystem.full(amb))
    res = amalgamate_block(E, f)
    assert res.target.block_dims == (2, 2, 2, 2)
    assert res.defect <= 1e-6
    check_amalgam(res, E)


def test_block_diagonal_rescaling():
    amb = AmbientAlgebra((2, 2))
    x = mc.direct_sum([SZ, SX])
    E = system_span(amb, [x])
    f = SystemMap.from_images(E, [E.basis[0]] + [1.01 * b for b in E.basis[1:]], OperatorSystem.full(amb))
    res = amalgamate_block(E, f)
    assert res.delta == pytest.approx(0.01, abs=1e-4)
    assert res.defect <= 100 * E.dim * 0.1
    check_amalgam(res, E)


def test_commutative_case_brute_forced():
    # functions on three points; cb norms into a commutative algebra are plain norms
    amb = AmbientAlgebra((1, 1, 1))
    E = system_span(amb, [np.diag([1.0, 0.0, -1.0])])
    f = SystemMap.from_images(E, [E.basis[0], E.basis[1] + 0.05 * np.diag([0.0, 1.0, 0.0])],
                              OperatorSystem.full(amb))
    res = amalgamate_block(E, f)
    check_amalgam(res, E)
    # sup over a grid of real coordinates (Hermitian elements) bounds the defect from below
    ins = E.basis
    grid = np.linspace(-1, 1, 81)
    best = 0.0
    for s in grid:
        for t in grid:
            x = s * ins[0] + t * ins[1]
            nx = mc.operator_norm(x)
            if nx < 1e-9:
                continue
            y = s * f.images[0] + t * f.images[1]
            best = max(best, mc.operator_norm(res.j_map.apply(y) - res.i_map.apply(x)) / nx)
    assert best <= res.defect + 1e-6


def test_joint_embed_scalars():
    C = full(1)
    res = joint_embed(C, C)
    assert res.target.size == 2
    lam = np.array([[2.5 - 1j]])
    assert np.allclose(res.i_map.apply(lam), lam[0, 0] * np.eye(2))
    assert np.allclose(res.j_map.apply(lam), lam[0, 0] * np.eye(2))
    assert res.defect == 0.0


def test_joint_embed_corners():
    res = joint_embed(full(2), full(3))
    assert res.target.size == 5
    rng = np.random.default_rng(2)
    x = mc.random_complex((2, 2), rng)
    y = mc.random_complex((3, 3), rng)
    assert np.allclose(res.i_map.apply(x)[:2, :2], x)
    assert np.allclose(res.j_map.apply(y)[2:, 2:], y)
    assert np.allclose(res.i_map.apply(x)[:2, 2:], 0)
    check_amalgam(res, full(1))


def test_small_perturbation_identity():
    a = [np.eye(2), SZ]
    res = small_perturbation_map(2, a, a)
    assert res.forward_cb == pytest.approx(1.0, abs=1e-6)
    assert res.inverse_cb == pytest.approx(1.0, abs=1e-6)


def test_small_perturbation_shift():
    a = [np.eye(2), SZ]
    b = [np.eye(2), SZ + 0.01 * SX]
    res = small_perturbation_map(2, a, b)
    assert res.auerbach <= 2 + 1e-6
    assert res.bound <= 1.04 + 1e-9
    assert max(res.forward_cb, res.inverse_cb) <= res.bound + 1e-6
    assert cb_norm_subspace(res.map).value == pytest.approx(res.forward_cb, abs=1e-6)
    assert res.certificate.passed


def test_small_perturbation_rejections():
    with pytest.raises(DimensionError):
        small_perturbation_map(2, [np.eye(2), SZ, SZ + 1e-12 * SX], [np.eye(2), SZ, SX])
    with pytest.raises(PerturbationTooLarge) as err:
        small_perturbation_map(2, [np.eye(2), SZ], [np.eye(2), SX])
    assert err.value.correction_norm >= 1


def test_fraisse_distance_examples():
    a = [np.eye(2), SZ]
    est = fraisse_distance_upper(a, a)
    assert est.value <= 1e-6
    rng = np.random.default_rng(3)
    U = mc.random_unitary(2, rng)
    est = fraisse_distance_upper(a, [U @ x @ U.conj().T for x in a])
    assert est.value <= 1e-6
    assert est.witness.passed


def test_fraisse_distance_small_delta():
    a = [np.eye(2), SZ]
    b = [np.eye(2), 1.0001 * SZ]
    est = fraisse_distance_upper(a, b, ambient_a=2, ambient_b=2)
    assert est.certificate.details["delta"] == pytest.approx(1e-4, rel=1e-2)
    assert est.value <= 2.0
    assert est.certificate.passed and est.certificate.details["sharper_bound_held"]
    back = fraisse_distance_upper(b, a)
    assert abs(back.value - est.value) <= 2 * max(est.value, back.value) + 1e-9


def test_compose_tables():
    rng = np.random.default_rng(4)
    phi = rng.random((4, 5))
    perm = rng.permutation(5)
    graph = np.full((5, 5), np.inf)
    graph[np.arange(5), perm] = 0.0
    assert np.allclose(compose_approximate_isometry(phi, graph), phi[:, np.argsort(perm)])
    f = np.array([1, 0, 2])
    g = np.array([2, 2, 0])
    gf = np.full((3, 3), np.inf)
    gf[np.arange(3), f] = 0
    gg = np.full((3, 3), np.inf)
    gg[np.arange(3), g] = 0
    comp = compose_approximate_isometry(gf, gg)
    assert np.all((comp == 0) == (np.arange(3)[None, :] == g[f][:, None]))
    with pytest.raises(DimensionError):
        compose_approximate_isometry(-phi, phi.T)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_compose_triangle_and_associativity(seed):
    rng = np.random.default_rng(seed)
    p, q, r = rng.random((3, 4)), rng.random((4, 5)), rng.random((5, 2))
    pq = compose_approximate_isometry(p, q)
    for a in range(3):
        for d in range(5):
            assert all(pq[a, d] <= p[a, b] + q[b, d] + 1e-15 for b in range(4))
    assert np.allclose(compose_approximate_isometry(pq, r),
                       compose_approximate_isometry(p, compose_approximate_isometry(q, r)))


def test_nuclear_chain_constant():
    F = full(2)
    chain = nuclear_chain([F, F, F])
    assert chain.sizes == [2, 2, 2]
    rng = np.random.default_rng(5)
    x = mc.random_complex((2, 2), rng)
    for k in range(2):
        assert np.allclose(chain.connectives[k].apply(x), x)
        assert np.allclose(chain.tracker_maps[k].apply(x), x)
    assert chain.passed


def test_nuclear_chain_commutative_start():
    amb = AmbientAlgebra(2)
    chain = nuclear_chain([system_span(amb, []), system_span(amb, [SZ]), full(2)])
    assert len(chain.sizes) == 3 and chain.complete
    assert chain.passed
    # recompute the compatibility certificates from the stored maps
    for k in range(2):
        E = chain.systems[k]
        diff = [chain.tracker_maps[k + 1].apply(x) - chain.connectives[k].apply(chain.tracker_maps[k].apply(x))
                for x in E.basis]
        top = OperatorSystem.full(AmbientAlgebra(chain.sizes[k + 1]))
        val = cb_norm_subspace(SystemMap.from_images(E, diff, top)).value if max(
            np.max(np.abs(d)) for d in diff) > 1e-13 else 0.0
        assert val <= 2.0 ** -(k + 1) + 1e-6


def test_nuclear_chain_random_four_stages():
    rng = np.random.default_rng(6)
    amb = AmbientAlgebra(3)
    gens = [mc.random_complex((3, 3), rng) for _ in range(4)]
    systems = [system_span(amb, gens[:k]) for k in range(4)]
    chain = nuclear_chain(systems, seed=7)
    assert chain.complete and chain.passed
    for k, row in enumerate(chain.certificates[:-1]):
        compat = [c for c in row if c.claim_id == "embedding-chain.tracker-compatibility"][0]
        assert compat.computed_value <= 2.0 ** -(k + 1) + 1e-6
