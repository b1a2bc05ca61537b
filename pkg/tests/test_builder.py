import copy

import numpy as np
import pytest
from sklearn.base import clone

from opsys import matrix_core as mc
from opsys.amalgamation import _blocks_of
from opsys.builder import (GSBuilder, Thread, back_and_forth, build_gs, build_gs_n, build_net, chain_norm,
                           condition_certificate, extension_test, min_distances, omin_norm_lower, push_thread,
                           random_ball, verify)
from opsys.cb import cb_norm_subspace
from opsys.exceptions import ScheduleExhausted
from opsys.systems import AmbientAlgebra, OperatorSystem, SystemMap, element_norm, system_span
from opsys.ucp import UcpMap

SZ = np.diag([1.0, -1.0]).astype(complex)


@pytest.fixture(scope="module")
def small_chain():
    return build_gs({"K": 3, "maps_per_stage": 1})


@pytest.fixture(scope="module")
def rich_chain():
    return build_gs({"K": 3, "maps_per_stage": 3})


@pytest.fixture(scope="module")
def block_chain():
    return build_gs_n(2, {"K": 2, "maps_per_stage": 1})


def top_system(chain):
    return OperatorSystem.full(chain.ambients[-1])


def tuple_entry(chain):
    """A handled embedding of M_2 coming from a non-scalar tuple."""
    return next(e for e in chain.handled() if e.key[0] == 2 and e.E.dim > 1)


# -- nets ------------------------------------------------------------------------------------

def test_net_of_unit_disc_covers():
    rng = np.random.default_rng(0)
    probe = random_ball(AmbientAlgebra(1), 10_000, rng)
    for mode in ("deterministic", "sampled"):
        net = build_net(1, 0.5, mode=mode, seed=1)
        measured = float(np.max(min_distances(probe, np.array(net.elements))))
        assert measured <= 0.5
        assert net.check() == (0.0, 0.0)
    det = build_net(1, 0.5, mode="deterministic")
    assert det.certified and det.covering_radius <= 0.5


def test_coarse_net_is_zero():
    net = build_net(2, 2.0)
    assert len(net) == 1 and np.all(net.elements[0] == 0)
    assert net.covering_radius <= 2.0


def test_sampled_net_is_reproducible():
    a = build_net(2, 0.3, mode="sampled", seed=5, cap=500, samples=1000)
    b = build_net(2, 0.3, mode="sampled", seed=5, cap=500, samples=1000)
    assert len(a) == len(b) <= 500
    assert all(np.array_equal(x, y) for x, y in zip(a.elements, b.elements))
    assert a.check()[1] == 0.0


def test_grid_net_over_cap_raises():
    with pytest.raises(ScheduleExhausted):
        build_net(2, 0.05, mode="deterministic", cap=50)


# -- builds ----------------------------------------------------------------------------------

def test_single_stage_is_scalars():
    chain = build_gs({"K": 1})
    assert chain.sizes == [1]
    assert chain.ledger == []


def test_two_stages_function_systems():
    chain = build_gs({"K": 2, "m_max": 1})
    assert chain.sizes == [1, 2]
    handled = chain.handled()
    assert handled
    for e in handled:
        cert = condition_certificate(e, chain.connectives[e.key[1] - 1])
        assert cert.passed
    assert verify(chain).passed


def test_small_build_verifies(small_chain):
    assert small_chain.complete
    assert all(b > a for a, b in zip(small_chain.sizes[:-1], small_chain.sizes[1:]))
    report = verify(small_chain)
    assert report.passed
    assert len(report.lines()) == len(report.certificates)


def test_verify_catches_broken_connective(small_chain):
    broken = copy.deepcopy(small_chain)
    c = broken.connectives[-1]
    broken.connectives[-1] = UcpMap.from_function(lambda x: np.trace(x) / c.N * np.eye(c.K), c.N, c.K,
                                                  c.in_comps, corner=c.corner)
    assert not verify(broken).passed


def test_builder_is_an_estimator():
    est = GSBuilder(K=2, m_max=1, seed=3)
    assert est.get_params()["seed"] == 3
    other = clone(est).set_params(seed=4)
    assert other.seed == 4 and est.seed == 3
    with pytest.raises(ValueError):
        GSBuilder(K=0).fit()
    with pytest.raises(ValueError):
        GSBuilder(net_mode="grid").fit()


# -- threads ---------------------------------------------------------------------------------

def test_unit_thread_and_push(small_chain):
    sys0 = OperatorSystem.full(small_chain.ambients[0])
    unit = Thread(0, sys0.coords(np.eye(1)))
    assert chain_norm(small_chain, unit) == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    sys1 = OperatorSystem.full(small_chain.ambients[1])
    t = Thread(1, sys1.coords(mc.random_complex((2, 2), rng)))
    pushed = push_thread(small_chain, t, 2)
    assert pushed.stage == 2
    assert abs(chain_norm(small_chain, pushed) - chain_norm(small_chain, t)) <= 1e-9
    assert abs(chain_norm(small_chain, push_thread(small_chain, unit, 2)) - 1.0) <= 1e-9


def test_level_two_thread_stable(small_chain):
    rng = np.random.default_rng(3)
    sys1 = OperatorSystem.full(small_chain.ambients[1])
    coords = np.array([[sys1.coords(mc.random_complex((2, 2), rng)) for _ in range(2)] for _ in range(2)])
    t = Thread(1, coords)
    before = chain_norm(small_chain, t)
    after = chain_norm(small_chain, push_thread(small_chain, t, 2))
    assert before == pytest.approx(element_norm(sys1, coords, 2))
    assert abs(before - after) <= 1e-9


# -- extension property ----------------------------------------------------------------------

def test_extension_of_handled_embedding(rich_chain):
    last = len(rich_chain) - 1
    e = tuple_entry(rich_chain)
    F = OperatorSystem.full(AmbientAlgebra(2))
    phi = SystemMap.from_images(F, [rich_chain.push(e.g.apply(x), e.key[1], last) for x in F.basis],
                                top_system(rich_chain))
    res = extension_test(rich_chain, F, phi, 1e-6)
    assert res.success and res.defect <= 1e-6
    assert res.stage == last


def test_extension_near_scheduled_tuple(rich_chain):
    last = len(rich_chain) - 1
    e = tuple_entry(rich_chain)
    E = system_span(AmbientAlgebra(2), [SZ])
    N = rich_chain.sizes[-1]
    h = mc.random_hermitian(N, np.random.default_rng(4))
    img = rich_chain.push(e.g.apply(E.basis[1]), e.key[1], last) + 0.01 * h / mc.operator_norm(h)
    phi = SystemMap.from_images(E, [np.eye(N), img], top_system(rich_chain))
    res = extension_test(rich_chain, E, phi, 0.3)
    assert res.success and res.defect <= 0.3
    diff = SystemMap.from_images(E, [res.psi.apply(x) - y for x, y in zip(E.basis, phi.images)],
                                 top_system(rich_chain))
    assert cb_norm_subspace(diff).value == pytest.approx(res.defect, abs=1e-6)


def test_extension_far_map_reports_nearest(rich_chain):
    E = system_span(AmbientAlgebra(2), [SZ])
    N = rich_chain.sizes[-1]
    far = np.diag([(-1.0) ** i for i in range(N)])
    far[-1, -1] = -1.0
    phi = SystemMap.from_images(E, [np.eye(N), far], top_system(rich_chain))
    res = extension_test(rich_chain, E, phi, 1e-3)
    assert not res.success
    assert res.nearest is not None
    assert 1e-3 < res.nearest_distance < np.inf


# -- back and forth --------------------------------------------------------------------------

def test_back_and_forth_identity(small_chain):
    rng = np.random.default_rng(5)
    E = system_span(small_chain.ambients[-1], [mc.random_complex((3, 3), rng)])
    res = back_and_forth(small_chain, E, SystemMap.from_images(E, E.basis, top_system(small_chain)))
    assert res.defect <= 1e-9
    assert res.certificate.passed


def test_back_and_forth_recovers_block_swap(block_chain):
    amb = block_chain.ambients[-1]
    assert amb.block_dims == (2, 2)
    swap = UcpMap.from_function(lambda x: mc.direct_sum([x[2:, 2:], x[:2, :2]]), 4, 4, _blocks_of(amb))
    rng = np.random.default_rng(6)
    E = system_span(amb, [mc.direct_sum([mc.random_complex((2, 2), rng), mc.random_complex((2, 2), rng)])])
    phi = SystemMap.from_images(E, [swap.apply(x) for x in E.basis], top_system(block_chain))
    res = back_and_forth(block_chain, E, phi)
    assert res.defect <= 1e-6
    K = len(block_chain) - 1
    for x in E.basis:
        got = res.alpha.apply(res.chain.push(x, K, res.domain_stage))
        want = res.chain.push(swap.apply(x), K, res.codomain_stage)
        assert np.max(np.abs(got - want)) <= 1e-6


def test_back_and_forth_small_delta(small_chain):
    rng = np.random.default_rng(7)
    E = system_span(small_chain.ambients[-1], [mc.random_hermitian(3, rng)])
    h = mc.random_hermitian(3, rng)
    phi = SystemMap.from_images(E, [E.basis[0], E.basis[1] + 1e-4 * h / mc.operator_norm(h)],
                                top_system(small_chain))
    res = back_and_forth(small_chain, E, phi, rounds=3)
    cert = res.certificate
    assert cert.details["delta"] <= 1e-4 + 1e-9
    assert res.defect <= 100 * 2 * 0.01 + cert.details["slack"]
    assert cert.details["slack"] == sum(r["budget"] for r in res.rounds[1:])
    assert cert.passed
    # independent recomputation of the intertwining defect
    K = len(small_chain) - 1
    ins = [res.chain.push(x, K, res.domain_stage) for x in E.basis]
    outs = [res.chain.push(y, K, res.codomain_stage) for y in phi.images]
    src = system_span(res.chain.ambients[res.domain_stage], ins[1:])
    # ins[l] = sum_i M[i, l] src.basis[i], so src.basis[i] = sum_l Minv[l, i] ins[l]
    Minv = np.linalg.inv(np.array([src.coords(x) for x in ins]).T)
    diffs = [res.alpha.apply(b) - sum(Minv[l, i] * outs[l] for l in range(len(outs)))
             for i, b in enumerate(src.basis)]
    check = SystemMap.from_images(src, diffs, OperatorSystem.full(res.chain.ambients[res.codomain_stage]))
    assert cb_norm_subspace(check).value == pytest.approx(res.defect, abs=1e-6)


# -- OMIN estimates --------------------------------------------------------------------------

def test_omin_same_size_is_exact():
    F = OperatorSystem.full(AmbientAlgebra(3))
    x = mc.random_complex((3, 3), np.random.default_rng(8))
    lo, hi = omin_norm_lower(F, F.coords(x), 3)
    assert lo == hi == pytest.approx(element_norm(F, F.coords(x)))


def test_omin_level_one_hermitian_is_spectral():
    rng = np.random.default_rng(9)
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])
    x = E.basis[1] + 0.3 * E.basis[2]
    lo, hi = omin_norm_lower(E, E.coords(x), 1)
    assert lo == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(x))), abs=1e-6)


def test_omin_monotone_in_n():
    rng = np.random.default_rng(10)
    F = OperatorSystem.full(AmbientAlgebra(4))
    for _ in range(3):
        c = F.coords(mc.random_complex((4, 4), rng))
        lows = [omin_norm_lower(F, c, n, seed=1)[0] for n in (1, 2, 3)]
        assert lows[0] <= lows[1] + 1e-6 <= lows[2] + 2e-6


# -- block stages ----------------------------------------------------------------------------

def test_commutative_chain():
    chain = build_gs_n(1, {"K": 2})
    assert all(set(a.block_dims) == {1} for a in chain.ambients)
    assert verify(chain).passed
    top = top_system(chain)
    imgs = [chain.push(b, 0, len(chain) - 1) for b in OperatorSystem.full(chain.ambients[0]).basis] + top.basis
    for a in imgs:
        for b in imgs:
            assert mc.operator_norm(a @ b - b @ a) <= 1e-9
    rng = np.random.default_rng(11)
    c = rng.standard_normal(top.dim) + 1j * rng.standard_normal(top.dim)
    t = Thread(len(chain) - 1, c)
    assert chain_norm(chain, t) == pytest.approx(np.max(np.abs(np.diag(top.element(c)))))


def test_block_chain_verifies(block_chain):
    assert all(set(a.block_dims) == {2} for a in block_chain.ambients)
    assert verify(block_chain).passed
