import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bessplan.exceptions import (CycleDetected, Disconnected, MultipleSlack, NegativeVoltageSquare,
                                 UnknownBus, ValidationError)
from bessplan.network import (ALPHA_PLUS, SLACK, Bus, Line, Network, balanced_outer, gamma_matrix,
                              is_invertible, path_to_root, subtree, validate_radial)
from bessplan.synth import delta_wye_admittance

from conftest import chain, star


def test_two_bus_tree():
    tree = validate_radial(chain(2))
    assert tree.parent[1] == 0


def test_three_bus_cycle_rejected():
    buses = (Bus(0, SLACK), Bus(1), Bus(2))
    lines = (Line(0, 1, np.eye(3)), Line(1, 2, np.eye(3)), Line(2, 0, np.eye(3)))
    with pytest.raises(CycleDetected):
        validate_radial(Network(buses, lines))


def test_disconnected_and_multiple_slack():
    with pytest.raises(Disconnected):
        validate_radial(Network((Bus(0, SLACK), Bus(1), Bus(2)), (Line(0, 1, np.eye(3)),)))
    with pytest.raises(MultipleSlack):
        validate_radial(Network((Bus(0, SLACK), Bus(1, SLACK)), (Line(0, 1, np.eye(3)),)))


def test_line_pointing_at_slack_is_disconnected():
    with pytest.raises(Disconnected):
        validate_radial(Network((Bus(0, SLACK), Bus(1)), (Line(1, 0, np.eye(3)),)))


def test_eight_bus_chain_depth():
    tree = validate_radial(chain(8))
    assert tree.height == 7
    assert max(tree.depth.values()) == 7


def test_subtree_examples():
    tree = chain(5).tree
    assert subtree(tree, 4) == {4}
    assert subtree(tree, 3) == {3, 4}
    assert subtree(star(5).tree, 0) == set(range(5))
    with pytest.raises(UnknownBus):
        subtree(tree, 9)


def test_path_examples():
    tree = chain(3).tree
    assert path_to_root(tree, 0) == []
    assert [l.key for l in path_to_root(tree, 2)] == [(0, 1), (1, 2)]
    tree8 = chain(8).tree
    assert len(path_to_root(tree8, 7)) == tree8.depth[7]


def test_gamma_entries():
    g = gamma_matrix()
    alpha = np.exp(-2j * np.pi / 3)
    assert g[0, 0] == 1
    assert abs(g[1, 0] - alpha) < 1e-15
    np.testing.assert_allclose(g, np.outer(ALPHA_PLUS, ALPHA_PLUS.conj()), atol=1e-12)
    assert np.linalg.matrix_rank(g) == 1


def test_balanced_outer_examples():
    assert np.all(balanced_outer(0.0) == 0)
    a = balanced_outer(1.0)
    assert abs(np.trace(a) - 3) < 1e-12
    np.testing.assert_allclose(np.diag(balanced_outer(1.05**2)).real, 1.1025, atol=1e-12)
    with pytest.raises(NegativeVoltageSquare):
        balanced_outer(-0.1)


@given(st.floats(0, 10))
def test_balanced_outer_spectrum(vc):
    m = balanced_outer(vc)
    np.testing.assert_allclose(m, m.conj().T, atol=1e-12)
    ev = np.sort(np.linalg.eigvalsh(m))
    np.testing.assert_allclose(ev, [0, 0, 3 * vc], atol=1e-9 * (1 + vc))


def test_is_invertible_examples():
    assert is_invertible(np.eye(3))
    y = np.eye(3, dtype=complex)
    y[2] = 0
    assert not is_invertible(y)
    assert not is_invertible(delta_wye_admittance())
    rng = np.random.default_rng(3)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    assert abs(np.linalg.det(m)) > 1e-6 and is_invertible(m)


@st.composite
def random_trees(draw):
    n = draw(st.integers(2, 12))
    parents = [draw(st.integers(0, j - 1)) for j in range(1, n)]
    buses = (Bus(0, SLACK),) + tuple(Bus(j) for j in range(1, n))
    return Network(buses, tuple(Line(p, j, np.eye(3)) for j, p in zip(range(1, n), parents)))


@settings(max_examples=50, deadline=None)
@given(random_trees())
def test_subtrees_tile(net):
    tree = net.tree
    n = net.n_buses
    for j in range(n):
        kids = tree.children[j]
        for a in kids:
            for b in kids:
                if a != b:
                    assert not subtree(tree, a) & subtree(tree, b)
        union = set().union(*(subtree(tree, k) for k in kids)) | {j}
        assert union == subtree(tree, j)
    assert subtree(tree, 0) == set(range(n))
    for j in range(1, n):
        path = path_to_root(tree, j)
        assert path[-1].to_bus == j and path[0].from_bus == 0


def test_bus_validation():
    with pytest.raises(ValidationError):
        Bus(1, s_min=np.full(3, 1 + 0j), s_max=np.zeros(3))
    with pytest.raises(ValidationError):
        Line(1, 1, np.eye(3))
