from __future__ import annotations

import io

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from markovian_rds.errors import MarginalMismatch, NonMonotoneWithoutFallback
from markovian_rds.maps import FiberMap, MapFamily, PhaseSpace, affine, identity, pinched_sine, rotation
from markovian_rds.markov_chain import MarkovChain, dual_transition
from markovian_rds.ulam import (
    DiscretizedMeasure,
    UlamPartition,
    build_ulam,
    cdf_distance_cells,
    closed_cell_classes,
    export_triplets,
    fed_report,
    map_transition_matrix,
    monte_carlo_transition_matrix,
    phi_inverse,
    phi_map,
    read_triplets,
    roundtrip_check,
    spectral_report,
    stationary_vectors,
    xi_fibers,
)

from conftest import STICKY
from test_markov_chain import stochastic_matrices
from test_skew import affine_systems


@st.composite
def permutation_systems(draw, max_m=3, max_N=8):
    """Identity, reflection and rational rotations: each map permutes cells."""
    N = draw(st.integers(2, max_N))
    circle = draw(st.booleans())
    Q = draw(stochastic_matrices(max_m=max_m))
    m = Q.shape[0]
    if circle:
        space = PhaseSpace.circle()
        maps = tuple(rotation(draw(st.integers(0, N - 1)) / N) for _ in range(m))
    else:
        space = PhaseSpace.interval()
        choices = [identity(space), affine(-1.0, 1.0, space)]
        maps = tuple(draw(st.sampled_from(choices)) for _ in range(m))
    return MarkovChain(Q), MapFamily(space, maps), N


def test_partition_edges():
    part = UlamPartition(PhaseSpace.interval(-1, 2), 3)
    np.testing.assert_array_equal(part.edges, [-1, 0, 1, 2])
    np.testing.assert_array_equal(part.midpoints, [-0.5, 0.5, 1.5])
    with pytest.raises(ValueError):
        UlamPartition(PhaseSpace.interval(), 1)


def test_affine_cell_map_hand_case():
    part = UlamPartition(PhaseSpace.interval(), 4)
    U = map_transition_matrix(affine(0.5, 0.5), part).toarray()
    expected = np.zeros((4, 4))
    expected[[0, 1], 2] = 1.0
    expected[[2, 3], 3] = 1.0
    np.testing.assert_array_equal(U, expected)
    U = map_transition_matrix(affine(-1.0, 1.0), part).toarray()
    np.testing.assert_array_equal(U, np.fliplr(np.eye(4)))
    # slope 3/4, shift 1/4: the first image straddles the midpoint
    U = map_transition_matrix(affine(0.75, 0.25), UlamPartition(PhaseSpace.interval(), 2)).toarray()
    np.testing.assert_allclose(U, [[2 / 3, 1 / 3], [0.0, 1.0]], atol=1e-12)


def test_rotation_cell_maps_are_shifts():
    part = UlamPartition(PhaseSpace.circle(), 8)
    U = map_transition_matrix(rotation(3 / 8), part).toarray()
    np.testing.assert_array_equal(U, np.roll(np.eye(8), 3, axis=1))
    U = map_transition_matrix(rotation(1 / 16), part).toarray()
    np.testing.assert_allclose(U, 0.5 * (np.eye(8) + np.roll(np.eye(8), 1, axis=1)), atol=1e-12)


@pytest.mark.parametrize("f", [pinched_sine(0.8), affine(-0.7, 0.9), pinched_sine(0.5, PhaseSpace.circle()), rotation(0.3137)])
def test_exact_cell_map_matches_monte_carlo(f):
    part = UlamPartition(f.space, 16)
    U = map_transition_matrix(f, part).toarray()
    K = 40_000
    V = monte_carlo_transition_matrix(f, part, K, seed=2).toarray()
    # binomial standard error per entry is at most 1/(2 sqrt K)
    assert np.abs(U - V).max() < 5 / (2 * np.sqrt(K))
    np.testing.assert_allclose(U.sum(axis=1), 1.0, atol=1e-12)


@given(affine_systems(), st.integers(2, 40), st.sampled_from(["hat", "tilde"]))
def test_ulam_matrices_are_row_stochastic(system, N, kernel):
    chain, family = system
    M = build_ulam(chain, family, N, kernel)
    assert M.shape == (chain.m * N, chain.m * N)
    assert M.row_sum_defect() < 1e-12
    assert M.matrix.data.min() > 0


def test_block_structure(ifs_family):
    chain = MarkovChain(STICKY)
    N = 8
    hat = build_ulam(chain, ifs_family, N, "hat").matrix.toarray()
    tilde = build_ulam(chain, ifs_family, N, "tilde").matrix.toarray()
    U = [map_transition_matrix(f, UlamPartition(ifs_family.space, N)).toarray() for f in ifs_family.maps]
    for t in range(2):
        for a in range(2):
            np.testing.assert_array_equal(hat[t * N:(t + 1) * N, a * N:(a + 1) * N], STICKY[t, a] * U[a])
            np.testing.assert_array_equal(tilde[t * N:(t + 1) * N, a * N:(a + 1) * N], STICKY[t, a] * U[t])


def test_nonmonotone_needs_fallback(interval):
    logistic = FiberMap(
        "logistic", lambda x: 4 * x * (1 - x), lambda x: 4 - 8 * np.asarray(x, dtype=float), interval, 1, 4.0, monotone=False
    )
    fam = MapFamily(interval, (logistic,), allow_nonmonotone=True)
    chain = MarkovChain([[1.0]])
    with pytest.raises(NonMonotoneWithoutFallback):
        build_ulam(chain, fam, 16)
    M = build_ulam(chain, fam, 16, mc_samples=200, seed=1)
    assert M.metadata["method"] == "monte_carlo"
    assert M.row_sum_defect() < 1e-12
    with pytest.raises(ValueError):
        MapFamily(interval, (logistic,))


def test_ifs_bernoulli_stationary_is_uniform(ifs_family):
    chain = MarkovChain([[0.5, 0.5], [0.5, 0.5]])
    M = build_ulam(chain, ifs_family, 32, "tilde")
    (v,) = stationary_vectors(M)
    np.testing.assert_allclose(v.x_marginal, 1 / 32, atol=1e-14)
    np.testing.assert_allclose(v.state_marginal, [0.5, 0.5], atol=1e-14)


def test_stationary_vector_against_dense_solve(pinched_family):
    M = build_ulam(MarkovChain(STICKY), pinched_family, 32, "hat")
    vs = stationary_vectors(M)
    A = M.matrix.toarray()
    for v in vs:
        np.testing.assert_allclose(v.weights @ A, v.weights, atol=1e-12)
        assert v.weights.sum() == pytest.approx(1.0)
    w, V = np.linalg.eig(A.T)
    assert np.sum(np.abs(w - 1) < 1e-8) == len(vs) == 2


def test_spectral_report_matches_dense_eigvals(pinched_family):
    M = build_ulam(MarkovChain(STICKY), pinched_family, 64, "hat")
    rep = spectral_report(M, k=6)
    dense = np.sort(np.abs(np.linalg.eigvals(M.matrix.toarray())))[::-1][:6]
    live = dense > 0.05
    np.testing.assert_allclose(np.array(rep.moduli)[live], dense[live], atol=1e-8)
    assert rep.unit_count == 2
    assert rep.eigenvalue_one_count == 2
    assert rep.gap > 0.05


def test_spectral_report_small_matrix_uses_full_spectrum():
    C = sp.csr_matrix(np.roll(np.eye(3), 1, axis=1))
    rep = spectral_report(C, k=3)
    assert rep.unit_count == 3
    assert rep.eigenvalue_one_count == 1
    assert rep.iterations == 1
    assert len(rep.to_dict()["eigenvalues_re"]) == 3


@given(permutation_systems(max_m=2))
def test_eigencount_equals_number_of_densities(system):
    chain, family, N = system
    M = build_ulam(chain, family, N, "hat")
    rep = spectral_report(M, k=min(16, M.shape[0]))
    assert rep.eigenvalue_one_count == len(stationary_vectors(M)) == len(closed_cell_classes(M))


@given(permutation_systems())
def test_correspondence_on_permutation_systems(system):
    chain, family, N = system
    part = UlamPartition(family.space, N)
    hat = build_ulam(chain, family, N, "hat")
    tilde = build_ulam(chain, family, N, "tilde", cell_maps=hat.cell_maps)
    dual = dual_transition(chain)
    At = tilde.matrix.toarray()
    for mu in stationary_vectors(hat):
        assert roundtrip_check(mu, chain, family, part, dual, hat.cell_maps) < 1e-10
        nu = phi_map(mu, dual)
        np.testing.assert_allclose(nu.weights @ At, nu.weights, atol=1e-10)
        back = phi_inverse(nu, family, part, hat.cell_maps)
        np.testing.assert_allclose(back.weights, mu.weights, atol=1e-10)
    # the images span the tilde fixed space
    images = np.array([phi_map(mu, dual).weights for mu in stationary_vectors(hat)])
    fixed = np.array([v.weights for v in stationary_vectors(tilde)])
    assert np.linalg.matrix_rank(np.vstack([images, fixed]), tol=1e-8) == len(fixed) == len(images)


@given(affine_systems(), st.integers(2, 24))
def test_correspondence_beyond_permutations(system, N):
    chain, family = system
    if chain.p.min() <= 0:
        return
    hat = build_ulam(chain, family, N, "hat")
    tilde = build_ulam(chain, family, N, "tilde", cell_maps=hat.cell_maps)
    dual = dual_transition(chain)
    for mu in stationary_vectors(hat):
        if np.abs(mu.state_marginal - chain.p).max() > 1e-9:
            continue
        assert roundtrip_check(mu, chain, family, hat.partition, dual, hat.cell_maps) < 1e-10
        nu = phi_map(mu, dual)
        assert np.abs(tilde.matrix.T @ nu.weights - nu.weights).max() < 1e-10


def test_xi_rejects_wrong_marginal(ifs_family):
    chain = MarkovChain(STICKY)
    w = np.full(16, 1 / 16)
    with pytest.raises(MarginalMismatch):
        xi_fibers(DiscretizedMeasure(w, 2, 8), dual_transition(chain))


def test_cdf_distance_against_fine_integration():
    rng = np.random.default_rng(4)
    space = PhaseSpace.interval()
    w1 = rng.random(8)
    w1 /= w1.sum()
    w2 = rng.random(12)
    w2 /= w2.sum()
    x = np.linspace(0, 1, 480_001)

    def cdf(w):
        e = UlamPartition(space, len(w)).edges
        return np.interp(x, e, np.concatenate([[0.0], np.cumsum(w)]))

    oracle = np.trapezoid(np.abs(cdf(w1) - cdf(w2)), x)
    assert cdf_distance_cells(w1, w2, space) == pytest.approx(oracle, abs=1e-9)
    assert cdf_distance_cells(w1, w1, space) == 0.0
    # unit mass moved by one cell of width 1/4
    assert cdf_distance_cells([1, 0, 0, 0], [0, 1, 0, 0], space) == pytest.approx(0.25)


def test_triplet_roundtrip(pinched_family):
    M = build_ulam(MarkovChain(STICKY), pinched_family, 16, "hat")
    buf = io.StringIO()
    export_triplets(M, buf)
    text = buf.getvalue()
    assert text.startswith("# ulam kernel=hat m=2 N=16 space=interval\n")
    back = read_triplets(io.StringIO(text))
    assert (back != M.matrix).nnz == 0


def test_fed_report_on_ifs(ifs_family):
    M = build_ulam(MarkovChain(STICKY), ifs_family, 16, "hat")
    rep = fed_report(M)
    assert len(rep.densities) == 1
    assert rep.maximal_support_ok
    assert rep.to_dict()["n_densities"] == 1


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31))
def test_left_multiply_matches_dense(n, k, seed):
    from markovian_rds.ulam import left_multiply

    rng = np.random.default_rng(seed)
    A = rng.random((n, k)) * (rng.random((n, k)) > 0.6)
    v = rng.standard_normal(n)
    np.testing.assert_allclose(left_multiply(v, sp.csr_matrix(A)), v @ A, atol=1e-12)
    np.testing.assert_allclose(left_multiply(v, sp.coo_matrix(A)), v @ A, atol=1e-12)
