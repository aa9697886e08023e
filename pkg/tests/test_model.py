"""Model construction checked against dense Kronecker-product references."""

import numpy as np
import pytest

from nessrbm import model
from nessrbm.errors import TooLarge

from oracles import (SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z, dense_liouvillian,
                     dense_site_operator, dense_xxz_hamiltonian)


def test_configuration_encoding():
    assert model.spins_to_index([-1, -1, -1]) == 0
    assert model.spins_to_index([1, 1, 1]) == 7
    # site 1 is the least significant bit
    assert model.spins_to_index([1, -1, -1]) == 1
    assert model.spins_to_index([-1, 1, -1]) == 2
    for idx in range(8):
        assert model.spins_to_index(model.index_to_spins(idx, 3)) == idx


def test_spin_matrix_matches_scalar_decode():
    idx = np.arange(16)
    mat = model.spin_matrix(idx, 4)
    for i in idx:
        assert np.array_equal(mat[i], model.index_to_spins(i, 4).astype(float))


def test_delta_sz():
    diag = model.ConfigurationPair.from_spins([1, -1, 1], [1, -1, 1])
    assert model.delta_sz(diag) == 0
    x = model.ConfigurationPair.from_spins([1, -1], [-1, -1])
    assert model.delta_sz(x) == 2
    rng = np.random.default_rng(7)
    for _ in range(50):
        r, c = rng.integers(0, 16, size=2)
        pair = model.ConfigurationPair(4, int(r), int(c))
        spins_diff = int(pair.row_spins.sum() - pair.col_spins.sum())
        assert model.delta_sz(pair) == spins_diff


def test_chain_and_drive_validation():
    with pytest.raises(ValueError):
        model.ChainSpec(0)
    with pytest.raises(TooLarge):
        model.ChainSpec(model.MAX_SITES + 1)
    with pytest.raises(ValueError):
        model.DriveSpec((0.1,), (0.1, 0.2))
    with pytest.raises(ValueError):
        model.DriveSpec((-0.1,), (0.0,))


def test_model_presets():
    chain, drive = model.model_a(4)
    assert chain.coupling == pytest.approx(0.105)
    assert chain.anisotropy == 1.0
    assert drive.gamma_plus == pytest.approx((0.21, 0.2, 0.2, 0.2))
    assert drive.gamma_minus == pytest.approx((0.2, 0.2, 0.2, 0.21))
    # mirrored boundaries: rate of one sign on site 1 equals the other on site N
    assert drive.gamma_plus[0] == drive.gamma_minus[-1]
    assert drive.gamma_minus[0] == drive.gamma_plus[-1]

    chain_b, drive_b = model.model_b(4)
    assert chain_b.coupling == 1.0 and chain_b.anisotropy == 1.0
    assert drive_b.gamma_plus == (0.2, 0.0, 0.0, 0.0)
    assert drive_b.gamma_minus == (0.0, 0.0, 0.0, 0.2)


def test_hamiltonian_small_diagonal():
    chain = model.ChainSpec(3, coupling=0.5, anisotropy=2.0)
    h = model.build_hamiltonian(chain).to_dense()
    # all-down configuration: both bonds aligned
    assert h[0, 0] == pytest.approx(0.5 * 2.0 * 2)
    # |up down down>: bond 1 antiparallel, bond 2 aligned
    assert h[1, 1] == pytest.approx(0.5 * 2.0 * 0)


@pytest.mark.parametrize("n,j,delta", [(2, 1.0, 1.0), (3, 0.105, 1.0), (4, 1.0, 0.5)])
def test_hamiltonian_matches_kronecker_oracle(n, j, delta):
    chain = model.ChainSpec(n, coupling=j, anisotropy=delta)
    h = model.build_hamiltonian(chain).to_dense()
    ref = dense_xxz_hamiltonian(n, j, delta)
    assert np.allclose(h, ref, atol=1e-12)
    assert np.allclose(h, h.conj().T, atol=1e-12)


def test_hamiltonian_commutes_with_total_sz():
    chain = model.ChainSpec(4, coupling=0.7, anisotropy=1.3)
    h = model.build_hamiltonian(chain).to_dense()
    sz_total = sum(dense_site_operator(SIGMA_Z, i, 4) for i in range(4))
    assert np.allclose(h @ sz_total - sz_total @ h, 0.0, atol=1e-12)


def test_jump_operators_model_b():
    _, drive = model.model_b(3, gamma=0.2)
    ops = model.build_jump_operators(drive)
    assert len(ops) == 2
    raise_1 = np.sqrt(0.2) * dense_site_operator(SIGMA_PLUS, 0, 3)
    lower_3 = np.sqrt(0.2) * dense_site_operator(SIGMA_MINUS, 2, 3)
    assert np.allclose(ops[0].to_dense(), raise_1, atol=1e-15)
    assert np.allclose(ops[1].to_dense(), lower_3, atol=1e-15)


def test_jump_operators_model_a_count_and_rates():
    _, drive = model.model_a(3, gamma=0.2, bias=0.05)
    ops = model.build_jump_operators(drive)
    assert len(ops) == 6
    assert drive.gamma_plus[0] == pytest.approx(0.21)
    assert drive.gamma_minus[0] == pytest.approx(0.2)


def _oracle_jumps(drive, n):
    ops = []
    for i in range(n):
        if drive.gamma_minus[i] > 0:
            ops.append(np.sqrt(drive.gamma_minus[i]) * dense_site_operator(SIGMA_MINUS, i, n))
        if drive.gamma_plus[i] > 0:
            ops.append(np.sqrt(drive.gamma_plus[i]) * dense_site_operator(SIGMA_PLUS, i, n))
    return ops


@pytest.mark.parametrize("preset", [model.model_a, model.model_b])
@pytest.mark.parametrize("n", [2, 3, 4])
def test_lindblad_matrix_matches_vectorization_identity(preset, n):
    chain, drive = preset(n)
    lmap = model.build_lindblad_map(chain, drive)
    dense = lmap.pair_matrix().toarray()
    ref = dense_liouvillian(dense_xxz_hamiltonian(n, chain.coupling, chain.anisotropy),
                            _oracle_jumps(drive, n))
    assert np.allclose(dense, ref, atol=1e-12)


def test_single_site_decay_rows():
    chain = model.ChainSpec(1)
    drive = model.DriveSpec((0.0,), (1.0,))
    lmap = model.build_lindblad_map(chain, drive)

    up_up = model.ConfigurationPair(1, 1, 1)
    row = lmap.row(up_up)
    assert len(row) == 1
    assert row[0][0] == up_up
    assert row[0][1] == pytest.approx(-1.0)

    down_down = model.ConfigurationPair(1, 0, 0)
    row = lmap.row(down_down)
    assert len(row) == 1
    assert row[0][0] == up_up  # gain: rho(up,up) feeds the (down,down) entry
    assert row[0][1] == pytest.approx(1.0)

    # coherence decays at half the population rate
    up_down = model.ConfigurationPair(1, 1, 0)
    row = lmap.row(up_down)
    assert len(row) == 1
    assert row[0][1] == pytest.approx(-0.5)


def test_rows_preserve_delta_sz():
    chain, drive = model.model_a(4)
    lmap = model.build_lindblad_map(chain, drive)
    rng = np.random.default_rng(3)
    for _ in range(40):
        pair = model.ConfigurationPair(4, int(rng.integers(16)), int(rng.integers(16)))
        for other, _ in lmap.row(pair):
            assert model.delta_sz(other) == model.delta_sz(pair)


def test_trace_preservation_against_dense_oracle():
    chain, drive = model.model_a(3)
    lmap = model.build_lindblad_map(chain, drive)
    rng = np.random.default_rng(11)
    dim = 8
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = a + a.conj().T
    out = lmap.pair_matrix() @ rho.reshape(-1)
    diag_pairs = np.arange(dim) * dim + np.arange(dim)
    assert abs(out[diag_pairs].sum()) < 1e-12


def test_row_memoization_returns_identical_object():
    chain, drive = model.model_b(3)
    lmap = model.build_lindblad_map(chain, drive)
    first = lmap.row_arrays(17)
    second = lmap.row_arrays(17)
    assert first is second


def test_rows_for_agrees_with_single_rows():
    chain, drive = model.model_a(3)
    lmap = model.build_lindblad_map(chain, drive)
    pairs = np.array([0, 5, 17, 63, 21], dtype=np.int64)
    indptr, cols, vals = lmap.rows_for(pairs)
    for i, p in enumerate(pairs):
        c1, v1 = lmap.row_arrays(int(p))
        assert np.array_equal(cols[indptr[i]:indptr[i + 1]], c1)
        assert np.array_equal(vals[indptr[i]:indptr[i + 1]], v1)


def test_pair_matrix_size_guard():
    chain = model.ChainSpec(9)
    drive = model.DriveSpec((0.1,) * 9, (0.1,) * 9)
    lmap = model.build_lindblad_map(chain, drive)
    with pytest.raises(TooLarge):
        lmap.pair_matrix()
