import numpy as np
import pytest

from fastattrib.diffusion import Block
from fastattrib.fisher import (FisherApprox, FisherDiag, FisherPlan, SingularFisherError, brute_force_fisher,
                               dense_block, diag_from_pairs, ekfac_correct, ekfac_from_pairs, estimate_diag,
                               estimate_kfac, fisher_inv_vprod, fisher_vprod, fit_fisher, kfac_from_pairs,
                               load_fisher, sample_pairs, save_fisher)
from fastattrib.numerics import PreconditionError, vec_col


def block_index(theta, name):
    return next(k for k, b in enumerate(theta.blocks) if b.name == name)


def test_single_sample_diag_and_kfac(tiny_dataset, tiny_theta):
    plan = FisherPlan(1, seed=2)
    one = [tiny_dataset[0]]
    pairs = next(sample_pairs(tiny_theta, one, plan))
    grad = np.concatenate([vec_col(g.T @ a) for a, g in pairs])
    d = estimate_diag(tiny_theta, one, plan)
    assert np.allclose(d.diag, grad ** 2, rtol=1e-13, atol=0)
    kf = estimate_kfac(tiny_theta, one, plan)
    for (a, g), blk in zip(pairs, kf):
        assert np.allclose(blk.A, np.outer(a[0], a[0]), rtol=1e-14, atol=0)
        assert np.allclose(blk.B, np.outer(g[0], g[0]), rtol=1e-14, atol=0)


def test_diag_invariant_to_duplication(tiny_dataset, tiny_theta):
    plan = FisherPlan(2, seed=1)
    ex = list(tiny_dataset)
    d1 = estimate_diag(tiny_theta, ex, plan)
    d2 = estimate_diag(tiny_theta, ex + ex, plan)
    assert np.allclose(d1.diag, d2.diag, rtol=1e-12)
    assert d2.sample_count == 2 * d1.sample_count


@pytest.mark.parametrize("layer", ["cond_embed", "trunk.1"])
def test_diag_matches_dense_oracle(tiny_dataset, tiny_theta, layer):
    plan = FisherPlan(1, seed=3)
    ex = list(tiny_dataset)[:20]
    dense = brute_force_fisher(tiny_theta, ex, plan, [layer])
    b = tiny_theta.block(layer)
    diag = estimate_diag(tiny_theta, ex, plan).diag[b.offset: b.offset + b.size]
    assert np.allclose(diag, np.diag(dense), rtol=1e-12, atol=0)
    assert np.trace(dense) == pytest.approx(diag.sum(), rel=1e-12)


def test_dense_oracle_properties(tiny_dataset, tiny_theta):
    plan = FisherPlan(1, seed=3)
    dense = brute_force_fisher(tiny_theta, [tiny_dataset[0]], plan, ["trunk.1"])
    pairs = next(sample_pairs(tiny_theta, [tiny_dataset[0]], plan))
    a, g = pairs[block_index(tiny_theta, "trunk.1")]
    grad = vec_col(np.outer(g[0], a[0]))
    assert np.allclose(dense, np.outer(grad, grad), rtol=1e-13, atol=1e-300)
    dense = brute_force_fisher(tiny_theta, list(tiny_dataset), plan, ["trunk.1"])
    assert np.allclose(dense, dense.T)
    assert np.linalg.eigvalsh(dense).min() > -1e-10 * np.abs(dense).max()
    with pytest.raises(PreconditionError):
        brute_force_fisher(tiny_theta, list(tiny_dataset), plan)


def rank1_pairs(n=50, d_in=4, d_out=3, seed=0):
    """Every sample shares the activation; only the backward signal varies,
    which makes the Kronecker factorization exact."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(d_in)
    g = rng.standard_normal((n, d_out)) * rng.standard_normal((n, 1))
    return [[(np.tile(a, (n, 1)), g)]], Block("w", 0, d_out, d_in, False)


def dense_from_pairs(chunks):
    rows = []
    for pairs in chunks:
        a, g = pairs[0]
        rows.append(np.einsum("ni,nj->nji", g, a).reshape(len(a), -1))
    G = np.vstack(rows)
    return G.T @ G / len(G)


def approx_from(tag, chunks, blk, damping=0.0):
    if tag == "kfac":
        kf = kfac_from_pairs(chunks, [blk])
        return FisherApprox("kfac", [blk], {blk.name: kf[0]}, damping, kf[0].sample_count)
    kf = kfac_from_pairs(chunks, [blk])
    ek = ekfac_from_pairs(chunks, [blk], kf)
    return FisherApprox("ekfac", [blk], {blk.name: ek[0]}, damping, ek[0].sample_count)


@pytest.mark.parametrize("tag", ["kfac", "ekfac"])
def test_rank1_construction_is_exact(tag):
    chunks, blk = rank1_pairs()
    dense = dense_from_pairs(chunks)
    F = approx_from(tag, chunks, blk)
    assert np.linalg.norm(dense_block(F, "w") - dense) / np.linalg.norm(dense) < 1e-8
    v = np.random.default_rng(1).standard_normal(blk.size)
    assert np.linalg.norm(fisher_vprod(F, v) - dense @ v) / np.linalg.norm(dense @ v) < 1e-8
    F.damping = 1e-3
    x = fisher_inv_vprod(F, v)
    ref = np.linalg.solve(dense + 1e-3 * np.eye(blk.size), v)
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-6


def test_ekfac_beats_kfac_on_general_data(tiny_dataset, tiny_theta):
    plan = FisherPlan(17, seed=4)          # 30 examples x 17 = 510 samples
    ex = list(tiny_dataset)
    dense = brute_force_fisher(tiny_theta, ex, plan, ["trunk.1"])
    errs = {}
    for tag in ("kfac", "ekfac"):
        F = fit_fisher(tiny_theta, ex, plan, tag=tag, damping=0.0)
        errs[tag] = np.linalg.norm(dense_block(F, "trunk.1") - dense)
    assert errs["ekfac"] <= errs["kfac"]


def test_ekfac_identity_bases_give_squared_gradients():
    rng = np.random.default_rng(0)
    a = np.zeros((40, 3))
    a[np.arange(40), rng.integers(0, 3, 40)] = rng.standard_normal(40)
    g = np.zeros((40, 2))
    g[np.arange(40), rng.integers(0, 2, 40)] = rng.standard_normal(40)
    blk = Block("w", 0, 2, 3, False)
    chunks = [[(a, g)]]
    kf = kfac_from_pairs(chunks, [blk])
    assert np.count_nonzero(kf[0].A - np.diag(np.diag(kf[0].A))) == 0
    ek = ekfac_from_pairs(chunks, [blk], kf)[0]
    # eigenbases of diagonal factors are signed permutations, so S is a
    # permuted mean of squared gradients
    per_sample = np.einsum("ni,nj->nij", g, a) ** 2
    mean_sq = per_sample.mean(0)
    back = (np.abs(ek.U_B) @ ek.S @ np.abs(ek.U_A).T)
    assert np.allclose(back, mean_sq, rtol=1e-12, atol=1e-15)
    assert np.all(ek.S >= 0)


def test_ekfac_structure(tiny_dataset, tiny_theta):
    F = fit_fisher(tiny_theta, list(tiny_dataset), FisherPlan(2, seed=1), tag="ekfac")
    for b in F.blocks:
        e = F.data[b.name]
        assert e.stored_floats() == b.cols ** 2 + b.rows ** 2 + b.rows * b.cols
        assert np.allclose(e.U_A.T @ e.U_A, np.eye(b.cols), atol=1e-8)
        assert np.allclose(e.U_B.T @ e.U_B, np.eye(b.rows), atol=1e-8)
        assert np.all(e.S >= 0) and np.all(np.isfinite(e.S))
    assert F.damping == pytest.approx(1e-4 * F.mean_eigenvalue())


def test_diag_inverse_examples():
    blk = Block("w", 0, 2, 1, False)
    F = FisherApprox("diag", [blk], FisherDiag(np.array([2.0, 4.0]), 1), 0.0)
    assert np.allclose(fisher_inv_vprod(F, np.array([2.0, 4.0])), [1.0, 1.0])
    I = FisherApprox("diag", [blk], FisherDiag(np.ones(2), 1), 0.0)
    v = np.array([0.3, -7.0])
    assert np.array_equal(fisher_inv_vprod(I, v), v)
    Z = FisherApprox("diag", [blk], FisherDiag(np.array([0.0, 1.0]), 1), 0.0)
    with pytest.raises(SingularFisherError):
        fisher_inv_vprod(Z, v)


def test_singular_block_names_layer():
    chunks, blk = rank1_pairs(n=5)
    F = approx_from("ekfac", chunks, blk)
    with pytest.raises(SingularFisherError, match="w"):
        fisher_inv_vprod(F, np.ones(blk.size))


@pytest.mark.parametrize("tag", ["diag", "kfac", "ekfac"])
def test_fisher_persistence(tmp_path, tiny_dataset, tiny_theta, tag):
    F = fit_fisher(tiny_theta, list(tiny_dataset), FisherPlan(1, seed=1), tag=tag)
    save_fisher(tmp_path / tag, F)
    G = load_fisher(tmp_path / tag)
    v = np.random.default_rng(0).standard_normal(F.n_params)
    assert np.array_equal(fisher_inv_vprod(F, v), fisher_inv_vprod(G, v))
