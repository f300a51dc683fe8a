"""Pruning oracles and enrichment-loop bookkeeping, determinism, resume."""

import numpy as np
import pytest

from blisskit.bootstrap import (
    BootstrapConfig,
    load_round_state,
    prepare_state,
    prune,
    register_candidates,
    run_bootstrap,
    run_round,
    save_round_state,
)
from blisskit.fitting import posed_surface_chamfer
from blisskit.mesh import MeshError, build_diff_ops
from blisskit.rig import skin
from blisskit.shape_space import Registration, RegistrySets
from blisskit.synthlab import FamilyConfig, make_family, make_scan


def test_prune_spec_oracle():
    d = np.array([1.0, 1.2, 3.0])
    sigma = d.std()  # population
    assert sigma == pytest.approx(0.8994, abs=1e-4)
    accepted = prune(d)
    assert sorted(accepted.tolist()) == [0, 1]


def test_prune_all_equal_accepts_all():
    accepted = prune(np.array([0.7, 0.7, 0.7, 0.7]))
    assert sorted(accepted.tolist()) == [0, 1, 2, 3]


def test_prune_single_candidate():
    assert prune(np.array([42.0])).tolist() == [0]


def test_prune_shift_invariance():
    rng = np.random.default_rng(0)
    d = rng.random(25)
    base = prune(d)
    for c in rng.standard_normal(5) * 10:
        shifted = prune(d + c)
        assert np.array_equal(shifted, base)
        assert (d + c).min() + (d + c).std() == pytest.approx(d.min() + d.std() + c)


def test_prune_rejects_bad_input():
    with pytest.raises(MeshError):
        prune(np.array([]))
    with pytest.raises(MeshError):
        prune(np.array([1.0, np.nan]))


# --- miniature end-to-end fixtures ---------------------------------------------

@pytest.fixture(scope="module")
def mini():
    family = make_family(FamilyConfig(n_vertices=162, seed=21))
    rng = np.random.default_rng(22)

    def gen(scan_id, seed):
        alpha = family.sample_alpha(rng)
        pose = family.sample_pose(rng)
        cloud, registration = make_scan(family, alpha, pose, density=700,
                                        noise_std=0.001, seed=seed)
        return Registration(scan_id, registration, cloud)

    r_pca = {f"p{i:02d}": gen(f"p{i:02d}", 100 + i) for i in range(8)}
    r_deform = {f"d{i:02d}": gen(f"d{i:02d}", 200 + i) for i in range(5)}
    r_eval = {f"e{i:02d}": gen(f"e{i:02d}", 300 + i) for i in range(4)}
    unreg = {}
    for i in range(14):
        reg = gen(f"u{i:02d}", 400 + i)
        unreg[f"u{i:02d}"] = reg.scan
    sets = RegistrySets(r_pca, r_deform, r_eval, unreg)
    config = BootstrapConfig(
        k=5, n_rounds=2, batch_size=6, seed=7,
        njf_epochs=15, njf_learning_rate=1e-3,
        fit_max_outer=25, fit_inner_steps=10, jobs=1,
    )
    return family, sets, config


def test_register_candidates_and_bookkeeping(mini):
    family, sets, config = mini
    bundle = family.bundle
    ops = build_diff_ops(bundle.mesh)
    state = prepare_state(sets, bundle, config, family.nominal_pose(), ops=ops)

    batch_ids = sorted(sets.unregistered)[:4]
    batch = {i: sets.unregistered[i] for i in batch_ids}
    candidates = register_candidates(
        state.space, bundle, state.njf_model, ops, batch, config, state.init_pose
    )
    assert [c.scan_id for c in candidates] == batch_ids
    for cand in candidates:
        # candidates are canonical; re-skinning with the stored pose
        # reproduces the recorded distance exactly
        d = posed_surface_chamfer(bundle, cand.vertices, cand.fit.pose,
                                  batch[cand.scan_id])
        assert d == pytest.approx(cand.distance, abs=1e-12)
        assert cand.vertices.shape == bundle.mesh.vertices.shape

    empty = register_candidates(state.space, bundle, state.njf_model, ops, {},
                                config, state.init_pose)
    assert empty == []


def test_run_round_moves_accepted(mini):
    family, sets, config = mini
    bundle = family.bundle
    ops = build_diff_ops(bundle.mesh)
    state = prepare_state(sets, bundle, config, family.nominal_pose(), ops=ops)
    n_pca_before = len(state.sets.r_pca)
    n_unreg_before = len(state.sets.unregistered)

    nxt = run_round(state, bundle, config, ops=ops)
    accepted = [c for c in nxt.candidates if c.accepted]
    assert len(accepted) >= 1
    assert len(nxt.sets.r_pca) == n_pca_before + len(accepted)
    assert len(nxt.sets.unregistered) == n_unreg_before - len(accepted)
    # deform set fixed across rounds; provenance marks bootstrap insertions
    assert nxt.sets.r_deform.keys() == sets.r_deform.keys()
    for cand in accepted:
        reg = nxt.sets.r_pca[cand.scan_id]
        assert reg.source == "bootstrap-round-1"
        # the inserted mesh is the refined candidate, never the projection X_o
        assert np.array_equal(reg.mesh.vertices, cand.vertices)
        assert np.abs(reg.mesh.vertices - cand.fit.canonical).max() > 0
    # pruning respected its threshold within the converged pool
    pool = [c for c in nxt.candidates if c.fit.converged]
    dist = np.array([c.distance for c in pool])
    threshold = dist.min() + dist.std()
    for c in pool:
        assert c.accepted == (c.distance <= threshold)


def test_round_determinism_replay(mini):
    family, sets, config = mini
    bundle = family.bundle
    ops = build_diff_ops(bundle.mesh)
    state = prepare_state(sets, bundle, config, family.nominal_pose(), ops=ops)
    a = run_round(state, bundle, config, ops=ops)
    b = run_round(state, bundle, config, ops=ops)
    assert [c.scan_id for c in a.candidates if c.accepted] == \
           [c.scan_id for c in b.candidates if c.accepted]
    assert np.array_equal(a.space.mean, b.space.mean)
    assert np.array_equal(a.space.basis, b.space.basis)


def test_exhausted_pool_is_terminal(mini):
    family, sets, config = mini
    bundle = family.bundle
    ops = build_diff_ops(bundle.mesh)
    empty_sets = RegistrySets(sets.r_pca, sets.r_deform, sets.r_eval, {})
    state = prepare_state(empty_sets, bundle, config, family.nominal_pose(), ops=ops)
    nxt = run_round(state, bundle, config, ops=ops)
    assert nxt.terminal
    assert nxt.sets.r_pca.keys() == sets.r_pca.keys()


def test_run_zero_rounds_returns_initial_space(mini):
    family, sets, _ = mini
    config = BootstrapConfig(k=5, n_rounds=0, batch_size=4, seed=7,
                             njf_epochs=2, fit_max_outer=5, eval_with_njf=False)
    space, reports = run_bootstrap(family.bundle, sets, config,
                                   init_pose=family.nominal_pose())
    ids = sorted(sets.r_pca)
    from blisskit.shape_space import fit_pca

    direct = fit_pca([sets.r_pca[i].mesh for i in ids], 5, provenance=ids)
    assert np.array_equal(space.mean, direct.mean)
    assert np.array_equal(space.basis, direct.basis)
    assert len(reports) == 1 and reports[0]["round"] == 0


def test_persist_and_resume_bit_identical(tmp_path, mini):
    family, sets, config = mini
    bundle = family.bundle

    straight_dir = tmp_path / "straight"
    space_a, reports_a = run_bootstrap(
        bundle, sets, config, init_pose=family.nominal_pose(), state_dir=straight_dir
    )

    # interrupted: run one round into a separate dir, then resume
    resumed_dir = tmp_path / "resumed"
    config_one = BootstrapConfig(**{**config.__dict__, "n_rounds": 1})
    run_bootstrap(bundle, sets, config_one, init_pose=family.nominal_pose(),
                  state_dir=resumed_dir)
    space_b, reports_b = run_bootstrap(
        bundle, sets, config, init_pose=family.nominal_pose(),
        state_dir=resumed_dir, resume=True,
    )

    assert np.array_equal(space_a.mean, space_b.mean)
    assert np.array_equal(space_a.basis, space_b.basis)
    assert [r["eval_v2v_median"] for r in reports_a] == pytest.approx(
        [r["eval_v2v_median"] for r in reports_b], abs=1e-9
    )
    import json

    ledger_a = json.loads((straight_dir / "round_002" / "state.json").read_text())
    ledger_b = json.loads((resumed_dir / "round_002" / "state.json").read_text())
    assert ledger_a["ledger"]["accepted_ids"] == ledger_b["ledger"]["accepted_ids"]


def test_state_round_trip(tmp_path, mini):
    family, sets, config = mini
    bundle = family.bundle
    ops = build_diff_ops(bundle.mesh)
    state = prepare_state(sets, bundle, config, family.nominal_pose(), ops=ops)
    nxt = run_round(state, bundle, config, ops=ops)
    save_round_state(tmp_path, nxt, [{"round": 0}], config)
    loaded, reports = load_round_state(tmp_path, bundle, sets, config)
    assert loaded.round_index == nxt.round_index
    assert sorted(loaded.sets.r_pca) == sorted(nxt.sets.r_pca)
    assert sorted(loaded.sets.unregistered) == sorted(nxt.sets.unregistered)
    assert np.abs(loaded.space.mean - nxt.space.mean).max() < 1e-12
    for scan_id, reg in loaded.sets.r_pca.items():
        if reg.source.startswith("bootstrap"):
            assert np.abs(reg.mesh.vertices - nxt.sets.r_pca[scan_id].mesh.vertices).max() < 1e-6
