"""The outer enrichment loop: register, prune, refit, repeat.

Each round projects a seeded batch of unregistered scans into the current
shape space, refines the projections with the learned deformer (or a
classical free-form baseline), and keeps the candidates whose posed Chamfer
distance falls within one standard deviation of the batch minimum. Accepted
candidates join the PCA training set in T-pose; the deformer's training set
stays fixed. State is persisted per round so runs can be audited and resumed
bit-identically.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import io as kio
from .fitting import FitResult, baseline_freeform, fit_scan, posed_surface_chamfer
from .mesh import DiffOps, MeshError, TriMesh, build_diff_ops
from .njf import NjfConfig, NjfModel, TrainingPair, load_njf, predict_deformation, save_njf, train_njf
from .rig import Pose, TemplateBundle
from .shape_space import Registration, RegistrySets, ShapeSpace, fit_pca, load_space, save_space
from .synthlab import v2v


@dataclass
class BootstrapConfig:
    k: int = 11
    n_rounds: int = 5
    batch_size: int = 100
    seed: int = 0
    registration_method: str = "njf"  # njf | baseline-small | baseline-edge
    njf_epochs: int = 150
    njf_learning_rate: float = 1e-4
    njf_seed: int = 0
    fit_max_outer: int = 200
    fit_inner_steps: int = 12
    baseline_weight: float = 0.1
    baseline_iterations: int = 300
    eval_every_round: bool = True
    eval_with_njf: bool = True
    jobs: int = 1

    def registration_uses_njf(self) -> bool:
        return self.registration_method == "njf"


@dataclass
class Candidate:
    """One registered scan awaiting the pruning decision."""

    scan_id: str
    vertices: np.ndarray  # canonical (T-pose) registration X'
    fit: FitResult
    distance: float       # posed Chamfer to the scan, m^2
    accepted: bool = False


@dataclass
class RoundState:
    """Snapshot between rounds: sets, current space and deformer, ledger."""

    round_index: int
    sets: RegistrySets
    space: ShapeSpace
    njf_model: Optional[NjfModel]
    init_pose: Pose
    base_seed: int
    candidates: list = field(default_factory=list)  # ledger of the last round
    terminal: bool = False


def prune(distances: np.ndarray) -> np.ndarray:
    """Indices with D <= min(D) + population-std(D).

    The closed inequality keeps the degenerate all-equal batch (sigma = 0)
    fully accepted; a single candidate is always accepted.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise MeshError("prune needs at least one distance")
    if not np.isfinite(d).all():
        raise MeshError("prune distances must be finite")
    threshold = d.min() + d.std()
    return np.nonzero(d <= threshold)[0]


def _map_jobs(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def register_candidates(
    space: ShapeSpace,
    bundle: TemplateBundle,
    njf_model: Optional[NjfModel],
    ops: DiffOps,
    scans: dict,
    config: BootstrapConfig,
    init_pose: Pose,
) -> list:
    """Fit + refine every scan of the batch; candidates stay in T-pose.

    The recorded distance is the Chamfer between the candidate re-skinned
    with its fitted pose and the raw scan. Unconverged fits are recorded but
    never enter the pruning pool.
    """

    def one(item):
        scan_id, scan = item
        fit = fit_scan(
            space, bundle, scan, init_pose=init_pose,
            max_outer=config.fit_max_outer, inner_steps=config.fit_inner_steps,
        )
        source = bundle.mesh.with_vertices(fit.canonical)
        if config.registration_uses_njf():
            x_prime = predict_deformation(njf_model, source, scan, ops)
        else:
            regularizer = (
                "small-displacement"
                if config.registration_method == "baseline-small"
                else "edge-preserving"
            )
            x_prime = baseline_freeform(
                fit.canonical, fit.pose, scan, bundle,
                regularizer=regularizer, weight=config.baseline_weight,
                iterations=config.baseline_iterations,
            )
        dist = posed_surface_chamfer(bundle, x_prime, fit.pose, scan)
        return Candidate(scan_id, x_prime, fit, dist)

    items = sorted(scans.items())
    return _map_jobs(one, items, config.jobs)


def _train_round_njf(
    sets: RegistrySets,
    space: ShapeSpace,
    bundle: TemplateBundle,
    ops: DiffOps,
    config: BootstrapConfig,
    init_pose: Pose,
    round_index: int,
) -> tuple[Optional[NjfModel], list]:
    """Rebuild the deformer from scratch on the (fixed) deform set."""
    if not config.registration_uses_njf():
        return None, []

    def one(item):
        _, reg = item
        fit = fit_scan(
            space, bundle, reg.scan, init_pose=init_pose,
            max_outer=config.fit_max_outer, inner_steps=config.fit_inner_steps,
        )
        return TrainingPair(
            source=bundle.mesh.with_vertices(fit.canonical),
            scan=reg.scan,
            target=reg.mesh.vertices,
        )

    pairs = _map_jobs(one, sorted(sets.r_deform.items()), config.jobs)
    model = NjfModel.init(NjfConfig(
        seed=config.njf_seed + round_index,
        learning_rate=config.njf_learning_rate,
        epochs=config.njf_epochs,
    ))
    curve = train_njf(model, pairs, ops)
    return model, curve


def prepare_state(
    sets: RegistrySets,
    bundle: TemplateBundle,
    config: BootstrapConfig,
    init_pose: Pose,
    ops: Optional[DiffOps] = None,
    round_index: int = 0,
) -> RoundState:
    """Refit the space and retrain the deformer on the current sets."""
    ops = ops or build_diff_ops(bundle.mesh)
    ids = sorted(sets.r_pca)
    space = fit_pca([sets.r_pca[i].mesh for i in ids], config.k, provenance=ids)
    njf_model, _ = _train_round_njf(sets, space, bundle, ops, config, init_pose, round_index)
    return RoundState(
        round_index=round_index,
        sets=sets,
        space=space,
        njf_model=njf_model,
        init_pose=init_pose,
        base_seed=config.seed,
    )


def run_round(
    state: RoundState,
    bundle: TemplateBundle,
    config: BootstrapConfig,
    batch_size: Optional[int] = None,
    ops: Optional[DiffOps] = None,
) -> RoundState:
    """One enrichment round: sample, register, prune, absorb, refit.

    Returns the state after the round with a refreshed space and deformer.
    With an exhausted unregistered pool the state comes back unchanged except
    for the terminal flag. Projections X_o are never inserted, only the
    refined candidates X'.
    """
    batch_size = config.batch_size if batch_size is None else batch_size
    ops = ops or build_diff_ops(bundle.mesh)
    if not state.sets.unregistered:
        return replace(state, terminal=True)

    rng = np.random.default_rng(
        np.random.SeedSequence([state.base_seed, state.round_index])
    )
    pool_ids = sorted(state.sets.unregistered)
    take = min(batch_size, len(pool_ids))
    batch_ids = [pool_ids[i] for i in rng.permutation(len(pool_ids))[:take]]
    batch = {i: state.sets.unregistered[i] for i in batch_ids}

    candidates = register_candidates(
        state.space, bundle, state.njf_model, ops, batch, config, state.init_pose
    )
    pool = [c for c in candidates if c.fit.converged]
    if pool:
        accepted_idx = prune([c.distance for c in pool])
        for i in accepted_idx:
            pool[i].accepted = True

    new_pca = dict(state.sets.r_pca)
    new_unreg = dict(state.sets.unregistered)
    round_no = state.round_index + 1
    for cand in candidates:
        if cand.accepted:
            new_pca[cand.scan_id] = Registration(
                scan_id=cand.scan_id,
                mesh=bundle.mesh.with_vertices(cand.vertices),
                scan=new_unreg.pop(cand.scan_id),
                source=f"bootstrap-round-{round_no}",
            )
        # rejected and unconverged scans stay in the pool for later rounds

    new_sets = RegistrySets(new_pca, state.sets.r_deform, state.sets.r_eval, new_unreg)
    next_state = prepare_state(
        new_sets, bundle, config, state.init_pose, ops=ops, round_index=round_no
    )
    next_state.candidates = candidates
    return next_state


def evaluate_state(
    state: RoundState,
    bundle: TemplateBundle,
    config: BootstrapConfig,
    ops: Optional[DiffOps] = None,
) -> dict:
    """Held-out error of the current space (and of the full pipeline).

    For every evaluation pair the scan is fitted to the space; eval_v2v
    measures the PCA projection X_o against the ground-truth registration,
    eval_v2v_njf the deformer refinement X'.
    """
    ops = ops or build_diff_ops(bundle.mesh)
    ids = sorted(state.sets.r_eval)

    def one(scan_id):
        reg = state.sets.r_eval[scan_id]
        fit = fit_scan(
            state.space, bundle, reg.scan, init_pose=state.init_pose,
            max_outer=config.fit_max_outer, inner_steps=config.fit_inner_steps,
        )
        source = bundle.mesh.with_vertices(fit.canonical)
        err_pca = v2v(source, reg.mesh)
        err_njf = None
        if config.eval_with_njf and state.njf_model is not None:
            x_prime = predict_deformation(state.njf_model, source, reg.scan, ops)
            err_njf = v2v(bundle.mesh.with_vertices(x_prime), reg.mesh)
        return err_pca, err_njf

    results = _map_jobs(one, ids, config.jobs)
    pca_err = np.array([r[0] for r in results])
    report = {
        "round": state.round_index,
        "n_r_pca": len(state.sets.r_pca),
        "n_unregistered": len(state.sets.unregistered),
        "eval_v2v_mean": float(pca_err.mean()),
        "eval_v2v_median": float(np.median(pca_err)),
        "eval_v2v_per_shape": pca_err.tolist(),
    }
    if results and results[0][1] is not None:
        njf_err = np.array([r[1] for r in results])
        report["eval_v2v_njf_mean"] = float(njf_err.mean())
        report["eval_v2v_njf_median"] = float(np.median(njf_err))
        report["eval_v2v_njf_per_shape"] = njf_err.tolist()
    counts, edges = np.histogram(pca_err, bins=20, range=(0.0, float(pca_err.max()) or 1.0))
    report["histogram_counts"] = counts.tolist()
    report["histogram_bins"] = edges.tolist()
    return report


def _ledger_entry(state: RoundState) -> dict:
    pool = [c.distance for c in state.candidates if c.fit.converged]
    entry = {
        "n_candidates": len(state.candidates),
        "n_accepted": sum(c.accepted for c in state.candidates),
        "accepted_ids": sorted(c.scan_id for c in state.candidates if c.accepted),
        "candidates": [
            {
                "scan_id": c.scan_id,
                "chamfer": c.distance,
                "converged": bool(c.fit.converged),
                "accepted": bool(c.accepted),
            }
            for c in state.candidates
        ],
    }
    if pool:
        entry["min_D"] = float(np.min(pool))
        entry["sigma_D"] = float(np.std(pool))
    return entry


def run_bootstrap(
    bundle: TemplateBundle,
    sets: RegistrySets,
    config: BootstrapConfig,
    init_pose: Optional[Pose] = None,
    state_dir=None,
    resume: bool = False,
) -> tuple[ShapeSpace, list]:
    """Drive n_rounds of enrichment; returns the final space and reports.

    Reports carry one entry per round boundary: entry r describes the space
    after absorbing r rounds of candidates (entry 0 is the initial space).
    With a state_dir every round is persisted and `resume=True` restarts
    from the last completed round, reproducing the uninterrupted run.
    """
    init_pose = init_pose or Pose.identity(bundle.n_joints)
    ops = build_diff_ops(bundle.mesh)

    start_round = 0
    if resume and state_dir is not None:
        loaded = load_round_state(state_dir, bundle, sets, config)
        if loaded is not None:
            state, reports = loaded
            start_round = state.round_index
        else:
            resume = False
    if not resume or state_dir is None or start_round == 0:
        state = prepare_state(sets, bundle, config, init_pose, ops=ops)
        reports = []
        if config.eval_every_round:
            reports.append(evaluate_state(state, bundle, config, ops=ops))
        if state_dir is not None:
            save_round_state(state_dir, state, reports, config)

    while state.round_index < config.n_rounds and not state.terminal:
        state = run_round(state, bundle, config, ops=ops)
        if state.terminal:
            break
        final_round = state.round_index == config.n_rounds
        if config.eval_every_round or final_round:
            reports.append(evaluate_state(state, bundle, config, ops=ops))
        if state_dir is not None:
            save_round_state(state_dir, state, reports, config)
    return state.space, reports


# --- persistence ----------------------------------------------------------------

def save_round_state(state_dir, state: RoundState, reports: list,
                     config: BootstrapConfig) -> None:
    state_dir = Path(state_dir)
    round_dir = state_dir / f"round_{state.round_index:03d}"
    (round_dir / "candidates").mkdir(parents=True, exist_ok=True)

    save_space(state.space, round_dir / "space.bin")
    if state.njf_model is not None:
        save_njf(state.njf_model, round_dir / "njf.bin")
    for cand in state.candidates:
        if cand.accepted:
            kio.save_mesh(
                TriMesh(cand.vertices, _faces_of(state), validate=False),
                round_dir / "candidates" / f"{cand.scan_id}.obj",
            )
    payload = {
        "round_index": state.round_index,
        "base_seed": state.base_seed,
        "terminal": state.terminal,
        "init_pose_theta": state.init_pose.theta.tolist(),
        "init_pose_trans": state.init_pose.trans.tolist(),
        "r_pca_ids": sorted(state.sets.r_pca),
        "bootstrap_sources": {
            i: r.source for i, r in state.sets.r_pca.items() if r.source != "manual"
        },
        "unregistered_ids": sorted(state.sets.unregistered),
        "ledger": _ledger_entry(state),
        "reports": reports,
        "config": config.__dict__,
    }
    (round_dir / "state.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    (state_dir / "latest.json").write_text(json.dumps({"round": state.round_index}))


def _faces_of(state: RoundState):
    for reg in state.sets.r_pca.values():
        return reg.mesh.faces
    raise MeshError("empty r_pca")


def load_round_state(state_dir, bundle: TemplateBundle, initial_sets: RegistrySets,
                     config: BootstrapConfig):
    """Rebuild the latest persisted state on top of the initial data sets."""
    state_dir = Path(state_dir)
    latest = state_dir / "latest.json"
    if not latest.exists():
        return None
    round_index = json.loads(latest.read_text())["round"]
    round_dir = state_dir / f"round_{round_index:03d}"
    payload = json.loads((round_dir / "state.json").read_text())

    # collect accepted candidates from all persisted rounds up to this one
    new_pca = dict(initial_sets.r_pca)
    new_unreg = dict(initial_sets.unregistered)
    for r in range(round_index + 1):
        rdir = state_dir / f"round_{r:03d}"
        if not rdir.exists():
            continue
        rpayload = json.loads((rdir / "state.json").read_text())
        for scan_id in rpayload["ledger"].get("accepted_ids", []):
            mesh = kio.load_mesh(rdir / "candidates" / f"{scan_id}.obj")
            new_pca[scan_id] = Registration(
                scan_id=scan_id,
                mesh=mesh,
                scan=new_unreg.pop(scan_id, None),
                source=f"bootstrap-round-{r}",
            )
    sets = RegistrySets(new_pca, initial_sets.r_deform, initial_sets.r_eval, new_unreg)

    space = load_space(round_dir / "space.bin")
    njf_model = load_njf(round_dir / "njf.bin") if (round_dir / "njf.bin").exists() else None
    init_pose = Pose(
        np.array(payload["init_pose_theta"]), np.array(payload["init_pose_trans"])
    )
    state = RoundState(
        round_index=round_index,
        sets=sets,
        space=space,
        njf_model=njf_model,
        init_pose=init_pose,
        base_seed=payload["base_seed"],
        terminal=payload["terminal"],
    )
    return state, payload["reports"]
