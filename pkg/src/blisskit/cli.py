"""Command-line entry point for the whole pipeline.

Subcommands: synth, init-space, train-njf, bootstrap, eval, sample, baseline.
All randomness funnels through the seeded generators in the config; rerunning
any command with the same config and seed into a fresh directory reproduces
its reports byte for byte. The BLISSKIT_STATE environment variable overrides
the state directory. Exit code 0 means every requested output was written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io as kio
from .bootstrap import BootstrapConfig, run_bootstrap
from .config import ConfigError, PipelineConfig, load_config
from .fitting import fit_scan
from .mesh import MeshError, build_diff_ops
from .njf import NjfConfig, NjfModel, TrainingPair, load_njf, predict_deformation, save_njf, train_njf
from .rig import Pose
from .shape_space import Registration, RegistrySets, fit_pca, load_space, sample_space, save_space
from .synthlab import (
    EvalReport,
    FamilyConfig,
    load_family,
    make_family,
    make_scan,
    save_family,
)


def _state_dir(config: PipelineConfig) -> Path:
    env = os.environ.get("BLISSKIT_STATE")
    return Path(env) if env else Path(config.paths.state_dir)


def _bootstrap_config(config: PipelineConfig, method: str = None,
                      eval_every_round: bool = None, eval_with_njf: bool = True) -> BootstrapConfig:
    bs = config.bootstrap
    return BootstrapConfig(
        k=config.space.k,
        n_rounds=bs.n_rounds,
        batch_size=bs.batch_size,
        seed=config.seed,
        registration_method=method or bs.registration_method,
        njf_epochs=config.njf.epochs,
        njf_learning_rate=config.njf.learning_rate,
        njf_seed=config.njf.seed,
        fit_max_outer=config.fit.max_outer,
        fit_inner_steps=config.fit.inner_steps,
        baseline_weight=bs.baseline_weight,
        baseline_iterations=bs.baseline_iterations,
        eval_every_round=bs.eval_every_round if eval_every_round is None else eval_every_round,
        eval_with_njf=eval_with_njf,
        jobs=config.jobs,
    )


# --- dataset layout -------------------------------------------------------------

def write_dataset(config: PipelineConfig, force: bool = False) -> Path:
    """Generate the synthetic family plus scans and splits under data_dir."""
    data_dir = Path(config.paths.data_dir)
    if data_dir.exists() and any(data_dir.iterdir()):
        if not force:
            raise ConfigError(f"output dir {data_dir} is not empty (use --force)")
    (data_dir / "scans").mkdir(parents=True, exist_ok=True)
    (data_dir / "registrations").mkdir(parents=True, exist_ok=True)

    s = config.synth
    family = make_family(FamilyConfig(
        n_vertices=s.n_vertices, n_modes=s.n_modes,
        mode_scale_max=s.mode_scale_max, mode_scale_min=s.mode_scale_min,
        n_bumps=s.n_bumps, bump_scale=s.bump_scale,
        pose_jitter=s.pose_jitter, trans_jitter=s.trans_jitter,
        seed=config.seed,
    ))
    save_family(family, data_dir / "family")

    counts = {
        "r_pca": s.n_r_pca,
        "r_deform": s.n_r_deform,
        "r_eval": s.n_r_eval,
        "unregistered": s.n_unregistered,
    }
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    splits: dict[str, list[str]] = {}
    files: list[str] = []
    idx = 0
    for split, count in counts.items():
        ids = []
        for _ in range(count):
            scan_id = f"scan_{idx:04d}"
            idx += 1
            alpha = family.sample_alpha(rng)
            pose = family.sample_pose(rng)
            scan_seed = int(rng.integers(0, 2**31 - 1))
            cloud, registration = make_scan(
                family, alpha, pose, density=s.density,
                noise_std=s.noise_std, seed=scan_seed,
            )
            kio.save_cloud(cloud, data_dir / "scans" / f"{scan_id}.ply")
            files.append(f"scans/{scan_id}.ply")
            if split != "unregistered":
                kio.save_mesh(registration, data_dir / "registrations" / f"{scan_id}.obj")
                files.append(f"registrations/{scan_id}.obj")
            ids.append(scan_id)
        splits[split] = ids

    manifest = {
        "splits": splits,
        "files": sorted(files + ["family"]),
        "seed": config.seed,
        "synth": dataclass_dict(s),
    }
    (data_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return data_dir


def dataclass_dict(obj) -> dict:
    import dataclasses

    return dataclasses.asdict(obj)


def load_dataset(data_dir):
    """Family + RegistrySets from a synth output directory."""
    data_dir = Path(data_dir)
    family = load_family(data_dir / "family")
    manifest = json.loads((data_dir / "manifest.json").read_text())

    def load_split(name, registered):
        out = {}
        for scan_id in manifest["splits"][name]:
            scan = kio.load_cloud(data_dir / "scans" / f"{scan_id}.ply")
            if registered:
                mesh = kio.load_mesh(data_dir / "registrations" / f"{scan_id}.obj")
                out[scan_id] = Registration(scan_id, mesh, scan)
            else:
                out[scan_id] = scan
        return out

    sets = RegistrySets(
        load_split("r_pca", True),
        load_split("r_deform", True),
        load_split("r_eval", True),
        load_split("unregistered", False),
    )
    return family, sets


# --- subcommands ----------------------------------------------------------------

def cmd_synth(config: PipelineConfig, args) -> list[Path]:
    data_dir = write_dataset(config, force=args.force)
    return [data_dir / "manifest.json"]


def cmd_init_space(config: PipelineConfig, args) -> list[Path]:
    _, sets = load_dataset(config.paths.data_dir)
    ids = sorted(sets.r_pca)
    space = fit_pca([sets.r_pca[i].mesh for i in ids], config.space.k, provenance=ids)
    state_dir = _state_dir(config)
    state_dir.mkdir(parents=True, exist_ok=True)
    save_space(space, state_dir / "space.bin")
    config.dump(state_dir / "config.json")
    return [state_dir / "space.bin", state_dir / "space.json"]


def cmd_train_njf(config: PipelineConfig, args) -> list[Path]:
    family, sets = load_dataset(config.paths.data_dir)
    bundle = family.bundle
    state_dir = _state_dir(config)
    space_path = state_dir / "space.bin"
    if not space_path.exists():
        raise ConfigError(f"missing {space_path}; run init-space first")
    space = load_space(space_path)
    ops = build_diff_ops(bundle.mesh)

    pairs = []
    for scan_id in sorted(sets.r_deform):
        reg = sets.r_deform[scan_id]
        fit = fit_scan(space, bundle, reg.scan, init_pose=family.nominal_pose(),
                       max_outer=config.fit.max_outer, inner_steps=config.fit.inner_steps)
        pairs.append(TrainingPair(bundle.mesh.with_vertices(fit.canonical),
                                  reg.scan, reg.mesh.vertices))
    model = NjfModel.init(NjfConfig(seed=config.njf.seed,
                                    learning_rate=config.njf.learning_rate,
                                    epochs=config.njf.epochs))
    train_njf(model, pairs, ops, loss_curve_path=state_dir / "njf_loss.csv")
    save_njf(model, state_dir / "njf.bin")
    return [state_dir / "njf.bin", state_dir / "njf_loss.csv"]


def cmd_bootstrap(config: PipelineConfig, args) -> list[Path]:
    family, sets = load_dataset(config.paths.data_dir)
    state_dir = _state_dir(config)
    state_dir.mkdir(parents=True, exist_ok=True)
    config.dump(state_dir / "config.json")
    bs_config = _bootstrap_config(config, eval_with_njf=not args.pca_only)
    space, reports = run_bootstrap(
        family.bundle, sets, bs_config, init_pose=family.nominal_pose(),
        state_dir=state_dir, resume=args.resume,
    )
    save_space(space, state_dir / "space.bin")
    (state_dir / "report.json").write_text(json.dumps(reports, indent=1, sort_keys=True))
    _print_round_table(reports)
    return [state_dir / "space.bin", state_dir / "report.json"]


def _print_round_table(reports: list) -> None:
    header = f"{'round':>5} {'|R_pca|':>8} {'accepted':>9} {'v2v mean':>10} {'v2v med':>10}"
    print(header)
    prev_pca = None
    for rep in reports:
        accepted = "-" if prev_pca is None else str(rep["n_r_pca"] - prev_pca)
        prev_pca = rep["n_r_pca"]
        print(
            f"{rep['round']:>5} {rep['n_r_pca']:>8} {accepted:>9} "
            f"{rep['eval_v2v_mean']:>10.5f} {rep['eval_v2v_median']:>10.5f}"
        )


def cmd_eval(config: PipelineConfig, args) -> list[Path]:
    family, sets = load_dataset(config.paths.data_dir)
    bundle = family.bundle
    state_dir = _state_dir(config)
    space_path = Path(args.space) if args.space else state_dir / "space.bin"
    if not space_path.exists():
        raise ConfigError(f"missing shape space {space_path}")
    space = load_space(space_path)
    ops = build_diff_ops(bundle.mesh)
    njf_model = None
    njf_path = state_dir / "njf.bin"
    if not args.pca_only and njf_path.exists():
        njf_model = load_njf(njf_path)

    pairs = []
    for scan_id in sorted(sets.r_eval):
        reg = sets.r_eval[scan_id]
        fit = fit_scan(space, bundle, reg.scan, init_pose=family.nominal_pose(),
                       max_outer=config.fit.max_outer, inner_steps=config.fit.inner_steps)
        pred = fit.canonical
        if njf_model is not None:
            pred = predict_deformation(
                njf_model, bundle.mesh.with_vertices(fit.canonical), reg.scan, ops
            )
        pairs.append((bundle.mesh.with_vertices(pred), reg.mesh))
    report = EvalReport.from_pairs(pairs)
    out = state_dir / ("eval_pca_only.json" if args.pca_only else "eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    print(f"eval v2v mean {report.v2v_mean:.5f} m, median {report.v2v_median:.5f} m")
    return [out]


def cmd_sample(config: PipelineConfig, args) -> list[Path]:
    state_dir = _state_dir(config)
    space_path = Path(args.space) if args.space else state_dir / "space.bin"
    if not space_path.exists():
        raise ConfigError(f"missing shape space {space_path}")
    space = load_space(space_path)
    family = load_family(Path(config.paths.data_dir) / "family")
    faces = family.bundle.mesh.faces
    out_dir = state_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)

    from .mesh import TriMesh

    written = []
    if args.mode in ("random", "farthest"):
        shapes = sample_space(space, args.mode, args.count, seed=config.seed)
        for i, verts in enumerate(shapes):
            path = out_dir / f"{args.mode}_{i:03d}.obj"
            kio.save_mesh(TriMesh(verts, faces, validate=False), path)
            written.append(path)
    elif args.mode == "sweep":
        n_modes = min(args.modes, space.k)
        steps = np.linspace(-3.0, 3.0, args.steps)
        for m in range(n_modes):
            for s_i, step in enumerate(steps):
                alpha = np.zeros(space.k)
                alpha[m] = step * space.mode_std[m]
                path = out_dir / f"mode{m}_step{s_i}.obj"
                kio.save_mesh(TriMesh(space.reconstruct(alpha), faces, validate=False), path)
                written.append(path)
    else:
        raise ConfigError(f"unknown sample mode {args.mode!r}")
    return written


def cmd_baseline(config: PipelineConfig, args) -> list[Path]:
    family, sets = load_dataset(config.paths.data_dir)
    state_dir = _state_dir(config)
    methods = {
        "small": "baseline-small",
        "edge": "baseline-edge",
    }
    chosen = list(methods) if args.which == "both" else [args.which]
    table = {}
    written = []
    for name in chosen:
        sub_dir = state_dir / f"baseline_{name}"
        sub_dir.mkdir(parents=True, exist_ok=True)
        bs_config = _bootstrap_config(
            config, method=methods[name],
            eval_every_round=False, eval_with_njf=False,
        )
        space, reports = run_bootstrap(
            family.bundle, sets, bs_config, init_pose=family.nominal_pose(),
            state_dir=sub_dir, resume=args.resume,
        )
        save_space(space, sub_dir / "space.bin")
        table[methods[name]] = {
            "v2v_mean": reports[-1]["eval_v2v_mean"],
            "v2v_median": reports[-1]["eval_v2v_median"],
            "rounds": len(reports) - 1,
        }
        written.append(sub_dir / "space.bin")
    out = state_dir / "baseline_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=1, sort_keys=True))
    for method, row in sorted(table.items()):
        print(f"{method}: v2v mean {row['v2v_mean']:.5f} m")
    return written + [out]


# --- argument plumbing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blisskit", description=__doc__)
    parser.add_argument("--config", type=str, default=None, help="TOML config file")
    parser.add_argument("--data-dir", type=str, default=None)
    parser.add_argument("--state-dir", type=str, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads for scan-parallel stages (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic family, scans and splits")
    p.add_argument("--force", action="store_true")

    sub.add_parser("init-space", help="fit the initial PCA space on R_pca")
    sub.add_parser("train-njf", help="train the deformer on R_deform")

    p = sub.add_parser("bootstrap", help="run enrichment rounds")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--pca-only", action="store_true",
                   help="evaluate the PCA projection only (skip refinement at eval)")

    p = sub.add_parser("eval", help="evaluate a space against R_eval")
    p.add_argument("--space", type=str, default=None)
    p.add_argument("--pca-only", action="store_true")

    p = sub.add_parser("sample", help="export sampled shapes as OBJ")
    p.add_argument("--mode", choices=["random", "farthest", "sweep"], default="random")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--modes", type=int, default=3, help="sweep: number of leading modes")
    p.add_argument("--steps", type=int, default=5, help="sweep: steps per mode")
    p.add_argument("--space", type=str, default=None)

    p = sub.add_parser("baseline", help="run free-form baselines end to end")
    p.add_argument("--which", choices=["small", "edge", "both"], default="both")
    p.add_argument("--resume", action="store_true")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "init-space": cmd_init_space,
    "train-njf": cmd_train_njf,
    "bootstrap": cmd_bootstrap,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.data_dir is not None:
        overrides["paths.data_dir"] = args.data_dir
    if args.state_dir is not None:
        overrides["paths.state_dir"] = args.state_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if getattr(args, "rounds", None) is not None:
        overrides["bootstrap.n_rounds"] = args.rounds
    if getattr(args, "batch_size", None) is not None:
        overrides["bootstrap.batch_size"] = args.batch_size

    try:
        config = load_config(args.config, overrides)
        written = _COMMANDS[args.command](config, args)
        missing = [p for p in written if not Path(p).exists()]
        if missing:
            print(f"error: outputs not written: {missing}", file=sys.stderr)
            return 1
    except (ConfigError, MeshError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
