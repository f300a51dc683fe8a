"""blisskit: bootstrapped linear body-shape spaces on triangle meshes.

Builds a PCA shape space from a small set of registered scans, fits raw
point-cloud scans by shape/pose optimization, refines the fits with a learned
per-triangle Jacobian-field deformer integrated by a Poisson solve, and
iteratively enriches the space with statistically pruned candidates.
"""

from .mesh import (
    DiffOps,
    JacobianField,
    MeshError,
    ScanCloud,
    TriMesh,
    build_diff_ops,
    compute_jacobians,
    poisson_solve,
    poisson_solve_adjoint,
    wave_kernel_signature,
)
from .io import ParseError, load_cloud, load_mesh, save_cloud, save_mesh
from .rig import Pose, TemplateBundle, load_bundle, save_bundle, skin, skin_jacobian, synthesize_canonical
from .shape_space import (
    Registration,
    RegistrySets,
    ShapeSpace,
    fit_pca,
    load_space,
    sample_space,
    save_space,
)
# fitting / njf / bootstrap / synthlab re-exports appended below
from .fitting import FitResult, NnIndex, baseline_freeform, chamfer, fit_scan  # noqa: E402
from .njf import NjfConfig, NjfModel, extract_features, load_njf, predict_deformation, save_njf, train_njf  # noqa: E402
from .bootstrap import RoundState, prune, register_candidates, run_bootstrap, run_round  # noqa: E402
from .synthlab import SyntheticFamily, diversity_table, make_family, make_scan, v2p, v2v  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
