"""Multiclass evasion attacks and reject-option defenses for one-vs-all
kernel SVMs built on differentiable feature maps."""

__version__ = "0.1.0"

from ._smo import ConvergenceError, solve_dual
from .attack import (GENERIC, SPECIFIC, AttackResult, AttackSpec, grad_omega, omega, project,
                     roi_from_rect, run_attack)
from .classifier import (REJECT, KernelSpec, OneVsAllSVM, cv_select, kernel_matrix, load_model,
                         save_model)
from .data import (Dataset, DatasetError, Sample, load_csv, load_manifest, load_raster,
                   make_blob_images, make_blobs, split, stratified_kfold, write_csv,
                   write_raster_dir)
from .evaluation import (REFERENCE_FC7_SENSITIVITY, BaselineTable, SecurityCurve, SensitivityReport,
                         baseline_subsets, security_eval, sensitivity)
from .featmap import (AffineMap, ComposedMap, FeatureMap, IdentityMap, TanhRandomMap,
                      map_from_config)
from .pnm import PNMError, read_pnm, write_pnm
from .seeding import child_seed
