"""viscoflow: minimizing-movement time stepping for finite-strain
Kelvin-Voigt viscoelasticity with a second-gradient penalty, the linearized
flow, metric slopes, and a convergence harness for the commutativity of the
time-discretization and linearization limits."""

__version__ = "0.1.0"

from .grid import (CellTensors, DetGuardViolation, Field, Grid, GridMismatch,
                   det_guard, diff_norms, gradients, identity_field, integrate,
                   load_field, save_field, zero_displacement)
from .materials import MaterialBundle, OutOfNeighborhood, hessian_tensors, reference_bundle
from .solvers import SingularSystem
from .trajectory import LedgerEntry, Trajectory

__all__ = [
    "__version__",
    "CellTensors", "DetGuardViolation", "Field", "Grid", "GridMismatch",
    "det_guard", "diff_norms", "gradients", "identity_field", "integrate",
    "load_field", "save_field", "zero_displacement",
    "MaterialBundle", "OutOfNeighborhood", "hessian_tensors", "reference_bundle",
    "SingularSystem", "LedgerEntry", "Trajectory",
]
