"""Symmetric structural connectivity from steady states of the symmetrized
Fokker-Planck equation on position x orientation space."""

__version__ = "0.1.0"

from .connectivity import (ConnectivityMatrix, amplitude, connectivity_matrix, linear_reweighted,
                           normalized_amplitude, spatial_amplitude_map, trail_image, trail_integral)
from .domain import (GridFamily, Mask, PeakField, SpeedField, StateField, build_steered_grids,
                     speed_from_function, speed_from_peaks)
from .errors import *  # noqa: F401,F403
from .metrics import PairedMeasurements, agreement_curve, icc
from .operator import SparseOperator, assemble_H, calibrate_A, symmetry_defect
from .phantom import PhantomSpec, build_phantom
from .solver import SolveReport, gmres, solve_adjoint, solve_steady
from .sphere import DirectionSet, generate_directions, voronoi_neighbors
