"""Coded-aperture Laue diffraction microscope: simulation, depth-resolved
signal recovery, and digital autofocus of the aperture's 6DOF pose."""

from .autofocus import (FocusAbortError, FocusProblem, FocusTrace,
                        NoPixelsError, NoSignalError, bin_scan,
                        binary_line_search, coordinate_descent,
                        cost_from_positions, focus_cost, select_pixels,
                        sweep_coordinate)
from .encoding import (ApertureMissError, CodingMatrix,
                       DegenerateContrastError, ScanDataset, ScanPlan,
                       assemble_coding_matrix, normalize_measurements)
from .geometry import (DetectorGeometry, Pose6DOF, Ray,
                       aperture_position_to_depth, depth_to_aperture_position,
                       intersect_aperture, pixel_ray, rotation_from_angles)
from .mask import (ApertureMask, effective_transmission, generate_de_bruijn,
                   load_mask, save_mask, transmissivity_at)
from .recon import (ConvergenceError, DepthSignal, EmptySignalError, fwhm,
                    median_position, nnls_solve, recover_offset_and_signal,
                    smoothed_boxcar)
from .simulator import (SampleModel, recover_differential,
                        simulate_differential_aperture, simulate_scan)

__version__ = "0.1.0"
