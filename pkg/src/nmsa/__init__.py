"""Ensemble simulation and analysis of a levitated-nanoparticle phase-space state amplifier."""
from .dynamics import (ConfigurationError, Kind, PhaseState, PotentialSpec, PropagatorMatrix,
                       ScheduleError, SimParams, Stage, analytic_propagator, sde_step)
from .ensemble import (Calibration, CalibrationError, Ensemble, EnsembleStats, TrajectoryRecord,
                       central_difference, denormalize, evolve_trajectory, generate_ensemble,
                       normalize, psd_calibrate)
from .estimation import (AmplifierMetrics, GainEstimate, RankError, fit_added_noise, fit_gain,
                         noise_figure, shd, snr_force)
from .postselect import (PrescribedState, reconstruct_pdf, select_gaussian, select_zero_cov,
                         survivor_probability)
from .protocol import (MODES, ProtocolSchedule, build_schedule, chain_gain, ideal_gain_matrix,
                       linear_moments, optimal_timings)
from .tuning import TimingScan, scan_timing

__version__ = "0.1.0"
