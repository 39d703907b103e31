"""Coherence of a central nuclear spin in a dipolar spin bath, computed
with converged cluster-correlation expansions."""

__version__ = "0.1.0"

from .bath import (BathConfiguration, BathSpin, CentralSystem, ElectronSpec,
                   apply_exclusion, generate_lattice, load_bath, make_spin,
                   sample_isotopes, save_bath)
from .cce import Cluster, ClusterSet, EngineParams, enumerate_clusters, \
    simulate
from .couplings import (SpinDensityGrid, dipolar_tensor, grid_hyperfine,
                        point_dipole_hyperfine, spin_exchange_sigma)
from .hamiltonian import (HamiltonianMatrix, QubitLevels, build_central,
                          build_cluster, conditioned_hamiltonian,
                          identify_levels, spin_operators)
from .oracles import TwoSpinModel, exact_l, hybridization_t2, two_spin_echo
from .propagation import (CoherenceTrace, Pulse, PulseSequence,
                          electron_pulse_train, evolve, hahn_echo,
                          load_trace, ramsey, run_sequence, save_trace)

__all__ = [
    "BathConfiguration", "BathSpin", "CentralSystem", "Cluster",
    "ClusterSet", "CoherenceTrace", "ElectronSpec", "EngineParams",
    "HamiltonianMatrix", "Pulse", "PulseSequence", "QubitLevels",
    "SpinDensityGrid", "TwoSpinModel", "apply_exclusion", "build_central",
    "build_cluster", "conditioned_hamiltonian", "dipolar_tensor",
    "electron_pulse_train", "enumerate_clusters", "evolve", "exact_l",
    "generate_lattice", "grid_hyperfine", "hahn_echo", "hybridization_t2",
    "identify_levels", "load_bath", "load_trace", "make_spin",
    "point_dipole_hyperfine", "ramsey", "run_sequence", "sample_isotopes",
    "save_bath", "save_trace", "simulate", "spin_exchange_sigma",
    "spin_operators", "two_spin_echo",
]
