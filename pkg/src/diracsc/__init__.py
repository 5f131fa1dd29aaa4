"""Semiclassical Dirac dynamics: relativistic orbits, spin transport, kernel and trace formula."""
from .dynamics import IntegrationError, ParticleParams, PhaseState, Trajectory, integrate_flow, linearized_flow
from .fields import EMSample, FieldConfig, FieldDomainError, FieldKind, eval_em, verify_field_consistency
from .orbits import OrbitError, OrbitSearch, PeriodicOrbit, find_periodic_orbits
from .propagator import CausticError, ConnectingOrbit, SearchGrid, find_connecting_orbits, semiclassical_kernel
from .spin import SpinFrame, SpinHistory, extract_eta, hopf, phase_decomposition, transport_spin
from .trace import (OracleQuadrature, SpectralWindow, TestFunction, build_test_function, build_window,
                    direct_trace_oracle, evaluate_trace, orbit_sum, weyl_term)

__version__ = "0.1.0"
