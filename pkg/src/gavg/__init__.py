"""Two-time-scale averaging for fully nonlinear parabolic PDEs under
volatility uncertainty: solvers, averaged-generator construction, scenario
simulation, and the experiment harness."""

__version__ = "0.1.0"
