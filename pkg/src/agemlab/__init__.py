"""Energy-adaptive gradient methods with momentum, their ODE limits and diagnostics."""

__version__ = "0.1.0"
