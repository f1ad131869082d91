"""Dynamic PET under Poisson noise with optimal-transport regularization."""
import os

# POT probes every array backend on import; only numpy is used here.
for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

__version__ = "0.1.0"
