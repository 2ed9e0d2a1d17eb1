from .engine import SimError, Simulator, simulate
from .metrics import SimMetrics
from .wrr import SmoothWRR

__all__ = ["SimError", "Simulator", "simulate", "SimMetrics", "SmoothWRR"]
