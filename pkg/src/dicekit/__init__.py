"""dicekit: difficulty-weighted scenario sampling for desk-scale autonomy validation.

The package covers the full loop: synthetic world generation, deterministic
replay simulation with collision labels, masked-autoencoder pretraining over
sparse scene tensors, a frozen-backbone difficulty head, clustered importance
sampling, and the validation metrics that compare sampling schemes.
"""

__version__ = "0.1.0"

from .scene import Scenario, ScenarioDims, validate
from .world import WorldConfig, EgoPolicyParams, generate_scenario, simulate

__all__ = [
    "__version__",
    "Scenario",
    "ScenarioDims",
    "validate",
    "WorldConfig",
    "EgoPolicyParams",
    "generate_scenario",
    "simulate",
]
