"""
Interfaces and protocols shared by the correctors, normalizers and audit.
Training and the audit depend on these, never on concrete model classes.
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

from core import NormalizationMode


class ITrainableCorrector(Protocol):
    """Anything the shared training loop can optimize"""

    def parameters(self) -> List[Any]:
        """Trainable tensors in a fixed order"""
        ...

    def parameter_groups(self) -> Dict[str, List[Any]]:
        """Group name -> tensors, used for freezing"""
        ...

    def forward(self, z, training: bool = False):
        """Normalized batch [N, L, I, J] in, corrected batch out"""
        ...


class INormalizer(Protocol):
    """Maps forecast cases into and out of the model's dimensionless space"""

    mode: NormalizationMode

    @property
    def identifier(self) -> str:
        ...

    def normalize_case(self, case) -> Tuple[np.ndarray, np.ndarray]:
        ...

    def normalize_forecast(self, forecast: np.ndarray, init_date) -> np.ndarray:
        ...

    def denormalize_forecast(self, z: np.ndarray, init_date) -> np.ndarray:
        ...


class ICorrector(Protocol):
    """Physical-space correction of one forecast sequence [L, I, J]"""

    def correct(self, forecast: np.ndarray, init_date) -> np.ndarray:
        ...


@dataclass
class CorrectorHandle:
    """Black-box corrector seen by the audit: a model id, an apply function
    from a [L, I, J] sequence to a corrected [L, I, J] sequence, and whether
    the model claims temporal causality."""
    model_id: str
    apply: Callable[[np.ndarray], np.ndarray]
    causal_claim: bool
    model: Optional[Any] = None

    def __call__(self, sequence: np.ndarray) -> np.ndarray:
        return self.apply(sequence)
