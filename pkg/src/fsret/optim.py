"""Adam steps over flat parameter vectors, shared by both training loops."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adaptive-moment gradient descent on a flat float64 parameter vector.

    Deterministic: carries no random state, and all moments update in a
    fixed order. Callers own parameter projection (e.g. clipping a scalar
    back into its valid range after each step).
    """

    def __init__(self, size: int, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = np.zeros(size, dtype=np.float64)
        self._v = np.zeros(size, dtype=np.float64)
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated parameters; inputs are not mutated."""
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
