"""In-place parameter updates along an ascent direction."""
import numpy as np


class Sgd:
    """``theta += lr * direction``; the literal semi-gradient step."""

    def __init__(self, lr: float):
        self.lr = lr

    def ascend(self, theta, direction):
        theta += self.lr * direction


class Adam:
    """Adaptive-moment step on an ascent direction (bias-corrected)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.k = 0

    def ascend(self, theta, direction):
        self.k += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * direction
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * direction * direction
        m_hat = self.m / (1.0 - self.beta1**self.k)
        v_hat = self.v / (1.0 - self.beta2**self.k)
        theta += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
