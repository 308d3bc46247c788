"""Adam and a reduce-on-plateau learning-rate schedule."""

import numpy as np


class Adam:
    def __init__(self, params, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * np.square(g)
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` once the monitored score has
    not improved for more than ``patience`` consecutive epochs (higher is better).
    """

    def __init__(self, optimizer, patience=3, factor=0.1, min_lr=0.0, threshold=1e-12):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = -np.inf
        self.epochs_since_improve = 0

    @property
    def lr(self):
        return self.optimizer.lr

    def step(self, score):
        if score > self.best + self.threshold:
            self.best = score
            self.epochs_since_improve = 0
        else:
            self.epochs_since_improve += 1
            if self.epochs_since_improve > self.patience:
                self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
                self.epochs_since_improve = 0
        return self.optimizer.lr
