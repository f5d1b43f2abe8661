"""Shared oracles for the test suite."""

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def brute_kernel_terms(x, y):
    """Direct O(m^2) sums: mean |x_i - y| and sum_{i,j} |x_i - x_j|."""
    x = np.asarray(x, float)
    m = len(x)
    skill = sum(abs(xi - y) for xi in x) / m
    pair = 0.0
    for i in range(m):
        for j in range(m):
            pair += abs(x[i] - x[j])
    return skill, pair


TOY = dict(k=3, t=2, h=2, w=2, c=2, c_tilde=4, n_blocks=1, h_n=2)


def toy_problem(seed: int = 0, **overrides):
    """Float64 toy transformer with every parameter randomized (W_O included)."""
    from enspost.model import ModelConfig, init_params

    config = ModelConfig(**{**TOY, **overrides, "seed": seed})
    params = init_params(config, np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, value in params.weights.items():
        params.weights[name] = value + 0.5 * rng.standard_normal(value.shape)
    z = rng.standard_normal((2, config.k, config.t, config.h, config.w, config.c))
    y = rng.standard_normal((2, config.t, config.h, config.w))
    return config, params, z, y


def model_gradient_audit(seed: int = 0, loss_kind: str = "gaussian_crps") -> dict:
    """Relative error of autodiff vs central differences for every parameter."""
    from enspost.autodiff import Tape, Tensor
    from enspost.model import TrainConfig, forward_normalized, training_loss
    from enspost.scoring import KernelCrpsConfig

    config, params, z, y = toy_problem(seed)
    tc = TrainConfig(loss_kind=loss_kind, kernel=KernelCrpsConfig(0.2, 0.5))
    names = list(params.weights)

    def loss_of(weights):
        pred = forward_normalized(Tensor(z), {n: Tensor(v) for n, v in weights.items()}, config)
        return training_loss(pred, y, tc)

    tensors = {n: Tensor(v) for n, v in params.weights.items()}
    with Tape() as tape:
        for t in tensors.values():
            tape.watch(t)
        pred = forward_normalized(Tensor(z), tensors, config)
        loss = training_loss(pred, y, tc)
    grads = dict(zip(names, tape.gradient(loss, [tensors[n] for n in names])))
    errors = {}
    for n in names:
        def f(v, n=n):
            return float(loss_of({**params.weights, n: v}).data)

        fd = central_difference(f, params.weights[n], step=1e-6)
        errors[n] = relative_error(grads[n], fd)
    return errors


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Log one acceptance line (shown in the terminal summary) and assert it."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
