"""Finite-difference oracles shared by the network tests and the acceptance
suite. The FD side only ever calls the forward pass, so it is independent of
the reverse-mode code it checks."""

import numpy as np

from loanstate.network import (
    Architecture,
    MlpParams,
    backward,
    batch_loss,
    forward_batch,
    init_params,
    input_gradient_batch,
)

REL_FLOOR = 1e-3  # gradients below this magnitude are compared absolutely


def rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), REL_FLOOR)


def random_net(rng, activation: str, max_width: int = 32, max_layers: int = 5):
    n_hidden = int(rng.integers(1, max_layers + 1))
    hidden = tuple(int(rng.integers(2, max_width + 1)) for _ in range(n_hidden))
    d = int(rng.integers(3, 11))
    arch = Architecture(input_dim=d, hidden=hidden, activation=activation)
    return init_params(arch, seed=int(rng.integers(0, 2**31)))


def sample_away_from_kinks(params: MlpParams, rng, n: int = 1, margin: float = 1e-3,
                           tries: int = 200) -> np.ndarray:
    """Random inputs whose relu pre-activations all clear the kink by ``margin``."""
    d = params.arch.input_dim
    rows = []
    for _ in range(tries):
        x = rng.normal(size=(1, d))
        _, trace = forward_batch(params, x)
        pre_hidden = trace.pre_activations[:-1]
        if params.arch.activation != "relu" or all(
            np.abs(z).min() > margin for z in pre_hidden
        ) or not pre_hidden:
            rows.append(x[0])
            if len(rows) == n:
                return np.array(rows)
    raise RuntimeError("could not sample a kink-free point")


def fd_param_max_rel_err(params: MlpParams, X: np.ndarray, y: np.ndarray,
                         l2: float = 0.0, h: float = 1e-5) -> float:
    """Max rel_err between backward() and central differences of the loss."""
    P, trace = forward_batch(params, X)
    grad_W, grad_b = backward(params, trace, y, l2_lambda=l2)
    Ws, bs = params.mutable_arrays()

    def loss_now() -> float:
        p = MlpParams(params.arch, tuple(Ws), tuple(bs))
        _, tr = forward_batch(p, X)
        return batch_loss(p, tr, y, l2_lambda=l2)

    worst = 0.0
    for arrs, grads in ((Ws, grad_W), (bs, grad_b)):
        for A, G in zip(arrs, grads):
            flat = A.reshape(-1)
            gflat = G.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_now()
                flat[i] = orig - h
                down = loss_now()
                flat[i] = orig
                worst = max(worst, rel_err(gflat[i], (up - down) / (2 * h)))
    return worst


def fd_input_max_abs_err(params: MlpParams, x: np.ndarray, v: int, h: float = 1e-6) -> float:
    """Max absolute gap between input_gradient and central differences."""
    g = input_gradient_batch(params, x[None, :], v)[0]
    worst = 0.0
    for j in range(len(x)):
        up = x.copy()
        up[j] += h
        down = x.copy()
        down[j] -= h
        pu, _ = forward_batch(params, up[None, :])
        pd, _ = forward_batch(params, down[None, :])
        fd = (pu[0, v] - pd[0, v]) / (2 * h)
        worst = max(worst, abs(g[j] - fd))
    return worst
