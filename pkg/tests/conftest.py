from __future__ import annotations

import numpy as np
import pytest

from fbl.model import Classifier, Dense, backward


def random_classifier(rng, dims, num_classes, activation="tanh", scale=1.0) -> Classifier:
    layers = [
        Dense(scale * rng.normal(size=(b, a)), scale * rng.normal(size=b), activation)
        for a, b in zip(dims[:-1], dims[1:])
    ]
    head = Dense(scale * rng.normal(size=(num_classes, dims[-1])), scale * rng.normal(size=num_classes))
    return Classifier(layers, head)


def mean_loss(model, x, y, offsets=None) -> float:
    return backward(model, x, y, offsets).loss


def finite_difference_grads(model, x, y, offsets=None, h=1e-5):
    """Central differences of the mean batch loss for every parameter (and offset) entry."""
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = mean_loss(model, x, y, offsets)
            p[idx] = orig - h
            down = mean_loss(model, x, y, offsets)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    off_grad = None
    if offsets is not None:
        off_grad = np.zeros_like(offsets)
        for idx in np.ndindex(offsets.shape):
            orig = offsets[idx]
            offsets[idx] = orig + h
            up = mean_loss(model, x, y, offsets)
            offsets[idx] = orig - h
            down = mean_loss(model, x, y, offsets)
            offsets[idx] = orig
            off_grad[idx] = (up - down) / (2 * h)
    return grads, off_grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def centralized_sgd(train, config, sigma):
    """Independent single-learner reference for a K=1, full-selection FedAvg run.

    Plain numpy forward/backward over a tanh MLP; draws initial weights,
    batch orders and augmentation noise from the same named streams the
    simulator uses, and restarts the momentum each round like a fresh client.
    """
    from fbl.model import init_classifier
    from fbl.rng import SERVER, derive_rng

    model = init_classifier(train.dim, config.hidden_dims, train.num_classes, derive_rng(config.seed, SERVER, 0, "init"))
    Ws = [l.weight.copy() for l in model.feature_layers] + [model.head.weight.copy()]
    bs = [l.bias.copy() for l in model.feature_layers] + [model.head.bias.copy()]
    x_all, y_all = train.features, train.labels
    n = len(y_all)
    for t in range(1, config.rounds + 1):
        order_rng = derive_rng(config.seed, 0, t, "shuffle")
        noise_rng = derive_rng(config.seed, 0, t, "augment")
        vW = [np.zeros_like(w) for w in Ws]
        vb = [np.zeros_like(b) for b in bs]
        steps = 0
        while steps < config.local_iters:
            perm = order_rng.permutation(n)
            for s in range(0, n, config.batch_size):
                if steps >= config.local_iters:
                    break
                idx = perm[s : s + config.batch_size]
                x = x_all[idx] + noise_rng.normal(0.0, sigma, size=x_all[idx].shape)
                y = y_all[idx]
                acts = [x]
                for w, b in zip(Ws[:-1], bs[:-1]):
                    acts.append(np.tanh(acts[-1] @ w.T + b))
                z = acts[-1] @ Ws[-1].T + bs[-1]
                z = z - z.max(axis=1, keepdims=True)
                p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                d = p.copy()
                d[np.arange(len(y)), y] -= 1.0
                d /= len(y)
                gW = [None] * len(Ws)
                gb = [None] * len(bs)
                gW[-1], gb[-1] = d.T @ acts[-1], d.sum(axis=0)
                d = d @ Ws[-1]
                for i in range(len(Ws) - 2, -1, -1):
                    d = d * (1.0 - acts[i + 1] ** 2)
                    gW[i], gb[i] = d.T @ acts[i], d.sum(axis=0)
                    d = d @ Ws[i]
                for group, grads, vel in ((Ws, gW, vW), (bs, gb, vb)):
                    for w, g, v in zip(group, grads, vel):
                        v *= config.momentum
                        v += g
                        v += config.weight_decay * w
                        w -= config.lr * v
                steps += 1
    params = []
    for w, b in zip(Ws, bs):
        params += [w, b]
    return params


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
