"""Random network generators shared by the test modules."""

import numpy as np

from ocresnet.resnet import NetworkConfig, random_weights


def random_config(rng: np.random.Generator, max_depth: int = 8, max_width: int = 16,
                  staged: bool | None = None, **kw) -> NetworkConfig:
    """Random dense ResNet; staged configs get widths changing at random blocks."""
    depth = int(rng.integers(0, max_depth + 1))
    if staged is None:
        staged = bool(rng.integers(0, 2))
    if staged:
        widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=depth + 1))
    else:
        widths = (int(rng.integers(1, max_width + 1)),) * (depth + 1)
    kw.setdefault("input_dim", int(rng.integers(1, 7)))
    kw.setdefault("num_outputs", int(rng.integers(2, 5)))
    return NetworkConfig(widths=widths, **kw)


def random_net(rng, **kw):
    cfg = random_config(rng, **kw)
    return random_weights(cfg, rng)
