"""Named random sub-streams derived from one root seed.

Every consumer (data sampling, augmentation, weight init, dropout) pulls its
own stream so that changing one of them leaves the others untouched.
"""
import zlib

import numpy as np
import torch

STREAMS = ("data", "augment", "init", "dropout", "noise", "folds", "eval")


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name, *extra):
    """Return a numpy Generator for sub-stream ``name`` of ``seed``.

    Extra integers (e.g. a fold index or subject index) further split the stream.
    """
    return np.random.default_rng([int(seed), _key(name), *[int(e) for e in extra]])


def sub_seed(seed, name, *extra):
    """A 63-bit integer seed for libraries that want a plain int."""
    return int(stream(seed, name, *extra).integers(0, 2**63 - 1))


def torch_generator(seed, name, *extra):
    g = torch.Generator()
    g.manual_seed(sub_seed(seed, name, *extra))
    return g
