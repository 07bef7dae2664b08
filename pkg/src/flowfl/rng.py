"""Seed plumbing.

One integer seed drives every random choice in a run. Consumers never share a
generator; each asks for its own stream by a stable label path, e.g.
``stream(seed, "train", robot, round)``. Adding a consumer therefore never
shifts the draws seen by another one.
"""

import hashlib

import numpy as np


def _label_words(labels):
    words = []
    for label in labels:
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``labels`` under the run ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=_label_words(labels))
    return np.random.default_rng(seq)
