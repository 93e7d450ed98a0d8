"""Shared helpers for building random fixtures across test modules."""

import numpy as np

from pgvc.msrq import ScaleSchedule, ScaleSpec


def random_schedule(rng, latent_h, latent_w, channels):
    """Random monotone schedule ending at the full latent grid."""
    k_inner = int(rng.integers(0, 4))
    hs = sorted(int(rng.integers(1, latent_h + 1)) for _ in range(k_inner))
    ws = sorted(int(rng.integers(1, latent_w + 1)) for _ in range(k_inner))
    dims = list(zip(hs, ws)) + [(latent_h, latent_w)]
    # drop duplicates of the final scale to keep sizes strictly useful
    specs = [
        ScaleSpec(index=i + 1, width=w, height=h, bit_length=channels)
        for i, (h, w) in enumerate(dims)
    ]
    return ScaleSchedule(tuple(specs))


def random_latent(rng, frames, h, w, channels, scale=1.5):
    return rng.normal(size=(frames, h, w, channels)) * scale
