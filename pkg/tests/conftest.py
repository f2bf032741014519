"""Shared test fixtures and tiny-corpus helpers."""

import numpy as np

from evcap.data import ChargingSnippet


def toy_snippets(n, seed=0, t_steps=8, channels=2, labels=None):
    """Snippet stand-ins with arbitrary (small) series shapes.

    Bypasses ChargingSnippet validation so model-level tests can run on
    desk-scale dimensions; only fields used by the training code are set.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = ChargingSnippet.__new__(ChargingSnippet)
        object.__setattr__(s, "snippet_id", f"s{i}")
        object.__setattr__(s, "vehicle_id", f"v{i}")
        object.__setattr__(s, "manufacturer_id", "T")
        object.__setattr__(s, "mileage_km", 0.0)
        object.__setattr__(s, "capacity_label_ah", labels[i] if labels is not None else None)
        object.__setattr__(s, "series", rng.normal(size=(t_steps, channels)).astype(np.float32))
        out.append(s)
    return out
