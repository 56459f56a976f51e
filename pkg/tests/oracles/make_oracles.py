"""Regenerate the frozen full-order grid oracles used by the acceptance tests.

Each oracle is a dense sweep of the full-order transfer function over a
parameter grid. Only band summaries are stored: the L_k objective for the
orders that the tests need, and the peak magnitude of the band.

    python tests/oracles/make_oracles.py beam      # ~3 min
    python tests/oracles/make_oracles.py kelvin    # ~35 min on one core
"""
import json
import sys
import time
from pathlib import Path

import numpy as np

from adaprom.adjoint import lk_norm
from adaprom.models import beam_model, kelvin_cell_model
from adaprom.mor import FrequencyGrid, transfer_magnitudes

HERE = Path(__file__).parent

CASES = {
    # name: (model factory, levels, sweep band in Hz, [(band, k), ...])
    "beam": (beam_model, 41, (50.0, 100.0), [((50.0, 100.0), 1)]),
    "kelvin": (kelvin_cell_model, 21, (200.0, 400.0),
               [((300.0, 400.0), 1), ((200.0, 400.0), 1), ((200.0, 400.0), 20)]),
}


def sweep(name):
    factory, levels, band, objectives = CASES[name]
    model = factory()
    grid = FrequencyGrid.band(*band)
    axes = [np.linspace(lo, hi, levels) for lo, hi in zip(model.lower, model.upper)]
    out = {f"{lo:g}-{hi:g}Hz_k{k}": np.empty((levels, levels)) for (lo, hi), k in objectives}
    peaks = {f"{lo:g}-{hi:g}Hz": np.empty((levels, levels)) for (lo, hi), _ in objectives}
    t0 = time.time()
    for i, a in enumerate(axes[0]):
        for j, b in enumerate(axes[1]):
            mag = transfer_magnitudes(model.build([a, b]), grid)
            for (lo, hi), k in objectives:
                sel = (grid.frequencies >= lo - 1e-9) & (grid.frequencies <= hi + 1e-9)
                out[f"{lo:g}-{hi:g}Hz_k{k}"][i, j] = lk_norm(mag[sel], k)
                peaks[f"{lo:g}-{hi:g}Hz"][i, j] = mag[sel].max()
        print(f"{name}: row {i + 1}/{levels} done after {time.time() - t0:.0f} s", flush=True)
    data = {
        "model": model.name,
        "parameter_names": list(model.parameter_names),
        "axes": [ax.tolist() for ax in axes],
        "note": "objective[i][j] is evaluated at (axes[0][i], axes[1][j]); values are R, not ln R",
        "objectives": {key: v.tolist() for key, v in out.items()},
        "band_peaks": {key: v.tolist() for key, v in peaks.items()},
    }
    (HERE / f"{name}_oracle.json").write_text(json.dumps(data, indent=1))


if __name__ == "__main__":
    for name in sys.argv[1:] or list(CASES):
        sweep(name)
