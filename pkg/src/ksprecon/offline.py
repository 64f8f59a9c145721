"""Network-free reconstruction of a dataset file with the chain's own gadgets."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from . import wire
from .detection import detections_to_json
from .files import write_json, write_pgm
from .metrics import SsimParams
from .pipeline import (
    AccumulateGadget,
    DetectGadget,
    ReconGadget,
    metrics_document,
    realized_rate,
    run_sequential,
)
from .sampling import default_acs_fraction


def read_dataset(path):
    with open(path, "rb") as fh:
        return list(wire.iter_messages(fh))


def recon_dataset(
    dataset_path, out_dir, method: str = "zero_fill", rate: float = 1.0,
    acs: Optional[float] = None, seed: int = 0, lam: float = 0.01, max_iters: int = 50,
    rel_tol: float = 1e-6, ssim_params: SsimParams = SsimParams(), detect: Optional[dict] = None,
) -> dict:
    """Reconstruct, detect and score every slice; write PGMs and JSON documents.

    Produces ``slice_NNN.pgm``, ``metrics.json`` (per-slice SSIM/NMSE) and
    ``detections.json`` (reference blob detector) in ``out_dir`` and returns
    the metrics document.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recon = ReconGadget(
        method=method, lam=lam, max_iters=max_iters, rel_tol=rel_tol,
        mask={"source": "policy", "rate": float(rate),
              "acs_fraction": default_acs_fraction(rate) if acs is None else float(acs), "seed": seed},
    )
    gadgets = [AccumulateGadget(), recon, DetectGadget(**(detect or {}))]
    outputs = run_sequential(gadgets, read_dataset(dataset_path))

    images = {}
    detections = []
    for msg in outputs:
        if isinstance(msg, wire.Image):
            images[msg.slice_index] = msg
            write_pgm(out / f"slice_{msg.slice_index:03d}.pgm", msg.pixels)
        elif isinstance(msg, wire.Annotations):
            detections.extend(wire.detections_from_annotations(msg))
    rate_value = recon.policy.nominal_rate if recon.policy is not None else realized_rate(images)
    doc = metrics_document(images, ssim_params, recon.method, rate_value, recon.describe_mask())
    write_json(out / "metrics.json", doc)
    (out / "detections.json").write_text(detections_to_json(detections), encoding="utf-8")
    return doc
