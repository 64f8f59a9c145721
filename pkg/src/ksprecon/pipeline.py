"""Gadget-chain runtime.

A chain is an ordered list of gadgets, each running in its own thread and
connected to its neighbours by bounded FIFO queues. Gadgets see messages
strictly in order and flush once at end of stream.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional

import numpy as np

from . import wire
from .detection import (
    blob_detect,
    evaluate,
    load_external_detections,
    load_ground_truth,
)
from .metrics import SsimParams, volume_metrics
from .model import KSpaceSlice, MagnitudeImage, SamplingMask, normalize_magnitude
from .recon import CgConfig, cg_sense, estimate_sensitivities, zero_fill_recon
from .sampling import MaskPolicy, apply_mask, default_acs_fraction, generate_mask

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 64
KINDS = ("accumulate", "recon", "detect", "report")
RECON_METHODS = ("zero_fill", "cg_sense", "external")
DETECT_METHODS = ("blob", "external")

# reference blob detector settings, tuned to the phantom's rim/body/lesion levels
DEFAULT_BLOB_THRESHOLD = 0.53
DEFAULT_MIN_AREA = 5
DEFAULT_MAX_AREA = 400


class ChainConfigError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


class GadgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SliceData:
    """In-process message: one assembled slice and the mask that produced it."""

    kspace: KSpaceSlice
    mask: SamplingMask

    @property
    def slice_index(self) -> int:
        return self.kspace.slice_index


@dataclass
class ChainConfig:
    gadgets: List[dict]
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainConfig":
        if not isinstance(doc, dict) or not isinstance(doc.get("gadgets"), list):
            raise ChainConfigError('chain config needs a "gadgets" list')
        return cls([dict(g) for g in doc["gadgets"]], int(doc.get("queue_capacity", DEFAULT_QUEUE_CAPACITY)))

    @classmethod
    def from_json(cls, text: str) -> "ChainConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ChainConfigError(f"chain config is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "ChainConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def to_dict(self) -> dict:
        return {"gadgets": self.gadgets, "queue_capacity": self.queue_capacity}

    def validate(self):
        kinds = []
        for i, g in enumerate(self.gadgets):
            kind = g.get("kind")
            if kind not in KINDS:
                raise ChainConfigError(f"gadget {i}: unknown kind {kind!r} (expected one of {KINDS})")
            kinds.append(kind)
        if kinds.count("accumulate") != 1 or kinds[0] != "accumulate":
            raise ChainConfigError("exactly one accumulate gadget must come first")
        if kinds.count("report") != 1 or kinds[-1] != "report":
            raise ChainConfigError("exactly one report gadget must come last")
        if "detect" in kinds:
            if "recon" not in kinds or kinds.index("recon") > kinds.index("detect"):
                raise ChainConfigError("recon must precede detect")
        if self.queue_capacity < 1:
            raise ChainConfigError("queue_capacity must be at least 1")


def default_chain(
    method: str = "zero_fill", rate: float = 1.0, acs: Optional[float] = None, seed: int = 0,
    ground_truth: Optional[str] = None, **recon_params,
) -> ChainConfig:
    recon = {"kind": "recon", "method": method, **recon_params}
    recon["mask"] = {
        "source": "policy", "rate": float(rate),
        "acs_fraction": default_acs_fraction(rate) if acs is None else float(acs), "seed": int(seed),
    }
    return ChainConfig([
        {"kind": "accumulate"},
        recon,
        {"kind": "detect", "method": "blob"},
        {"kind": "report", "ground_truth": ground_truth},
    ])


class Gadget:
    """One processing stage. Subclasses override ``process`` and ``flush``."""

    kind = "gadget"

    def process(self, msg) -> Iterable:
        yield msg

    def flush(self) -> Iterable:
        return ()


class AccumulateGadget(Gadget):
    """Assemble streamed phase-encode lines into slices and recover the mask."""

    kind = "accumulate"

    def __init__(self, **params):
        self.encoding: dict = {}
        self.pending: Dict[int, Dict[int, wire.Acquisition]] = {}

    def process(self, msg):
        if isinstance(msg, wire.Config):
            try:
                doc = json.loads(msg.text) if msg.text.strip() else {}
            except json.JSONDecodeError:
                doc = {}
            if isinstance(doc, dict):
                self.encoding = doc.get("encoding", {}) or {}
            yield msg
        elif isinstance(msg, wire.Acquisition):
            lines = self.pending.setdefault(msg.slice_index, {})
            if msg.line_index in lines:
                raise AssemblyError(f"slice {msg.slice_index}: duplicate line {msg.line_index}")
            if lines:
                ref = next(iter(lines.values()))
                if (ref.num_coils, ref.num_samples) != (msg.num_coils, msg.num_samples):
                    raise AssemblyError(
                        f"slice {msg.slice_index}: line {msg.line_index} has "
                        f"{msg.num_coils}x{msg.num_samples} samples, expected {ref.num_coils}x{ref.num_samples}"
                    )
            lines[msg.line_index] = msg
            if msg.is_last_in_slice:
                yield self._assemble(msg.slice_index)
        else:
            yield msg

    def flush(self):
        for s in sorted(self.pending):
            yield self._assemble(s)

    def _assemble(self, slice_index: int) -> SliceData:
        lines = self.pending.pop(slice_index)
        first = next(iter(lines.values()))
        num_pe = int(self.encoding.get("num_pe", 0)) or max(lines) + 1
        if max(lines) >= num_pe:
            raise AssemblyError(f"slice {slice_index}: line {max(lines)} beyond num_pe={num_pe}")
        data = np.zeros((first.num_coils, num_pe, first.num_samples), dtype=np.complex64)
        acquired = np.zeros(num_pe, dtype=bool)
        acs = []
        for idx, acq in lines.items():
            data[:, idx, :] = acq.data
            acquired[idx] = True
            if acq.is_acs:
                acs.append(idx)
        acs_range = None
        if acs:
            acs_range = (min(acs), max(acs))
            if len(acs) != acs_range[1] - acs_range[0] + 1:
                raise AssemblyError(f"slice {slice_index}: ACS lines are not contiguous")
        mask = SamplingMask(num_pe, acquired, acs_range, num_pe / int(acquired.sum()))
        return SliceData(KSpaceSlice.from_array(slice_index, data), mask)


def _load_external_image(directory: Path, slice_index: int) -> np.ndarray:
    from .files import read_pgm

    npy = directory / f"slice_{slice_index:03d}.npy"
    if npy.exists():
        return np.load(npy).astype(np.float32)
    pgm = directory / f"slice_{slice_index:03d}.pgm"
    if pgm.exists():
        return read_pgm(pgm).astype(np.float32)
    raise GadgetError(f"no external image for slice {slice_index} in {directory}")


class ReconGadget(Gadget):
    """Reconstruct each slice; optionally undersample retrospectively first.

    With ``mask.source == "policy"`` the incoming (fully sampled) slice is the
    reference, a per-slice mask is drawn from the policy and applied, and the
    reference image travels with the result for the metrics stage.
    """

    kind = "recon"

    def __init__(self, method="zero_fill", mask=None, lam=0.01, max_iters=50, rel_tol=1e-6,
                 directory=None, **params):
        if method not in RECON_METHODS:
            raise ChainConfigError(f"recon: unknown method {method!r} (expected one of {RECON_METHODS})")
        self.method = method
        self.cg = CgConfig(lam=float(lam), max_iters=int(max_iters), rel_tol=float(rel_tol))
        mask = dict(mask or {"source": "stream"})
        self.policy = None
        if mask.get("source", "stream") == "policy":
            rate = float(mask.get("rate", 1.0))
            acs = mask.get("acs_fraction")
            self.policy = MaskPolicy(rate, default_acs_fraction(rate) if acs is None else float(acs),
                                     int(mask.get("seed", 0)))
        elif mask.get("source", "stream") != "stream":
            raise ChainConfigError(f"recon: mask source must be 'stream' or 'policy', got {mask.get('source')!r}")
        if method == "external":
            if directory is None:
                raise ChainConfigError("recon: method 'external' needs a 'directory'")
            self.directory = Path(directory)

    def describe_mask(self) -> dict:
        if self.policy is None:
            return {"source": "stream"}
        return {"source": "policy", **self.policy.describe()}

    def process(self, msg):
        if not isinstance(msg, SliceData):
            yield msg
            return
        ks, mask = msg.kspace, msg.mask
        reference = None
        if self.policy is not None:
            if not mask.is_full():
                raise GadgetError(f"slice {msg.slice_index}: policy undersampling needs a fully sampled stream")
            reference = zero_fill_recon(ks.data, mask).astype(np.float32)
            mask = generate_mask(ks.num_pe, self.policy, msg.slice_index)
            ks = apply_mask(ks, mask)
        elif mask.is_full():
            reference = zero_fill_recon(ks.data, mask).astype(np.float32)
        image = self.reconstruct(ks, mask)
        yield wire.Image(msg.slice_index, image, meta={"reference": reference, "mask": mask})

    def reconstruct(self, ks: KSpaceSlice, mask: SamplingMask) -> np.ndarray:
        if self.method == "zero_fill":
            img = zero_fill_recon(ks.data, mask)
        elif self.method == "cg_sense":
            sens = estimate_sensitivities(ks.data, mask)
            x, trace = cg_sense(ks.data, mask, sens, self.cg)
            log.debug("slice %d: CG-SENSE %d iterations, converged=%s",
                      ks.slice_index, trace.iterations_run, trace.converged)
            img = np.abs(x)
        else:
            img = _load_external_image(self.directory, ks.slice_index)
            if img.shape != (ks.num_pe, ks.num_ro):
                raise GadgetError(f"external image for slice {ks.slice_index} has shape {img.shape}")
        return img.astype(np.float32)


class DetectGadget(Gadget):
    """Emit one Annotations message after every Image."""

    kind = "detect"

    def __init__(self, method="blob", intensity_threshold=DEFAULT_BLOB_THRESHOLD,
                 min_area=DEFAULT_MIN_AREA, max_area=DEFAULT_MAX_AREA, path=None,
                 confidence_threshold=0.0, **params):
        if method not in DETECT_METHODS:
            raise ChainConfigError(f"detect: unknown method {method!r} (expected one of {DETECT_METHODS})")
        self.method = method
        self.threshold = float(intensity_threshold)
        self.min_area = int(min_area)
        self.max_area = None if max_area is None else int(max_area)
        self.confidence_threshold = float(confidence_threshold)
        self.external = {}
        if method == "external":
            if path is None:
                raise ChainConfigError("detect: method 'external' needs a 'path'")
            for d in load_external_detections(Path(path).read_text(encoding="utf-8")):
                self.external.setdefault(d.slice_index, []).append(d)

    def process(self, msg):
        yield msg
        if isinstance(msg, wire.Image):
            if self.method == "blob":
                norm = normalize_magnitude(MagnitudeImage(msg.slice_index, msg.pixels))
                dets = blob_detect(norm, self.threshold, self.min_area, self.max_area)
            else:
                dets = self.external.get(msg.slice_index, [])
            dets = [d for d in dets if d.confidence >= self.confidence_threshold]
            yield wire.annotations_from_detections(msg.slice_index, dets)


def metrics_document(images: Dict[int, wire.Image], ssim_params: SsimParams,
                     method: str, rate: Optional[float], mask_info: dict) -> dict:
    """Per-slice metric records plus the settings needed to reproduce them."""
    refs = {s: (img.meta or {}).get("reference") for s, img in images.items()}
    doc = volume_metrics(refs, {s: img.pixels for s, img in images.items()}, ssim_params)
    for rec in doc["slices"]:
        mask = (images[rec["slice"]].meta or {}).get("mask")
        if mask is not None:
            rec["mask"] = mask.to_string()
    return {"method": method, "rate": rate, "mask": mask_info, **doc}


def realized_rate(images: Dict[int, wire.Image]) -> Optional[float]:
    masks = [(img.meta or {}).get("mask") for img in images.values()]
    masks = [m for m in masks if m is not None]
    if not masks:
        return None
    return sum(m.num_pe for m in masks) / sum(m.num_acquired for m in masks)


class ReportGadget(Gadget):
    """Collect images and detections; emit one evaluation Report at end of stream."""

    kind = "report"

    def __init__(self, ground_truth=None, iou_threshold=0.5, ssim=None,
                 method="unknown", rate=None, mask_info=None, **params):
        self.iou_threshold = float(iou_threshold)
        self.ssim_params = SsimParams(**(ssim or {}))
        self.gts = []
        if ground_truth:
            self.gts = load_ground_truth(Path(ground_truth).read_text(encoding="utf-8"))
        self.method = method
        self.rate = rate
        self.mask_info = mask_info or {"source": "stream"}
        self.images: Dict[int, wire.Image] = {}
        self.detections = []
        self.failed = False

    def process(self, msg):
        if isinstance(msg, wire.Image):
            self.images[msg.slice_index] = msg
        elif isinstance(msg, wire.Annotations):
            self.detections.extend(wire.detections_from_annotations(msg))
        elif isinstance(msg, wire.Report):
            self.failed = True
        yield msg

    def flush(self):
        if self.failed:
            return
        rate = self.rate if self.rate is not None else realized_rate(self.images)
        doc = metrics_document(self.images, self.ssim_params, self.method, rate, self.mask_info)
        seen = set(self.images)
        gts = [g for g in self.gts if g.slice_index in seen]
        report = evaluate(self.detections, gts, doc, self.iou_threshold)
        yield wire.Report(report.to_json())


GADGETS = {
    "accumulate": AccumulateGadget,
    "recon": ReconGadget,
    "detect": DetectGadget,
    "report": ReportGadget,
}


def error_report(stage: str, exc: BaseException) -> wire.Report:
    doc = {"error": type(exc).__name__, "stage": stage, "message": str(exc)}
    return wire.Report(json.dumps(doc, indent=2) + "\n")


_END = object()


class Chain:
    def __init__(self, gadgets: List[Gadget], queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.gadgets = gadgets
        self.queue_capacity = queue_capacity

    def __len__(self):
        return len(self.gadgets)

    @property
    def kinds(self) -> List[str]:
        return [g.kind for g in self.gadgets]

    def run(self, messages: Iterable) -> Iterator:
        """Stream ``messages`` through the chain, yielding outputs as produced.

        Input stops at the first Close. An exception raised by the input
        iterator or by a gadget becomes an error Report and the stream ends.
        """
        stop = threading.Event()
        queues = [queue.Queue(maxsize=self.queue_capacity) for _ in range(len(self.gadgets) + 1)]

        def put(q, item):
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return
                except queue.Full:
                    continue

        def feed():
            try:
                for msg in messages:
                    if stop.is_set() or isinstance(msg, wire.Close):
                        break
                    put(queues[0], msg)
            except Exception as exc:  # noqa: BLE001 - reported downstream
                log.warning("input stream failed: %s", exc)
                put(queues[0], error_report("input", exc))
            put(queues[0], _END)

        def stage(i: int, gadget: Gadget):
            q_in, q_out = queues[i], queues[i + 1]
            failed = False
            while True:
                item = q_in.get()
                if item is _END:
                    break
                if failed:
                    continue
                if isinstance(item, wire.Report):
                    # an upstream error: pass it on and stop producing
                    put(q_out, item)
                    failed = True
                    continue
                try:
                    for out in gadget.process(item):
                        put(q_out, out)
                except Exception as exc:  # noqa: BLE001
                    log.warning("%s gadget failed: %s", gadget.kind, exc)
                    put(q_out, error_report(gadget.kind, exc))
                    failed = True
            if not failed:
                try:
                    for out in gadget.flush():
                        put(q_out, out)
                except Exception as exc:  # noqa: BLE001
                    log.warning("%s gadget failed during flush: %s", gadget.kind, exc)
                    put(q_out, error_report(gadget.kind, exc))
            put(q_out, _END)

        threads = [threading.Thread(target=feed, daemon=True, name="chain-feed")]
        threads += [
            threading.Thread(target=stage, args=(i, g), daemon=True, name=f"chain-{g.kind}")
            for i, g in enumerate(self.gadgets)
        ]
        for t in threads:
            t.start()
        try:
            while True:
                item = queues[-1].get()
                if item is _END:
                    break
                yield item
        finally:
            stop.set()


def build_chain(cfg: ChainConfig) -> Chain:
    cfg.validate()
    gadgets: List[Gadget] = []
    recon: Optional[ReconGadget] = None
    for entry in cfg.gadgets:
        params = {k: v for k, v in entry.items() if k != "kind"}
        kind = entry["kind"]
        if kind == "report" and recon is not None:
            params.setdefault("method", recon.method)
            params.setdefault("mask_info", recon.describe_mask())
            if recon.policy is not None:
                params.setdefault("rate", recon.policy.nominal_rate)
        if kind == "recon" and "lambda" in params:
            params["lam"] = params.pop("lambda")
        try:
            gadget = GADGETS[kind](**params)
        except (TypeError, ValueError) as exc:
            raise ChainConfigError(f"{kind} gadget: {exc}") from None
        if isinstance(gadget, ReconGadget):
            recon = gadget
        gadgets.append(gadget)
    return Chain(gadgets, cfg.queue_capacity)


def run_chain(chain: Chain, messages: Iterable) -> Iterator:
    return chain.run(messages)


def run_sequential(gadgets: List[Gadget], messages: Iterable) -> List:
    """Single-threaded reference execution of the same gadgets (no error capture)."""
    stream = []
    for msg in messages:
        if isinstance(msg, wire.Close):
            break
        stream.append(msg)
    for g in gadgets:
        out = []
        for msg in stream:
            out.extend(g.process(msg))
        out.extend(g.flush())
        stream = out
    return stream
