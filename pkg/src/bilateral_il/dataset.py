"""Min-max normalisation, training-window sampling and the ``.demo`` file format."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .operator import MASTER_CHANNELS, REF_CHANNELS, SLAVE_CHANNELS, Demonstration


class DegenerateRange(ValueError):
    pass


class DemoTooShort(ValueError):
    pass


class FormatVersionMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


MODELS = ("M1", "M2")
INPUT_CHANNELS = list(SLAVE_CHANNELS)
TARGET_CHANNELS = {"M1": list(REF_CHANNELS), "M2": list(MASTER_CHANNELS)}
RNN_TICK = 0.02  # s; equals the prediction horizon

# movable ranges of the reference hardware (rad, rad/s, Nm)
_ANGLE = [(-0.5, 0.5), (0.1, 0.4), (0.1, 0.5)]
_RATE = [(-0.35, 0.05), (-0.20, 0.05), (-0.05, 0.35)]
TABLE_MODEL1 = {
    "inputs": _ANGLE + _RATE + [(-0.250, 0.050), (-0.600, 0.050), (-0.100, 0.100)],
    "outputs": [(-0.020, 0.020), (-0.025, 0.025), (-0.015, 0.015)],
}
_TAU2 = [(-0.250, 0.250), (-0.600, 0.600), (-0.100, 0.100)]
TABLE_MODEL2 = {"inputs": _ANGLE + _RATE + _TAU2, "outputs": _ANGLE + _RATE + _TAU2}


def normalize(x, lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise DegenerateRange("x_max must exceed x_min for every channel")
    return (np.asarray(x, dtype=float) - lo) / (hi - lo)


def denormalize(x_norm, lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise DegenerateRange("x_max must exceed x_min for every channel")
    return lo + np.asarray(x_norm, dtype=float) * (hi - lo)


@dataclass
class NormRanges:
    model: str
    input_lo: np.ndarray
    input_hi: np.ndarray
    output_lo: np.ndarray
    output_hi: np.ndarray

    def __post_init__(self):
        for name in ("input_lo", "input_hi", "output_lo", "output_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.input_hi <= self.input_lo) or np.any(self.output_hi <= self.output_lo):
            raise DegenerateRange("x_max must exceed x_min for every channel")

    @classmethod
    def table(cls, model: str) -> "NormRanges":
        tab = {"M1": TABLE_MODEL1, "M2": TABLE_MODEL2}[model]
        i, o = np.array(tab["inputs"]), np.array(tab["outputs"])
        return cls(model, i[:, 0], i[:, 1], o[:, 0], o[:, 1])

    @classmethod
    def from_corpus(cls, corpus: list[Demonstration], model: str, margin: float = 0.1) -> "NormRanges":
        """Per-channel min/max over the corpus, widened by ``margin`` of the span on each side."""
        def span(names):
            data = np.vstack([d.block(names) for d in corpus])
            lo, hi = data.min(axis=0), data.max(axis=0)
            pad = np.maximum(margin * (hi - lo), 1e-6)
            return lo - pad, hi + pad
        ilo, ihi = span(INPUT_CHANNELS)
        olo, ohi = span(TARGET_CHANNELS[model])
        return cls(model, ilo, ihi, olo, ohi)

    def norm_inputs(self, x):
        return normalize(x, self.input_lo, self.input_hi)

    def norm_outputs(self, y):
        return normalize(y, self.output_lo, self.output_hi)

    def denorm_outputs(self, y):
        return denormalize(y, self.output_lo, self.output_hi)

    def to_dict(self) -> dict:
        return {"model": self.model, **{k: getattr(self, k).tolist()
                                        for k in ("input_lo", "input_hi", "output_lo", "output_hi")}}

    @classmethod
    def from_dict(cls, d: dict) -> "NormRanges":
        return cls(**d)


@dataclass
class TrainingWindow:
    inputs: np.ndarray  # T x 9, normalised
    targets: np.ndarray  # T x k, normalised, one RNN tick ahead
    demo_id: int
    start_time: float


def window_arrays(demo: Demonstration, model: str, start: int, steps: int, stride: int):
    """Raw (unnormalised) inputs and one-tick-ahead targets starting at sample ``start``."""
    idx = start + stride * np.arange(steps)
    return demo.block(INPUT_CHANNELS)[idx], demo.block(TARGET_CHANNELS[model])[idx + stride]


def sample_window(corpus: list[Demonstration], model: str, rng: np.random.Generator, window_s: float = 2.0,
                  norm: NormRanges | None = None, tick: float = RNN_TICK) -> TrainingWindow:
    """Pick a demo uniformly, then a uniform start offset, and cut a window on the RNN tick."""
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    norm = norm or NormRanges.table(model)
    demo_id = int(rng.integers(len(corpus)))
    demo = corpus[demo_id]
    stride = int(round(tick * demo.rate))
    steps = int(round(window_s / tick))
    last_start = len(demo.data) - 1 - stride * steps
    if stride < 1 or last_start < 0:
        raise DemoTooShort(f"demo {demo_id} ({demo.duration:.2f} s) is shorter than {window_s + tick:.2f} s")
    start = int(rng.integers(last_start + 1))
    x, y = window_arrays(demo, model, start, steps, stride)
    return TrainingWindow(np.clip(norm.norm_inputs(x), 0.0, 1.0), np.clip(norm.norm_outputs(y), 0.0, 1.0),
                          demo_id, start / demo.rate)


# ---------------------------------------------------------------------------
# .demo container: magic, version byte, JSON header, float64 payload, sha256

MAGIC = b"BILDEMO\x00"
VERSION = 1


def write_records(path, records: list[Demonstration], config: dict | None = None) -> None:
    header = {
        "count": len(records),
        "config": config or {},
        "records": [{"rate": r.rate, "channels": list(r.channels), "rows": int(r.data.shape[0]),
                     "meta": r.meta} for r in records],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(hbytes)))
    buf.write(hbytes)
    for r in records:
        buf.write(np.ascontiguousarray(r.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def read_records(path) -> tuple[list[Demonstration], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 5 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a demo file")
    version, hlen = struct.unpack_from("<BI", raw, len(MAGIC))
    if version != VERSION:
        raise FormatVersionMismatch(f"{path}: version {version}, expected {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    off = len(MAGIC) + 5
    header = json.loads(body[off: off + hlen])
    off += hlen
    out = []
    for rec in header["records"]:
        n = rec["rows"] * len(rec["channels"])
        data = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(rec["rows"], len(rec["channels"]))
        off += 8 * n
        out.append(Demonstration(rate=rec["rate"], data=data.astype(float), channels=rec["channels"],
                                 meta=rec["meta"]))
    if off != len(body):
        raise CorruptFile(f"{path}: payload size mismatch")
    return out, header["config"]


def save_corpus(path, corpus: list[Demonstration], config: dict | None = None) -> None:
    write_records(path, corpus, config)


def load_corpus(path) -> list[Demonstration]:
    return read_records(path)[0]


def export_csv(path_or_file, demo: Demonstration) -> None:
    """One row per sample with a leading time column; floats written with repr for lossless round-trip."""
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(demo.channels))
        for i, row in enumerate(demo.data):
            w.writerow([repr(i / demo.rate)] + [repr(float(v)) for v in row])
    finally:
        if own:
            fh.close()
