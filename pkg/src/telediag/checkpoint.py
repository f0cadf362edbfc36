"""Checkpoint persistence: text header plus little-endian float64 payload.

Layout::

    telediag-checkpoint <version>
    config <n>
    <key> = <value>            (n lines, verbatim strings)
    tensors <m>
    <name> <shape|-> <offset>  (m lines, offsets into the payload)
    payload <total-bytes>
    <raw little-endian float64 data>

Saving a loaded checkpoint reproduces the original file byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import TelediagError

MAGIC = "telediag-checkpoint"
VERSION = 1


class CheckpointError(TelediagError):
    """Checkpoint file is malformed or incompatible."""


@dataclass
class Calibration:
    """Normal-operation statistics captured on the held-out slice."""

    error_sigma: np.ndarray  # (K,) per-channel std of prediction errors
    latent_mean: np.ndarray  # (N, d_z) per-instance latent operating point
    scores: np.ndarray  # deviation scores of the calibration windows

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            "calibration.error_sigma": self.error_sigma,
            "calibration.latent_mean": self.latent_mean,
            "calibration.scores": self.scores,
        }

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "Calibration":
        try:
            return cls(
                error_sigma=tensors["calibration.error_sigma"],
                latent_mean=tensors["calibration.latent_mean"],
                scores=tensors["calibration.scores"],
            )
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks calibration tensor {exc}") from None


@dataclass
class Checkpoint:
    """Named float64 tensors plus a flat key-value config snapshot."""

    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    def save(self, path: str | Path) -> None:
        arrays = {
            name: np.ascontiguousarray(arr, dtype="<f8") for name, arr in self.tensors.items()
        }
        lines = [f"{MAGIC} {self.version}", f"config {len(self.config)}"]
        lines += [f"{k} = {v}" for k, v in self.config.items()]
        lines.append(f"tensors {len(arrays)}")
        offset = 0
        for name, arr in arrays.items():
            shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "-"
            lines.append(f"{name} {shape} {offset}")
            offset += arr.nbytes
        lines.append(f"payload {offset}")
        header = ("\n".join(lines) + "\n").encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(header)
            for arr in arrays.values():
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = Path(path).read_bytes()
        pos = 0

        def next_line() -> str:
            nonlocal pos
            end = blob.index(b"\n", pos)
            line = blob[pos:end].decode("utf-8")
            pos = end + 1
            return line

        first = next_line().split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"not a {MAGIC} file: {path}")
        version = int(first[1])
        tag, n_config = next_line().split()
        if tag != "config":
            raise CheckpointError("missing config section")
        config: dict[str, str] = {}
        for _ in range(int(n_config)):
            key, _, value = next_line().partition(" = ")
            config[key] = value
        tag, n_tensors = next_line().split()
        if tag != "tensors":
            raise CheckpointError("missing tensors section")
        specs = []
        for _ in range(int(n_tensors)):
            name, shape_s, offset_s = next_line().rsplit(" ", 2)
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            specs.append((name, shape, int(offset_s)))
        tag, total = next_line().split()
        if tag != "payload":
            raise CheckpointError("missing payload section")
        payload = blob[pos:]
        if len(payload) != int(total):
            raise CheckpointError(
                f"payload length {len(payload)} does not match declared {total}"
            )
        tensors: dict[str, np.ndarray] = {}
        for name, shape, offset in specs:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            tensors[name] = arr.reshape(shape).copy()
        return cls(config=config, tensors=tensors, version=version)

    # Convenience accessors -------------------------------------------------

    def section(self, prefix: str) -> dict[str, str]:
        """Config entries under ``prefix.`` with the prefix stripped."""
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.config.items() if k.startswith(prefix + ".")}

    def parameter_tensors(self) -> dict[str, np.ndarray]:
        """Network parameters only (calibration and training records stripped)."""
        return {
            k: v
            for k, v in self.tensors.items()
            if not k.startswith(("calibration.", "training."))
        }

    @property
    def calibration(self) -> Calibration:
        return Calibration.from_tensors(self.tensors)
