"""Pluggable patch-classifier and feature-extractor backends.

Two kinds ship here. HEURISTIC is a deterministic, pure-pixel backend: six
hand-crafted features (mean R, G, B, luminance variance, gradient energy,
mean saturation) through a frozen logistic. EXTERNAL_PROCESS attaches any
trained model as a child process speaking line-delimited JSON over
stdin/stdout, so heavyweight runtimes never link into this package.

Wire protocol (one JSON object per line):

    request:  {"id": n, "op": "classify"|"features"|"refine",
               "shape": [H, W, C], "pixels_b64": "..."}
    response: {"id": n, "p": x}          for classify
              {"id": n, "f": [...]}      for features
              {"id": n, "r_b64": "..."}  for refine

``pixels_b64`` is base64 of the raw C-order uint8 buffer for classify and
features, and of the raw little-endian float32 planar (C, H, W) buffer for
refine. Refine responses carry a little-endian float32 (H, W) raster.
Responses may arrive out of order; they are matched by id.
"""

from __future__ import annotations

import base64
import json
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    BackendFailure,
    CapabilityError,
    ConfigError,
    InputError,
    NumericError,
    ProtocolError,
)
from .tissue import luminance

HEURISTIC_FEATURE_DIM = 6

# Logistic weights over the six heuristic features, fitted once on phantom
# tumor/stroma patches (6 seeded phantoms, 1441 patches, patch labeled tumor
# at ground-truth tumor fraction >= 0.5) and frozen. Version 1.
HEURISTIC_WEIGHTS_V1 = np.array(
    [
        -0.11387573377007597,
        -0.06468016587034256,
        -0.01468989432049766,
        0.0008682211425421163,
        5.320693160538639,
        12.66947741284274,
    ]
)
HEURISTIC_BIAS_V1 = 22.34830160140554


class BackendKind(Enum):
    HEURISTIC = "heuristic"
    EXTERNAL_PROCESS = "external_process"
    IDENTITY = "identity"  # refine-only: pass the heatmap channel through


@dataclass(frozen=True)
class BackendDescriptor:
    kind: BackendKind
    command: tuple[str, ...] | None = None
    batch_size: int = 32
    feature_dim: int = 0
    timeout_s: float = 30.0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kind is BackendKind.EXTERNAL_PROCESS and not self.command:
            raise ConfigError("EXTERNAL_PROCESS backend requires a command")


@dataclass(frozen=True)
class PatchProbability:
    grid_x: int
    grid_y: int
    p_tumor: float


def heuristic_backend() -> BackendDescriptor:
    return BackendDescriptor(kind=BackendKind.HEURISTIC, feature_dim=HEURISTIC_FEATURE_DIM)


def parse_backend_spec(spec: str, feature_dim: int = 0) -> BackendDescriptor:
    """CLI selector: ``heuristic``, ``identity``, or ``exec:<command line>``."""
    if spec == "heuristic":
        return heuristic_backend()
    if spec == "identity":
        return BackendDescriptor(kind=BackendKind.IDENTITY)
    if spec.startswith("exec:"):
        cmd = tuple(shlex.split(spec[len("exec:") :]))
        if not cmd:
            raise ConfigError("exec: backend needs a command line")
        return BackendDescriptor(
            kind=BackendKind.EXTERNAL_PROCESS, command=cmd, feature_dim=feature_dim
        )
    raise ConfigError(f"unknown backend spec: {spec!r}")


def heuristic_features(patch: np.ndarray) -> np.ndarray:
    """Six-feature summary of an RGB patch.

    [mean R, mean G, mean B, luminance variance, gradient energy (mean
    absolute horizontal+vertical luminance difference / 2), mean HSV
    saturation]. Pure function of the pixels.
    """
    arr = np.asarray(patch, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected HxWx3 patch, got {arr.shape}")
    mean_rgb = arr.mean(axis=(0, 1))
    lum = luminance(patch)
    lum_var = float(lum.var())
    gx = np.abs(np.diff(lum, axis=1)).mean() if lum.shape[1] > 1 else 0.0
    gy = np.abs(np.diff(lum, axis=0)).mean() if lum.shape[0] > 1 else 0.0
    grad_energy = (float(gx) + float(gy)) / 2.0
    maxc = arr.max(axis=2)
    minc = arr.min(axis=2)
    sat = np.where(maxc > 0, (maxc - minc) / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.array(
        [mean_rgb[0], mean_rgb[1], mean_rgb[2], lum_var, grad_energy, float(sat.mean())]
    )


def heuristic_probability(
    features: np.ndarray,
    weights: np.ndarray = HEURISTIC_WEIGHTS_V1,
    bias: float = HEURISTIC_BIAS_V1,
) -> float:
    """Logistic of the affine form weights . features + bias."""
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if f.shape != w.shape:
        raise InputError(f"feature dim {f.shape} != weight dim {w.shape}")
    if not (np.isfinite(f).all() and np.isfinite(w).all() and np.isfinite(bias)):
        raise NumericError("non-finite value in heuristic probability input")
    z = float(f @ w + bias)
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    ez = np.exp(z)
    return float(ez / (1.0 + ez))


def _check_patches(patches, expected_size: int | None):
    for idx, (key, block) in enumerate(patches):
        block = np.asarray(block)
        if block.ndim != 3 or block.shape[2] != 3:
            raise InputError(f"patch {key} has shape {block.shape}, expected HxWx3")
        if expected_size is not None and block.shape[:2] != (expected_size, expected_size):
            raise InputError(
                f"patch {key} is {block.shape[1]}x{block.shape[0]}, "
                f"expected {expected_size}x{expected_size}"
            )


# --- wire protocol encode/decode -------------------------------------------


def encode_pixels(block: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(block).tobytes()).decode("ascii")


def encode_request(req_id: int, op: str, block: np.ndarray) -> dict:
    if op in ("classify", "features"):
        payload = np.asarray(block, dtype=np.uint8)
        shape = list(payload.shape)
    elif op == "refine":
        payload = np.asarray(block, dtype="<f4")  # planar (C, H, W)
        shape = [payload.shape[1], payload.shape[2], payload.shape[0]]
    else:
        raise ProtocolError(f"unknown op {op!r}")
    return {"id": req_id, "op": op, "shape": shape, "pixels_b64": encode_pixels(payload)}


def decode_request(msg: dict) -> tuple[int, str, np.ndarray]:
    """Inverse of encode_request; used by worker processes and tests."""
    try:
        req_id = int(msg["id"])
        op = msg["op"]
        shape = tuple(int(s) for s in msg["shape"])
        raw = base64.b64decode(msg["pixels_b64"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed request: {exc}") from exc
    if op in ("classify", "features"):
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
    elif op == "refine":
        h, w, c = shape
        arr = np.frombuffer(raw, dtype="<f4").reshape((c, h, w))
    else:
        raise ProtocolError(f"unknown op {op!r}")
    return req_id, op, arr


def decode_probability(resp: dict) -> float:
    if "p" not in resp:
        raise ProtocolError(f"classify response missing 'p': {resp}")
    try:
        p = float(resp["p"])
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"non-numeric probability: {resp['p']!r}") from exc
    if not np.isfinite(p) or not 0.0 <= p <= 1.0:
        raise ProtocolError(f"probability out of [0,1]: {p!r}")
    return p


def decode_features(resp: dict, feature_dim: int) -> np.ndarray:
    if "f" not in resp:
        raise ProtocolError(f"features response missing 'f': {resp}")
    try:
        f = np.asarray(resp["f"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"non-numeric feature vector: {resp}") from exc
    if f.ndim != 1 or (feature_dim and f.shape[0] != feature_dim):
        raise ProtocolError(f"feature vector has length {f.shape}, expected {feature_dim}")
    if not np.isfinite(f).all():
        raise ProtocolError("non-finite feature value from backend")
    return f


def decode_refined(resp: dict, height: int, width: int) -> np.ndarray:
    if "r_b64" not in resp:
        raise ProtocolError(f"refine response missing 'r_b64': {resp}")
    try:
        raw = base64.b64decode(resp["r_b64"])
        arr = np.frombuffer(raw, dtype="<f4").reshape((height, width)).astype(np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed refine raster: {exc}") from exc
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise ProtocolError("refined raster out of [0,1] or non-finite")
    return arr


# --- external process client ------------------------------------------------


class ExternalBackendClient:
    """One child process speaking the wire protocol; requests sent in batches.

    Requests within a batch are pipelined (all written, then responses
    collected), and matched by id on the way back.
    """

    def __init__(self, command, timeout_s: float = 30.0):
        self.command = tuple(command)
        self.timeout_s = timeout_s
        self._next_id = 0
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendFailure(f"cannot start backend {self.command}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF sentinel

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def allocate_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def roundtrip(self, requests: list[dict]) -> dict[int, dict]:
        """Send a batch of request objects, return {id: response}."""
        if not requests:
            return {}
        pending = {int(r["id"]) for r in requests}
        if len(pending) != len(requests):
            raise ProtocolError("duplicate ids in outgoing batch")
        deadline = time.monotonic() + self.timeout_s
        # Requests are written from a helper thread: a child that stops
        # draining its stdin would otherwise block this write past any
        # deadline (pipe buffers are far smaller than one request).
        payload = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in requests)
        write_exc: list[Exception] = []

        def send():
            try:
                self._proc.stdin.write(payload)
                self._proc.stdin.flush()
            except Exception as exc:  # reported below
                write_exc.append(exc)

        writer = threading.Thread(target=send, daemon=True)
        writer.start()
        writer.join(timeout=self.timeout_s)
        if writer.is_alive():
            self._proc.kill()  # unblocks the writer with a broken pipe
            writer.join(timeout=5)
            raise BackendFailure(
                f"backend {self.command} stopped accepting requests "
                f"(write timed out after {self.timeout_s}s)",
                unprocessed=sorted(pending),
            )
        if write_exc:
            raise BackendFailure(
                f"backend {self.command} pipe closed: {write_exc[0]}",
                unprocessed=sorted(pending),
            ) from write_exc[0]
        responses: dict[int, dict] = {}
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendFailure(
                    f"backend {self.command} timed out after {self.timeout_s}s",
                    unprocessed=sorted(pending),
                )
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                raise BackendFailure(
                    f"backend {self.command} timed out after {self.timeout_s}s",
                    unprocessed=sorted(pending),
                ) from None
            if line is None:
                raise BackendFailure(
                    f"backend {self.command} exited (code {self._proc.poll()})",
                    unprocessed=sorted(pending),
                )
            line = line.strip()
            if not line:
                continue
            try:
                resp = json.loads(line)
                resp_id = int(resp["id"])
            except (ValueError, TypeError, KeyError) as exc:
                raise ProtocolError(f"malformed response line: {line[:200]!r}") from exc
            if resp_id in responses:
                raise ProtocolError(f"duplicate response id {resp_id}")
            if resp_id not in pending:
                raise ProtocolError(f"response id {resp_id} was never requested")
            pending.discard(resp_id)
            responses[resp_id] = resp
        return responses


# --- public operations --------------------------------------------------------


def classify_batch(
    backend: BackendDescriptor,
    patches: list[tuple[tuple[int, int], np.ndarray]],
    client: ExternalBackendClient | None = None,
    expected_size: int | None = 224,
) -> list[PatchProbability]:
    """One tumor probability per (indices, pixels) pair, order preserved."""
    backend.validate()
    if not patches:
        return []
    _check_patches(patches, expected_size)
    if backend.kind is BackendKind.HEURISTIC:
        return [
            PatchProbability(gx, gy, heuristic_probability(heuristic_features(block)))
            for (gx, gy), block in patches
        ]
    if backend.kind is not BackendKind.EXTERNAL_PROCESS:
        raise CapabilityError(f"{backend.kind} cannot classify patches")

    own = client is None
    cl = client or ExternalBackendClient(backend.command, backend.timeout_s)
    try:
        out: list[PatchProbability] = []
        for start in range(0, len(patches), backend.batch_size):
            chunk = patches[start : start + backend.batch_size]
            reqs = [encode_request(cl.allocate_id(), "classify", blk) for _, blk in chunk]
            responses = cl.roundtrip(reqs)
            for ((gx, gy), _), req in zip(chunk, reqs):
                p = decode_probability(responses[req["id"]])
                out.append(PatchProbability(gx, gy, p))
        return out
    finally:
        if own:
            cl.close()


def extract_features(
    backend: BackendDescriptor,
    patches: list[tuple[tuple[int, int], np.ndarray]],
    client: ExternalBackendClient | None = None,
    expected_size: int | None = 224,
) -> list[np.ndarray]:
    """One feature vector per patch, order preserved."""
    backend.validate()
    if backend.feature_dim <= 0:
        raise CapabilityError("backend does not support feature extraction")
    if not patches:
        return []
    _check_patches(patches, expected_size)
    if backend.kind is BackendKind.HEURISTIC:
        return [heuristic_features(block) for _, block in patches]
    if backend.kind is not BackendKind.EXTERNAL_PROCESS:
        raise CapabilityError(f"{backend.kind} cannot extract features")

    own = client is None
    cl = client or ExternalBackendClient(backend.command, backend.timeout_s)
    try:
        out: list[np.ndarray] = []
        for start in range(0, len(patches), backend.batch_size):
            chunk = patches[start : start + backend.batch_size]
            reqs = [encode_request(cl.allocate_id(), "features", blk) for _, blk in chunk]
            responses = cl.roundtrip(reqs)
            for _, req in zip(chunk, reqs):
                out.append(decode_features(responses[req["id"]], backend.feature_dim))
        return out
    finally:
        if own:
            cl.close()
