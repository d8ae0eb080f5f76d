"""Core domain types, generative sampling, and on-disk formats.

A PoFModel holds the free parameters of the product-of-filters model:
U (F x L log-filters, unconstrained sign), per-filter sparsity shapes
alpha, and per-frequency noise shapes gamma. The generative story is

    a_lt  ~ Gamma(alpha_l, alpha_l)                      (activations)
    W_ft  ~ Gamma(gamma_f, gamma_f / exp(sum_l U_fl a_lt))

so E[a_lt] = 1 and E[W_ft | a_t] = exp(sum_l U_fl a_lt).

Models serialize to a versioned JSON document; spectrograms to the
binary POFS format (magic "POFS", little-endian header, column-major
float64 payload so frames are contiguous).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, ValidationError

__all__ = [
    "ModelMeta",
    "PoFModel",
    "FramePosterior",
    "Spectrogram",
    "BandMask",
    "sample",
    "expected_log_spectrum",
    "save_model",
    "load_model",
    "save_spectrogram",
    "load_spectrogram",
]

MODEL_FORMAT = "pof-model"
MODEL_VERSION = 1
POFS_MAGIC = b"POFS"
POFS_VERSION = 1
_POFS_HEADER = struct.Struct("<IIBdII")  # F, T, kind, sample_rate, n_fft, hop
_KIND_TO_CODE = {"magnitude": 1, "power": 2}
_CODE_TO_KIND = {v: k for k, v in _KIND_TO_CODE.items()}


def _freeze(obj, name: str, value: np.ndarray) -> None:
    value = np.array(value, dtype=float)
    value.flags.writeable = False
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class ModelMeta:
    sample_rate: float = 16000.0
    n_fft: int = 1024
    created_by: str = "pof"


@dataclass(frozen=True)
class PoFModel:
    """Free parameters of the product-of-filters model (immutable)."""

    U: np.ndarray          # (F, L) log-filters
    alpha: np.ndarray      # (L,)  sparsity shapes
    gamma: np.ndarray      # (F,)  noise shapes
    meta: ModelMeta = field(default_factory=ModelMeta)

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if U.ndim != 2:
            raise ValidationError("U must be a 2-D array")
        if alpha.ndim != 1 or alpha.shape[0] != U.shape[1]:
            raise ValidationError(
                f"alpha length {alpha.shape} does not match U columns {U.shape[1]}"
            )
        if gamma.ndim != 1 or gamma.shape[0] != U.shape[0]:
            raise ValidationError(
                f"gamma length {gamma.shape} does not match U rows {U.shape[0]}"
            )
        if not np.all(np.isfinite(U)):
            raise ValidationError("U must be finite")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValidationError("alpha must be positive and finite")
        if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
            raise ValidationError("gamma must be positive and finite")
        _freeze(self, "U", U)
        _freeze(self, "alpha", alpha)
        _freeze(self, "gamma", gamma)

    @property
    def n_bins(self) -> int:
        return self.U.shape[0]

    @property
    def n_filters(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True)
class FramePosterior:
    """Variational gamma parameters (nu, rho) over one frame's activations."""

    nu: np.ndarray   # (L,)
    rho: np.ndarray  # (L,)

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float)
        rho = np.asarray(self.rho, dtype=float)
        if nu.shape != rho.shape or nu.ndim != 1:
            raise ValidationError("nu and rho must be 1-D arrays of equal length")
        if not np.all(np.isfinite(nu)) or np.any(nu <= 0):
            raise ValidationError("nu must be positive and finite")
        if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
            raise ValidationError("rho must be positive and finite")
        _freeze(self, "nu", nu)
        _freeze(self, "rho", rho)

    def mean(self) -> np.ndarray:
        """Posterior mean activations E[a] = nu / rho."""
        return self.nu / self.rho


@dataclass(frozen=True)
class BandMask:
    """Sorted, distinct frequency-bin indices retained in a band-limited view."""

    kept: np.ndarray  # (n,) int

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.intp)
        if kept.ndim != 1 or kept.size == 0:
            raise ValidationError("mask must keep at least one bin")
        if np.any(kept < 0) or np.any(np.diff(kept) <= 0):
            raise ValidationError("mask indices must be non-negative and strictly increasing")
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @property
    def size(self) -> int:
        return int(self.kept.size)


@dataclass(frozen=True)
class Spectrogram:
    """F x T non-negative matrix plus the audio provenance it came from."""

    data: np.ndarray       # (F, T)
    kind: str              # "magnitude" | "power"
    sample_rate: float
    n_fft: int
    hop: int
    band: BandMask | None = None  # set when rows were selected by apply_mask

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ValidationError("spectrogram data must be 2-D (bins x frames)")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValidationError("spectrogram entries must be finite and non-negative")
        if self.kind not in _KIND_TO_CODE:
            raise ValidationError(f"kind must be one of {sorted(_KIND_TO_CODE)}")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if self.n_fft <= 0 or not (0 < self.hop <= self.n_fft):
            raise ValidationError("need n_fft > 0 and 0 < hop <= n_fft")
        _freeze(self, "data", data)

    @property
    def n_bins(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def sample(model: PoFModel, T: int, seed: int) -> tuple[Spectrogram, np.ndarray]:
    """Draw T synthetic frames from the generative model.

    Returns the magnitude spectrogram and the true L x T activations.
    Deterministic for a given seed regardless of thread count (sampling is
    a single seeded vectorized stream).
    """
    if T < 1:
        raise ValidationError("T must be >= 1")
    rng = np.random.default_rng([int(seed), 0x5A17])
    alpha = model.alpha[:, None]
    a = rng.gamma(shape=np.broadcast_to(alpha, (model.n_filters, T)),
                  scale=1.0 / alpha)
    log_ew = model.U @ a
    gamma = model.gamma[:, None]
    w = rng.gamma(shape=np.broadcast_to(gamma, (model.n_bins, T)),
                  scale=np.exp(log_ew) / gamma)
    spec = Spectrogram(
        w, "magnitude",
        sample_rate=model.meta.sample_rate,
        n_fft=model.meta.n_fft,
        hop=model.meta.n_fft // 2,
    )
    return spec, a


def expected_log_spectrum(model: PoFModel, a: np.ndarray) -> np.ndarray:
    """Log-spectrum sum_l U_fl a_l implied by a non-negative activation vector."""
    a = np.asarray(a, dtype=float)
    if a.shape != (model.n_filters,):
        raise ValidationError(
            f"activation length {a.shape} does not match L={model.n_filters}"
        )
    if np.any(a < 0):
        raise ValidationError("activations must be non-negative")
    return model.U @ a


# ----------------------------------------------------------------------
# Model JSON


def save_model(model: PoFModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "F": model.n_bins,
        "L": model.n_filters,
        "U": [[float(v) for v in row] for row in model.U],
        "alpha": [float(v) for v in model.alpha],
        "gamma": [float(v) for v in model.gamma],
        "meta": {
            "sample_rate": model.meta.sample_rate,
            "n_fft": model.meta.n_fft,
            "created_by": model.meta.created_by,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _require(doc: dict, key: str):
    if key not in doc:
        raise DataFormatError(f"model file missing field '{key}'")
    return doc[key]


def load_model(path) -> PoFModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataFormatError("model file must contain a JSON object")
    if doc.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"field 'format' must be '{MODEL_FORMAT}'")
    if doc.get("version") != MODEL_VERSION:
        raise DataFormatError(f"unsupported model version {doc.get('version')!r}")
    F, L = _require(doc, "F"), _require(doc, "L")
    try:
        U = np.asarray(_require(doc, "U"), dtype=float)
        alpha = np.asarray(_require(doc, "alpha"), dtype=float)
        gamma = np.asarray(_require(doc, "gamma"), dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"model file has a non-numeric array field: {exc}") from exc
    if U.shape != (F, L):
        raise ValidationError(f"field 'U' has shape {U.shape}, expected ({F}, {L})")
    if alpha.shape != (L,):
        raise ValidationError(f"field 'alpha' has length {alpha.shape}, expected {L}")
    if gamma.shape != (F,):
        raise ValidationError(f"field 'gamma' has length {gamma.shape}, expected {F}")
    meta_doc = doc.get("meta", {})
    meta = ModelMeta(
        sample_rate=float(meta_doc.get("sample_rate", 16000.0)),
        n_fft=int(meta_doc.get("n_fft", 1024)),
        created_by=str(meta_doc.get("created_by", "unknown")),
    )
    try:
        return PoFModel(U, alpha, gamma, meta)
    except ValidationError as exc:
        raise ValidationError(f"model file invalid: {exc}") from exc


# ----------------------------------------------------------------------
# POFS binary spectrograms


def save_spectrogram(spec: Spectrogram, path) -> None:
    header = _POFS_HEADER.pack(
        spec.n_bins,
        spec.n_frames,
        _KIND_TO_CODE[spec.kind],
        float(spec.sample_rate),
        int(spec.n_fft),
        int(spec.hop),
    )
    payload = np.ascontiguousarray(spec.data.ravel(order="F"), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(POFS_MAGIC)
        fh.write(bytes([POFS_VERSION]))
        fh.write(header)
        fh.write(payload.tobytes())


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_len = len(POFS_MAGIC) + 1 + _POFS_HEADER.size
    if len(blob) < head_len:
        raise DataFormatError("truncated POFS file: incomplete header")
    if blob[: len(POFS_MAGIC)] != POFS_MAGIC:
        raise DataFormatError("not a POFS file (bad magic)")
    version = blob[len(POFS_MAGIC)]
    if version != POFS_VERSION:
        raise DataFormatError(f"unsupported POFS version {version}")
    F, T, kind_code, sample_rate, n_fft, hop = _POFS_HEADER.unpack(
        blob[len(POFS_MAGIC) + 1 : head_len]
    )
    if kind_code not in _CODE_TO_KIND:
        raise DataFormatError(f"unknown spectrogram kind code {kind_code}")
    expected = head_len + 8 * F * T
    if len(blob) < expected:
        raise DataFormatError(
            f"truncated POFS file: expected {expected} bytes, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f8", count=F * T, offset=head_len)
    data = flat.reshape((F, T), order="F")
    return Spectrogram(data, _CODE_TO_KIND[kind_code], sample_rate, n_fft, hop)
