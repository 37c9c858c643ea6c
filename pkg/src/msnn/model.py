"""Network builders: MultiSiamNN, ClinSiamNN and the clinical-only MLP baseline.

All variants consume a :class:`Batch` and return a ``(N, 1)`` tensor holding
the probability of the "Decline" class.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

N_SCORES = 8
N_STATIC = 3
MAGIC = b"MSNN1"


class SpecError(ValueError):
    """Inconsistent network description."""


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint file."""


@dataclass
class ModelSpec:
    # mri_branch entries: {"type": "conv", "filters", "kernel", "stride"}
    # or {"type": "pool", "window"}
    mri_branch: list[dict] = field(default_factory=lambda: [
        {"type": "conv", "filters": 8, "kernel": 3, "stride": 1}, {"type": "pool", "window": 2},
        {"type": "conv", "filters": 16, "kernel": 3, "stride": 1}, {"type": "pool", "window": 2},
        {"type": "conv", "filters": 32, "kernel": 3, "stride": 1}, {"type": "pool", "window": 2},
    ])
    mri_features: int = 64
    clin_branch: list[int] = field(default_factory=lambda: [32, 32])
    demo_net: list[int] = field(default_factory=lambda: [8])
    clin_joint: list[int] = field(default_factory=lambda: [32])
    joint_net: list[int] = field(default_factory=lambda: [64, 32])
    dropout_rate: float = 0.5
    volume_dims: tuple[int, int, int] = (102, 108, 75)
    tied: bool = True
    mlp_widths: list[int] = field(default_factory=lambda: [32, 16])

    @classmethod
    def paper(cls) -> "ModelSpec":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelSpec":
        # the last pool is omitted: at 26x27x19 the third stage leaves a depth of 1
        return cls(
            mri_branch=[
                {"type": "conv", "filters": 2, "kernel": 3, "stride": 1},
                {"type": "pool", "window": 2},
                {"type": "conv", "filters": 4, "kernel": 3, "stride": 1},
                {"type": "pool", "window": 2},
                {"type": "conv", "filters": 4, "kernel": 3, "stride": 1},
            ],
            mri_features=8,
            volume_dims=(26, 27, 19),
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["volume_dims"] = list(self.volume_dims)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        d["volume_dims"] = tuple(d["volume_dims"])
        return cls(**d)

    def mri_output_shape(self) -> tuple[int, int, int, int]:
        """Shape (C, D, H, W) at the end of the convolutional branch."""
        c, dims = 1, list(self.volume_dims)
        for i, layer in enumerate(self.mri_branch):
            if layer["type"] == "conv":
                k, s = layer["kernel"], layer.get("stride", 1)
                if any(k > d for d in dims):
                    raise SpecError(f"mri_branch[{i}] conv kernel {k} exceeds extent {dims}")
                dims = [(d - k) // s + 1 for d in dims]
                c = layer["filters"]
            elif layer["type"] == "pool":
                w = layer["window"]
                if any(w > d for d in dims):
                    raise SpecError(f"mri_branch[{i}] pool window {w} exceeds extent {dims}")
                dims = [d // w for d in dims]
            else:
                raise SpecError(f"mri_branch[{i}] has unknown type {layer['type']!r}")
        return (c, *dims)

    def validate(self) -> None:
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise SpecError(f"dropout_rate {self.dropout_rate} outside [0, 1]")
        if not self.clin_branch:
            raise SpecError("clin_branch needs at least one dense layer")
        for name in ("clin_branch", "demo_net", "clin_joint", "joint_net", "mlp_widths"):
            if any(int(w) < 1 for w in getattr(self, name)):
                raise SpecError(f"{name} has a non-positive width")
        self.mri_output_shape()

    @property
    def clinical_width(self) -> int:
        if self.clin_joint:
            return self.clin_joint[-1]
        return self.clin_branch[-1] + (self.demo_net[-1] if self.demo_net else N_STATIC)


@dataclass
class Batch:
    """Collated model inputs for N subjects."""

    clin_bl: np.ndarray  # (N, 8)
    clin_fu: np.ndarray  # (N, 8)
    static: np.ndarray  # (N, 3)
    vol_bl: np.ndarray | None = None  # (N, 1, X, Y, Z)
    vol_fu: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.clin_bl.shape[0]

    def swapped(self) -> "Batch":
        return Batch(self.clin_fu, self.clin_bl, self.static, self.vol_fu, self.vol_bl, self.labels)


class _Dense:
    def __init__(self, weight: Parameter, bias: Parameter, act: str | None):
        self.weight, self.bias, self.act = weight, bias, act

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.dense(x, self.weight, self.bias)
        return ad.activation(h, self.act) if self.act else h

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


class _Conv:
    def __init__(self, weight: Parameter, bias: Parameter, stride: int):
        self.weight, self.bias, self.stride = weight, bias, stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(ad.conv3d(x, self.weight, self.bias, self.stride))

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


class _Pool:
    def __init__(self, window: int):
        self.window = window

    def __call__(self, x: Tensor) -> Tensor:
        return ad.avgpool3d(x, self.window)

    def params(self) -> list[Parameter]:
        return []


class _Flatten:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.flatten(x, batched=True)

    def params(self) -> list[Parameter]:
        return []


def _run(layers, x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype

    def dense(self, n_in: int, n_out: int, act: str | None) -> _Dense:
        if act == "relu":
            w = ad.he_uniform((n_out, n_in), n_in, self.rng, self.dtype)
        else:
            w = ad.glorot_uniform((n_out, n_in), n_in, n_out, self.rng, self.dtype)
        return _Dense(Parameter(w), Parameter(np.zeros(n_out, self.dtype)), act)

    def stack(self, n_in: int, widths, act: str = "relu") -> tuple[list[_Dense], int]:
        layers = []
        for w in widths:
            layers.append(self.dense(n_in, int(w), act))
            n_in = int(w)
        return layers, n_in

    def conv(self, c_in: int, c_out: int, k: int, stride: int) -> _Conv:
        fan_in = c_in * k**3
        w = ad.he_uniform((c_out, c_in, k, k, k), fan_in, self.rng, self.dtype)
        return _Conv(Parameter(w), Parameter(np.zeros(c_out, self.dtype)), stride)


def _twin(layers, tied: bool):
    """Second siamese branch: tied views, or independent copies with the same init."""
    out = []
    for layer in layers:
        if isinstance(layer, (_Dense, _Conv)):
            if tied:
                w, b = layer.weight.tie(), layer.bias.tie()
            else:
                w, b = Parameter(layer.weight.data.copy()), Parameter(layer.bias.data.copy())
            if isinstance(layer, _Dense):
                out.append(_Dense(w, b, layer.act))
            else:
                out.append(_Conv(w, b, layer.stride))
        else:
            out.append(layer)
    return out


class Model:
    """A built network. ``kind`` is one of ``multi``, ``clin``, ``mlp``."""

    def __init__(self, spec: ModelSpec, kind: str):
        self.spec = spec
        self.kind = kind
        self.mri_bl: list = []
        self.mri_fu: list = []
        self.clin_bl: list = []
        self.clin_fu: list = []
        self.demo: list = []
        self.clin_joint: list = []
        self.joint: list = []
        self.mlp: list = []
        self.head: _Dense | None = None

    @property
    def needs_volumes(self) -> bool:
        return self.kind == "multi"

    def _groups(self) -> list[tuple[str, list]]:
        return [
            ("mri_bl", self.mri_bl), ("mri_fu", self.mri_fu),
            ("clin_bl", self.clin_bl), ("clin_fu", self.clin_fu),
            ("demo", self.demo), ("clin_joint", self.clin_joint),
            ("joint", self.joint), ("mlp", self.mlp),
            ("head", [self.head] if self.head else []),
        ]

    def all_params(self) -> list[Parameter]:
        """Every parameter handle, tied views included, in declaration order."""
        return [p for _, layers in self._groups() for layer in layers for p in layer.params()]

    def parameters(self) -> list[Parameter]:
        """One handle per logical parameter (tied groups counted once)."""
        return ad.unique_params(self.all_params())

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out, seen = [], set()
        for gname, layers in self._groups():
            for i, layer in enumerate(layers):
                for pname, p in zip(("weight", "bias"), layer.params()):
                    if p.storage_key not in seen:
                        seen.add(p.storage_key)
                        out.append((f"{gname}.{i}.{pname}", p))
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def layer_shapes(self, group: str) -> list[tuple[int, ...]]:
        layers = dict(self._groups())[group]
        return [p.data.shape for layer in layers for p in layer.params()]

    # ------------------------------------------------------------------
    def _tensor(self, arr: np.ndarray) -> Tensor:
        dtype = self.parameters()[0].data.dtype
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=False)

    def _clinical(self, batch: Batch, taps: dict | None) -> Tensor:
        bl = _run(self.clin_bl, self._tensor(batch.clin_bl))
        fu = _run(self.clin_fu, self._tensor(batch.clin_fu))
        merged = ad.subtract(fu, bl)
        if taps is not None:
            taps["clin_merge"] = merged.data.copy()
        demo = _run(self.demo, self._tensor(batch.static))
        return _run(self.clin_joint, ad.concat([merged, demo]))

    def _mri(self, batch: Batch, taps: dict | None) -> Tensor:
        if batch.vol_bl is None or batch.vol_fu is None:
            raise ValueError("multimodal model requires baseline and follow-up volumes")
        bl = _run(self.mri_bl, self._tensor(batch.vol_bl))
        fu = _run(self.mri_fu, self._tensor(batch.vol_fu))
        merged = ad.subtract(fu, bl)
        if taps is not None:
            taps["mri_merge"] = merged.data.copy()
        return merged

    def forward(self, batch: Batch, mode: str = "eval", rng: np.random.Generator | None = None,
                taps: dict | None = None) -> Tensor:
        """Probability of Decline, shape ``(N, 1)``."""
        if mode == "train" and rng is None and self.spec.dropout_rate > 0 and self.kind != "mlp":
            raise ValueError("train mode needs an rng for dropout")
        if self.kind == "mlp":
            x = self._tensor(np.concatenate([batch.clin_bl, batch.clin_fu, batch.static], axis=1))
            h = _run(self.mlp, x)
        elif self.kind == "clin":
            h = self._clinical(batch, taps)
            h = ad.dropout(h, self.spec.dropout_rate, mode, rng)
        else:
            mri = self._mri(batch, taps)
            clin = self._clinical(batch, taps)
            h = _run(self.joint, ad.concat([mri, clin]))
            h = ad.dropout(h, self.spec.dropout_rate, mode, rng)
        return self.head(h)

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, "eval").data[:, 0].astype(np.float64)

    # ------------------------------------------------------------------
    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise CheckpointError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise CheckpointError(f"shape mismatch {p.data.shape} vs {a.shape}")
            p.data[...] = a


def _build_clinical(model: Model, b: _Builder) -> None:
    spec = model.spec
    model.clin_bl, w_clin = b.stack(N_SCORES, spec.clin_branch)
    model.clin_fu = _twin(model.clin_bl, spec.tied)
    model.demo, w_demo = b.stack(N_STATIC, spec.demo_net)
    model.clin_joint, w = b.stack(w_clin + w_demo, spec.clin_joint)
    if w != spec.clinical_width:
        raise SpecError(f"clinical junction width {w} != {spec.clinical_width}")


def build_multisiam(spec: ModelSpec, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE) -> Model:
    spec.validate()
    model = Model(spec, "multi")
    b = _Builder(rng, dtype)
    c_in, layers = 1, []
    for layer in spec.mri_branch:
        if layer["type"] == "conv":
            layers.append(b.conv(c_in, layer["filters"], layer["kernel"], layer.get("stride", 1)))
            c_in = layer["filters"]
        else:
            layers.append(_Pool(layer["window"]))
    layers.append(_Flatten())
    n_flat = int(np.prod(spec.mri_output_shape()))
    layers.append(b.dense(n_flat, spec.mri_features, "relu"))
    model.mri_bl = layers
    model.mri_fu = _twin(layers, spec.tied)
    _build_clinical(model, b)
    model.joint, w = b.stack(spec.mri_features + spec.clinical_width, spec.joint_net)
    model.head = b.dense(w, 1, "sigmoid")
    return model


def build_clinsiam(spec: ModelSpec, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE) -> Model:
    spec.validate()
    model = Model(spec, "clin")
    b = _Builder(rng, dtype)
    _build_clinical(model, b)
    model.head = b.dense(spec.clinical_width, 1, "sigmoid")
    return model


def build_mlp_baseline(widths, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE,
                       spec: ModelSpec | None = None) -> Model:
    """Plain dense stack over [baseline scores, follow-up scores, static attributes].

    An empty ``widths`` gives logistic regression.
    """
    widths = [int(w) for w in widths]
    if any(w < 1 for w in widths):
        raise SpecError(f"mlp widths must be positive, got {widths}")
    spec = replace(spec or ModelSpec(), mlp_widths=widths)
    model = Model(spec, "mlp")
    b = _Builder(rng, dtype)
    model.mlp, w = b.stack(2 * N_SCORES + N_STATIC, widths)
    model.head = b.dense(w, 1, "sigmoid")
    return model


def build(kind: str, spec: ModelSpec, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE) -> Model:
    """Build by harness model name (``multim`` shares the ``multi`` architecture)."""
    if kind in ("multi", "multim"):
        return build_multisiam(spec, rng, dtype)
    if kind == "clin":
        return build_clinsiam(spec, rng, dtype)
    if kind == "mlp":
        return build_mlp_baseline(spec.mlp_widths, rng, dtype, spec)
    raise SpecError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints: MAGIC | u32 header len | header json | u32 n arrays |
#              per array: u32 ndim, u32 dims..., f32 LE data | u32 crc32 of all preceding bytes


def save_checkpoint(model: Model, path: str | Path, extra: dict[str, Any] | None = None) -> None:
    header = json.dumps({"kind": model.kind, "spec": json.loads(model.spec.to_json()),
                         "extra": extra or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        a = np.asarray(p.data, dtype="<f4")
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes(order="C"))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad magic")
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError("truncated checkpoint")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    spec = ModelSpec.from_json(json.dumps(header["spec"]))
    model = build(header["kind"], spec, np.random.default_rng(0))
    (n,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(n):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32))
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    model.load_state(arrays)
    return model, header.get("extra", {})
