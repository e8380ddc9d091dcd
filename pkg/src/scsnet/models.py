"""Model builders and forward semantics.

Three decoders share one layer vocabulary: the baseline CNN (temporal conv,
spatial conv, square, mean pool, log, dropout, linear classifier), and the
separate-common-separate network (SCSN) where each subject owns the shallow
extractor, the three deep feature layers, and the classifier, while a
three-layer dense block in between is shared by everyone. The three deep
per-subject layers expose their activations for discrepancy regularization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BaselineConfig:
    n_channels: int
    n_samples: int
    n_classes: int
    temporal_filters: int = 40
    temporal_kernel: int = 25
    pool_width: int = 75
    pool_stride: int = 15
    dropout: float = 0.5

    def __post_init__(self):
        for name in ("n_channels", "n_samples", "n_classes", "temporal_filters",
                     "temporal_kernel", "pool_width", "pool_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.temporal_kernel > self.n_samples:
            raise ValueError("temporal_kernel exceeds n_samples")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def conv_time_out(self) -> int:
        return self.n_samples - self.temporal_kernel + 1

    @property
    def pooled_out(self) -> int:
        if self.pool_width > self.conv_time_out:
            raise ValueError(
                f"pool width {self.pool_width} exceeds the temporal-conv output "
                f"({self.conv_time_out} samples)")
        return (self.conv_time_out - self.pool_width) // self.pool_stride + 1

    @property
    def feature_dim(self) -> int:
        return self.temporal_filters * self.pooled_out


@dataclass(frozen=True)
class ScsnConfig:
    base: BaselineConfig
    n_subjects: int
    target_index: int
    common_fc_dims: tuple[int, ...] = (128, 128, 128)
    separate_fc_dims: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("SCSN needs at least 2 subjects")
        if not 0 <= self.target_index < self.n_subjects:
            raise ValueError("target_index out of range")
        if len(self.separate_fc_dims) != 3:
            raise ValueError("separate_fc_dims must have exactly 3 entries")
        if any(d < 1 for d in self.common_fc_dims + self.separate_fc_dims):
            raise ValueError("dense widths must be positive")


class ModelParams:
    """Named parameter tensors, each owned by exactly one group."""

    def __init__(self):
        self._tensors: dict[str, ad.Tensor] = {}
        self._group_of: dict[str, str] = {}

    def add(self, name: str, tensor: ad.Tensor, group: str) -> ad.Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        self._group_of[name] = group
        return tensor

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name, group in self._group_of.items():
            out.setdefault(group, []).append(name)
        return out

    def group_tensors(self, group: str) -> list[ad.Tensor]:
        return [self._tensors[n] for n, g in self._group_of.items() if g == group]

    def n_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self._tensors.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for n, values in snapshot.items():
            self._tensors[n].values = values.copy()


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> ad.Tensor:
    fan_out = shape[0]
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> ad.Tensor:
    return ad.Tensor(np.zeros(shape), requires_grad=True)


def _branch_rng(seed: int, branch: int | None) -> np.random.Generator:
    key = (0,) if branch is None else (1, branch)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _init_shallow(params: ModelParams, cfg: BaselineConfig, rng, prefix: str, group: str):
    params.add(f"{prefix}temporal.kernels",
               _glorot(rng, (cfg.temporal_filters, cfg.temporal_kernel)), group)
    params.add(f"{prefix}spatial.weights",
               _glorot(rng, (cfg.temporal_filters, cfg.temporal_filters, cfg.n_channels)),
               group)


def _init_dense_chain(params: ModelParams, rng, prefix: str, group: str,
                      in_dim: int, dims: tuple[int, ...]) -> int:
    for j, width in enumerate(dims):
        params.add(f"{prefix}fc{j}.weight", _glorot(rng, (width, in_dim)), group)
        params.add(f"{prefix}fc{j}.bias", _zeros((width,)), group)
        in_dim = width
    return in_dim


def _shallow_forward(x, params: ModelParams, cfg: BaselineConfig, prefix: str,
                     training: bool, dropout_rng) -> ad.Tensor:
    h = ad.conv_time(x, params[f"{prefix}temporal.kernels"], 1)
    h = ad.conv_space(h, params[f"{prefix}spatial.weights"])
    h = ad.square(h)
    h = ad.mean_pool(h, cfg.pool_width, cfg.pool_stride)
    h = ad.log_clipped(h)
    h = ad.dropout(h, cfg.dropout, dropout_rng, training=training)
    batch = h.shape[0] if h.ndim == 3 else None
    flat = (cfg.feature_dim,) if batch is None else (batch, cfg.feature_dim)
    return ad.reshape(h, flat)


def _dense_chain_forward(h, params: ModelParams, prefix: str, n_layers: int,
                         collect: list | None = None) -> ad.Tensor:
    for j in range(n_layers):
        h = ad.tanh(ad.dense(h, params[f"{prefix}fc{j}.weight"], params[f"{prefix}fc{j}.bias"]))
        if collect is not None:
            collect.append(h)
    return h


def _softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class BaselineModel:
    """Single-branch decoder: shallow extractor plus linear classifier."""

    kind = "baseline"

    def __init__(self, cfg: BaselineConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    def forward(self, x, training: bool = False, dropout_rng=None) -> ad.Tensor:
        h = _shallow_forward(x, self.params, self.cfg, "", training, dropout_rng)
        return ad.dense(h, self.params["classifier.weight"], self.params["classifier.bias"])

    def predict_proba(self, x, branch: int | None = None) -> np.ndarray:
        return _softmax_probs(self.forward(x, training=False).values)


class ScsnModel:
    """Multi-branch decoder with per-subject shallow and deep blocks around a
    shared dense block."""

    kind = "scsn"

    def __init__(self, cfg: ScsnConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @property
    def n_subjects(self) -> int:
        return self.cfg.n_subjects

    def branch_forward(self, x, branch: int, training: bool = False,
                       dropout_rng=None) -> tuple[ad.Tensor, list[ad.Tensor]]:
        if not 0 <= branch < self.cfg.n_subjects:
            raise ValueError(f"branch {branch} out of range")
        prefix = f"subject{branch}."
        h = _shallow_forward(x, self.params, self.cfg.base, prefix, training, dropout_rng)
        h = _dense_chain_forward(h, self.params, "common.", len(self.cfg.common_fc_dims))
        feats: list[ad.Tensor] = []
        h = _dense_chain_forward(h, self.params, f"{prefix}sep.",
                                 len(self.cfg.separate_fc_dims), collect=feats)
        logits = ad.dense(h, self.params[f"{prefix}classifier.weight"],
                          self.params[f"{prefix}classifier.bias"])
        return logits, feats

    def predict_proba(self, x, branch: int) -> np.ndarray:
        logits, _ = self.branch_forward(x, branch, training=False)
        return _softmax_probs(logits.values)


def build_baseline(cfg: BaselineConfig, seed: int) -> BaselineModel:
    """Initialize the baseline decoder; uniform Glorot-bound weights, zero
    biases, deterministic given the seed."""
    cfg.pooled_out  # validates pool feasibility
    params = ModelParams()
    rng = _branch_rng(seed, None)
    _init_shallow(params, cfg, rng, "", "model")
    params.add("classifier.weight", _glorot(rng, (cfg.n_classes, cfg.feature_dim)), "model")
    params.add("classifier.bias", _zeros((cfg.n_classes,)), "model")
    return BaselineModel(cfg, params)


def build_scsn(cfg: ScsnConfig, seed: int) -> ScsnModel:
    """Initialize the SCSN; the shared block and each subject branch draw
    from separate streams derived from (seed, branch)."""
    cfg.base.pooled_out
    params = ModelParams()
    shared_rng = _branch_rng(seed, None)
    common_out = _init_dense_chain(params, shared_rng, "common.", "shared",
                                   cfg.base.feature_dim, tuple(cfg.common_fc_dims))
    for i in range(cfg.n_subjects):
        rng = _branch_rng(seed, i)
        group = f"subject{i}"
        prefix = f"subject{i}."
        _init_shallow(params, cfg.base, rng, prefix, group)
        sep_out = _init_dense_chain(params, rng, f"{prefix}sep.", group,
                                    common_out, tuple(cfg.separate_fc_dims))
        params.add(f"{prefix}classifier.weight",
                   _glorot(rng, (cfg.base.n_classes, sep_out)), group)
        params.add(f"{prefix}classifier.bias", _zeros((cfg.base.n_classes,)), group)
    return ScsnModel(cfg, params)


def forward_train(model: ScsnModel, batch: dict, dropout_rng=None
                  ) -> dict[int, tuple[ad.Tensor, list[ad.Tensor]]]:
    """Run every branch's sub-batch through its own path plus the shared
    block; returns {branch: (logits, three deep-layer activations)}."""
    missing = [i for i in range(model.n_subjects) if i not in batch]
    if missing:
        raise ValueError(f"batch is missing sub-batches for branches {missing}")
    out = {}
    for i in range(model.n_subjects):
        x, _ = batch[i]
        out[i] = model.branch_forward(x, i, training=True, dropout_rng=dropout_rng)
    return out


def forward_infer(model, crops, branch: int | None = None) -> np.ndarray:
    """Class probabilities per crop, dropout disabled. SCSN models use only
    the requested branch; the baseline ignores the branch argument."""
    if isinstance(model, ScsnModel):
        if branch is None:
            raise ValueError("SCSN inference needs a branch index")
        return model.predict_proba(crops, branch)
    return model.predict_proba(crops)


# ---------------------------------------------------------------------------
# checkpoints


def _config_lines(model) -> list[str]:
    if isinstance(model, BaselineModel):
        base, lines = model.cfg, [f"kind={model.kind}"]
    else:
        base = model.cfg.base
        lines = [
            f"kind={model.kind}",
            f"n_subjects={model.cfg.n_subjects}",
            f"target_index={model.cfg.target_index}",
            f"common_fc_dims={','.join(str(d) for d in model.cfg.common_fc_dims)}",
            f"separate_fc_dims={','.join(str(d) for d in model.cfg.separate_fc_dims)}",
        ]
    lines += [
        f"n_channels={base.n_channels}",
        f"n_samples={base.n_samples}",
        f"n_classes={base.n_classes}",
        f"temporal_filters={base.temporal_filters}",
        f"temporal_kernel={base.temporal_kernel}",
        f"pool_width={base.pool_width}",
        f"pool_stride={base.pool_stride}",
        f"dropout={base.dropout!r}",
    ]
    return lines


def save_checkpoint(model, path, meta: dict[str, str] | None = None) -> None:
    """Config echo as key=value lines, then named little-endian float64
    parameter blocks; round-trips bit-exactly."""
    lines = [f"checkpoint_version={CHECKPOINT_VERSION}"] + _config_lines(model)
    for key, value in (meta or {}).items():
        if "\n" in key or "\n" in str(value):
            raise ValueError("meta entries may not contain newlines")
        lines.append(f"meta.{key}={value}")
    lines.append(f"param_count={len(model.params.names())}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for name, tensor in model.params.items():
            shape = ",".join(str(d) for d in tensor.shape)
            group = model.params.group_of(name)
            fh.write(f"param={name} shape={shape} group={group}\n".encode("utf-8"))
            fh.write(tensor.values.astype("<f8").tobytes())


def _split_fields(header: str) -> dict[str, str]:
    fields = {}
    for line in header.splitlines():
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"malformed checkpoint line: {line!r}")
        fields[key] = value
    return fields


def load_checkpoint(path):
    """Rebuild the model and the stored metadata from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError("checkpoint header not terminated by a blank line")
    fields = _split_fields(blob[:sep].decode("utf-8"))
    if fields.get("checkpoint_version") != str(CHECKPOINT_VERSION):
        raise ValueError("unsupported checkpoint version")
    meta = {k[len("meta."):]: v for k, v in fields.items() if k.startswith("meta.")}

    base = BaselineConfig(
        n_channels=int(fields["n_channels"]),
        n_samples=int(fields["n_samples"]),
        n_classes=int(fields["n_classes"]),
        temporal_filters=int(fields["temporal_filters"]),
        temporal_kernel=int(fields["temporal_kernel"]),
        pool_width=int(fields["pool_width"]),
        pool_stride=int(fields["pool_stride"]),
        dropout=float(fields["dropout"]),
    )
    if fields["kind"] == "baseline":
        model = build_baseline(base, seed=0)
    elif fields["kind"] == "scsn":
        cfg = ScsnConfig(
            base=base,
            n_subjects=int(fields["n_subjects"]),
            target_index=int(fields["target_index"]),
            common_fc_dims=tuple(int(d) for d in fields["common_fc_dims"].split(",")),
            separate_fc_dims=tuple(int(d) for d in fields["separate_fc_dims"].split(",")),
        )
        model = build_scsn(cfg, seed=0)
    else:
        raise ValueError(f"unknown model kind {fields['kind']!r}")

    offset = sep + 2
    expected = int(fields["param_count"])
    seen = 0
    while offset < len(blob):
        eol = blob.find(b"\n", offset)
        if eol < 0:
            raise ValueError("truncated parameter block header")
        head = blob[offset:eol].decode("utf-8")
        parts = dict(p.split("=", 1) for p in head.split(" "))
        name = parts["param"]
        shape = tuple(int(d) for d in parts["shape"].split(",")) if parts["shape"] else ()
        if name not in model.params:
            raise ValueError(f"unexpected parameter {name!r}")
        tensor = model.params[name]
        if tensor.shape != shape:
            raise ValueError(f"parameter {name!r} has shape {shape}, expected {tensor.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        start = eol + 1
        if start + nbytes > len(blob):
            raise ValueError(f"truncated data for parameter {name!r}")
        tensor.values = np.frombuffer(blob[start:start + nbytes], dtype="<f8").reshape(shape).copy()
        offset = start + nbytes
        seen += 1
    if seen != expected:
        raise ValueError(f"checkpoint lists {expected} parameters, found {seen}")
    return model, meta
