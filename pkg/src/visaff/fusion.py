"""Reliability-gated fusion head.

A batch is a stack of whole conversations. Every attention in the head uses a
block-causal mask, so the state of utterance ``i`` only ever sees utterances
``0..i`` of its own conversation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from ._rng import named_rng
from .numcore import Parameter, Tensor

EXTERNAL = ("text", "audio")
MODALITY_KEYS = ("visual", "text", "audio")
GATE_MODES = ("reliability", "closed", "open")
RETRIEVAL_MODES = ("sequence", "single")


@dataclass(frozen=True)
class FusionOptions:
    """Structural switches; the defaults are the full model.

    ``gate="closed"`` pins the reliability score to 1 (no complement),
    ``gate="open"`` pins it to 0 (complement always fully applied).
    """

    use_text: bool = True
    use_audio: bool = True
    gate: str = "reliability"
    stop_grad_reliability: bool = True
    retrieval: str = "sequence"

    def __post_init__(self):
        if self.gate not in GATE_MODES:
            raise ValueError(f"gate must be one of {GATE_MODES}")
        if self.retrieval not in RETRIEVAL_MODES:
            raise ValueError(f"retrieval must be one of {RETRIEVAL_MODES}")


class FusionParams:
    """Every trainable tensor of the head, addressed by dotted name."""

    def __init__(self, dims: Mapping[str, int], hidden: int, n_classes: int, proj_dim: int = 64,
                 seed: int = 0, tensors: Mapping[str, np.ndarray] | None = None):
        self.dims = {m: int(dims[m]) for m in MODALITY_KEYS}
        self.hidden = int(hidden)
        self.n_classes = int(n_classes)
        self.proj_dim = int(proj_dim)
        if self.n_classes < 2 or self.hidden < 1:
            raise ValueError("need hidden >= 1 and at least two classes")
        shapes = self.shapes()
        if tensors is None:
            rng = named_rng(seed, "init")
            tensors = {}
            for name, (shape, fan_in) in shapes.items():
                bound = 1.0 / np.sqrt(fan_in)
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif set(tensors) != set(shapes):
            raise ValueError(f"parameter names differ: {sorted(set(tensors) ^ set(shapes))}")
        self.params: dict[str, Parameter] = {}
        for name, (shape, _) in shapes.items():
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Parameter(name, arr)

    def shapes(self) -> dict[str, tuple[tuple[int, ...], int]]:
        H, K, P = self.hidden, self.n_classes, self.proj_dim
        out: dict[str, tuple[tuple[int, ...], int]] = {}
        for m in MODALITY_KEYS:
            d = self.dims[m]
            out[f"enc.{m}.in_w"] = ((d, H), d)
            out[f"enc.{m}.in_b"] = ((H,), d)
            for proj in ("q", "k", "v"):
                out[f"enc.{m}.{proj}_w"] = ((H, H), H)
        for m in EXTERNAL:
            for proj in ("q", "k", "v"):
                out[f"xattn.{m}.{proj}_w"] = ((H, H), H)
        out["delta.w1"] = ((2 * H, H), 2 * H)
        out["delta.b1"] = ((H,), 2 * H)
        out["delta.w2"] = ((H, H), H)
        out["delta.b2"] = ((H,), H)
        out["aux.w"] = ((H, K), H)
        out["aux.b"] = ((K,), H)
        out["cls.w1"] = ((3 * H, H), 3 * H)
        out["cls.b1"] = ((H,), 3 * H)
        out["cls.w2"] = ((H, K), H)
        out["cls.b2"] = ((K,), H)
        for m in MODALITY_KEYS:
            out[f"proj.{m}.w"] = ((H, P), H)
        return out

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def copy(self) -> "FusionParams":
        return FusionParams(self.dims, self.hidden, self.n_classes, self.proj_dim, tensors=self.arrays())

    def meta(self) -> dict:
        return {"dims": self.dims, "hidden": self.hidden, "n_classes": self.n_classes, "proj_dim": self.proj_dim}

    def to_checkpoint(self, extra: Mapping | None = None) -> str:
        meta = {"model": self.meta()}
        if extra:
            meta.update(extra)
        return nc.dumps_checkpoint(self.params, meta)

    @classmethod
    def from_checkpoint(cls, text: str) -> tuple["FusionParams", dict]:
        header, arrays = nc.loads_checkpoint(text)
        m = header["model"]
        return cls(m["dims"], m["hidden"], m["n_classes"], m["proj_dim"], tensors=arrays), header


# ------------------------------------------------------------------- masks


def block_causal_mask(lengths: Sequence[int]) -> np.ndarray:
    """``mask[i, j]`` is True iff ``j <= i`` within the same conversation."""
    n = int(sum(lengths))
    mask = np.zeros((n, n), dtype=bool)
    start = 0
    for length in lengths:
        if length < 1:
            raise ValueError("empty conversation in batch")
        mask[start : start + length, start : start + length] = np.tril(np.ones((length, length), dtype=bool))
        start += length
    return mask


# -------------------------------------------------------------- components


def _attend(query: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray, hidden: int) -> tuple[Tensor, Tensor]:
    scores = nc.scale(nc.matmul(query, nc.transpose(keys)), 1.0 / np.sqrt(hidden))
    weights = nc.softmax(scores, mask=mask)
    return nc.matmul(weights, values), weights


def encode_context(features, params: FusionParams, modality: str, mask: np.ndarray | None = None) -> Tensor:
    """Project one modality into the hidden space and add causally-masked self-attention."""
    x = nc.as_tensor(features)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ValueError("encode_context needs a non-empty (n, d) feature matrix")
    if mask is None:
        mask = block_causal_mask([x.shape[0]])
    p = f"enc.{modality}."
    z = nc.add(nc.matmul(x, params[p + "in_w"]), params[p + "in_b"])
    attended, _ = _attend(nc.matmul(z, params[p + "q_w"]), nc.matmul(z, params[p + "k_w"]),
                          nc.matmul(z, params[p + "v_w"]), mask, params.hidden)
    return nc.add(z, attended)


def retrieve_reference(h_v: Tensor, h_m: Tensor, params: FusionParams, modality: str,
                       mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Visual-query cross-attention over the external states the mask exposes.

    Returns the retrieved references and the attention weights.
    """
    h_v, h_m = nc.as_tensor(h_v), nc.as_tensor(h_m)
    if h_m.shape[0] == 0:
        raise ValueError("no keys to attend over")
    if mask is None:
        if h_v.data.ndim == 1:
            mask = np.ones(h_m.shape[0], dtype=bool)
        else:
            mask = block_causal_mask([h_m.shape[0]])
    p = f"xattn.{modality}."
    return _attend(nc.matmul(h_v, params[p + "q_w"]), nc.matmul(h_m, params[p + "k_w"]),
                   nc.matmul(h_m, params[p + "v_w"]), mask, params.hidden)


def residual_complement(h_v: Tensor, ht: Tensor, ha: Tensor, params: FusionParams) -> Tensor:
    """Two-layer tanh MLP over the stacked discrepancies ``[ht - h_v ; ha - h_v]``."""
    diff = nc.concat([nc.sub(ht, h_v), nc.sub(ha, h_v)], axis=-1)
    hidden = nc.tanh(nc.add(nc.matmul(diff, params["delta.w1"]), params["delta.b1"]))
    return nc.add(nc.matmul(hidden, params["delta.w2"]), params["delta.b2"])


def compute_reliability(h_v: Tensor, params: FusionParams, stop_grad: bool = True) -> tuple[Tensor, Tensor]:
    """Video-only logits and their maximum softmax probability ``c``.

    With ``stop_grad`` the returned ``c`` is a constant, so the auxiliary
    classifier only learns from its own cross-entropy term.
    """
    aux_logits = nc.add(nc.matmul(h_v, params["aux.w"]), params["aux.b"])
    c = nc.row_max(nc.softmax(aux_logits))
    if stop_grad:
        c = nc.detach(c)
    return c, aux_logits


def complement_visual(h_v, delta, c) -> Tensor:
    """``h_v + (1 - c) * delta`` row by row; also accepts single vectors and a scalar ``c``."""
    h_v, delta, c = nc.as_tensor(h_v), nc.as_tensor(delta), nc.as_tensor(c)
    if h_v.shape != delta.shape:
        raise nc.ShapeError(f"h_v {h_v.shape} vs delta {delta.shape}")
    if np.any(c.data < 0.0) or np.any(c.data > 1.0):
        raise ValueError("reliability score outside [0, 1]")
    single = h_v.data.ndim == 1
    if single:
        h_v, delta = nc._reshape(h_v, (1, -1)), nc._reshape(delta, (1, -1))
    if c.data.ndim == 0:
        c = nc._reshape(c, (1,)) if single else nc.Tensor(np.full(h_v.shape[0], float(c.data)))
    out = nc.add(h_v, nc.scale_rows(delta, nc.sub(nc.constant(np.ones(c.shape)), c)))
    return nc._reshape(out, (out.shape[1],)) if single else out


def classify(hv_star: Tensor, ht: Tensor, ha: Tensor, params: FusionParams) -> Tensor:
    joint = nc.concat([hv_star, ht, ha], axis=-1)
    hidden = nc.tanh(nc.add(nc.matmul(joint, params["cls.w1"]), params["cls.b1"]))
    return nc.add(nc.matmul(hidden, params["cls.w2"]), params["cls.b2"])


def project(h: Tensor, params: FusionParams, modality: str) -> Tensor:
    """Linear contrastive head followed by L2 normalisation."""
    return nc.l2_normalize(nc.matmul(h, params[f"proj.{modality}.w"]))


# ---------------------------------------------------------------- forward


@dataclass
class BatchOutput:
    lengths: list[int]
    h: dict[str, Tensor]
    retrieved: dict[str, Tensor]
    attention: dict[str, np.ndarray]
    delta: Tensor
    c: Tensor
    aux_logits: Tensor
    hv_star: Tensor
    logits: Tensor
    cls_inputs: tuple[Tensor, Tensor] = field(repr=False, default=None)


def forward_batch(features: Mapping[str, np.ndarray], lengths: Sequence[int], params: FusionParams,
                  options: FusionOptions = FusionOptions()) -> BatchOutput:
    """Run the head over a stack of conversations (rows ordered conversation by conversation)."""
    lengths = [int(n) for n in lengths]
    n = sum(lengths)
    for m in MODALITY_KEYS:
        if features[m].shape != (n, params.dims[m]):
            raise ValueError(f"{m} features have shape {features[m].shape}, expected {(n, params.dims[m])}")
    mask = block_causal_mask(lengths)
    h = {m: encode_context(nc.constant(features[m]), params, m, mask) for m in MODALITY_KEYS}
    h_v = h["visual"]
    retrieval_mask = mask if options.retrieval == "sequence" else np.eye(n, dtype=bool)
    retrieved, attention = {}, {}
    used = {"text": options.use_text, "audio": options.use_audio}
    for m in EXTERNAL:
        if used[m]:
            retrieved[m], w = retrieve_reference(h_v, h[m], params, m, retrieval_mask)
            attention[m] = w.data
        else:
            retrieved[m] = nc.constant(np.zeros((n, params.hidden)))
    # a dropped reference contributes no discrepancy to the complement
    ht_d = retrieved["text"] if used["text"] else h_v
    ha_d = retrieved["audio"] if used["audio"] else h_v
    delta = residual_complement(h_v, ht_d, ha_d, params)
    c, aux_logits = compute_reliability(h_v, params, options.stop_grad_reliability)
    if options.gate == "closed":
        c = nc.constant(np.ones(n))
    elif options.gate == "open":
        c = nc.constant(np.zeros(n))
    hv_star = complement_visual(h_v, delta, c)
    logits = classify(hv_star, retrieved["text"], retrieved["audio"], params)
    return BatchOutput(lengths, h, retrieved, attention, delta, c, aux_logits, hv_star, logits,
                       cls_inputs=(retrieved["text"], retrieved["audio"]))


def open_gate_logits(out: BatchOutput, params: FusionParams) -> np.ndarray:
    """Logits of the same pass with the reliability score forced to 0."""
    hv_open = nc.add(nc.constant(out.h["visual"].data), nc.constant(out.delta.data))
    ht, ha = out.cls_inputs
    return classify(hv_open, nc.constant(ht.data), nc.constant(ha.data), params).data.copy()


@dataclass
class GateTrace:
    """Per-utterance record of the gate and both classifiers."""

    conv_id: str
    index: int
    c: float
    delta: np.ndarray
    hv_star: np.ndarray
    retrieved_text: np.ndarray
    retrieved_audio: np.ndarray
    aux_logits: np.ndarray
    logits: np.ndarray
    open_logits: np.ndarray
    label: int | None = None
    corrupted: bool | None = None

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    @property
    def aux_prediction(self) -> int:
        return int(np.argmax(self.aux_logits))

    def to_json(self) -> dict:
        out = {
            "conv_id": self.conv_id,
            "index": self.index,
            "c": float(self.c),
            "logits": [float(x) for x in self.logits],
            "aux_logits": [float(x) for x in self.aux_logits],
            "open_logits": [float(x) for x in self.open_logits],
            "prediction": self.prediction,
            "aux_prediction": self.aux_prediction,
            "label": self.label,
        }
        if self.corrupted is not None:
            out["corrupted"] = bool(self.corrupted)
        return out


@dataclass
class TraceRow:
    """A GateTrace as read back from an export (no hidden-state vectors)."""

    conv_id: str
    index: int
    c: float
    logits: np.ndarray
    aux_logits: np.ndarray
    open_logits: np.ndarray
    label: int | None
    corrupted: bool | None = None

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    @property
    def aux_prediction(self) -> int:
        return int(np.argmax(self.aux_logits))

    @classmethod
    def from_json(cls, rec: dict) -> "TraceRow":
        return cls(rec["conv_id"], int(rec["index"]), float(rec["c"]), np.asarray(rec["logits"], dtype=float),
                   np.asarray(rec["aux_logits"], dtype=float), np.asarray(rec["open_logits"], dtype=float),
                   rec.get("label"), rec.get("corrupted"))


def traces_from_output(out: BatchOutput, params: FusionParams, keys: Sequence[tuple[str, int]],
                       labels: Sequence[int | None] | None = None,
                       corrupted: Sequence[bool | None] | None = None) -> list[GateTrace]:
    open_logits = open_gate_logits(out, params)
    traces = []
    for r, (conv_id, index) in enumerate(keys):
        traces.append(GateTrace(
            conv_id=conv_id,
            index=index,
            c=float(out.c.data[r]),
            delta=out.delta.data[r].copy(),
            hv_star=out.hv_star.data[r].copy(),
            retrieved_text=out.retrieved["text"].data[r].copy(),
            retrieved_audio=out.retrieved["audio"].data[r].copy(),
            aux_logits=out.aux_logits.data[r].copy(),
            logits=out.logits.data[r].copy(),
            open_logits=open_logits[r].copy(),
            label=None if labels is None else labels[r],
            corrupted=None if corrupted is None else corrupted[r],
        ))
    return traces


def forward_conversation(features: Mapping[str, np.ndarray], params: FusionParams,
                         options: FusionOptions = FusionOptions(), conv_id: str = "",
                         labels: Sequence[int | None] | None = None) -> list[GateTrace]:
    n = features["visual"].shape[0]
    if not all(features[m].shape[0] == n for m in MODALITY_KEYS):
        raise ValueError("modality sequences have different lengths")
    out = forward_batch(features, [n], params, options)
    return traces_from_output(out, params, [(conv_id, i) for i in range(n)], labels)


def with_options(options: FusionOptions, **changes) -> FusionOptions:
    return replace(options, **changes)
