"""Two-branch face/voice fusion network: build, train, extract, persist."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netcore as nc
from .embedding_store import PairedSample, stack_pairs

log = logging.getLogger(__name__)

MODEL_MAGIC = b"FUSEMDL1"
MODEL_VERSION = 1
FEATURE_TAP = "post_fusion_l2"


class ModelFormatError(ValueError):
    """Corrupt or truncated model file."""


class ModelVersionError(ValueError):
    pass


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (mean loss {loss})")
        self.epoch = epoch


@dataclass(frozen=True)
class ArchitectureSpec:
    voice_in_dim: int
    face_in_dim: int
    num_classes: int
    voice_hidden_dims: tuple = (1024,)
    face_hidden_dims: tuple = (1024,)
    fusion_dim: int = 1024
    post_fusion_hidden_dims: tuple = (1024,)
    dropout_rates: tuple = (0.1, 0.2)  # (voice branch, face branch)
    hidden_activation: str = "relu"
    # last layer of each stack, i.e. the one feeding an L2 normalization
    projection_activation: str = "identity"

    def __post_init__(self):
        for name in ("voice_hidden_dims", "face_hidden_dims", "post_fusion_hidden_dims",
                     "dropout_rates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("voice_in_dim", "face_in_dim", "fusion_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("voice_hidden_dims", "face_hidden_dims"):
            dims = getattr(self, name)
            if not dims or dims[-1] != self.fusion_dim:
                raise ValueError(f"{name} must end at fusion_dim={self.fusion_dim}, got {dims}")
        if self.post_fusion_hidden_dims and self.post_fusion_hidden_dims[-1] != self.fusion_dim:
            raise ValueError("last post-fusion layer must have width fusion_dim")
        if any(d < 1 for d in self.voice_hidden_dims + self.face_hidden_dims
               + self.post_fusion_hidden_dims):
            raise ValueError("layer widths must be positive")
        if len(self.dropout_rates) != 2 or not all(0 <= r < 1 for r in self.dropout_rates):
            raise ValueError(f"dropout_rates must be two values in [0, 1), got {self.dropout_rates}")
        for act in (self.hidden_activation, self.projection_activation):
            if act not in nc.ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TwoBranchModel:
    voice_branch: list
    face_branch: list
    post_fusion: list
    classifier_head: nc.DenseLayer
    spec: ArchitectureSpec

    def named_layers(self):
        out = [(f"voice.{i}", l) for i, l in enumerate(self.voice_branch)]
        out += [(f"face.{i}", l) for i, l in enumerate(self.face_branch)]
        out += [(f"post.{i}", l) for i, l in enumerate(self.post_fusion)]
        out.append(("head", self.classifier_head))
        return out

    def parameters(self) -> list:
        params = []
        for _, layer in self.named_layers():
            params += [layer.weights, layer.bias]
        return params

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        layers = [l for _, l in self.named_layers()]
        if len(params) != 2 * len(layers):
            raise ValueError("parameter list does not match model layers")
        for i, layer in enumerate(layers):
            layer.weights, layer.bias = params[2 * i], params[2 * i + 1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self, dtype=None) -> "TwoBranchModel":
        def cp(layers):
            return [nc.DenseLayer(l.weights.astype(dtype or l.weights.dtype, copy=True),
                                  l.bias.astype(dtype or l.bias.dtype, copy=True), l.activation)
                    for l in layers]
        return TwoBranchModel(cp(self.voice_branch), cp(self.face_branch), cp(self.post_fusion),
                              cp([self.classifier_head])[0], self.spec)


@dataclass
class TrainConfig:
    learning_rate: float = 0.04
    batch_size: int = 2048
    epochs: int = 30
    seed: int = 0
    loss: str = "cross_entropy"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class FusedFeature:
    vector: np.ndarray
    speaker_index: int = -1
    masked: bool = False


def _stack(in_dim: int, widths: Sequence[int], spec: ArchitectureSpec, rng) -> list:
    layers = []
    for k, w in enumerate(widths):
        last = k == len(widths) - 1
        act = spec.projection_activation if last else spec.hidden_activation
        layers.append(nc.init_dense(in_dim, w, act, rng))
        in_dim = w
    return layers


def build_model(spec: ArchitectureSpec, seed: int = 0) -> TwoBranchModel:
    spec.validate()
    rng = np.random.default_rng(seed)
    voice = _stack(spec.voice_in_dim, spec.voice_hidden_dims, spec, rng)
    face = _stack(spec.face_in_dim, spec.face_hidden_dims, spec, rng)
    post = _stack(spec.fusion_dim, spec.post_fusion_hidden_dims, spec, rng)
    head = nc.init_dense(spec.fusion_dim, spec.num_classes, "identity", rng)
    return TwoBranchModel(voice, face, post, head, spec)


def _run_stack(layers, h, cache):
    for layer in layers:
        out = nc.dense_forward(layer, h)
        cache.append((h, out))
        h = out
    return h


def _forward_cached(model: TwoBranchModel, voice, face, training: bool, rng):
    spec = model.spec
    voice = np.asarray(voice, dtype=np.float64)
    face = np.asarray(face, dtype=np.float64)
    if voice.shape[-1] != spec.voice_in_dim or face.shape[-1] != spec.face_in_dim:
        raise ValueError(
            f"input dims ({voice.shape[-1]}, {face.shape[-1]}) do not match the architecture "
            f"({spec.voice_in_dim}, {spec.face_in_dim})"
        )
    c: dict = {"voice": [], "face": [], "post": []}
    hv = _run_stack(model.voice_branch, voice, c["voice"])
    dv, c["voice_mask"] = nc.dropout_forward(hv, spec.dropout_rates[0], rng, training)
    nv = nc.l2_normalize(dv)
    hf = _run_stack(model.face_branch, face, c["face"])
    df, c["face_mask"] = nc.dropout_forward(hf, spec.dropout_rates[1], rng, training)
    nf = nc.l2_normalize(df)
    fused_raw = nc.fuse_multiply(nv, nf)
    hp = _run_stack(model.post_fusion, fused_raw, c["post"])
    feat = nc.l2_normalize(hp)
    logits = nc.dense_forward(model.classifier_head, feat)
    c.update(dv=dv, nv=nv, df=df, nf=nf, hp=hp, feat=feat, logits=logits)
    return logits, feat, c


def forward(model: TwoBranchModel, voice, face, training: bool = False, rng=None):
    """Returns (logits, fused feature). Works on single vectors or row batches."""
    if training and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    logits, feat, _ = _forward_cached(model, voice, face, training, rng)
    return logits, feat


def _backward_stack(layers, cache, grad, grads_out):
    per_layer = []
    for layer, (x, out) in zip(reversed(layers), reversed(cache)):
        gw, gb, grad = nc.dense_backward(layer, x, out, grad)
        per_layer.append((gw, gb))
    for gw, gb in reversed(per_layer):
        grads_out += [gw, gb]
    return grad


def _backward(model: TwoBranchModel, c: dict, grad_logits):
    """Parameter gradients in ``model.parameters()`` order."""
    gw_h, gb_h, g = nc.dense_backward(model.classifier_head, c["feat"], c["logits"], grad_logits)
    g = nc.l2_normalize_backward(c["hp"], c["feat"], g)
    post_grads: list = []
    g_fused = _backward_stack(model.post_fusion, c["post"], g, post_grads)
    g_nv, g_nf = nc.fuse_multiply_backward(c["nv"], c["nf"], g_fused)

    voice_grads: list = []
    g = nc.l2_normalize_backward(c["dv"], c["nv"], g_nv) * c["voice_mask"]
    _backward_stack(model.voice_branch, c["voice"], g, voice_grads)
    face_grads: list = []
    g = nc.l2_normalize_backward(c["df"], c["nf"], g_nf) * c["face_mask"]
    _backward_stack(model.face_branch, c["face"], g, face_grads)
    return voice_grads + face_grads + post_grads + [gw_h, gb_h]


def loss_and_grads(model: TwoBranchModel, voice, face, labels, training: bool = False, rng=None):
    """Mean cross-entropy over a batch and its parameter gradients."""
    voice = np.atleast_2d(voice)
    face = np.atleast_2d(face)
    labels = np.atleast_1d(labels)
    logits, _, c = _forward_cached(model, voice, face, training, rng)
    p = nc.softmax(logits)
    y = nc.one_hot(labels, model.spec.num_classes)
    loss = float(np.mean(nc.cross_entropy(p, y)))
    grads = _backward(model, c, nc.softmax_cross_entropy_backward(p, y) / len(labels))
    return loss, grads


def train(model: TwoBranchModel, pairs: Sequence[PairedSample], cfg: TrainConfig | None = None):
    """Mini-batch Adam on mean cross-entropy. Returns (model, per-epoch mean loss).

    The input model is not modified. Batch size is clamped to the number of pairs.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not pairs:
        raise ValueError("no training pairs")
    voice, face, labels = stack_pairs(pairs)
    if labels.min() < 0 or labels.max() >= model.spec.num_classes:
        raise ValueError("speaker index out of range for model head")
    model = model.copy()
    n = len(labels)
    batch = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    state = nc.AdamState.fresh(model.parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grads = loss_and_grads(model, voice[idx], face[idx], labels[idx],
                                         training=True, rng=rng)
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch, loss)
            total += loss * len(idx)
            params, state = nc.adam_step(model.parameters(), grads, state)
            model.set_parameters(params)
        mean_loss = total / n
        if not all(np.all(np.isfinite(p)) for p in model.parameters()):
            raise DivergedTrainingError(epoch, mean_loss)
        history.append(mean_loss)
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
    return model, history


def extract_features(model: TwoBranchModel, voice, face=None, speaker_index: int = -1) -> FusedFeature:
    """Inference-mode fused feature; a missing face is replaced by zeros (masked)."""
    voice = np.asarray(voice, dtype=np.float64)
    masked = face is None
    if masked:
        face = np.zeros(voice.shape[:-1] + (model.spec.face_in_dim,))
    _, feat = forward(model, voice, face, training=False)
    return FusedFeature(feat, speaker_index, masked)


def extract_feature_matrix(model: TwoBranchModel, voice, face=None, chunk: int = 4096) -> np.ndarray:
    """Row-wise extract_features over a matrix of voices (and optional faces)."""
    voice = np.atleast_2d(np.asarray(voice, dtype=np.float64))
    out = []
    for start in range(0, len(voice), chunk):
        f = None if face is None else np.atleast_2d(face)[start:start + chunk]
        out.append(extract_features(model, voice[start:start + chunk], f).vector)
    if not out:
        return np.zeros((0, model.spec.fusion_dim))
    return np.concatenate(out)


def encode_model(model: TwoBranchModel) -> bytes:
    layers = model.named_layers()
    header = json.dumps({
        "spec": model.spec.to_dict(),
        "feature_tap": FEATURE_TAP,
        "layers": [{"name": name, "out_dim": l.out_dim, "in_dim": l.in_dim,
                    "activation": l.activation} for name, l in layers],
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<BI", MODEL_VERSION, len(header)), header]
    for _, layer in layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_model(model: TwoBranchModel, path) -> None:
    """Parameters are written as float32."""
    Path(path).write_bytes(encode_model(model))


def decode_model(buf: bytes) -> TwoBranchModel:
    if len(buf) < len(MODEL_MAGIC) + 5 or buf[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("not a FUSEMDL1 file")
    pos = len(MODEL_MAGIC)
    version, hlen = struct.unpack_from("<BI", buf, pos)
    if version != MODEL_VERSION:
        raise ModelVersionError(f"model file version {version}, this build reads {MODEL_VERSION}")
    pos += 5
    if pos + hlen > len(buf):
        raise ModelFormatError("truncated model header")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from None
    pos += hlen
    spec = ArchitectureSpec(**header["spec"])
    model = build_model(spec, seed=0)
    named = model.named_layers()
    declared = [(d["name"], d["out_dim"], d["in_dim"], d["activation"]) for d in header["layers"]]
    if declared != [(n, l.out_dim, l.in_dim, l.activation) for n, l in named]:
        raise ModelFormatError("layer list in header does not match the architecture")
    params = []
    for _, layer in named:
        for shape in (layer.weights.shape, layer.bias.shape):
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(buf):
                raise ModelFormatError("truncated parameter data")
            params.append(np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos)
                          .reshape(shape).astype(np.float32))
            pos += nbytes
    if pos != len(buf):
        raise ModelFormatError(f"{len(buf) - pos} trailing bytes in model file")
    model.set_parameters(params)
    return model


def load_model(path) -> TwoBranchModel:
    return decode_model(Path(path).read_bytes())
