"""Residual-CNN + bidirectional GRU recognizer, greedy decoder, checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .data import Alphabet, FeatureBatch

FORMAT_VERSION = 1
_MAGIC = b"MIXPGDCK"


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 128
    cnn_channels: int = 32
    n_rescnn_blocks: int = 2
    n_birnn_layers: int = 2
    rnn_hidden: int = 128
    n_classes: int = 29
    conv_downsample_factor: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.conv_downsample_factor < 1:
            raise ConfigError("conv_downsample_factor must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must include at least one symbol and the blank")

    def out_length(self, lengths):
        """Output frames for input lengths (kernel 3, padding 1, stride = downsample)."""
        s = self.conv_downsample_factor
        if isinstance(lengths, torch.Tensor):
            return torch.div(lengths - 1, s, rounding_mode="floor") + 1
        return (lengths - 1) // s + 1

    @property
    def freq_out(self) -> int:
        return (self.n_mels - 1) // 2 + 1

    def check_alphabet(self, alphabet: Alphabet):
        if self.n_classes != alphabet.n_classes:
            raise ConfigError(
                f"n_classes={self.n_classes} but alphabet needs {alphabet.n_classes}"
            )


class ModelOutput(NamedTuple):
    log_probs: torch.Tensor    # [batch, out_time, n_classes]
    out_lengths: torch.Tensor  # [batch]


class FeatureLayerNorm(nn.Module):
    """LayerNorm over the frequency axis of a [B, C, F, T] map."""

    def __init__(self, n_feats):
        super().__init__()
        self.norm = nn.LayerNorm(n_feats)

    def forward(self, x):
        return self.norm(x.transpose(2, 3)).transpose(2, 3)


class ResidualCNN(nn.Module):
    def __init__(self, channels, n_feats, dropout):
        super().__init__()
        self.norm1 = FeatureLayerNorm(n_feats)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = FeatureLayerNorm(n_feats)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # mask: [B, 1, 1, T]; keeps padded frames at zero between convolutions
        residual = x
        x = self.conv1(self.dropout(F.gelu(self.norm1(x)))) * mask
        x = self.conv2(self.dropout(F.gelu(self.norm2(x)))) * mask
        return x + residual


class BidirectionalGRU(nn.Module):
    def __init__(self, input_size, hidden, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(input_size)
        self.gru = nn.GRU(input_size, hidden, batch_first=True, bidirectional=True)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, lengths):
        x = F.gelu(self.norm(x))
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return self.dropout(out)


class SpeechRecognizer(nn.Module):
    """Conv front-end, residual CNN stack, BiGRU stack, two-layer classifier.

    Input is a ``[batch, n_mels, time]`` feature tensor; the front-end conv
    strides by ``conv_downsample_factor`` in time and by 2 in frequency.
    Padded frames are re-zeroed after every convolution and the GRUs run on
    packed sequences, so an utterance gets the same output alone or padded
    inside a batch.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, fo, h = config.cnn_channels, config.freq_out, config.rnn_hidden
        self.frontend = nn.Conv2d(1, c, 3, stride=(2, config.conv_downsample_factor), padding=1)
        self.rescnn = nn.ModuleList(
            ResidualCNN(c, fo, config.dropout) for _ in range(config.n_rescnn_blocks)
        )
        self.proj = nn.Linear(c * fo, h)
        self.birnn = nn.ModuleList(
            BidirectionalGRU(h if i == 0 else 2 * h, h, config.dropout)
            for i in range(config.n_birnn_layers)
        )
        self.classifier = nn.Sequential(
            nn.Linear(2 * h if config.n_birnn_layers else h, h),
            nn.GELU(),
            nn.Dropout(config.dropout),
            nn.Linear(h, config.n_classes),
        )

    def forward(self, features, lengths) -> ModelOutput:
        if features.dim() != 3 or features.shape[1] != self.config.n_mels:
            raise ConfigError(
                f"frontend: expected [batch, {self.config.n_mels}, time] features, "
                f"got {tuple(features.shape)}"
            )
        out_lengths = self.config.out_length(lengths)
        x = self.frontend(features.unsqueeze(1))
        t = torch.arange(x.shape[-1], device=x.device)
        valid = (t[None, :] < out_lengths[:, None]).to(x.dtype)
        x = x * valid[:, None, None, :]
        for block in self.rescnn:
            x = block(x, valid[:, None, None, :])
        b, c, f, t_out = x.shape
        x = x.reshape(b, c * f, t_out).transpose(1, 2)
        x = self.proj(x)
        for layer in self.birnn:
            x = layer(x, out_lengths)
        logits = self.classifier(x)
        return ModelOutput(F.log_softmax(logits, dim=-1), out_lengths)


def forward(model: SpeechRecognizer, batch: FeatureBatch, mode: str | None = None) -> ModelOutput:
    """Run ``model`` on ``batch``; ``mode`` ('train' or 'eval') switches dropout."""
    if mode is not None:
        model.train(mode == "train")
    return model(batch.features, batch.feature_lengths)


def greedy_decode(output: ModelOutput, alphabet: Alphabet) -> list[str]:
    """Argmax per frame, collapse repeats, drop blanks."""
    best = output.log_probs.argmax(dim=-1)
    texts = []
    for row, n in zip(best.tolist(), output.out_lengths.tolist()):
        row = row[:n]
        collapsed = [k for i, k in enumerate(row) if i == 0 or k != row[i - 1]]
        texts.append(alphabet.decode(collapsed))
    return texts


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    parameters: dict[str, torch.Tensor]
    model_config: ModelConfig
    alphabet: Alphabet = field(default_factory=Alphabet)
    regime: str = "standard"
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None

    @classmethod
    def from_model(cls, model: SpeechRecognizer, alphabet: Alphabet, **kw) -> "Checkpoint":
        params = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(params, model.config, alphabet, **kw)

    def build_model(self) -> SpeechRecognizer:
        model = SpeechRecognizer(self.model_config)
        expected = model.state_dict()
        for name, tensor in expected.items():
            if name not in self.parameters:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if self.parameters[name].shape != tensor.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {tuple(self.parameters[name].shape)} "
                    f"!= model shape {tuple(tensor.shape)}"
                )
        model.load_state_dict(self.parameters, strict=True)
        model.eval()
        return model


def _tensor_bytes(t: torch.Tensor) -> tuple[dict, bytes]:
    arr = t.detach().cpu().contiguous().numpy()
    return {"dtype": arr.dtype.str, "shape": list(arr.shape)}, arr.tobytes()


def _flatten_optimizer(state: dict):
    blobs, plain = {}, {}
    for pid, entry in state.get("state", {}).items():
        for key, val in entry.items():
            if isinstance(val, torch.Tensor):
                blobs[f"optimizer/{pid}/{key}"] = val
            else:
                plain[f"{pid}/{key}"] = val
    return blobs, {"param_groups": state.get("param_groups", []), "scalars": plain}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``ckpt`` atomically as one file.

    Layout: magic, 8-byte header length, JSON header, then raw tensor blobs at
    the offsets listed in the header.
    """
    path = Path(path)
    blobs = {f"param/{k}": v for k, v in ckpt.parameters.items()}
    optim_header = None
    if ckpt.optimizer_state is not None:
        optim_blobs, optim_header = _flatten_optimizer(ckpt.optimizer_state)
        blobs.update(optim_blobs)
    if ckpt.rng_state is not None:
        blobs["rng/torch"] = ckpt.rng_state
    entries, payload, offset = {}, io.BytesIO(), 0
    for name, tensor in blobs.items():
        info, raw = _tensor_bytes(tensor)
        info.update(offset=offset, nbytes=len(raw))
        entries[name] = info
        payload.write(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(ckpt.model_config),
        "alphabet": ckpt.alphabet.to_dict(),
        "regime": ckpt.regime,
        "epoch": ckpt.epoch,
        "meta": ckpt.meta,
        "optimizer": optim_header,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(payload.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, every config field must match."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (hlen,) = struct.unpack("<Q", raw[len(_MAGIC): len(_MAGIC) + 8])
        start = len(_MAGIC) + 8
        header = json.loads(raw[start: start + hlen])
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"{path}: corrupted header ({err})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    config = ModelConfig(**header["model_config"])
    if expect is not None:
        for f in fields(ModelConfig):
            a, b = getattr(config, f.name), getattr(expect, f.name)
            if a != b:
                raise CheckpointError(f"{path}: model_config.{f.name} is {a}, expected {b}")
    body = raw[start + hlen:]
    tensors = {}
    for name, info in header["tensors"].items():
        end = info["offset"] + info["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated blob {name}")
        arr = np.frombuffer(body[info["offset"]: end], dtype=np.dtype(info["dtype"]))
        tensors[name] = torch.from_numpy(arr.reshape(info["shape"]).copy())
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    optim = None
    if header.get("optimizer") is not None:
        state: dict = {}
        for k, v in tensors.items():
            if k.startswith("optimizer/"):
                _, pid, key = k.split("/", 2)
                state.setdefault(int(pid), {})[key] = v
        for k, v in header["optimizer"]["scalars"].items():
            pid, key = k.split("/", 1)
            state.setdefault(int(pid), {})[key] = v
        optim = {"state": state, "param_groups": header["optimizer"]["param_groups"]}
    ckpt = Checkpoint(
        parameters=params,
        model_config=config,
        alphabet=Alphabet.from_dict(header["alphabet"]),
        regime=header["regime"],
        epoch=header["epoch"],
        meta=header.get("meta", {}),
        optimizer_state=optim,
        rng_state=tensors.get("rng/torch"),
    )
    config.check_alphabet(ckpt.alphabet)
    return ckpt
