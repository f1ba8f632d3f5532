"""Backbone-agnostic counting heads.

The classification head turns encoder features into per-block probability
maps by cosine similarity against a frozen bank of per-bin text embeddings,
then decodes density maps as the probability-weighted average of the bin
representatives. Any encoder satisfying :class:`EncoderContract` can sit
underneath; the repo ships a small convolutional encoder for tests and
desk-scale training plus a registry slot for pretrained adapters.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bins import BinPolicy, policy_from_config, policy_to_config

# Effective similarity scale is kept inside this range.
LOGIT_SCALE_RANGE = (1.0, 100.0)

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class TextEmbeddingBank:
    """Frozen per-bin text embeddings, one unit-norm row per bin."""

    embeddings: torch.Tensor  # (n, d) float32
    frozen: bool = True

    def __post_init__(self):
        emb = self.embeddings
        if emb.dim() != 2:
            raise ValueError(f"expected (n, d) embeddings, got shape {tuple(emb.shape)}")
        norms = emb.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("text embeddings must be unit-normalized")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_array(cls, array, frozen: bool = True) -> "TextEmbeddingBank":
        t = torch.as_tensor(np.asarray(array), dtype=torch.float32)
        return cls(embeddings=t, frozen=frozen)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            self.embeddings.detach().cpu().numpy().tobytes()
        ).hexdigest()


@dataclass(frozen=True)
class FixedBinValues:
    """Bare decode values for models whose binning is not an integer policy.

    Checkpoints of such models reload with this stand-in: it carries exactly
    what density decoding needs (bin count and representatives).
    """

    values: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def representatives(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@runtime_checkable
class EncoderContract(Protocol):
    """Anything that maps images to feature maps at a known reduction.

    ``reduction`` is the spatial downscaling factor p of the produced
    features; ``out_channels`` their channel width.
    """

    reduction: int
    out_channels: int

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


class ToyConvEncoder(nn.Module):
    """Three stride-2 convolutions; reduction 8.

    Small enough to train on a laptop, real enough to learn dot-counting on
    synthetic data. Ignores prompt-token settings, which only apply to
    transformer adapters.
    """

    reduction = 8

    def __init__(self, out_channels: int = 64, width: int = 32):
        super().__init__()
        self.out_channels = out_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, out_channels, 3, stride=2, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images)


EncoderFactory = Callable[[dict], nn.Module]
_ENCODERS: dict[str, EncoderFactory] = {}


def register_encoder(name: str, factory: EncoderFactory) -> None:
    """Registers an encoder adapter under ``name`` for config-driven builds.

    The factory receives the full ``model`` config section and must return a
    module satisfying :class:`EncoderContract`. Pretrained adapters should
    honor ``encoder_weights`` / ``encoder_checksum`` (see
    :func:`verify_weights_checksum`) and ``vpt_tokens`` where applicable.
    """
    _ENCODERS[name] = factory


def build_encoder(model_cfg: dict) -> nn.Module:
    name = model_cfg.get("encoder", "toy")
    if name not in _ENCODERS:
        raise KeyError(
            f"unknown encoder {name!r}; registered: {sorted(_ENCODERS)}. "
            "Use register_encoder() to plug in a pretrained adapter."
        )
    return _ENCODERS[name](model_cfg)


def _toy_factory(model_cfg: dict) -> nn.Module:
    return ToyConvEncoder(
        out_channels=model_cfg.get("encoder_channels", 64),
        width=model_cfg.get("encoder_width", 32),
    )


register_encoder("toy", _toy_factory)


def verify_weights_checksum(path: str | Path, expected_sha256: str) -> Path:
    """Verifies a downloaded weights archive against its pinned checksum."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"encoder weights not found at {path}; download them first"
        )
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != expected_sha256:
        raise ValueError(
            f"checksum mismatch for {path}: got {digest}, expected {expected_sha256}"
        )
    return path


def interpolate_features(features: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resamples feature maps to ``out_hw`` (identity if equal).

    Accepts (C, H, W) or (B, C, H, W); channel count is unchanged.
    """
    if out_hw[0] < 1 or out_hw[1] < 1:
        raise ValueError(f"target size must be positive, got {out_hw}")
    if features.shape[-2:] == tuple(out_hw):
        return features
    squeezed = features.dim() == 3
    x = features.unsqueeze(0) if squeezed else features
    x = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
    return x.squeeze(0) if squeezed else x


def similarity_logits(
    features: torch.Tensor, bank: torch.Tensor, logit_scale: float | torch.Tensor = 1.0
) -> torch.Tensor:
    """Scaled cosine similarity between per-location features and bank rows.

    ``features`` is (..., d, H, W); the result is (..., n, H, W) with
    ``logits[..., k, i, j] = scale * cos(features[..., :, i, j], bank[k])``.
    Feature vectors are L2-normalized per location; zero-norm locations are
    floored (and warned about) rather than produced as NaNs.
    """
    if features.shape[-3] != bank.shape[1]:
        raise ValueError(
            f"feature width {features.shape[-3]} != bank width {bank.shape[1]}"
        )
    norms = features.norm(dim=-3, keepdim=True)
    if float(norms.detach().min()) < _NORM_FLOOR:
        warnings.warn(
            "zero-norm feature vector(s); cosine floored to 0", RuntimeWarning
        )
    normed = features / norms.clamp(min=_NORM_FLOOR)
    logits = torch.einsum("...dhw,nd->...nhw", normed, bank.to(features.dtype))
    return logits * logit_scale


def probability_map(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the bin axis (third from the end) at every block."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain NaN or inf")
    return torch.softmax(logits, dim=-3)


def expected_density(prob: torch.Tensor, policy_or_values) -> torch.Tensor:
    """Decodes a probability map into counts via bin representatives.

    Per block, the dot product of the probability column with the
    representative vector. Accepts a :class:`BinPolicy` or a length-n
    value sequence.
    """
    values = getattr(policy_or_values, "representatives", policy_or_values)
    values = torch.as_tensor(np.asarray(values), dtype=prob.dtype, device=prob.device)
    if prob.shape[-3] != values.shape[0]:
        raise ValueError(
            f"probability map has {prob.shape[-3]} bins, policy has {values.shape[0]}"
        )
    return torch.einsum("...nhw,n->...hw", prob, values)


class ClassificationCounter(nn.Module):
    """Counting model: encoder -> interpolate -> project -> text similarity.

    The text bank and bin representatives are registered as buffers, never
    as parameters: they stay frozen through training. ``logit_scale`` is a
    learnable temperature on the cosine similarities, stored in log space
    and clamped to ``LOGIT_SCALE_RANGE`` (call :meth:`clamp_logit_scale`
    after each optimizer step).
    """

    def __init__(
        self,
        encoder: nn.Module,
        policy,  # BinPolicy, or anything exposing .n and .representatives
        bank: TextEmbeddingBank,
        r: int = 8,
        logit_scale_init: float = 1.0,
    ):
        super().__init__()
        if bank.n != policy.n:
            raise ValueError(f"bank has {bank.n} rows, policy {policy.n} bins")
        if r < 1:
            raise ValueError(f"reduction factor must be >= 1, got {r}")
        self.encoder = encoder
        self.policy = policy
        self.r = r
        self.project = nn.Conv2d(encoder.out_channels, bank.dim, kernel_size=1)
        self.log_logit_scale = nn.Parameter(
            torch.tensor(math.log(float(logit_scale_init)))
        )
        self.register_buffer("text_bank", bank.embeddings.clone())
        self.register_buffer(
            "bin_values", torch.as_tensor(policy.representatives, dtype=torch.float32)
        )

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.log_logit_scale.exp().clamp(*LOGIT_SCALE_RANGE)

    def clamp_logit_scale(self) -> None:
        lo, hi = LOGIT_SCALE_RANGE
        with torch.no_grad():
            self.log_logit_scale.clamp_(math.log(lo), math.log(hi))

    def bank_fingerprint(self) -> str:
        return hashlib.sha256(self.text_bank.cpu().numpy().tobytes()).hexdigest()

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        """Projected per-block feature map of shape (B, d, H//r, W//r)."""
        h, w = images.shape[-2:]
        feats = self.encoder(images)
        feats = interpolate_features(feats, (h // self.r, w // self.r))
        return self.project(feats)

    def forward(self, images: torch.Tensor):
        feats = self.image_features(images)
        logits = similarity_logits(feats, self.text_bank, self.logit_scale)
        prob = probability_map(logits)
        density = expected_density(prob, self.bin_values)
        return prob, density


class RegressionCounter(nn.Module):
    """Direct density regression behind the same forward signature.

    Returns ``(None, density)``; trained with the count loss alone. Exists
    so classification and regression heads can be swapped in experiment
    grids without touching the pipeline.
    """

    def __init__(self, encoder: nn.Module, r: int = 8):
        super().__init__()
        self.encoder = encoder
        self.r = r
        self.regress = nn.Conv2d(encoder.out_channels, 1, kernel_size=1)

    def forward(self, images: torch.Tensor):
        h, w = images.shape[-2:]
        feats = self.encoder(images)
        feats = interpolate_features(feats, (h // self.r, w // self.r))
        density = torch.relu(self.regress(feats)).squeeze(-3)
        return None, density


def save_checkpoint(
    model: nn.Module,
    path: str | Path,
    model_cfg: dict,
    config_hash: str = "",
    extra: dict | None = None,
) -> Path:
    """Writes a checkpoint archive plus a JSON metadata sidecar.

    The archive holds everything needed to rebuild the model: weights
    (projection included), the effective logit scale, encoder state, the
    serialized bin policy, and the text bank. The sidecar records the config
    hash and policy for cheap inspection without deserializing tensors.
    """
    path = Path(path)
    kind = "classification" if isinstance(model, ClassificationCounter) else "regression"
    payload = {
        "format_version": 1,
        "kind": kind,
        "model_cfg": model_cfg,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    # Sidecar stays plain JSON: only scalar extras are mirrored there.
    scalar_extra = {
        k: v
        for k, v in (extra or {}).items()
        if isinstance(v, (int, float, str, bool, type(None)))
    }
    meta = {
        "kind": kind,
        "config_hash": config_hash,
        "r": model.r,
        "extra": scalar_extra,
    }
    if isinstance(model, ClassificationCounter):
        if isinstance(model.policy, BinPolicy):
            payload["policy"] = policy_to_config(model.policy)
            meta["policy"] = payload["policy"]
        else:
            payload["policy"] = None
        meta["bank_fingerprint"] = model.bank_fingerprint()
    torch.save(payload, path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuilds a model from :func:`save_checkpoint` output.

    Returns ``(model, metadata)``; the encoder is reconstructed through the
    registry, so adapter encoders must be registered before loading.
    """
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model_cfg = payload["model_cfg"]
    encoder = build_encoder(model_cfg)
    if payload["kind"] == "classification":
        if payload.get("policy") is not None:
            policy = policy_from_config(payload["policy"])
        else:
            values = payload["state_dict"]["bin_values"]
            policy = FixedBinValues(values=tuple(float(v) for v in values))
        bank = TextEmbeddingBank(embeddings=payload["state_dict"]["text_bank"].clone())
        model = ClassificationCounter(
            encoder,
            policy,
            bank,
            r=model_cfg.get("r", 8),
            logit_scale_init=model_cfg.get("logit_scale_init", 1.0),
        )
    else:
        model = RegressionCounter(encoder, r=model_cfg.get("r", 8))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {
        "kind": payload["kind"],
        "policy": payload.get("policy"),
        "extra": payload.get("extra", {}),
        "model_cfg": model_cfg,
    }
    return model, meta
