"""Natural-language prompts describing each count bin.

One prompt per bin, index-aligned with the policy, fed through a frozen
text encoder exactly once at model construction. Three template rules:

* singleton ``{b}``      -> "There is {b} person" / "There are {b} people"
  (singular iff b <= 1)
* finite range ``{lo..hi}`` -> "There are between {lo} and {hi} people"
* open bin ``[m, inf)``  -> "There are more than {m} people"

The singular zero ("There is 0 person") follows the literal b <= 1 rule;
pass ``natural_zero=True`` for the colloquial plural instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .bins import Bin, BinPolicy
from .head import TextEmbeddingBank

# Generated prompts are tiny; anything near this length indicates a bug
# upstream, long before any real tokenizer's context limit.
MAX_PROMPT_CHARS = 200


@dataclass(frozen=True)
class PromptSet:
    """Ordered prompts, one per bin of the generating policy."""

    prompts: tuple[str, ...]

    def __post_init__(self):
        for p in self.prompts:
            if not p or not p.isascii():
                raise ValueError(f"prompts must be nonempty ASCII, got {p!r}")

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)


def prompt_for_bin(b: Bin, natural_zero: bool = False) -> str:
    if b.unbounded:
        return f"There are more than {b.lo} people"
    if b.singleton:
        value = b.lo
        if value <= 1 and not (natural_zero and value == 0):
            return f"There is {value} person"
        return f"There are {value} people"
    return f"There are between {b.lo} and {b.hi} people"


def build_prompt_set(policy: BinPolicy, natural_zero: bool = False) -> PromptSet:
    """Deterministic prompt per bin; equal policies yield equal prompt sets."""
    return PromptSet(
        prompts=tuple(prompt_for_bin(b, natural_zero) for b in policy.bins)
    )


@runtime_checkable
class TextEncoder(Protocol):
    """A frozen text encoder: fixed output width, deterministic embeddings."""

    dim: int

    def encode(self, prompts: list[str]) -> np.ndarray: ...


class HashTextEncoder:
    """Deterministic stand-in for a pretrained text encoder.

    Each prompt is hashed to seed a PRNG that emits a unit-norm Gaussian
    vector, so distinct prompts map to distinct, reproducible embeddings
    across processes and platforms. Useful for tests and desk-scale
    training; carries no linguistic structure.
    """

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise ValueError(f"embedding width must be >= 2, got {dim}")
        self.dim = dim

    def encode(self, prompts: list[str]) -> np.ndarray:
        out = np.empty((len(prompts), self.dim), dtype=np.float64)
        for i, text in enumerate(prompts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            vec = rng.standard_normal(self.dim)
            out[i] = vec / np.linalg.norm(vec)
        return out.astype(np.float32)


def embed_prompts(ps: PromptSet, text_encoder: TextEncoder) -> TextEmbeddingBank:
    """Embeds a prompt set into a frozen, unit-normalized bank.

    Rows are re-normalized defensively; the bank is computed once per model
    and never trained.
    """
    for p in ps:
        assert len(p) < MAX_PROMPT_CHARS, f"prompt unexpectedly long: {p!r}"
    emb = np.asarray(text_encoder.encode(list(ps)), dtype=np.float32)
    if emb.shape != (len(ps), text_encoder.dim):
        raise ValueError(
            f"encoder returned shape {emb.shape}, expected ({len(ps)}, {text_encoder.dim})"
        )
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("text encoder produced a zero embedding")
    return TextEmbeddingBank.from_array(emb / norms)
