"""Early fusion of prompt and feature streams via gated cross-attention.

A fusion layer runs, in order: residual self-attention on each stream,
then three residual cross-attention pathways computed from the
post-self-attention snapshot (text updated from features, visual
updated from features, features updated from visual prompts), then a
residual feed-forward block per stream.  Every cross-attention appends
a learnable background vector as an extra key/value row so that a query
dissimilar to all keys attends to the background instead of
reconstructing its nearest key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numeric import seeded_rng, softmax_rows

STREAMS = ("features", "text", "visual")

# Pathway name -> (query stream, key/value stream); the name is the
# stream being updated.
PATHWAYS = {
    "text": ("text", "features"),
    "visual": ("visual", "features"),
    "features": ("features", "visual"),
}
PATHWAY_ORDER = ("text", "visual", "features")


def gated_attn(q, k, v, background, d_k: int):
    """Scaled dot-product attention with a background key/value row.

    The background vector is appended as one extra row to both keys and
    values; logits are scaled by 1/sqrt(d_k) and softmaxed per query
    row.  Returns ``(output, background_weight)`` where the second item
    is the softmax mass each query assigned to the background row.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(background, dtype=np.float64)
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key/value row mismatch: {k.shape[0]} vs {v.shape[0]}")
    if k.shape[0] == 0:
        raise ValueError("gated attention requires at least one key row")
    if d_k <= 0:
        raise ValueError("d_k must be positive")
    keys = np.vstack([k, b])
    values = np.vstack([v, b])
    logits = (q @ keys.T) / np.sqrt(float(d_k))
    weights = softmax_rows(logits)
    return weights @ values, weights[:, -1]


def _plain_attn(q, k, v, d_k: int):
    logits = (q @ k.T) / np.sqrt(float(d_k))
    return softmax_rows(logits) @ v


@dataclass(frozen=True)
class AttnWeights:
    """Query/key/value/output projections of one attention block."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def seeded(cls, dim: int, rng, scale: float) -> "AttnWeights":
        return cls(*(scale * rng.standard_normal((dim, dim)) for _ in range(4)))

    @classmethod
    def zeros(cls, dim: int) -> "AttnWeights":
        return cls(*(np.zeros((dim, dim)) for _ in range(4)))


@dataclass(frozen=True)
class FfnWeights:
    """Two-layer feed-forward block with ReLU."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def seeded(cls, dim: int, hidden: int, rng, scale: float) -> "FfnWeights":
        return cls(
            w1=scale * rng.standard_normal((dim, hidden)),
            b1=np.zeros(hidden),
            w2=scale * rng.standard_normal((hidden, dim)),
            b2=np.zeros(dim),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "FfnWeights":
        return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2


@dataclass(frozen=True)
class FusionParams:
    """One fusion layer's weights.

    ``background_token`` has shape (d,) when shared across pathways, or
    (3, d) with one row per pathway in PATHWAY_ORDER when
    ``per_pathway_background`` is set.
    """

    d_k: int
    background_token: np.ndarray
    self_attn: Mapping[str, AttnWeights]
    cross_attn: Mapping[str, AttnWeights]
    ffn: Mapping[str, FfnWeights]
    per_pathway_background: bool = False

    def __post_init__(self):
        if self.d_k <= 0:
            raise ValueError("d_k must be positive")
        b = np.asarray(self.background_token, dtype=np.float64)
        if not np.all(np.isfinite(b)):
            raise ValueError("background token must be finite")
        if self.per_pathway_background:
            if b.ndim != 2 or b.shape[0] != len(PATHWAY_ORDER):
                raise ValueError(
                    f"per-pathway background needs shape (3, d), got {b.shape}"
                )
        elif b.ndim != 1:
            raise ValueError(f"shared background token must be 1-D, got {b.shape}")
        for name in STREAMS:
            if name not in self.self_attn or name not in self.ffn:
                raise ValueError(f"missing self-attention or FFN weights for stream {name!r}")
        for name in PATHWAY_ORDER:
            if name not in self.cross_attn:
                raise ValueError(f"missing cross-attention weights for pathway {name!r}")

    def background_for(self, pathway: str) -> np.ndarray:
        b = np.asarray(self.background_token, dtype=np.float64)
        if self.per_pathway_background:
            return b[PATHWAY_ORDER.index(pathway)]
        return b

    @classmethod
    def seeded(cls, dim: int, seed: int, d_k: int | None = None, hidden: int | None = None,
               scale: float = 0.2, per_pathway_background: bool = False) -> "FusionParams":
        rng = seeded_rng(seed)
        d_k = d_k or dim
        hidden = hidden or 2 * dim
        background = (
            rng.standard_normal((len(PATHWAY_ORDER), dim))
            if per_pathway_background
            else rng.standard_normal(dim)
        )
        return cls(
            d_k=d_k,
            background_token=background,
            self_attn={s: AttnWeights.seeded(dim, rng, scale) for s in STREAMS},
            cross_attn={p: AttnWeights.seeded(dim, rng, scale) for p in PATHWAY_ORDER},
            ffn={s: FfnWeights.seeded(dim, hidden, rng, scale) for s in STREAMS},
            per_pathway_background=per_pathway_background,
        )

    @classmethod
    def zero_update(cls, dim: int, background=None, d_k: int | None = None) -> "FusionParams":
        """All projections zero: fusion_layer becomes the identity."""
        b = np.zeros(dim) if background is None else np.asarray(background, dtype=np.float64)
        return cls(
            d_k=d_k or dim,
            background_token=b,
            self_attn={s: AttnWeights.zeros(dim) for s in STREAMS},
            cross_attn={p: AttnWeights.zeros(dim) for p in PATHWAY_ORDER},
            ffn={s: FfnWeights.zeros(dim, 2 * dim) for s in STREAMS},
        )


@dataclass(frozen=True)
class FusionState:
    """Token matrices of the three streams; all share one feature dim."""

    features: np.ndarray
    text: np.ndarray
    visual: np.ndarray

    def __post_init__(self):
        dims = set()
        for name in STREAMS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} stream must be 2-D, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} stream contains non-finite entries")
            dims.add(arr.shape[1])
            object.__setattr__(self, name, arr)
        if len(dims) != 1:
            raise ValueError(f"streams disagree on feature dim: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def counts(self) -> dict:
        return {name: int(getattr(self, name).shape[0]) for name in STREAMS}

    @classmethod
    def seeded(cls, dim: int, n_features: int, n_text: int, n_visual: int, seed: int) -> "FusionState":
        rng = seeded_rng(seed)
        return cls(
            features=rng.standard_normal((n_features, dim)),
            text=rng.standard_normal((n_text, dim)),
            visual=rng.standard_normal((n_visual, dim)),
        )


def _self_attended(state: FusionState, params: FusionParams) -> dict:
    snapshot = {}
    for name in STREAMS:
        x = getattr(state, name)
        if x.shape[0] == 0:
            snapshot[name] = x
            continue
        w = params.self_attn[name]
        update = _plain_attn(x @ w.wq, x @ w.wk, x @ w.wv, params.d_k) @ w.wo
        snapshot[name] = x + update
    return snapshot


def _pathway_updates(snapshot: dict, params: FusionParams) -> tuple[dict, dict]:
    """Cross-attention updates and background weights per runnable pathway."""
    updates = {}
    bg_weights = {}
    for pathway in PATHWAY_ORDER:
        q_name, kv_name = PATHWAYS[pathway]
        q_tokens = snapshot[q_name]
        kv_tokens = snapshot[kv_name]
        if q_tokens.shape[0] == 0 or kv_tokens.shape[0] == 0:
            continue
        w = params.cross_attn[pathway]
        out, bg = gated_attn(
            q_tokens @ w.wq,
            kv_tokens @ w.wk,
            kv_tokens @ w.wv,
            params.background_for(pathway),
            params.d_k,
        )
        updates[pathway] = out @ w.wo
        bg_weights[pathway] = bg
    return updates, bg_weights


def fusion_layer(state: FusionState, params: FusionParams) -> FusionState:
    """Apply one early-fusion layer; token counts and dims are preserved.

    Pathways whose query or key stream is empty are skipped, leaving
    the remaining pathways identical to a run without that stream.
    """
    if np.asarray(params.background_token).shape[-1] != state.dim:
        raise ValueError(
            f"background token dim {np.asarray(params.background_token).shape[-1]} "
            f"!= state dim {state.dim}"
        )
    snapshot = _self_attended(state, params)
    updates, _ = _pathway_updates(snapshot, params)
    streams = dict(snapshot)
    for pathway, update in updates.items():
        streams[pathway] = snapshot[pathway] + update
    for name in STREAMS:
        x = streams[name]
        if x.shape[0] == 0:
            continue
        streams[name] = x + params.ffn[name].apply(x)
    return FusionState(**streams)


def background_activation_stats(state: FusionState, params: FusionParams) -> dict:
    """Mean/max background attention mass per pathway for one layer.

    Pathways skipped for empty streams are omitted from the result.
    """
    snapshot = _self_attended(state, params)
    _, bg_weights = _pathway_updates(snapshot, params)
    return {
        pathway: {"mean": float(w.mean()), "max": float(w.max())}
        for pathway, w in bg_weights.items()
    }
