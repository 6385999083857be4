"""Toy gated recurrent pointmap predictor.

A small numpy transformer that maintains a latent memory of S tokens and, per
frame: encodes the image into patch tokens, computes reset/update gates from
(memory, image tokens), decodes memory against a pose-token-prefixed image
stream, blends old and proposed memory through the update gate, and reads out
per-pixel 3D points, confidences, and a camera pose.

Weights are drawn once from a seeded normal distribution (scale 0.02) and are
never trained here; the module exists to exercise the mechanism
deterministically, with geometry supplied elsewhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Quaternion, SE3Pose
from .pointmaps import ConfidenceMap, PointMap

_INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 32
    state_tokens: int = 16
    heads: int = 4
    blocks: int = 2
    seed: int = 42

    def __post_init__(self):
        for name in ("height", "width", "patch", "dim", "state_tokens", "heads", "blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image size must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


@dataclass
class LatentState:
    """Memory tokens plus a frame counter; passed in and returned by step."""

    tokens: np.ndarray
    frame_count: int = 0

    def copy(self) -> "LatentState":
        return LatentState(self.tokens.copy(), self.frame_count)


@dataclass
class FramePrediction:
    points_self: PointMap
    conf_self: ConfidenceMap
    points_world: PointMap
    conf_world: ConfidenceMap
    pose: SE3Pose


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}_{p}" for p in ("q", "k", "v", "o")]


def _weight_spec(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Tensor names and shapes, in the order the seeded rng fills them."""
    d, p2 = cfg.dim, cfg.patch * cfg.patch
    spec = [
        ("patch_proj", (p2 * 3, d)),
        ("patch_bias", (d,)),
        ("state_init", (cfg.state_tokens, d)),
        ("pose_token", (1, d)),
    ]
    for g in ("reset", "update"):
        spec += [(n, (d, d)) for n in _attn_names(f"{g}_self")]
        spec += [(n, (d, d)) for n in _attn_names(f"{g}_cross")]
        spec += [(f"{g}_mlp_w1", (d, d)), (f"{g}_mlp_b1", (d,)),
                 (f"{g}_mlp_w2", (d, d)), (f"{g}_mlp_b2", (d,))]
    for b in range(cfg.blocks):
        spec += [(n, (d, d)) for n in _attn_names(f"block{b}_mem")]
        spec += [(n, (d, d)) for n in _attn_names(f"block{b}_tok")]
        for stream in ("mem", "tok"):
            spec += [(f"block{b}_{stream}_ffn_w1", (d, 2 * d)),
                     (f"block{b}_{stream}_ffn_b1", (2 * d,)),
                     (f"block{b}_{stream}_ffn_w2", (2 * d, d)),
                     (f"block{b}_{stream}_ffn_b2", (d,))]
    spec += [
        ("self_points_w", (d, p2 * 3)), ("self_points_b", (p2 * 3,)),
        ("self_conf_w", (d, p2)), ("self_conf_b", (p2,)),
        ("world_points_w", (2 * d, p2 * 3)), ("world_points_b", (p2 * 3,)),
        ("world_conf_w", (2 * d, p2)), ("world_conf_b", (p2,)),
        ("pose_w1", (d, d)), ("pose_b1", (d,)),
        ("pose_w2", (d, 7)), ("pose_b2", (7,)),
    ]
    return spec


def init_weights(cfg: ModelConfig) -> dict:
    """Seeded init: matrices ~ N(0, 0.02), bias vectors zero."""
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in _weight_spec(cfg):
        if name.endswith(("_b", "_b1", "_b2", "bias")):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, _INIT_SCALE, shape)
    return weights


def save_weights(path, weights: dict) -> None:
    """JSON header line (names and shapes) followed by the tensors as
    little-endian float64 in header order."""
    header = {"tensors": [{"name": k, "shape": list(v.shape)} for k, v in weights.items()]}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in weights.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        weights = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            weights[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return weights


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    """Fixed transformer-style positional encoding, shape (n, dim)."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((n, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


class GatedRecurrentPredictor:
    """Deterministic recurrent pointmap predictor; weights immutable."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), weights: dict = None):
        self.cfg = cfg
        self.weights = init_weights(cfg) if weights is None else weights
        expected = {n: s for n, s in _weight_spec(cfg)}
        got = {k: v.shape for k, v in self.weights.items()}
        if got != expected:
            raise ValueError("weight dict does not match config")
        self._pos = sinusoidal_encoding(cfg.tokens, cfg.dim)

    # ------------------------------------------------------------ plumbing

    def initial_state(self) -> LatentState:
        return LatentState(self.weights["state_init"].copy(), 0)

    def _attend(self, prefix: str, queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
        w = self.weights
        h = self.cfg.heads
        dh = self.cfg.dim // h
        q = (queries @ w[f"{prefix}_q"]).reshape(-1, h, dh).transpose(1, 0, 2)
        k = (keys @ w[f"{prefix}_k"]).reshape(-1, h, dh).transpose(1, 0, 2)
        v = (keys @ w[f"{prefix}_v"]).reshape(-1, h, dh).transpose(1, 0, 2)
        att = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
        out = (att @ v).transpose(1, 0, 2).reshape(-1, self.cfg.dim)
        return out @ w[f"{prefix}_o"]

    def _ffn(self, prefix: str, x: np.ndarray) -> np.ndarray:
        w = self.weights
        hidden = np.maximum(x @ w[f"{prefix}_w1"] + w[f"{prefix}_b1"], 0.0)
        return hidden @ w[f"{prefix}_w2"] + w[f"{prefix}_b2"]

    # ----------------------------------------------------------- operations

    def encode(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        image = np.asarray(image, dtype=float)
        if image.shape != (cfg.height, cfg.width, 3):
            raise ValueError(f"expected {(cfg.height, cfg.width, 3)} image, got {image.shape}")
        p = cfg.patch
        grid = image.reshape(cfg.height // p, p, cfg.width // p, p, 3)
        patches = grid.transpose(0, 2, 1, 3, 4).reshape(cfg.tokens, p * p * 3)
        return patches @ self.weights["patch_proj"] + self.weights["patch_bias"] + self._pos

    def _gate(self, which: str, state: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        w = self.weights
        x = self._attend(f"{which}_self", state, state)
        x = self._attend(f"{which}_cross", x, tokens)
        x = np.tanh(x @ w[f"{which}_mlp_w1"] + w[f"{which}_mlp_b1"])
        x = x @ w[f"{which}_mlp_w2"] + w[f"{which}_mlp_b2"]
        return 1.0 / (1.0 + np.exp(-x))

    def reset_gate(self, state: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        return self._gate("reset", state, tokens)

    def update_gate(self, state: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        return self._gate("update", state, tokens)

    @staticmethod
    def apply_reset(reset: np.ndarray, state: np.ndarray) -> np.ndarray:
        return reset * state

    @staticmethod
    def gated_update(update: np.ndarray, proposed: np.ndarray, state: np.ndarray) -> np.ndarray:
        return update * proposed + (1.0 - update) * state

    def decode(self, memory: np.ndarray, pose_token: np.ndarray, tokens: np.ndarray):
        """B blocks of bidirectional cross-attention between the memory
        stream and the pose-prefixed image stream, each followed by a
        per-stream feed-forward layer, all with residual connections."""
        mem = memory
        tok = np.vstack([pose_token, tokens])
        for b in range(self.cfg.blocks):
            mem2 = mem + self._attend(f"block{b}_mem", mem, tok)
            tok2 = tok + self._attend(f"block{b}_tok", tok, mem)
            mem = mem2 + self._ffn(f"block{b}_mem_ffn", mem2)
            tok = tok2 + self._ffn(f"block{b}_tok_ffn", tok2)
        return mem, tok[:1], tok[1:]

    def _assemble(self, flat: np.ndarray, channels: int) -> np.ndarray:
        cfg = self.cfg
        p = cfg.patch
        gh, gw = cfg.height // p, cfg.width // p
        grid = flat.reshape(gh, gw, p, p, channels)
        return grid.transpose(0, 2, 1, 3, 4).reshape(cfg.height, cfg.width, channels)

    def head_self(self, tokens_out: np.ndarray) -> tuple[PointMap, ConfidenceMap]:
        w = self.weights
        pts = self._assemble(tokens_out @ w["self_points_w"] + w["self_points_b"], 3)
        raw = self._assemble((tokens_out @ w["self_conf_w"] + w["self_conf_b"])[..., None], 1)
        return PointMap(pts), ConfidenceMap(1.0 + _softplus(raw[..., 0]))

    def head_world(self, tokens_out: np.ndarray, pose_token: np.ndarray):
        w = self.weights
        joint = np.hstack([tokens_out, np.repeat(pose_token, len(tokens_out), axis=0)])
        pts = self._assemble(joint @ w["world_points_w"] + w["world_points_b"], 3)
        raw = self._assemble((joint @ w["world_conf_w"] + w["world_conf_b"])[..., None], 1)
        return PointMap(pts), ConfidenceMap(1.0 + _softplus(raw[..., 0]))

    def head_pose(self, pose_token: np.ndarray) -> SE3Pose:
        w = self.weights
        x = np.tanh(pose_token.reshape(-1) @ w["pose_w1"] + w["pose_b1"])
        out = x @ w["pose_w2"] + w["pose_b2"]
        q = Quaternion(out[0], out[1], out[2], out[3]).normalized()
        return SE3Pose(q, out[4:7])

    def step(self, state: LatentState, image: np.ndarray,
             reset_override: np.ndarray = None,
             update_override: np.ndarray = None) -> tuple[LatentState, FramePrediction]:
        """One recurrent update; pure function of (weights, state, image)."""
        tokens = self.encode(image)
        reset = self.reset_gate(state.tokens, tokens) if reset_override is None \
            else np.broadcast_to(np.asarray(reset_override, dtype=float), state.tokens.shape)
        update = self.update_gate(state.tokens, tokens) if update_override is None \
            else np.broadcast_to(np.asarray(update_override, dtype=float), state.tokens.shape)
        damped = self.apply_reset(reset, state.tokens)
        proposed, z_out, tokens_out = self.decode(damped, self.weights["pose_token"], tokens)
        new_tokens = self.gated_update(update, proposed, state.tokens)
        pts_self, conf_self = self.head_self(tokens_out)
        pts_world, conf_world = self.head_world(tokens_out, z_out)
        pred = FramePrediction(pts_self, conf_self, pts_world, conf_world, self.head_pose(z_out))
        return LatentState(new_tokens, state.frame_count + 1), pred
