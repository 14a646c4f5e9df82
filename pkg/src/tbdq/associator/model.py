"""The learnable associator: BII interaction, CPA alignment, single-layer decoder."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..core import BOX_EPS, DEFAULT_TEMPERATURE, inverse_sigmoid, sine_embed_t


@dataclass
class AssociatorConfig:
    d_model: int = 64
    n_heads: int = 8
    ffn_dim: int = 128
    tau_q: float = 0.3
    ema_weight: float = 0.7
    use_learned_projections: bool = True
    box_space: str = "logit"  # "logit" (inverse-sigmoid refinement) or "linear"
    noisy_queries: str = "hard"  # "hard" or "zeros"
    noisy_pool: str = "rejected"  # "rejected" or "all"
    temperature: float = DEFAULT_TEMPERATURE
    d_input: Optional[int] = None  # detector feature width, defaults to d_model
    bii_heads: int = 1  # BII attention heads; CPA and the decoder use n_heads
    bii_init_gain: float = 3.0  # 0 keeps PyTorch's default init for BII query/key maps

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.bii_heads < 1 or self.d_model % self.bii_heads != 0:
            raise ValueError("d_model must be divisible by bii_heads")
        if self.bii_init_gain < 0:
            raise ValueError("bii_init_gain must be non-negative")
        if self.d_model % 8 != 0:
            raise ValueError("d_model must be divisible by 8 for box encodings")
        if not 0.0 < self.tau_q < 1.0:
            raise ValueError("tau_q must be in (0, 1)")
        if not 0.0 < self.ema_weight <= 1.0:
            raise ValueError("ema_weight must be in (0, 1]")
        if self.box_space not in ("logit", "linear"):
            raise ValueError(f"unknown box_space {self.box_space!r}")
        if self.noisy_queries not in ("hard", "zeros"):
            raise ValueError(f"unknown noisy_queries {self.noisy_queries!r}")
        if self.noisy_pool not in ("rejected", "all"):
            raise ValueError(f"unknown noisy_pool {self.noisy_pool!r}")

    @property
    def input_dim(self) -> int:
        return self.d_input or self.d_model

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _heads(x: Tensor, h: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(0, 1)


def _merge(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.transpose(0, 1).reshape(n, h * dh)


class FFN(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.linear1 = nn.Linear(d_model, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(F.relu(self.linear1(x)))

    def zero_(self) -> "FFN":
        for p in self.parameters():
            nn.init.zeros_(p)
        return self


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, n_layers: int = 2, zero_last: bool = False):
        super().__init__()
        dims = [d_in] + [hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        if zero_last:
            nn.init.zeros_(self.layers[-1].weight)
            nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class MultiHeadAttention(nn.Module):
    """Plain multi-head attention that also reports its weights."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        h = self.n_heads
        qh, kh, vh = _heads(self.q_proj(q), h), _heads(self.k_proj(k), h), _heads(self.v_proj(v), h)
        w = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(qh.shape[-1]), dim=-1)
        return self.out_proj(_merge(w @ vh)), w


def band_permutation(d_model: int, n_heads: int) -> Tensor:
    """Permutation that gives every head the same frequency band of all four box coordinates.

    Box encodings lay out ``d_model/4`` dims per coordinate as (sin, cos) pairs of
    decreasing frequency. Plain head splitting would hand each head a single
    coordinate; this reordering hands head ``h`` frequency band ``h`` of cx, cy, w, h.
    Falls back to the identity when the sizes do not tile.
    """
    per_coord = d_model // 4
    dh = d_model // n_heads
    if d_model % 4 or per_coord % n_heads or dh % 4:
        return torch.eye(d_model)
    band = per_coord // n_heads  # dims of one coordinate inside one head
    perm = torch.zeros(d_model, d_model)
    for h in range(n_heads):
        for c in range(4):
            for j in range(band):
                perm[h * dh + c * band + j, c * per_coord + h * band + j] = 1.0
    return perm


class BII(nn.Module):
    """Attention with separate aggregated (``v1``) and residual (``v2``) value streams.

    ``O1 = softmax(Q K^T / sqrt(d)) V1``, ``O2 = norm(O1 + V2)``,
    ``O3 = norm(FFN(O2) + O2)``. With ``learned_projections`` the usual
    Q/K/V/output maps and head splitting are applied around the softmax.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int = 8,
        ffn_dim: int = 128,
        learned_projections: bool = True,
        layer_norm: bool = True,
        identity_init: bool = False,
        band_init_gain: float = 0.0,
    ):
        super().__init__()
        self.d_model = d_model
        self.learned_projections = learned_projections
        self.n_heads = n_heads if learned_projections else 1
        if learned_projections:
            self.q_proj = nn.Linear(d_model, d_model)
            self.k_proj = nn.Linear(d_model, d_model)
            self.v_proj = nn.Linear(d_model, d_model)
            self.out_proj = nn.Linear(d_model, d_model)
            if identity_init:
                for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
                    nn.init.eye_(lin.weight)
                    nn.init.zeros_(lin.bias)
            elif band_init_gain > 0:
                perm = band_permutation(d_model, self.n_heads)
                with torch.no_grad():
                    for lin in (self.q_proj, self.k_proj):
                        lin.weight.copy_(band_init_gain * perm)
                        lin.bias.zero_()
        self.ffn = FFN(d_model, ffn_dim)
        self.norm1 = nn.LayerNorm(d_model) if layer_norm else nn.Identity()
        self.norm2 = nn.LayerNorm(d_model) if layer_norm else nn.Identity()
        self.last_weights: Optional[Tensor] = None

    def forward(self, q: Tensor, k: Tensor, v1: Tensor, v2: Tensor) -> Tensor:
        return self.attend(q, k, v1, v2)[0]

    def attend(self, q: Tensor, k: Tensor, v1: Tensor, v2: Tensor) -> tuple[Tensor, Tensor]:
        """Like ``forward`` but also returns the per-head attention weights (with grad)."""
        if k.shape[0] != v1.shape[0]:
            raise ValueError(f"K has {k.shape[0]} rows but V1 has {v1.shape[0]}")
        if q.shape[0] != v2.shape[0]:
            raise ValueError(f"Q has {q.shape[0]} rows but V2 has {v2.shape[0]}")
        for name, x in (("Q", q), ("K", k), ("V1", v1), ("V2", v2)):
            if x.dim() != 2 or x.shape[1] != self.d_model:
                raise ValueError(f"{name} must be (n, {self.d_model}), got {tuple(x.shape)}")
        if q.shape[0] == 0:
            self.last_weights = q.new_zeros((self.n_heads, 0, k.shape[0]))
            return q.new_zeros((0, self.d_model)), self.last_weights
        if k.shape[0] == 0:
            raise ValueError("BII needs at least one key")
        if self.learned_projections:
            q, k, v1 = self.q_proj(q), self.k_proj(k), self.v_proj(v1)
        h = self.n_heads
        qh, kh, vh = _heads(q, h), _heads(k, h), _heads(v1, h)
        w = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(qh.shape[-1]), dim=-1)
        self.last_weights = w.detach()
        o1 = _merge(w @ vh)
        if self.learned_projections:
            o1 = self.out_proj(o1)
        o2 = self.norm1(o1 + v2)
        return self.norm2(self.ffn(o2) + o2), w


class CPA(nn.Module):
    """Modulated cross-attention over global features followed by a box update.

    Attention logits combine a content term and a positional term whose query
    side is the sine encoding of the box centre, scaled per query by a
    content-conditioned transform and modulated by reference width/height.
    """

    def __init__(
        self, d_model: int, n_heads: int, ffn_dim: int, temperature: float, box_space: str = "logit", hint_dim: int = 0
    ):
        super().__init__()
        self.d_model = d_model
        self.hint_dim = hint_dim
        self.n_heads = n_heads
        self.temperature = temperature
        self.box_space = box_space
        self.q_content = nn.Linear(d_model, d_model)
        self.k_content = nn.Linear(d_model, d_model)
        self.k_pos = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.query_scale = MLP(d_model, d_model, d_model, 2)
        self.ref_hw = MLP(d_model, d_model, 2, 2)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, ffn_dim)
        self.norm2 = nn.LayerNorm(d_model)
        self.delta = MLP(2 * d_model + hint_dim, d_model, 4, 2, zero_last=True)
        if hint_dim:
            # starts as the head-average of the pooled offsets
            self.hint_proj = nn.Linear(hint_dim, 4)
            with torch.no_grad():
                self.hint_proj.weight.copy_(torch.eye(4).repeat(1, hint_dim // 4) / (hint_dim // 4))
                self.hint_proj.bias.zero_()
        self.last_weights: Optional[Tensor] = None

    def forward(
        self, content: Tensor, boxes: Tensor, memory: Tensor, memory_pos: Tensor, hints: Optional[Tensor] = None
    ) -> tuple[Tensor, Tensor]:
        n, d = content.shape[0], self.d_model
        if n == 0:
            self.last_weights = content.new_zeros((self.n_heads, 0, memory.shape[0]))
            return content.new_zeros((0, d)), boxes.new_zeros((0, 4))
        half = d // 2
        pos = sine_embed_t(boxes[:, :2], d, self.temperature)
        ref = torch.sigmoid(self.ref_hw(content))
        modulate = torch.cat(
            [(ref[:, :1] / boxes[:, 2:3]).expand(n, half), (ref[:, 1:] / boxes[:, 3:4]).expand(n, half)], dim=1
        )
        q_pos = pos * self.query_scale(content) * modulate
        h = self.n_heads
        qc, kc = _heads(self.q_content(content), h), _heads(self.k_content(memory), h)
        qp, kp = _heads(q_pos, h), _heads(self.k_pos(memory_pos), h)
        logits = (qc @ kc.transpose(1, 2) + qp @ kp.transpose(1, 2)) / math.sqrt(2 * qc.shape[-1])
        w = torch.softmax(logits, dim=-1)
        self.last_weights = w.detach()
        attended = self.out_proj(_merge(w @ _heads(self.value(memory), h)))
        x = self.norm1(content + attended)
        x = self.norm2(x + self.ffn(x))
        head_in = [x, sine_embed_t(boxes, d, self.temperature)]
        if self.hint_dim:
            if hints is None or hints.shape != (n, self.hint_dim):
                raise ValueError(f"CPA expects hints of shape ({n}, {self.hint_dim})")
            head_in.append(hints)
        delta = self.delta(torch.cat(head_in, dim=1))
        if self.hint_dim:
            delta = delta + self.hint_proj(hints)
        return x, refine_boxes(boxes, delta, self.box_space)


def pooled_offsets(weights: Tensor, det_boxes: Tensor, boxes: Tensor) -> Tensor:
    """Per-head detection boxes pooled by attention, as logit offsets from each query's box.

    ``weights`` is ``(h, n, m)`` with the detection keys in the first columns; the
    weights are renormalized over those columns. The result is ``(n, 4h)``.
    """
    n_d = det_boxes.shape[0]
    if n_d == 0:
        return boxes.new_zeros((boxes.shape[0], 4 * weights.shape[0]))
    w = weights[:, :, :n_d]
    w = w / w.sum(-1, keepdim=True).clamp_min(1e-12)
    pooled = (w @ det_boxes).clamp(BOX_EPS, 1 - BOX_EPS)
    off = inverse_sigmoid(pooled) - inverse_sigmoid(boxes)[None]
    return off.transpose(0, 1).reshape(boxes.shape[0], 4 * weights.shape[0])


def refine_boxes(boxes: Tensor, delta: Tensor, box_space: str) -> Tensor:
    if box_space == "logit":
        return torch.sigmoid(delta + inverse_sigmoid(boxes))
    return (boxes + delta).clamp(1e-5, 1 - 1e-5)


class DecoderLayer(nn.Module):
    """Self-attention over all queries, cross-attention to global features, FFN, heads."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, temperature: float, box_space: str = "logit"):
        super().__init__()
        self.d_model = d_model
        self.temperature = temperature
        self.box_space = box_space
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.query_pos = MLP(d_model, d_model, d_model, 2)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, ffn_dim)
        self.norm3 = nn.LayerNorm(d_model)
        self.score_head = nn.Linear(d_model, 1)
        self.box_head = MLP(2 * d_model, d_model, 4, 3, zero_last=True)
        nn.init.constant_(self.score_head.bias, -math.log((1 - 0.01) / 0.01))
        self.last_weights: dict[str, Tensor] = {}

    def forward(self, content: Tensor, boxes: Tensor, memory: Tensor, memory_pos: Tensor):
        if content.shape[0] == 0:
            z = content.new_zeros((0,))
            return z, boxes.new_zeros((0, 4)), content.new_zeros((0, self.d_model))
        pos = sine_embed_t(boxes, self.d_model, self.temperature)
        qk = content + pos
        sa, w_self = self.self_attn(qk, qk, content)
        x = self.norm1(content + sa)
        ca, w_cross = self.cross_attn(x + self.query_pos(pos), memory + memory_pos, memory)
        x = self.norm2(x + ca)
        x = self.norm3(x + self.ffn(x))
        self.last_weights = {"self": w_self.detach(), "cross": w_cross.detach()}
        logits = self.score_head(x).squeeze(-1)
        out_boxes = refine_boxes(boxes, self.box_head(torch.cat([x, pos], dim=1)), self.box_space)
        return logits, out_boxes, x


@dataclass
class FrameOutput:
    logits: Tensor
    boxes: Tensor
    embeddings: Tensor
    n_tracks: int
    aux_logits: Optional[Tensor] = None
    aux_boxes: Optional[Tensor] = None
    attention: dict = field(default_factory=dict)

    @property
    def scores(self) -> Tensor:
        return torch.sigmoid(self.logits)


class Associator(nn.Module):
    """Per-frame associator. Track queries come first in every output."""

    def __init__(self, cfg: AssociatorConfig, literal_bii: bool = False):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.det_input = nn.Sequential(nn.Linear(cfg.input_dim, d), nn.LayerNorm(d))
        self.mem_input = nn.Sequential(nn.Linear(cfg.input_dim, d), nn.LayerNorm(d))
        self.mem_pos = nn.Linear(cfg.input_dim, d)
        bii_kwargs = dict(
            n_heads=cfg.bii_heads,
            ffn_dim=cfg.ffn_dim,
            learned_projections=cfg.use_learned_projections and not literal_bii,
            layer_norm=not literal_bii,
            band_init_gain=cfg.bii_init_gain,
        )
        # separate parameter sets for the two update directions
        self.bii_det = BII(d, **bii_kwargs)
        self.bii_track = BII(d, **bii_kwargs)
        if literal_bii:
            self.bii_det.ffn.zero_()
            self.bii_track.ffn.zero_()
        self.cpa = CPA(d, cfg.n_heads, cfg.ffn_dim, cfg.temperature, cfg.box_space, hint_dim=4 * self.bii_det.n_heads)
        self.aux_score = nn.Linear(d, 1)
        nn.init.constant_(self.aux_score.bias, -math.log((1 - 0.01) / 0.01))
        self.decoder = DecoderLayer(d, cfg.n_heads, cfg.ffn_dim, cfg.temperature, cfg.box_space)

    def position(self, boxes: Tensor) -> Tensor:
        return sine_embed_t(boxes, self.cfg.d_model, self.cfg.temperature)

    def embed_detections(self, raw: Tensor) -> Tensor:
        return self.det_input(raw) if raw.shape[0] else raw.new_zeros((0, self.cfg.d_model))

    def noisy_values(self, noisy_raw: Tensor, m: int) -> Tensor:
        """Project the available hard negatives and zero-pad to ``m`` rows."""
        d = self.cfg.d_model
        rows = noisy_raw[:m]
        if self.cfg.noisy_queries == "zeros" or rows.shape[0] == 0:
            return noisy_raw.new_zeros((m, d))
        emb = self.det_input(rows)
        if emb.shape[0] < m:
            emb = torch.cat([emb, emb.new_zeros((m - emb.shape[0], d))], dim=0)
        return emb

    def update_detections(
        self, det: Tensor, det_boxes: Tensor, tracks: Tensor, track_boxes: Tensor, noisy: Tensor
    ) -> tuple[Tensor, Tensor]:
        """Updated detection contents and their pooled key-box offsets."""
        if noisy.shape[0] != tracks.shape[0]:
            raise ValueError("need exactly one noisy row per track query")
        d_full = det + self.position(det_boxes)
        t_full = tracks + self.position(track_boxes)
        out, w = self.bii_det.attend(d_full, torch.cat([d_full, t_full]), torch.cat([det, noisy]), det)
        return out, pooled_offsets(w, det_boxes, det_boxes)

    def update_tracks(
        self, tracks: Tensor, track_boxes: Tensor, history: Tensor, det: Tensor, det_boxes: Tensor
    ) -> tuple[Tensor, Tensor]:
        t_pos = self.position(track_boxes)
        d_full = det + self.position(det_boxes)
        # history shares the track's positional part
        k = torch.cat([d_full, history + t_pos])
        out, w = self.bii_track.attend(tracks + t_pos, k, torch.cat([det, history]), tracks)
        return out, pooled_offsets(w, det_boxes, track_boxes)

    def encode_memory(self, features: Tensor, positions: Tensor) -> tuple[Tensor, Tensor]:
        return self.mem_input(features), self.mem_pos(positions)

    def forward_frame(
        self,
        det_raw: Tensor,
        det_boxes: Tensor,
        track_content: Tensor,
        track_boxes: Tensor,
        track_history: Tensor,
        noisy_raw: Tensor,
        features: Tensor,
        positions: Tensor,
    ) -> FrameOutput:
        n_t = track_content.shape[0]
        memory, memory_pos = self.encode_memory(features, positions)
        det = self.embed_detections(det_raw)
        if n_t == 0:
            # nothing to interact with yet: decode detections directly
            logits, boxes, emb = self.decoder(det, det_boxes, memory, memory_pos)
            return FrameOutput(logits, boxes, emb, 0, attention=self._attention(first=True))
        noisy = self.noisy_values(noisy_raw, n_t)
        new_det, det_hints = self.update_detections(det, det_boxes, track_content, track_boxes, noisy)
        new_tracks, track_hints = self.update_tracks(track_content, track_boxes, track_history, det, det_boxes)
        content = torch.cat([new_tracks, new_det])
        ref = torch.cat([track_boxes, det_boxes])
        hints = torch.cat([track_hints, det_hints])
        aligned, aligned_boxes = self.cpa(content, ref, memory, memory_pos, hints)
        aux_logits = self.aux_score(aligned).squeeze(-1)
        logits, boxes, emb = self.decoder(aligned, aligned_boxes, memory, memory_pos)
        return FrameOutput(logits, boxes, emb, n_t, aux_logits, aligned_boxes, self._attention(first=False))

    def _attention(self, first: bool) -> dict:
        out = {"decoder_self": self.decoder.last_weights.get("self"), "decoder_cross": self.decoder.last_weights.get("cross")}
        if not first:
            out.update(bii_det=self.bii_det.last_weights, bii_track=self.bii_track.last_weights, cpa=self.cpa.last_weights)
        return out


def save_checkpoint(model: Associator, path, extra: Optional[dict] = None) -> None:
    payload = {
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
        "config": asdict(model.cfg),
        "fingerprint": model.cfg.fingerprint(),
        "extra": extra or {},
    }
    torch.save(payload, path)


class FingerprintMismatch(ValueError):
    pass


def load_checkpoint(path, expected: Optional[AssociatorConfig] = None) -> tuple[Associator, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = AssociatorConfig(**payload["config"])
    if cfg.fingerprint() != payload["fingerprint"]:
        raise FingerprintMismatch("checkpoint config does not match its stored fingerprint")
    if expected is not None and expected.fingerprint() != payload["fingerprint"]:
        raise FingerprintMismatch(f"checkpoint fingerprint {payload['fingerprint']} != expected {expected.fingerprint()}")
    model = Associator(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
