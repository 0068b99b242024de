"""Transformer speaker: bidirectional multimodal encoder over prompt tokens
plus region slots, autoregressive decoder, greedy/sampling/beam decoding.

Region slot i embeds as the SUM of projected attribute one-hots, projected
normalized box coordinates, and the <vis_i> sentinel token embedding; slots
carry no positional encoding, so identity travels with the sentinel id.
The decoder's event space bans <pad>/<bos> everywhere and <eos> at the first
step, so every generated expression is nonempty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigurationError
from .metrics import Expression
from .storage import load_checkpoint, save_checkpoint
from .vocab import Vocabulary
from .world import Scene

NEG = -1e9

STAGES = ("base", "mmi", "reinforced", "ireg")


@dataclass(frozen=True)
class SpeakerDims:
    enc_layers: int = 2
    dec_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    max_len: int = 12
    max_prompt_len: int = 32

    def to_json(self) -> dict:
        return {
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn": self.ffn,
            "max_len": self.max_len,
            "max_prompt_len": self.max_prompt_len,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SpeakerDims":
        return cls(**data)


@dataclass(frozen=True)
class RegionFeature:
    """One encoder region slot: attribute one-hot, normalized box, sentinel id."""

    attributes: tuple[float, ...]
    box: tuple[float, float, float, float, float]  # x_min, y_min, x_max, y_max, rel area
    region_id: int
    padding: bool = False


@dataclass
class GenerationResult:
    tokens: Expression
    log_prob: float
    truncated: bool = False


def build_reg_prompt(vocab: Vocabulary, target_slot: int) -> tuple[str, ...]:
    """Generation instruction addressing the target region sentinel."""
    if target_slot != vocab.target_slot:
        raise ValueError(f"target slot must be {vocab.target_slot}, got {target_slot}")
    return ("caption", "region:", vocab.sentinel_token(target_slot))


def build_refine_prompt(
    vocab: Vocabulary, prev_expr: Sequence[str], target_slot: int, pred_slot: int
) -> tuple[str, ...]:
    """Refinement instruction: previous expression plus the wrongly located
    region sentinel and a fix-it request."""
    if not prev_expr:
        raise ValueError("previous expression must be nonempty")
    if target_slot != vocab.target_slot:
        raise ValueError(f"target slot must be {vocab.target_slot}, got {target_slot}")
    if pred_slot != vocab.predicted_slot:
        raise ValueError(f"predicted slot must be {vocab.predicted_slot}, got {pred_slot}")
    return (
        ("caption", "region:", vocab.sentinel_token(target_slot))
        + tuple(prev_expr)
        + ("incorrectly", "located", "as:", vocab.sentinel_token(pred_slot))
        + ("please", "refine", "it.")
    )


def attribute_onehot(scene: Scene, obj_index: int) -> tuple[float, ...]:
    obj = scene.objects[obj_index]
    vec = [0.0] * (len(scene.categories) + len(scene.colors) + len(scene.sizes))
    vec[scene.categories.index(obj.category)] = 1.0
    offset = len(scene.categories)
    vec[offset + scene.colors.index(obj.color)] = 1.0
    offset += len(scene.colors)
    vec[offset + scene.sizes.index(obj.size)] = 1.0
    return tuple(vec)


def _box_features(scene: Scene, obj_index: int) -> tuple[float, float, float, float, float]:
    b = scene.objects[obj_index].bbox
    w, h = float(scene.width), float(scene.height)
    return (b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h, b.area / (w * h))


def region_features(
    scene: Scene, target_index: int, n_regions: int, pred_index: int | None = None
) -> list[RegionFeature]:
    """Slot layout: objects 0..K-1, padding to n_regions, target copy at slot
    n_regions, predicted-region copy at slot n_regions+1 in refine mode."""
    if len(scene.objects) > n_regions:
        raise ValueError(f"scene has {len(scene.objects)} objects but only {n_regions} slots")
    if not 0 <= target_index < len(scene.objects):
        raise ValueError(f"target index {target_index} out of range")
    attr_dim = len(scene.categories) + len(scene.colors) + len(scene.sizes)
    zero = (0.0,) * attr_dim
    slots = []
    for i in range(n_regions):
        if i < len(scene.objects):
            slots.append(RegionFeature(attribute_onehot(scene, i), _box_features(scene, i), i))
        else:
            slots.append(RegionFeature(zero, (0.0,) * 5, i, padding=True))
    slots.append(RegionFeature(attribute_onehot(scene, target_index), _box_features(scene, target_index), n_regions))
    if pred_index is not None:
        if not 0 <= pred_index < len(scene.objects):
            raise ValueError(f"predicted index {pred_index} out of range")
        slots.append(
            RegionFeature(attribute_onehot(scene, pred_index), _box_features(scene, pred_index), n_regions + 1)
        )
    return slots


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads != 0:
            raise ConfigurationError("hidden size must be divisible by head count")
        self.heads = heads
        self.head_dim = hidden // heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, query: Tensor, keyval: Tensor, attn_mask: Tensor | None = None,
                key_padding_mask: Tensor | None = None) -> Tensor:
        b, tq, _ = query.shape
        tk = keyval.shape[1]

        def split(x, t):
            return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q(query), tq)
        k = split(self.k(keyval), tk)
        v = split(self.v(keyval), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:  # True marks padding keys
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], NEG)
        if attn_mask is not None:  # True marks blocked pairs, [tq, tk]
            scores = scores.masked_fill(attn_mask[None, None, :, :], NEG)
        weights = torch.softmax(scores, dim=-1)
        merged = (weights @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out(merged)


class _FeedForward(nn.Module):
    def __init__(self, hidden: int, ffn: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden, ffn), nn.ReLU(), nn.Linear(ffn, hidden))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class EncoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn: int):
        super().__init__()
        self.attn = MultiHeadAttention(hidden, heads)
        self.ffn = _FeedForward(hidden, ffn)
        self.ln1 = nn.LayerNorm(hidden)
        self.ln2 = nn.LayerNorm(hidden)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None) -> Tensor:
        x = self.ln1(x + self.attn(x, x, key_padding_mask=key_padding_mask))
        return self.ln2(x + self.ffn(x))


class DecoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(hidden, heads)
        self.cross_attn = MultiHeadAttention(hidden, heads)
        self.ffn = _FeedForward(hidden, ffn)
        self.ln1 = nn.LayerNorm(hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.ln3 = nn.LayerNorm(hidden)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: Tensor,
                memory_padding_mask: Tensor | None) -> Tensor:
        x = self.ln1(x + self.self_attn(x, x, attn_mask=causal_mask))
        x = self.ln2(x + self.cross_attn(x, memory, key_padding_mask=memory_padding_mask))
        return self.ln3(x + self.ffn(x))


class Speaker(nn.Module):
    """Referring-expression generator over (prompt, region slots)."""

    def __init__(
        self,
        vocab: Vocabulary,
        dims: SpeakerDims = SpeakerDims(),
        stage: str = "base",
        dtype: torch.dtype = torch.float32,
        init_seed: int = 0,
    ):
        super().__init__()
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        torch.manual_seed(init_seed)
        self.vocab = vocab
        self.dims = dims
        self.stage = stage
        self.attr_dim = len(vocab.categories) + len(vocab.colors) + len(vocab.sizes)
        h = dims.hidden
        self.tok_emb = nn.Embedding(len(vocab), h)
        self.prompt_pos = nn.Embedding(dims.max_prompt_len, h)
        self.dec_pos = nn.Embedding(dims.max_len + 1, h)
        self.attr_proj = nn.Linear(self.attr_dim, h)
        self.box_proj = nn.Linear(5, h)
        self.enc_blocks = nn.ModuleList(EncoderBlock(h, dims.heads, dims.ffn) for _ in range(dims.enc_layers))
        self.dec_blocks = nn.ModuleList(DecoderBlock(h, dims.heads, dims.ffn) for _ in range(dims.dec_layers))
        self.lm_head = nn.Linear(h, len(vocab))
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.lm_head.weight.dtype

    def advance_stage(self, new_stage: str) -> None:
        if new_stage not in STAGES:
            raise ValueError(f"unknown stage {new_stage!r}")
        if STAGES.index(new_stage) <= STAGES.index(self.stage):
            raise ValueError(f"stage may only move forward, not {self.stage} -> {new_stage}")
        self.stage = new_stage

    # --- encoding -----------------------------------------------------------

    def _region_tensors(self, batch_features: Sequence[Sequence[RegionFeature]]):
        n_slots = len(batch_features[0])
        if any(len(f) != n_slots for f in batch_features):
            raise ValueError("mixed slot counts in one batch")
        attrs = torch.tensor(
            [[f.attributes for f in feats] for feats in batch_features], dtype=self.dtype
        )
        boxes = torch.tensor([[f.box for f in feats] for feats in batch_features], dtype=self.dtype)
        slot_ids = torch.tensor(
            [[self.vocab.sentinel_id(f.region_id) for f in feats] for feats in batch_features],
            dtype=torch.long,
        )
        pad = torch.tensor([[f.padding for f in feats] for feats in batch_features], dtype=torch.bool)
        return attrs, boxes, slot_ids, pad

    def _prompt_tensors(self, prompts: Sequence[Sequence[str]]):
        ids = [self.vocab.encode(p) for p in prompts]
        longest = max(len(p) for p in ids)
        if longest > self.dims.max_prompt_len:
            raise ValueError(f"prompt length {longest} exceeds {self.dims.max_prompt_len}")
        pad_id = self.vocab.pad_id
        padded = torch.tensor([p + [pad_id] * (longest - len(p)) for p in ids], dtype=torch.long)
        mask = torch.tensor([[False] * len(p) + [True] * (longest - len(p)) for p in ids], dtype=torch.bool)
        return padded, mask

    def encode_batch(
        self, prompts: Sequence[Sequence[str]], batch_features: Sequence[Sequence[RegionFeature]]
    ) -> tuple[Tensor, Tensor]:
        """Joint contextual states over [prompt tokens | region slots].

        Returns (memory [B, P+S, h], padding mask [B, P+S])."""
        if len(prompts) != len(batch_features):
            raise ValueError("prompt/feature batch size mismatch")
        prompt_ids, prompt_pad = self._prompt_tensors(prompts)
        attrs, boxes, slot_ids, slot_pad = self._region_tensors(batch_features)
        p = self.tok_emb(prompt_ids) + self.prompt_pos(torch.arange(prompt_ids.shape[1]))
        p = p.masked_fill(prompt_pad[:, :, None], 0.0)
        # region slot embedding: sum of the three projected parts, no position
        r = self.attr_proj(attrs) + self.box_proj(boxes) + self.tok_emb(slot_ids)
        x = torch.cat([p, r], dim=1)
        pad = torch.cat([prompt_pad, slot_pad], dim=1)
        for block in self.enc_blocks:
            x = block(x, pad)
        return x, pad

    def encode(self, prompt_tokens: Sequence[str], features: Sequence[RegionFeature]) -> Tensor:
        """Single-item joint states, shape [len(prompt) + slots, hidden]."""
        memory, _ = self.encode_batch([tuple(prompt_tokens)], [list(features)])
        return memory[0]

    # --- scoring --------------------------------------------------------------

    def _ban_value_mask(self, n_rows: int) -> Tensor:
        """True where a token is banned at a decode row (row 0 = first token)."""
        mask = torch.zeros(n_rows, len(self.vocab), dtype=torch.bool)
        mask[:, self.vocab.pad_id] = True
        mask[:, self.vocab.bos_id] = True
        mask[0, self.vocab.eos_id] = True
        return mask

    def decode_logits(self, memory: Tensor, memory_pad: Tensor, tgt_in: Tensor) -> Tensor:
        t = tgt_in.shape[1]
        if t > self.dims.max_len + 1:
            raise ValueError(f"decode length {t} exceeds {self.dims.max_len + 1}")
        x = self.tok_emb(tgt_in) + self.dec_pos(torch.arange(t))
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        for block in self.dec_blocks:
            x = block(x, memory, causal, memory_pad)
        return self.lm_head(x)

    def step_log_probs(self, logits: Tensor, row_offset: int = 0) -> Tensor:
        """Log-softmax over the allowed token set per decode row."""
        rows = logits.shape[-2]
        ban = self._ban_value_mask(rows + row_offset)[row_offset:]
        return torch.log_softmax(logits.masked_fill(ban, NEG), dim=-1)

    def batch_sequence_log_probs(
        self,
        prompts: Sequence[Sequence[str]],
        batch_features: Sequence[Sequence[RegionFeature]],
        expressions: Sequence[Expression],
        terminated: bool | Sequence[bool] = True,
    ) -> Tensor:
        """Teacher-forced log p per item; EOS step included when terminated."""
        if not expressions:
            raise ValueError("empty batch")
        if isinstance(terminated, bool):
            terminated = [terminated] * len(expressions)
        memory, memory_pad = self.encode_batch(prompts, batch_features)
        token_ids = [self.vocab.encode(e) for e in expressions]
        golds = [
            ids + [self.vocab.eos_id] if term else list(ids)
            for ids, term in zip(token_ids, terminated)
        ]
        if any(len(g) == 0 for g in golds):
            raise ValueError("cannot score an empty unterminated expression")
        longest = max(len(g) for g in golds)
        if longest > self.dims.max_len + 1:
            raise ValueError("expression longer than the decoder limit")
        pad_id = self.vocab.pad_id
        bos = self.vocab.bos_id
        tgt_in = torch.tensor(
            [[bos] + g[:-1] + [pad_id] * (longest - len(g)) for g in golds], dtype=torch.long
        )
        gold = torch.tensor([g + [pad_id] * (longest - len(g)) for g in golds], dtype=torch.long)
        keep = torch.tensor(
            [[True] * len(g) + [False] * (longest - len(g)) for g in golds], dtype=torch.bool
        )
        logits = self.decode_logits(memory, memory_pad, tgt_in)
        log_probs = self.step_log_probs(logits)
        picked = log_probs.gather(-1, gold[:, :, None])[:, :, 0]
        return (picked * keep).sum(dim=1)

    def sequence_log_prob(
        self,
        prompt_tokens: Sequence[str],
        features: Sequence[RegionFeature],
        expression: Expression,
        terminated: bool = True,
    ) -> Tensor:
        return self.batch_sequence_log_probs(
            [tuple(prompt_tokens)], [list(features)], [expression], terminated=terminated
        )[0]

    # --- generation -----------------------------------------------------------

    @torch.no_grad()
    def generate(
        self,
        prompt_tokens: Sequence[str],
        features: Sequence[RegionFeature],
        mode: str = "greedy",
        beam_width: int = 5,
        temperature: float = 1.0,
        seed: int | None = None,
    ) -> GenerationResult | list[GenerationResult]:
        """Greedy is beam width 1; beam returns candidates sorted by total
        log-prob descending; sampling is deterministic in the seed."""
        was_training = self.training
        self.eval()
        try:
            memory, memory_pad = self.encode_batch([tuple(prompt_tokens)], [list(features)])
            if mode == "greedy":
                return self._beam(memory, memory_pad, width=1)[0]
            if mode == "beam":
                if beam_width < 1:
                    raise ValueError("beam width must be >= 1")
                return self._beam(memory, memory_pad, width=beam_width)
            if mode == "sample":
                results = self.sample_batch_encoded(memory, memory_pad, temperature, seed)
                return results[0]
            raise ValueError(f"unknown decode mode {mode!r}")
        finally:
            self.train(was_training)

    def _beam(self, memory: Tensor, memory_pad: Tensor, width: int) -> list[GenerationResult]:
        results = self._beam_pool(memory, memory_pad, width)
        if width > 1:
            # keep the greedy rollout in the pool so pruning can never return
            # a top candidate worse than greedy decoding
            seen = {r.tokens for r in results}
            extra = [g for g in self._beam_pool(memory, memory_pad, 1) if g.tokens not in seen]
            results = sorted(results + extra, key=lambda r: -r.log_prob)[:width]
        return results

    def _beam_pool(self, memory: Tensor, memory_pad: Tensor, width: int) -> list[GenerationResult]:
        eos = self.vocab.eos_id
        bos = self.vocab.bos_id
        live: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[GenerationResult] = []
        for row in range(self.dims.max_len + 1):
            mem = memory.expand(len(live), -1, -1)
            pad = memory_pad.expand(len(live), -1)
            tgt_in = torch.tensor([[bos] + ids for ids, _ in live], dtype=torch.long)
            logits = self.decode_logits(mem, pad, tgt_in)[:, -1, :]
            log_probs = self.step_log_probs(logits[:, None, :], row_offset=row)[:, 0, :]
            k = min(width, log_probs.shape[-1])
            top_lp, top_ids = torch.topk(log_probs, k, dim=-1)
            candidates = []
            for b, (ids, total) in enumerate(live):
                for lp, tok in zip(top_lp[b].tolist(), top_ids[b].tolist()):
                    candidates.append((ids + [tok], total + lp))
            # classic beam bookkeeping: only the top `width` hypotheses per row
            # are considered; EOS-ending ones retire into the finished pool
            candidates.sort(key=lambda c: -c[1])
            live = []
            for ids, total in candidates[:width]:
                if ids[-1] == eos:
                    finished.append(GenerationResult(self.vocab.decode(ids[:-1]), total, truncated=False))
                elif len(ids) >= self.dims.max_len:
                    finished.append(GenerationResult(self.vocab.decode(ids), total, truncated=True))
                else:
                    live.append((ids, total))
            if not live:
                break
        results = sorted(finished, key=lambda r: -r.log_prob)[:width]
        if not results:
            raise RuntimeError("beam search produced no candidates")
        return results

    @torch.no_grad()
    def sample_batch_encoded(
        self,
        memory: Tensor,
        memory_pad: Tensor,
        temperature: float = 1.0,
        seed: int | None = None,
    ) -> list[GenerationResult]:
        """One stochastic expression per batch item."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        gen = torch.Generator()
        if seed is not None:
            gen.manual_seed(seed)
        b = memory.shape[0]
        eos = self.vocab.eos_id
        bos = self.vocab.bos_id
        ids = torch.full((b, 1), bos, dtype=torch.long)
        done = torch.zeros(b, dtype=torch.bool)
        totals = torch.zeros(b, dtype=torch.float64)
        truncated = torch.zeros(b, dtype=torch.bool)
        for row in range(self.dims.max_len):
            logits = self.decode_logits(memory, memory_pad, ids)[:, -1, :]
            log_probs = self.step_log_probs(logits[:, None, :], row_offset=row)[:, 0, :]
            probs = torch.softmax(log_probs / temperature, dim=-1)
            picks = torch.multinomial(probs, 1, generator=gen)[:, 0]
            picks = torch.where(done, torch.full_like(picks, self.vocab.pad_id), picks)
            step_lp = log_probs.gather(-1, picks[:, None])[:, 0].to(torch.float64)
            totals = totals + torch.where(done, torch.zeros_like(step_lp), step_lp)
            ids = torch.cat([ids, picks[:, None]], dim=1)
            done = done | (picks == eos)
            if bool(done.all()):
                break
        truncated = ~done
        results = []
        for i in range(b):
            seq = [t for t in ids[i, 1:].tolist() if t != self.vocab.pad_id]
            if seq and seq[-1] == eos:
                seq = seq[:-1]
            results.append(
                GenerationResult(self.vocab.decode(seq), float(totals[i]), truncated=bool(truncated[i]))
            )
        return results


# --- persistence --------------------------------------------------------------


def save_speaker(speaker: Speaker, path: Path | str) -> None:
    save_checkpoint(
        path,
        {
            "kind": "speaker",
            "dims": speaker.dims.to_json(),
            "stage": speaker.stage,
            "vocab": speaker.vocab.to_json(),
            "vocab_hash": speaker.vocab.vocab_hash,
            "dtype": str(speaker.dtype).replace("torch.", ""),
            "state_dict": speaker.state_dict(),
        },
    )


def load_speaker(path: Path | str, expect_vocab: Vocabulary | None = None) -> Speaker:
    payload = load_checkpoint(path, expected_kind="speaker")
    vocab = Vocabulary.from_json(payload["vocab"])
    if vocab.vocab_hash != payload["vocab_hash"]:
        raise ConfigurationError(f"corrupt checkpoint (vocab hash mismatch) in {path}")
    if expect_vocab is not None and expect_vocab.vocab_hash != payload["vocab_hash"]:
        raise ConfigurationError(f"checkpoint vocabulary does not match the requested one in {path}")
    speaker = Speaker(
        vocab,
        SpeakerDims.from_json(payload["dims"]),
        stage=payload["stage"],
        dtype=getattr(torch, payload["dtype"]),
    )
    speaker.load_state_dict(payload["state_dict"])
    speaker.eval()
    return speaker
