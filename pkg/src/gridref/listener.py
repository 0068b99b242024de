"""Frozen grounding agents: a rule-based oracle and a small learned grounder.

Both map (scene, expression) to a verdict over the scene's objects and never
invent geometry: the predicted box is always one of the scene's boxes.
Ties break toward the lowest object index, which punishes ambiguous
expressions deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, FrozenModelError
from .metrics import BBox
from .speaker import attribute_onehot, _box_features
from .storage import load_checkpoint, save_checkpoint
from .vocab import Vocabulary
from .world import Scene, WorldDataset, oracle_scores

NEG = -1e9


@dataclass(frozen=True)
class ListenerVerdict:
    predicted_index: int
    predicted_bbox: BBox
    scores: tuple[float, ...]
    uninformative: bool = False


class Listener(Protocol):
    def locate(self, scene: Scene, expression: Sequence[str]) -> ListenerVerdict: ...


def _argmax_lowest(scores: Sequence[float]) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


class OracleListener:
    """Token-matching grounder: +1 per applying attribute/positional token,
    -1 per contradicted one, unknown tokens ignored."""

    def locate(self, scene: Scene, expression: Sequence[str]) -> ListenerVerdict:
        scores, known = oracle_scores(scene, expression)
        index = _argmax_lowest(scores)
        return ListenerVerdict(
            predicted_index=index,
            predicted_bbox=scene.objects[index].bbox,
            scores=tuple(float(s) for s in scores),
            uninformative=known == 0,
        )


class LearnedListener(nn.Module):
    """Expression encoder + region scorer; frozen after training."""

    def __init__(self, vocab: Vocabulary, hidden: int = 48, init_seed: int = 0):
        super().__init__()
        torch.manual_seed(init_seed)
        self.vocab = vocab
        self.hidden = hidden
        attr_dim = len(vocab.categories) + len(vocab.colors) + len(vocab.sizes)
        self.tok_emb = nn.Embedding(len(vocab), hidden)
        self.expr_proj = nn.Linear(hidden, hidden)
        self.attr_proj = nn.Linear(attr_dim, hidden)
        self.box_proj = nn.Linear(5, hidden)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def assert_mutable(self) -> None:
        if self._frozen:
            raise FrozenModelError("listener checkpoint is frozen; parameter updates are rejected")

    def _expression_ids(self, expression: Sequence[str]) -> list[int]:
        return [self.vocab.encode([t])[0] for t in expression if self.vocab.contains(t)]

    def batch_scores(self, scenes: Sequence[Scene], expressions: Sequence[Sequence[str]]):
        """Scores [B, K_max] with True-at-padding mask."""
        id_lists = [self._expression_ids(e) for e in expressions]
        t_max = max(1, max(len(ids) for ids in id_lists))
        tok = torch.zeros(len(id_lists), t_max, dtype=torch.long)
        tok_mask = torch.zeros(len(id_lists), t_max, dtype=torch.bool)
        for i, ids in enumerate(id_lists):
            tok[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            tok_mask[i, : len(ids)] = True
        emb = self.tok_emb(tok) * tok_mask[:, :, None]
        denom = tok_mask.sum(1, keepdim=True).clamp(min=1)
        expr = torch.tanh(self.expr_proj(emb.sum(1) / denom))

        k_max = max(len(s.objects) for s in scenes)
        attr_dim = self.attr_proj.in_features
        attrs = torch.zeros(len(scenes), k_max, attr_dim)
        boxes = torch.zeros(len(scenes), k_max, 5)
        pad = torch.ones(len(scenes), k_max, dtype=torch.bool)
        for i, scene in enumerate(scenes):
            for j in range(len(scene.objects)):
                attrs[i, j] = torch.tensor(attribute_onehot(scene, j))
                boxes[i, j] = torch.tensor(_box_features(scene, j))
                pad[i, j] = False
        regions = torch.tanh(self.attr_proj(attrs) + self.box_proj(boxes))
        scores = (regions * expr[:, None, :]).sum(-1) / self.hidden**0.5
        return scores.masked_fill(pad, NEG), pad

    @torch.no_grad()
    def locate(self, scene: Scene, expression: Sequence[str]) -> ListenerVerdict:
        was_training = self.training
        self.eval()
        try:
            scores, _ = self.batch_scores([scene], [tuple(expression)])
            values = [float(v) for v in scores[0, : len(scene.objects)]]
            index = _argmax_lowest(values)
            return ListenerVerdict(
                predicted_index=index,
                predicted_bbox=scene.objects[index].bbox,
                scores=tuple(values),
                uninformative=len(self._expression_ids(expression)) == 0,
            )
        finally:
            self.train(was_training)


@dataclass(frozen=True)
class ListenerTrainConfig:
    hidden: int = 48
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 5e-3


def _grounding_rows(dataset: WorldDataset, split: str):
    rows = []
    for sample in dataset.split_samples(split):
        scene = dataset.scene_for(sample)
        for expr in sample.expressions:
            rows.append((scene, sample.target_index, expr))
    return rows


def grounding_accuracy(listener: Listener, dataset: WorldDataset, split: str) -> float:
    rows = _grounding_rows(dataset, split)
    if not rows:
        raise ValueError(f"no samples in split {split!r}")
    hits = sum(1 for scene, target, expr in rows if listener.locate(scene, expr).predicted_index == target)
    return hits / len(rows)


def fit_listener(
    listener: LearnedListener,
    rows: Sequence[tuple[Scene, int, Sequence[str]]],
    config: ListenerTrainConfig,
    seed: int,
) -> None:
    """Cross-entropy over object slots, in place."""
    listener.assert_mutable()
    if not rows:
        raise ValueError("empty training data")
    optimizer = torch.optim.Adam(listener.parameters(), lr=config.learning_rate)
    order_rng = torch.Generator().manual_seed(seed)
    listener.train()
    for _ in range(config.epochs):
        perm = torch.randperm(len(rows), generator=order_rng).tolist()
        for start in range(0, len(rows), config.batch_size):
            batch = [rows[i] for i in perm[start : start + config.batch_size]]
            scenes = [b[0] for b in batch]
            targets = torch.tensor([b[1] for b in batch], dtype=torch.long)
            scores, _ = listener.batch_scores(scenes, [b[2] for b in batch])
            loss = nn.functional.cross_entropy(scores, targets)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    listener.eval()


def train_learned_listener(
    dataset: WorldDataset, config: ListenerTrainConfig = ListenerTrainConfig(), seed: int = 0
) -> tuple[LearnedListener, dict]:
    """Train on the train split only, freeze, report held-out accuracy."""
    rows = _grounding_rows(dataset, "train")
    if not rows:
        raise ValueError("dataset has no training samples")
    vocab = Vocabulary.for_world(dataset.config)
    listener = LearnedListener(vocab, hidden=config.hidden, init_seed=seed)
    fit_listener(listener, rows, config, seed)
    listener.freeze()
    report = {
        "train_rows": len(rows),
        "val_accuracy": grounding_accuracy(listener, dataset, "val"),
    }
    return listener, report


def save_listener(listener: LearnedListener, path: Path | str) -> None:
    save_checkpoint(
        path,
        {
            "kind": "listener",
            "hidden": listener.hidden,
            "vocab": listener.vocab.to_json(),
            "vocab_hash": listener.vocab.vocab_hash,
            "frozen": listener.frozen,
            "state_dict": listener.state_dict(),
        },
    )


def load_listener(path: Path | str, expect_vocab: Vocabulary | None = None) -> LearnedListener:
    payload = load_checkpoint(path, expected_kind="listener")
    vocab = Vocabulary.from_json(payload["vocab"])
    if vocab.vocab_hash != payload["vocab_hash"]:
        raise ConfigurationError(f"corrupt checkpoint (vocab hash mismatch) in {path}")
    if expect_vocab is not None and expect_vocab.vocab_hash != payload["vocab_hash"]:
        raise ConfigurationError(f"checkpoint vocabulary does not match the requested one in {path}")
    listener = LearnedListener(vocab, hidden=payload["hidden"])
    listener.load_state_dict(payload["state_dict"])
    if payload["frozen"]:
        listener.freeze()
    return listener
