"""Three-stage training pipeline.

Stage 1: supervised cross-entropy, optionally with the margin-based mutual
information loss contrasting the target region against a same-category
distractor. Stage 2: policy-gradient training with the combined grounding +
CIDEr reward. Stage 3: interaction-history collection and round-robin
training of the refiner task next to the base generation task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from random import Random
from typing import Callable, Sequence

import torch
from torch import Tensor

from .listener import Listener
from .metrics import (
    BBox,
    CorpusStats,
    Expression,
    RewardBreakdown,
    build_corpus_stats,
    cider,
    iou,
)
from .speaker import (
    RegionFeature,
    Speaker,
    build_refine_prompt,
    build_reg_prompt,
    region_features,
)
from .world import Scene, WorldDataset, sample_negative_region

HISTORY_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class MMIConfig:
    lambda_weight: float = 1.0
    margin: float = 0.1
    negative_seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if not math.isfinite(self.margin):
            raise ValueError("margin must be finite")


@dataclass(frozen=True)
class SupervisedConfig:
    loss: str = "mmi"  # "ce" | "mmi"
    epochs: int = 12
    batch_size: int = 64
    learning_rate: float = 5e-4
    seed: int = 0
    mmi: MMIConfig = field(default_factory=MMIConfig)

    def __post_init__(self) -> None:
        if self.loss not in ("ce", "mmi"):
            raise ValueError(f"unknown supervised loss {self.loss!r}")


@dataclass(frozen=True)
class RLConfig:
    beta: float = 0.5
    temperature: float = 1.0
    baseline: str = "none"  # "none" | "greedy"
    batch_size: int = 32
    learning_rate: float = 5e-5
    steps: int = 600
    reward_kind: str = "both"  # "rec" | "cider" | "both"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.baseline not in ("none", "greedy"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.reward_kind not in ("rec", "cider", "both"):
            raise ValueError(f"unknown reward kind {self.reward_kind!r}")


@dataclass(frozen=True)
class InteractiveConfig:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 5e-5
    beam_width: int = 5
    threshold: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class InteractionRecord:
    """One failed grounding attempt: what was said, what got located."""

    scene_id: str
    target_index: int
    gt_expression: Expression
    generated_expression: Expression
    predicted_index: int
    predicted_bbox: BBox
    iou_at_collection: float

    def to_json(self) -> dict:
        return {
            "schema_version": HISTORY_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "target_index": self.target_index,
            "gt_expression": list(self.gt_expression),
            "generated_expression": list(self.generated_expression),
            "predicted_index": self.predicted_index,
            "predicted_bbox": self.predicted_bbox.to_json(),
            "iou_at_collection": self.iou_at_collection,
        }

    @classmethod
    def from_json(cls, data: dict) -> "InteractionRecord":
        return cls(
            scene_id=data["scene_id"],
            target_index=data["target_index"],
            gt_expression=tuple(data["gt_expression"]),
            generated_expression=tuple(data["generated_expression"]),
            predicted_index=data["predicted_index"],
            predicted_bbox=BBox.from_json(data["predicted_bbox"]),
            iou_at_collection=data["iou_at_collection"],
        )


@dataclass(frozen=True)
class TrainRow:
    scene: Scene
    target_index: int
    expression: Expression
    negative_index: int | None = None


def make_training_rows(dataset: WorldDataset, split: str = "train") -> list[TrainRow]:
    rows = []
    for sample in dataset.split_samples(split):
        scene = dataset.scene_for(sample)
        for expr in sample.expressions:
            rows.append(TrainRow(scene, sample.target_index, expr))
    return rows


def assign_negatives(rows: Sequence[TrainRow], seed: int) -> list[TrainRow]:
    """Deterministic same-category distractor per row (None when absent)."""
    out = []
    for i, row in enumerate(rows):
        neg = sample_negative_region(row.scene, row.target_index, seed * 1_000_003 + i)
        out.append(TrainRow(row.scene, row.target_index, row.expression, neg))
    return out


class FeatureCache:
    """Region feature lists are pure functions of (scene, target, pred)."""

    def __init__(self, n_regions: int):
        self.n_regions = n_regions
        self._cache: dict[tuple[str, int, int | None], list[RegionFeature]] = {}

    def get(self, scene: Scene, target_index: int, pred_index: int | None = None) -> list[RegionFeature]:
        key = (scene.scene_id, target_index, pred_index)
        if key not in self._cache:
            self._cache[key] = region_features(scene, target_index, self.n_regions, pred_index)
        return self._cache[key]


def _reg_batch_inputs(speaker: Speaker, rows: Sequence[TrainRow], cache: FeatureCache):
    prompt = build_reg_prompt(speaker.vocab, speaker.vocab.target_slot)
    prompts = [prompt] * len(rows)
    feats = [cache.get(r.scene, r.target_index) for r in rows]
    return prompts, feats


def ce_loss(speaker: Speaker, rows: Sequence[TrainRow], cache: FeatureCache | None = None) -> Tensor:
    """Mean negative log-likelihood of the gold expressions."""
    if not rows:
        raise ValueError("empty batch")
    cache = cache or FeatureCache(speaker.vocab.n_regions)
    prompts, feats = _reg_batch_inputs(speaker, rows, cache)
    log_probs = speaker.batch_sequence_log_probs(prompts, feats, [r.expression for r in rows])
    return -log_probs.mean()


def mmi_penalized_nll(lp_target: Tensor, lp_distractor: Tensor | None, cfg: MMIConfig) -> Tensor:
    """Per-sample margin loss: -(log p(S|R) - lambda * hinge(M - lp_R + lp_R'))."""
    if lp_distractor is None:
        return -lp_target
    hinge = torch.clamp(cfg.margin - lp_target + lp_distractor, min=0.0)
    return -(lp_target - cfg.lambda_weight * hinge)


def mmi_loss(speaker: Speaker, rows: Sequence[TrainRow], cfg: MMIConfig, cache: FeatureCache | None = None) -> Tensor:
    """Margin loss against same-category distractor regions; rows without a
    distractor contribute the plain CE term."""
    if not rows:
        raise ValueError("empty batch")
    for row in rows:
        if row.negative_index is not None and row.negative_index == row.target_index:
            raise ValueError("negative region equals the target region")
    cache = cache or FeatureCache(speaker.vocab.n_regions)
    prompts, feats = _reg_batch_inputs(speaker, rows, cache)
    expressions = [r.expression for r in rows]
    lp_target = speaker.batch_sequence_log_probs(prompts, feats, expressions)

    with_neg = [i for i, r in enumerate(rows) if r.negative_index is not None]
    per_sample = -lp_target
    if with_neg:
        neg_prompts = [prompts[i] for i in with_neg]
        neg_feats = [cache.get(rows[i].scene, rows[i].negative_index) for i in with_neg]
        lp_neg = speaker.batch_sequence_log_probs(neg_prompts, neg_feats, [expressions[i] for i in with_neg])
        idx = torch.tensor(with_neg, dtype=torch.long)
        per_sample = per_sample.clone()
        per_sample[idx] = mmi_penalized_nll(lp_target[idx], lp_neg, cfg)
    return per_sample.mean()


# --- reinforcement ----------------------------------------------------------


def reinforce_surrogate(log_probs: Tensor, advantages: Tensor) -> Tensor:
    """Loss whose gradient is -E[advantage * grad log p] (gradient ascent on
    expected reward when minimized)."""
    return -(advantages.detach() * log_probs).mean()


def _reward_for(
    cfg: RLConfig,
    gt_box: BBox,
    pred_box: BBox,
    gt_text: Expression,
    gen_text: Expression,
    stats: CorpusStats,
) -> RewardBreakdown:
    rec = iou(gt_box, pred_box)
    cid = cider(gen_text, [gt_text], stats)
    if cfg.reward_kind == "rec":
        return RewardBreakdown.combine(rec, cid, 0.0)
    if cfg.reward_kind == "cider":
        # grounding term excluded from the reward; the identity total =
        # rec + beta * cider stays exact with the rec component zeroed
        return RewardBreakdown.combine(0.0, cid, 1.0)
    return RewardBreakdown.combine(rec, cid, cfg.beta)


def reinforce_step(
    speaker: Speaker,
    rows: Sequence[TrainRow],
    listener: Listener,
    stats: CorpusStats,
    cfg: RLConfig,
    step_seed: int,
    cache: FeatureCache | None = None,
) -> tuple[Tensor, RewardBreakdown, dict]:
    """Sample one expression per row, reward it, return the surrogate loss,
    the mean reward breakdown and diagnostics."""
    if not rows:
        raise ValueError("empty batch")
    cache = cache or FeatureCache(speaker.vocab.n_regions)
    prompts, feats = _reg_batch_inputs(speaker, rows, cache)
    with torch.no_grad():
        memory, memory_pad = speaker.encode_batch(prompts, feats)
        sampled = speaker.sample_batch_encoded(memory, memory_pad, cfg.temperature, step_seed)
        baselines = None
        if cfg.baseline == "greedy":
            baselines = [
                speaker._beam(memory[i : i + 1], memory_pad[i : i + 1], width=1)[0] for i in range(len(rows))
            ]

    rewards = []
    base_totals = []
    for i, row in enumerate(rows):
        try:
            verdict = listener.locate(row.scene, sampled[i].tokens)
        except Exception as exc:
            raise RuntimeError(
                f"listener failed on scene {row.scene.scene_id} expression {sampled[i].tokens!r}"
            ) from exc
        gt_box = row.scene.objects[row.target_index].bbox
        rewards.append(_reward_for(cfg, gt_box, verdict.predicted_bbox, row.expression, sampled[i].tokens, stats))
        if baselines is not None:
            base_verdict = listener.locate(row.scene, baselines[i].tokens)
            base_totals.append(
                _reward_for(cfg, gt_box, base_verdict.predicted_bbox, row.expression, baselines[i].tokens, stats).total
            )

    log_probs = speaker.batch_sequence_log_probs(
        prompts, feats, [s.tokens for s in sampled], terminated=[not s.truncated for s in sampled]
    )
    totals = torch.tensor([r.total for r in rewards], dtype=log_probs.dtype)
    if base_totals:
        totals = totals - torch.tensor(base_totals, dtype=log_probs.dtype)
    loss = reinforce_surrogate(log_probs, totals)

    n = len(rewards)
    mean_breakdown = RewardBreakdown(
        rec_reward=sum(r.rec_reward for r in rewards) / n,
        cider=sum(r.cider for r in rewards) / n,
        beta=rewards[0].beta,
        total=sum(r.total for r in rewards) / n,
    )
    diagnostics = {
        "mean_sample_iou": sum(r.rec_reward for r in rewards) / n if cfg.reward_kind != "cider" else None,
        "truncated_fraction": sum(1 for s in sampled if s.truncated) / n,
    }
    return loss, mean_breakdown, diagnostics


# --- interaction history ------------------------------------------------------


@dataclass
class InteractionHistory:
    records: list[InteractionRecord]
    reg_rows: list[TrainRow]
    attempted: int

    @property
    def merged_size(self) -> int:
        return len(self.reg_rows) + len(self.records)

    @property
    def failure_fraction(self) -> float:
        return len(self.records) / self.attempted if self.attempted else 0.0


def collect_interaction_history(
    dataset: WorldDataset,
    speaker: Speaker,
    listener: Listener,
    threshold: float = 0.5,
    seed: int = 0,
    split: str = "train",
    beam_width: int = 5,
) -> InteractionHistory:
    """Generate with beam top-1, ground, and record failures (IoU fails the
    strictly-greater test); the merged dataset keeps all ground-truth rows."""
    del seed  # generation is beam search, deterministic; kept for interface stability
    cache = FeatureCache(speaker.vocab.n_regions)
    prompt = build_reg_prompt(speaker.vocab, speaker.vocab.target_slot)
    records: list[InteractionRecord] = []
    samples = dataset.split_samples(split)
    for sample in samples:
        scene = dataset.scene_for(sample)
        feats = cache.get(scene, sample.target_index)
        generated = speaker.generate(prompt, feats, mode="beam", beam_width=beam_width)[0]
        verdict = listener.locate(scene, generated.tokens)
        gt_box = scene.objects[sample.target_index].bbox
        score = iou(gt_box, verdict.predicted_bbox)
        if not score > threshold:
            records.append(
                InteractionRecord(
                    scene_id=scene.scene_id,
                    target_index=sample.target_index,
                    gt_expression=sample.expressions[0],
                    generated_expression=generated.tokens,
                    predicted_index=verdict.predicted_index,
                    predicted_bbox=verdict.predicted_bbox,
                    iou_at_collection=score,
                )
            )
    return InteractionHistory(
        records=records, reg_rows=make_training_rows(dataset, split), attempted=len(samples)
    )


def refiner_loss(
    speaker: Speaker,
    records: Sequence[InteractionRecord],
    scenes: dict[str, Scene],
    cache: FeatureCache | None = None,
) -> Tensor:
    """Mean NLL of the ground-truth expression under the refine prompt with
    the wrongly-predicted region in the extra slot."""
    if not records:
        raise ValueError("empty batch")
    cache = cache or FeatureCache(speaker.vocab.n_regions)
    vocab = speaker.vocab
    prompts = []
    feats = []
    for record in records:
        if record.predicted_index is None:
            raise ValueError("interaction record is missing the predicted region")
        scene = scenes[record.scene_id]
        prompts.append(
            build_refine_prompt(vocab, record.generated_expression, vocab.target_slot, vocab.predicted_slot)
        )
        feats.append(cache.get(scene, record.target_index, record.predicted_index))
    log_probs = speaker.batch_sequence_log_probs(prompts, feats, [r.gt_expression for r in records])
    return -log_probs.mean()


# --- round robin ---------------------------------------------------------------


def round_robin_schedule(n_steps: int) -> list[str]:
    return ["reg" if i % 2 == 0 else "refine" for i in range(n_steps)]


def round_robin_train(
    speaker: Speaker,
    reg_rows: Sequence[TrainRow],
    refiner_records: Sequence[InteractionRecord],
    scenes: dict[str, Scene],
    cfg: InteractiveConfig,
    on_step: Callable[[str, float], None] | None = None,
) -> dict:
    """Alternate one generation batch and one refiner batch per step; ends at
    the interactive stage."""
    if speaker.stage != "reinforced":
        raise ValueError(f"round robin training expects a reinforced-stage model, got {speaker.stage!r}")
    if not reg_rows or not refiner_records:
        raise ValueError("both task datasets must be nonempty")
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(speaker.parameters(), lr=cfg.learning_rate)
    cache = FeatureCache(speaker.vocab.n_regions)
    rng = Random(cfg.seed)
    losses = {"reg": [], "refine": []}
    for _ in range(cfg.epochs):
        reg_order = list(range(len(reg_rows)))
        ref_order = list(range(len(refiner_records)))
        rng.shuffle(reg_order)
        rng.shuffle(ref_order)
        reg_batches = [reg_order[i : i + cfg.batch_size] for i in range(0, len(reg_order), cfg.batch_size)]
        ref_batches = [ref_order[i : i + cfg.batch_size] for i in range(0, len(ref_order), cfg.batch_size)]
        n_steps = 2 * max(len(reg_batches), len(ref_batches))
        for step, task in enumerate(round_robin_schedule(n_steps)):
            if task == "reg":
                batch = reg_batches[(step // 2) % len(reg_batches)]
                loss = ce_loss(speaker, [reg_rows[i] for i in batch], cache)
            else:
                batch = ref_batches[(step // 2) % len(ref_batches)]
                loss = refiner_loss(speaker, [refiner_records[i] for i in batch], scenes, cache)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses[task].append(float(loss.detach()))
            if on_step is not None:
                on_step(task, float(loss.detach()))
    speaker.advance_stage("ireg")
    return {"mean_reg_loss": sum(losses["reg"]) / len(losses["reg"]),
            "mean_refine_loss": sum(losses["refine"]) / len(losses["refine"])}


# --- stage runners ---------------------------------------------------------------


def train_supervised(speaker: Speaker, dataset: WorldDataset, cfg: SupervisedConfig) -> dict:
    """Stage 1. CE keeps the base tag; the margin loss advances it to mmi."""
    rows = make_training_rows(dataset, "train")
    if not rows:
        raise ValueError("dataset has no training rows")
    if cfg.loss == "mmi":
        rows = assign_negatives(rows, cfg.mmi.negative_seed)
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(speaker.parameters(), lr=cfg.learning_rate)
    cache = FeatureCache(speaker.vocab.n_regions)
    rng = Random(cfg.seed)
    curve = []
    speaker.train()
    for _ in range(cfg.epochs):
        order = list(range(len(rows)))
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [rows[i] for i in order[start : start + cfg.batch_size]]
            if cfg.loss == "ce":
                loss = ce_loss(speaker, batch, cache)
            else:
                loss = mmi_loss(speaker, batch, cfg.mmi, cache)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        curve.append(sum(epoch_losses) / len(epoch_losses))
    speaker.eval()
    if cfg.loss == "mmi":
        speaker.advance_stage("mmi")
    return {"loss_curve": curve, "rows": len(rows)}


def train_reinforced(
    speaker: Speaker,
    dataset: WorldDataset,
    listener: Listener,
    cfg: RLConfig,
    stats: CorpusStats | None = None,
) -> dict:
    """Stage 2. The IDF corpus is built once from the training split."""
    rows = make_training_rows(dataset, "train")
    if not rows:
        raise ValueError("dataset has no training rows")
    if stats is None:
        stats = build_corpus_stats(dataset.reference_sets("train"))
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(speaker.parameters(), lr=cfg.learning_rate)
    cache = FeatureCache(speaker.vocab.n_regions)
    rng = Random(cfg.seed)
    order: list[int] = []
    reward_curve = []
    speaker.train()
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            refill = list(range(len(rows)))
            rng.shuffle(refill)
            order.extend(refill)
        batch = [rows[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]
        loss, breakdown, _ = reinforce_step(
            speaker, batch, listener, stats, cfg, step_seed=cfg.seed * 7_919 + step, cache=cache
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        reward_curve.append(breakdown.total)
    speaker.eval()
    speaker.advance_stage("reinforced")
    return {"reward_curve": reward_curve, "rows": len(rows)}


def train_interactive(
    speaker: Speaker,
    dataset: WorldDataset,
    listener: Listener,
    cfg: InteractiveConfig,
) -> tuple[InteractionHistory, dict]:
    """Stage 3: collect the interaction history, then round-robin train."""
    history = collect_interaction_history(
        dataset, speaker, listener, threshold=cfg.threshold, seed=cfg.seed, beam_width=cfg.beam_width
    )
    if not history.records:
        raise ValueError("no failed groundings collected; nothing to refine")
    report = round_robin_train(speaker, history.reg_rows, history.records, dataset.scenes, cfg)
    report["failure_fraction"] = history.failure_fraction
    report["merged_size"] = history.merged_size
    return history, report
