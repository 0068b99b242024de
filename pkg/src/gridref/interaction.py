"""Multi-round interactive inference and its evaluation harness.

Round 0 comes from the reinforced-stage speaker via beam search; every later
round grounds the previous expression, stops on IoU > 0.5, and otherwise
refines conditioned only on the previous expression and the wrongly located
region (first-order Markov). A refinement identical to the previous round
does not stop the loop; it is counted as stagnation in the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .listener import Listener
from .metrics import BBox, CorpusStats, Expression, build_corpus_stats, cider, iou
from .speaker import Speaker, build_refine_prompt, build_reg_prompt, region_features
from .world import Scene, WorldDataset

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RoundEntry:
    round_index: int
    expression: Expression
    predicted_index: int
    predicted_bbox: BBox
    iou: float
    located: bool

    def to_json(self) -> dict:
        return {
            "round_index": self.round_index,
            "expression": list(self.expression),
            "predicted_index": self.predicted_index,
            "predicted_bbox": self.predicted_bbox.to_json(),
            "iou": self.iou,
            "located": self.located,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RoundEntry":
        return cls(
            round_index=data["round_index"],
            expression=tuple(data["expression"]),
            predicted_index=data["predicted_index"],
            predicted_bbox=BBox.from_json(data["predicted_bbox"]),
            iou=data["iou"],
            located=data["located"],
        )


@dataclass
class RoundTrace:
    scene_id: str
    target_index: int
    entries: list[RoundEntry] = field(default_factory=list)
    termination: str = ""
    final_expression: Expression = ()
    stagnation_count: int = 0

    @property
    def located(self) -> bool:
        return bool(self.entries) and self.entries[-1].located

    @property
    def rounds_used(self) -> int:
        return len(self.entries)

    def located_within(self, budget: int) -> bool:
        return self.located and len(self.entries) <= budget

    def to_json(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "target_index": self.target_index,
            "entries": [e.to_json() for e in self.entries],
            "termination": self.termination,
            "final_expression": list(self.final_expression),
            "stagnation_count": self.stagnation_count,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RoundTrace":
        return cls(
            scene_id=data["scene_id"],
            target_index=data["target_index"],
            entries=[RoundEntry.from_json(e) for e in data["entries"]],
            termination=data["termination"],
            final_expression=tuple(data["final_expression"]),
            stagnation_count=data["stagnation_count"],
        )


def initial_expression(
    reinforced: Speaker, scene: Scene, target_index: int, beam_width: int = 5
) -> Expression:
    """Round-0 expression from the reinforced-stage speaker (beam top-1)."""
    prompt = build_reg_prompt(reinforced.vocab, reinforced.vocab.target_slot)
    feats = region_features(scene, target_index, reinforced.vocab.n_regions)
    return reinforced.generate(prompt, feats, mode="beam", beam_width=beam_width)[0].tokens


def refine_expression(
    speaker: Speaker,
    scene: Scene,
    target_index: int,
    prev_expression: Expression,
    prev_predicted_index: int,
    beam_width: int = 5,
) -> Expression:
    """One Markov refinement: conditioned only on the previous expression and
    the previously predicted region."""
    vocab = speaker.vocab
    prompt = build_refine_prompt(vocab, prev_expression, vocab.target_slot, vocab.predicted_slot)
    feats = region_features(scene, target_index, vocab.n_regions, pred_index=prev_predicted_index)
    return speaker.generate(prompt, feats, mode="beam", beam_width=beam_width)[0].tokens


def interactive_infer(
    speaker: Speaker,
    reinforced_init: Speaker,
    listener: Listener,
    scene: Scene,
    target_index: int,
    max_round: int = 5,
    beam_width: int = 5,
    threshold: float = 0.5,
) -> tuple[Expression, RoundTrace]:
    """Generate, ground, stop on success, else refine, up to max_round."""
    if max_round < 1:
        raise ValueError("max_round must be >= 1")
    gt_box = scene.objects[target_index].bbox
    trace = RoundTrace(scene_id=scene.scene_id, target_index=target_index)
    expression = initial_expression(reinforced_init, scene, target_index, beam_width)
    for round_index in range(max_round):
        verdict = listener.locate(scene, expression)
        score = iou(gt_box, verdict.predicted_bbox)
        located = score > threshold
        trace.entries.append(
            RoundEntry(
                round_index=round_index,
                expression=expression,
                predicted_index=verdict.predicted_index,
                predicted_bbox=verdict.predicted_bbox,
                iou=score,
                located=located,
            )
        )
        if located:
            trace.termination = f"located_at_round_{round_index}"
            trace.final_expression = expression
            return expression, trace
        if round_index + 1 < max_round:
            refined = refine_expression(
                speaker, scene, target_index, expression, verdict.predicted_index, beam_width
            )
            if refined == expression:
                trace.stagnation_count += 1
            expression = refined
    trace.termination = "budget_exhausted"
    trace.final_expression = trace.entries[-1].expression
    return trace.final_expression, trace


@dataclass
class EvalTable:
    budgets: list[int]
    accuracy_by_budget: list[float]
    cider_final: float
    mean_rounds: float
    n_samples: int

    def accuracy(self, budget: int) -> float:
        return self.accuracy_by_budget[self.budgets.index(budget)]

    def to_json(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "budgets": self.budgets,
            "accuracy_by_budget": self.accuracy_by_budget,
            "cider_final": self.cider_final,
            "mean_rounds": self.mean_rounds,
            "n_samples": self.n_samples,
        }


def evaluate_split(
    speaker: Speaker,
    reinforced_init: Speaker,
    listener: Listener,
    dataset: WorldDataset,
    split: str,
    max_round: int = 5,
    beam_width: int = 5,
    stats: CorpusStats | None = None,
) -> tuple[EvalTable, list[RoundTrace]]:
    """Per-budget grounding accuracy (trace truncated at each budget), CIDEr
    of the final expressions, mean rounds used."""
    samples = dataset.split_samples(split)
    if not samples:
        raise ValueError(f"empty split {split!r}")
    if stats is None:
        stats = build_corpus_stats(dataset.reference_sets(split))
    traces = []
    for sample in samples:
        scene = dataset.scene_for(sample)
        _, trace = interactive_infer(
            speaker, reinforced_init, listener, scene, sample.target_index, max_round, beam_width
        )
        traces.append(trace)
    budgets = list(range(1, max_round + 1))
    accuracy_by_budget = [
        sum(1 for t in traces if t.located_within(k)) / len(traces) for k in budgets
    ]
    cider_scores = [
        cider(trace.final_expression, list(sample.expressions), stats)
        for trace, sample in zip(traces, samples)
    ]
    table = EvalTable(
        budgets=budgets,
        accuracy_by_budget=accuracy_by_budget,
        cider_final=sum(cider_scores) / len(cider_scores),
        mean_rounds=sum(t.rounds_used for t in traces) / len(traces),
        n_samples=len(traces),
    )
    return table, traces
