"""Group-relative advantage, asymmetric-clip surrogate, and judge protocol.

Plain arithmetic only; nothing here touches a model or computes gradients.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

from memtree.listener import fill_template

DEFAULT_GROUP_SIZE = 8
STD_TOLERANCE = 1e-9


class DegenerateGroupError(ValueError):
    pass


class NoScoreFound(ValueError):
    pass


@dataclass(frozen=True)
class ClipParams:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self) -> None:
        if not 0 < self.eps_low <= self.eps_high < 1:
            raise ValueError("clip params need 0 < eps_low <= eps_high < 1")


@dataclass(frozen=True)
class RewardGroup:
    rewards: tuple[float, ...]
    flags: tuple[bool, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))
        if any(not -1.0 <= r <= 1.0 for r in self.rewards):
            raise ValueError("rewards must lie in [-1, 1]")
        if self.flags and len(self.flags) != len(self.rewards):
            raise ValueError("need one equivalence flag per reward")

    @property
    def size(self) -> int:
        return len(self.rewards)


def dynamic_sample_keep(flags: Sequence[bool]) -> bool:
    """Keep a group only if some, but not all, outputs match the reference."""
    if len(flags) < 2:
        raise ValueError("a group needs at least two samples")
    hits = sum(1 for f in flags if f)
    return 0 < hits < len(flags)


def normalize_rewards(group: RewardGroup | Sequence[float]) -> list[float]:
    """Standardize rewards within the group using the population std."""
    rewards = group.rewards if isinstance(group, RewardGroup) else tuple(float(r) for r in group)
    n = len(rewards)
    if n == 0:
        raise DegenerateGroupError("empty reward group")
    mean = math.fsum(rewards) / n
    centered = [r - mean for r in rewards]
    std = math.sqrt(math.fsum(c * c for c in centered) / n)
    if std <= STD_TOLERANCE:
        raise DegenerateGroupError(f"reward std {std:.3g} is at or below {STD_TOLERANCE}")
    return [c / std for c in centered]


def dapo_term(ratio: float, advantage: float, clip: ClipParams | None = None) -> float:
    """min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A) for one token."""
    clip = clip or ClipParams()
    if ratio <= 0:
        raise ValueError("importance ratio must be positive")
    clamped = min(max(ratio, 1.0 - clip.eps_low), 1.0 + clip.eps_high)
    return min(ratio * advantage, clamped * advantage)


def importance_ratio(logp_new: float, logp_old: float) -> float:
    return math.exp(logp_new - logp_old)


def token_level_objective(
    ratios: Sequence[Sequence[float]], advantages: Sequence[float], clip: ClipParams | None = None
) -> float:
    """Token-mean of the clipped surrogate over a whole group.

    ``ratios[i]`` holds the per-token ratios of sample ``i``; every token of a
    sample shares that sample's advantage. The sum is divided by the total
    token count of the group, not averaged per sample.
    """
    if len(ratios) != len(advantages):
        raise ValueError("need one advantage per sample")
    total_tokens = sum(len(r) for r in ratios)
    if total_tokens == 0:
        raise ValueError("group has no tokens")
    terms = [dapo_term(r, a, clip) for seq, a in zip(ratios, advantages) for r in seq]
    return math.fsum(terms) / total_tokens


JUDGE_PROMPT_TEMPLATE = """\
You are a strict "overall scorer for attribute-tree operations". Your task is to assign an overall quality score in [-1, 1] to the model-predicted operation sequence Pred_Ops, given the ground-truth annotated operation sequence GT_Ops.

[Input]
- GT_Ops (ground truth): a list of operations, where each element is of the form ADD(path, value) / UPDATE(path, value) / DELETE(path, value) / NO_OP()
- Pred_Ops (prediction): a list of operations in the same format as above

[Critical Constraints]
1) Output only a single JSON object: {"score": <float>}. Do not output any explanation and do not include any extra fields.
2) score must be a continuous floating-point number within [-1, 1] (any value is allowed). It is recommended to keep 2 decimal places.
3) The "score-tier reference" below serves only as anchors for aligning overall quality. You should fine-tune between anchors to output a more granular score.
4) For example, if the overall quality falls between 0.7 and 1.0, output a value in [0.71, 0.99]; if it falls between 0.5 and 0.7, output a value in [0.51, 0.69]; and so on.

[Score-Tier Reference (Overall Quality Anchors)]
* 1.0 (nearly perfect): Pred and GT are almost entirely consistent on key operations; types/paths are nearly identical; values are semantically equivalent; no redundant operations.
* 0.7 (high quality): most key operations are correct; only minor value-level deviations, or very few missing/redundant operations.
* 0.5 (moderately usable): the overall approach and core direction are correct; some missing/redundant operations exist; some paths/values are incorrect, but the main semantics are not affected.
* 0.3 (partially reliable): about half of the content is reliable; some key operations are correct while others are wrong, requiring some fixes.
* 0.0 (slightly correct): only a small number of operations or fragments are correct; missing/redundant operations and errors are evident; key operations are mixed correct/incorrect.
* -0.3 (barely relevant): broadly related but with many omissions/errors; it is only apparent that the model is attempting the task, and it is essentially unusable as-is.
* -0.5 (clearly off-target): most key operations are missing or incorrect; many wrong paths/types or obviously redundant operations; overall deviates from expectations.
* -0.7 (catastrophic): large-scale structural/semantic disorder; almost unusable.
* -1.0 (meaningless output): clearly meaningless, garbage text, or unrelated to the task.

[Output Format]
Output only the JSON object containing the score, with no additional notes or explanations.
Output only:
{"score": <float>}

[Task Data]
  - GT_Ops:
  {gt_ops}

  - Pred_Ops:
  {pred_ops}
"""


def build_judge_prompt(gt_ops: Sequence[str] | str, pred_ops: Sequence[str] | str) -> str:
    gt = gt_ops if isinstance(gt_ops, str) else "\n".join(gt_ops)
    pred = pred_ops if isinstance(pred_ops, str) else "\n".join(pred_ops)
    return fill_template(JUDGE_PROMPT_TEMPLATE, gt_ops=gt, pred_ops=pred)


@dataclass(frozen=True)
class JudgeScore:
    score: float
    clamped: bool = False


_SCORE_RE = re.compile(r"\{[^{}]*\"score\"[^{}]*\}")


def parse_judge_score(text: str) -> JudgeScore:
    """Take the first well-formed ``{"score": <number>}`` object in the text.

    Out-of-range scores are clamped to [-1, 1] and flagged.
    """
    for m in _SCORE_RE.finditer(text):
        try:
            obj = json.loads(m.group())
        except json.JSONDecodeError:
            continue
        value = obj.get("score") if isinstance(obj, dict) else None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            continue
        value = float(value)
        if value > 1.0 or value < -1.0:
            return JudgeScore(max(-1.0, min(1.0, value)), clamped=True)
        return JudgeScore(value)
    raise NoScoreFound("no {\"score\": <float>} object in judge output")
