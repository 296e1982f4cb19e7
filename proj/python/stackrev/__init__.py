"""Stackelberg contract revision engine: python surface over the C++ core."""

from ._core import (
    StackrevError,
    budget_penalty,
    classify_header,
    clean_header,
    contraction_factor,
    cq_mean,
    cq_weighted,
    extract_json,
    follower_descend,
    grade_to_unit,
    hr_ffr,
    leader_utility,
    render_prompt,
    rrr,
    run_game_scripted,
    run_theorem1_suite,
    run_theorem2_suite,
    severity,
    softmax_attention,
    template_ids,
    tes_raw,
    token_count,
    win_rate,
)

__all__ = [
    "StackrevError",
    "budget_penalty",
    "classify_header",
    "clean_header",
    "contraction_factor",
    "cq_mean",
    "cq_weighted",
    "extract_json",
    "follower_descend",
    "grade_to_unit",
    "hr_ffr",
    "leader_utility",
    "render_prompt",
    "rrr",
    "run_game_scripted",
    "run_theorem1_suite",
    "run_theorem2_suite",
    "severity",
    "softmax_attention",
    "template_ids",
    "tes_raw",
    "token_count",
    "win_rate",
]
