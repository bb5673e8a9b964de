"""Synthetic interaction streams with planted, learnable dynamics.

Each pattern isolates one modeling claim so ablations are falsifiable at
desk scale:

* ``concept-skill`` — a latent per-(student, concept) mastery level drives
  correctness; history on the same concept reveals it.
* ``forgetting`` — answering happens in sessions; the first attempt after a
  long break mostly fails, within-session attempts mostly succeed. Session
  boundaries are visible only through the interval structure.
* ``repeat-guess`` — early attempts at a question mostly fail, and after
  enough repeats the answer flips to correct regardless of skill, so the
  repeat count of the exact question is the signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PATTERNS = ("concept-skill", "forgetting", "repeat-guess")

DAY = 86400


@dataclass
class SynthResult:
    rows: list  # (student, question, timestamp, response, concept)
    meta: dict


def generate(students, questions, concepts, events, pattern, seed=0):
    if min(students, questions, concepts, events) < 1:
        raise ConfigError("synthetic sizes must all be >= 1")
    if concepts > questions:
        raise ConfigError("need at least one question per concept")
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")
    rng = np.random.default_rng(seed)
    concept_of = np.arange(questions) % concepts
    meta = {"pattern": pattern, "seed": seed, "students": students,
            "questions": questions, "concepts": concepts, "events": events}
    if pattern == "concept-skill":
        rows, extra = _concept_skill(rng, students, questions, concepts, events,
                                     concept_of)
    elif pattern == "forgetting":
        rows, extra = _forgetting(rng, students, questions, events, concept_of)
    else:
        rows, extra = _repeat_guess(rng, students, questions, events, concept_of)
    meta.update(extra)
    meta["concept_of_question"] = concept_of.tolist()
    return SynthResult(rows=rows, meta=meta)


def _start_clocks(rng, students):
    # stagger students across a month so streams interleave
    return rng.integers(0, 30 * DAY, size=students).astype(np.int64)


def _concept_skill(rng, students, questions, concepts, events, concept_of):
    low, high = 0.05, 0.95
    skill = rng.choice([low, high], size=(students, concepts))
    clock = _start_clocks(rng, students)
    rows = []
    for _ in range(events):
        s = int(rng.integers(students))
        q = int(rng.integers(questions))
        clock[s] += int(rng.integers(60, 7200))
        p = skill[s, concept_of[q]]
        r = int(rng.random() < p)
        rows.append((s, q, int(clock[s]), r, int(concept_of[q])))
    extra = {"skill_low": low, "skill_high": high}
    if skill.size <= 10000:
        extra["skill"] = skill.tolist()
    return rows, extra


def _forgetting(rng, students, questions, events, concept_of):
    session_len = 5
    p_within, p_after_break = 0.9, 0.15
    clock = _start_clocks(rng, students)
    position = np.zeros(students, dtype=np.int64)  # events since session start
    rows = []
    for _ in range(events):
        s = int(rng.integers(students))
        q = int(rng.integers(questions))
        if position[s] == 0:
            # break before a new session: 1.5..30 days, log-uniform
            gap = int(np.exp(rng.uniform(np.log(1.5 * DAY), np.log(30 * DAY))))
            p = p_after_break
        else:
            gap = int(rng.integers(30, 1800))
            p = p_within
        clock[s] += gap
        r = int(rng.random() < p)
        rows.append((s, q, int(clock[s]), r, int(concept_of[q])))
        position[s] = (position[s] + 1) % session_len
    return rows, {"session_len": session_len, "p_within_session": p_within,
                  "p_after_break": p_after_break,
                  "break_days_range": [1.5, 30.0], "within_gap_seconds": [30, 1800]}


def _repeat_guess(rng, students, questions, events, concept_of):
    flip_after = 3
    p_early, p_late = 0.1, 0.95
    clock = _start_clocks(rng, students)
    current = rng.integers(0, questions, size=students)
    attempts = {}
    rows = []
    for _ in range(events):
        s = int(rng.integers(students))
        q = int(current[s])
        clock[s] += int(rng.integers(60, 1800))
        n_prior = attempts.get((s, q), 0)
        p = p_early if n_prior < flip_after - 1 else p_late
        r = int(rng.random() < p)
        rows.append((s, q, int(clock[s]), r, int(concept_of[q])))
        attempts[(s, q)] = n_prior + 1
        # move on after a success (usually) or occasionally give up
        if (r == 1 and rng.random() < 0.8) or rng.random() < 0.05:
            current[s] = rng.integers(questions)
    return rows, {"flip_after_attempts": flip_after, "p_early": p_early,
                  "p_late": p_late}
