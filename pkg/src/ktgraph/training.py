"""Training loop, evaluation protocols, checkpoints, and the mastery trace.

The model recomputes histories from the event log on every forward, so there
is no cross-batch state: evaluation is stateless and the transductive /
inductive protocols differ only in which test events get scored. Batches
follow global time order; inside a batch, forward/backward runs in slices of
``compute_chunk`` events to bound peak memory, with gradients accumulating
across slices before one optimizer step.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointMismatchError, UserInputError
from .graph import BUCKET_LABELS, DEFAULT_BUCKET_EDGES, chronological_batches
from .metrics import UndefinedMetricError, auc_roc, average_precision

CHECKPOINT_MAGIC = b"KTGRAPH-CKPT\x01"

TRAIN_LOG_COLUMNS = ("epoch", "train_loss", "val_ap", "val_auc", "seconds")

# the loss op lives with the tensor primitives; re-exported here because it
# is part of this module's contract
bce_loss = T.bce_with_logits


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _bce_np(logits, labels):
    x = np.asarray(logits, dtype=np.float64)
    r = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(x, 0.0) - x * r + np.log1p(np.exp(-np.abs(x)))))


def predict_pair(model, graph, student, question, concept, as_of):
    """Probability the student answers the question correctly at ``as_of``."""
    logits = model.pair_logits(graph,
                               np.asarray([student]), np.asarray([question]),
                               np.asarray([concept]), np.asarray([as_of]))
    return float(_sigmoid_np(logits.data)[0, 0])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    n_events: int
    ap: float
    auc: float
    defined: bool
    loss: float
    wall_time_s: float

    def to_text(self):
        lines = [f"mode={self.mode}",
                 f"n_events={self.n_events}",
                 f"ap={self.ap:.6f}" if self.defined else "ap=undefined",
                 f"auc={self.auc:.6f}" if self.defined else "auc=undefined",
                 f"defined={'true' if self.defined else 'false'}",
                 f"loss={self.loss:.6f}",
                 f"wall_time_s={self.wall_time_s:.3f}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        defined = kv["defined"] == "true"
        return cls(mode=kv["mode"], n_events=int(kv["n_events"]),
                   ap=float(kv["ap"]) if defined else float("nan"),
                   auc=float(kv["auc"]) if defined else float("nan"),
                   defined=defined, loss=float(kv["loss"]),
                   wall_time_s=float(kv["wall_time_s"]))


def score_events(model, graph, indices, compute_chunk=512):
    """Probabilities, labels, and mean loss for events, without recording."""
    idx = np.asarray(indices, dtype=np.int64)
    probs = np.empty(len(idx), dtype=np.float64)
    logits_all = np.empty(len(idx), dtype=np.float64)
    for lo in range(0, len(idx), compute_chunk):
        chunk = idx[lo:lo + compute_chunk]
        logits, _ = model.event_logits(graph, chunk, training=False)
        logits_all[lo:lo + len(chunk)] = logits.data[:, 0]
    probs[:] = _sigmoid_np(logits_all)
    labels = graph.responses[idx]
    loss = _bce_np(logits_all, labels) if len(idx) else float("nan")
    return probs, labels, loss


def report_from_scores(scores, labels, mode, loss=float("nan"), wall_time_s=0.0):
    try:
        ap = average_precision(scores, labels)
        auc = auc_roc(scores, labels)
        defined = True
    except (UndefinedMetricError, ValueError):
        ap = auc = float("nan")
        defined = False
    if len(scores) == 0:
        defined = False
    return EvalReport(mode=mode, n_events=len(scores), ap=ap, auc=auc,
                      defined=defined, loss=loss, wall_time_s=wall_time_s)


def evaluate(graph, split, model, mode="transductive", compute_chunk=512):
    """Score the test range (or its inductive subset) with full histories.

    Node hiding for the inductive protocol is enforced by the split (those
    questions never occur in the train range); histories always come from
    the complete event log before each scored event's timestamp.
    """
    if mode == "transductive":
        indices = np.arange(*split.test_range, dtype=np.int64)
    elif mode == "inductive":
        indices = split.inductive_test_indices
    else:
        raise UserInputError(f"unknown evaluation mode {mode!r}")
    t0 = time.perf_counter()
    probs, labels, loss = score_events(model, graph, indices, compute_chunk)
    return report_from_scores(probs, labels, mode, loss,
                              wall_time_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ap: float
    val_auc: float
    seconds: float


@dataclass
class TrainResult:
    best_state: dict
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    diverged: bool = False
    epochs_run: int = 0
    wall_time_s: float = 0.0


def _train_batch(model, graph, batch_idx, cfg, rng):
    """Forward/backward in chunks, then one Adam step; returns the batch loss."""
    total = len(batch_idx)
    batch_loss = 0.0
    for lo in range(0, total, cfg.compute_chunk):
        chunk = batch_idx[lo:lo + cfg.compute_chunk]
        with T.Tape() as tape:
            logits, labels = model.event_logits(graph, chunk, training=True, rng=rng)
            loss = T.scale(T.bce_with_logits(logits, labels), len(chunk) / total)
        tape.backward(loss)
        batch_loss += loss.data.item()
    T.adam_step(model.parameters(), cfg.lr, cfg.adam_betas, cfg.adam_eps,
                cfg.weight_decay)
    return batch_loss


def train(graph, split, model, cfg, progress=None):
    """Optimize over chronological train batches with val-AUC early stopping.

    Returns the best-validation checkpoint (the model is also left loaded
    with it) and a per-epoch log. A non-finite loss aborts the run and
    restores the last completed epoch's parameters.
    """
    cfg.validate()
    T.tune_allocator()
    rng = np.random.default_rng(cfg.seed + 1)  # dropout stream
    t_start = time.perf_counter()

    result = TrainResult(best_state=model.state_dict())
    last_good = model.state_dict()
    best_score = -math.inf
    epochs_since_best = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        events_seen = 0
        try:
            for batch in chronological_batches(split.train_range, cfg.batch_size):
                batch_loss = _train_batch(model, graph, batch, cfg, rng)
                if not math.isfinite(batch_loss):
                    raise T.NonFiniteError("batch loss is not finite")
                loss_sum += batch_loss * len(batch)
                events_seen += len(batch)
        except T.NonFiniteError:
            model.load_state_dict(last_good)
            result.diverged = True
            break
        train_loss = loss_sum / events_seen if events_seen else float("nan")

        val_ap = val_auc = float("nan")
        evaluated = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
        if evaluated:
            val_idx = np.arange(*split.val_range, dtype=np.int64)
            probs, labels, _ = score_events(model, graph, val_idx, cfg.compute_chunk)
            report = report_from_scores(probs, labels, "validation")
            val_ap, val_auc = report.ap, report.auc

        record = EpochRecord(epoch=epoch, train_loss=train_loss,
                             val_ap=val_ap, val_auc=val_auc,
                             seconds=time.perf_counter() - t0)
        result.log.append(record)
        result.epochs_run = epoch + 1
        if progress is not None:
            progress(record)

        last_good = model.state_dict()
        if evaluated:
            # fall back to train loss when the val slice cannot define an AUC
            score = val_auc if math.isfinite(val_auc) else -train_loss
            if score > best_score:
                best_score = score
                result.best_state = model.state_dict()
                result.best_epoch = epoch
                result.best_val_auc = val_auc
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if cfg.patience is not None and epochs_since_best >= cfg.patience:
                break

    model.load_state_dict(result.best_state)
    result.wall_time_s = time.perf_counter() - t_start
    return result


def write_train_log(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, f"{r.train_loss:.8f}",
                             f"{r.val_ap:.6f}", f"{r.val_auc:.6f}",
                             f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, cfg):
    state = model.state_dict()
    header = {
        "version": 1,
        "config_hash": cfg.model_hash(model.num_questions, model.num_concepts),
        "model_config": cfg.model_dict(model.num_questions, model.num_concepts),
        "config": cfg.to_dict(),
        "names": list(state),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in header["names"]:
            np.save(fh, state[name])


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UserInputError(f"{path}: not a checkpoint file (bad magic/version)")
        size = int.from_bytes(fh.read(8), "little")
        return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path, model, cfg):
    """Load parameters, refusing on any model-config mismatch."""
    header = read_checkpoint_header(path)
    expected = cfg.model_hash(model.num_questions, model.num_concepts)
    if header["config_hash"] != expected:
        current = cfg.model_dict(model.num_questions, model.num_concepts)
        stored = header["model_config"]
        diffs = [f"  {key}: checkpoint={stored.get(key)!r} current={current.get(key)!r}"
                 for key in sorted(set(stored) | set(current))
                 if stored.get(key) != current.get(key)]
        raise CheckpointMismatchError(
            "checkpoint was built under a different model config:\n" + "\n".join(diffs))
    with open(path, "rb") as fh:
        fh.read(len(CHECKPOINT_MAGIC))
        size = int.from_bytes(fh.read(8), "little")
        fh.read(size)
        state = {name: np.load(fh, allow_pickle=False) for name in header["names"]}
    model.load_state_dict(state)
    return header


# ---------------------------------------------------------------------------
# mastery trace
# ---------------------------------------------------------------------------

@dataclass
class TraceStep:
    step: int
    timestamp: int
    probability: float
    gap_seconds: int
    gap_bucket: str
    multiset_flag: int
    attempted_question: int
    response: int


@dataclass
class TraceResult:
    student: int
    question: int
    target_concept: int
    steps: list[TraceStep]
    truncated: bool


def mastery_trace(graph, model, student, question, upto=None, steps=15):
    """Predicted mastery of one question across a student's recent events.

    Each step scores the (student, question) pair as of just after one of
    the student's last ``steps`` events before ``upto``, annotated with the
    interval bucket and whether that event touches the traced question or
    its concept.
    """
    if not 0 <= student < graph.num_students:
        raise UserInputError(f"unknown student id {student}")
    if not 0 <= question < graph.num_questions:
        raise UserInputError(f"unknown question id {question}")
    if upto is None:
        upto = int(graph.timestamps[-1]) + 1
    adj = graph.student_adj[student]
    before = adj[graph.timestamps[adj] < upto]
    if len(before) == 0:
        raise UserInputError(f"student {student} has no events before {upto}")
    truncated = steps > len(before)
    chosen = before[-steps:]

    target_concept = int(graph.concepts[graph.question_adj[question][0]])
    times = graph.timestamps[chosen]
    as_of = times + 1  # just after each event
    k = len(chosen)
    logits = model.pair_logits(graph,
                               np.full(k, student), np.full(k, question),
                               np.full(k, target_concept), as_of)
    probs = _sigmoid_np(logits.data[:, 0])

    out = []
    for i in range(k):
        gap = int(times[i] - times[i - 1]) if i > 0 else 0
        bucket = BUCKET_LABELS[int(np.searchsorted(DEFAULT_BUCKET_EDGES, gap, "right"))]
        q_i = int(graph.questions[chosen[i]])
        k_i = int(graph.concepts[chosen[i]])
        flag = int(q_i == question) + int(k_i == target_concept)
        out.append(TraceStep(step=i, timestamp=int(times[i]),
                             probability=float(probs[i]), gap_seconds=gap,
                             gap_bucket=bucket, multiset_flag=flag,
                             attempted_question=q_i,
                             response=int(graph.responses[chosen[i]])))
    return TraceResult(student=student, question=question,
                       target_concept=target_concept, steps=out,
                       truncated=truncated)


def write_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "timestamp", "probability", "gap_seconds",
                         "gap_bucket", "multiset_flag", "attempted_question",
                         "response"))
        for s in trace.steps:
            writer.writerow([s.step, s.timestamp, f"{s.probability:.6f}",
                             s.gap_seconds, s.gap_bucket, s.multiset_flag,
                             s.attempted_question, s.response])
