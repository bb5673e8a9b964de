"""Time-sorted interaction store, neighbor windows, and split planning.

Events are `(student, question, timestamp, response, concept)` tuples kept in
ascending time order; per-node adjacency indices answer "latest N events of
this node strictly before time t" queries with one binary search. The store
is immutable after ingest, so concurrent readers are safe.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, EmptyGraphError, SnapshotError, UserInputError

STUDENT = "student"
QUESTION = "question"

CSV_COLUMNS = ("student_id", "question_id", "timestamp", "correct", "concept_id")

SNAPSHOT_MAGIC = b"KTGRAPH-SNAP\x01"


@dataclass(frozen=True)
class Interaction:
    """One answering event; an edge of the dynamic graph."""

    student_id: int
    question_id: int
    timestamp: int
    response: int
    concept_id: int


@dataclass(frozen=True)
class NeighborSequence:
    """Latest-N history of one node before ``as_of``, left-padded.

    Valid entries occupy a contiguous suffix in ascending time order;
    padded slots hold zeros and a False mask bit.
    """

    owner: int
    owner_kind: str
    as_of: int
    neighbor_ids: np.ndarray  # question ids (student side) or student ids (question side)
    timestamps: np.ndarray
    responses: np.ndarray
    concepts: np.ndarray
    valid_mask: np.ndarray

    @property
    def num_valid(self):
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class SplitPlan:
    """Chronological train/val/test ranges plus the inductive test subset."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    inductive_test_indices: np.ndarray
    ratios: tuple[float, float, float]
    boundary_timestamps: tuple[int, int]


class DynamicGraph:
    """Append-only event log with per-node temporal adjacency indices."""

    def __init__(self, students, questions, timestamps, responses, concepts,
                 num_students, num_questions, num_concepts):
        self.students = np.ascontiguousarray(students, dtype=np.int64)
        self.questions = np.ascontiguousarray(questions, dtype=np.int64)
        self.timestamps = np.ascontiguousarray(timestamps, dtype=np.int64)
        self.responses = np.ascontiguousarray(responses, dtype=np.int64)
        self.concepts = np.ascontiguousarray(concepts, dtype=np.int64)
        self.num_students = int(num_students)
        self.num_questions = int(num_questions)
        self.num_concepts = int(num_concepts)
        self.num_events = len(self.timestamps)
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("events must be non-decreasing in timestamp")
        self.student_adj = _build_adjacency(self.students, self.num_students)
        self.question_adj = _build_adjacency(self.questions, self.num_questions)
        # cached per-node event times, for binary search in recent_neighbors
        self._student_adj_times = [self.timestamps[a] for a in self.student_adj]
        self._question_adj_times = [self.timestamps[a] for a in self.question_adj]

    @property
    def counts(self):
        return (self.num_students, self.num_questions, self.num_concepts, self.num_events)

    def event(self, i):
        return Interaction(int(self.students[i]), int(self.questions[i]),
                           int(self.timestamps[i]), int(self.responses[i]),
                           int(self.concepts[i]))

    def iter_rows(self):
        """Events in stored (time) order, as plain tuples."""
        for i in range(self.num_events):
            yield (int(self.students[i]), int(self.questions[i]),
                   int(self.timestamps[i]), int(self.responses[i]),
                   int(self.concepts[i]))

    def _adj(self, kind):
        if kind == STUDENT:
            return self.student_adj, self._student_adj_times, self.num_students
        if kind == QUESTION:
            return self.question_adj, self._question_adj_times, self.num_questions
        raise ValueError(f"unknown node kind {kind!r}")


def _build_adjacency(node_ids, num_nodes):
    # stable argsort keeps event indices increasing within each node
    order = np.argsort(node_ids, kind="stable")
    sorted_ids = node_ids[order]
    bounds = np.searchsorted(sorted_ids, np.arange(num_nodes + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(num_nodes)]


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _validate_row(row, line):
    if len(row) != 5:
        raise DataFormatError(f"expected 5 fields, got {len(row)}", line=line)
    s, q, t, r, k = row
    if r not in (0, 1):
        raise DataFormatError(f"response must be 0 or 1, got {r!r}", line=line)
    return row


def ingest(rows, filter_min_count=5):
    """Build a DynamicGraph from raw (s, q, t, r, k) rows.

    Students and questions with fewer than ``filter_min_count`` events are
    removed iteratively until a fixed point, then surviving ids are remapped
    to dense ranges in order of first appearance in the time-sorted log.
    Sorting is stable, so same-timestamp rows keep their input order.
    """
    if filter_min_count < 0:
        raise ConfigError("filter_min_count must be >= 0")
    rows = [_validate_row(tuple(row), line=i + 1) for i, row in enumerate(rows)]

    while True:
        s_count = Counter(r[0] for r in rows)
        q_count = Counter(r[1] for r in rows)
        kept = [r for r in rows
                if s_count[r[0]] >= filter_min_count and q_count[r[1]] >= filter_min_count]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise EmptyGraphError(
            f"no events survive the min-count filter (min_count={filter_min_count})")

    rows.sort(key=lambda r: r[2])  # stable: ties keep input order

    s_map, q_map, k_map = {}, {}, {}
    for s, q, _, _, k in rows:
        s_map.setdefault(s, len(s_map))
        q_map.setdefault(q, len(q_map))
        k_map.setdefault(k, len(k_map))

    n = len(rows)
    students = np.fromiter((s_map[r[0]] for r in rows), dtype=np.int64, count=n)
    questions = np.fromiter((q_map[r[1]] for r in rows), dtype=np.int64, count=n)
    timestamps = np.fromiter((r[2] for r in rows), dtype=np.int64, count=n)
    responses = np.fromiter((r[3] for r in rows), dtype=np.int64, count=n)
    concepts = np.fromiter((k_map[r[4]] for r in rows), dtype=np.int64, count=n)
    return DynamicGraph(students, questions, timestamps, responses, concepts,
                        len(s_map), len(q_map), len(k_map))


def read_interactions_csv(path):
    """Parse the interaction CSV schema, reporting errors with line numbers."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file: header row required", line=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"missing column(s): {', '.join(missing)}", line=1)
        idx = [header.index(c) for c in CSV_COLUMNS]
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            if len(rec) < len(header):
                raise DataFormatError("missing field", line=line_no)
            try:
                s = int(rec[idx[0]])
                q = int(rec[idx[1]])
                t = int(float(rec[idx[2]]))
                r = int(rec[idx[3]])
                # a multi-concept tag keeps only its first concept
                k = int(str(rec[idx[4]]).replace(";", "_").split("_")[0])
            except ValueError as exc:
                raise DataFormatError(f"unparseable field ({exc})", line=line_no) from None
            if r not in (0, 1):
                raise DataFormatError(f"correct must be 0 or 1, got {r}", line=line_no)
            rows.append((s, q, t, r, k))
    return rows


def write_interactions_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def save_snapshot(graph, path):
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        np.save(fh, np.asarray(graph.counts, dtype=np.int64))
        for arr in (graph.students, graph.questions, graph.timestamps,
                    graph.responses, graph.concepts):
            np.save(fh, arr)


def load_snapshot(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(SNAPSHOT_MAGIC))
            if magic != SNAPSHOT_MAGIC:
                raise SnapshotError(f"{path}: not a graph snapshot (bad magic/version)")
            counts = np.load(fh, allow_pickle=False)
            arrays = [np.load(fh, allow_pickle=False) for _ in range(5)]
    except SnapshotError:
        raise
    except (OSError, ValueError, EOFError) as exc:
        raise SnapshotError(f"{path}: corrupt snapshot ({exc})") from None
    if counts.shape != (4,):
        raise SnapshotError(f"{path}: corrupt snapshot header")
    s, q, k, i = (int(v) for v in counts)
    if any(len(a) != i for a in arrays):
        raise SnapshotError(f"{path}: corrupt snapshot (length mismatch)")
    return DynamicGraph(*arrays, num_students=s, num_questions=q, num_concepts=k)


# ---------------------------------------------------------------------------
# neighbor windows and batching
# ---------------------------------------------------------------------------

def recent_neighbors(graph, node, kind, as_of, exclude_event=None, n=50):
    """Latest ``n`` events of ``node`` strictly before ``as_of``, left-padded.

    Same-timestamp events are excluded by the strict inequality, which keeps
    sibling events at one timestamp out of each other's histories;
    ``exclude_event`` additionally drops one event index unconditionally.
    """
    if n < 1:
        raise ConfigError("neighbor window must be >= 1")
    adj, adj_times, num_nodes = graph._adj(kind)
    if not 0 <= node < num_nodes:
        raise UserInputError(f"unknown {kind} id {node}")
    hi = int(np.searchsorted(adj_times[node], as_of, side="left"))
    chosen = adj[node][:hi]
    if exclude_event is not None:
        chosen = chosen[chosen != exclude_event]
    chosen = chosen[-n:]
    k = len(chosen)

    ids = np.zeros(n, dtype=np.int64)
    ts = np.zeros(n, dtype=np.int64)
    resp = np.zeros(n, dtype=np.int64)
    conc = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    if k:
        other = graph.questions if kind == STUDENT else graph.students
        ids[n - k:] = other[chosen]
        ts[n - k:] = graph.timestamps[chosen]
        resp[n - k:] = graph.responses[chosen]
        conc[n - k:] = graph.concepts[chosen]
        mask[n - k:] = True
    return NeighborSequence(owner=int(node), owner_kind=kind, as_of=int(as_of),
                            neighbor_ids=ids, timestamps=ts, responses=resp,
                            concepts=conc, valid_mask=mask)


def batch_neighbor_arrays(graph, kind, node_ids, as_of_times, n):
    """Stacked neighbor windows for a batch: [B, n] arrays plus the mask."""
    b = len(node_ids)
    ids = np.zeros((b, n), dtype=np.int64)
    ts = np.zeros((b, n), dtype=np.int64)
    resp = np.zeros((b, n), dtype=np.int64)
    conc = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    adj, adj_times, _ = graph._adj(kind)
    other = graph.questions if kind == STUDENT else graph.students
    for row, (node, as_of) in enumerate(zip(node_ids, as_of_times)):
        hi = int(np.searchsorted(adj_times[node], as_of, side="left"))
        chosen = adj[node][max(0, hi - n):hi]
        k = len(chosen)
        if k:
            ids[row, n - k:] = other[chosen]
            ts[row, n - k:] = graph.timestamps[chosen]
            resp[row, n - k:] = graph.responses[chosen]
            conc[row, n - k:] = graph.concepts[chosen]
            mask[row, n - k:] = True
    return ids, ts, resp, conc, mask


def chronological_batches(index_range, batch_size):
    """Consecutive index slices of ``batch_size`` over (start, stop)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    start, stop = index_range
    for lo in range(start, stop, batch_size):
        yield np.arange(lo, min(lo + batch_size, stop), dtype=np.int64)


def plan_split(graph, ratios=(0.8, 0.1, 0.1)):
    """Chronological split at floor(r0*I) and floor((r0+r1)*I).

    Inductive test events are those whose question never appears in the
    train range.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    i = graph.num_events
    if i < 3:
        raise ConfigError(f"need at least 3 events to split, got {i}")
    a = int(np.floor(ratios[0] * i))
    b = int(np.floor((ratios[0] + ratios[1]) * i))
    train_questions = np.unique(graph.questions[:a])
    test_idx = np.arange(b, i, dtype=np.int64)
    unseen = ~np.isin(graph.questions[b:], train_questions)
    return SplitPlan(train_range=(0, a), val_range=(a, b), test_range=(b, i),
                     inductive_test_indices=test_idx[unseen],
                     ratios=tuple(float(r) for r in ratios),
                     boundary_timestamps=(int(graph.timestamps[min(a, i - 1)]),
                                          int(graph.timestamps[min(b, i - 1)])))


# ---------------------------------------------------------------------------
# dataset statistics
# ---------------------------------------------------------------------------

DAY_SECONDS = 86400

# <1min, <1h, <1day, <1week and the open >=1week bucket
DEFAULT_BUCKET_EDGES = (60, 3600, 86400, 604800)
BUCKET_LABELS = ("<1min", "<1h", "<1day", "<1week", ">=1week")


@dataclass(frozen=True)
class IntervalStats:
    bucket_edges: tuple
    counts: np.ndarray  # len(bucket_edges) + 1
    n_intervals: int
    frac_below_1day: float
    frac_above_1day: float


def interval_stats(graph, bucket_edges=DEFAULT_BUCKET_EDGES):
    """Histogram of consecutive per-student time intervals."""
    edges = list(bucket_edges)
    if edges != sorted(edges):
        raise ConfigError("bucket edges must be ascending")
    deltas = [np.diff(times) for times in graph._student_adj_times if len(times) > 1]
    if deltas:
        dt = np.concatenate(deltas)
    else:
        dt = np.zeros(0, dtype=np.int64)
    counts = np.bincount(np.searchsorted(edges, dt, side="right"),
                         minlength=len(edges) + 1)
    n = len(dt)
    below = float((dt < DAY_SECONDS).sum() / n) if n else 0.0
    above = float((dt >= DAY_SECONDS).sum() / n) if n else 0.0
    return IntervalStats(bucket_edges=tuple(edges), counts=counts, n_intervals=n,
                         frac_below_1day=below, frac_above_1day=above)


@dataclass(frozen=True)
class RepeatStats:
    """Repetition behavior over sampled (student, question) pairs."""

    pair_repeats: np.ndarray
    attempts_before_success: np.ndarray  # only pairs that eventually succeed
    never_correct_count: int
    max_repeats_per_student: np.ndarray
    mean_repeats_per_student: np.ndarray
    sampled_pairs: int
    max_repeats: int = field(default=0)
    mean_repeats: float = field(default=0.0)
    mean_attempts_before_success: float = field(default=float("nan"))


def repeat_stats(graph, sample_size=10000, seed=0):
    """Sample interacting (student, question) pairs and count repetitions.

    For each pair: the repetition count, and the number of failed attempts
    before the first correct answer (pairs never answered correctly are
    excluded from that statistic and counted separately).
    """
    if sample_size < 1:
        raise ConfigError("sample_size must be >= 1")
    key = graph.students * np.int64(graph.num_questions) + graph.questions
    order = np.argsort(key, kind="stable")  # index order preserved within a pair
    sorted_key = key[order]
    pair_keys, starts = np.unique(sorted_key, return_index=True)
    ends = np.append(starts[1:], len(sorted_key))

    rng = np.random.default_rng(seed)
    npairs = len(pair_keys)
    if sample_size >= npairs:
        picked = np.arange(npairs)
    else:
        picked = rng.choice(npairs, size=sample_size, replace=False)
        picked.sort()

    repeats = np.empty(len(picked), dtype=np.int64)
    attempts = []
    students_of_pair = np.empty(len(picked), dtype=np.int64)
    never = 0
    for j, p in enumerate(picked):
        ev = order[starts[p]:ends[p]]
        resp = graph.responses[ev]
        repeats[j] = len(ev)
        students_of_pair[j] = pair_keys[p] // graph.num_questions
        hit = np.flatnonzero(resp == 1)
        if len(hit):
            attempts.append(int(hit[0]))
        else:
            never += 1

    per_student_max, per_student_mean = [], []
    for s in np.unique(students_of_pair):
        r = repeats[students_of_pair == s]
        per_student_max.append(int(r.max()))
        per_student_mean.append(float(r.mean()))

    attempts_arr = np.asarray(attempts, dtype=np.int64)
    return RepeatStats(
        pair_repeats=repeats,
        attempts_before_success=attempts_arr,
        never_correct_count=never,
        max_repeats_per_student=np.asarray(per_student_max, dtype=np.int64),
        mean_repeats_per_student=np.asarray(per_student_mean, dtype=np.float64),
        sampled_pairs=len(picked),
        max_repeats=int(repeats.max()) if len(picked) else 0,
        mean_repeats=float(repeats.mean()) if len(picked) else 0.0,
        mean_attempts_before_success=(float(attempts_arr.mean())
                                      if len(attempts_arr) else float("nan")),
    )
