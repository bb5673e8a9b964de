"""Twin recurrent towers over neighbor windows, plus the pair-scoring head.

The student tower digests the student's own answering history; the question
tower digests who answered this question and how. The towers share only the
performance encoder, the repeat-flag encoder, and the concept table; each has
its own recurrent cell, fusion layer, interval encoder, and (by default) its
own output projection.

Everything is batch-vectorized: a window slab [B, N] flows through the
encoders as one [(B*N), dim] tensor and through the recurrence as N steps of
[B, dim] matrices, with masked steps passing state through unchanged.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import (ConceptEmbedding, DualTimeEncoder, MultisetIndicator,
                       PerformanceEncoder, uniform_init)
from .graph import QUESTION, STUDENT, batch_neighbor_arrays


class GruCell:
    """Standard gated recurrent cell; update rule h' = (1-z)*h + z*cand."""

    def __init__(self, dim, rng, name):
        self.dim = dim

        def weight(suffix):
            return T.Parameter(f"{name}.{suffix}", uniform_init(rng, (dim, dim), dim))

        self.w_z = weight("w_z")
        self.u_z = weight("u_z")
        self.b_z = T.Parameter(f"{name}.b_z", np.zeros(dim))
        self.w_r = weight("w_r")
        self.u_r = weight("u_r")
        self.b_r = T.Parameter(f"{name}.b_r", np.zeros(dim))
        self.w_h = weight("w_h")
        self.u_h = weight("u_h")
        self.b_h = T.Parameter(f"{name}.b_h", np.zeros(dim))

    def parameters(self):
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]

    def step(self, x, h):
        """One update of the hidden state for a [B, dim] input row block."""
        z = T.sigmoid(T.add(T.add(T.matmul(x, self.w_z.value),
                                  T.matmul(h, self.u_z.value)), self.b_z.value))
        r = T.sigmoid(T.add(T.add(T.matmul(x, self.w_r.value),
                                  T.matmul(h, self.u_r.value)), self.b_r.value))
        cand = T.tanh(T.add(T.add(T.matmul(x, self.w_h.value),
                                  T.matmul(T.mul(r, h), self.u_h.value)), self.b_h.value))
        ones = T.constant(np.ones_like(z.data))
        return T.add(T.mul(T.sub(ones, z), h), T.mul(z, cand))


class Tower:
    """Fusion affine + recurrence + output projection for one node side."""

    def __init__(self, dim, n_blocks, rng, name, out_params=None):
        self.dim = dim
        self.integ_w = T.Parameter(f"{name}.integ_w",
                                   uniform_init(rng, (n_blocks * dim, dim), n_blocks * dim))
        self.integ_b = T.Parameter(f"{name}.integ_b", np.zeros(dim))
        self.gru = GruCell(dim, rng, name=f"{name}.gru")
        if out_params is None:
            self.out_w = T.Parameter(f"{name}.out_w", uniform_init(rng, (dim, dim), dim))
            self.out_b = T.Parameter(f"{name}.out_b", np.zeros(dim))
            self.owns_out = True
        else:
            self.out_w, self.out_b = out_params
            self.owns_out = False

    def parameters(self):
        params = [self.integ_w, self.integ_b] + self.gru.parameters()
        if self.owns_out:
            params += [self.out_w, self.out_b]
        return params

    def fuse(self, blocks, dropout_rate=0.0, rng=None):
        fused = T.add(T.matmul(T.concat_cols(blocks), self.integ_w.value),
                      self.integ_b.value)
        if dropout_rate > 0.0 and rng is not None:
            fused = T.dropout(fused, dropout_rate, rng)
        return fused

    def final_state(self, fused, mask):
        """Run the recurrence over the window; masked steps keep the state."""
        b, n = mask.shape
        h = T.constant(np.zeros((b, self.dim)))
        base = np.arange(b, dtype=np.int64) * n
        for t in range(n):
            col = mask[:, t]
            if not col.any():
                continue
            x_t = T.take_rows(fused, base + t, assume_unique=True)
            h_new = self.gru.step(x_t, h)
            if col.all():
                h = h_new
            else:
                keep = np.repeat(col.reshape(-1, 1).astype(np.float64), self.dim, axis=1)
                h = T.add(T.mul(h_new, T.constant(keep)),
                          T.mul(h, T.constant(1.0 - keep)))
        return h

    def project(self, state):
        return T.add(T.matmul(state, self.out_w.value), self.out_b.value)


class PredictorHead:
    """Two-layer scorer over the concatenated tower embeddings."""

    def __init__(self, dim, rng, name="head"):
        self.w1 = T.Parameter(f"{name}.w1", uniform_init(rng, (2 * dim, dim), 2 * dim))
        self.b1 = T.Parameter(f"{name}.b1", np.zeros(dim))
        self.w2 = T.Parameter(f"{name}.w2", uniform_init(rng, (dim, 1), dim))
        self.b2 = T.Parameter(f"{name}.b2", np.zeros(1))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, x_s, x_q):
        hidden = T.relu(T.add(T.matmul(T.concat_cols([x_s, x_q]), self.w1.value),
                              self.b1.value))
        return T.add(T.matmul(hidden, self.w2.value), self.b2.value)


class KnowledgeTracer:
    """The full model: shared encoders, twin towers, scoring head."""

    def __init__(self, cfg, num_questions, num_concepts, seed=None):
        cfg.validate()
        self.cfg = cfg
        self.num_questions = int(num_questions)
        self.num_concepts = int(num_concepts)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dim = cfg.dim

        self.perf = PerformanceEncoder(dim, rng)
        self.time_student = DualTimeEncoder(dim, rng, threshold=cfg.delta_t_threshold,
                                            dual=cfg.use_dual_time, enabled=cfg.use_time,
                                            name="time_student")
        self.time_question = DualTimeEncoder(dim, rng, threshold=cfg.delta_t_threshold,
                                             dual=cfg.use_dual_time, enabled=cfg.use_time,
                                             name="time_question")
        self.multiset = MultisetIndicator(dim, rng, enabled=cfg.use_multiset)
        self.concept_emb = ConceptEmbedding(num_concepts, dim, rng)

        self.student_tower = Tower(dim, n_blocks=4, rng=rng, name="student_tower")
        self.question_tower = None
        self.question_table = None
        if cfg.question_mode == "dynamic":
            shared = ((self.student_tower.out_w, self.student_tower.out_b)
                      if cfg.share_output_projection else None)
            self.question_tower = Tower(dim, n_blocks=3, rng=rng,
                                        name="question_tower", out_params=shared)
        elif cfg.question_mode == "question_id_embed":
            self.question_table = T.Parameter("question_embed.table",
                                              uniform_init(rng, (num_questions, dim), dim))
        else:  # concept_id_embed
            self.question_table = T.Parameter("concept_id_embed.table",
                                              uniform_init(rng, (num_concepts, dim), dim))
        self.head = PredictorHead(dim, rng)

    # -- parameter access -------------------------------------------------

    def parameters(self):
        params = list(self.perf.parameters())
        params += self.time_student.parameters() + self.time_question.parameters()
        params += self.multiset.parameters() + self.concept_emb.parameters()
        params += self.student_tower.parameters()
        if self.question_tower is not None:
            params += self.question_tower.parameters()
        if self.question_table is not None:
            params.append(self.question_table)
        params += self.head.parameters()
        return params

    def parameter_count(self):
        return sum(p.value.data.size for p in self.parameters())

    def state_dict(self):
        return {p.name: p.value.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        mine = {p.name: p for p in self.parameters()}
        if set(state) != set(mine):
            missing = sorted(set(mine) - set(state))
            extra = sorted(set(state) - set(mine))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            p = mine[name]
            if arr.shape != p.value.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.value.data.shape}")
            p.value.data[...] = arr

    # -- forward passes ----------------------------------------------------

    def student_embedding(self, graph, student_ids, question_ids, concept_ids,
                          as_of, training=False, rng=None):
        n = self.cfg.neighbor_len
        nbr_q, ts, resp, conc, mask = batch_neighbor_arrays(
            graph, STUDENT, student_ids, as_of, n)
        flags = np.where(mask,
                         (nbr_q == np.asarray(question_ids).reshape(-1, 1)).astype(np.int64)
                         + (conc == np.asarray(concept_ids).reshape(-1, 1)).astype(np.int64),
                         0)
        blocks = [self.perf.encode(resp, mask),
                  self.time_student.encode(ts, mask, as_of),
                  self.multiset.encode(flags, mask),
                  self.concept_emb.encode(conc, mask)]
        tower = self.student_tower
        fused = tower.fuse(blocks, self._dropout(training), rng)
        return tower.project(tower.final_state(fused, mask))

    def question_embedding(self, graph, student_ids, question_ids, concept_ids,
                           as_of, training=False, rng=None):
        question_ids = np.asarray(question_ids, dtype=np.int64)
        concept_ids = np.asarray(concept_ids, dtype=np.int64)
        if self.question_table is not None:
            ids = (question_ids if self.cfg.question_mode == "question_id_embed"
                   else concept_ids)
            return T.take_rows(self.question_table.value, ids)
        n = self.cfg.neighbor_len
        nbr_s, ts, resp, _, mask = batch_neighbor_arrays(
            graph, QUESTION, question_ids, as_of, n)
        flags = np.where(mask,
                         (nbr_s == np.asarray(student_ids).reshape(-1, 1)).astype(np.int64),
                         0)
        blocks = [self.perf.encode(resp, mask),
                  self.time_question.encode(ts, mask, as_of),
                  self.multiset.encode(flags, mask)]
        tower = self.question_tower
        fused = tower.fuse(blocks, self._dropout(training), rng)
        state = tower.final_state(fused, mask)
        if self.cfg.use_concept_in_question_output:
            state = T.add(state, self.concept_emb.lookup(concept_ids))
        return tower.project(state)

    def pair_logits(self, graph, student_ids, question_ids, concept_ids, as_of,
                    training=False, rng=None):
        """Logit per (student, question) pair scored at its own time."""
        x_s = self.student_embedding(graph, student_ids, question_ids, concept_ids,
                                     as_of, training, rng)
        x_q = self.question_embedding(graph, student_ids, question_ids, concept_ids,
                                      as_of, training, rng)
        return self.head.logits(x_s, x_q)

    def event_logits(self, graph, event_indices, training=False, rng=None):
        """Logits and labels for stored events, histories strictly before each."""
        idx = np.asarray(event_indices, dtype=np.int64)
        logits = self.pair_logits(graph,
                                  graph.students[idx], graph.questions[idx],
                                  graph.concepts[idx], graph.timestamps[idx],
                                  training, rng)
        return logits, graph.responses[idx]

    def _dropout(self, training):
        return self.cfg.dropout if training else 0.0
