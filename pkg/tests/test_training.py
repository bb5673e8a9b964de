"""Training loop, evaluation protocols, checkpoints, and traces."""

import numpy as np
import pytest

from ktgraph import tensor as T
from ktgraph.config import RunConfig
from ktgraph.errors import CheckpointMismatchError, UserInputError
from ktgraph.graph import ingest, plan_split
from ktgraph.metrics import auc_roc
from ktgraph.model import KnowledgeTracer
from ktgraph.training import (EvalReport, evaluate, load_checkpoint,
                              mastery_trace, predict_pair, report_from_scores,
                              save_checkpoint, score_events, train)


def tiny_cfg(**overrides):
    base = dict(neighbor_len=8, dim=8, dropout=0.0, batch_size=64,
                compute_chunk=32, epochs=3, patience=None, seed=1,
                weight_decay=0.0)
    base.update(overrides)
    return RunConfig(**base)


def concept_rule_graph(events=200, students=8, questions=12, concepts=4, seed=5):
    """Response is a constant per concept: even concepts always right."""
    rng = np.random.default_rng(seed)
    rows = []
    t = 0
    for _ in range(events):
        t += int(rng.integers(60, 600))
        q = int(rng.integers(questions))
        k = q % concepts
        rows.append((int(rng.integers(students)), q, t, int(k % 2 == 0), k))
    return ingest(rows, filter_min_count=0)


@pytest.fixture(scope="module")
def trained_setup():
    g = concept_rule_graph()
    cfg = tiny_cfg(epochs=40, lr=0.1, batch_size=20)
    split = plan_split(g, cfg.split_ratios)
    model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
    result = train(g, split, model, cfg)
    return g, cfg, split, model, result


class TestPredictPair:
    def test_zero_head_gives_half(self):
        g = concept_rule_graph(events=30)
        model = KnowledgeTracer(tiny_cfg(), g.num_questions, g.num_concepts)
        for p in model.head.parameters():
            p.value.data[...] = 0.0
        prob = predict_pair(model, g, 0, 0, 0, int(g.timestamps[-1]) + 1)
        assert prob == 0.5

    def test_probability_strictly_inside_unit_interval(self):
        g = concept_rule_graph(events=30)
        model = KnowledgeTracer(tiny_cfg(), g.num_questions, g.num_concepts)
        for i in (5, 10, 20):
            prob = predict_pair(model, g, int(g.students[i]), int(g.questions[i]),
                                int(g.concepts[i]), int(g.timestamps[i]))
            assert 0.0 < prob < 1.0

    def test_head_is_not_symmetric_in_its_inputs(self):
        rng = np.random.default_rng(8)
        g = concept_rule_graph(events=30)
        model = KnowledgeTracer(tiny_cfg(seed=11), g.num_questions, g.num_concepts)
        x = T.Tensor(rng.normal(size=(1, 8)))
        y = T.Tensor(rng.normal(size=(1, 8)))
        a = model.head.logits(x, y).data
        b = model.head.logits(y, x).data
        assert not np.allclose(a, b)


class TestTrainLoop:
    def test_lr_zero_is_a_null_optimizer(self):
        g = concept_rule_graph()
        cfg = tiny_cfg(lr=1e-12, epochs=2)  # lr=0 fails validation; use epsilon
        split = plan_split(g, cfg.split_ratios)
        model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
        before = model.state_dict()
        result = train(g, split, model, cfg)
        losses = [r.train_loss for r in result.log]
        assert abs(losses[0] - losses[1]) < 1e-6
        for name, arr in model.state_dict().items():
            assert np.allclose(arr, before[name], atol=1e-9)

    def test_exact_epoch_count_without_early_stop(self):
        g = concept_rule_graph()
        cfg = tiny_cfg(epochs=4, patience=None)
        split = plan_split(g, cfg.split_ratios)
        model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
        result = train(g, split, model, cfg)
        assert result.epochs_run == 4
        assert len(result.log) == 4
        logged_best = max(r.val_auc for r in result.log)
        assert result.best_val_auc == logged_best

    def test_seeded_epoch_zero_loss_reproducible(self):
        g = concept_rule_graph()
        losses = []
        for _ in range(2):
            cfg = tiny_cfg(epochs=1, dropout=0.1)
            split = plan_split(g, cfg.split_ratios)
            model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
            result = train(g, split, model, cfg)
            losses.append(result.log[0].train_loss)
        assert losses[0] == losses[1]

    def test_divergence_aborts_with_last_good_state(self):
        g = concept_rule_graph()
        cfg = tiny_cfg(epochs=3)
        split = plan_split(g, cfg.split_ratios)
        model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
        # huge weights on two chained layers overflow the first forward
        model.student_tower.out_w.value.data[...] = 1e200
        model.head.w1.value.data[...] = 1e200
        snapshot = model.state_dict()
        result = train(g, split, model, cfg)
        assert result.diverged
        assert result.log == []
        for name, arr in model.state_dict().items():
            assert np.array_equal(arr, snapshot[name])

    def test_planted_concept_rule_is_learned(self, trained_setup):
        g, cfg, split, model, result = trained_setup
        # per-concept majority vote is a perfect oracle on this data
        train_idx = np.arange(*split.train_range)
        majority = {}
        for i in train_idx:
            majority.setdefault(int(g.concepts[i]), []).append(int(g.responses[i]))
        oracle_scores = np.array([np.mean(majority[int(g.concepts[i])])
                                  for i in train_idx])
        assert auc_roc(oracle_scores, g.responses[train_idx]) == 1.0

        assert result.log[-1].train_loss < 0.1
        probs, labels, _ = score_events(model, g, train_idx, cfg.compute_chunk)
        assert auc_roc(probs, labels) > 0.95


class TestEvaluate:
    def test_perfect_and_constant_scorers(self):
        labels = np.array([1, 0, 1, 0, 1])
        perfect = report_from_scores(labels.astype(float), labels, "transductive")
        assert perfect.ap == 1.0 and perfect.auc == 1.0
        constant = report_from_scores(np.full(5, 0.5), labels, "transductive")
        assert constant.auc == 0.5

    def test_single_class_flagged_undefined(self):
        report = report_from_scores(np.array([0.3, 0.4]), np.array([1, 1]), "x")
        assert not report.defined

    def test_evaluation_is_stateless_and_repeatable(self, trained_setup):
        g, cfg, split, model, _ = trained_setup
        state = model.state_dict()
        a = evaluate(g, split, model, "transductive", cfg.compute_chunk)
        b = evaluate(g, split, model, "transductive", cfg.compute_chunk)
        assert a.ap == b.ap and a.auc == b.auc and a.n_events == b.n_events
        for name, arr in model.state_dict().items():
            assert np.array_equal(arr, state[name])

    def test_inductive_is_transductive_restricted(self, trained_setup):
        g, cfg, split, model, _ = trained_setup
        if len(split.inductive_test_indices) == 0:
            pytest.skip("no inductive events in this toy split")
        trans_probs, trans_labels, _ = score_events(
            model, g, np.arange(*split.test_range), cfg.compute_chunk)
        ind_probs, ind_labels, _ = score_events(
            model, g, split.inductive_test_indices, cfg.compute_chunk)
        offset = split.test_range[0]
        sel = split.inductive_test_indices - offset
        assert np.array_equal(trans_probs[sel], ind_probs)
        assert np.array_equal(trans_labels[sel], ind_labels)

    def test_empty_inductive_set_reports_undefined(self):
        rows = [(0, 0, t, t % 2, 0) for t in range(1, 41)]
        g = ingest(rows, filter_min_count=0)
        cfg = tiny_cfg()
        split = plan_split(g, cfg.split_ratios)
        model = KnowledgeTracer(cfg, g.num_questions, g.num_concepts)
        report = evaluate(g, split, model, "inductive", cfg.compute_chunk)
        assert not report.defined and report.n_events == 0

    def test_unknown_mode_rejected(self, trained_setup):
        g, cfg, split, model, _ = trained_setup
        with pytest.raises(UserInputError):
            evaluate(g, split, model, "sideways")

    def test_report_text_round_trip(self):
        report = EvalReport(mode="inductive", n_events=42, ap=0.625, auc=0.75,
                            defined=True, loss=0.493, wall_time_s=1.5)
        parsed = EvalReport.from_text(report.to_text())
        assert parsed == EvalReport(mode="inductive", n_events=42, ap=0.625,
                                    auc=0.75, defined=True, loss=0.493,
                                    wall_time_s=1.5)


class TestCausality:
    def test_predictions_stable_under_future_truncation(self, trained_setup):
        g, cfg, split, model, _ = trained_setup
        rows = list(g.iter_rows())
        cut = 120
        prefix = ingest(rows[:cut], filter_min_count=0)
        idx = np.arange(60, cut)
        full_probs, _, _ = score_events(model, g, idx, cfg.compute_chunk)
        trunc_probs, _, _ = score_events(model, prefix, idx, cfg.compute_chunk)
        assert np.array_equal(full_probs, trunc_probs)


class TestCheckpoints:
    def test_round_trip_preserves_predictions(self, trained_setup, tmp_path):
        g, cfg, split, model, _ = trained_setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, cfg)
        fresh = KnowledgeTracer(tiny_cfg(seed=99, epochs=25, lr=0.05,
                                         batch_size=40),
                                g.num_questions, g.num_concepts)
        load_checkpoint(path, fresh, cfg)
        idx = np.arange(*split.test_range)
        a, _, _ = score_events(model, g, idx, cfg.compute_chunk)
        b, _, _ = score_events(fresh, g, idx, cfg.compute_chunk)
        assert np.array_equal(a, b)

    def test_mismatched_config_refused_with_diff(self, trained_setup, tmp_path):
        g, cfg, split, model, _ = trained_setup
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, cfg)
        other_cfg = tiny_cfg(dim=16)
        other = KnowledgeTracer(other_cfg, g.num_questions, g.num_concepts)
        with pytest.raises(CheckpointMismatchError, match="dim"):
            load_checkpoint(path, other, other_cfg)

    def test_non_checkpoint_file_rejected(self, tmp_path, trained_setup):
        g, cfg, _, model, _ = trained_setup
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"zzzz")
        with pytest.raises(UserInputError, match="magic"):
            load_checkpoint(path, model, cfg)


class TestMasteryTrace:
    def test_trace_matches_direct_prediction(self, trained_setup):
        g, cfg, split, model, _ = trained_setup
        s = int(g.students[-1])
        q = int(g.questions[10])
        trace = mastery_trace(g, model, s, q, steps=5)
        k = trace.target_concept
        for step in trace.steps:
            direct = predict_pair(model, g, s, q, k, step.timestamp + 1)
            assert abs(step.probability - direct) < 1e-12
            assert 0.0 < step.probability < 1.0

    def test_single_step_trace(self, trained_setup):
        g, _, _, model, _ = trained_setup
        s = int(g.students[-1])
        trace = mastery_trace(g, model, s, 0, steps=1)
        assert len(trace.steps) == 1

    def test_flags_match_multiset_definition(self, trained_setup):
        from ktgraph.encoders import multiset_flags
        from ktgraph.graph import recent_neighbors

        g, _, _, model, _ = trained_setup
        s = int(g.students[-1])
        q = int(g.questions[3])
        trace = mastery_trace(g, model, s, q, steps=8)
        # recompute each step's flag through the window machinery
        seq = recent_neighbors(g, s, "student", trace.steps[-1].timestamp + 1,
                               n=len(trace.steps))
        flags = multiset_flags(seq, target_question=q,
                               target_concept=trace.target_concept)
        valid_flags = flags[seq.valid_mask].tolist()
        got = [st.multiset_flag for st in trace.steps][-len(valid_flags):]
        assert got == valid_flags

    def test_truncation_notice(self, trained_setup):
        g, _, _, model, _ = trained_setup
        s = int(g.students[0])
        available = len(g.student_adj[s])
        trace = mastery_trace(g, model, s, 0, steps=available + 50)
        assert trace.truncated
        assert len(trace.steps) == available

    def test_unknown_ids_rejected(self, trained_setup):
        g, _, _, model, _ = trained_setup
        with pytest.raises(UserInputError):
            mastery_trace(g, model, 10**6, 0)
        with pytest.raises(UserInputError):
            mastery_trace(g, model, 0, 10**6)
