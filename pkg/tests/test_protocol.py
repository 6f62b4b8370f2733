"""Protocol operations and round-engine behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_problem
from svote import netsim, protocol
from svote.errors import ProtocolError, SimilarityError
from svote.learner import HyperParams
from svote.netsim import MessageBus, MessageKind, TrafficLedger
from svote.protocol import (
    Action,
    ClientState,
    SVoteConfig,
    aggregate,
    cast_votes,
    cosine_similarity,
    run_baseline,
    run_svote,
    select_peers,
    vote_gate,
)


class _ForcedRng:
    """Stub rng whose draws always land on the given value."""

    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


class TestAggregate:
    def test_mean(self):
        out = aggregate([np.array([0.0, 3.0]), np.array([3.0, 0.0]), np.array([3.0, 3.0])])
        np.testing.assert_allclose(out, [2.0, 2.0])

    def test_single_model_identity(self):
        w = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(aggregate([w]), w)

    def test_idempotent_on_copies(self):
        w = np.array([0.25, 0.75])
        np.testing.assert_allclose(aggregate([w, w.copy(), w.copy()]), w)

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            aggregate([])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ProtocolError):
            aggregate([np.zeros(3), np.zeros(4)])


class TestCosineSimilarity:
    def test_self_similarity(self):
        w = np.array([0.3, -1.2, 4.0])
        assert cosine_similarity(w, w) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_half(self):
        sim = cosine_similarity(np.array([1.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.0]))
        assert sim == pytest.approx(0.5, abs=1e-9)

    def test_scale_invariance(self):
        sim = cosine_similarity(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.0]))
        assert sim == pytest.approx(1.0, abs=1e-9)

    def test_zero_norm_rejected(self):
        with pytest.raises(SimilarityError):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_result_clipped_to_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.normal(size=8), rng.normal(size=8)
            assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestSelectPeers:
    def test_threshold_example(self):
        # mu=0.5, sigma=sqrt(0.06)~=0.245, threshold~=0.6225
        assert select_peers(0, {1: 0.2, 2: 0.5, 3: 0.8}, 0.5) == {3}

    def test_all_equal_selects_all(self):
        for tau in (0.0, 0.5, 3.0):
            assert select_peers(0, {1: 0.4, 2: 0.4, 3: 0.4}, tau) == {1, 2, 3}

    def test_very_negative_tau_selects_all(self):
        assert select_peers(0, {1: -0.9, 2: 0.1, 3: 0.9}, -1e9) == {1, 2, 3}

    def test_fallback_to_most_similar(self):
        assert select_peers(0, {1: 0.1, 2: 0.9}, 100.0) == {2}

    def test_fallback_tie_breaks_lowest_id(self):
        assert select_peers(0, {5: 0.8, 3: 0.8, 7: 0.1}, 100.0) == {3}

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            select_peers(0, {}, 0.0)

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=30)
    def test_scale_invariance_via_cosine(self, scale):
        # cosine ignores positive rescaling, so the selected set does too
        rng = np.random.default_rng(21)
        local = rng.normal(size=6)
        peers = {p: rng.normal(size=6) for p in range(1, 6)}
        sims = {p: cosine_similarity(local, w) for p, w in peers.items()}
        scaled = {p: cosine_similarity(local * scale, w * scale) for p, w in peers.items()}
        assert select_peers(0, sims, 0.3) == select_peers(0, scaled, 0.3)


class TestCastVotes:
    def test_selected_peers_gain_votes(self):
        topo = netsim.full_topology(10)
        bus = MessageBus(topo, TrafficLedger())
        n = cast_votes(bus, 0, {3, 7}, rnd=1)
        bus.flush()
        assert n == 2
        assert len([m for m in bus.take_inbox(3) if m.kind is MessageKind.VOTE]) == 1
        assert len([m for m in bus.take_inbox(7) if m.kind is MessageKind.VOTE]) == 1

    def test_empty_selection_sends_nothing(self):
        bus = MessageBus(netsim.full_topology(4), TrafficLedger())
        assert cast_votes(bus, 0, set(), rnd=1) == 0
        bus.flush()
        assert all(bus.take_inbox(c) == [] for c in range(4))

    def test_everyone_votes_for_peer_zero(self):
        topo = netsim.full_topology(11)
        bus = MessageBus(topo, TrafficLedger())
        for sender in range(1, 11):
            cast_votes(bus, sender, {0}, rnd=1)
        bus.flush()
        assert len(bus.take_inbox(0)) == 10


class TestVoteGate:
    def _state(self, votes=0, p=0.1):
        return ClientState(id=0, w=np.ones(3), votes_received=votes, p_escalation=p)

    def test_enough_votes_trains(self):
        st_ = self._state(votes=3)
        assert vote_gate(st_, v_min=2, neighbor_count=9, rng=_ForcedRng(1.0)) is Action.TRAIN_LOCAL

    def test_two_neighbors_always_train(self):
        st_ = self._state(votes=0)
        assert vote_gate(st_, v_min=5, neighbor_count=2, rng=_ForcedRng(1.0)) is Action.TRAIN_LOCAL

    def test_forced_failures_escalate(self):
        st_ = self._state()
        seq = []
        for _ in range(3):
            assert vote_gate(st_, 5, 5, _ForcedRng(1.0)) is Action.SKIP
            seq.append(st_.p_escalation)
        assert seq == pytest.approx([0.2, 0.3, 0.4], abs=1e-9)

    def test_p_sequence_caps_at_one(self):
        st_ = self._state()
        ps = []
        for _ in range(12):
            vote_gate(st_, 5, 5, _ForcedRng(1.0))
            ps.append(st_.p_escalation)
        assert ps[:9] == pytest.approx([0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], abs=1e-9)
        assert ps[9:] == pytest.approx([1.0, 1.0, 1.0], abs=1e-9)

    def test_success_draw_trains_randomly_and_resets_p(self):
        st_ = self._state(p=0.7)
        assert vote_gate(st_, 5, 5, _ForcedRng(0.0)) is Action.TRAIN_RANDOM
        assert st_.p_escalation == pytest.approx(0.1)

    def test_training_via_votes_resets_p(self):
        st_ = self._state(votes=9, p=0.8)
        vote_gate(st_, 5, 5, _ForcedRng(1.0))
        assert st_.p_escalation == pytest.approx(0.1)

    def test_p_never_decreases_while_skipping(self):
        st_ = self._state()
        last = st_.p_escalation
        for _ in range(20):
            vote_gate(st_, 5, 5, _ForcedRng(1.0))
            assert st_.p_escalation >= last - 1e-12
            assert st_.p_escalation <= 1.0
            last = st_.p_escalation


class TestSVoteConfig:
    def test_phase_budget_validated(self):
        with pytest.raises(Exception):
            SVoteConfig(total_rounds=7, t_init=5, n_diverge=2)

    def test_v_min_rules(self):
        assert SVoteConfig().v_min_for(9) == 5
        assert SVoteConfig().v_min_for(4) == 2
        assert SVoteConfig(v_min_fixed=0).v_min_for(9) == 0


# ----------------------------------------------------------------- engines


def _run_pair(seed=42, rounds=8, **sv_over):
    data, shards, topo, spec = small_problem(seed=seed)
    hp = HyperParams(lr=0.1, local_epochs=2, batch_size=16)
    fed = run_baseline("fedavg", spec, hp, topo, shards, seed, rounds=rounds, trace_models=True)
    cfg = SVoteConfig(total_rounds=rounds, t_init=3, n_diverge=0, tau=-1e9, v_min_fixed=0,
                      suppress_nontrainer_updates=False, **sv_over)
    sv = run_svote(cfg, spec, hp, topo, shards, seed, trace_models=True)
    return fed, sv


class TestEngines:
    def test_degenerate_svote_equals_fedavg_bitwise(self):
        fed, sv = _run_pair()
        for rnd in range(len(fed.model_trace)):
            for c in range(fed.num_clients):
                np.testing.assert_array_equal(fed.model_trace[rnd][c], sv.model_trace[rnd][c])

    def test_diverge_rounds_have_zero_traffic(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=10, t_init=3, n_diverge=3)
        res = run_svote(cfg, spec, hp, topo, shards, 7)
        for rec in res.records:
            if 3 < rec.round <= 6:
                assert rec.bytes_sent == 0 and rec.bytes_received == 0
            else:
                assert rec.bytes_sent > 0

    def test_same_seed_reproduces_records(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=9, t_init=2, n_diverge=1)
        a = run_svote(cfg, spec, hp, topo, shards, 3)
        b = run_svote(cfg, spec, hp, topo, shards, 3)
        assert a.records == b.records
        assert dict(a.ledger.bytes_sent) == dict(b.ledger.bytes_sent)

    def test_fedprox_mu_zero_matches_fedavg(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16, prox_mu=0.0)
        a = run_baseline("fedavg", spec, hp, topo, shards, 5, rounds=6, trace_models=True)
        b = run_baseline("fedprox", spec, hp, topo, shards, 5, rounds=6, trace_models=True)
        for rnd in range(6):
            for c in range(a.num_clients):
                np.testing.assert_array_equal(a.model_trace[rnd][c], b.model_trace[rnd][c])

    def test_fedprox_mu_positive_differs(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16, prox_mu=0.5)
        a = run_baseline("fedavg", spec, hp, topo, shards, 5, rounds=4)
        b = run_baseline("fedprox", spec, hp, topo, shards, 5, rounds=4)
        assert any(not np.array_equal(x, y) for x, y in zip(a.final_models, b.final_models))

    def test_scaffold_doubles_model_payload(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.05, local_epochs=1, batch_size=16)
        fed = run_baseline("fedavg", spec, hp, topo, shards, 9, rounds=5)
        sca = run_baseline("scaffold", spec, hp, topo, shards, 9, rounds=5)
        def payload(res):
            bytes_ = res.ledger.kind_bytes[MessageKind.MODEL_UPDATE]
            count = res.ledger.kind_count[MessageKind.MODEL_UPDATE]
            return bytes_ - netsim.HEADER_BYTES * count
        assert payload(sca) == 2 * payload(fed)

    def test_two_identical_clients_stay_in_sync_under_fedavg(self):
        data, shards, topo, spec = small_problem(num_clients=6)
        shard = shards[0]
        topo2 = netsim.full_topology(2)
        res = run_baseline("fedavg", spec, HyperParams(lr=0.1), topo2, [shard, shard], 13,
                           rounds=5, trace_models=True)
        for rnd in range(5):
            np.testing.assert_array_equal(res.model_trace[rnd][0], res.model_trace[rnd][1])

    def test_conservation_in_runs(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16)
        for res in (
            run_baseline("fedavg", spec, hp, topo, shards, 2, rounds=4),
            run_svote(SVoteConfig(total_rounds=8, t_init=2, n_diverge=1), spec, hp, topo, shards, 2),
        ):
            assert res.ledger.total_sent() == res.ledger.total_received()

    def test_aggregation_includes_own_model_everywhere(self):
        data, shards, topo, spec = small_problem()
        hp = HyperParams(lr=0.1, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=10, t_init=2, n_diverge=2)
        res = run_svote(cfg, spec, hp, topo, shards, 4)
        for rec in res.records:
            if 2 < rec.round <= 4:  # divergence rounds do not aggregate
                assert rec.models_aggregated == 0
            else:
                assert rec.models_aggregated >= 1

    def test_vote_symmetry_with_identical_models(self):
        # identical models -> unit similarity -> everyone selects all peers
        # -> every client collects degree-many votes
        topo = netsim.full_topology(5)
        bus = MessageBus(topo, TrafficLedger())
        w = np.random.default_rng(3).normal(size=12)
        for local in range(5):
            sims = {p: cosine_similarity(w, w.copy()) for p in range(5) if p != local}
            assert all(s == pytest.approx(1.0, abs=1e-9) for s in sims.values())
            selected = select_peers(local, sims, 0.0)
            assert selected == set(range(5)) - {local}
            cast_votes(bus, local, selected, rnd=1)
        bus.flush()
        for c in range(5):
            assert len(bus.take_inbox(c)) == 4

    def test_suppression_keeps_update_bytes_below_fedavg(self):
        data, shards, topo, spec = small_problem(seed=3)
        hp = HyperParams(lr=0.5, local_epochs=2, batch_size=16)
        cfg = SVoteConfig(total_rounds=14, t_init=3, n_diverge=1)
        res = run_svote(cfg, spec, hp, topo, shards, 3)
        per_round_fedavg = sum(topo.degree(c) for c in range(topo.num_clients)) * (
            netsim.HEADER_BYTES + netsim.BYTES_PER_PARAM * spec.param_count
        )
        trained = {
            rnd: all(r.action != Action.SKIP.value for r in res.records if r.round == rnd)
            for rnd in range(cfg.selection_round + 1, cfg.total_rounds + 1)
        }
        saw_skip_round = False
        for rnd, all_trained in trained.items():
            update_bytes = res.ledger.update_bytes_in_round(rnd)
            assert update_bytes <= per_round_fedavg
            if all_trained:
                assert update_bytes == per_round_fedavg
            else:
                saw_skip_round = True
                assert update_bytes < per_round_fedavg
        assert saw_skip_round  # the scenario must actually exercise suppression

    def test_skipping_client_trains_less(self):
        data, shards, topo, spec = small_problem(seed=3)
        hp = HyperParams(lr=0.5, local_epochs=2, batch_size=16)
        cfg = SVoteConfig(total_rounds=14, t_init=3, n_diverge=1)
        res = run_svote(cfg, spec, hp, topo, shards, 3)
        skips = {c: 0 for c in range(res.num_clients)}
        for rec in res.records:
            if rec.action == Action.SKIP.value:
                skips[rec.client] += 1
                assert rec.samples_trained == 0
        assert sum(skips.values()) > 0

    def test_refresh_off_freezes_selection_and_votes(self):
        data, shards, topo, spec = small_problem(seed=3)
        hp = HyperParams(lr=0.5, local_epochs=2, batch_size=16)
        cfg = SVoteConfig(total_rounds=14, t_init=3, n_diverge=1, refresh_selection=False)
        res = run_svote(cfg, spec, hp, topo, shards, 3)
        # votes exist only in the one-time selection round
        vote_rounds = {
            rnd for (rnd, kind), b in res.ledger.round_kind_bytes.items()
            if kind is MessageKind.VOTE and b > 0
        }
        assert vote_rounds == {cfg.selection_round}
        assert res.ledger.total_sent() == res.ledger.total_received()

    def test_refresh_off_vote_tally_persists(self):
        data, shards, topo, spec = small_problem(seed=3)
        hp = HyperParams(lr=0.5, local_epochs=2, batch_size=16)
        # 0-vote floor: every client trains, so persistence is observable in
        # actions staying TRAIN_LOCAL even though no votes arrive after the
        # selection round
        cfg = SVoteConfig(total_rounds=12, t_init=3, n_diverge=1,
                          refresh_selection=False, v_min_fixed=0)
        res = run_svote(cfg, spec, hp, topo, shards, 3)
        gated = [r for r in res.records if r.round > cfg.selection_round]
        assert gated and all(r.action == Action.TRAIN_LOCAL.value for r in gated)

    def test_mlp_engine_run(self):
        from svote.learner import MLP, ModelSpec

        data, shards, topo, _ = small_problem(seed=8)
        spec = ModelSpec(MLP, 8, 4, hidden_dim=6)
        hp = HyperParams(lr=0.2, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=8, t_init=2, n_diverge=1)
        res = run_svote(cfg, spec, hp, topo, shards, 8)
        assert res.param_count == spec.param_count
        assert all(0.0 <= r.f1 <= 1.0 for r in res.records)
        assert all(np.all(np.isfinite(w)) for w in res.final_models)

    def test_two_client_federation_always_trains(self):
        # degree 1 <= 2: the gate never blocks, selection has a single candidate
        data, shards, _, spec = small_problem(num_clients=6)
        topo = netsim.full_topology(2)
        hp = HyperParams(lr=0.2, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=8, t_init=2, n_diverge=1)
        res = run_svote(cfg, spec, hp, topo, shards[:2], 5)
        assert all(r.action == Action.TRAIN_LOCAL.value for r in res.records)
        gated = [r for r in res.records if r.round > cfg.selection_round]
        assert gated and all(r.models_aggregated == 2 for r in gated)

    def test_unreachable_vote_floor_leans_on_escalation(self):
        data, shards, topo, spec = small_problem(seed=9)
        hp = HyperParams(lr=0.2, local_epochs=1, batch_size=16)
        cfg = SVoteConfig(total_rounds=20, t_init=2, n_diverge=1, v_min_fixed=100)
        res = run_svote(cfg, spec, hp, topo, shards, 9)
        gated = [r for r in res.records if r.round > cfg.selection_round]
        actions = {r.action for r in gated}
        assert Action.TRAIN_LOCAL.value not in actions  # floor unreachable
        assert Action.TRAIN_RANDOM.value in actions  # escalation rescues clients

    def test_bad_baseline_kind_rejected(self):
        data, shards, topo, spec = small_problem()
        with pytest.raises(Exception):
            run_baseline("adam", spec, HyperParams(), topo, shards, 1)

    def test_shard_count_must_match_clients(self):
        data, shards, topo, spec = small_problem()
        with pytest.raises(ProtocolError):
            run_baseline("fedavg", spec, HyperParams(), topo, shards[:-1], 1)
