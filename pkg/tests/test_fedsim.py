import json

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from csrcfl import (
    AmbiguitySpec,
    FederationConfig,
    ProtocolMessage,
    ProtocolTranscript,
    gen_linear_clients,
    gen_logistic_clients,
    run_direct,
    run_protocol,
    train_erm,
    verify_anonymity,
)
from csrcfl import fedsim
from csrcfl.errors import ProtocolError
from csrcfl.experiments import epsilon_policy_sample_count
from csrcfl.fedsim import LEAD, MessageKind


def make_config(n=5, k=2, family="linear_l1", seed=0, threads=1, p=4):
    gen = gen_linear_clients if family == "linear_l1" else gen_logistic_clients
    c = gen(n_clients=n, n_features=p, samples_range=(20, 40), n_true_weights=min(n, 3), rng_seed=seed)
    specs = [AmbiguitySpec(epsilon_policy_sample_count(d.n_samples, family)) for d in c.datasets]
    return FederationConfig(c.datasets, specs, k, family, rng_seed=seed, threads=threads), c


class TestProtocol:
    def test_single_client_gets_its_own_model_back(self):
        cfg, c = make_config(n=1, k=1)
        t = run_protocol(cfg)
        last = t.messages[-1]
        assert last.kind is MessageKind.AGGREGATE_PARAMS_DELIVERY
        assert last.recipient == c.datasets[0].client_id
        own = train_erm(c.datasets[0], "linear_l1")
        np.testing.assert_array_equal(last.payload["weights"], own.weights)

    def test_recovers_ground_truth_clusters(self):
        c = gen_linear_clients(n_clients=10, n_features=50, n_true_weights=3, noise_sigma=5.0, rng_seed=0)
        specs = [AmbiguitySpec(epsilon_policy_sample_count(d.n_samples, "linear_l1")) for d in c.datasets]
        t = run_protocol(FederationConfig(c.datasets, specs, 3, "linear_l1"))
        assert adjusted_rand_score(c.labels, t.structure.assignment) == 1.0

    @pytest.mark.parametrize("family", ["linear_l1", "logistic"])
    def test_message_count_law(self, family):
        n = 6
        cfg, c = make_config(n=n, k=3, family=family)
        t = run_protocol(cfg)
        ids = {d.client_id for d in c.datasets}
        uploads = t.of_kind(MessageKind.LOCAL_PARAMS_UPLOAD)
        broadcasts = t.of_kind(MessageKind.ANONYMIZED_BROADCAST)
        reports = t.of_kind(MessageKind.ROBUST_LOSS_REPORT)
        assigns = t.of_kind(MessageKind.COALITION_ASSIGNMENT)
        deliveries = t.of_kind(MessageKind.AGGREGATE_PARAMS_DELIVERY)
        assert [len(x) for x in (uploads, broadcasts, reports, assigns, deliveries)] == [n] * 5
        assert {m.sender for m in uploads} == ids and {m.recipient for m in broadcasts} == ids
        assert all(len(m.payload["models"]) == n for m in broadcasts)
        assert all(len(m.payload["losses"]) == n for m in reports)
        tokens = set(broadcasts[0].payload["models"])
        assert all(set(m.payload["losses"]) == tokens for m in reports)
        # clients only ever talk to the lead
        assert all(LEAD in (m.sender, m.recipient) for m in t.messages)
        assert t.phases_ordered()
        times = [ts for ts, _ in t.entries]
        assert times == list(range(1, len(times) + 1))

    def test_deliveries_carry_coalition_means(self):
        cfg, c = make_config(n=6, k=2)
        t = run_protocol(cfg)
        local = [np.array(m.payload["weights"]) for m in sorted(t.of_kind(MessageKind.LOCAL_PARAMS_UPLOAD), key=lambda m: m.sender)]
        a = t.structure.assignment
        for m in t.of_kind(MessageKind.AGGREGATE_PARAMS_DELIVERY):
            i = [d.client_id for d in c.datasets].index(m.recipient)
            expected = np.mean([local[j] for j in np.flatnonzero(a == a[i])], axis=0)
            np.testing.assert_allclose(m.payload["weights"], expected, rtol=1e-14)
            assert m.payload["coalition"] == a[i]

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.filterwarnings("ignore:.*single label class")
    def test_matches_direct_pipeline(self, seed):
        cfg, _ = make_config(n=7, k=3, seed=seed, family=["linear_l1", "logistic"][seed % 2])
        t = run_protocol(cfg)
        structure, models = run_direct(cfg)
        assert t.structure.assignment.tolist() == structure.assignment.tolist()
        assert t.structure.objective == pytest.approx(structure.objective, rel=1e-12)
        assert verify_anonymity(t)

    def test_heuristic_path_for_large_federations(self):
        cfg, _ = make_config(n=14, k=3)
        t = run_protocol(cfg)
        assert t.structure.solver_status.value == "heuristic"
        assert t.structure.assignment.tolist() == run_direct(cfg)[0].assignment.tolist()

    def test_deterministic_and_thread_independent(self, tmp_path):
        a = run_protocol(make_config(n=6, k=2, seed=3)[0])
        b = run_protocol(make_config(n=6, k=2, seed=3, threads=4)[0])
        a.to_jsonl(tmp_path / "a.jsonl")
        b.to_jsonl(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_tokens_change_with_seed(self):
        t0 = run_protocol(make_config(seed=0)[0])
        t1 = run_protocol(make_config(seed=1)[0])
        tok = lambda t: set(t.of_kind(MessageKind.ANONYMIZED_BROADCAST)[0].payload["models"])
        assert tok(t0) != tok(t1)

    def test_jsonl_round_trip(self, tmp_path):
        t = run_protocol(make_config()[0])
        t.to_jsonl(tmp_path / "t.jsonl")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        assert set(json.loads(lines[0])) == {"t", "kind", "sender", "recipient", "payload"}
        assert ProtocolTranscript.read_jsonl(tmp_path / "t.jsonl") == t.entries

    def test_training_failure_aborts_round(self, monkeypatch):
        cfg, _ = make_config()
        real = fedsim.train_erm

        def flaky(dataset, family, settings):
            if dataset.client_id == "client-02":
                raise RuntimeError("disk on fire")
            return real(dataset, family, settings)

        monkeypatch.setattr(fedsim, "train_erm", flaky)
        with pytest.raises(ProtocolError) as info:
            run_protocol(cfg)
        assert info.value.phase == "training"
        assert "training" in str(info.value) and "disk on fire" in str(info.value)

    def test_evaluation_failure_names_communication_phase(self, monkeypatch):
        cfg, _ = make_config()
        monkeypatch.setattr(fedsim, "robust_loss", lambda *a: (_ for _ in ()).throw(ValueError("bad")))
        with pytest.raises(ProtocolError) as info:
            run_protocol(cfg)
        assert info.value.phase == "communication"


class TestAnonymity:
    def _transcript(self, payload):
        msg = ProtocolMessage(MessageKind.ANONYMIZED_BROADCAST, LEAD, "alice", payload)
        return ProtocolTranscript(entries=[(1, msg)], client_ids=("alice", "bob"))

    def test_clean_broadcast(self):
        assert verify_anonymity(self._transcript({"models": {"a1b2": [1.0], "c3d4": [2.0]}}))

    def test_client_id_in_broadcast(self):
        assert not verify_anonymity(self._transcript({"models": {"a1b2": [1.0]}, "owner": "bob"}))
        assert not verify_anonymity(self._transcript({"models": {"bob": [1.0]}}))

    def test_token_owner_pair_anywhere(self):
        t = self._transcript({"models": {"a1b2": [1.0]}})
        leak = ProtocolMessage(MessageKind.COALITION_ASSIGNMENT, LEAD, "bob", {"map": [["a1b2", "alice"]]})
        t.entries.append((2, leak))
        assert not verify_anonymity(t)
        t.entries[-1] = (2, ProtocolMessage(MessageKind.COALITION_ASSIGNMENT, LEAD, "bob", {"map": {"a1b2": "alice"}}))
        assert not verify_anonymity(t)

    def test_real_transcript_is_anonymous(self):
        t = run_protocol(make_config(family="logistic")[0])
        assert verify_anonymity(t)
        for m in t.of_kind(MessageKind.ANONYMIZED_BROADCAST):
            assert not set(m.payload["models"]) & set(t.client_ids)

    def test_numeric_payloads_are_ignored(self):
        assert verify_anonymity(self._transcript({"models": {"a1b2": [[1.0, 2.0]]}}))
