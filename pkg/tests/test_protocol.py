import numpy as np
import pytest

from fedmspc.batch import score_partial, unfold_batchwise
from fedmspc.errors import (
    IllConditionedProjectionError,
    InvalidInputError,
    ProtocolViolation,
    StateMachineError,
)
from fedmspc.mspc import DegenerateLimitWarning, fit_pca, monitor
from fedmspc.protocol import CSP, TA, ProtocolMessage, SessionConfig, Step, audit_privacy, holder
from fedmspc.protocol import fed_infer, fed_score_incomplete, fed_train
from fedmspc.protocol.roles import HolderModelShare
from fedmspc.protocol.session import training_parties
from fedmspc.protocol.training import TrainingHolder
from fedmspc.transport import run_bus

from conftest import align_signs, blocks_of


def central_model(x, cfg):
    return fit_pca(x, cfg.variance_target, cfg.alpha, cfg.eigenvalue_scaling)


class TestTraining:
    def test_losslessness(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        shares, transcript = fed_train(cfg, blocks)
        model = central_model(x, cfg)
        assert np.allclose(shares[0].sigma, model.singular_values, rtol=1e-9, atol=0)
        v = np.vstack([s.loadings for s in shares])
        signs = align_signs(model.loadings, v)
        assert np.allclose(v * signs, model.loadings, atol=1e-9)
        for s in shares:
            assert s.n_components == model.n_components
            assert s.t2_limit == pytest.approx(model.t2_limit, rel=1e-12)
            assert s.q_limit == pytest.approx(model.q_limit, rel=1e-9)
        assert audit_privacy(transcript, blocks, shares).ok

    def test_single_holder_rejected(self):
        with pytest.raises(InvalidInputError):
            SessionConfig(session_id="x", column_counts=(5,), row_count=10)

    def test_dimension_mismatch(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        with pytest.raises(ProtocolViolation):
            fed_train(cfg, [blocks[0][:, :5], blocks[1]])

    def test_out_of_order_step(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        h = TrainingHolder(cfg, "t:train:0", 1, blocks[0])
        msg = ProtocolMessage("t:train:0", CSP, holder(1), Step.SIGMA_BROADCAST, {"sigma": np.ones(10)})
        with pytest.raises(StateMachineError) as info:
            h.handle(msg)
        assert info.value.expected == "MaskDistribution"
        assert info.value.actual == "SigmaBroadcast"

    def test_wrong_session_rejected(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        h = TrainingHolder(cfg, "t:train:0", 1, blocks[0])
        with pytest.raises(ProtocolViolation):
            h.handle(ProtocolMessage("other", TA, holder(1), Step.MASK_DISTRIBUTION, {}))

    def test_deterministic_transcript(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        _, a = fed_train(cfg, blocks)
        _, b = fed_train(cfg, blocks)
        assert len(a) == len(b) and all(m1 == m2 for m1, m2 in zip(a, b))

    def test_share_round_trip(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        shares, _ = fed_train(cfg, blocks)
        back = HolderModelShare.from_dict(shares[1].to_dict())
        assert back.loadings.tobytes() == shares[1].loadings.tobytes()
        assert back.q_limit == shares[1].q_limit


class TestInference:
    def test_matches_centralized(self, two_holder_case, rng):
        cfg, x, blocks = two_holder_case
        shares, _ = fed_train(cfg, blocks)
        model = central_model(x, cfg)
        signs = align_signs(model.loadings, np.vstack([s.loadings for s in shares]))
        samples = rng.standard_normal((6, 10)) * 2 + model.mean
        mon, transcript = fed_infer(cfg, blocks_of(samples, (6, 4)), shares)
        for row in range(6):
            ref = monitor(model, samples[row])
            for h, sl in ((0, slice(0, 6)), (1, slice(6, 10))):
                got = mon[h]
                assert np.allclose(got.scores[row] * signs, ref.scores, atol=1e-8)
                assert got.t2[row] == pytest.approx(ref.t2, rel=1e-8)
                assert got.q[row] == pytest.approx(ref.q, rel=1e-8)
                assert np.allclose(got.t2_contrib[row], ref.t2_contrib[sl], atol=1e-8)
                assert np.allclose(got.q_contrib[row], ref.q_contrib[sl], atol=1e-8)
            assert mon[0].q_contrib[row].sum() + mon[1].q_contrib[row].sum() == pytest.approx(mon[0].q[row], rel=1e-10)
        assert audit_privacy(transcript, blocks, shares, blocks_of(samples, (6, 4))).ok

    def test_training_row_in_span(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((30, 2)) @ rng.standard_normal((2, 6))
        cfg = SessionConfig.from_seed(1, session_id="s", column_counts=(3, 3), row_count=30,
                                      variance_target=1.0, eigenvalue_scaling="covariance", strict_limits=False)
        with pytest.warns(DegenerateLimitWarning):
            shares, _ = fed_train(cfg, blocks_of(x, (3, 3)))
        assert shares[0].n_components == 2 and shares[0].q_limit_degenerate
        mon, _ = fed_infer(cfg, blocks_of(x[:1], (3, 3)), shares)
        assert abs(mon[0].q[0]) < 1e-8


def batch_case(seed, n_batches=40, j=(2, 3), k=(5, 4)):
    rng = np.random.default_rng(seed)
    rank = 3
    tensors = []
    latent = rng.standard_normal((n_batches, rank))
    for ji, ki in zip(j, k):
        w = rng.standard_normal((rank, ji * ki))
        flat = latent @ w + 0.05 * rng.standard_normal((n_batches, ji * ki))
        tensors.append(flat.reshape(n_batches, ki, ji).transpose(0, 2, 1))
    cfg = SessionConfig.from_seed(
        seed, session_id=f"b{seed}", column_counts=tuple(a * b for a, b in zip(j, k)), row_count=n_batches,
        eigenvalue_scaling="covariance", batch_shapes=tuple(zip(j, k)), strict_limits=False,
    )
    return cfg, tensors


@pytest.mark.filterwarnings("ignore::fedmspc.mspc.DegenerateLimitWarning")
class TestIncomplete:
    def test_complete_reduces_to_inference(self):
        cfg, tensors = batch_case(1)
        shares, _ = fed_train(cfg, tensors)
        flats = [unfold_batchwise(t[:3]).matrix for t in tensors]
        mon, _ = fed_infer(cfg, flats, shares)
        scores, _ = fed_score_incomplete(cfg, flats, shares, k=4)
        assert np.allclose(scores, mon[0].scores, atol=1e-9)

    def test_matches_centralized_and_independent_of_w(self):
        cfg, tensors = batch_case(2)
        shares, _ = fed_train(cfg, tensors)
        flat = np.hstack([unfold_batchwise(t).matrix for t in tensors])
        model = fit_pca(flat, cfg.variance_target, cfg.alpha, cfg.eigenvalue_scaling, strict_limits=False)
        signs = align_signs(model.loadings, np.vstack([s.loadings for s in shares]))
        h1 = unfold_batchwise(tensors[0][:4]).matrix
        h2_head = unfold_batchwise(tensors[1][:4]).matrix[:, : 2 * 3]
        got, transcript = fed_score_incomplete(cfg, [h1, h2_head], shares, k=2)
        ref = score_partial(model, np.hstack([h1, h2_head]), h1.shape[1] + 6)
        assert np.allclose(got * signs, ref, atol=1e-8)
        other = SessionConfig.from_dict({**cfg.to_dict(), "seeds": {"master": 999}})
        got2, _ = fed_score_incomplete(other, [h1, h2_head], shares, k=2)
        assert np.allclose(got, got2, atol=1e-9)
        assert audit_privacy(transcript, [unfold_batchwise(t).matrix for t in tensors], shares).ok

    def test_ill_conditioned(self):
        cfg, tensors = batch_case(3)
        shares, _ = fed_train(cfg, tensors)
        # one time step of holder 1 gives 2 columns for r >= 3 components
        h1 = unfold_batchwise(tensors[0][:2]).matrix[:, :2]
        if shares[0].n_components <= 2:
            pytest.skip("needs r > 2")
        with pytest.raises(IllConditionedProjectionError) as info:
            fed_score_incomplete(cfg, [h1], shares, k=1)
        assert info.value.k == 1


class TestAudit:
    def test_raw_leak_detected(self, two_holder_case):
        cfg, x, blocks = two_holder_case

        class Leaky(TrainingHolder):
            # skips the masking and ships its standardized block as is
            def on_message(self, msg):
                if msg.step is Step.MASK_DISTRIBUTION:
                    self._b_block_t = msg.payload["b_block_t"]
                    self.state = "await_sigma"
                    padded = np.zeros((cfg.row_count, cfg.n_variables))
                    padded[:, : self.x_std.shape[1]] = self.x_std
                    return [self.send(CSP, Step.MASKED_DATA, x_masked=padded)]
                return super().on_message(msg)

        parties = training_parties(cfg, blocks)
        parties[2] = Leaky(cfg, parties[2].run_id, 1, blocks[0])
        transcript = run_bus(parties, 0)
        shares = [p.share for p in parties[2:]]
        report = audit_privacy(transcript, blocks, shares)
        assert [f.message_index for f in report.of_kind("raw_data_exposure")]
        assert "H1" in report.of_kind("raw_data_exposure")[0].detail

    def test_transcript_injection(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        shares, transcript = fed_train(cfg, blocks)
        transcript.append(ProtocolMessage("t:train:0", holder(1), CSP, Step.MASKED_DATA, {"x_masked": blocks[0]}))
        transcript.append(ProtocolMessage("t:train:0", CSP, holder(2), Step.MASKED_LOADINGS,
                                          {"v_masked": -shares[0].loadings.T}))
        report = audit_privacy(transcript, blocks, shares)
        assert report.of_kind("raw_data_exposure")
        assert report.of_kind("loadings_exposure")
        # the raw block is m x n_i, so its norm differs from the standardized one
        assert report.of_kind("norm_mismatch")

    def test_correlated_leak(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        shares, transcript = fed_train(cfg, blocks)
        scaled = blocks[1] * 3.0 + 1.0
        transcript.append(ProtocolMessage("t:train:0", holder(2), CSP, Step.MASKED_DATA, {"x_masked": scaled}))
        report = audit_privacy(transcript, blocks, shares)
        assert any("correlates" in f.detail for f in report.findings)
        assert report.of_kind("norm_mismatch")

    def test_full_loadings_leak(self, two_holder_case):
        cfg, x, blocks = two_holder_case
        shares, transcript = fed_train(cfg, blocks)
        v = np.vstack([s.loadings for s in shares])  # n x r, holds every holder's rows
        transcript.append(ProtocolMessage("t:train:0", CSP, holder(1), Step.MASKED_LOADINGS, {"v_masked": v.T}))
        found = audit_privacy(transcript, blocks, shares).of_kind("loadings_exposure")
        assert len(found) == 1 and "H2" in found[0].detail
