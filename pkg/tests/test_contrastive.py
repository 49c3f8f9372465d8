"""Loss arithmetic, training determinism, and checkpoint round-trips."""

import math

import numpy as np
import pytest

from stexp import diffcore as dc
from stexp.contrastive import (
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    build_loss_graph,
    clip_loss,
    fit,
    load_checkpoint,
    loss_from_similarity,
    save_checkpoint,
    similarity,
)
from stexp.data import GenConfig, load_dataset, preprocess, synth_generate
from stexp.encoders import EncoderConfig, embed_patches, embed_spots, init_params
from stexp.inference import build_index, encode_slide_patches, query_topk


def random_unit_rows(n, d, seed=0):
    h = np.random.default_rng(seed).standard_normal((n, d))
    return h / np.linalg.norm(h, axis=1, keepdims=True)


class TestSimilarity:
    def test_orthonormal_rows_identity(self):
        h = np.eye(4)[:, :4]
        np.testing.assert_allclose(similarity(h, h), np.eye(4), atol=1e-12)

    def test_orthogonal_rows_zero(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 1.0]])
        assert similarity(a, b)[0, 0] == 0.0

    def test_hand_normalized_vector(self):
        # [3,4] normalized -> [0.6, 0.8]; dot with itself = 1.0
        h = np.array([[3.0, 4.0]]) / 5.0
        assert similarity(h, h)[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_rejects_unnormalized(self):
        good = random_unit_rows(3, 8)
        bad = good * 1.01
        with pytest.raises(ValueError, match="norm"):
            similarity(good, bad)

    def test_values_in_cosine_range(self):
        a, b = random_unit_rows(20, 16, 1), random_unit_rows(30, 16, 2)
        s = similarity(a, b)
        assert s.min() >= -1.0 - 1e-6 and s.max() <= 1.0 + 1e-6


class TestClipLoss:
    def test_uniform_logits_ln_n(self):
        for n in (2, 8, 64):
            sim = np.zeros((n, n))
            assert loss_from_similarity(sim, tau=1.0) == pytest.approx(math.log(n), abs=1e-9)

    def test_uniform_logits_n2_value(self):
        assert loss_from_similarity(np.ones((2, 2)), tau=1.0) == pytest.approx(0.6931, abs=5e-5)

    def test_dominant_diagonal_near_zero(self):
        sim = np.full((2, 2), -20.0)
        np.fill_diagonal(sim, 20.0)
        assert loss_from_similarity(sim, tau=1.0) < 1e-8

    def test_symmetry_exact(self):
        hp = random_unit_rows(6, 16, 3)
        hs = random_unit_rows(6, 16, 4)
        assert clip_loss(hp, hs, 0.5) == clip_loss(hs, hp, 0.5)

    def test_logit_temperature_invariance_exact(self):
        sim = similarity(random_unit_rows(8, 16, 5), random_unit_rows(8, 16, 6))
        assert loss_from_similarity(sim, tau=1.0) == loss_from_similarity(2.0 * sim, tau=2.0)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n = int(rng.integers(2, 12))
            sim = rng.uniform(-1, 1, (n, n))
            assert loss_from_similarity(sim, tau=0.3) >= 0.0

    def test_random_embeddings_near_ln_n(self):
        # untrained 256-d unit embeddings: mean loss over 100 draws ~ ln 16
        n, d = 16, 256
        losses = [
            clip_loss(random_unit_rows(n, d, 2 * t), random_unit_rows(n, d, 2 * t + 1), 1.0)
            for t in range(100)
        ]
        assert np.mean(losses) == pytest.approx(math.log(n), rel=0.10)

    def test_single_pair_rejected(self):
        with pytest.raises(ValueError, match="2 pairs"):
            clip_loss(random_unit_rows(1, 4), random_unit_rows(1, 4), 1.0)

    def test_full_loss_graph_grad_check_four_pairs(self):
        cfg = EncoderConfig(
            hvg_num=8, d_embed=8, n_heads=2, n_positions=16,
            conv_channels=(4,), proj_hidden=8, patch_shape=(3, 8, 8),
        )
        tcfg = TrainConfig(batch_size=4, epochs=1, temperature=0.5, seed=0)
        params = init_params(cfg, seed=1).astype(np.float64)
        rng = np.random.default_rng(2)
        patches = rng.random((4, 3, 8, 8))
        expr = rng.uniform(0.0, 4.0, (4, 8))
        coords = rng.integers(0, 16, (4, 2)).astype(np.uint32)

        def graph(p, inputs):
            return build_loss_graph(p, inputs[0], inputs[1], coords, cfg, tcfg)

        report = dc.grad_check(graph, params, [patches, expr], eps=1e-5, tol=1e-4)
        assert report.passed, str(report)

    def test_learnable_temperature_gets_gradient(self):
        cfg = EncoderConfig(
            hvg_num=8, d_embed=8, n_heads=2, n_positions=16,
            conv_channels=(4,), proj_hidden=8, patch_shape=(3, 8, 8),
        )
        tcfg = TrainConfig(batch_size=4, epochs=1, temperature=0.5, learn_temperature=True, seed=0)
        params = init_params(cfg, seed=1, learn_temperature=True, init_log_tau=math.log(0.5))
        rng = np.random.default_rng(3)
        patches = rng.random((4, 3, 8, 8)).astype(np.float32)
        expr = rng.uniform(0.0, 4.0, (4, 8)).astype(np.float32)
        coords = rng.integers(0, 16, (4, 2)).astype(np.uint32)

        def graph(p, inputs):
            return build_loss_graph(p, inputs[0], inputs[1], coords, cfg, tcfg)

        _, grads = dc.evaluate_with_gradients(graph, params, [patches, expr])
        assert "temp.log_tau" in grads
        assert np.all(np.isfinite(grads["temp.log_tau"]))


@pytest.fixture(scope="module")
def tiny_processed(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    gen = GenConfig(
        n_slides=1, spots_per_slide=32, gene_num=32, n_domains=4,
        signal=1.0, patch_shape=(3, 16, 16),
    )
    synth_generate(gen, 11, root)
    slides = load_dataset(root)
    return preprocess(slides, hvg_num=16, train_ids=[slides[0].slide_id])


TINY_ENC = EncoderConfig(
    hvg_num=16, d_embed=32, n_heads=4, conv_channels=(16, 32),
    proj_hidden=64, patch_shape=(3, 16, 16),
)


class TestFit:
    def test_same_seed_byte_identical_checkpoints(self, tiny_processed, tmp_path):
        tcfg = TrainConfig(batch_size=16, epochs=3, learning_rate=2e-3, temperature=0.05, seed=5)
        for name in ("a", "b"):
            ckpt = fit(tiny_processed, tcfg, TINY_ENC)
            save_checkpoint(ckpt, tmp_path / name)
        assert (tmp_path / "a" / "params.f32").read_bytes() == (tmp_path / "b" / "params.f32").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()

    def test_loss_decreases_on_tiny_set(self, tiny_processed):
        # regression fixture: observed 3.01 -> 0.065 over 300 epochs
        tcfg = TrainConfig(batch_size=16, epochs=300, learning_rate=2e-3, temperature=0.05, seed=11)
        ckpt = fit(tiny_processed, tcfg, TINY_ENC)
        assert ckpt.history[-1] < ckpt.history[0]
        assert ckpt.history[-1] < 0.5

    def test_top1_self_retrieval_after_fit(self, tiny_processed):
        tcfg = TrainConfig(batch_size=16, epochs=300, learning_rate=2e-3, temperature=0.05, seed=11)
        ckpt = fit(tiny_processed, tcfg, TINY_ENC)
        index = build_index(ckpt, tiny_processed.train_slides())
        slide = tiny_processed.slides[0]
        queries = encode_slide_patches(slide, ckpt)
        hits = sum(1 for i in range(slide.spot_num) if query_topk(index, queries[i], 1)[0][0] == i)
        assert hits >= 0.9 * slide.spot_num, f"{hits}/{slide.spot_num} self-retrievals"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf/nan arithmetic is the point
    def test_divergence_aborts_with_snapshot(self, tiny_processed):
        tcfg = TrainConfig(batch_size=16, epochs=50, learning_rate=1e12, temperature=0.05, seed=2)
        with pytest.raises(TrainingDiverged) as err:
            fit(tiny_processed, tcfg, TINY_ENC)
        snap = err.value.snapshot
        assert {"epoch", "step", "slide_id", "loss", "param_norms"} <= set(snap)

    def test_batch_size_preflight(self, tiny_processed):
        tcfg = TrainConfig(batch_size=64, epochs=1, seed=0)
        with pytest.raises(ValueError, match="batch_size"):
            fit(tiny_processed, tcfg, TINY_ENC)


class TestCheckpointRoundTrip:
    def test_reload_reproduces_forward_bitwise(self, tiny_processed, tmp_path):
        tcfg = TrainConfig(batch_size=16, epochs=2, learning_rate=2e-3, temperature=0.05, seed=9)
        ckpt = fit(tiny_processed, tcfg, TINY_ENC)
        save_checkpoint(ckpt, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert back.encoder_config == TINY_ENC
        slide = tiny_processed.slides[0]
        h1 = embed_spots(slide.expression[:16], slide.coords[:16], ckpt.params, TINY_ENC)
        h2 = embed_spots(slide.expression[:16], slide.coords[:16], back.params, back.encoder_config)
        np.testing.assert_array_equal(h1, h2)
        p1 = embed_patches(slide.patches[:16], ckpt.params, TINY_ENC)
        p2 = embed_patches(slide.patches[:16], back.params, back.encoder_config)
        np.testing.assert_array_equal(p1, p2)

    def test_manifest_offsets_validated(self, tiny_processed, tmp_path):
        import json

        tcfg = TrainConfig(batch_size=16, epochs=1, temperature=0.05, seed=9)
        ckpt = fit(tiny_processed, tcfg, TINY_ENC)
        save_checkpoint(ckpt, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        manifest["params"]["entries"][1]["offset"] += 4
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="tile"):
            load_checkpoint(tmp_path / "ck")

    def test_history_survives_round_trip(self, tiny_processed, tmp_path):
        tcfg = TrainConfig(batch_size=16, epochs=3, temperature=0.05, seed=9)
        ckpt = fit(tiny_processed, tcfg, TINY_ENC)
        save_checkpoint(ckpt, tmp_path / "ck")
        assert load_checkpoint(tmp_path / "ck").history == ckpt.history
