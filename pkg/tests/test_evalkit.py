import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from goalign.datagen import generate_dataset
from goalign.encoders import TextEncoderConfig, Tokenizer, VisionEncoderConfig, build_model
from goalign.evalkit import (
    REPORT_VERSION,
    RetrievalReport,
    attention_heatmap,
    evaluate,
    export_attention,
    parameter_checksum,
    recall_at_k,
    true_ranks,
)


def sort_oracle(sim, gt, k):
    """Stable descending sort; position of the true item decides the hit."""
    hits = 0
    for q in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda j: (-sim[q, j], j))
        hits += order.index(gt[q]) < min(k, sim.shape[1])
    return hits / sim.shape[0]


class TestRecall:
    def test_identity(self):
        assert recall_at_k(np.eye(5), range(5), 1) == 1.0

    def test_always_second(self):
        sim = np.eye(6)
        gt = [(i + 1) % 6 for i in range(6)]
        sim = sim + 0.5 * np.eye(6)[gt]
        assert recall_at_k(sim, gt, 1) == 0.0
        assert recall_at_k(sim, gt, 5) == 1.0

    def test_random_20(self):
        rng = np.random.default_rng(0)
        sim = rng.normal(size=(20, 20))
        gt = rng.permutation(20)
        for k in (1, 5, 10):
            assert recall_at_k(sim, gt, k) == sort_oracle(sim, gt, k)

    def test_sort_oracle_1000(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            q, g = rng.integers(1, 12), rng.integers(1, 12)
            # coarse values force ties
            sim = rng.integers(0, 4, size=(q, g)).astype(float)
            gt = rng.integers(0, g, size=q)
            prev = 0.0
            for k in range(1, g + 3):
                r = recall_at_k(sim, gt, k)
                assert r == sort_oracle(sim, gt, k)
                assert r >= prev
                prev = r
            assert recall_at_k(sim, gt, g) == 1.0

    def test_ties_prefer_lower_index(self):
        sim = np.ones((2, 3))
        assert list(true_ranks(sim, [0, 2])) == [0, 2]

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(2)
        sim = rng.normal(size=(7, 7))
        gt = np.arange(7)
        for k in (1, 3):
            assert recall_at_k(sim.T, gt, k) == sort_oracle(sim.T, gt, k)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(2), [0, 1], 0)


V = VisionEncoderConfig(image_size=32, patch_size=8, depth=1, dim=16, heads=2, mlp_ratio=2)


def tiny(records, seed=0):
    tok = Tokenizer.from_texts((r.caption for r in records), max_len=128)
    model = build_model(V, TextEncoderConfig(vocab_size=tok.vocab_size, dim=16, heads=2, depth=1), seed=seed)
    return model, tok


class TestEvaluate:
    def test_single_record(self):
        recs = generate_dataset(1, seed=0, image_size=32, patch_size=8)
        model, tok = tiny(recs)
        rep = evaluate(model, tok, recs, ks=(1, 5))
        assert rep.t2i == {1: 1.0, 5: 1.0} and rep.i2t == {1: 1.0, 5: 1.0}

    def test_untrained_near_chance(self):
        recs = generate_dataset(64, seed=1, image_size=32, patch_size=8)
        model, tok = tiny(recs, seed=3)
        rep = evaluate(model, tok, recs, ks=(1,))
        p = 1 / 64
        band = 3 * math.sqrt(p * (1 - p) / 64)
        assert abs(rep.t2i[1] - p) <= band
        assert abs(rep.i2t[1] - p) <= band

    def test_report_invariants_and_read_only(self, tmp_path):
        recs = generate_dataset(12, seed=2, image_size=32, patch_size=8)
        model, tok = tiny(recs)
        before = parameter_checksum(model)
        rep = evaluate(model, tok, recs, ks=(1, 5, 10, 15, 25, 50), model_id="m", dataset_id="d")
        assert parameter_checksum(model) == before
        for direction in (rep.t2i, rep.i2t):
            vals = [direction[k] for k in rep.ks]
            assert all(0 <= v <= 1 for v in vals)
            assert vals == sorted(vals)
            assert direction[15] == direction[50] == 1.0
        path = rep.write(tmp_path / "r.json")
        d = json.loads(path.read_text())
        assert d["version"] == REPORT_VERSION and d["n_queries"] == 12
        assert RetrievalReport.from_json(d) == rep
        assert rep.to_tsv().splitlines()[0] == "k\tt2i\ti2t"

    def test_empty(self):
        model, tok = tiny(generate_dataset(1, seed=0, image_size=32, patch_size=8))
        with pytest.raises(ValueError):
            evaluate(model, tok, [])

    def test_checksum_sees_changes(self):
        model, _ = tiny(generate_dataset(1, seed=0, image_size=32, patch_size=8))
        before = parameter_checksum(model)
        with torch.no_grad():
            model.logit_scale.add_(1e-3)
        assert parameter_checksum(model) != before


class TestHeatmap:
    def test_constant_image(self):
        model, _ = tiny(generate_dataset(1, seed=0, image_size=32, patch_size=8))
        art = attention_heatmap(np.full((32, 32, 3), 0.5), model)
        assert art.degenerate
        assert not art.grid.any()

    def test_grid_shape_and_files(self, tmp_path):
        recs = generate_dataset(1, seed=4, image_size=32, patch_size=8)
        model, _ = tiny(recs)
        art = export_attention(recs[0].image, model, tmp_path / "viz" / "scene.png")
        assert art.grid.shape == (4, 4, 3)
        assert art.overlay.shape == (32, 32, 3)
        assert not art.degenerate
        grid = np.asarray(Image.open(art.paths["grid"]))
        assert grid.shape == (4, 4, 3)
        np.testing.assert_array_equal(grid, np.round(art.grid * 255).astype(np.uint8))
        assert Image.open(art.paths["overlay"]).size == (32, 32)

    def test_different_models_differ(self, tmp_path):
        recs = generate_dataset(1, seed=4, image_size=32, patch_size=8)
        a = attention_heatmap(recs[0].image, tiny(recs, seed=0)[0])
        b = attention_heatmap(recs[0].image, tiny(recs, seed=1)[0])
        assert (a.grid != b.grid).any()
