import json

import numpy as np
import pytest

from splatnvs.errors import InvalidInputError
from splatnvs.fit import PARAM_GROUPS, FitConfig
from splatnvs.metrics import challenge_score, psnr, ssim
from splatnvs.pipeline import (
    PipelineConfig,
    evaluate_run,
    run_basic,
    run_iterative,
    run_pipeline,
    write_artifacts,
)
from splatnvs.splat import render

from synth import small_dataset


@pytest.fixture(scope="module")
def data():
    return small_dataset(n_prims=12, n_views=3, n_targets=2, size=16)[1]


FAST = FitConfig(iterations=12)


class TestBasic:
    def test_identity_outputs_are_raw_renders(self, data):
        res = run_pipeline(data, PipelineConfig(fit=FAST))
        assert len(res.outputs) == data.M
        for out, raw, t in zip(res.outputs, res.renders, data.targets):
            np.testing.assert_array_equal(out, raw)
            np.testing.assert_array_equal(out, render(res.scene, t.pose, t.intrinsics))

    def test_no_targets(self, data):
        from splatnvs.dataset import SceneDataset

        ds = SceneDataset(data.sources, [], data.point_cloud)
        assert run_basic(ds, PipelineConfig(fit=FAST)) == []

    def test_deterministic(self, data):
        cfg = PipelineConfig(fit=FAST, enhancer="color-match")
        for a, b in zip(run_basic(data, cfg), run_basic(data, cfg)):
            np.testing.assert_array_equal(a, b)

    def test_references_among_sources(self, data):
        res = run_pipeline(data, PipelineConfig(fit=FAST))
        assert all(0 <= r < data.N for r in res.references)


class TestIterative:
    def test_k1_adds_one_pseudo_view_per_target(self, data):
        before = [s.image.copy() for s in data.sources]
        res = run_pipeline(data, PipelineConfig(fit=FAST, refinement_steps=1, refine_iterations=3))
        assert res.dataset.N == data.N + data.M
        assert [s.name for s in res.dataset.sources[data.N:]] == ["pseudo_r1_t0", "pseudo_r1_t1"]
        for s, img in zip(res.dataset.sources[:data.N], before):
            np.testing.assert_array_equal(s.image, img)
        assert not any(s.mask.any() for s in res.dataset.sources[data.N:])

    def test_k3_counting(self, data):
        res = run_pipeline(data, PipelineConfig(fit=FAST, refinement_steps=3, refine_iterations=2))
        assert res.dataset.N == data.N + 3 * data.M
        assert len(res.outputs) == data.M

    def test_k0_routes_to_basic(self, data):
        cfg = PipelineConfig(fit=FAST)
        for a, b in zip(run_iterative(data, cfg), run_basic(data, cfg)):
            np.testing.assert_array_equal(a, b)

    def test_frozen_refinement_equals_basic(self, data):
        frozen = FitConfig(**{f"lr_{g}": 0.0 for g in PARAM_GROUPS})
        cfg = PipelineConfig(fit=FAST, refinement_steps=2, refine_iterations=4, refine_fit=frozen)
        for a, b in zip(run_iterative(data, cfg), run_basic(data, cfg)):
            np.testing.assert_array_equal(a, b)

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            PipelineConfig(refinement_steps=-1)
        with pytest.raises(InvalidInputError):
            PipelineConfig(refinement_steps=2, refine_iterations=0)
        cfg = PipelineConfig(fit=FitConfig(seed=3), refinement_steps=2)
        again = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()


class TestEvaluate:
    def test_identical_with_zero_lpips(self):
        gt = [np.random.default_rng(i).uniform(size=(12, 12, 3)) for i in range(2)]
        recs, agg = evaluate_run(gt, gt, lpips=[0.0, 0.0])
        assert agg.psnr == 100.0 and agg.ssim == 1.0
        assert agg.score == pytest.approx(1.0)

    def test_single_frame(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(2, 12, 12, 3))
        recs, agg = evaluate_run([a], [b], lpips=[0.3])
        assert recs[0] == agg
        assert agg.psnr == psnr(a, b) and agg.ssim == ssim(a, b)
        assert agg.score == challenge_score(psnr(a, b), ssim(a, b), 0.3)

    def test_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            evaluate_run([np.zeros((12, 12, 3))], [])


def test_write_artifacts(tmp_path, data):
    res = run_pipeline(data, PipelineConfig(fit=FAST))
    write_artifacts(res, tmp_path, {"sources": data.N, "seed": 0})
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["metrics.json", "render_0.png", "render_1.png", "run.json", "target_0.png", "target_1.png"]
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert set(report["frames"]) == {s.name for s in data.sources}
    assert report["meta"]["ssim_channels"] == "per-channel-mean"
