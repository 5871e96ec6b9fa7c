"""Experiment harness: dataset assembly, sweeps, ablations, method tables."""

import json
from pathlib import Path

import numpy as np
import pytest

from nacn2n.errors import ConfigError
from nacn2n.experiments import (
    ABLATION_VARIANTS,
    DESK_MAX_EPOCHS,
    DESK_MAX_PAIRS,
    DESK_MAX_SIDE,
    REFERENCE_RESULTS,
    RESULT_COLUMNS,
    DataConfig,
    Dataset,
    ExperimentPlan,
    build_dataset,
    load_sources,
    run_ablations,
    run_plan,
    sweep_backbones,
    sweep_module_count,
    sweep_noise_variance,
    tabulate_methods,
)
from nacn2n.imaging import save_image
from nacn2n.models import BackboneConfig
from nacn2n.noise import NoiseSpec, corrupt, stream_for
from nacn2n.phantoms import make_phantoms
from nacn2n.training import TrainConfig


def tiny_plan(tmp_path, name="exp", axis="none", values=(), **overrides):
    """A plan small enough that one sweep point trains in about a second."""
    kwargs = dict(
        name=name,
        axis=axis,
        axis_values=values,
        output_dir=str(tmp_path / "runs"),
        master_seed=3,
        chain_length=1,
        data=DataConfig(n_sources=4, image_size=32, train_fraction=0.5),
        model=BackboneConfig("unet", base_channels=4, depth=2),
        train=TrainConfig(epochs=1, seed=3),
    )
    kwargs.update(overrides)
    return ExperimentPlan(**kwargs)


class TestConfigs:
    def test_data_config_validation(self):
        with pytest.raises(ConfigError, match="n_sources"):
            DataConfig(n_sources=1)
        with pytest.raises(ConfigError, match="copies"):
            DataConfig(copies=0)

    def test_data_config_round_trip(self):
        cfg = DataConfig(n_sources=6, patch_size=16, group_size=3)
        assert DataConfig.from_dict(cfg.to_dict()) == cfg

    def test_plan_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="name"):
            tiny_plan(tmp_path, name="a/b")
        with pytest.raises(ConfigError, match="axis"):
            tiny_plan(tmp_path, axis="speed")
        with pytest.raises(ConfigError, match="scale"):
            tiny_plan(tmp_path, scale="galactic")
        with pytest.raises(ConfigError, match="chain_length"):
            tiny_plan(tmp_path, chain_length=0)

    def test_plan_json_round_trip(self, tmp_path):
        plan = tiny_plan(tmp_path, axis="backbone", values=("unet", "cpce"))
        path = tmp_path / "plan.json"
        plan.save(path)
        assert ExperimentPlan.load(path) == plan


class TestDataset:
    def test_split_counts(self, tmp_path):
        cfg = DataConfig(n_sources=4, image_size=32, train_fraction=0.5)
        ds = build_dataset(cfg, NoiseSpec(), 3)
        assert len(ds.train_observed) == len(ds.train_clean) == 2
        assert len(ds.test_observed) == len(ds.test_clean) == 2
        assert ds.summary() == {"n_train": 2, "n_test": 2, "shape": [32, 32]}

    def test_observed_is_corrupted_and_clipped(self):
        ds = build_dataset(DataConfig(n_sources=4, image_size=32), NoiseSpec(), 3)
        for noisy, clean in zip(ds.train_observed, ds.train_clean):
            assert noisy.id == clean.id
            assert not np.array_equal(noisy.pixels, clean.pixels)
            lo, hi = noisy.value_range
            assert noisy.pixels.min() >= lo and noisy.pixels.max() <= hi

    def test_deterministic(self):
        a = build_dataset(DataConfig(n_sources=4, image_size=32), NoiseSpec(), 3)
        b = build_dataset(DataConfig(n_sources=4, image_size=32), NoiseSpec(), 3)
        for x, y in zip(a.train_observed + a.test_observed,
                        b.train_observed + b.test_observed):
            assert x.id == y.id
            assert np.array_equal(x.pixels, y.pixels)

    def test_train_test_disjoint(self):
        ds = build_dataset(DataConfig(n_sources=8, image_size=32), NoiseSpec(), 3)
        train_ids = {img.id for img in ds.train_observed}
        test_ids = {img.id for img in ds.test_observed}
        assert not train_ids & test_ids

    def test_patches_stay_with_their_source(self):
        cfg = DataConfig(n_sources=4, image_size=40, patch_size=16, train_fraction=0.5)
        ds = build_dataset(cfg, NoiseSpec(), 3)
        # 40x40 at stride 16 gives 4 patches per source, grouped by source
        assert len(ds.train_observed) + len(ds.test_observed) == 16
        train_groups = {img.group for img in ds.train_observed}
        test_groups = {img.group for img in ds.test_observed}
        assert not train_groups & test_groups

    def test_manifest_sources(self, tmp_path):
        phantoms = make_phantoms(3, size=32, seed=5)
        entries = []
        for img in phantoms:
            path = tmp_path / f"{img.id}.raw"
            save_image(img, path)
            entries.append({"path": f"{img.id}.raw", "id": img.id, "group": "cohort"})
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"sources": entries}))
        loaded = load_sources(DataConfig(manifest=str(manifest)), 0)
        assert [img.id for img in loaded] == [img.id for img in phantoms]
        assert all(img.group == "cohort" for img in loaded)
        for got, want in zip(loaded, phantoms):
            assert np.array_equal(got.pixels, want.pixels)

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"sources": []}))
        with pytest.raises(ConfigError, match="no sources"):
            load_sources(DataConfig(manifest=str(manifest)), 0)


class TestDeskLimits:
    def test_too_many_epochs(self, tmp_path):
        plan = tiny_plan(tmp_path, train=TrainConfig(epochs=DESK_MAX_EPOCHS + 1, seed=3))
        with pytest.raises(ConfigError, match="desk-scale cap"):
            run_plan(plan)

    def test_too_many_pairs(self, tmp_path):
        plan = tiny_plan(
            tmp_path,
            data=DataConfig(n_sources=40, image_size=32, train_fraction=0.8, copies=4),
        )
        # 32 train sources x 4 copies -> 384 ordered pairs
        with pytest.raises(ConfigError, match=str(DESK_MAX_PAIRS)):
            run_plan(plan)

    def test_too_large_side(self, tmp_path):
        plan = tiny_plan(tmp_path, data=DataConfig(n_sources=4, image_size=96))
        with pytest.raises(ConfigError, match=str(DESK_MAX_SIDE)):
            run_plan(plan)

    def test_full_scale_lifts_caps(self, tmp_path):
        plan = tiny_plan(
            tmp_path, scale="full", data=DataConfig(n_sources=4, image_size=96)
        )
        result = run_plan(plan)
        assert result["rows"][0]["status"] == "ok"


class TestSweeps:
    def test_backbone_sweep_with_reserved_name(self, tmp_path):
        plan = tiny_plan(
            tmp_path, name="bb", axis="backbone", values=("unet", "cpce", "r2unet")
        )
        result = sweep_backbones(plan)
        rows = result["rows"]
        assert [r["value"] for r in rows] == ["unet", "cpce", "r2unet"]
        assert [r["status"] for r in rows] == ["ok", "ok", "unavailable"]
        assert "not implemented" in rows[2]["notes"]
        for row in rows[:2]:
            assert row["psnr"] is not None and np.isfinite(row["psnr"])
            assert set(RESULT_COLUMNS) <= set(row)

    def test_backbone_sweep_outputs_on_disk(self, tmp_path):
        plan = tiny_plan(tmp_path, name="bb", axis="backbone", values=("unet", "cpce"))
        result = sweep_backbones(plan)
        out = Path(plan.output_dir) / "bb"
        assert (out / "results.csv").exists()
        assert (out / "results.json").exists()
        assert (out / "psnr_vs_backbone.png").exists()
        assert (out / "ssim_vs_backbone.png").exists()
        assert (out / "backbone=unet" / "panels.png").exists()
        assert (out / "backbone=unet" / "model.ckpt").exists()
        assert (out / "backbone=unet" / "per_image.csv").exists()
        payload = json.loads((out / "results.json").read_text())
        assert payload["metadata"]["plan"] == plan.to_dict()
        assert payload["metadata"]["reference"] == REFERENCE_RESULTS
        assert result["paths"]["csv"] == str(out / "results.csv")

    def test_rerun_reuses_cached_rows(self, tmp_path):
        plan = tiny_plan(tmp_path, name="bb", axis="backbone", values=("unet",))
        sweep_backbones(plan)
        results = Path(plan.output_dir) / "bb" / "results.json"
        first = results.read_bytes()
        sweep_backbones(plan)
        assert results.read_bytes() == first

    def test_unknown_backbone_value(self, tmp_path):
        plan = tiny_plan(tmp_path, axis="backbone", values=("unet", "foo"))
        with pytest.raises(ConfigError, match="foo"):
            sweep_backbones(plan)

    def test_module_count_sweep(self, tmp_path):
        plan = tiny_plan(tmp_path, name="mc", axis="module_count", values=(1, 2))
        rows = sweep_module_count(plan)["rows"]
        assert [r["T"] for r in rows] == [1, 2]
        counts = {r["parameter_count"] for r in rows}
        assert len(counts) == 1
        out = Path(plan.output_dir) / "mc"
        assert (out / "psnr_vs_module_count.png").exists()

    def test_module_count_rejects_nonpositive(self, tmp_path):
        plan = tiny_plan(tmp_path, axis="module_count", values=(0,))
        with pytest.raises(ConfigError, match=">= 1"):
            sweep_module_count(plan)

    def test_variance_sweep(self, tmp_path):
        plan = tiny_plan(
            tmp_path, name="var", axis="gaussian_variance", values=(0.0, 10.0),
            noise=NoiseSpec(poisson_scale=None, gaussian_variance=15.0),
        )
        rows = sweep_noise_variance(plan)["rows"]
        assert [r["value"] for r in rows] == ["0", "10"]
        assert rows[0]["flags"] == "noise_free"
        assert "identity" in rows[0]["notes"]
        assert rows[1]["flags"] == ""

    def test_variance_sweep_rejects_negative(self, tmp_path):
        plan = tiny_plan(tmp_path, axis="gaussian_variance", values=(-1.0,))
        with pytest.raises(ConfigError, match=">= 0"):
            sweep_noise_variance(plan)


class TestAblations:
    def test_all_variants(self, tmp_path):
        plan = tiny_plan(tmp_path, name="abl", axis="ablation")
        rows = run_ablations(plan)["rows"]
        assert [r["value"] for r in rows] == list(ABLATION_VARIANTS)
        assert all(r["status"] == "ok" for r in rows)
        ndct = rows[list(ABLATION_VARIANTS).index("ndct_base")]
        assert "clean references" in ndct["notes"]
        # the four variants are distinct configurations
        assert len({r["config_hash"] for r in rows}) == 4

    def test_unknown_variant(self, tmp_path):
        plan = tiny_plan(tmp_path, axis="ablation", values=("full", "dropout"))
        with pytest.raises(ConfigError, match="dropout"):
            run_ablations(plan)

    def test_ndct_base_skipped_without_clean_refs(self, tmp_path):
        plan = tiny_plan(tmp_path, name="abl", axis="ablation", values=("ndct_base",))
        ds = build_dataset(plan.data, plan.noise, plan.master_seed)
        ds = Dataset(ds.train_observed, [], ds.test_observed, ds.test_clean)
        rows = run_ablations(plan, ds)["rows"]
        assert rows[0]["status"] == "skipped"
        assert "clean references" in rows[0]["notes"]


class TestRunPlan:
    def test_axis_none_single_row(self, tmp_path):
        plan = tiny_plan(tmp_path, name="single")
        rows = run_plan(plan)["rows"]
        assert len(rows) == 1
        assert rows[0]["value"] == "base"
        assert rows[0]["status"] == "ok"

    def test_dispatch_matches_direct_call(self, tmp_path):
        plan = tiny_plan(tmp_path, name="mc", axis="module_count", values=(1,))
        via_dispatch = run_plan(plan)["rows"]
        via_direct = sweep_module_count(plan)["rows"]
        assert via_dispatch == via_direct


class TestMethodTable:
    def make_testbed(self, tmp_path, n=2):
        refs = make_phantoms(n, size=32, seed=11)
        spec = NoiseSpec(seed=11)
        inputs = [corrupt(img, spec, stream_for(11, img.id, 0)) for img in refs]
        return refs, inputs

    def test_rows_and_order(self, tmp_path):
        refs, inputs = self.make_testbed(tmp_path)
        ext = tmp_path / "median"
        ext.mkdir()
        for img in refs:
            save_image(img, ext / f"{img.id}.raw")
        result = tabulate_methods(
            refs, inputs, ours=refs, external_dirs={"median": str(ext)},
            out_dir=tmp_path / "table",
        )
        rows = result["rows"]
        assert [r["method"] for r in rows] == ["noisy input", "median", "ours"]
        assert all(r["status"] == "ok" for r in rows)
        # perfect outputs hit the zero-error sentinel
        assert rows[1]["psnr"] == 100.0
        assert rows[2]["psnr"] == 100.0
        assert rows[0]["psnr"] < 100.0
        assert (tmp_path / "table" / "methods.csv").exists()
        assert (tmp_path / "table" / "methods.json").exists()

    def test_incomplete_external_dir(self, tmp_path):
        refs, inputs = self.make_testbed(tmp_path)
        ext = tmp_path / "partial"
        ext.mkdir()
        save_image(refs[0], ext / f"{refs[0].id}.raw")
        rows = tabulate_methods(
            refs, inputs, ours=None, external_dirs={"partial": str(ext)},
            out_dir=tmp_path / "table",
        )["rows"]
        assert rows[1]["status"] == "incomplete"
        assert "missing output" in rows[1]["notes"]
        assert rows[1]["psnr"] is None

    def test_shape_mismatch_marked_incomplete(self, tmp_path):
        refs, inputs = self.make_testbed(tmp_path)
        ext = tmp_path / "wrong"
        ext.mkdir()
        small = make_phantoms(2, size=16, seed=11)
        for ref, img in zip(refs, small):
            save_image(img, ext / f"{ref.id}.raw")
        rows = tabulate_methods(
            refs, inputs, ours=None, external_dirs={"wrong": str(ext)},
            out_dir=tmp_path / "table",
        )["rows"]
        assert rows[1]["status"] == "incomplete"
        assert "shape" in rows[1]["notes"]

    def test_validation(self, tmp_path):
        refs, inputs = self.make_testbed(tmp_path)
        with pytest.raises(ConfigError, match="reference"):
            tabulate_methods([], [], None, None, tmp_path)
        with pytest.raises(ConfigError, match="inputs"):
            tabulate_methods(refs, inputs[:1], None, None, tmp_path)


class TestReferenceResults:
    """Published full-scale reference numbers carried as table metadata."""

    def test_labeled_as_context_only(self):
        assert "not reproduced" in REFERENCE_RESULTS["label"]

    def test_backbone_table(self):
        bb = REFERENCE_RESULTS["backbones"]
        assert bb["unet"] == {"psnr": 27.294, "ssim": 0.6978}
        assert bb["cpce"] == {"psnr": 24.765, "ssim": 0.6898}
        assert bb["resnet"] == {"psnr": 24.765, "ssim": 0.6697}
        # the selected backbone beats every alternative on both metrics
        others = [v for k, v in bb.items() if k != "unet"]
        assert all(bb["unet"]["psnr"] > v["psnr"] for v in others)
        assert all(bb["unet"]["ssim"] > v["ssim"] for v in others)

    def test_ablation_table(self):
        ab = REFERENCE_RESULTS["ablations"]
        assert ab["poisson_only"] == {"psnr": 23.153, "ssim": 0.5578}
        assert ab["gaussian_only"] == {"psnr": 22.418, "ssim": 0.5233}
        assert ab["ndct_base"] == {"psnr": 27.384, "ssim": 0.6898}
        assert ab["full"] == {"psnr": 27.294, "ssim": 0.6978}
        # the mixed noise model beats either component alone
        assert ab["full"]["psnr"] > ab["poisson_only"]["psnr"]
        assert ab["full"]["psnr"] > ab["gaussian_only"]["psnr"]

    def test_method_table(self):
        mt = REFERENCE_RESULTS["methods"]
        assert mt["ldct"] == {"psnr": 21.698, "ssim": 0.4176}
        assert mt["ours"] == {"psnr": 27.294, "ssim": 0.6978}
        assert mt["ours"]["psnr"] > mt["ldct"]["psnr"]

    def test_operating_point(self):
        op = REFERENCE_RESULTS["operating_point"]
        assert op == {"module_count": 5, "gaussian_variance": 15.0}
