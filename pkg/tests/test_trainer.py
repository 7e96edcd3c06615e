import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from postrain import dataio, trainer
from postrain.config import OptimizerConfig, apply_overrides, toy
from postrain.multitask import HybridLossConfig, hybrid_loss
from postrain.verification import evaluate_split


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_ds")
    spec = dataio.SyntheticSpec(grid_shape=(1, 4, 16, 16), n_samples={"train": 6, "val": 3, "test": 3}, seed=11)
    dataio.generate_synthetic(spec, root)
    return root


def small_cfg(root, **kw):
    cfg = toy(str(root), epochs=2, seeds=(0,))
    return apply_overrides(cfg, ["backbone.embed_dims=[12, 24]", "backbone.num_heads=[2, 4]",
                                 "backbone.out_feature_channels=8"] + [f"{k}={json.dumps(v)}" for k, v in kw.items()])


class TestSelection:
    def test_argmax(self):
        assert trainer.select_best([0.1, 0.3, 0.2]) == 2

    def test_tie_earliest(self):
        assert trainer.select_best([0.3, 0.3]) == 1

    def test_single(self):
        assert trainer.select_best([0.05]) == 1

    def test_nan_skipped(self):
        assert trainer.select_best([math.nan, 0.2, math.nan]) == 2

    def test_all_undefined(self):
        with pytest.raises(trainer.SelectionError, match="larger validation split"):
            trainer.select_best([math.nan, math.nan])

    def test_reports_and_metric(self):
        g = [np.array([[1, 2]])]
        hit = evaluate_split(g, g)
        miss = evaluate_split([np.array([[0, 0]])], g)
        assert trainer.select_best([miss, hit, hit], "heavy_csi") == 2


class TestAggregate:
    def test_population_std(self):
        reps = []
        for v in (0.2, 0.3, 0.4):
            r = evaluate_split([np.array([[1]])], [np.array([[1]])])
            r.metrics["rain"]["csi"] = v
            reps.append(r)
        agg = trainer.aggregate_seeds(reps)["rain_csi"]
        assert agg["mean"] == pytest.approx(0.3, abs=1e-15)
        assert agg["std"] == pytest.approx(math.sqrt(1 / 150), abs=1e-15)
        assert agg["best"] == 0.4 and agg["n"] == 3

    def test_single_seed_zero_std(self):
        r = evaluate_split([np.array([[1]])], [np.array([[1]])])
        assert trainer.aggregate_seeds([r])["rain_csi"]["std"] == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            trainer.aggregate_seeds([])


class TestModel:
    def test_cam_toggle_parameter_delta(self, dataset):
        cfg = small_cfg(dataset)
        shape = dataio.read_manifest(dataset).shape
        on = trainer.build_model(cfg, shape, 0)
        off = trainer.build_model(replace(cfg, cam=replace(cfg.cam, enabled=False)), shape, 0)
        cam_cfg = trainer.cam_config(cfg.cam, trainer.resolve_backbone(cfg.backbone, shape), shape)
        assert on.parameter_count - off.parameter_count == cam_cfg.parameter_count
        # backbone initialisation does not depend on the CAM toggle
        for a, b in zip(on.backbone.parameters(), off.backbone.parameters()):
            assert torch.equal(a, b)

    def test_convlstm_cam_per_timestep(self, dataset):
        cfg = apply_overrides(small_cfg(dataset), ["backbone.kind=\"convlstm\""])
        m = trainer.build_model(cfg, (3, 4, 16, 16), 0)
        assert m.cam.cfg.channels == 4
        assert m(torch.randn(1, 3, 4, 16, 16)).cls_logits.shape == (1, 3, 16, 16)

    def test_descent_single_pixel(self):
        torch.manual_seed(0)
        cfg = replace(toy(), optimizer=OptimizerConfig(lr=1e-6))
        model = trainer.build_model(apply_overrides(cfg, ["backbone.kind=\"unet\"", "backbone.levels=1"]),
                                    (1, 2, 1, 1), 0)
        opt = torch.optim.SGD(model.parameters(), lr=1e-6)
        x = torch.randn(1, 1, 2, 1, 1)
        rain, cls = torch.tensor([[[3.0]]]), torch.tensor([[[1]]])
        before = hybrid_loss(model(x), rain, cls, cfg.loss)[0]
        opt.zero_grad()
        before.backward()
        opt.step()
        after = hybrid_loss(model(x), rain, cls, cfg.loss)[0]
        assert after.item() < before.item()


class TestTraining:
    def test_epoch_order_seeded(self):
        a = trainer.epoch_order(10, 0, 1)
        assert np.array_equal(a, trainer.epoch_order(10, 0, 1))
        assert not np.array_equal(a, trainer.epoch_order(10, 0, 2))
        assert sorted(a) == list(range(10))

    def test_run_layout_and_reproducibility(self, dataset, tmp_path):
        cfg = small_cfg(dataset)
        r1 = trainer.train(cfg, tmp_path / "a")[0]
        r2 = trainer.train(cfg, tmp_path / "b")[0]
        d1, d2 = tmp_path / "a" / cfg.name / "0", tmp_path / "b" / cfg.name / "0"
        for f in ("config.json", "log.jsonl", "epochs.jsonl", "ckpt_best.bin", "test_metrics.json"):
            assert (d1 / f).is_file()
            assert (d1 / f).read_bytes() == (d2 / f).read_bytes(), f
        lines = (d1 / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2 * 3  # 6 samples, batch 2, 2 epochs
        assert set(json.loads(lines[0])) == {"epoch", "step", "loss_cls", "loss_reg", "loss_total"}
        assert r1.best_epoch == r2.best_epoch
        meta = json.loads((d1 / "config.json").read_text())
        assert meta["config_hash"] == replace(cfg, dataset=str(dataset.resolve())).hash().hex()

    def test_checkpoint_roundtrip_evaluation(self, dataset, tmp_path):
        rec = trainer.train(small_cfg(dataset), tmp_path)[0]
        rep = trainer.evaluate_checkpoint(rec.checkpoint, "test")
        assert rep.to_json() == rec.test.to_json()

    def test_existing_run_dir(self, dataset, tmp_path):
        cfg = small_cfg(dataset, epochs=1)
        trainer.train(cfg, tmp_path)
        with pytest.raises(FileExistsError):
            trainer.train(cfg, tmp_path)
        trainer.train(cfg, tmp_path, overwrite=True)

    def test_divergence_continues_other_seeds(self, dataset, tmp_path, monkeypatch):
        cfg = small_cfg(dataset, epochs=1, seeds=[0, 1])
        real = trainer.hybrid_loss

        def flaky(pred, rain, cls, lcfg):
            if torch.initial_seed() == 0:
                raise FloatingPointError("non-finite hybrid loss")
            return real(pred, rain, cls, lcfg)

        monkeypatch.setattr(trainer, "hybrid_loss", flaky)
        recs = trainer.train(cfg, tmp_path)
        assert recs[0].diverged and recs[0].test is None
        assert recs[1].test is not None
        assert (tmp_path / cfg.name / "0" / "diverged.txt").is_file()

    def test_config_hash_mismatch(self, dataset, tmp_path):
        rec = trainer.train(small_cfg(dataset, epochs=1), tmp_path)[0]
        meta = json.loads((rec.run_dir / "config.json").read_text())
        meta["experiment"]["loss"]["alpha"] = 1.0
        (tmp_path / "other.json").write_text(json.dumps(meta))
        with pytest.raises(trainer.TrainingError, match="different config"):
            trainer.load_run_model(rec.checkpoint, tmp_path / "other.json")

    def test_regression_eval_mode(self, dataset, tmp_path):
        rec = trainer.train(small_cfg(dataset, epochs=1, eval_mode="regression"), tmp_path)[0]
        assert rec.test.n_samples == 3


class TestAblation:
    def test_two_toggles(self, dataset, tmp_path):
        cfg = small_cfg(dataset, epochs=1)
        table = trainer.run_ablation(cfg, ("weighted_loss", "cam"), tmp_path)
        assert [r.flags for r in table.rows] == [
            {"weighted_loss": True, "cam": True}, {"weighted_loss": True, "cam": False},
            {"weighted_loss": False, "cam": True}, {"weighted_loss": False, "cam": False}]
        assert all(v == 0.0 or math.isnan(v) for v in table.rows[0].deltas.values())
        assert table.rows[0].parameter_count > table.rows[1].parameter_count
        csv = table.to_csv().splitlines()
        assert len(csv) == 5 and csv[0].startswith("weighted_loss,cam,parameter_count")
        txt = table.format()
        assert "(a)" in txt and "(d)" in txt

    def test_bad_toggle(self, dataset, tmp_path):
        with pytest.raises(ValueError):
            trainer.run_ablation(small_cfg(dataset), ("dropout",), tmp_path)

    def test_ablation_config_flags(self):
        cfg = trainer.ablation_config(toy(), {"weighted_loss": False, "multitask": False, "cam": False})
        assert not cfg.loss.enable_weighting and not cfg.loss.enable_regression_branch and not cfg.cam.enabled
        assert cfg.name == "toy__weighted_loss0_multitask0_cam0"
        assert isinstance(cfg.loss, HybridLossConfig)
