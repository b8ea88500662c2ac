import math
import warnings

import numpy as np
import pytest
import torch

from citytft import synthgen
from citytft.dataio import compute_norm_stats, make_windows
from citytft.model import ModelConfig, build_model
from citytft.train import (
    AdamW,
    CHECKPOINT_FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train_model,
)

TINY_MODEL = ModelConfig(d_model=16, n_heads=2, dropout=0.1, seed=21)


@pytest.fixture(scope="module")
def tiny_windows():
    """A small but real window set: one climate, one building, 60 windows."""
    cfg = synthgen.SynthClimateConfig("mini", 18.0, 8.0, 4.0, 700.0, 60.0, 1.0, 77)
    weather = synthgen.generate_weather(cfg)
    building = synthgen.DEFAULT_BUILDINGS[0]
    loads = synthgen.simulate_loads(building, weather)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stats = compute_norm_stats([weather], [building], [loads])
    return make_windows(building, weather, loads, stats, stride=24)[:60], stats


class TestAdamW:
    def test_zero_grad_no_decay_is_identity(self):
        p = torch.nn.Parameter(torch.tensor([1.5, -2.0]))
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        p.grad = torch.zeros_like(p)
        opt.step()
        assert torch.equal(p.detach(), torch.tensor([1.5, -2.0]))

    def test_single_scalar_step_hand_computed(self):
        # p0 = 1, g = 0.5, lr = 0.01, betas (0.9, 0.999), eps 1e-8, wd 0:
        # m_hat = g, v_hat = g^2 -> p1 = p0 - lr * g / (|g| + eps)
        lr, g, eps = 0.01, 0.5, 1e-8
        p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = AdamW([("p", p)], lr=lr, betas=(0.9, 0.999), eps=eps, weight_decay=0.0)
        p.grad = torch.tensor([g], dtype=torch.float64)
        opt.step()
        expected = 1.0 - lr * g / (math.sqrt(g * g) + eps)
        assert float(p.detach()) == pytest.approx(expected, abs=1e-15)

    def test_decoupled_decay_with_zero_grad(self):
        lr, wd = 0.01, 0.1
        p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
        opt = AdamW([("p", p)], lr=lr, weight_decay=wd)
        p.grad = torch.zeros_like(p)
        opt.step()
        assert float(p.detach()) == pytest.approx(2.0 * (1 - lr * wd), abs=1e-15)

    def test_second_step_uses_moments(self):
        lr, g = 0.01, 0.5
        p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = AdamW([("p", p)], lr=lr, betas=(0.9, 0.999), eps=0.0, weight_decay=0.0)
        for _ in range(2):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step()
        # constant gradient: m_hat = g and v_hat = g^2 at every step
        assert float(p.detach()) == pytest.approx(1.0 - 2 * lr, abs=1e-12)

    def test_non_finite_gradient_names_parameter(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        opt = AdamW([("layer.weight", p)], lr=0.1)
        p.grad = torch.tensor([float("nan")])
        with pytest.raises(TrainingDivergedError, match="layer.weight"):
            opt.step()

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            AdamW([("p", torch.nn.Parameter(torch.zeros(1)))], lr=0.0)


def _quick_cfg(**overrides):
    base = {"epochs": 2, "learning_rate": 1e-3, "batch_size": 16, "seed": 5, "model_kind": "tft"}
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_two_runs_identical(self, tiny_windows):
        windows, stats = tiny_windows
        results = []
        for _ in range(2):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                results.append(train_model(TINY_MODEL, _quick_cfg(), windows, [], stats))
        a, b = results
        assert len(a.log) == len(b.log) == 2
        for ea, eb in zip(a.log, b.log):
            assert abs(ea.l_total - eb.l_total) < 1e-12
            assert abs(ea.l_prob - eb.l_prob) < 1e-12
            assert abs(ea.l_quantile - eb.l_quantile) < 1e-12
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_log_modes(self, tiny_windows):
        windows, stats = tiny_windows
        result = train_model(TINY_MODEL, _quick_cfg(), windows[:32], windows[32:48], stats)
        train_entries = [e for e in result.log if e.split == "train"]
        val_entries = [e for e in result.log if e.split == "val"]
        assert all(e.mode == "train" for e in train_entries)
        assert all(e.mode == "eval" for e in val_entries)
        assert [e.epoch for e in train_entries] == [1, 2]
        assert all(math.isfinite(e.l_total) for e in result.log)

    def test_log_file_jsonl(self, tiny_windows, tmp_path):
        import json

        windows, stats = tiny_windows
        log_path = tmp_path / "log.jsonl"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train_model(TINY_MODEL, _quick_cfg(), windows, [], stats, log_file=log_path)
        lines = log_path.read_text().strip().split("\n")
        assert len(lines) == 2
        entry = json.loads(lines[0])
        assert {"epoch", "split", "mode", "l_prob", "l_quantile", "l_total", "wall_time"} <= set(entry)

    def test_empty_train_split_rejected(self, tiny_windows):
        _, stats = tiny_windows
        with pytest.raises(ValueError, match="empty"):
            train_model(TINY_MODEL, _quick_cfg(), [], [], stats)

    def test_divergence_aborts_with_location(self, tiny_windows):
        windows, stats = tiny_windows
        crazy = _quick_cfg(learning_rate=1e18, epochs=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(TrainingDivergedError):
                train_model(TINY_MODEL, crazy, windows, [], stats)

    def test_overfit_small_fixture(self, tiny_windows):
        # 8 windows, 200 epochs: training loss collapses below 10% of its epoch-1 value
        windows, stats = tiny_windows
        cfg = TrainConfig(epochs=200, learning_rate=3e-3, batch_size=8, seed=3,
                          weight_decay=0.0, model_kind="tft")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = train_model(TINY_MODEL, cfg, windows[:8], [], stats)
        first = result.log[0].l_total
        last = result.log[-1].l_total
        assert last < 0.1 * first, f"epoch 1: {first}, epoch 200: {last}"


class TestCheckpoints:
    def _train(self, windows, stats, out_dir, epochs=2, resume=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return train_model(
                TINY_MODEL, _quick_cfg(epochs=epochs), windows, [], stats,
                out_dir=out_dir, resume_from=resume,
            )

    def test_save_load_eval_bitwise(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        result = self._train(windows, stats, tmp_path)
        ckpt = load_checkpoint(result.checkpoint_last)
        reloaded = ckpt.build_model()
        static = torch.randn(3, 13, generator=torch.Generator().manual_seed(0))
        weather = torch.randn(3, 24, 13, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            a = result.model(static, weather)
            b = reloaded(static, weather)
        assert torch.equal(a.trigger_probs, b.trigger_probs)
        assert torch.equal(a.quantile_proj, b.quantile_proj)

    def test_resume_matches_uninterrupted(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        full = self._train(windows, stats, tmp_path / "full", epochs=4)
        part = self._train(windows, stats, tmp_path / "part", epochs=2)
        resumed = self._train(
            windows, stats, tmp_path / "resumed", epochs=4,
            resume=part.checkpoint_last,
        )
        for pa, pb in zip(full.model.parameters(), resumed.model.parameters()):
            assert torch.equal(pa, pb)
        full_tail = [e for e in full.log if e.epoch > 2]
        for ea, eb in zip(full_tail, resumed.log):
            assert ea.epoch == eb.epoch
            assert abs(ea.l_total - eb.l_total) < 1e-12

    def test_truncated_file_rejected(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        result = self._train(windows, stats, tmp_path)
        blob = result.checkpoint_last.read_bytes()
        bad = tmp_path / "truncated.pt"
        bad.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(bad)

    def test_version_mismatch_rejected(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        model = build_model(TINY_MODEL, "tft")
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, TINY_MODEL, "tft", stats, _quick_cfg())
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = CHECKPOINT_FORMAT_VERSION + 1
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_resume_with_different_config_refused(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        result = self._train(windows, stats, tmp_path)
        other_model = ModelConfig(d_model=8, n_heads=2, seed=21)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(CheckpointError, match="different model"):
                train_model(
                    other_model, _quick_cfg(epochs=3), windows, [], stats,
                    resume_from=result.checkpoint_last,
                )

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_best_checkpoint_tracks_validation(self, tiny_windows, tmp_path):
        windows, stats = tiny_windows
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = train_model(
                TINY_MODEL, _quick_cfg(epochs=3), windows[:40], windows[40:], stats,
                out_dir=tmp_path,
            )
        assert result.checkpoint_best.exists()
        best = load_checkpoint(result.checkpoint_best)
        val_by_epoch = {e.epoch: e.l_total for e in result.log if e.split == "val"}
        assert best.best_val == pytest.approx(min(val_by_epoch.values()), abs=1e-12)
        assert best.epoch == min(val_by_epoch, key=val_by_epoch.get)
