import json
import struct

import numpy as np
import pytest

from bccseg import tensor as T
from bccseg.data import Dataset, stack_batch, synth_records
from bccseg.model import ModelConfig, build_model, forward
from bccseg.tensor import ShapeError, Tensor
from bccseg.train import (
    AdamState,
    BadMagicError,
    CheckpointLayoutError,
    TrainConfig,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    adam_step,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)

SMALL = ModelConfig(stem_channels=4, block_channels=(8, 8, 8), middle_blocks=0, aspp_channels=8)


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Straight-line scalar-by-scalar transcription of the update equations."""
    p = [float(x) for x in p]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] = p[i] - lr * mh / (vh**0.5 + eps)
    return np.array(p)


class TestAdam:
    def test_zero_gradients_leave_params(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.zeros(3)}
        adam_step(p, g, AdamState.for_params(p))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])

    def test_hand_evaluated_step(self):
        p = {"x": np.array([1.0])}
        state = AdamState.for_params(p)
        adam_step(p, {"x": np.array([0.1])}, state)
        np.testing.assert_allclose(state.m["x"], 0.01, rtol=1e-12)
        np.testing.assert_allclose(state.v["x"], 1e-5, rtol=1e-12)
        assert abs(p["x"][0] - 0.999) <= 1e-9
        assert state.t == 1

    @pytest.mark.parametrize("g", [1e-6, 0.1, 3.0, -50.0])
    def test_first_step_magnitude(self, g):
        p = {"x": np.array([0.0])}
        adam_step(p, {"x": np.array([g])}, AdamState.for_params(p, lr=1e-3))
        assert 0.99e-3 <= abs(p["x"][0]) <= 1e-3

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            n = int(rng.integers(1, 8))
            p0 = rng.standard_normal(n)
            grads = [rng.standard_normal(n) for _ in range(10)]
            p = {"w": p0.copy()}
            state = AdamState.for_params(p)
            for g in grads:
                adam_step(p, {"w": g.copy()}, state)
            np.testing.assert_allclose(p["w"], reference_adam(p0, grads), rtol=0, atol=1e-12)

    def test_grads_zeroed(self):
        p = {"w": np.ones(2)}
        g = {"w": np.array([0.5, -0.5])}
        adam_step(p, g, AdamState.for_params(p))
        np.testing.assert_array_equal(g["w"], 0)

    @staticmethod
    def steps_to_reach(limit, tol=0.05):
        p = {"x": np.array([0.0])}
        state = AdamState.for_params(p, lr=1e-3)
        for step in range(1, limit + 1):
            adam_step(p, {"x": 2 * (p["x"] - 3.0)}, state)
            if abs(p["x"][0] - 3.0) < tol:
                return step
        return None

    @pytest.mark.xfail(
        strict=True,
        reason="bias-corrected Adam at lr 1e-3 first gets within 0.05 of 3 at step 5114; "
        "the second-moment average still remembers the early large gradients and damps the late steps",
    )
    def test_quadratic_convergence_within_5000(self):
        assert self.steps_to_reach(5000) is not None

    def test_quadratic_trajectory_matches_reference(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
        x, m, v, ref_step = 0.0, 0.0, 0.0, None
        for t in range(1, 10001):
            g = 2 * (x - 3)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
            if abs(x - 3) < 0.05:
                ref_step = t
                break
        assert ref_step == 5114
        assert self.steps_to_reach(10000) == ref_step

    def test_shape_mismatch(self):
        p = {"w": np.ones(3)}
        with pytest.raises(ShapeError):
            adam_step(p, {"w": np.ones(4)}, AdamState.for_params(p))

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"eps": -1.0}, {"t": -1}])
    def test_invalid_state(self, kwargs):
        with pytest.raises(ValueError):
            AdamState(**kwargs)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"epochs": 0}, {"epochs": 1, "batch_size": 0}, {"epochs": 1, "lr": 0}, {"epochs": 1, "class_weights": (1.0,)}, {"epochs": 1, "log_every": 0}],
    )
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def tiny_data():
    return Dataset(synth_records(6, 0.5, width=32, height=32, seed=4, train_fraction=0.5))


class TestFit:
    def test_loss_decreases_on_fixed_batch(self):
        recs = synth_records(4, 0.5, width=48, height=32, seed=2)
        x, y = stack_batch(recs)
        model = build_model(SMALL)
        state = AdamState.for_params(model.params, lr=1e-2)
        losses = [train_step(model, state, x, y)[0] for _ in range(50)]
        assert all(np.isfinite(losses))
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])

    def test_deterministic(self, tiny_data, tmp_path):
        runs = []
        for k in range(2):
            model = build_model(SMALL)
            path = tmp_path / f"m{k}.bccm"
            rep = fit(model, tiny_data, TrainConfig(epochs=2, batch_size=2, seed=5, checkpoint_path=str(path)))
            runs.append((rep, path.read_bytes()))
        assert runs[0][0].epoch_loss == runs[1][0].epoch_loss
        assert runs[0][1] == runs[1][1]

    def test_report_and_log(self, tiny_data, tmp_path):
        model = build_model(SMALL)
        rep = fit(model, tiny_data, TrainConfig(epochs=2, batch_size=2))
        # 3 training records: batches of 2 and 1 per epoch
        assert len(rep.steps) == 4
        assert [s.step for s in rep.steps] == [1, 2, 3, 4]
        assert len(rep.epoch_loss) == len(rep.epoch_pixel_acc) == len(rep.epoch_seconds) == 2
        assert rep.state.t == 4
        assert not model.training
        rep.write_log(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,loss,pixel_acc"
        assert len(lines) == 5

    def test_uses_only_train_split(self, tiny_data):
        rep = fit(build_model(SMALL), tiny_data, TrainConfig(epochs=1, batch_size=1))
        assert len(rep.steps) == len(tiny_data.split("train"))

    def test_empty(self):
        with pytest.raises(ValueError):
            fit(build_model(SMALL), Dataset([]), TrainConfig(epochs=1))

    def test_mixed_sizes(self):
        recs = synth_records(2, 0.5, width=32, height=32, seed=1) + [
            r.__class__("other", r.image[:16], r.mask[:16], None, "train") for r in synth_records(1, 0.0, width=32, height=32, seed=2)
        ]
        with pytest.raises(ValueError, match="size"):
            fit(build_model(SMALL), Dataset(recs), TrainConfig(epochs=1))


@pytest.fixture
def trained(tiny_data):
    model = build_model(SMALL)
    rep = fit(model, tiny_data, TrainConfig(epochs=1, batch_size=2))
    return model, rep.state


def rewrite(path, fn):
    path.write_bytes(fn(path.read_bytes()))


class TestCheckpoint:
    def test_round_trip_bytes(self, trained, tmp_path):
        model, state = trained
        save_checkpoint(model, state, tmp_path / "a.bccm")
        m2, s2 = load_checkpoint(tmp_path / "a.bccm")
        save_checkpoint(m2, s2, tmp_path / "b.bccm")
        assert (tmp_path / "a.bccm").read_bytes() == (tmp_path / "b.bccm").read_bytes()
        for name in model.params:
            assert model.params[name].data.tobytes() == m2.params[name].data.tobytes()
        for name in model.buffers:
            assert model.buffers[name].tobytes() == m2.buffers[name].tobytes()
        assert s2.t == state.t and s2.lr == state.lr
        for name in model.params:
            np.testing.assert_array_equal(s2.m[name], state.m[name])
            np.testing.assert_array_equal(s2.v[name], state.v[name])

    def test_forward_equivalent(self, trained, tmp_path):
        model, state = trained
        save_checkpoint(model, state, tmp_path / "a.bccm")
        loaded, _ = load_checkpoint(tmp_path / "a.bccm")
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 48)).astype(np.float32))
        model.eval()
        np.testing.assert_array_equal(forward(model, x).data, forward(loaded, x).data)

    def test_without_optimizer(self, tmp_path):
        model = build_model(SMALL)
        save_checkpoint(model, None, tmp_path / "a.bccm")
        loaded, state = load_checkpoint(tmp_path / "a.bccm")
        assert state is None
        assert loaded.config == SMALL

    def test_header_layout(self, trained, tmp_path):
        model, state = trained
        save_checkpoint(model, state, tmp_path / "a.bccm")
        buf = (tmp_path / "a.bccm").read_bytes()
        assert buf[:4] == b"BCCM"
        version, blob_len = struct.unpack("<II", buf[4:12])
        assert version == 1
        (count,) = struct.unpack("<I", buf[12 + blob_len : 16 + blob_len])
        assert count == len(model.params) + len(model.buffers) + 2 * len(model.params) + 1

    def test_bad_magic(self, trained, tmp_path):
        p = tmp_path / "a.bccm"
        save_checkpoint(*trained, p)
        rewrite(p, lambda b: b"XXXX" + b[4:])
        with pytest.raises(BadMagicError, match="bad magic"):
            load_checkpoint(p)

    def test_future_version(self, trained, tmp_path):
        p = tmp_path / "a.bccm"
        save_checkpoint(*trained, p)
        rewrite(p, lambda b: b[:4] + struct.pack("<I", 2) + b[8:])
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(p)

    def test_truncated(self, trained, tmp_path):
        p = tmp_path / "a.bccm"
        save_checkpoint(*trained, p)
        rewrite(p, lambda b: b[:-10])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(p)

    def test_shape_table_mismatch(self, tmp_path):
        p = tmp_path / "a.bccm"
        save_checkpoint(build_model(SMALL), None, p)
        other = ModelConfig(**{**SMALL.to_dict(), "aspp_channels": 4})
        buf = p.read_bytes()
        blob_len = struct.unpack("<I", buf[8:12])[0]
        new_blob = json.dumps({"model": other.to_dict()}, sort_keys=True, separators=(",", ":")).encode()
        rewrite(p, lambda b: b[:8] + struct.pack("<I", len(new_blob)) + new_blob + b[12 + blob_len :])
        with pytest.raises(CheckpointLayoutError):
            load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "a.bccm"
        save_checkpoint(build_model(SMALL), None, p)
        rewrite(p, lambda b: b + b"\0")
        with pytest.raises(CheckpointLayoutError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.bccm")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_loss_finite_check():
    logits = Tensor(np.array([[[[np.inf]], [[0.0]]]]))
    with pytest.raises(T.NonFiniteError):
        T.cross_entropy_loss(logits, np.zeros((1, 1, 1), np.int64))
