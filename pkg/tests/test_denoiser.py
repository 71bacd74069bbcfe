import math

import numpy as np
import pytest

from rvdiff.codec import SemanticMap, encode_condition, zero_condition
from rvdiff.denoiser import (
    Adam, OracleDenoiser, ToyDenoiser, fourier_coords, load_checkpoint, save_checkpoint, softmax,
)
from rvdiff.diffusion import (
    TrainConfig, TrainSample, forward_noise, loss_conditional, loss_gradients,
    loss_unconditional, probe_loss, train, training_step,
)
from rvdiff.errors import DomainError, FormatError, UsageError
from rvdiff.modes import Mode
from rvdiff.schedule import CosineSchedule

S = CosineSchedule()


@pytest.fixture(scope="module")
def crop(desk_projection):
    p = desk_projection
    return p.scene.tensor()[:8, 96:160], SemanticMap(p.semantics.class_ids[:8, 96:160],
                                                     p.semantics.palette)


class TestOracle:
    def test_identity(self, crop):
        x0, sem = crop
        r = np.random.default_rng(0)
        oracle = OracleDenoiser(x0, sem)
        for t in np.linspace(0.01, 1.0, 50):
            eps = r.standard_normal(x0.shape)
            out = oracle(forward_noise(x0, t, eps, S), None, t)
            assert np.allclose(out.eps_hat, eps, atol=1e-9, rtol=0)

    def test_logits_confident(self, crop):
        x0, sem = crop
        probs = softmax(OracleDenoiser(x0, sem)(x0, None, 0.5).sem_logits)
        true = np.take_along_axis(probs, sem.class_ids[..., None], -1)
        assert true.min() > 0.999

    def test_domain(self, crop):
        x0, sem = crop
        with pytest.raises(DomainError):
            OracleDenoiser(x0 * 3, sem)

        class Noiseless:
            def alpha_sigma(self, t):
                return 1.0, 0.0

        with pytest.raises(DomainError):
            OracleDenoiser(x0, sem, schedule=Noiseless())(x0, None, 0.0)
        with pytest.raises(UsageError):
            CosineSchedule(clamp=0.0)


def straight_line_forward(model, x_t, cond, t):
    """Pixel-by-pixel, scalar-by-scalar recomputation."""
    w1, w2, emb = (model.params[k].tolist() for k in ("w1", "w2", "emb"))
    b = min(int(t * model.n_buckets), model.n_buckets - 1)
    h_, w_ = x_t.shape[:2]
    out = np.zeros((h_, w_, len(w2)))
    for i in range(h_):
        for j in range(w_):
            v = list(x_t[i, j]) + list(cond[i, j])
            hid = [math.tanh(sum(w1[a][k] * v[k] for k in range(len(v))) + emb[b][a])
                   for a in range(len(w1))]
            for o in range(len(w2)):
                out[i, j, o] = sum(w2[o][a] * hid[a] for a in range(len(hid)))
    return out


class TestToyForward:
    def test_matches_straight_line_oracle(self):
        r = np.random.default_rng(1)
        m = ToyDenoiser(5, seed=3)
        x, c = r.standard_normal((3, 4, 2)), r.standard_normal((3, 4, 4))
        out = m(x, c, 0.37)
        ref = straight_line_forward(m, x, c, 0.37)
        assert np.allclose(out.eps_hat, ref[..., :2], atol=1e-12, rtol=0)
        assert np.allclose(out.sem_logits, ref[..., 2:], atol=1e-12, rtol=0)

    def test_zero_weights(self):
        m = ToyDenoiser(4, seed=0)
        for k in m.params:
            m.params[k][:] = 0
        out = m(np.ones((2, 2, 2)), np.zeros((2, 2, 4)), 0.5)
        assert not out.eps_hat.any()
        assert np.allclose(softmax(out.sem_logits), 0.25)

    def test_no_spatial_mixing(self):
        m = ToyDenoiser(4, seed=2)
        x = np.broadcast_to(np.array([0.3, -0.2]), (3, 5, 2))
        out = m(x, np.zeros((3, 5, 4)), 0.6)
        assert np.all(out.eps_hat == out.eps_hat[0, 0])

    def test_fourier_features(self, tiny_sensor):
        f = fourier_coords(tiny_sensor)
        assert f.shape == (8, 32, 32)
        m = ToyDenoiser(4, sensor=tiny_sensor, fourier=True)
        assert m.n_inputs == 38
        assert np.isfinite(m(np.zeros((8, 32, 2)), np.zeros((8, 32, 4)), 0.1).eps_hat).all()
        with pytest.raises(UsageError):
            m(np.zeros((4, 4, 2)), np.zeros((4, 4, 4)), 0.1)

    def test_channel_mismatch(self):
        with pytest.raises(UsageError):
            ToyDenoiser(4)(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)), 0.1)


def _loss(model, x_t, cond, t, eps, y, mode):
    out = model(x_t, cond, t)
    if mode is Mode.UNCONDITIONAL:
        return loss_unconditional(out.eps_hat, eps, out.sem_logits, y)[0]
    return loss_conditional(out.eps_hat, eps)


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("mode", [Mode.UNCONDITIONAL, Mode.CONDITIONAL])
    def test_finite_differences(self, seed, mode):
        r = np.random.default_rng(seed)
        C = 4
        m = ToyDenoiser(C, hidden=6, n_buckets=4, seed=seed)
        x_t = r.standard_normal((3, 4, 2))
        y = r.integers(0, C, (3, 4))
        cond = r.standard_normal((3, 4, 4))
        eps = r.standard_normal((3, 4, 2))
        t = float(r.random())
        out, cache = m.forward(x_t, cond, t)
        grads = m.backward(cache, *loss_gradients(out, eps, y, mode))
        h = 1e-5
        for k, p in m.params.items():
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                keep = p[idx]
                p[idx] = keep + h
                up = _loss(m, x_t, cond, t, eps, y, mode)
                p[idx] = keep - h
                dn = _loss(m, x_t, cond, t, eps, y, mode)
                p[idx] = keep
                num[idx] = (up - dn) / (2 * h)
            rel = np.abs(grads[k] - num) / np.maximum(np.abs(grads[k]) + np.abs(num), 1e-6)
            assert rel.max() < 1e-4, (k, rel.max())

    def test_zero_upstream(self):
        m = ToyDenoiser(3, seed=1)
        _, cache = m.forward(np.ones((2, 2, 2)), np.zeros((2, 2, 4)), 0.2)
        g = m.backward(cache, np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
        assert not any(v.any() for v in g.values())

    def test_conditional_loss_skips_semantic_head(self):
        r = np.random.default_rng(0)
        m = ToyDenoiser(5, seed=0)
        out, cache = m.forward(r.standard_normal((3, 3, 2)), np.zeros((3, 3, 4)), 0.5)
        d_eps, d_logits = loss_gradients(out, r.standard_normal((3, 3, 2)), None,
                                         Mode.CONDITIONAL)
        g = m.backward(cache, d_eps, d_logits)
        assert not d_logits.any() and not g["w2"][2:].any() and g["w2"][:2].any()


class TestTraining:
    def test_single_scene_halves_loss(self, crop):
        x0, sem = crop
        samples = [TrainSample(x0, sem)]
        m = ToyDenoiser(20, seed=0)
        before = probe_loss(m, samples)["total"]
        train(samples, m, TrainConfig(steps=500, learning_rate=1e-2, seed=0))
        after = probe_loss(m, samples)["total"]
        assert after <= 0.5 * before
        assert m.step == 500

    def test_conditioning_helps(self, desk_corpus):
        samples = [TrainSample(sc.tensor()[:, :64], SemanticMap(sem.class_ids[:, :64], sem.palette))
                   for sc, sem in desk_corpus]
        cfg = TrainConfig(learning_rate=1e-2)

        def fit(mode):
            m = ToyDenoiser(20, seed=0)
            opt = Adam(m.params, cfg.learning_rate)
            r = np.random.default_rng(0)
            for _ in range(400):
                training_step(samples[int(r.integers(len(samples)))], m, opt, cfg, r, S, mode)
            return m

        cond = probe_loss(fit(Mode.CONDITIONAL), samples, conditional=True)["noise"]
        uncond = probe_loss(fit(Mode.UNCONDITIONAL), samples)["noise"]
        assert cond < uncond

    def test_non_labeled_needs_no_labels(self, crop):
        x0, _ = crop
        m = ToyDenoiser(20)
        res = train([TrainSample(x0)], m, TrainConfig(steps=5))
        assert all(r.mode is Mode.NON_LABELED and r.sem_loss == 0.0 for r in res)

    def test_forced_mode_needs_labels(self, crop):
        x0, _ = crop
        m = ToyDenoiser(20)
        with pytest.raises(UsageError):
            training_step(TrainSample(x0), m, Adam(m.params), TrainConfig(),
                          np.random.default_rng(0), force_mode=Mode.CONDITIONAL)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, tiny_sensor):
        m = ToyDenoiser(6, hidden=5, n_buckets=7, sensor=tiny_sensor, fourier=True, seed=11)
        m.step = 42
        save_checkpoint(tmp_path / "m.ckpt", m, {"schedule": S.to_json()})
        back, header = load_checkpoint(tmp_path / "m.ckpt")
        assert header["step"] == 42 and header["schedule"] == S.to_json()
        for k in m.params:
            assert np.array_equal(back.params[k], m.params[k].astype(np.float32))
        x = np.random.default_rng(0).standard_normal((8, 32, 2))
        assert np.allclose(back(x, np.zeros((8, 32, 4)), 0.3).eps_hat,
                           m(x, np.zeros((8, 32, 4)), 0.3).eps_hat, atol=1e-5)

    def test_bytes_stable(self, tmp_path):
        m = ToyDenoiser(3, seed=1)
        save_checkpoint(tmp_path / "a", m)
        save_checkpoint(tmp_path / "b", m)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_garbage(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"\x05\x00\x00\x00hello")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad")
        m = ToyDenoiser(3, seed=1)
        save_checkpoint(tmp_path / "t", m)
        (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t")
