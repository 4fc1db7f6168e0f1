import numpy as np
import pytest

from versionid import alr, synth, training


def toy_config():
    return alr.AlrModelConfig(
        layers=(
            alr.AlrLayer(8, (3, 3), (2, 2), 0.0),
            alr.AlrLayer(16, (3, 3), (2, 2), 0.0),
        ),
        n_mels=40,
    )


class TestDefaultConfig:
    def test_layer_schedule(self):
        cfg = alr.default_alr_config()
        assert [l.filters for l in cfg.layers] == [64, 128, 256, 512, 512, 512, 512, 512]
        assert [l.pool for l in cfg.layers[:2]] == [(2, 2), (2, 2)]
        assert all(l.pool == (1, 2) for l in cfg.layers[2:])
        assert all(l.kernel == (3, 3) for l in cfg.layers)
        assert all(l.dropout == 0.3 for l in cfg.layers)


class TestAlrForward:
    def test_time_downsampling_and_bins(self):
        cfg = alr.default_alr_config()
        rng = np.random.default_rng(0)
        weights = alr.init_alr_weights(cfg, rng)
        mel = rng.random((400, 40))
        post = alr.alr_forward(mel, cfg, weights)
        assert post.log_probs.shape == (100, 28)
        assert post.frame_hop_s == pytest.approx(0.04)

    def test_rows_are_log_distributions(self):
        cfg = toy_config()
        rng = np.random.default_rng(1)
        weights = alr.init_alr_weights(cfg, rng)
        post = alr.alr_forward(rng.random((64, 40)), cfg, weights)
        row_sums = np.exp(post.log_probs).sum(axis=1)
        np.testing.assert_allclose(row_sums, 1.0, atol=1e-6)
        assert np.all(post.log_probs <= 0.0)

    def test_zero_weights_uniform_rows(self):
        cfg = toy_config()
        weights = alr.init_alr_weights(cfg, np.random.default_rng(2))
        weights = {k: np.zeros_like(v) for k, v in weights.items()}
        post = alr.alr_forward(np.random.default_rng(3).random((32, 40)), cfg, weights)
        np.testing.assert_allclose(post.log_probs, np.log(1 / 28), atol=1e-12)

    def test_wrong_band_count_rejected(self):
        cfg = toy_config()
        weights = alr.init_alr_weights(cfg, np.random.default_rng(4))
        with pytest.raises(ValueError):
            alr.alr_forward(np.zeros((32, 20)), cfg, weights)

    def test_dropout_only_in_train_mode(self):
        cfg = alr.AlrModelConfig(
            layers=(alr.AlrLayer(8, (3, 3), (2, 2), 0.5),), n_mels=40
        )
        rng = np.random.default_rng(5)
        weights = alr.init_alr_weights(cfg, rng)
        mel = rng.random((32, 40))
        a = alr.alr_forward(mel, cfg, weights).log_probs
        b = alr.alr_forward(mel, cfg, weights).log_probs
        np.testing.assert_array_equal(a, b)
        c = alr.alr_forward(mel, cfg, weights, train_mode=True, rng=np.random.default_rng(6)).log_probs
        assert not np.array_equal(a, c)


class TestAlrGradients:
    def test_loss_gradients_match_finite_differences(self):
        cfg = alr.AlrModelConfig(
            layers=(alr.AlrLayer(3, (3, 3), (2, 2), 0.0),), n_mels=8
        )
        rng = np.random.default_rng(7)
        weights = alr.init_alr_weights(cfg, rng)
        mel = rng.random((8, 8))
        target = alr.encode_text("ab")
        _, grads, _ = alr.alr_loss_and_gradients(mel, target, cfg, weights, train_mode=False)
        h = 1e-6
        for name in ("conv0/w", "head/w", "head/b"):
            w = weights[name]
            flat = w.reshape(-1)
            for idx in range(0, flat.size, max(1, flat.size // 10)):
                orig = flat[idx]
                flat[idx] = orig + h
                post, _ = alr._alr_forward_cached(mel, cfg, weights)
                up = alr.ctc_loss(post, target)
                flat[idx] = orig - h
                post, _ = alr._alr_forward_cached(mel, cfg, weights)
                down = alr.ctc_loss(post, target)
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = grads[name].reshape(-1)[idx]
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7)


class TestToyTrainability:
    def test_loss_halves_and_cer_drops(self):
        # 50 synthetic pairs from a fixed symbol -> spectral-template map
        pairs = synth.make_lyrics_pairs(n_pairs=50, seed=7)
        cfg = toy_config()
        weights = alr.init_alr_weights(cfg, np.random.default_rng(0))
        state = training.AdamState()

        def metrics():
            losses, cers = [], []
            for mel, text in pairs:
                post, _ = alr._alr_forward_cached(mel, cfg, weights)
                losses.append(alr.ctc_loss(post, alr.encode_text(text)))
                cers.append(alr.character_error_rate(alr.greedy_decode(post), text))
            return float(np.mean(losses)), float(np.mean(cers))

        initial_loss, _ = metrics()
        order = np.random.default_rng(1)
        for _ in range(200):
            idx = order.choice(len(pairs), size=8, replace=False)
            grads = None
            for i in idx:
                mel, text = pairs[i]
                _, g, _ = alr.alr_loss_and_gradients(
                    mel, alr.encode_text(text), cfg, weights, train_mode=False
                )
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            for k in grads:
                grads[k] /= len(idx)
            training.adam_step(weights, grads, state, 3e-3)
        final_loss, final_cer = metrics()
        assert final_loss <= 0.5 * initial_loss
        assert final_cer < 0.2
