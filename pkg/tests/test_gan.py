import json

import numpy as np
import pytest

from dhpose import autodiff as ad
from dhpose import constraints as ct
from dhpose import dataset as dsio
from dhpose import gan
from dhpose import nn
from dhpose import skeleton as sk

RNG = np.random.default_rng


def tiny_config(**kw):
    base = dict(mode="single", epochs=2, beta_epoch=2, seed=0, batch_size=16,
                critic_steps=2, gen_hidden=(32, 32), enc_hidden=(16, 16), head_hidden=(8,))
    base.update(kw)
    return gan.TrainConfig(**base)


def zero_nets(critic):
    for net in critic.nets().values():
        for layer in net.layers:
            layer.w = np.zeros_like(layer.w)
            layer.b = np.zeros_like(layer.b)


class TestLatent:
    def test_default_z_dim_is_128(self):
        assert gan.TrainConfig().z_dim == 128

    def test_deterministic_under_seed(self):
        a = gan.sample_latent(10, 128, RNG(5))
        b = gan.sample_latent(10, 128, RNG(5))
        assert np.array_equal(a, b)

    def test_standard_normal_moments(self):
        z = gan.sample_latent(100_000, 8, RNG(6))
        assert np.max(np.abs(z.mean(axis=0))) < 0.02
        assert np.max(np.abs(z.var(axis=0) - 1.0)) < 0.05

    def test_positive_count_required(self):
        with pytest.raises(ValueError, match="count"):
            gan.sample_latent(0, 8, RNG(0))


class TestGenerate:
    def test_every_sample_validates(self, table):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(1))
        out = gan.generate(gen, gan.sample_latent(64, cfg.z_dim, RNG(2)))
        for row in out.params:
            assert ct.validate_params(row, table).ok

    def test_video_bone_lengths_shared_across_frames(self):
        cfg = tiny_config(mode="video", frames=5)
        gen = gan.build_generator(cfg, RNG(3))
        out = gan.generate(gen, gan.sample_latent(8, cfg.z_dim, RNG(4)))
        assert out.params.shape == (8, 5, 48)
        spread = np.abs(out.params[:, :, 33:] - out.params[:, :1, 33:])
        assert np.max(spread) == 0.0
        lengths = sk.bone_lengths(gen.topology, out.pose3d)
        rel = np.abs(lengths - lengths[:, :1]) / lengths[:, :1]
        assert np.max(rel) < 1e-9

    def test_zero_weights_and_zero_latent_give_midrange_pose(self, table, topology):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(5))
        for layer in gen.net.layers:
            layer.w = np.zeros_like(layer.w)
            layer.b = np.zeros_like(layer.b)
        out = gan.generate(gen, np.zeros((1, cfg.z_dim)))
        mid_params = (table.lo + table.hi) / 2
        lo, hi = gen.bounds.arrays()
        mid_globals = (lo + hi) / 2
        expected = sk.forward_kinematics_batch(topology, mid_params[None], mid_globals[None])[0]
        assert np.max(np.abs(out.pose3d[0] - expected)) < 1e-12

    def test_wrong_latent_width_rejected(self):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(6))
        with pytest.raises(ad.ShapeError):
            gan.generate(gen, np.zeros((4, cfg.z_dim + 1)))

    def test_net_width_invariant_enforced(self, topology, table, camera):
        bad = nn.mlp_init([16, 50], ["linear"], RNG(7))
        with pytest.raises(ValueError, match="54"):
            gan.DhGenerator(net=bad, topology=topology, table=table, camera=camera)

    def test_tape_path_matches_numpy_path(self, pairs):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(8))
        z = gan.sample_latent(6, cfg.z_dim, RNG(9))
        out = gan.generate(gen, z)
        tape = ad.Tape()
        leaves = nn.mlp_leaves(tape, gen.net, "gen.")
        fk = gan.generate_on_tape(gen, z, tape, leaves, pairs)
        assert np.max(np.abs(fk.pose3d.values - out.pose3d)) < 1e-12
        assert np.max(np.abs(fk.params.values - out.params)) < 1e-12

    def test_tape_path_matches_numpy_path_video(self, pairs):
        cfg = tiny_config(mode="video", frames=4)
        gen = gan.build_generator(cfg, RNG(10))
        z = gan.sample_latent(3, cfg.z_dim, RNG(11))
        out = gan.generate(gen, z)
        tape = ad.Tape()
        leaves = nn.mlp_leaves(tape, gen.net, "gen.")
        fk = gan.generate_on_tape(gen, z, tape, leaves, pairs)
        assert np.max(np.abs(fk.pose3d.values.reshape(3, 4, 16, 3) - out.pose3d)) < 1e-12


class TestFrameCritic:
    def _streams(self, pairs, n=8, seed=12):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(seed))
        out = gan.generate(gen, gan.sample_latent(n, cfg.z_dim, RNG(seed + 1)))
        return gan.frame_streams(out.pose3d, out.pose2d, gen.camera, pairs)

    def test_zero_weights_score_zero(self, pairs):
        cfg = tiny_config()
        critic = gan.build_frame_critic(cfg, 14, RNG(13))
        zero_nets(critic)
        x3d, xcos, x2d = self._streams(pairs)
        assert np.all(gan.discriminate_single(critic, x3d, x2d, xcos) == 0.0)

    def test_deterministic(self, pairs):
        cfg = tiny_config()
        critic = gan.build_frame_critic(cfg, 14, RNG(14))
        x3d, xcos, x2d = self._streams(pairs)
        s1 = gan.discriminate_single(critic, x3d, x2d, xcos)
        s2 = gan.discriminate_single(critic, x3d, x2d, xcos)
        assert np.array_equal(s1, s2)

    def test_cosine_stream_wired_in(self, pairs):
        cfg = tiny_config()
        critic = gan.build_frame_critic(cfg, 14, RNG(15))
        x3d, xcos, x2d = self._streams(pairs)
        s1 = gan.discriminate_single(critic, x3d, x2d, xcos)
        xcos2 = xcos.copy()
        xcos2[:, 3] += 0.25
        s2 = gan.discriminate_single(critic, x3d, x2d, xcos2)
        assert np.max(np.abs(s1 - s2)) > 0.0


class TestMotionCritic:
    def _streams(self, pairs, n=6, frames=4, seed=16):
        cfg = tiny_config(mode="video", frames=frames)
        gen = gan.build_generator(cfg, RNG(seed))
        out = gan.generate(gen, gan.sample_latent(n, cfg.z_dim, RNG(seed + 1)))
        return gan.motion_streams(out.pose3d, out.pose2d, gen.camera, pairs), cfg

    def test_zero_weights_score_zero(self, pairs):
        streams, cfg = self._streams(pairs)
        critic = gan.build_motion_critic(cfg, 14, RNG(17))
        zero_nets(critic)
        assert np.all(gan.discriminate_motion(critic, streams) == 0.0)

    def test_score_is_sum_of_branches(self, pairs):
        streams, cfg = self._streams(pairs)
        critic = gan.build_motion_critic(cfg, 14, RNG(18))
        tape = ad.Tape()
        total, info = gan.motion_score(critic, streams, tape)
        parts = sum(info[tag]["score"].values for tag in ("3d", "cos", "2d"))
        assert np.allclose(total.values, parts, atol=1e-12)

    def test_branch_ablation_removes_exactly_its_contribution(self, pairs):
        streams, cfg = self._streams(pairs)
        critic = gan.build_motion_critic(cfg, 14, RNG(19))
        tape = ad.Tape()
        before, info = gan.motion_score(critic, streams, tape)
        contribution = info["2d"]["score"].values.copy()
        for layer in critic.head2d.layers:
            layer.w = np.zeros_like(layer.w)
            layer.b = np.zeros_like(layer.b)
        after = gan.discriminate_motion(critic, streams)
        assert np.allclose(before.values[:, 0] - after, contribution[:, 0], atol=1e-12)

    def test_frame_order_changes_the_score(self, pairs, topology, camera):
        from dhpose.camera import project_pose
        cfg = tiny_config(mode="video", frames=5)
        critic = gan.build_motion_critic(cfg, 14, RNG(20))
        rng = RNG(21)
        params = np.zeros((5, 48))
        params[:, :33] = np.linspace(0, 0.6, 5)[:, None] * rng.uniform(-1, 1, 33)
        g = np.zeros((5, 6))
        g[:, 5] = 4.0
        seq3d = sk.forward_kinematics_batch(topology, params, g)
        seq2d = project_pose(seq3d, camera)
        ordered = gan.motion_streams(seq3d[None], seq2d[None], camera, pairs)
        perm = np.array([2, 0, 4, 1, 3])
        shuffled = gan.motion_streams(seq3d[perm][None], seq2d[perm][None], camera, pairs)
        s_ord = gan.discriminate_motion(critic, ordered)
        s_shuf = gan.discriminate_motion(critic, shuffled)
        assert abs(float(s_ord[0] - s_shuf[0])) > 1e-9

    def test_static_sequence_has_zero_difference_streams(self, pairs, topology, camera):
        from dhpose.camera import project_pose
        pose = sk.rest_pose(topology) + [0, 0, 4.0]
        seq3d = np.stack([pose] * 4)[None]
        seq2d = project_pose(seq3d, camera)
        streams = gan.motion_streams(seq3d, seq2d, camera, pairs)
        assert np.all(streams["diff3d"] == 0)
        assert np.all(streams["cosdiff"] == 0)
        assert np.all(streams["root2d"] == 0)


class TestSchedule:
    def test_before_threshold(self):
        assert gan.gamma_schedule(3, 4) == 0

    def test_at_threshold(self):
        assert gan.gamma_schedule(4, 4) == 1

    def test_late(self):
        assert gan.gamma_schedule(100, 4) == 1

    def test_monotone_step(self):
        values = [gan.gamma_schedule(e, 4) for e in range(10)]
        assert values == sorted(values)
        assert set(values) == {0, 1}

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError, match="epoch"):
            gan.gamma_schedule(-1, 4)


def sum_critic():
    """Frame critic computing exactly sum(x) over all three streams."""
    def identity_enc(dim):
        return nn.Mlp([nn.LayerSpec(np.eye(dim), np.zeros(dim), "linear")])

    head = nn.Mlp([nn.LayerSpec(np.ones((48 + 14 + 32, 1)), np.zeros(1), "linear")])
    return gan.FrameCritic(enc3d=identity_enc(48), enc_cos=identity_enc(14),
                           enc2d=identity_enc(32), head=head)


class TestCriticLoss:
    def _batches(self, pairs, seed=22, n=8):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(seed))
        a = gan.generate(gen, gan.sample_latent(n, cfg.z_dim, RNG(seed + 1)))
        b = gan.generate(gen, gan.sample_latent(n, cfg.z_dim, RNG(seed + 2)))
        real = gan.feature_batch(a.pose3d, a.pose2d, gen.camera, pairs)
        fake = gan.feature_batch(b.pose3d, b.pose2d, gen.camera, pairs)
        return real, fake, cfg

    def test_zero_critic_gives_alpha(self, pairs):
        real, fake, cfg = self._batches(pairs)
        critic = gan.build_frame_critic(cfg, 14, RNG(23))
        zero_nets(critic)
        loss = gan.critic_loss(critic, None, real, fake, 10.0, 0, RNG(0), ad.Tape())
        assert float(loss.values) == pytest.approx(10.0, abs=0)

    def test_gamma_zero_ignores_motion_critic(self, pairs):
        cfg = tiny_config(mode="video", frames=3)
        gen = gan.build_generator(cfg, RNG(24))
        a = gan.generate(gen, gan.sample_latent(4, cfg.z_dim, RNG(25)))
        b = gan.generate(gen, gan.sample_latent(4, cfg.z_dim, RNG(26)))
        real = gan.feature_batch(a.pose3d, a.pose2d, gen.camera, pairs, video=True)
        fake = gan.feature_batch(b.pose3d, b.pose2d, gen.camera, pairs, video=True)
        ds = gan.build_frame_critic(cfg, 14, RNG(27))
        dm1 = gan.build_motion_critic(cfg, 14, RNG(28))
        dm2 = gan.build_motion_critic(cfg, 14, RNG(29))
        l1 = gan.critic_loss(ds, dm1, real, fake, 10.0, 0, RNG(1), ad.Tape())
        l2 = gan.critic_loss(ds, dm2, real, fake, 10.0, 0, RNG(1), ad.Tape())
        assert float(l1.values) == float(l2.values)

    def test_identical_batches_and_unit_critic_alpha_zero(self, pairs):
        real, fake, _ = self._batches(pairs)
        critic = sum_critic()
        loss = gan.critic_loss(critic, None, real, real, 0.0, 0, RNG(2), ad.Tape())
        assert float(loss.values) == pytest.approx(0.0, abs=1e-9)

    def test_shape_mismatch_rejected(self, pairs):
        real, fake, _ = self._batches(pairs)
        short = gan.FeatureBatch(x3d=fake.x3d[:-1], xcos=fake.xcos[:-1], x2d=fake.x2d[:-1])
        with pytest.raises(ad.ShapeError):
            gan.critic_loss(sum_critic(), None, real, short, 1.0, 0, RNG(3), ad.Tape())

    def test_gamma_one_needs_motion_streams(self, pairs):
        real, fake, cfg = self._batches(pairs)
        dm = gan.build_motion_critic(tiny_config(mode="video", frames=3), 14, RNG(30))
        with pytest.raises(ad.ShapeError, match="motion"):
            gan.critic_loss(sum_critic(), dm, real, fake, 1.0, 1, RNG(4), ad.Tape())


class TestGeneratorLoss:
    def _fake(self, pairs, seed=31):
        cfg = tiny_config()
        gen = gan.build_generator(cfg, RNG(seed))
        tape = ad.Tape()
        leaves = nn.mlp_leaves(tape, gen.net, "gen.")
        z = gan.sample_latent(6, cfg.z_dim, RNG(seed + 1))
        return gan.generate_on_tape(gen, z, tape, leaves, pairs), tape, cfg, leaves

    def test_zero_critics_give_zero(self, pairs):
        fake, tape, cfg, _ = self._fake(pairs)
        critic = gan.build_frame_critic(cfg, 14, RNG(32))
        zero_nets(critic)
        loss = gan.generator_loss(critic, None, fake, 0, tape)
        assert float(loss.values) == 0.0

    def test_gamma_zero_is_negative_frame_expectation(self, pairs):
        fake, tape, cfg, _ = self._fake(pairs)
        critic = gan.build_frame_critic(cfg, 14, RNG(33))
        loss = gan.generator_loss(critic, None, fake, 0, tape)
        scores = gan.discriminate_single(critic, fake.x3d.values, fake.x2d.values,
                                         fake.xcos.values)
        assert float(loss.values) == pytest.approx(-scores.mean(), abs=1e-12)

    def test_head_bias_shift_moves_loss_linearly(self, pairs):
        fake, tape, cfg, _ = self._fake(pairs)
        critic = gan.build_frame_critic(cfg, 14, RNG(34))
        l1 = float(gan.generator_loss(critic, None, fake, 0, tape).values)
        critic.head.layers[-1].b = critic.head.layers[-1].b + 2.5
        l2 = float(gan.generator_loss(critic, None, fake, 0, ad.Tape()).values)
        assert l2 == pytest.approx(l1 - 2.5, abs=1e-9)

    def test_gradients_reach_generator_through_kinematics(self, pairs):
        fake, tape, cfg, leaves = self._fake(pairs)
        critic = gan.build_frame_critic(cfg, 14, RNG(35))
        loss = gan.generator_loss(critic, None, fake, 0, tape)
        ad.backward(tape, loss)
        total = sum(float(np.abs(t.grad).sum()) for t in leaves.values() if t.grad is not None)
        assert total > 0.0


class TestEndToEndGradients:
    """Finite-difference checks of the complete differentiable paths.

    The loss values for the difference quotients come from the plain numpy
    pipeline, so these also pin tape forward == numpy forward."""

    def _spot_check(self, leaves, nets_by_prefix, loss_value, rng, tol):
        for key, leaf in leaves.items():
            prefix, lname, field = key.rsplit(".", 2)
            net = nets_by_prefix[prefix]
            layer = net.layers[int(lname[1:])]
            arr = layer.w if field == "w" else layer.b
            flat = arr.ravel()
            for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[idx]
                h = 1e-6
                flat[idx] = old + h
                hi = loss_value()
                flat[idx] = old - h
                lo = loss_value()
                flat[idx] = old
                fd = (hi - lo) / (2 * h)
                got = leaf.grad.ravel()[idx] if leaf.grad is not None else 0.0
                assert abs(got - fd) <= tol * max(1.0, abs(fd)), (key, idx, got, fd)

    def test_generator_loss_gradient_through_the_full_pipeline(self, pairs):
        cfg = gan.TrainConfig(mode="single", z_dim=6, gen_hidden=(8,), enc_hidden=(6,),
                              head_hidden=(4,), epochs=2, beta_epoch=2, seed=50, batch_size=2)
        gen = gan.build_generator(cfg, RNG(50))
        critic = gan.build_frame_critic(cfg, 14, RNG(51))
        z = gan.sample_latent(3, cfg.z_dim, RNG(52))

        def loss_value():
            out = gan.generate(gen, z)
            fb = gan.feature_batch(out.pose3d, out.pose2d, gen.camera, pairs)
            return -gan.discriminate_single(critic, fb.x3d, fb.x2d, fb.xcos).mean()

        tape = ad.Tape()
        leaves = nn.mlp_leaves(tape, gen.net, "gen.")
        fake = gan.generate_on_tape(gen, z, tape, leaves, pairs)
        loss = gan.generator_loss(critic, None, fake, 0, tape)
        assert float(loss.values) == pytest.approx(loss_value(), abs=1e-12)
        ad.backward(tape, loss)
        self._spot_check(leaves, {"gen": gen.net}, loss_value, RNG(53), tol=1e-4)

    def test_critic_loss_gradient_with_interpolated_penalty(self, pairs):
        cfg = gan.TrainConfig(mode="single", z_dim=6, gen_hidden=(8,), enc_hidden=(5,),
                              head_hidden=(3,), epochs=2, beta_epoch=2, seed=54, batch_size=2)
        gen = gan.build_generator(cfg, RNG(54))
        critic = gan.build_frame_critic(cfg, 14, RNG(55))
        a = gan.generate(gen, gan.sample_latent(3, cfg.z_dim, RNG(56)))
        b = gan.generate(gen, gan.sample_latent(3, cfg.z_dim, RNG(57)))
        real = gan.feature_batch(a.pose3d, a.pose2d, gen.camera, pairs)
        fake = gan.feature_batch(b.pose3d, b.pose2d, gen.camera, pairs)

        def loss_value():
            return float(gan.critic_loss(critic, None, real, fake, 10.0, 0,
                                         RNG(58), ad.Tape()).values)

        tape = ad.Tape()
        leaves = gan.critic_leaves(tape, critic, "ds.")
        loss = gan.critic_loss(critic, None, real, fake, 10.0, 0, RNG(58), tape, leaves)
        assert float(loss.values) == pytest.approx(loss_value(), abs=1e-12)
        ad.backward(tape, loss)
        nets = {f"ds.{name}": net for name, net in critic.nets().items()}
        self._spot_check(leaves, nets, loss_value, RNG(59), tol=1e-4)


class TestTrainEpoch:
    def test_metrics_deterministic_and_violation_free(self):
        cfg = tiny_config(seed=40)
        data = dsio.make_band_corpus(32, 7)

        def run():
            state = gan.init_train_state(cfg)
            return gan.train_epoch(state, data)

        m1, m2 = run(), run()
        assert m1 == m2
        assert m1["violations"] == 0
        assert m1["gamma"] == 0

    def test_motion_terms_zero_before_threshold(self, tmp_path):
        cfg = tiny_config(mode="video", frames=3, epochs=5, beta_epoch=4, seed=41,
                          batch_size=4, critic_steps=1)
        data = dsio.make_band_corpus(8, 8, mode="video", frames=3)
        state = gan.init_train_state(cfg)
        history = [gan.train_epoch(state, data) for _ in range(5)]
        for epoch in range(4):
            assert history[epoch]["gamma"] == 0
            assert history[epoch]["motion_gap"] == 0.0
            assert history[epoch]["motion_penalty"] == 0.0
        assert history[4]["gamma"] == 1
        assert history[4]["motion_penalty"] != 0.0

    def test_epoch_synthesis_matches_corpus_size(self, tmp_path):
        cfg = tiny_config(seed=42, batch_size=8, critic_steps=1)
        data = dsio.make_band_corpus(24, 9)
        state = gan.init_train_state(cfg)
        metrics = gan.train_epoch(state, data, synth_dir=str(tmp_path))
        assert metrics["synth_count"] == 24
        records = dsio.load_dataset(metrics["synth_path"])
        assert len(records) == 24
        assert all(r.provenance == "synthetic" for r in records)

    def test_empty_data_rejected(self):
        cfg = tiny_config(seed=43)
        data = dsio.make_band_corpus(4, 10)
        data.pose3d = data.pose3d[:0]
        with pytest.raises(ValueError, match="empty"):
            gan.train_epoch(gan.init_train_state(cfg), data)

    def test_non_finite_loss_aborts_with_snapshot(self):
        cfg = tiny_config(seed=45, batch_size=4, critic_steps=1)
        data = dsio.make_band_corpus(8, 12)
        state = gan.init_train_state(cfg)
        state.ds.head.layers[0].w[:] = np.nan
        with pytest.raises(gan.TrainingDivergedError) as err:
            gan.train_epoch(state, data)
        assert err.value.snapshot["what"] == "critic loss"
        assert err.value.snapshot["epoch"] == 0

    def test_smoke_separation_short(self):
        # critic-only training separates band poses from untrained-generator fakes
        cfg = tiny_config(seed=44, batch_size=64, critic_steps=1,
                          enc_hidden=(32, 32), head_hidden=(16,))
        data = dsio.make_band_corpus(256, 11)
        state = gan.init_train_state(cfg)
        pairs = state.pairs
        for _ in range(60):
            idx = state.rng.integers(0, len(data), 64)
            real = gan._real_minibatch(data, idx, pairs, False)
            fake, _ = gan._fake_minibatch(state, 64, pairs, False)
            gan.critic_update(state, real, fake, 0)
        real = gan._real_minibatch(data, np.arange(len(data)), pairs, False)
        fake, _ = gan._fake_minibatch(state, 256, pairs, False)
        s_real = gan.discriminate_single(state.ds, real.x3d, real.x2d, real.xcos)
        s_fake = gan.discriminate_single(state.ds, fake.x3d, fake.x2d, fake.xcos)
        assert s_real.mean() - s_fake.mean() > 0.0


class TestConfigAndCheckpoints:
    def test_config_json_round_trip(self):
        cfg = tiny_config(mode="video", frames=9, epochs=7, beta_epoch=4, seed=5)
        again = gan.TrainConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_config_validation(self):
        with pytest.raises(ValueError, match="beta_epoch"):
            gan.TrainConfig(epochs=3, beta_epoch=4).validate()
        with pytest.raises(ValueError, match="mode"):
            gan.TrainConfig(mode="both").validate()

    def test_generator_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_config(seed=46)
        gen = gan.build_generator(cfg, RNG(46))
        path = tmp_path / "gen.ckpt"
        gan.save_generator(gen, path, seed=46)
        loaded = gan.load_generator(path)
        z = gan.sample_latent(4, cfg.z_dim, RNG(47))
        a = gan.generate(gen, z)
        b = gan.generate(loaded, z)
        # float32 checkpoint storage: poses agree to single precision
        assert np.max(np.abs(a.pose3d - b.pose3d)) < 1e-4

    def test_checkpoint_topology_mismatch_detected(self, tmp_path, topology):
        cfg = tiny_config(seed=48)
        gen = gan.build_generator(cfg, RNG(48))
        path = tmp_path / "gen.ckpt"
        nn.save_checkpoint(path, {"gen": gen.net}, 48,
                           extra={"mode": "single", "frames": "1", "topology": "deadbeef0000"})
        with pytest.raises(ValueError, match="topology"):
            gan.load_generator(path)
