import numpy as np
import pytest
from scipy.stats import norm

from ttprogress.autodiff import Tensor, finite_diff_grad, grad, no_grad
from ttprogress.model import (AdaptParams, HeadParams, ProjectionSet, f_adapt,
                              fuse, init_meta_params, load_checkpoint,
                              pred_loss, predict, save_checkpoint, self_loss,
                              split_fused)


def scalar_theta(W1=1.0, b1=0.0, W2=1.0, b2=0.0):
    return AdaptParams(W1=np.array([[W1]]), b1=np.array([b1]),
                       W2=np.array([[W2]]), b2=np.array([b2]))


def zero_branch_theta(dprime):
    rng = np.random.default_rng(0)
    return AdaptParams(W1=rng.normal(size=(dprime, dprime)), b1=rng.normal(size=dprime),
                       W2=np.zeros((dprime, dprime)), b2=np.zeros(dprime))


class TestFuse:
    def test_concatenates_visual_first(self):
        np.testing.assert_array_equal(fuse([1, 2], [3, 4]), [1, 2, 3, 4])

    def test_zero_vectors(self):
        out = fuse(np.zeros(5), np.zeros(5))
        np.testing.assert_array_equal(out, np.zeros(10))

    def test_split_is_inverse(self):
        v, g = np.arange(4.0), np.arange(4.0, 8.0)
        v2, g2 = split_fused(fuse(v, g))
        np.testing.assert_array_equal(v2, v)
        np.testing.assert_array_equal(g2, g)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            fuse([1, 2], [1, 2, 3])


class TestFAdapt:
    def test_zero_second_layer_is_identity(self):
        theta = zero_branch_theta(4)
        z = np.array([0.3, -1.2, 5.0, 0.0])
        np.testing.assert_array_equal(f_adapt(z, theta).data, z)

    def test_all_zero(self):
        theta = AdaptParams(np.zeros((3, 3)), np.zeros(3), np.zeros((3, 3)), np.zeros(3))
        np.testing.assert_array_equal(f_adapt(np.zeros(3), theta).data, np.zeros(3))

    def test_scalar_hand_value(self):
        # d'=1, W1=W2=1, b=0, z=1: 1 + gelu(1) with gelu(1) = Phi(1)
        out = f_adapt(np.array([1.0]), scalar_theta()).data[0]
        assert out == pytest.approx(1.0 + norm.cdf(1.0), abs=1e-12)


class TestSelfLoss:
    def test_perfect_reconstruction(self):
        P = np.random.default_rng(1).normal(size=(3, 8))
        proj = ProjectionSet(P_Q=P, P_K=P, P_V=P)
        loss = self_loss(np.arange(8.0), zero_branch_theta(3), proj)
        assert loss.item() == 0.0

    def test_zero_value_projection(self):
        rng = np.random.default_rng(2)
        P_K = rng.normal(size=(3, 8))
        proj = ProjectionSet(P_Q=P_K, P_K=P_K, P_V=np.zeros((3, 8)))
        x = rng.normal(size=8)
        loss = self_loss(x, zero_branch_theta(3), proj)
        assert loss.item() == pytest.approx(np.sum((P_K @ x) ** 2), rel=1e-12)

    def test_scalar_hand_oracle(self):
        # d'=1, x=[0.5, -1], P_K=[2, 0], P_V=[0, 3], identity f_adapt:
        # loss = (2*0.5 - 3*(-1))^2 = 16
        proj = ProjectionSet(P_Q=np.array([[1.0, 0.0]]),
                             P_K=np.array([[2.0, 0.0]]),
                             P_V=np.array([[0.0, 3.0]]))
        theta = scalar_theta(W1=1.0, W2=0.0)
        loss = self_loss(np.array([0.5, -1.0]), theta, proj)
        assert loss.item() == pytest.approx(16.0, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            proj = ProjectionSet(*(rng.normal(size=(3, 6)) for _ in range(3)))
            theta = AdaptParams(rng.normal(size=(3, 3)), rng.normal(size=3),
                                rng.normal(size=(3, 3)), rng.normal(size=3))
            assert self_loss(rng.normal(size=6), theta, proj).item() >= 0.0


class TestPredict:
    def test_zero_head_weights_give_half(self):
        meta = init_meta_params(d=4, dprime=3, rng=np.random.default_rng(0))
        head = HeadParams(W1=np.asarray(meta.head.W1), b1=np.asarray(meta.head.b1),
                          w2=np.zeros(3), b2=np.zeros(()))
        x = np.random.default_rng(1).normal(size=8)
        assert predict(x, meta.theta0, meta.proj, head).item() == 0.5

    def test_output_in_open_interval(self):
        rng = np.random.default_rng(4)
        meta = init_meta_params(d=4, dprime=3, rng=rng)
        for _ in range(50):
            p = predict(rng.normal(size=8) * 10, meta.theta0, meta.proj, meta.head).item()
            assert 0.0 < p < 1.0

    def test_deterministic_replay(self):
        rng = np.random.default_rng(5)
        meta = init_meta_params(d=4, dprime=3, rng=rng)
        x = rng.normal(size=8)
        vals = {predict(x, meta.theta0, meta.proj, meta.head).data.tobytes() for _ in range(5)}
        assert len(vals) == 1


class TestPredLoss:
    @pytest.mark.parametrize("p,y,expect", [(0.5, 0.5, 0.0), (1.0, 0.0, 1.0), (0.25, 0.75, 0.25)])
    def test_values(self, p, y, expect):
        assert pred_loss(p, y).item() == pytest.approx(expect, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            pred_loss(0.5, 1.5)


class TestGradientsAgainstFiniteDifferences:
    def test_every_parameter_group(self):
        rng = np.random.default_rng(9)
        meta = init_meta_params(d=4, dprime=3, rng=rng)
        # give the adaptation branch non-zero weights so gradients are non-trivial
        theta = AdaptParams(rng.normal(size=(3, 3)) * 0.5, rng.normal(size=3) * 0.5,
                            rng.normal(size=(3, 3)) * 0.5, rng.normal(size=3) * 0.5)
        x = rng.normal(size=8)
        groups = {
            "theta": (theta, lambda ts: (ts, meta.proj.to_tensors(), meta.head.to_tensors())),
            "proj": (meta.proj.to_arrays(), lambda ts: (theta.to_tensors(), ts, meta.head.to_tensors())),
            "head": (meta.head.to_arrays(), lambda ts: (theta.to_tensors(), meta.proj.to_tensors(), ts)),
        }
        for name, (group, assemble) in groups.items():
            tensors = group.to_tensors(requires_grad=True)
            th, pr, hd = assemble(tensors)
            loss = self_loss(Tensor(x), th, pr) + pred_loss(predict(Tensor(x), th, pr, hd), 0.3)
            gs = grad(loss, tensors.tensors())
            arrays = [np.asarray(a) for a in group.to_arrays().tensors()]

            def fd(arrs):
                with no_grad():
                    rebuilt = group.replace_tensors([Tensor(a) for a in arrs])
                    th2, pr2, hd2 = assemble(rebuilt)
                    return (self_loss(Tensor(x), th2, pr2)
                            + pred_loss(predict(Tensor(x), th2, pr2, hd2), 0.3)).item()

            fds = finite_diff_grad(fd, arrays)
            for g, f in zip(gs, fds):
                rel = np.max(np.abs(g.data - f) / (np.abs(f) + 1e-6))
                assert rel < 1e-6, f"group {name}"


class TestInitialization:
    def test_identity_start(self):
        meta = init_meta_params(d=6, dprime=4, rng=np.random.default_rng(7))
        z = np.random.default_rng(8).normal(size=4)
        np.testing.assert_array_equal(f_adapt(z, meta.theta0).data, z)

    def test_projection_scale(self):
        meta = init_meta_params(d=50, dprime=16, rng=np.random.default_rng(7))
        bound = 1.0 / np.sqrt(100)
        for P in (meta.proj.P_Q, meta.proj.P_K, meta.proj.P_V):
            assert np.max(np.abs(np.asarray(P))) <= bound


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        meta = init_meta_params(d=5, dprime=3, d_head=4, rng=np.random.default_rng(2))
        path = tmp_path / "model.ttpm"
        save_checkpoint(path, meta)
        loaded = load_checkpoint(path)
        assert (loaded.d, loaded.dprime, loaded.d_head) == (5, 3, 4)
        for a, b in zip(meta.to_arrays().flat_arrays(), loaded.flat_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "bad.ttpm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        meta = init_meta_params(d=5, dprime=3, rng=np.random.default_rng(2))
        path = tmp_path / "model.ttpm"
        save_checkpoint(path, meta)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)
