import numpy as np
import pytest

from condnoise import tensor as T
from condnoise.errors import NotScalar, ShapeMismatch, UntrackedGraph
from condnoise.nn import Conv1x1, Linear, Module
from gradcases import condsa_case, op_cases

TOL = 1e-4


@pytest.mark.parametrize("name,fn,inputs", op_cases(), ids=[c[0] for c in op_cases()])
def test_gradcheck_ops(name, fn, inputs):
    errs = T.gradcheck(fn, inputs, probes=100)
    assert max(errs) < TOL, f"{name}: worst rel err {max(errs):.2e}"


def test_softmax_pair_tight():
    x = T.Tensor(np.array([0.3, -0.8]))
    errs = T.gradcheck(lambda a: T.mul(T.softmax(a), T.Tensor([2.0, -1.0])), [x], probes=20)
    assert max(errs) < 1e-6


def test_gradcheck_condsa_block():
    _, fn, inputs = condsa_case()
    errs = T.gradcheck(fn, inputs, probes=max(100, 3 * len(inputs)))
    assert max(errs) < TOL


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(T.Tensor(np.zeros(3))).data, np.full(3, 1 / 3))

    def test_softmax_rows_sum_to_one(self):
        s = T.softmax(T.Tensor(np.random.default_rng(0).normal(0, 10, (50, 7)))).data
        assert np.all(s >= 0)
        assert np.max(np.abs(s.sum(-1) - 1)) < 1e-12

    def test_matmul_identity(self):
        a = np.random.default_rng(1).random((3, 4))
        np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(a)).data, a)

    def test_l1_self(self):
        x = T.Tensor(np.random.default_rng(2).random((2, 3)), requires_grad=True)
        loss = T.l1_loss(x, x.data.copy())
        loss.backward()
        assert loss.item() == 0.0
        assert np.all(x.grad == 0)

    def test_reshape_transpose_roundtrip(self):
        a = np.random.default_rng(3).random((2, 3, 4))
        t = T.transpose(T.reshape(T.Tensor(a), (6, 4)), (1, 0))
        back = T.reshape(T.transpose(t, (1, 0)), (2, 3, 4))
        np.testing.assert_array_equal(back.data, a)

    def test_depthwise_zero_pad(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 3, 3))
        out = T.depthwise_conv3x3(T.Tensor(x), T.Tensor(w)).data[0, 0]
        np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_conv1x1_is_channel_matmul(self):
        rng = np.random.default_rng(4)
        x, w = rng.random((2, 3, 4, 5)), rng.random((6, 3))
        np.testing.assert_allclose(T.conv1x1(T.Tensor(x), T.Tensor(w)).data,
                                   np.einsum("oc,bchw->bohw", w, x), atol=1e-14)

    def test_conv2d_against_loops(self):
        rng = np.random.default_rng(5)
        x, w = rng.random((1, 2, 5, 5)), rng.random((3, 2, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_shuffle_inverse(self):
        a = np.random.default_rng(6).random((2, 3, 4, 6))
        back = T.pixel_shuffle(T.pixel_unshuffle(T.Tensor(a), 2), 2)
        np.testing.assert_array_equal(back.data, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeMismatch):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4,))))


class TestBackward:
    def test_linear_form(self):
        x = np.random.default_rng(0).random(5)
        w = T.Parameter(np.zeros(5), "w")
        T.tsum(T.mul(w, x)).backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_accumulates(self):
        w = T.Parameter(np.ones(3), "w")
        for _ in range(2):
            T.tsum(T.mul(w, 2.0)).backward()
        np.testing.assert_array_equal(w.grad, np.full(3, 4.0))

    def test_not_scalar(self):
        w = T.Parameter(np.ones(3), "w")
        with pytest.raises(NotScalar):
            T.mul(w, 2.0).backward()

    def test_untracked(self):
        with pytest.raises(UntrackedGraph):
            T.tsum(T.Tensor(np.ones(3))).backward()

    def test_no_grad(self):
        w = T.Parameter(np.ones(3), "w")
        with T.no_grad():
            y = T.mul(w, 2.0)
        assert not y.requires_grad

    def test_shared_subexpression(self):
        w = T.Parameter(np.array([3.0]), "w")
        y = T.mul(w, w)
        T.tsum(T.add(y, y)).backward()
        assert w.grad[0] == pytest.approx(12.0)


class TestAdam:
    def test_first_step_magnitude(self):
        p = T.Parameter(np.array([1.0]), "p")
        T.adam_step([p], [np.array([1.0])], {}, lr=0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_no_move(self):
        p = T.Parameter(np.array([1.0, -2.0]), "p")
        state = {}
        for _ in range(50):
            T.adam_step([p], [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_quadratic_bowl(self):
        p = T.Parameter(np.array([2.0, -3.0]), "p")
        opt = T.Adam([p], lr=0.1)
        for step in range(500):
            opt.zero_grad()
            T.tsum(T.mul(p, p)).backward()
            opt.step(T.cosine_lr(step, 500, 0.1, 1e-4))
            if np.max(np.abs(p.data)) < 1e-3:
                break
        assert np.max(np.abs(p.data)) < 1e-3

    def test_decoupled_decay(self):
        p = T.Parameter(np.array([1.0]), "p")
        T.adam_step([p], [np.array([0.0])], {}, lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(0.95)

    def test_cosine_endpoints(self):
        assert T.cosine_lr(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
        assert T.cosine_lr(99, 100, 1e-3, 1e-6) == pytest.approx(1e-6)


class _Net(Module):
    def __init__(self):
        self.a = Conv1x1(3, 4)
        self.layers = [Linear(4, 2), Linear(2, 2, bias=False)]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = _Net().finalize(7)
        path = T.save_checkpoint(net.state_dict(), tmp_path / "m.ckpt", {"note": "x"})
        arrays = T.load_checkpoint(path)
        assert list(arrays) == [n for n, _ in net.named_parameters()]
        for name, p in net.named_parameters():
            np.testing.assert_array_equal(arrays[name], p.data)
        manifest = T.load_manifest(path)
        assert manifest["note"] == "x"
        assert manifest["parameters"][0]["name"] == "a.weight"

    def test_header_layout(self, tmp_path):
        p = T.Parameter(np.arange(6.0).reshape(2, 3), "w")
        path = T.save_checkpoint({"w": p}, tmp_path / "c.ckpt")
        blob = path.read_bytes()
        assert blob[:8] == b"CNCKPT01"
        count = int.from_bytes(blob[8:12], "little")
        name_len = int.from_bytes(blob[12:16], "little")
        assert (count, name_len, blob[16:17]) == (1, 1, b"w")
        assert blob[17] == 1  # float64 tag
        assert int.from_bytes(blob[18:22], "little") == 2
        payload = np.frombuffer(blob[38:], dtype="<f8")
        np.testing.assert_array_equal(payload, np.arange(6.0))

    def test_same_name_same_init(self):
        a, b = _Net().finalize(3), _Net().finalize(3)
        c = _Net().finalize(4)
        np.testing.assert_array_equal(a.a.weight.data, b.a.weight.data)
        assert not np.array_equal(a.a.weight.data, c.a.weight.data)

    def test_load_state(self, tmp_path):
        src, dst = _Net().finalize(1), _Net().finalize(2)
        dst.load_state(T.load_checkpoint(T.save_checkpoint(src.state_dict(), tmp_path / "s.ckpt")))
        for (_, p), (_, q) in zip(src.named_parameters(), dst.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
