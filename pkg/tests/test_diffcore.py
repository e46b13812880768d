"""Engine-level oracles: forward values, backward gradients, file format.

Every gradient assertion pins the analytic backward pass against the
central finite-difference harness, which is itself pinned against hand
computation first. Tolerances are real-64 throughout.
"""

import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest

from geodeformer.diffcore import (
    NonFiniteValue,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    check_input_grad,
    check_parameter_grads,
    finite_diff_grad,
    gdt,
    no_grad,
    ops,
    rel_error,
)

SEEDS = (0, 1, 2)


# -- finite-difference harness is the oracle for everything else; pin it first


def test_fd_sum_of_squares():
    numeric = finite_diff_grad(lambda t: ops.sum_along(t * t), Tensor([1.0, 2.0]),
                               step=1e-5)
    npt.assert_allclose(numeric.numpy(), [2.0, 4.0], atol=1e-8)


def test_fd_constant_function_is_flat():
    step = 1e-4
    numeric = finite_diff_grad(lambda t: 7.25, Tensor(np.ones((2, 3))), step=step)
    assert np.all(np.abs(numeric.numpy()) <= step * step)


def test_fd_reports_nonfinite_probe_with_index():
    def exploding(t):
        with np.errstate(divide="ignore"):
            return float(np.log(t.numpy()[1]))  # -inf when entry 1 probes 0

    with pytest.raises(NonFiniteValue, match=r"index \(1,\)"):
        finite_diff_grad(exploding, Tensor([1.0, 1e-5]), step=1e-5)


def test_fd_rejects_bad_step_and_dtype():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, Tensor([1.0]), step=0.0)
    with pytest.raises(ShapeError):
        finite_diff_grad(lambda t: 0.0, Tensor(np.ones(2, np.float32)), step=1e-5)


# -- forward value oracles


def test_mean_of_constant_vector():
    out = ops.mean(Tensor([3.0, 3.0, 3.0, 3.0]), axis=0)
    assert out.item() == 3.0


def test_softmax_of_zeros_is_uniform():
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    npt.assert_allclose(out.numpy(), np.full(3, 1.0 / 3.0), rtol=0, atol=0)


def test_conv2d_identity_kernel_passes_input_through():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 4, 5, 1)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = ops.conv2d(x, w, b, stride=1, pad=0)
    npt.assert_array_equal(out.numpy(), x.numpy())


def test_conv2d_ceil_halving_shape():
    x = Tensor(np.zeros((2, 7, 9, 3)))
    w = Tensor(np.zeros((3, 3, 3, 5)))
    out = ops.conv2d(x, w, stride=2, pad=1)
    assert out.shape == (2, 4, 5, 5)


def test_shape_errors_name_the_offending_axes():
    with pytest.raises(ShapeError, match="axis"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="axis"):
        ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)
    with pytest.raises(ShapeError):
        ops.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)),
                       Tensor(np.zeros(4)))


def test_layer_norm_normalizes_last_axis():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((5, 16)) * 3.0 + 1.0)
    out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    npt.assert_allclose(out.numpy().mean(axis=-1), 0.0, atol=1e-12)
    npt.assert_allclose(out.numpy().std(axis=-1), 1.0, atol=1e-3)


def test_gelu_fixed_points():
    out = ops.gelu(Tensor([0.0, 100.0, -100.0]))
    npt.assert_allclose(out.numpy(), [0.0, 100.0, 0.0], atol=1e-12)


# -- backward oracles


def test_backward_sum_of_squares():
    x = Parameter([1.0, 2.0])
    backward(ops.sum_along(x * x))
    npt.assert_allclose(x.grad, [2.0, 4.0], rtol=0, atol=0)


def test_backward_mean_is_uniform():
    x = Parameter(np.arange(6.0))
    backward(ops.mean(x))
    npt.assert_allclose(x.grad, np.full(6, 1.0 / 6.0), rtol=0, atol=0)


def test_backward_rejects_nonscalar_loss():
    x = Parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * x)


def test_backward_composite_conv_gelu_mean():
    rng = np.random.default_rng(7)
    x = Parameter(rng.standard_normal((1, 4, 4, 2)))
    w = Parameter(rng.standard_normal((3, 3, 2, 3)) * 0.5)
    b = Parameter(rng.standard_normal(3) * 0.1)

    def loss():
        return ops.mean(ops.gelu(ops.conv2d(x, w, b, stride=2, pad=1)))

    errors = check_parameter_grads(loss, {"x": x, "w": w, "b": b}, step=1e-5)
    assert max(errors.values()) <= 1e-6, errors


def test_unreachable_parameter_keeps_zero_gradient():
    x = Parameter([1.0, 2.0])
    orphan = Parameter([5.0])
    backward(ops.sum_along(x * x))
    npt.assert_array_equal(orphan.grad, [0.0])


def test_zero_grad_resets_exactly():
    x = Parameter([3.0])
    backward(x * x)
    assert x.grad[0] != 0.0
    x.zero_grad()
    npt.assert_array_equal(x.grad, [0.0])


def test_grad_accumulates_across_backward_calls():
    x = Parameter([2.0])
    backward(ops.sum_along(x * x))
    backward(ops.sum_along(x * x))
    npt.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_constants():
    x = Parameter([1.0, 2.0])
    with no_grad():
        y = x * x
    assert y._vjp is None and y._parents == ()


def test_reused_operand_accumulates_both_paths():
    x = Parameter([3.0])
    backward(ops.sum_along(x * x + x * x))
    npt.assert_allclose(x.grad, [12.0])


# -- per-primitive gradient checks (3 seeds, <= 1e-5 rel)


def _check(fn, x, tol=1e-5, step=1e-5):
    err = check_input_grad(fn, Tensor(np.asarray(x, dtype=np.float64)), step=step)
    assert err <= tol, f"rel error {err:.3e} exceeds {tol:.0e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_family(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0  # keep divisors/logs well away from 0
    c = Tensor(rng.standard_normal((3, 4)))
    _check(lambda t: ops.sum_along(t + c), a)
    _check(lambda t: ops.sum_along(c - t), a)
    _check(lambda t: ops.sum_along(t * c), a)
    _check(lambda t: ops.sum_along(t / np.abs(c.numpy().clip(0.5, None))), a)
    _check(lambda t: ops.sum_along(ops.div(Tensor(a), t)), b)
    _check(lambda t: ops.sum_along(ops.neg(t)), a)
    _check(lambda t: ops.sum_along(ops.exp(t)), a)
    _check(lambda t: ops.sum_along(ops.log(t)), b)
    _check(lambda t: ops.sum_along(ops.sqrt(t)), b)
    _check(lambda t: ops.sum_along(ops.absval(t)), b)  # positive: no kink
    _check(lambda t: ops.sum_along(ops.maximum(t, c)), a + 5.0)
    _check(lambda t: ops.sum_along(ops.maximum(c, t)), a + 5.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_broadcasting(seed):
    rng = np.random.default_rng(seed)
    row = rng.standard_normal((1, 4))
    full = Tensor(rng.standard_normal((3, 4)))
    _check(lambda t: ops.sum_along(t * full), row)
    _check(lambda t: ops.sum_along(full + t), rng.standard_normal(4))
    _check(lambda t: ops.sum_along(t + full), rng.standard_normal((3, 1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    b2 = Tensor(rng.standard_normal((4, 5)))
    a2 = rng.standard_normal((3, 4))
    _check(lambda t: ops.sum_along(ops.matmul(t, b2)), a2)
    _check(lambda t: ops.sum_along(ops.matmul(Tensor(a2), t)), b2.numpy())
    # batched: (2,3,4) @ (4,5) and (2,3,4) @ (2,4,5)
    a3 = rng.standard_normal((2, 3, 4))
    b3 = Tensor(rng.standard_normal((2, 4, 5)))
    _check(lambda t: ops.sum_along(ops.matmul(t, b2)), a3)
    _check(lambda t: ops.sum_along(ops.matmul(Tensor(a3), t)), b3.numpy())
    _check(lambda t: ops.sum_along(ops.matmul(t, b3)), a3)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_grad_conv2d(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 6, 3))
    w = Tensor(rng.standard_normal((3, 3, 3, 4)) * 0.3)
    b = Tensor(rng.standard_normal(4) * 0.1)
    _check(lambda t: ops.sum_along(ops.gelu(ops.conv2d(t, w, b, stride=stride,
                                                       pad=pad))), x)
    _check(lambda t: ops.sum_along(ops.gelu(ops.conv2d(Tensor(x), t, b,
                                                       stride=stride, pad=pad))),
           w.numpy())
    _check(lambda t: ops.sum_along(ops.gelu(ops.conv2d(Tensor(x), w, t,
                                                       stride=stride, pad=pad))),
           b.numpy())


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_pool_softmax_norm_gelu(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    weights = Tensor(rng.standard_normal((2, 3, 4, 5)))
    pooled_w = Tensor(rng.standard_normal((2, 5)))
    gamma = rng.standard_normal(5) + 1.0
    beta = rng.standard_normal(5)
    _check(lambda t: ops.sum_along(ops.adaptive_avg_pool2d(t) * pooled_w), x)
    _check(lambda t: ops.sum_along(ops.softmax(t, axis=-1) * weights), x)
    _check(lambda t: ops.sum_along(ops.softmax(t, axis=1) * weights), x)
    _check(lambda t: ops.sum_along(ops.gelu(t)), x)
    _check(lambda t: ops.sum_along(
        ops.layer_norm(t, Tensor(gamma), Tensor(beta)) * weights), x)
    _check(lambda t: ops.sum_along(
        ops.layer_norm(Tensor(x), t, Tensor(beta)) * weights), gamma)
    _check(lambda t: ops.sum_along(
        ops.layer_norm(Tensor(x), Tensor(gamma), t) * weights), beta)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_structure(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5))
    w = Tensor(rng.standard_normal((3, 5)))
    w2 = Tensor(rng.standard_normal((4, 3, 5)))
    wf = Tensor(rng.standard_normal(60))
    w45 = Tensor(rng.standard_normal((4, 5)))
    _check(lambda t: ops.sum_along(ops.mean(t, axis=1) * w), x)
    _check(lambda t: ops.sum_along(ops.sum_along(t, axis=0) * w45), x)
    _check(lambda t: ops.mean(t), x)
    _check(lambda t: ops.sum_along(ops.reshape(t, (60,)) * wf), x)
    _check(lambda t: ops.sum_along(ops.transpose(t, (1, 0, 2)) * w2), x)
    _check(lambda t: ops.sum_along(t[1] * w45), x)
    _check(lambda t: ops.sum_along(t[:, 2, :] * w), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gather_with_repeats(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3))
    idx = np.array([0, 2, 2, 4, 0])
    w = Tensor(rng.standard_normal((5, 3)))
    _check(lambda t: ops.sum_along(t[idx] * w), x)
    rows = np.array([1, 1, 3])
    cols = np.array([0, 0, 2])
    wv = Tensor(rng.standard_normal(3))
    _check(lambda t: ops.sum_along(t[rows, cols] * wv), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat_stack(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3))
    b = Tensor(rng.standard_normal((2, 5)))
    w = Tensor(rng.standard_normal((2, 8)))
    _check(lambda t: ops.sum_along(ops.concat([t, b], axis=1) * w), a)
    _check(lambda t: ops.sum_along(ops.concat([b, t], axis=-1) * w), a)
    ws = Tensor(rng.standard_normal((2, 2, 3)))
    c = Tensor(rng.standard_normal((2, 3)))
    _check(lambda t: ops.sum_along(ops.stack([t, c], axis=0) * ws), a)
    _check(lambda t: ops.sum_along(ops.stack([c, t], axis=1) *
                                   Tensor(np.transpose(ws.numpy(), (1, 0, 2)))), a)


def test_constant_promotion_keeps_graph_dtype():
    x = Parameter(np.ones(3, dtype=np.float32))
    out = x * 2.0 + 1.0
    assert out.dtype == np.float32
    with pytest.raises(ShapeError):
        ops.add(Parameter(np.ones(3, np.float32)), Parameter(np.ones(3)))


# -- determinism


def _graph_fingerprint():
    rng = np.random.default_rng(123)
    x = Parameter(rng.standard_normal((2, 6, 6, 3)))
    w = Parameter(rng.standard_normal((3, 3, 3, 4)) * 0.2)
    g = Parameter(np.ones(4))
    b = Parameter(np.zeros(4))
    h = ops.gelu(ops.conv2d(x, w, stride=2, pad=1))
    h = ops.layer_norm(h, g, b)
    loss = ops.mean(ops.softmax(h, axis=-1) * h)
    backward(loss)
    parts = [loss.numpy().tobytes(), x.grad.tobytes(), w.grad.tobytes(),
             g.grad.tobytes(), b.grad.tobytes()]
    return b"".join(parts)


def test_bit_determinism_in_process():
    assert _graph_fingerprint() == _graph_fingerprint()


def test_bit_determinism_across_processes():
    script = (
        "import hashlib, tests.test_diffcore as m;"
        "print(hashlib.sha256(m._graph_fingerprint()).hexdigest())"
    )
    runs = [
        subprocess.run([sys.executable, "-c", script], capture_output=True,
                       text=True, check=True, cwd=str(__import__("pathlib").Path(__file__).resolve().parents[1]))
        for _ in range(2)
    ]
    assert runs[0].stdout == runs[1].stdout and runs[0].stdout.strip()


# -- GDT container


def test_gdt_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    for arr in (rng.standard_normal((3, 4, 5)),
                rng.standard_normal(7).astype(np.float32),
                np.float64(3.25)):
        path = tmp_path / "t.gdt"
        gdt.save_tensor(path, Tensor(arr))
        back = gdt.load_tensor(path)
        assert back.dtype == np.asarray(arr).dtype
        npt.assert_array_equal(back.numpy(), np.asarray(arr))


def test_gdt_header_layout_is_fixed():
    import io

    buf = io.BytesIO()
    gdt.write_tensor(buf, Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))
    raw = buf.getvalue()
    assert raw[:4] == b"GDTF"
    assert raw[4:6] == (1).to_bytes(2, "little")     # version
    assert raw[6] == 1                               # real-32 code
    assert raw[7] == 2                               # rank
    assert raw[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    npt.assert_array_equal(np.frombuffer(raw[16:], dtype="<f4"),
                           np.arange(6, dtype=np.float32))


def test_gdt_rejects_corruption(tmp_path):
    path = tmp_path / "t.gdt"
    gdt.save_tensor(path, Tensor(np.ones(4)))
    raw = path.read_bytes()
    bad_magic = b"XXXX" + raw[4:]
    (tmp_path / "bad.gdt").write_bytes(bad_magic)
    with pytest.raises(gdt.FormatError, match="magic"):
        gdt.load_tensor(tmp_path / "bad.gdt")
    (tmp_path / "trunc.gdt").write_bytes(raw[:-8])
    with pytest.raises(gdt.FormatError, match="truncated"):
        gdt.load_tensor(tmp_path / "trunc.gdt")


def test_gdt_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    entries = {
        "stage0.attn.wq": Tensor(rng.standard_normal((8, 8))),
        "predictor.fc_cls.b": Tensor(rng.standard_normal(12).astype(np.float32)),
        "manifest.config": gdt.text_to_tensor("model.классы=8\n"),
    }
    path = tmp_path / "ckpt.gdt"
    gdt.save_archive(path, entries)
    back = gdt.load_archive(path)
    assert list(back) == list(entries)
    for name in entries:
        npt.assert_array_equal(back[name].numpy(), entries[name].numpy())
    assert gdt.tensor_to_text(back["manifest.config"]) == "model.классы=8\n"


def test_gdt_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "t.gdt"
    gdt.save_tensor(path, Tensor(np.ones(3)))
    assert [p.name for p in tmp_path.iterdir()] == ["t.gdt"]
