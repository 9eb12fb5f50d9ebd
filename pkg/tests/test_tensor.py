import numpy as np
import pytest

from trajcurate import checkpoint
from trajcurate.tensor import (
    Tensor,
    attention,
    autodiff_grad,
    concat,
    embedding,
    finite_diff_grad,
    no_grad,
)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-10)
    return np.max(np.abs(a - b) / denom)


def test_grad_of_square():
    g = autodiff_grad(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})
    assert np.allclose(g["x"], 6.0)


def test_grad_of_constant():
    g = autodiff_grad(lambda p: (p["x"] * 0.0).sum() + 5.0, {"x": np.ones(4)})
    assert np.allclose(g["x"], 0.0)


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        autodiff_grad(lambda p: p["x"] * 2.0, {"x": np.ones(3)})


def test_finite_diff_square():
    g = finite_diff_grad(lambda p: p["x"] * p["x"], {"x": np.array(3.0)}, eps=1e-5)
    assert abs(g["x"] - 6.0) < 1e-8


def test_finite_diff_abs_at_zero_is_zero():
    def loss(p):
        x = p["x"]
        return (x * x).sqrt().sum()

    g = finite_diff_grad(loss, {"x": np.array([0.0])}, eps=1e-5)
    assert abs(g["x"][0]) < 1e-8


def test_finite_diff_requires_positive_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: p["x"].sum(), {"x": np.ones(2)}, eps=0.0)


def mlp_bce_loss(p, x, y):
    h = (x @ p["w1"] + p["b1"]).gelu()
    logit = (h @ p["w2"] + p["b2"]).sum()
    prob = logit.sigmoid().clip(1e-12, 1.0 - 1e-12)
    return -(y * prob.log() + (1.0 - y) * (1.0 - prob).log())


def test_mlp_bce_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {
        "w1": rng.normal(size=(5, 7)) * 0.5,
        "b1": rng.normal(size=(7,)) * 0.1,
        "w2": rng.normal(size=(7, 1)) * 0.5,
        "b2": rng.normal(size=(1,)) * 0.1,
    }
    x = rng.normal(size=(1, 5))
    loss = lambda p: mlp_bce_loss(p, Tensor(x), 1.0)
    auto = autodiff_grad(loss, params)
    fd = finite_diff_grad(loss, params, eps=1e-5)
    for name in params:
        assert rel_err(auto[name], fd[name]) < 1e-4, name


@pytest.mark.parametrize("op", ["softmax", "log_softmax", "layer_norm", "gelu", "sigmoid"])
def test_unary_op_grads_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % 2**32)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 1))

    def loss(p):
        y = getattr(p["x"], op)()
        return ((y @ Tensor(w)) * (y @ Tensor(w))).sum()

    auto = autodiff_grad(loss, {"x": x})
    fd = finite_diff_grad(loss, {"x": x}, eps=1e-6)
    assert rel_err(auto["x"], fd["x"]) < 1e-4


def test_matmul_broadcast_grad():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))

    def loss(p):
        return ((p["a"] @ p["b"]) ** 2.0).sum()

    auto = autodiff_grad(loss, {"a": a, "b": b})
    fd = finite_diff_grad(loss, {"a": a, "b": b}, eps=1e-6)
    assert rel_err(auto["a"], fd["a"]) < 1e-4
    assert rel_err(auto["b"], fd["b"]) < 1e-4


def test_concat_embedding_getitem_grads():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(6, 3))
    x = rng.normal(size=(2, 3))
    idx = np.array([1, 4, 1])

    def loss(p):
        rows = embedding(p["table"], idx)
        both = concat([rows, p["x"]], axis=0)
        return (both[1:, :2] ** 2.0).sum()

    auto = autodiff_grad(loss, {"table": table, "x": x})
    fd = finite_diff_grad(loss, {"table": table, "x": x}, eps=1e-6)
    assert rel_err(auto["table"], fd["table"]) < 1e-4
    assert rel_err(auto["x"], fd["x"]) < 1e-4


def test_nan_rejected():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.nan]))


def test_no_grad_skips_graph():
    with no_grad():
        t = Tensor([1.0], requires_grad=True)
        out = t * 2.0
    assert not out.requires_grad


# -- attention -----------------------------------------------------------------


def test_attention_single_key_returns_value():
    q = np.random.default_rng(0).normal(size=(3, 4))
    k = np.ones((1, 4))
    v = np.arange(4.0).reshape(1, 4)
    out = attention(Tensor(q), Tensor(k), Tensor(v), n_heads=2)
    assert np.allclose(out.data, np.tile(v, (3, 1)))


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 4))
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 4))
    out = attention(Tensor(q), Tensor(k), Tensor(v), n_heads=1)
    assert np.allclose(out.data, np.tile(v.mean(axis=0), (2, 1)))


def dense_attention_oracle(q, k, v, n_heads):
    """Loop-based multi-head attention, kept independent of the Tensor ops."""
    m, d = q.shape
    dh = d // n_heads
    out = np.zeros((m, d))
    for h in range(n_heads):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        for i in range(m):
            scores = np.array([qs[i] @ ks[j] / np.sqrt(dh) for j in range(len(ks))])
            w = np.exp(scores - scores.max())
            w = w / w.sum()
            out[i, h * dh:(h + 1) * dh] = sum(w[j] * vs[j] for j in range(len(ks)))
    return out


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    out = attention(Tensor(q), Tensor(k), Tensor(v), n_heads=2)
    assert np.max(np.abs(out.data - dense_attention_oracle(q, k, v, 2))) < 1e-12


def test_attention_output_in_convex_hull_of_values():
    rng = np.random.default_rng(8)
    q = rng.normal(size=(4, 6))
    k = rng.normal(size=(5, 6))
    v = rng.normal(size=(5, 6))
    out = attention(Tensor(q), Tensor(k), Tensor(v), n_heads=1).data
    lo, hi = v.min(axis=0), v.max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_attention_head_divisibility():
    with pytest.raises(ValueError):
        attention(Tensor(np.ones((2, 5))), Tensor(np.ones((2, 5))),
                  Tensor(np.ones((2, 5))), n_heads=2)


def test_attention_grad_matches_finite_differences():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))

    def loss(p):
        return (attention(p["q"], p["k"], p["v"], n_heads=2) ** 2.0).sum()

    auto = autodiff_grad(loss, {"q": q, "k": k, "v": v})
    fd = finite_diff_grad(loss, {"q": q, "k": k, "v": v}, eps=1e-6)
    for name in ("q", "k", "v"):
        assert rel_err(auto[name], fd[name]) < 1e-4


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    params = {"a.w": rng.normal(size=(3, 4)), "z": rng.normal(size=(2,))}
    path = tmp_path / "model.tckp"
    checkpoint.save_checkpoint(path, params, meta={"frozen": 1.0, "dim": 4})
    loaded, meta = checkpoint.load_checkpoint(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])
    assert meta == {"frozen": 1.0, "dim": 4.0}


def test_checkpoint_deterministic_bytes(tmp_path):
    params = {"b": np.ones((2, 2)), "a": np.zeros(3)}
    p1, p2 = tmp_path / "x1.tckp", tmp_path / "x2.tckp"
    checkpoint.save_checkpoint(p1, params)
    checkpoint.save_checkpoint(p2, dict(reversed(list(params.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "model.tckp"
    checkpoint.save_checkpoint(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.tckp"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_checkpoint(path)
