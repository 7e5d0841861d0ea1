import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upn.net import (LOOKAHEAD, CheckpointError, NetConfig, NetState, backward, forward, infer,
                     init_params, load_params, save_params, zero_params)


def _inputs(rng, cfg, t, batch=None):
    lead = (t,) if batch is None else (batch, t)
    feats = rng.standard_normal(lead + (cfg.feat_dim,))
    feats[..., 32:64] = rng.uniform(0, 1, lead + (32,))
    feats[..., 64] = rng.uniform(0.1, 1, lead)
    feats[..., 66] = rng.uniform(-90, -10, lead)
    cond = rng.standard_normal(lead + (cfg.cond_dim,))
    return feats, cond


def _random_params(cfg, seed):
    p = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    return {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}


def test_config_validation():
    assert NetConfig().n_params() > 0
    with pytest.raises(ValueError):
        NetConfig(gru_layers=0)
    with pytest.raises(ValueError):
        NetConfig(feat_dim=67)
    cfg = NetConfig(cond_dim=5, conv_channels=7, gru_layers=2, gru_hidden=9)
    assert NetConfig.from_params(init_params(cfg)) == cfg


def test_zero_params_give_half():
    cfg = NetConfig(cond_dim=4, conv_channels=6, gru_layers=2, gru_hidden=5)
    f, c = _inputs(np.random.default_rng(0), cfg, 10)
    out, _ = forward(zero_params(cfg), f, c)
    for a in (out.gains, out.strengths, out.vad):
        assert np.all(a == 0.5)


def test_outputs_in_open_interval():
    cfg = NetConfig(cond_dim=4, conv_channels=8, gru_layers=2, gru_hidden=8)
    f, c = _inputs(np.random.default_rng(1), cfg, 30)
    out, _ = forward(init_params(cfg, 3), f, c)
    for a in (out.gains, out.strengths, out.vad):
        assert np.all((a > 0) & (a < 1))


def test_shape_mismatch():
    cfg = NetConfig(cond_dim=4, conv_channels=4, gru_layers=1, gru_hidden=4)
    f, c = _inputs(np.random.default_rng(2), cfg, 5)
    with pytest.raises(ValueError):
        forward(init_params(cfg), f, c[:4])
    with pytest.raises(ValueError):
        forward(init_params(cfg), f, c, NetState.zeros(cfg, batch=2))


# ---------------------------------------------------------------------------
# streaming and look-ahead

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_streaming_bit_identical(dtype):
    cfg = NetConfig(cond_dim=33)
    params = init_params(cfg, 4, dtype=dtype)
    f, c = _inputs(np.random.default_rng(3), cfg, 100)
    whole, _ = forward(params, f, c)
    state = None
    parts = []
    for k in range(10):
        out, state = forward(params, f[10 * k:10 * k + 10], c[10 * k:10 * k + 10], state)
        parts.append(out)
    for key in ("gains", "strengths", "vad"):
        chunked = np.concatenate([getattr(p, key) for p in parts])
        assert np.array_equal(chunked, getattr(whole, key))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.integers(0, 29))
def test_condition_change_reaches_only_later_frames(seed, t):
    cfg = NetConfig(cond_dim=5, conv_channels=8, gru_layers=2, gru_hidden=8)
    params = _random_params(cfg, seed % 1000)
    rng = np.random.default_rng(seed)
    f, c = _inputs(rng, cfg, 30)
    a = infer(params, f, c)
    c2 = c.copy()
    c2[t] += 1.0
    b = infer(params, f, c2)
    changed = np.flatnonzero(np.any(a.gains != b.gains, axis=1))
    assert changed.min() >= t - LOOKAHEAD


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.integers(0, 29))
def test_feature_lookahead_is_two_frames(seed, t):
    cfg = NetConfig(cond_dim=5, conv_channels=8, gru_layers=2, gru_hidden=8)
    params = _random_params(cfg, seed % 1000)
    f, c = _inputs(np.random.default_rng(seed), cfg, 30)
    a = infer(params, f, c)
    f2 = f.copy()
    f2[t, :32] += 1.0
    b = infer(params, f2, c)
    changed = np.flatnonzero(np.any(a.gains != b.gains, axis=1))
    assert changed.min() == max(t - LOOKAHEAD, 0)


def test_infer_aligns_frames():
    cfg = NetConfig(cond_dim=3, conv_channels=4, gru_layers=1, gru_hidden=4)
    f, c = _inputs(np.random.default_rng(5), cfg, 12)
    out = infer(init_params(cfg, 1), f, c)
    assert len(out) == 12
    assert len(infer(init_params(cfg, 1), f[:0], c[:0])) == 0


# ---------------------------------------------------------------------------
# gradients

def _fd_check(cfg, seed, t=12, batch=None, n_entries=4):
    rng = np.random.default_rng(seed)
    params = _random_params(cfg, seed)
    f, c = _inputs(rng, cfg, t, batch)
    lead = f.shape[:-1]
    go = {"gains": rng.standard_normal(lead + (cfg.n_bands,)),
          "strengths": rng.standard_normal(lead + (cfg.n_bands,)),
          "vad": rng.standard_normal(lead)}

    def loss(p):
        out, _ = forward(p, f, c)
        return sum(float(np.sum(go[k] * getattr(out, k))) for k in go)

    grads = backward(params, f, c, go)
    h = 1e-5
    for name, value in params.items():
        for _ in range(n_entries):
            idx = tuple(int(rng.integers(s)) for s in value.shape)
            old = value[idx]
            value[idx] = old + h
            up = loss(params)
            value[idx] = old - h
            down = loss(params)
            value[idx] = old
            fd = (up - down) / (2 * h)
            an = grads[name][idx]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-5)
            assert err < 1e-4, (name, idx, an, fd)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = NetConfig(cond_dim=int(rng.integers(1, 6)), conv_channels=int(rng.integers(2, 9)),
                    gru_layers=int(rng.integers(1, 4)), gru_hidden=int(rng.integers(2, 9)))
    _fd_check(cfg, seed, t=int(rng.integers(4, 13)), batch=None if seed % 2 else 2)


def test_zero_output_gradient_gives_zero():
    cfg = NetConfig(cond_dim=3, conv_channels=4, gru_layers=2, gru_hidden=5)
    params = _random_params(cfg, 0)
    f, c = _inputs(np.random.default_rng(0), cfg, 8)
    go = {"gains": np.zeros((8, 32)), "strengths": np.zeros((8, 32)), "vad": np.zeros(8)}
    assert all(np.all(g == 0) for g in backward(params, f, c, go).values())


def test_vad_head_unreachable_without_vad_gradient():
    cfg = NetConfig(cond_dim=3, conv_channels=4, gru_layers=2, gru_hidden=5)
    params = _random_params(cfg, 1)
    rng = np.random.default_rng(1)
    f, c = _inputs(rng, cfg, 8)
    go = {"gains": rng.standard_normal((8, 32)), "strengths": rng.standard_normal((8, 32)),
          "vad": np.zeros(8)}
    g = backward(params, f, c, go)
    assert np.all(g["head_vad.weight"] == 0) and np.all(g["head_vad.bias"] == 0)
    assert np.any(g["gru0.W"] != 0)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    cfg = NetConfig()
    p = init_params(cfg, 7)
    save_params(p, tmp_path / "m.ckpt")
    q = load_params(tmp_path / "m.ckpt", cfg)
    assert p.keys() == q.keys()
    assert all(np.array_equal(p[k], q[k]) and q[k].dtype == np.float32 for k in p)
    assert list(tmp_path.iterdir()) == [tmp_path / "m.ckpt"]


def test_checkpoint_errors(tmp_path):
    cfg = NetConfig(cond_dim=3, conv_channels=4, gru_layers=1, gru_hidden=4)
    save_params(init_params(cfg), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_params(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:8] + (9).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_params(tmp_path / "ver.ckpt")
    (tmp_path / "tail.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(tmp_path / "tail.ckpt")
    with pytest.raises(CheckpointError, match="conv1.weight"):
        load_params(tmp_path / "m.ckpt", NetConfig(cond_dim=3, conv_channels=5, gru_layers=1,
                                                   gru_hidden=4))
