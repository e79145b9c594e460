import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindshot.config import ExperimentConfig, LossWeights
from mindshot.io import array_dict_checksum
from mindshot.losses import l_amp_grad
from mindshot.models import (AdapterParams, LossSpec, ModelDims, ModelParams, NumericError,
                             adapter_forward, count_params, encoder_forward, forward, grad,
                             init_adapter, init_encoder, init_params, load_checkpoint,
                             params_checksum, save_checkpoint)

import gradcheck as G

# encoder_forward(sin(0.1 n), n < 96) under seed 0 at default dims, recorded on first run
GOLDEN_FORWARD = "50b4423b4c1c81f49188f8c6ecab47dae9910a1f810476b99628929dd0e63ff7"
GOLDEN_PARAMS = "ccea318662317a826d9f890a0de5e60625460c8db31b54e7d693e7b803526dc7"

DIMS = ModelDims()


# -- adapter ----------------------------------------------------------------

@given(st.integers(1, 3), st.integers(0, 1000))
def test_fresh_adapter_is_identity(depth, seed):
    dims = ModelDims(12, 8, 1, 4, 8, depth, True)
    x = np.random.default_rng(seed).standard_normal(12)
    assert np.array_equal(adapter_forward(x, init_adapter(seed, dims)), x)


def test_fresh_nonresidual_adapter_is_identity():
    dims = ModelDims(12, 8, 1, 4, 8, 1, False)
    x = np.random.default_rng(0).standard_normal((3, 12))
    assert np.array_equal(adapter_forward(x, init_adapter(0, dims)), x)


def test_adapter_hand_example():
    p = AdapterParams({"W0": np.array([[1.0, 0], [0, 0]]), "b0": np.array([0.0, 1])})
    assert adapter_forward(np.array([3.0, 4.0]), p).tolist() == [6.0, 5.0]
    q = AdapterParams(p.tensors, 1, residual=False)
    assert adapter_forward(np.array([3.0, 4.0]), q).tolist() == [3.0, 1.0]


def test_adapter_shape_mismatch():
    with pytest.raises(ValueError):
        adapter_forward(np.zeros(5), init_adapter(0, ModelDims(4, 4, 1, 4, 4)))


def test_paper_scale_adapter_count():
    L = 9600
    assert L * L + L == 92_169_600
    dims = ModelDims(96)
    assert count_params(ModelParams(init_encoder(0, dims), init_adapter(0, dims)),
                        ("adapter",)) == 96 * 96 + 96 == 9312


def test_count_params_filters():
    enc = init_encoder(0, DIMS)
    p = ModelParams(enc, init_adapter(0, DIMS))
    assert count_params(p, ()) == 0
    assert count_params(p) == count_params(p, ("adapter",)) + count_params(p, ("encoder",))
    assert count_params(p, ("adapter",)) / count_params(p) < 0.15


def test_bad_adapter_dims():
    with pytest.raises(ValueError):
        ModelDims(adapter_depth=4)
    with pytest.raises(ValueError):
        ModelDims(adapter_depth=2, adapter_residual=False)


# -- encoder ----------------------------------------------------------------

def test_encoder_output_shapes():
    enc = init_encoder(3, DIMS)
    for x in (np.zeros(96), np.full(96, 1e3), np.random.default_rng(0).standard_normal(96)):
        e_b, e_r = encoder_forward(x, enc)
        assert e_b.shape == (64,) and e_r.shape == (64,)


def test_encoder_zero_final_layers_give_zero():
    enc = init_encoder(0, DIMS)
    for name in ("proj2", "prior1"):
        enc.tensors[f"{name}.W"][:] = 0
        enc.tensors[f"{name}.b"][:] = 0
    e_b, e_r = encoder_forward(np.zeros(96), enc)
    assert np.all(e_b == 0) and np.all(e_r == 0)


def test_golden_encoder_checksum():
    enc = init_encoder(0, DIMS)
    assert params_checksum(enc.tensors) == GOLDEN_PARAMS
    e_b, e_r = encoder_forward(np.sin(np.arange(96) * 0.1), enc)
    assert array_dict_checksum({"e_b": e_b, "e_refined": e_r}) == GOLDEN_FORWARD


def test_init_deterministic():
    a1, e1 = init_params(5, DIMS)
    a2, e2 = init_params(5, DIMS)
    assert params_checksum(a1.tensors) == params_checksum(a2.tensors)
    assert params_checksum(e1.tensors) == params_checksum(e2.tensors)
    assert params_checksum(e1.tensors) != params_checksum(init_encoder(6, DIMS).tensors)


def test_encoder_init_is_fan_in_scaled():
    enc = init_encoder(0, DIMS)
    W = enc.tensors["in.W"]
    assert np.abs(W).max() <= 1 / np.sqrt(96)


def test_forward_rows_independent_of_batch():
    enc = init_encoder(1, DIMS)
    adapter = AdapterParams({"W0": 0.01 * np.ones((96, 96)), "b0": np.ones(96)})
    p = ModelParams(enc, adapter)
    X = np.random.default_rng(2).standard_normal((7, 96))
    _, eb_all, er_all = forward(p, X)
    for i in (0, 3, 6):
        _, eb, er = forward(p, X[i])
        assert np.allclose(eb, eb_all[i], rtol=0, atol=1e-14)
        assert np.allclose(er, er_all[i], rtol=0, atol=1e-14)


def test_zero_adapter_matches_frozen_pipeline():
    enc = init_encoder(0, DIMS)
    X = np.random.default_rng(4).standard_normal((5, 96))
    _, eb0, er0 = forward(ModelParams(enc), X)
    _, eb1, er1 = forward(ModelParams(enc, init_adapter(0, DIMS)), X)
    assert np.array_equal(eb0, eb1) and np.array_equal(er0, er1)


# -- gradients --------------------------------------------------------------

def test_all_frozen_spec_gives_no_gradients():
    p, b = G.random_problem(0)
    _, g = grad(p, b, LossSpec("total", frozenset(), LossWeights(), 0.1))
    assert g == {}


def test_frozen_encoder_gets_no_entry():
    p, b = G.random_problem(0)
    _, g = grad(p, b, LossSpec("total", frozenset({"adapter"}), LossWeights(), 0.1))
    assert set(g) == {"adapter"}


def test_l_amp_gradient_zero_at_minimum_through_adapter():
    x = np.random.default_rng(0).standard_normal((2, 16))
    _, gi, _ = l_amp_grad(x, x)
    assert np.all(gi == 0)


def test_total_grad_adapter_bias_two_samples():
    errs, _, _ = G.check("l_total", 3, trainable=("adapter",), B=2, hidden=8)
    assert errs.max() < 1e-5


@pytest.mark.parametrize("depth,residual", [(1, False), (2, True), (3, True)])
def test_gradient_adapter_variants(depth, residual):
    for seed in range(2):
        errs, _, _ = G.check("l_total", seed, trainable=("adapter",), hidden=8, depth=depth,
                             residual=residual)
        assert errs.max() < 1e-5


def test_gradient_semantic_pretraining():
    p, b = G.random_problem(5, hidden=8)
    p = ModelParams(p.encoder)
    spec = LossSpec("semantic", frozenset({"encoder"}), LossWeights(), 0.1)
    _, ga = grad(p, b, spec)
    spec_v = LossSpec("total", frozenset({"encoder"}), LossWeights(1, 30, 0, 0, 0), 0.1, "none")
    gn = G.numeric_grads(p, b, spec_v)
    assert G.rel_errors(ga, gn).max() < 1e-5


@pytest.mark.parametrize("flag", ["wrap_phase_diff", "bidirectional"])
def test_gradient_loss_flags(flag):
    p, b = G.random_problem(2, hidden=8)
    spec = LossSpec("total", frozenset({"adapter", "encoder"}), LossWeights(), 0.1, "fourier",
                    **{flag: True})
    _, ga = grad(p, b, spec)
    # the harness oracle has no flag support: difference grad()'s own loss value instead
    def value(params):
        return grad(params, b, spec)[0].total
    for group in ga:
        for name, arr in list(p.groups()[group].items())[:2]:
            flat = arr.reshape(-1)
            for k in range(0, flat.size, max(1, flat.size // 10)):
                old = flat[k]
                flat[k] = old + G.STEP
                fp = value(p)
                flat[k] = old - G.STEP
                fm = value(p)
                flat[k] = old
                n = (fp - fm) / (2 * G.STEP)
                a = ga[group][name].reshape(-1)[k]
                assert abs(a - n) / max(abs(a), abs(n), G.FLOOR) < 1e-5


def test_nonfinite_loss_raises():
    p, b = G.random_problem(0)
    b.x[0, 0] = np.inf
    with pytest.raises((NumericError, ValueError, FloatingPointError)):
        with np.errstate(all="ignore"):
            grad(p, b, LossSpec("total", frozenset({"adapter"}), LossWeights(), 0.1))


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    enc = init_encoder(0, ModelDims(16, 8, 1, 4, 8))
    rec = save_checkpoint(tmp_path, enc.tensors, {"phase": "pretrain", "step": 3, "loss": 1.5})
    tensors, rec2 = load_checkpoint(tmp_path)
    assert rec == rec2 and rec["checksum"] == params_checksum(enc.tensors)
    assert all(np.array_equal(tensors[k], enc.tensors[k]) for k in enc.tensors)


def test_checkpoint_tamper_detected(tmp_path):
    from mindshot.io import ArtifactError, write_array
    enc = init_encoder(0, ModelDims(16, 8, 1, 4, 8))
    save_checkpoint(tmp_path, enc.tensors, {})
    write_array(tmp_path / "in.W.msarr", np.zeros((8, 16)))
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path)


def test_dims_from_config():
    cfg = ExperimentConfig()
    cfg.model.adapter_depth = 2
    d = ModelDims.from_config(cfg)
    assert (d.canonical_len, d.embed_dim, d.adapter_depth) == (96, 64, 2)
