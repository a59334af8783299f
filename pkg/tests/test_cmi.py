import numpy as np
import pytest

from src.services.cmi import CmiFactorError, cmi_param_savings, cmi_param_specs, kron, materialize_down
from src.services.encoders import embed_text, embed_video
from src.services.gradcheck import finite_diff_check
from src.services.numerics import Tensor, constant, grad, mul, sum_
from src.services.retrieval import contrastive_loss, effective_tau, similarity_matrix
from src.services.trainer import batch_loss


def test_kron_example():
    """Test block expansion on a hand-computed case."""
    out = kron(constant([[1.0, 2.0], [3.0, 4.0]]), constant([[0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0, 2.0], [0.0, 3.0, 0.0, 4.0]])


def test_kron_full_scale_shape():
    """Test a 16x8 shared matrix and 48x8 factor give a 768x64 downsample."""
    out = kron(constant(np.ones((16, 8))), constant(np.ones((48, 8))))
    assert out.shape == (768, 64)


def test_kron_matches_four_index_definition():
    """Test kron against element-by-element evaluation of the definition."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        m, n, p, q = rng.integers(1, 5, size=4)
        a = rng.standard_normal((m, n))
        b = rng.standard_normal((p, q))
        out = kron(constant(a), constant(b)).data
        expected = np.empty((m * p, n * q))
        for i in range(m):
            for j in range(n):
                for k in range(p):
                    for l in range(q):
                        expected[i * p + k, j * q + l] = a[i, j] * b[k, l]
        assert np.array_equal(out, expected)


def test_kron_gradient():
    """Test both kron operands against finite differences."""
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 2)), requires_grad=True, name="a")
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True, name="b")
    weights = constant(rng.standard_normal((6, 4)))
    assert finite_diff_check(lambda: sum_(mul(kron(a, b), weights)), [a, b]) < 1e-7


def test_savings_full_scale():
    """Test the parameter arithmetic at d=768, d'=64, 16x8."""
    assert cmi_param_savings(768, 64, 16, 8) == (49152, 384, 128)


def test_savings_degenerate():
    """Test m = n = 1: the factor is the dense matrix, shared is one scalar."""
    assert cmi_param_savings(8, 4, 1, 1) == (32, 32, 1)


def test_savings_small():
    """Test d=8, d'=4, m=n=2."""
    assert cmi_param_savings(8, 4, 2, 2) == (32, 8, 4)


def test_savings_divisibility():
    """Test factor sizes must divide the dimensions."""
    with pytest.raises(ValueError):
        cmi_param_savings(10, 4, 3, 2)
    with pytest.raises(ValueError):
        cmi_param_savings(8, 4, 2, 3)


def test_non_equipped_layer_returns_dense(toy_state):
    """Test a layer without CMI returns its own W_down unchanged."""
    out = materialize_down(0, "video", toy_state.params, toy_state.config.cmi_layers())
    assert out is toy_state.params["adapters.video.0.w_down"]


def test_shared_matrix_couples_modalities(toy_state):
    """Test perturbing M_C changes both modalities' materialized weights."""
    layers = toy_state.config.cmi_layers()
    before_v = materialize_down(1, "video", toy_state.params, layers).data.copy()
    before_t = materialize_down(1, "text", toy_state.params, layers).data.copy()
    assert before_v.shape == (48, 8)
    assert before_t.shape == (32, 8)
    toy_state.tunable["cmi.1.m_c"].data[0, 0] += 0.5
    after_v = materialize_down(1, "video", toy_state.params, layers).data
    after_t = materialize_down(1, "text", toy_state.params, layers).data
    assert not np.array_equal(before_v, after_v)
    assert not np.array_equal(before_t, after_t)


def test_missing_factor_rejected(toy_state):
    """Test an equipped layer without a modality factor is an error."""
    params = dict(toy_state.params)
    del params["cmi.1.m_d_text"]
    with pytest.raises(CmiFactorError):
        materialize_down(1, "text", params, toy_state.config.cmi_layers())


def test_specs_skip_disabled_branch(toy_config):
    """Test a disabled text branch gets no text factor."""
    config = toy_config.updated(**{"adapter.text_mode": "none"})
    paths = {spec.path for spec in cmi_param_specs(config)}
    assert paths == {"cmi.1.m_c", "cmi.1.m_d_video"}


def test_shared_matrix_gradient_sums_both_modalities(perturbed_state, pair_batch):
    """Test the M_C gradient of the training loss is the sum of its video and text paths."""
    frames, tokens = pair_batch
    state = perturbed_state
    tau = effective_tau(state.tau, 100.0)

    def loss():
        return batch_loss(state, frames, tokens, tau)

    def video_path():
        texts = constant(embed_text(tokens, state).data)
        return contrastive_loss(similarity_matrix(embed_video(frames, state), texts, tau))

    def text_path():
        videos = constant(embed_video(frames, state).data)
        return contrastive_loss(similarity_matrix(videos, embed_text(tokens, state), tau))

    coupled = grad(loss())["cmi.1.m_c"].data
    from_video = grad(video_path())["cmi.1.m_c"].data
    from_text = grad(text_path())["cmi.1.m_c"].data

    assert np.abs(coupled - from_video).max() > 1e-9
    assert np.linalg.norm(from_text) > 1e-9
    np.testing.assert_allclose(coupled, from_video + from_text, rtol=1e-9, atol=1e-12)

    shared = state.tunable["cmi.1.m_c"]
    assert finite_diff_check(loss, [shared], floor=1e-6) < 1e-4
