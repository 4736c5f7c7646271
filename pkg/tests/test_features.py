import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sista import autodiff as ad
from sista.errors import ConfigError, DegenerateInputError, ShapeError
from sista.features import (InstancePair, ProjectionHead, SistaModel, check_token_importance,
                            cosine_matrix, cosine_sim, encode, normalize, project)
from sista.corpus import CorpusSpec, generate_corpus

from oracles import phi

finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = arrays(np.float64, 5, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_normalize_examples(rng):
    np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)
    unit = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(normalize(unit), unit, atol=1e-12)
    v = rng.normal(size=17)
    assert np.linalg.norm(normalize(v)) == pytest.approx(1.0, abs=1e-12)


def test_normalize_zero_vector():
    with pytest.raises(DegenerateInputError):
        normalize(np.zeros(3))


def test_cosine_examples():
    u = np.array([0.3, -2.0, 1.0])
    assert cosine_sim(u, u) == pytest.approx(1.0, abs=1e-12)
    assert cosine_sim([1.0, 0.0], [0.0, 5.0]) == 0.0
    assert cosine_sim([1.0, 2.0], [2.0, 1.0]) == pytest.approx(4 / 5, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(DegenerateInputError):
        cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, st.floats(1e-3, 1e3))
def test_cosine_properties(u, v, scale):
    c = cosine_sim(u, v)
    assert c == cosine_sim(v, u)
    assert abs(c) <= 1.0 + 1e-12
    assert cosine_sim(u * scale, v) == pytest.approx(c, abs=1e-12)
    assert c == pytest.approx(phi(list(u), list(v)), abs=1e-12)


def test_cosine_matrix_matches_pairwise(rng):
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    out = cosine_matrix(a, b).value
    for i in range(3):
        for k in range(4):
            assert out[i, k] == pytest.approx(phi(list(a[i]), list(b[k])), abs=1e-12)


def test_identity_head_projects_to_padded_input():
    head = ProjectionHead.identity(3, 5)
    np.testing.assert_allclose(project([0.0, 0.6, 0.8], head), [0.0, 0.6, 0.8, 0.0, 0.0], atol=1e-15)
    truncating = ProjectionHead.identity(4, 2)
    np.testing.assert_allclose(project([3.0, 4.0, 7.0, 1.0], truncating), [0.6, 0.8], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-2))
def test_project_output_is_unit_norm(raw):
    head = ProjectionHead.init(6, 4, np.random.default_rng(0))
    assert np.linalg.norm(project(raw, head)) == pytest.approx(1.0, abs=1e-12)


def test_project_is_deterministic():
    raw = np.linspace(-1, 1, 8)
    a = project(raw, SistaModel.init(8, 4, seed=5).heads["text_global"])
    b = project(raw, SistaModel.init(8, 4, seed=5).heads["text_global"])
    assert a.tobytes() == b.tobytes()


def test_project_dimension_mismatch():
    with pytest.raises(ShapeError):
        project(np.ones(3), ProjectionHead.identity(4, 4))


def test_head_rejects_inconsistent_shapes():
    params = ProjectionHead.identity(3, 2).params
    params["ws"] = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        ProjectionHead(params)


def test_model_param_names_and_copy():
    model = SistaModel.init(6, 4, seed=0)
    names = model.named_params()
    assert len(names) == 20 and "text_local.ws" in names
    clone = model.copy()
    clone.heads["image_global"].params["w1"][0, 0] += 1.0
    assert model.heads["image_global"].params["w1"][0, 0] != clone.heads["image_global"].params["w1"][0, 0]


def test_head_gradients_match_finite_differences(rng):
    head = ProjectionHead.init(5, 3, rng)
    raw = rng.normal(size=(4, 5))
    target = rng.normal(size=(4, 3))
    for name in ProjectionHead.param_names:
        def f(x, name=name):
            params = dict(head.params, **{name: x})
            return (head.forward(raw, params) * target).sum()
        assert ad.grad_check(f, head.params[name]) <= 1e-7, name


def test_token_importance_contract():
    np.testing.assert_array_equal(check_token_importance([0.5, 1.5], 2), [0.5, 1.5])
    with pytest.raises(ShapeError):
        check_token_importance([1.0], 2)
    with pytest.raises(ConfigError):
        check_token_importance([2.5, -0.5], 2)
    with pytest.raises(ConfigError):
        check_token_importance([1.0, 2.0], 2)


def test_encode_slices_local_blocks():
    corpus = generate_corpus(CorpusSpec(num_instances=3, raw_dim=8, num_clusters=2))
    model = SistaModel.init(8, 4, seed=1)
    batch = encode(model, corpus)
    assert batch.image_global.shape == (3, 4)
    pair = batch.pairs[2]
    assert isinstance(pair, InstancePair)
    expected = model.heads["image_local"].forward(corpus[2].patches).value
    np.testing.assert_allclose(pair.patches.value, expected, atol=1e-14)
    np.testing.assert_array_equal(pair.token_importance, corpus[2].token_importance)


def test_encode_empty_batch():
    with pytest.raises(ConfigError):
        encode(SistaModel.init(4, 2, seed=0), [])
