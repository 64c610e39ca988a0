import numpy as np
import pytest

from causal_concepts.model import ConceptModel, ModelConfig, TrainConfig, train
from causal_concepts.synthdata import GeneratorConfig, generate, split


def small_generator(**kw) -> GeneratorConfig:
    base = dict(n_concepts=6, dim=16, samples=120, tokens=5, regions=3, pool_size=4, filler_tokens=6)
    base.update(kw)
    return GeneratorConfig(**base)


def small_model(data, **kw) -> ConceptModel:
    base = dict(
        vocab_size=data.config.vocab_size,
        n_concepts=data.config.n_concepts,
        dim=data.config.dim,
        heads=2,
        mlp_hidden=32,
    )
    base.update(kw)
    return ConceptModel(ModelConfig(**base))


def randomize_heads(model: ConceptModel, seed: int = 0, scale: float = 1.0) -> ConceptModel:
    """Give the zero-initialized heads random weights so outputs are non-trivial."""
    rng = np.random.default_rng(seed)
    for name in ("cls_w", "adv_latent_w", "adv_content_w"):
        model.params[name] = scale * rng.normal(size=model.params[name].shape)
    model.params["static_logit"] = rng.normal(size=model.params["static_logit"].shape)
    return model


@pytest.fixture(scope="session")
def small_data():
    return generate(small_generator())


@pytest.fixture(scope="session")
def small_untrained(small_data):
    return randomize_heads(small_model(small_data))


@pytest.fixture(scope="session")
def small_trained(small_data):
    """A few hundred Adam steps on the small set; enough for non-trivial effects."""
    tr, te = split(small_data.samples)
    model = small_model(small_data)
    train(tr, model, small_data.vocabulary, TrainConfig(epochs=40, lr=1e-3, batch_size=16))
    return model


# -- acceptance report ----------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one line for the acceptance summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        request.config.stash[_ACCEPTANCE][number] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash.get(_ACCEPTANCE, {})
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        ok, detail = rows[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
