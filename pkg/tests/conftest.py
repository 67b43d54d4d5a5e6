import hypothesis
import pytest

from seqlab import tensor as T

hypothesis.settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture(autouse=True)
def finite_checks():
    """Assert every forward op stays finite while tests run."""
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)
