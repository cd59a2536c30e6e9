import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from caml_nmt.model import ModelConfig, Seq2Seq, Vocab, count_parameters  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MICRO = ModelConfig(d_model=3, n_heads=1, n_enc_layers=1, n_dec_layers=1, n_recon_layers=1,
                    ffn_dim=3, dropout=0.0, label_smoothing=0.1, max_len=6)


def micro_vocabs():
    return Vocab(["a", "b"]), Vocab(["x", "y"])


@pytest.fixture
def micro():
    """(model, params) with fewer than 500 parameters."""
    sv, tv = micro_vocabs()
    model = Seq2Seq(MICRO, sv, tv)
    assert count_parameters(MICRO, len(sv), len(tv)) <= 500
    params = model.init_params(3)
    # spread the weights so gradients are not dominated by near-uniform softmaxes
    rng = np.random.default_rng(0)
    for _, t in params.items():
        t.data += 0.3 * rng.standard_normal(t.data.shape)
    return model, params


@pytest.fixture
def small():
    """A small but non-trivial model for decoding and training mechanics."""
    sv = Vocab([f"s{i}" for i in range(6)])
    tv = Vocab([f"t{i}" for i in range(5)])
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, n_recon_layers=1,
                      ffn_dim=16, dropout=0.1, max_len=8)
    model = Seq2Seq(cfg, sv, tv)
    return model, model.init_params(5)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(acceptance_log.VERDICTS):
        passed, detail = acceptance_log.VERDICTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
