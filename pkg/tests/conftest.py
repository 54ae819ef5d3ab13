from __future__ import annotations

import numpy as np
import pytest

from cushionlab.model import TransformerConfig, TransformerModel, init_params


def small_model(arch: str = "llama-ish", seed: int = 0, dtype=np.float32, **kw) -> TransformerModel:
    cfg = TransformerConfig.preset(arch, **{"d_model": 32, "n_layers": 2, "n_heads": 2, "d_ff": 64,
                                            "max_seq_len": 96, **kw})
    return init_params(cfg, seed=seed, dtype=dtype).freeze()


@pytest.fixture(params=["llama-ish", "gpt-ish"])
def model(request) -> TransformerModel:
    return small_model(request.param)


@pytest.fixture
def llama() -> TransformerModel:
    return small_model("llama-ish")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def text_ids(rng: np.random.Generator, n: int, batch: int | None = None) -> np.ndarray:
    shape = (n,) if batch is None else (batch, n)
    return rng.integers(32, 127, size=shape)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
