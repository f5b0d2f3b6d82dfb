import pytest

from corank.config import ModelConfig, TrainConfig
from corank.firststage import bm25_search, build_index
from corank.interaction import Tokenizer
from corank.synthetic import generate
from corank.trainer import Dataset

TOY_MODEL = ModelConfig(hidden=16, heads=2, base_layers=1, calib_layers=1, group_layers=1,
                        vocab_size=128, max_seq_len=24, seed=0)
TOY_TRAIN = TrainConfig(epochs=1, n=6, m=2, o=1, k=16, base_lr=1e-3, first_pass_lr=1e-3,
                        first_pass_epochs=1, seed=0)


def toy_dataset(n_queries=4, docs_per_query=16, seed=0, k=16):
    col = generate(n_queries=n_queries, docs_per_query=docs_per_query, n_anchors=2,
                   n_background=20, doc_len=10, seed=seed)
    idx = build_index(col.corpus)
    cands = {q: [d for d, _ in bm25_search(idx, t, k)] for q, t in col.queries.items()}
    tok = Tokenizer(col.vocabulary(), TOY_MODEL.vocab_size)
    return Dataset(col.corpus, col.queries, col.qrels, cands, tok)


@pytest.fixture(scope="session")
def toy_ds():
    return toy_dataset()


# ------------------------------------------------------------ acceptance report
ACCEPTANCE: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported by name")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    line = f"[{status}] {marker.args[0]}" + (f": {details}" if details else "")
    ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
