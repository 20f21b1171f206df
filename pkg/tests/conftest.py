import pytest
import torch
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool  # <-- one shared connection

from crisiskit.app.corpus import normalized_texts, train_tokenizer
from crisiskit.app.encoder import EncoderConfig
from crisiskit.app.finetune import LabelledData, SplitSpec, split_stratified
from crisiskit.app.models import Base
from crisiskit.app.synth import labelled_corpus, write_sample_data


@pytest.fixture(scope="session")
def test_engine():
    # One shared in-memory ledger across all connections/threads
    engine = create_engine(
        "sqlite+pysqlite:///:memory:",
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    Base.metadata.create_all(bind=engine)
    return engine


@pytest.fixture()
def db_session(test_engine):
    TestingSessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=test_engine)
    session = TestingSessionLocal()
    try:
        yield session
    finally:
        session.rollback()
        session.close()


# ---------- Data ----------

@pytest.fixture(scope="session")
def records():
    return labelled_corpus(400, seed=0)


@pytest.fixture(scope="session")
def tokenizer(records):
    return train_tokenizer(normalized_texts(records), vocab_size=512)


@pytest.fixture(scope="session")
def splits(records, tokenizer):
    parts = split_stratified(records, SplitSpec(seed=42))
    return tuple(
        LabelledData.from_texts(tokenizer, list(normalized_texts(p)), [r.label for r in p], max_length=32)
        for p in parts
    )


@pytest.fixture()
def sample_dir(tmp_path):
    paths = write_sample_data(tmp_path / "sample", n=240, seed=0)
    return tmp_path / "sample", paths


# ---------- Models ----------

@pytest.fixture()
def tiny_config(tokenizer):
    return EncoderConfig(
        hidden_size=16,
        num_layers=1,
        num_heads=2,
        intermediate_size=32,
        vocab_size=tokenizer.vocab_size,
        max_positions=32,
    )


@pytest.fixture()
def small_config(tokenizer):
    # large enough to separate the synthetic classes in a few epochs
    return EncoderConfig(
        hidden_size=32,
        num_layers=1,
        num_heads=2,
        intermediate_size=64,
        vocab_size=tokenizer.vocab_size,
        max_positions=32,
    )


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    yield
