import pytest

from resetlm.corpus import LanguageSpec, SynthParams, generate_synthetic_corpus
from resetlm.tokenizer import train_bpe


@pytest.fixture(scope="session")
def synth_spec():
    return LanguageSpec("p0", "pretraining", synth=SynthParams(0x61, 0x6A))


@pytest.fixture(scope="session")
def synth_docs(synth_spec):
    return generate_synthetic_corpus(synth_spec, 12, seed=7)


@pytest.fixture(scope="session")
def small_tokenizer(synth_docs):
    return train_bpe(synth_docs, 300)
