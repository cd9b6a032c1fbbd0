import numpy as np
import pytest

from factrank.dataio import load_dataset, split_fold
from factrank.kb import Fact, KnowledgeBase, Relation
from factrank.synth import SyntheticConfig, generate_synthetic
from factrank.wordvec import FactMatrix, WordVectorTable, load_vectors

# desk-size generator settings shared by the mid-weight tests: 104 facts
# (>= 100 so the 99-negative scheme still fills whole candidate sets) and
# small feature dims for speed
SMALL_SYNTH = dict(
    seed=11,
    vocab_size=45,
    facts_per_relation=8,
    qa_pairs=60,
    wordvec_dim=10,
    feature_dim=32,
    concept_labels=64,
)


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_synth")
    generate_synthetic(SyntheticConfig(**SMALL_SYNTH), out)
    return out


@pytest.fixture(scope="session")
def small_synth(small_synth_dir):
    d = small_synth_dir
    instances, store, kb = load_dataset(
        d / "kb.tsv", d / "qa.jsonl", d / "features.txt", d / "concepts.txt", d / "concept_labels.txt"
    )
    table = load_vectors(d / "wordvec.txt", SMALL_SYNTH["wordvec_dim"])
    return {"instances": instances, "store": store, "kb": kb, "table": table, "dir": d}


@pytest.fixture(scope="session")
def small_split(small_synth):
    train, test = split_fold(small_synth["instances"], 1)
    return train, test


@pytest.fixture()
def tiny_kb():
    return KnowledgeBase(
        [
            Fact("f1", "Umbrella", Relation.USED_FOR, "Shade"),
            Fact("f2", "Beach", Relation.HAS_PROPERTY, "Sandy"),
            Fact("f3", "Fork", Relation.USED_FOR, "eat with"),
            Fact("f4", "Dog", Relation.IS_A, "Pet"),
        ]
    )


@pytest.fixture()
def tiny_table():
    rng = np.random.default_rng(5)
    tokens = ["umbrella", "shade", "beach", "sandy", "fork", "eat", "with", "dog", "pet"]
    return WordVectorTable(4, {t: rng.standard_normal(4) for t in tokens})


@pytest.fixture()
def tiny_fact_matrix(tiny_kb, tiny_table):
    return FactMatrix.build(tiny_kb, tiny_table)
