"""End-to-end inference and the evaluation harness.

Answering a question runs three frozen models: the relation classifier
narrows the knowledge base to one relation bucket, the scorer ranks that
bucket by cosine against the image-question embedding, and the source
classifier decides whether the top fact's subject or object is the
answer. An empty relation bucket is a reported "no_fact" outcome, never a
crash, and counts as wrong during evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import FeatureStore, QAInstance
from .encoders import (
    RELATIONS,
    RelationClassifier,
    SourceClassifier,
    predict_relation_batch,
    predict_source_batch,
)
from .errors import UsageError
from .kb import AnswerSource, Fact, KnowledgeBase, Relation
from .scorer import ScorerParams, embed_batch, embed_image_question, rank_candidates
from .wordvec import FactMatrix

Array = np.ndarray

# Results on the full FVQA release for the question + visual-concepts
# variant (percent). Reaching them needs the complete dataset with
# precomputed CNN features and hours of training; expect roughly +/- 3
# points depending on data preparation and hardware.
FVQA_REFERENCE = {
    "relation_at1": 75.4,
    "relation_at3": 91.97,
    "source_acc": 97.3,
    "answer_at1": 62.20,
    "answer_at3": 75.60,
    "fact_at1": 64.50,
    "fact_at3": 76.20,
}
FVQA_REFERENCE_TOLERANCE = 3.0


@dataclass
class PipelineModels:
    scorer: ScorerParams
    fact_matrix: FactMatrix
    relation: RelationClassifier | None = None
    source: SourceClassifier | None = None


@dataclass
class Prediction:
    question_id: str
    image_id: str
    status: str  # "ok" or "no_fact"
    relation: Relation | None
    relation_probs: list[tuple[Relation, float]]
    source: AnswerSource
    source_prob: float
    top_facts: list[tuple[str, float]]
    answer: str | None

    def as_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "image_id": self.image_id,
            "status": self.status,
            "relation": self.relation.value if self.relation else None,
            "source": self.source.value,
            "source_prob": self.source_prob,
            "top_facts": [[fid, s] for fid, s in self.top_facts],
            "answer": self.answer,
        }


@dataclass
class Metrics:
    answer_at1: float
    answer_at3: float
    fact_at1: float
    fact_at3: float
    relation_at1: float
    relation_at3: float
    source_acc: float
    count: int
    no_fact_count: int

    def as_dict(self) -> dict:
        return {
            "answer_at1": self.answer_at1,
            "answer_at3": self.answer_at3,
            "fact_at1": self.fact_at1,
            "fact_at3": self.fact_at3,
            "relation_at1": self.relation_at1,
            "relation_at3": self.relation_at3,
            "source_acc": self.source_acc,
            "count": self.count,
            "no_fact_count": self.no_fact_count,
        }


def extract_answer(fact: Fact, source: AnswerSource) -> str:
    """The verbatim subject for an Image answer, the object otherwise."""
    return fact.subject if source is AnswerSource.IMAGE else fact.obj


def answers_match(predicted: str | None, expected: str, normalize: bool = True) -> bool:
    """Exact string match, by default after casefold and whitespace trim."""
    if predicted is None:
        return False
    if normalize:
        return predicted.strip().casefold() == expected.strip().casefold()
    return predicted == expected


def _candidate_ids(kb: KnowledgeBase, relations: Sequence[Relation]) -> list[str]:
    ids: list[str] = []
    for r in relations:
        ids.extend(kb.ids_with_relation(r))
    return ids


def answer_question(
    models: PipelineModels,
    kb: KnowledgeBase,
    feat: Array,
    concepts: Array,
    question: str,
    k: int = 3,
    question_id: str = "",
    image_id: str = "",
    oracle_relation: Relation | None = None,
    oracle_source: AnswerSource | None = None,
    top_m_relations: int = 1,
    tie_break: str = "id",
    rng: np.random.Generator | None = None,
) -> Prediction:
    """Answer one question with the frozen model bundle.

    The candidate pool is the top predicted relation's bucket; passing
    ``top_m_relations > 1`` widens it to the union of the top-m buckets.
    Oracle arguments replace the corresponding classifier's prediction.
    """
    if top_m_relations < 1:
        raise UsageError("top_m_relations must be >= 1")
    if oracle_relation is not None:
        ranked_relations = [(oracle_relation, 1.0)]
    else:
        if models.relation is None:
            raise UsageError("no relation classifier loaded and no oracle relation given")
        probs = predict_relation_batch(models.relation, [question])[0]
        order = sorted(range(len(RELATIONS)), key=lambda i: (-probs[i], i))
        ranked_relations = [(RELATIONS[i], float(probs[i])) for i in order]
    if oracle_source is not None:
        source, source_prob = oracle_source, 1.0
    else:
        if models.source is None:
            raise UsageError("no source classifier loaded and no oracle source given")
        p = float(predict_source_batch(models.source, [question])[0])
        source = AnswerSource.IMAGE if p >= 0.5 else AnswerSource.KNOWLEDGE_BASE
        source_prob = p

    relation_hat = ranked_relations[0][0]
    pool = _candidate_ids(kb, [r for r, _ in ranked_relations[:top_m_relations]])
    if not pool:
        return Prediction(
            question_id=question_id,
            image_id=image_id,
            status="no_fact",
            relation=relation_hat,
            relation_probs=ranked_relations[:3],
            source=source,
            source_prob=source_prob,
            top_facts=[],
            answer=None,
        )
    iq = embed_image_question(models.scorer, feat, concepts, question)
    top = rank_candidates(iq, pool, models.fact_matrix, k, tie_break, rng)
    answer = extract_answer(kb.fact(top[0][0]), source)
    return Prediction(
        question_id=question_id,
        image_id=image_id,
        status="ok",
        relation=relation_hat,
        relation_probs=ranked_relations[:3],
        source=source,
        source_prob=source_prob,
        top_facts=top,
        answer=answer,
    )


def evaluate(
    models: PipelineModels,
    kb: KnowledgeBase,
    instances: Sequence[QAInstance],
    store: FeatureStore,
    k: int = 3,
    oracle_relation: bool = False,
    oracle_source: bool = False,
    tie_break: str = "id",
    rng: np.random.Generator | None = None,
    normalize_answers: bool = True,
) -> tuple[Metrics, list[Prediction]]:
    """Score a dataset fold and return per-question predictions.

    Relation and source predictions run batched; ranking uses the exact
    per-candidate cosine path. With the default deterministic tie-break the
    whole evaluation is a pure function of its inputs. Oracle switches feed
    the groundtruth relation and/or source through the pipeline instead of
    the classifier predictions.

    Top-3 answer accuracy derives one answer from each of the top three
    facts using the single predicted source.
    """
    if not instances:
        raise UsageError("evaluate needs at least one instance")
    questions = [i.question for i in instances]
    if oracle_relation:
        relation_orders = [[RELATIONS.index(i.relation)] for i in instances]
        relation_probs = None
    else:
        if models.relation is None:
            raise UsageError("no relation classifier loaded; use oracle_relation=True")
        relation_probs = predict_relation_batch(models.relation, questions)
        relation_orders = [
            sorted(range(len(RELATIONS)), key=lambda j: (-relation_probs[i, j], j))
            for i in range(len(instances))
        ]
    if oracle_source:
        sources = [i.source for i in instances]
        source_probs = [1.0] * len(instances)
    else:
        if models.source is None:
            raise UsageError("no source classifier loaded; use oracle_source=True")
        source_probs = predict_source_batch(models.source, questions)
        sources = [
            AnswerSource.IMAGE if p >= 0.5 else AnswerSource.KNOWLEDGE_BASE for p in source_probs
        ]

    feats, cons = store.stack([i.image_id for i in instances])
    iq_mat = embed_batch(models.scorer, feats, cons, questions)

    predictions: list[Prediction] = []
    ans1 = ans3 = fact1 = fact3 = rel1 = rel3 = src = no_fact = 0
    for idx, inst in enumerate(instances):
        order = relation_orders[idx]
        relation_hat = RELATIONS[order[0]]
        ranked_rel = [
            (RELATIONS[j], 1.0 if relation_probs is None else float(relation_probs[idx, j]))
            for j in order[:3]
        ]
        if inst.relation in (r for r, _ in ranked_rel[:1]):
            rel1 += 1
        if inst.relation in (r for r, _ in ranked_rel[:3]):
            rel3 += 1
        if sources[idx] is inst.source:
            src += 1
        pool = kb.ids_with_relation(relation_hat)
        if not pool:
            no_fact += 1
            predictions.append(
                Prediction(
                    question_id=inst.question_id,
                    image_id=inst.image_id,
                    status="no_fact",
                    relation=relation_hat,
                    relation_probs=ranked_rel,
                    source=sources[idx],
                    source_prob=float(source_probs[idx]),
                    top_facts=[],
                    answer=None,
                )
            )
            continue
        top = rank_candidates(iq_mat[idx], pool, models.fact_matrix, k, tie_break, rng)
        answers = [extract_answer(kb.fact(fid), sources[idx]) for fid, _ in top[:3]]
        if top[0][0] == inst.fact_id:
            fact1 += 1
        if inst.fact_id in [fid for fid, _ in top[:3]]:
            fact3 += 1
        if answers and answers_match(answers[0], inst.answer, normalize_answers):
            ans1 += 1
        if any(answers_match(a, inst.answer, normalize_answers) for a in answers):
            ans3 += 1
        predictions.append(
            Prediction(
                question_id=inst.question_id,
                image_id=inst.image_id,
                status="ok",
                relation=relation_hat,
                relation_probs=ranked_rel,
                source=sources[idx],
                source_prob=float(source_probs[idx]),
                top_facts=top,
                answer=answers[0] if answers else None,
            )
        )
    n = len(instances)
    metrics = Metrics(
        answer_at1=ans1 / n,
        answer_at3=ans3 / n,
        fact_at1=fact1 / n,
        fact_at3=fact3 / n,
        relation_at1=rel1 / n,
        relation_at3=rel3 / n,
        source_acc=src / n,
        count=n,
        no_fact_count=no_fact,
    )
    return metrics, predictions


def ablate(
    models: PipelineModels,
    kb: KnowledgeBase,
    instances: Sequence[QAInstance],
    store: FeatureStore,
    variant,
    **kwargs,
) -> tuple[Metrics, list[Prediction]]:
    """Evaluate with the scorer's input masking forced to ``variant``.

    The scorer should normally have been trained with the same variant;
    this override exists for masking-behaviour checks.
    """
    from dataclasses import replace

    swapped = PipelineModels(
        scorer=replace(models.scorer, variant=variant),
        fact_matrix=models.fact_matrix,
        relation=models.relation,
        source=models.source,
    )
    return evaluate(swapped, kb, instances, store, **kwargs)


def average_metrics(per_fold: dict[int, Metrics]) -> dict:
    """Mean of every metric field across folds."""
    if not per_fold:
        raise UsageError("no fold metrics to average")
    keys = ["answer_at1", "answer_at3", "fact_at1", "fact_at3", "relation_at1", "relation_at3", "source_acc"]
    out = {k: float(np.mean([getattr(m, k) for m in per_fold.values()])) for k in keys}
    out["count"] = int(sum(m.count for m in per_fold.values()))
    out["no_fact_count"] = int(sum(m.no_fact_count for m in per_fold.values()))
    return out
