"""Smoke test for the mmtl_py extension module."""

import json
import random
import tempfile
from pathlib import Path

import mmtl_py

NOUNS = ["dog", "cat", "bird", "child"]
VERBS = ["sees", "likes", "finds"]


def sentence(rng):
    return f"the {rng.choice(NOUNS)} {rng.choice(VERBS)} the {rng.choice(NOUNS)}"


def main():
    rng = random.Random(0)
    records = []
    for i in range(60):
        words = sentence(rng).split()
        if i % 2:
            rng.shuffle(words)
        records.append((" ".join(words), 1 - i % 2))

    vocab = mmtl_py.Vocabulary.build([t for t, _ in records], 64)
    assert len(vocab) > 5
    ids = vocab.encode("the dog sees the cat", 12)
    assert len(ids) == 12

    model = mmtl_py.Model(len(vocab), num_layers=1, hidden_size=8, num_heads=2, ff_size=16, max_positions=12, seed=1)
    before = model.parameter_count()
    model.prune_heads(0, [1])
    assert model.kept_heads(0) == [0]
    assert model.parameter_count() < before

    config = json.dumps({"epochs": 1, "batch_size": 8, "validations_per_epoch": 2, "max_len": 12, "k": 2,
                         "learning_rate": 1e-3, "prune_heads": []})
    tuned, log = mmtl_py.finetune(model, vocab, records, config)
    events = [json.loads(line) for line in log.splitlines()]
    assert any(e["event"] == "selection" for e in events)
    final = [e for e in events if e["event"] == "final"][0]

    again, log2 = mmtl_py.finetune(model, vocab, records, config)
    assert tuned.to_bytes() == again.to_bytes()

    report = tuned.evaluate(vocab, records, 12)
    assert report["tp"] + report["fp"] + report["tn"] + report["fn"] == len(records)
    probs = tuned.predict_proba(vocab, ["the dog sees the cat"], 12)
    assert abs(sum(probs[0]) - 1.0) < 1e-12

    m = mmtl_py.metrics([1, 0, 1, 1], [0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
    assert m["accuracy"] == 0.75
    assert mmtl_py.roc_auc([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1]) == 0.75

    with tempfile.TemporaryDirectory() as d:
        kb = mmtl_py.KnowledgeBase(str(Path(d) / "kb.jsonl"))
        new_ids = kb.ingest(tuned, vocab, ["the cat finds the bird", "bird the finds cat"], max_len=12)
        assert new_ids == [1, 2]
        assert len(kb) == 2
        hits = kb.query(keyword="CAT", limit=1)
        assert [h["id"] for h in hits] == [2]
        assert hits[0]["label_name"] in ("acceptable", "unacceptable")

    print(f"smoke test ok: validation accuracy {final['metrics']['accuracy']:.3f}")


if __name__ == "__main__":
    main()
