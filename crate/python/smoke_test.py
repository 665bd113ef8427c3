"""Smoke test for the `aqa` extension module.

Build and run from the repository root:

    cargo build -p aqa-py --release
    cp target/release/libaqa.so python/aqa.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import aqa  # noqa: E402


def main() -> None:
    corpus, answers = aqa.generate_toy_suite(seed=3, samples_per_dataset=40, keys_per_slot=8)
    assert len(corpus.dataset_names()) == 4, corpus
    assert len(corpus) == 160
    assert all(v is None for v in corpus.labels().values())
    truth = aqa.toy_ground_truth(seed=3, samples_per_dataset=40, keys_per_slot=8)
    assert sorted(truth) == sorted(corpus.dataset_names())

    prompt = aqa.render_prompt("what is shown?")
    assert "what is shown?" in prompt
    raw = aqa.mock_teacher(prompt, "red")
    assert aqa.extract_answer(raw) == "red"
    try:
        aqa.extract_answer("no tags here")
        raise AssertionError("expected ValueError")
    except ValueError:
        pass

    synth, failures = corpus.synthesize_mock(answers)
    assert failures == 0, failures

    u = [1.0, 0.0]
    v = [0.0, 1.0]
    loss = aqa.contrastive_loss([u], [u], [[v]], 0.5)
    expect = -math.log(math.exp(2.0) / (math.exp(2.0) + math.exp(0.0)))
    assert abs(loss - expect) < 1e-9, (loss, expect)
    logits = [[0.0] * 512, [0.0] * 512]
    assert abs(aqa.generation_loss(logits, [aqa.EMBED, aqa.EOS]) - 2 * math.log(512)) < 1e-9

    divided = synth.apply_labels({name: name in ("toy_a0_image", "toy_a1_interleaved") for name in synth.dataset_names()})
    train, held = divided.split_holdout(0.2)
    model, losses = aqa.train(train, mode="adaptive", epochs=1, seed=3)
    assert losses and all(math.isfinite(x) for x in losses)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        model = aqa.Model.load(path)
        cpath = os.path.join(tmp, "corpus.jsonl")
        held.save(cpath)
        assert aqa.Corpus.load(cpath).num_samples() == held.num_samples()

    vec, trace = model.embed([20, 21, 22], mode="force-embed")
    assert abs(math.sqrt(sum(x * x for x in vec)) - 1.0) < 1e-9
    assert len(vec) == model.hidden_dim
    assert trace["token_count"] == 1, trace

    report = model.evaluate(held, mode="adaptive")
    assert len(report["datasets"]) == 4, report
    print("aqa smoke test OK:", {d["name"]: d["p_at_1"] for d in report["datasets"]})


if __name__ == "__main__":
    main()
