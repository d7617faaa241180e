"""Exercises the Python bindings end to end on tiny synthetic data."""

import csv
import json
import os
import tempfile

import moetune

TINY = {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "n_experts": 4, "top_k": 2, "max_seq_len": 256}


def write_alpaca(path, n):
    rows = [{"instruction": f"q{i}", "input": "", "output": f"answer {7 * i}"} for i in range(n)]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, ensure_ascii=False)


def write_benchmark(root):
    for split, n in (("dev", 5), ("test", 4)):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        with open(os.path.join(root, split, f"math_{split}.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["id", "question", "A", "B", "C", "D", "answer"])
            for i in range(n):
                w.writerow([i, f"{i} + 1 = ?", i + 1, i + 2, i + 3, i + 4, "ABCD"[i % 4]])


def main():
    assert moetune.decode(moetune.encode("你好")) == "你好"

    rows = [[0.5, -1.0, 0.25, 2.0], [1.0, 0.0, -0.5, 0.75]]
    back, nbytes = moetune.quantize_roundtrip(rows, 4)
    assert len(back) == 2 and nbytes > 0
    assert all(abs(a - b) <= 2.0 / 7 for r, s in zip(rows, back) for a, b in zip(r, s))

    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "alpaca.json")
        corpus = os.path.join(tmp, "corpus.jsonl")
        write_alpaca(src, 12)
        stats = moetune.prepare_data(corpus, alpaca=src)
        assert stats["total"] == 12 and stats["single_round"] == 12
        assert moetune.dataset_stats(corpus)["total"] == 12

        model = moetune.Model(json.dumps(TINY), seed=1)
        total, active = model.count_params()
        assert active < total
        logits = model.logits([257, 104, 105])
        assert len(logits) == 3 and len(logits[0]) == moetune.VOCAB_SIZE

        model.attach_lora(json.dumps({"rank": 4, "alpha": 8.0, "dropout": 0.0}))
        dense = model.projection_bytes()
        model.quantize(16)
        assert model.projection_bytes() < dense
        report = model.parameter_report()
        assert 0 < report["trainable"] < report["frozen"]

        before = model.loss([("q1", "answer 7")])
        train_cfg = {"epochs": 3, "lr": 1e-2, "batch_size": 4, "warmup_steps": 0, "save_every": 1000}
        losses = moetune.train(model, corpus, json.dumps(train_cfg), os.path.join(tmp, "run"))
        assert len(losses) == 9
        assert os.path.exists(os.path.join(tmp, "run", "final.aurc"))
        assert model.loss([("q1", "answer 7")]) < before

        reply = model.chat("q1", max_new=8)
        assert isinstance(reply, str)

        model.merge_lora()
        path = os.path.join(tmp, "merged.aurc")
        model.save(path)
        again = moetune.Model.load(path)
        assert again.logits([257, 104]) == model.logits([257, 104])

        bench = os.path.join(tmp, "bench")
        write_benchmark(bench)
        oracle = moetune.evaluate("oracle:", "custom", bench, shots=2)
        assert oracle["micro_accuracy"] == 1.0 and oracle["total"] == 4
        real = moetune.evaluate(again, "custom", bench, shots=2)
        assert real["total"] == 4

    print("python smoke test passed")


if __name__ == "__main__":
    main()
