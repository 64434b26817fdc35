#!/usr/bin/env python3
"""Smoke test for the memescope_py extension module.

Build the module first:

    cargo build --release -p memescope-py

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    candidates = [
        os.path.join(ROOT, "target", "release", "libmemescope_py.so"),
        os.path.join(ROOT, "target", "debug", "libmemescope_py.so"),
        os.path.join(ROOT, "target", "release", "libmemescope_py.dylib"),
        os.path.join(ROOT, "target", "debug", "libmemescope_py.dylib"),
    ]
    built = next((c for c in candidates if os.path.exists(c)), None)
    if built is None:
        sys.exit("extension not built; run: cargo build --release -p memescope-py")
    stage = tempfile.mkdtemp(prefix="memescope_py_")
    shutil.copy(built, os.path.join(stage, "memescope_py.so"))
    sys.path.insert(0, stage)
    import memescope_py

    return memescope_py


def main():
    ms = import_extension()
    print(f"loaded memescope_py {ms.__version__}")

    # Numeric primitives.
    probs = ms.softmax_row([1.0, 2.0, 3.0], 1.0)
    assert abs(sum(probs) - 1.0) < 1e-9, probs
    assert ms.cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    print("numerics ok")

    corpus = os.path.join(ROOT, "crates", "core", "fixtures", "corpus", "toy_corpus.jsonl")
    kb = os.path.join(ROOT, "crates", "core", "fixtures", "kb")

    # Small, fast training configuration; the full-scale run lives in the
    # Rust acceptance suite.
    config = json.dumps({"dim": 16, "n_heads": 4, "rank": 4, "epochs": 1, "seed": 11})
    pipe = ms.Pipeline.train(corpus, kb, config)
    print(f"trained pipeline against kb {pipe.kb_hash[:12]}...")

    pepe = {
        "id": "pepe_welcome",
        "text_tokens": ["welcome", "to", "our", "neighborhood"],
        "image_tags": ["pepe_the_frog"],
        "label": 1,
        "task": "hatefulness",
    }
    pred = json.loads(pipe.predict(json.dumps(pepe)))
    assert pred["id"] == "pepe_welcome" and 0.0 < pred["p_hat"] < 1.0, pred
    print(f"predict ok: p_hat={pred['p_hat']:.4f} label={pred['label']}")

    expl = json.loads(pipe.explain(json.dumps(pepe)))
    assert expl["chain"], expl
    if expl["label"] == 1:
        assert expl["explanation"].startswith(
            "Detected pepe the frog symbol linked to alt-right groups"
        ), expl["explanation"]
    print(f"explain ok: {expl['explanation']}")

    score = ms.eps(expl["explanation"], "detected pepe the frog symbol linked to alt-right groups")
    assert 0.0 <= score <= 1.0
    print(f"eps ok: {score:.4f}")

    # Checkpoint round trip.
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "smoke.ckpt")
        pipe.save(ckpt)
        reloaded = ms.Pipeline.load(ckpt, kb)
        again = json.loads(reloaded.predict(json.dumps(pepe)))
        assert again == pred, (again, pred)
    print("checkpoint round trip ok")

    # Perturbations.
    masked = json.loads(ms.perturb(json.dumps(pepe), "text_masking", 3))
    assert masked["text_tokens"].count("[MASK]") == 1, masked
    swapped = json.loads(ms.perturb(json.dumps(pepe), "symbol_substitution", 0, kb))
    assert swapped["image_tags"] == ["kermit_the_frog"], swapped
    print("perturb ok")

    # Demonstration retrieval.
    demos = json.loads(pipe.retrieve_demos(json.dumps(pepe), corpus, 3))
    assert len(demos) == 3 and all("id" in d and "score" in d for d in demos)
    print("retrieve_demos ok")

    print("SMOKE TEST PASSED")


if __name__ == "__main__":
    main()
