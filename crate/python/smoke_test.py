"""Smoke test for the qdistill_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/qdistill-*.whl
then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import qdistill_py as q


def main():
    fixture = q.Fixture({
        "teacher": {"dim": 16, "num_topics": 8, "num_docs": 64, "num_queries": 320, "noise_sigma": 0.0},
        "held_out": 32,
    })
    print(f"fixture: {len(fixture.train_records)} train, {len(fixture.test_records)} test, "
          f"{fixture.doc_cache!r}")

    run = {
        "encoder": {"output_dim": 16, "hidden_dim": 32, "projector_dim": 32},
        "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "peak_lr": 3e-2,
        "epochs": 20,
        "batch_size": 29,
        "grad_accum": 1,
    }
    result = fixture.train(run)
    ev = fixture.evaluate(result.encoder)
    print(f"trained: {result.updates} updates, val loss {result.val_loss:.4f}, "
          f"retention {ev['retention']:.1f}%")
    assert ev["retention"] > 80.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "student.nvck")
        result.save_checkpoint(path)
        enc = q.StudentEncoder.from_checkpoint(path)
        v = enc.encode("what was the revenue in march")
        assert abs(math.fsum(x * x for x in v) - 1.0) < 1e-9

    loss, grad = q.align_loss([1.0, 0.0], [0.0, 1.0])
    assert abs(loss - 1.0) < 1e-12 and len(grad) == 2

    plan = q.estimate_precache_cost(711603, 1_000_000, "rank")
    print(f"rank pre-cache: {plan['total_gb']:.2f} GB, document cache needed: {plan['needs_document_cache']}")

    try:
        fixture.train(dict(run, batch_size=0))
    except q.QdistillError as e:
        print(f"rejected as expected: {e}")
    else:
        raise AssertionError("invalid config accepted")

    print("ok")


if __name__ == "__main__":
    main()
