"""Smoke test for the gmem extension module.

Build and run:
    maturin develop -m crates/python/Cargo.toml
    python crates/python/python/smoke_test.py
"""

import hashlib

import gmem


def check_helpers():
    assert gmem.content_hash("abc") == hashlib.sha256(b"abc").hexdigest()
    assert gmem.content_hash("x" * 1500) == gmem.content_hash("x" * 1000)
    assert gmem.estimate_tokens("abcdefghi") == 3
    assert gmem.luhn_valid("4111 1111 1111 1111")
    assert not gmem.luhn_valid("4111 1111 1111 1112")
    try:
        gmem.luhn_valid("12")
    except ValueError:
        pass
    else:
        raise AssertionError("short input accepted")
    out = gmem.redact("Reach me at jane.doe@example.com")
    assert "jane.doe@example.com" not in out["text"], out
    assert out["audits"], out


def check_engine():
    script = [
        {
            "kind": "dualExtract",
            "contains": "Brightwater",
            "response": {
                "facts": [
                    {"text": "Brightwater Dental renews every March."},
                    {"text": "Dana Whitfield approves purchases at Brightwater Dental."},
                ],
                "properties": [],
            },
        }
    ]
    engine = gmem.Engine(script=script)
    report = engine.memorize(
        {"orgId": "acme", "content": "Call with Brightwater Dental.", "crmKeys": {"recordId": "deal-7"}}
    )
    assert report["storedFacts"] == 2, report
    found = engine.retrieve({"orgId": "acme", "query": "who approves purchases", "k": 1})
    assert found["results"][0]["entry"]["text"].startswith("Dana Whitfield"), found
    assert engine.retrieve({"orgId": "globex", "query": "purchases"})["results"] == []
    ctx = engine.entity_context("acme", {"recordId": "deal-7"}, 500)
    assert len(ctx["includedMemoryIds"]) == 2, ctx
    assert engine.health()["config"]["writeDedupThreshold"] == 0.92

    engine.put_variable({"id": "tone", "orgId": "acme", "name": "Tone", "content": "Be brief."})
    assert [v["id"] for v in engine.variables("acme")] == ["tone"]
    routed = engine.govern("acme", "write a brief reply", mode="fast")
    assert "routed" in routed, routed

    try:
        gmem.Engine().memorize({"orgId": "acme", "content": "x"})
    except gmem.GmemError as e:
        assert e.args[0] == "unavailable", e.args
    else:
        raise AssertionError("memorize without a provider succeeded")


def check_experiment():
    report = gmem.run_experiment("e6")
    assert report["experiment"] == "e6" and report["pass"], report["metrics"]


if __name__ == "__main__":
    check_helpers()
    check_engine()
    check_experiment()
    print("smoke test passed")
