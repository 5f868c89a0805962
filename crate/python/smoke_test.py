"""Smoke test for the nestery Python module.

Build the module first:

    cargo build -p nestery-py --release --features extension-module
    cp target/release/libnestery.so python/nestery.so
    python3 python/smoke_test.py
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import nestery  # noqa: E402


def main():
    cloud = nestery.Cloud(nestery.ResourceVector(16, 1024, 32768, 500, 8))
    l1 = cloud.launch("cloud-vm", nestery.ResourceVector(8, 512, 16384, 200, 2))
    l2 = cloud.launch("app", nestery.ResourceVector(2, 256, 2048, 20, 1), level=2, host=l1)
    status = cloud.status()
    assert status["hosts"][0]["vms"][0]["state"] == "RUNNING"
    assert status["hosts"][0]["vms"][0]["host"]["vms"][0]["uuid"] == l2

    try:
        cloud.rescale(l2, nestery.ResourceVector(99, 256, 2048, 20, 1))
    except nestery.NesteryError as e:
        code, detail = e.args
        assert code == "AdmissionDenied", code
        print("rescale denied:", detail)
    else:
        raise AssertionError("rescale beyond the L1 host was accepted")

    vol = cloud.create_volume(250)["output"]
    cloud.attach_volume(vol["volume_id"], l1)
    cloud.snapshot(l1, vol["volume_id"])
    cloud.check_invariants()

    cloud.become_provider("alice", "Acme", "DE123", l1, bank_account="DE00 1234")
    offer = cloud.register_offer("alice", 0.5, 5.0, 1.0, resources=nestery.ResourceVector(2, 128, 1024, 10, 1))
    contract = cloud.negotiate("bob", offer["offer_id"])
    assert contract["state"] == "ACTIVE"
    cloud.advance(3 * 3600)
    ledger = cloud.ledger("alice")
    assert ledger["cumulative_income"] == 3.0, ledger
    cloud.check_invariants()

    assert abs(nestery.overhead_pct(0.082, 0.096) - 17.07) < 0.01
    assert abs(nestery.overhead_pct(0.082, 0.125) - 52.44) < 0.01
    stats = nestery.compute_stats([0.1, 0.2, 0.3, 0.4, 0.5])
    assert stats["p80"] == 0.4 and stats["p90"] == 0.5

    doc = nestery.serialize_definition(l1, "cloud-vm", nestery.ResourceVector(8, 512, 16384, 200, 2), "img")
    assert nestery.parse_definition(doc)["name"] == "cloud-vm"

    summary = nestery.run_bench(seed=1, period_s=60)
    print("bench L0 avg %.4f, L1 overhead %.2f %%" % (summary["L0"]["avg"], summary["overheads"]["l1_over_l0"]))
    print("smoke test passed")


if __name__ == "__main__":
    main()
