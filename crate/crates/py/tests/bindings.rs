use pyo3::prelude::*;

use nestery::nestery;

const SCRIPT: &std::ffi::CStr = cr#"
import nestery

cloud = nestery.Cloud(nestery.ResourceVector(8, 1024, 16384, 200, 4))
vm = cloud.launch("web", nestery.ResourceVector(2), uuid="00000000-0000-4000-8000-000000000001")
assert vm == "00000000-0000-4000-8000-000000000001"
assert cloud.status()["hosts"][0]["free"]["cpu_cores"] == 6

try:
    cloud.rescale(vm, nestery.ResourceVector(99))
    raise SystemExit("rescale should fail")
except nestery.NesteryError as e:
    assert e.args[0] == "AdmissionDenied"

# same key twice applies once
cloud.stop(vm, key="k")
assert cloud.start(vm, key="k")["result"] == "skipped"
assert cloud.status()["hosts"][0]["vms"][0]["state"] == "STOPPED"

cloud.schedule("batch", nestery.ResourceVector(1), start_time=10, duration_s=5)
cloud.advance(10)
assert cloud.status()["allocations"][0]["state"] == "ACTIVE"
cloud.advance(5)
assert cloud.status()["allocations"][0]["state"] == "COMPLETED"
cloud.check_invariants()

assert abs(nestery.overhead_pct(0.082, 0.096) - 17.07) < 0.01
r = nestery.ResourceVector(2, 512, 1024, 10, 1)
assert r.fits_within(nestery.ResourceVector(4, 1024, 2048, 20, 2))
doc = nestery.serialize_definition(vm, "web", r, "img")
assert nestery.parse_definition(doc)["resources"]["ram_mib"] == 1024
"#;

#[test]
fn python_module_round_trip() {
    pyo3::append_to_inittab!(nestery);
    Python::attach(|py| {
        if let Err(e) = py.run(SCRIPT, None, None) {
            e.display(py);
            panic!("python script failed: {e}");
        }
    });
}
