use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let m = PyModule::new(py, "ctxcodec").unwrap();
        ctxcodec_py::ctxcodec_module(&m).unwrap();
        let locals = PyDict::new(py);
        locals.set_item("ctxcodec", m).unwrap();
        if let Err(e) = py.run(code, None, Some(&locals)) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn encode_decode_round_trip_from_python() {
    with_module(
        c"
cfg = ctxcodec.CodecConfig(preset='J', tiny=True, seed=3)
codec = ctxcodec.VideoCodec(cfg)
frames = ctxcodec.synth_clip('translate', seed=1, frames=3)
data, recon = codec.encode(frames, intra_period=8)
out = codec.decode(data)
assert len(out) == 3
assert all(a.data == b.data for a, b in zip(out, recon))
assert ctxcodec.psnr(frames[0], frames[0]) == float('inf')
assert codec.config_hash == cfg.hash()
",
    );
}

#[test]
fn metrics_and_errors_from_python() {
    with_module(
        c"
a = ctxcodec.Frame.filled(16, 16, 0.5)
b = ctxcodec.Frame.filled(16, 16, 0.6)
assert abs(ctxcodec.psnr(a, b) - 20.0) < 1e-4
curve = [(0.1, 30.0), (0.2, 32.0), (0.4, 34.0), (0.8, 36.0)]
assert ctxcodec.bd_rate(curve, curve) == 0.0
assert abs(ctxcodec.bd_rate(curve, [(2 * r, q) for r, q in curve]) - 100.0) < 1e-9
try:
    ctxcodec.CodecConfig(preset='Z')
    raise AssertionError('unknown preset accepted')
except ValueError:
    pass
",
    );
}
