#![no_main]

use continual_anomaly::backbone::TapSidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = TapSidecar::from_json(data) {
        assert_eq!(TapSidecar::from_json(s.to_json().as_bytes()).unwrap(), s);
    }
});
