#![no_main]

use continual_anomaly::tensor_store::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TensorFile::decode(data) {
        let bytes = t.encode();
        assert_eq!(bytes.as_slice(), data);
        assert_eq!(TensorFile::decode(&bytes).unwrap(), t);
    }
});
