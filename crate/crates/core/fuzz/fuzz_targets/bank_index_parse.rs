#![no_main]

use continual_anomaly::tensor_store::BankIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(index) = BankIndex::from_json(data) {
        let text = serde_json::to_vec(&index).unwrap();
        assert_eq!(BankIndex::from_json(&text).unwrap(), index);
    }
});
