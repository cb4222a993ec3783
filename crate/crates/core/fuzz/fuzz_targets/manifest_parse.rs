#![no_main]

use continual_anomaly::tensor_store::ManifestDoc;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = ManifestDoc::from_json(data) {
        let text = serde_json::to_vec(&doc).unwrap();
        assert_eq!(ManifestDoc::from_json(&text).unwrap(), doc);
        let _ = doc.resolve(std::path::Path::new("base"));
    }
});
