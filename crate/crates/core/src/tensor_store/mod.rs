//! On-disk formats: MTNS tensors, dataset manifests, and memory-bank directories.

mod bank_io;
mod manifest;
mod tensor;

pub use bank_io::{load_bank, save_bank, BankIndex, BankTaskRecord, BANK_FORMAT_VERSION, INDEX_FILE};
pub use manifest::{
    load_manifest, DatasetManifest, ManifestDoc, TaskDoc, TaskSpec, TestItem, TestItemDoc, TrainItem,
    TrainItemDoc,
};
pub use tensor::{read_tensor, write_tensor, DType, Payload, TensorFile, MAGIC, MAX_RANK, VERSION};
