//! Memory-bank directories.
//!
//! ```text
//! bank/
//!   index.json
//!   task_000/keys.mtns knowledge.mtns prompt.mtns learnable_key.mtns text.mtns
//!            prefix_weights.mtns fusion_t2i.mtns fusion_i2t.mtns
//! ```
//!
//! `prompt.mtns` is rank 3 `[2, L, D]` (keys then values) and is omitted when
//! the prompt is empty. Weight files are rank 3 `[3, D, D]` (query, key, value).

use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::tensor::{read_tensor, write_tensor, TensorFile};
use crate::attention::{AttentionWeights, PromptParams};
use crate::error::{Error, Result};
use crate::memory_bank::{BankConfig, MemoryBank, TaskMemoryEntry};
use crate::numerics::Matrix;
use crate::objectives::Trainables;

pub const BANK_FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankIndex {
    pub format_version: u32,
    pub dim: usize,
    pub config: BankConfig,
    pub tasks: Vec<BankTaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankTaskRecord {
    pub task_id: usize,
    pub name: String,
    /// Subdirectory relative to the bank root.
    pub dir: String,
    pub prompt_length: usize,
    pub prefix_heads: usize,
    pub fusion_heads: usize,
}

impl BankIndex {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let index: BankIndex = serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != BANK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported bank format version {}",
                self.format_version
            )));
        }
        if self.dim == 0 {
            return Err(Error::Validation("bank dim is 0".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(Error::Validation(format!(
                    "task ids are not contiguous: position {i} holds id {}",
                    t.task_id
                )));
            }
            let mut parts = Path::new(&t.dir).components();
            if !matches!((parts.next(), parts.next()), (Some(Component::Normal(_)), None)) {
                return Err(Error::Validation(format!(
                    "task dir {:?} is not a plain name",
                    t.dir
                )));
            }
            for heads in [t.prefix_heads, t.fusion_heads] {
                if heads == 0 || self.dim % heads != 0 {
                    return Err(Error::Validation(format!(
                        "task {:?}: {heads} heads do not divide dim {}",
                        t.name, self.dim
                    )));
                }
            }
        }
        Ok(())
    }
}

fn stack_f32(mats: &[&Matrix]) -> Result<TensorFile> {
    let (r, c) = mats[0].shape();
    let values = mats
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f32))
        .collect();
    TensorFile::f32(vec![mats.len(), r, c], values)
}

fn unstack(t: &TensorFile, count: usize, rows: usize, cols: usize) -> Result<Vec<Matrix>> {
    if t.dims() != [count, rows, cols] {
        return Err(Error::shape(format!(
            "expected dims {:?}, found {:?}",
            [count, rows, cols],
            t.dims()
        )));
    }
    let data = t.as_f32()?;
    let slab = rows * cols;
    (0..count)
        .map(|i| {
            Matrix::new(
                rows,
                cols,
                data[i * slab..(i + 1) * slab].iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

fn weights_tensor(w: &AttentionWeights) -> Result<TensorFile> {
    stack_f32(&w.matrices())
}

fn weights_from(t: &TensorFile, dim: usize, heads: usize) -> Result<AttentionWeights> {
    let mut m = unstack(t, 3, dim, dim)?.into_iter();
    let (q, k, v) = (m.next().unwrap(), m.next().unwrap(), m.next().unwrap());
    AttentionWeights::new(q, k, v, heads)
}

fn task_dir_name(task_id: usize) -> String {
    format!("task_{task_id:03}")
}

/// Write the bank as a directory; existing files with the same names are replaced.
pub fn save_bank(bank: &MemoryBank, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::with_capacity(bank.len());
    for e in bank.entries() {
        let name = task_dir_name(e.task_id);
        let tdir = dir.join(&name);
        fs::create_dir_all(&tdir).map_err(|err| Error::io(&tdir, err))?;
        write_tensor(tdir.join("keys.mtns"), &TensorFile::from_matrix(&e.keys)?)?;
        write_tensor(
            tdir.join("knowledge.mtns"),
            &TensorFile::from_matrix(&e.knowledge)?,
        )?;
        let prompt_path = tdir.join("prompt.mtns");
        if e.prompt().length() > 0 {
            write_tensor(
                &prompt_path,
                &stack_f32(&[&e.prompt().p_key, &e.prompt().p_value])?,
            )?;
        } else if prompt_path.exists() {
            fs::remove_file(&prompt_path).map_err(|err| Error::io(&prompt_path, err))?;
        }
        write_tensor(
            tdir.join("learnable_key.mtns"),
            &TensorFile::from_vector(e.learnable_key())?,
        )?;
        write_tensor(tdir.join("text.mtns"), &TensorFile::from_vector(&e.text)?)?;
        write_tensor(
            tdir.join("prefix_weights.mtns"),
            &weights_tensor(&e.prefix_weights)?,
        )?;
        write_tensor(
            tdir.join("fusion_t2i.mtns"),
            &weights_tensor(&e.params.fusion_t2i)?,
        )?;
        write_tensor(
            tdir.join("fusion_i2t.mtns"),
            &weights_tensor(&e.params.fusion_i2t)?,
        )?;
        if e.params.fusion_t2i.head_count != e.params.fusion_i2t.head_count {
            return Err(Error::Validation(
                "fusion blocks use different head counts".into(),
            ));
        }
        tasks.push(BankTaskRecord {
            task_id: e.task_id,
            name: e.name.clone(),
            dir: name,
            prompt_length: e.prompt().length(),
            prefix_heads: e.prefix_weights.head_count,
            fusion_heads: e.params.fusion_t2i.head_count,
        });
    }
    let index = BankIndex {
        format_version: BANK_FORMAT_VERSION,
        dim: bank.dim(),
        config: bank.config().clone(),
        tasks,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_bank(dir: impl AsRef<Path>) -> Result<MemoryBank> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index = BankIndex::from_json(&bytes)?;
    let d = index.dim;
    let mut bank = MemoryBank::new(d, index.config.clone());
    for rec in &index.tasks {
        let tdir = dir.join(&rec.dir);
        let read = |name: &str| {
            let p = tdir.join(name);
            if !p.is_file() {
                return Err(Error::Reference(p));
            }
            read_tensor(p)
        };
        let prompt = if rec.prompt_length > 0 {
            let mut kv = unstack(&read("prompt.mtns")?, 2, rec.prompt_length, d)?.into_iter();
            PromptParams::new(kv.next().unwrap(), kv.next().unwrap())?
        } else {
            PromptParams::empty(d)
        };
        let entry = TaskMemoryEntry {
            task_id: rec.task_id,
            name: rec.name.clone(),
            keys: read("keys.mtns")?.to_matrix()?,
            knowledge: read("knowledge.mtns")?.to_matrix()?,
            params: Trainables {
                prompt,
                fusion_t2i: weights_from(&read("fusion_t2i.mtns")?, d, rec.fusion_heads)?,
                fusion_i2t: weights_from(&read("fusion_i2t.mtns")?, d, rec.fusion_heads)?,
                learnable_key: read("learnable_key.mtns")?.to_vector()?,
            },
            prefix_weights: weights_from(&read("prefix_weights.mtns")?, d, rec.prefix_heads)?,
            text: read("text.mtns")?.to_vector()?,
        };
        bank.push(entry)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_bank::{build_entry, route, EntryParts};
    use crate::numerics::Vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sample_bank(prompt_len: usize) -> MemoryBank {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let mut bank = MemoryBank::new(d, BankConfig::default());
        for t in 0..2 {
            let params = Trainables {
                prompt: PromptParams::new(
                    random_matrix(&mut rng, prompt_len, d),
                    random_matrix(&mut rng, prompt_len, d),
                )
                .unwrap(),
                fusion_t2i: AttentionWeights::new(
                    random_matrix(&mut rng, d, d),
                    random_matrix(&mut rng, d, d),
                    random_matrix(&mut rng, d, d),
                    2,
                )
                .unwrap(),
                fusion_i2t: AttentionWeights::identity(d, 2).unwrap(),
                learnable_key: Vector::new(vec![0.3, -0.1, 0.7, 0.2]).unwrap(),
            };
            let entry = build_entry(EntryParts {
                name: format!("task{t}"),
                key_feats: random_matrix(&mut rng, 20, d),
                fused_feats: random_matrix(&mut rng, 30, d),
                params,
                prefix_weights: AttentionWeights::identity(d, 1).unwrap(),
                text: Vector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
                key_ratio: 0.2,
                coreset_ratio: 0.5,
                fps_start: 0,
            })
            .unwrap();
            bank.push(entry).unwrap();
        }
        bank
    }

    #[test]
    fn round_trip_is_exact() {
        for prompt_len in [0, 3] {
            let bank = sample_bank(prompt_len);
            let dir = tempfile::tempdir().unwrap();
            save_bank(&bank, dir.path()).unwrap();
            assert_eq!(dir.path().join("task_000/prompt.mtns").exists(), prompt_len > 0);
            let back = load_bank(dir.path()).unwrap();
            assert_eq!(back, bank);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..10 {
                let q = random_matrix(&mut rng, 5, 4);
                assert_eq!(route(&q, &bank).unwrap(), route(&q, &back).unwrap());
            }
        }
    }

    #[test]
    fn empty_bank_round_trip() {
        let bank = MemoryBank::new(4, BankConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let back = load_bank(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, bank);
    }

    #[test]
    fn index_schema_checks() {
        let bank = sample_bank(2);
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        let index = BankIndex::from_json(text.as_bytes()).unwrap();
        assert_eq!(index.tasks.len(), 2);
        assert_eq!(index.tasks[1].dir, "task_001");

        let bad_version = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            BankIndex::from_json(bad_version.as_bytes()),
            Err(Error::Format(_))
        ));
        let escape = text.replace("\"task_001\"", "\"../x\"");
        assert!(matches!(
            BankIndex::from_json(escape.as_bytes()),
            Err(Error::Validation(_))
        ));
        let gap = text.replace("\"task_id\": 1", "\"task_id\": 5");
        assert!(matches!(
            BankIndex::from_json(gap.as_bytes()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            BankIndex::from_json(b"{\"tasks\": []}"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn missing_task_file_is_reference_error() {
        let bank = sample_bank(1);
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        fs::remove_file(dir.path().join("task_001/knowledge.mtns")).unwrap();
        match load_bank(dir.path()) {
            Err(Error::Reference(p)) => assert!(p.ends_with("task_001/knowledge.mtns")),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_prompt_shape_is_shape_error() {
        let bank = sample_bank(2);
        let dir = tempfile::tempdir().unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let path = dir.path().join(INDEX_FILE);
        let text =
            fs::read_to_string(&path)
                .unwrap()
                .replacen("\"prompt_length\": 2", "\"prompt_length\": 3", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_bank(dir.path()), Err(Error::Shape(_))));
    }
}
