//! Inference: route, adapt, score against stored knowledge, build pixel maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::backbone::PatchFeatureMap;
use crate::error::{Error, Result};
use crate::memory_bank::{nn_min_distances, retrieve_knowledge, route, MemoryBank, TaskMemoryEntry};
use crate::numerics::{Matrix, Vector};
use crate::tensor_store::{write_tensor, TensorFile};

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub routed_task: usize,
    pub image_score: f64,
    pub patch_scores: Vector,
    pub pixel_map: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    /// Pixel-map size; `None` skips the map.
    pub map_size: Option<(usize, usize)>,
    pub sigma: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            map_size: None,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Patch scores of one image under a given task's entry.
pub fn score_patches(
    features: &PatchFeatureMap,
    entry: &TaskMemoryEntry,
    score_layer: usize,
) -> Result<Vector> {
    let fused = entry.fuse(features.tap(score_layer)?)?;
    nn_min_distances(&fused.image_enhanced, &entry.knowledge)
}

pub fn detect(features: &PatchFeatureMap, bank: &MemoryBank, cfg: &DetectConfig) -> Result<AnomalyResult> {
    let task = route(features.tap(bank.config().key_layer)?, bank)?;
    retrieve_knowledge(bank, task)?;
    let patch_scores = score_patches(features, bank.entry(task)?, bank.config().score_layer)?;
    let image_score = patch_scores
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let pixel_map = match cfg.map_size {
        Some((h, w)) => {
            let (gh, gw) = features.grid();
            Some(upsample_scores(&patch_scores, gh, gw, h, w, cfg.sigma)?)
        }
        None => None,
    };
    Ok(AnomalyResult {
        routed_task: task,
        image_score,
        patch_scores,
        pixel_map,
    })
}

/// Largest nearest-knowledge distance over a task's own training patches.
pub fn calibration_radius(
    entry: &TaskMemoryEntry,
    train: &[PatchFeatureMap],
    score_layer: usize,
) -> Result<f64> {
    let mut radius: f64 = 0.0;
    for f in train {
        let s = score_patches(f, entry, score_layer)?;
        radius = s.as_slice().iter().copied().fold(radius, f64::max);
    }
    Ok(radius)
}

/// Source coordinate of output pixel `o` under half-pixel-centre alignment.
fn source_coord(o: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let x = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

/// Bilinear upsampling of a patch grid followed by Gaussian smoothing.
pub fn upsample_scores(
    patch_scores: &Vector,
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
    sigma: f64,
) -> Result<Matrix> {
    if grid_h * grid_w == 0 || patch_scores.dim() != grid_h * grid_w {
        return Err(Error::shape(format!(
            "{} patch scores for a {grid_h}x{grid_w} grid",
            patch_scores.dim()
        )));
    }
    if out_h < grid_h || out_w < grid_w {
        return Err(Error::shape(format!(
            "map {out_h}x{out_w} is smaller than the {grid_h}x{grid_w} grid"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma {sigma} must be non-negative")));
    }
    let p = patch_scores.as_slice();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, grid_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = source_coord(y, grid_h, out_h);
        for &(x0, x1, tx) in &cols {
            let top = p[y0 * grid_w + x0] * (1.0 - tx) + p[y0 * grid_w + x1] * tx;
            let bottom = p[y1 * grid_w + x0] * (1.0 - tx) + p[y1 * grid_w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    let map = Matrix::new(out_h, out_w, out)?;
    Ok(if sigma > 0.0 {
        gaussian_smooth(&map, sigma)
    } else {
        map
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur, truncated at 4σ, borders replicated.
pub fn gaussian_smooth(map: &Matrix, sigma: f64) -> Matrix {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = map.shape();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Matrix::zeros(h, w);
    for y in 0..h {
        let row = map.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[clamp(x as i64 + t as i64 - r, w)];
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Matrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp.get(clamp(y as i64 + t as i64 - r, h), x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

pub fn write_pixel_map(path: impl AsRef<Path>, map: &Matrix) -> Result<()> {
    write_tensor(path, &TensorFile::from_matrix(map)?)
}

/// One CSV row per scored image.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub task: String,
    pub routed_task: String,
    pub image_score: f64,
    pub label: u8,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("task,routed_task,image_score,label\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.task, r.routed_task, r.image_score, r.label).unwrap();
    }
    out
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionWeights, PromptParams};
    use crate::memory_bank::{build_entry, BankConfig, EntryParts};
    use crate::objectives::Trainables;
    use std::collections::BTreeMap;

    /// Zero attention weights make the fused features equal the input.
    fn passthrough_entry(knowledge: Matrix) -> TaskMemoryEntry {
        let d = knowledge.cols();
        let zero = Matrix::zeros(d, d);
        let fusion = AttentionWeights::new(zero.clone(), zero.clone(), zero, 1).unwrap();
        let mut key = vec![0.0; d];
        key[0] = 1.0;
        build_entry(EntryParts {
            name: "t".into(),
            key_feats: Matrix::from_rows(&[key.clone()]).unwrap(),
            fused_feats: knowledge,
            params: Trainables {
                prompt: PromptParams::empty(d),
                fusion_t2i: fusion.clone(),
                fusion_i2t: fusion,
                learnable_key: Vector::new(key.clone()).unwrap(),
            },
            prefix_weights: AttentionWeights::new(
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                1,
            )
            .unwrap(),
            text: Vector::new(key).unwrap(),
            key_ratio: 1.0,
            coreset_ratio: 1.0,
            fps_start: 0,
        })
        .unwrap()
    }

    fn map_of(rows: Matrix, gh: usize, gw: usize) -> PatchFeatureMap {
        let mut taps = BTreeMap::new();
        taps.insert(5, rows);
        PatchFeatureMap::new(gh, gw, taps).unwrap()
    }

    #[test]
    fn three_four_five() {
        // stored rows must have nonzero norm, so the 3-4-5 case is translated by (1, 1)
        let mut bank = MemoryBank::new(2, BankConfig::default());
        bank.push(passthrough_entry(Matrix::from_rows(&[[1.0, 1.0]]).unwrap()))
            .unwrap();
        let feats = map_of(Matrix::from_rows(&[[4.0, 5.0], [1.0, 2.0]]).unwrap(), 1, 2);
        let r = detect(&feats, &bank, &DetectConfig::default()).unwrap();
        assert_eq!(r.routed_task, 0);
        assert_eq!(r.patch_scores.as_slice(), &[5.0, 1.0]);
        assert_eq!(r.image_score, 5.0);
        assert!(r.pixel_map.is_none());
    }

    #[test]
    fn patch_matching_knowledge_scores_zero() {
        let knowledge = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]).unwrap();
        let mut bank = MemoryBank::new(2, BankConfig::default());
        bank.push(passthrough_entry(knowledge)).unwrap();
        let feats = map_of(Matrix::from_rows(&[[-0.5, 0.25], [2.0, 2.0]]).unwrap(), 2, 1);
        let r = detect(&feats, &bank, &DetectConfig::default()).unwrap();
        assert_eq!(r.patch_scores.as_slice()[0], 0.0);
        assert_eq!(r.image_score, r.patch_scores.as_slice()[1]);
    }

    #[test]
    fn empty_bank_propagates() {
        let bank = MemoryBank::new(2, BankConfig::default());
        let feats = map_of(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), 1, 1);
        assert!(matches!(
            detect(&feats, &bank, &DetectConfig::default()),
            Err(Error::EmptyBank)
        ));
    }

    #[test]
    fn constant_map_stays_constant() {
        let c = 0.37;
        let p = Vector::new(vec![c; 12]).unwrap();
        for sigma in [0.0, 1.0, 4.0] {
            let m = upsample_scores(&p, 3, 4, 24, 32, sigma).unwrap();
            assert!(m.data().iter().all(|v| (v - c).abs() < 1e-12));
        }
    }

    #[test]
    fn bilinear_hand_values() {
        let p = Vector::new(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = upsample_scores(&p, 2, 2, 4, 4, 0.0).unwrap();
        // sample positions after clamping: 0, 0.25, 0.75, 1
        let expected = [
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ];
        for (y, row) in expected.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                assert!((m.get(y, x) - v).abs() < 1e-15, "({y},{x}) {}", m.get(y, x));
            }
        }
    }

    #[test]
    fn hot_patch_peak_stays_in_its_cell() {
        let mut v = vec![0.0; 16];
        v[6] = 1.0; // row 1, col 2
        let p = Vector::new(v).unwrap();
        for sigma in [0.0, 2.0] {
            let m = upsample_scores(&p, 4, 4, 32, 32, sigma).unwrap();
            let (mut best, mut at) = (f64::MIN, (0, 0));
            for y in 0..32 {
                for x in 0..32 {
                    if m.get(y, x) > best {
                        best = m.get(y, x);
                        at = (y, x);
                    }
                }
            }
            assert!((8..16).contains(&at.0) && (16..24).contains(&at.1), "{at:?}");
        }
    }

    #[test]
    fn upsample_shape_errors() {
        let p = Vector::new(vec![0.0; 5]).unwrap();
        assert!(matches!(
            upsample_scores(&p, 2, 2, 4, 4, 0.0),
            Err(Error::Shape(_))
        ));
        let p = Vector::new(vec![0.0; 4]).unwrap();
        assert!(matches!(
            upsample_scores(&p, 2, 2, 1, 4, 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn csv_and_map_export() {
        let rows = vec![ResultRow {
            task: "a".into(),
            routed_task: "a".into(),
            image_score: 1.5,
            label: 1,
        }];
        assert_eq!(
            results_csv(&rows),
            "task,routed_task,image_score,label\na,a,1.5,1\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.mtns");
        let m = Matrix::from_rows(&[[0.5, 0.25]]).unwrap();
        write_pixel_map(&path, &m).unwrap();
        let t = crate::tensor_store::read_tensor(&path).unwrap();
        assert_eq!(t.dims(), &[1, 2]);
        assert_eq!(t.to_matrix().unwrap(), m);
    }
}
