//! Feature extraction behind a small pluggable interface.
//!
//! Two kinds exist: a seeded synthetic extractor (per-layer random projection
//! of patch pixel vectors followed by `tanh`) and a reader for precomputed
//! MTNS feature files produced by external pretrained models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix, Vector};
use crate::tensor_store::{read_tensor, TensorFile};

pub const DEFAULT_KEY_LAYER: usize = 5;
pub const DEFAULT_SCORE_LAYER: usize = 5;

/// Patch features of one image at one or more layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    taps: BTreeMap<usize, Matrix>,
}

impl PatchFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, taps: BTreeMap<usize, Matrix>) -> Result<Self> {
        let m = grid_h * grid_w;
        if m == 0 {
            return Err(Error::shape("patch grid has no cells".to_string()));
        }
        let dim = match taps.values().next() {
            Some(t) => t.cols(),
            None => return Err(Error::shape("feature map without taps".to_string())),
        };
        for (layer, t) in &taps {
            if t.shape() != (m, dim) {
                return Err(Error::shape(format!(
                    "layer {layer} tap is {:?}, expected {m}x{dim}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            taps,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tap(&self, layer: usize) -> Result<&Matrix> {
        self.taps.get(&layer).ok_or(Error::Tap(layer))
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.keys().copied()
    }

    /// Rank-3 `layers × M × D` tensor plus the sidecar describing it.
    pub fn to_tensor(&self) -> Result<(TensorFile, TapSidecar)> {
        let mut values = Vec::with_capacity(self.taps.len() * self.num_patches() * self.dim);
        for t in self.taps.values() {
            values.extend(t.data().iter().map(|&v| v as f32));
        }
        let tensor = TensorFile::f32(vec![self.taps.len(), self.num_patches(), self.dim], values)?;
        let sidecar = TapSidecar {
            layers: self.taps.keys().copied().collect(),
            grid: Some([self.grid_h, self.grid_w]),
        };
        Ok((tensor, sidecar))
    }
}

/// JSON sidecar naming the layer index of each slab of a rank-3 feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapSidecar {
    pub layers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

impl TapSidecar {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: TapSidecar = serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
        let mut sorted = s.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != s.layers.len() {
            return Err(Error::Validation(format!("duplicate layer in {:?}", s.layers)));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sidecar serializes")
    }
}

/// Sidecar location for a feature file: the same path with `.json` appended.
pub fn sidecar_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write a feature map as an MTNS tensor plus its sidecar.
pub fn write_feature_map(path: &Path, map: &PatchFeatureMap) -> Result<()> {
    let (tensor, sidecar) = map.to_tensor()?;
    crate::tensor_store::write_tensor(path, &tensor)?;
    let side = sidecar_path(path);
    fs::write(&side, sidecar.to_json()).map_err(|e| Error::io(side, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature {
    values: Vector,
}

impl TextFeature {
    pub fn new(values: Vector) -> Result<Self> {
        if values.dim() == 0 || values.norm() == 0.0 {
            return Err(Error::DegenerateVector("text feature has zero norm".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }
}

pub fn extract_text(path: impl AsRef<Path>) -> Result<TextFeature> {
    let t = read_tensor(path)?;
    TextFeature::new(t.to_vector()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Synthetic,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub seed: u64,
    pub key_layer: usize,
    pub score_layer: usize,
    /// Output feature dimension D.
    pub dim: usize,
    /// Length of each patch pixel vector (synthetic kind only).
    pub input_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Precomputed,
            seed: 0,
            key_layer: DEFAULT_KEY_LAYER,
            score_layer: DEFAULT_SCORE_LAYER,
            dim: 32,
            input_dim: 16,
        }
    }
}

/// Raw patch grid: one pixel vector per patch, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub pixels: Matrix,
}

impl PatchGrid {
    pub fn new(grid_h: usize, grid_w: usize, pixels: Matrix) -> Result<Self> {
        if grid_h * grid_w == 0 || pixels.rows() != grid_h * grid_w {
            return Err(Error::shape(format!(
                "{} pixel rows for a {grid_h}x{grid_w} grid",
                pixels.rows()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            pixels,
        })
    }
}

pub enum BackboneInput<'a> {
    Pixels(&'a PatchGrid),
    Precomputed(&'a Path),
}

/// A configured extractor; immutable once built.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    projections: BTreeMap<usize, Matrix>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        let mut projections = BTreeMap::new();
        if cfg.kind == BackboneKind::Synthetic {
            if cfg.dim == 0 || cfg.input_dim == 0 {
                return Err(Error::Config("synthetic backbone needs nonzero dims".into()));
            }
            for layer in [cfg.key_layer, cfg.score_layer] {
                projections
                    .entry(layer)
                    .or_insert_with(|| projection(cfg.seed, layer, cfg.input_dim, cfg.dim));
            }
        }
        Ok(Self { cfg, projections })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn extract(&self, input: BackboneInput<'_>) -> Result<PatchFeatureMap> {
        match (self.cfg.kind, input) {
            (BackboneKind::Synthetic, BackboneInput::Pixels(grid)) => self.project(grid),
            (BackboneKind::Precomputed, BackboneInput::Precomputed(path)) => {
                let map = load_feature_map(path, &self.cfg)?;
                self.check_taps(&map)?;
                Ok(map)
            }
            (kind, _) => Err(Error::Config(format!(
                "{kind:?} backbone given the wrong kind of input"
            ))),
        }
    }

    fn project(&self, grid: &PatchGrid) -> Result<PatchFeatureMap> {
        if grid.pixels.cols() != self.cfg.input_dim {
            return Err(Error::shape(format!(
                "pixel vectors have length {}, backbone expects {}",
                grid.pixels.cols(),
                self.cfg.input_dim
            )));
        }
        let mut taps = BTreeMap::new();
        for (&layer, w) in &self.projections {
            let mut h = matmul(&grid.pixels, w)?;
            h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            taps.insert(layer, h);
        }
        PatchFeatureMap::new(grid.grid_h, grid.grid_w, taps)
    }

    fn check_taps(&self, map: &PatchFeatureMap) -> Result<()> {
        map.tap(self.cfg.key_layer)?;
        map.tap(self.cfg.score_layer)?;
        Ok(())
    }
}

pub fn extract_patches(input: BackboneInput<'_>, cfg: &BackboneConfig) -> Result<PatchFeatureMap> {
    Backbone::new(cfg.clone())?.extract(input)
}

fn projection(seed: u64, layer: usize, input_dim: usize, dim: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(layer as u64 + 1)));
    let scale = 1.0 / (input_dim as f64).sqrt();
    let data = (0..input_dim * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Matrix::from_raw(input_dim, dim, data)
}

fn load_feature_map(path: &Path, cfg: &BackboneConfig) -> Result<PatchFeatureMap> {
    let tensor = read_tensor(path)?;
    let values = tensor.as_f32()?;
    let side = sidecar_path(path);
    let sidecar = match fs::read(&side) {
        Ok(bytes) => Some(TapSidecar::from_json(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(side, e)),
    };

    let (layers, m, d) = match *tensor.dims() {
        [m, d] => {
            // a single slab serves both taps
            let mut layers = vec![cfg.key_layer];
            if cfg.score_layer != cfg.key_layer {
                layers.push(cfg.score_layer);
            }
            (layers, m, d)
        }
        [l, m, d] => {
            let layers = match &sidecar {
                Some(s) if s.layers.len() != l => {
                    return Err(Error::shape(format!(
                        "sidecar names {} layers, tensor has {l}",
                        s.layers.len()
                    )))
                }
                Some(s) => s.layers.clone(),
                None => (0..l).collect(),
            };
            (layers, m, d)
        }
        _ => {
            return Err(Error::shape(format!(
                "feature tensor must be rank 2 or 3, found dims {:?}",
                tensor.dims()
            )))
        }
    };

    let (grid_h, grid_w) = match sidecar.as_ref().and_then(|s| s.grid) {
        Some([h, w]) if h * w == m => (h, w),
        Some([h, w]) => return Err(Error::shape(format!("grid {h}x{w} does not hold {m} patches"))),
        None => square_grid(m),
    };

    let slab = m * d;
    let mut taps = BTreeMap::new();
    for (i, &layer) in layers.iter().enumerate() {
        let src = if tensor.rank() == 2 { 0 } else { i };
        let data = values[src * slab..(src + 1) * slab]
            .iter()
            .map(|&v| v as f64)
            .collect();
        taps.insert(layer, Matrix::new(m, d, data)?);
    }
    PatchFeatureMap::new(grid_h, grid_w, taps)
}

fn square_grid(m: usize) -> (usize, usize) {
    let s = (m as f64).sqrt().round() as usize;
    if s * s == m {
        (s, s)
    } else {
        (1, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::write_tensor;

    fn synthetic_cfg() -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Synthetic,
            seed: 11,
            input_dim: 6,
            dim: 8,
            ..Default::default()
        }
    }

    fn grid(seed: f64) -> PatchGrid {
        let data = (0..4 * 6).map(|i| ((i as f64) * 0.37 + seed).sin()).collect();
        PatchGrid::new(2, 2, Matrix::new(4, 6, data).unwrap()).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let g = grid(0.0);
        let a = extract_patches(BackboneInput::Pixels(&g), &synthetic_cfg()).unwrap();
        let b = extract_patches(BackboneInput::Pixels(&g), &synthetic_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid(), (2, 2));
        assert_eq!(a.dim(), 8);
        let other_seed = BackboneConfig {
            seed: 12,
            ..synthetic_cfg()
        };
        let c = extract_patches(BackboneInput::Pixels(&g), &other_seed).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_features_are_local() {
        let g = grid(0.0);
        let mut h = g.clone();
        h.pixels.row_mut(2).iter_mut().for_each(|v| *v += 1.0);
        let backbone = Backbone::new(synthetic_cfg()).unwrap();
        let a = backbone.extract(BackboneInput::Pixels(&g)).unwrap();
        let b = backbone.extract(BackboneInput::Pixels(&h)).unwrap();
        let (ta, tb) = (a.tap(5).unwrap(), b.tap(5).unwrap());
        for r in 0..4 {
            assert_eq!(ta.row(r) == tb.row(r), r != 2, "row {r}");
        }
    }

    #[test]
    fn precomputed_rank3_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mtns");
        let values: Vec<f32> = (0..2 * 16 * 32).map(|i| (i % 97) as f32 * 0.01).collect();
        write_tensor(&path, &TensorFile::f32(vec![2, 16, 32], values).unwrap()).unwrap();
        fs::write(sidecar_path(&path), r#"{"layers":[5,11]}"#).unwrap();
        let cfg = BackboneConfig::default();
        let map = extract_patches(BackboneInput::Precomputed(&path), &cfg).unwrap();
        assert_eq!(map.grid(), (4, 4));
        assert_eq!(map.dim(), 32);
        assert_eq!(
            map.tap(11).unwrap().get(0, 0),
            ((16 * 32 % 97) as f32 * 0.01) as f64
        );
    }

    #[test]
    fn missing_score_layer_is_tap_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mtns");
        write_tensor(&path, &TensorFile::f32(vec![2, 4, 3], vec![0.5; 24]).unwrap()).unwrap();
        fs::write(sidecar_path(&path), r#"{"layers":[3,4]}"#).unwrap();
        let err = extract_patches(BackboneInput::Precomputed(&path), &BackboneConfig::default());
        assert!(matches!(err, Err(Error::Tap(5))));
    }

    #[test]
    fn rank2_file_serves_both_taps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mtns");
        write_tensor(&path, &TensorFile::f32(vec![6, 3], vec![0.25; 18]).unwrap()).unwrap();
        let cfg = BackboneConfig {
            key_layer: 2,
            ..Default::default()
        };
        let map = extract_patches(BackboneInput::Precomputed(&path), &cfg).unwrap();
        assert_eq!(map.tap(2).unwrap(), map.tap(5).unwrap());
        assert_eq!(map.grid(), (1, 6));
    }

    #[test]
    fn sidecar_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mtns");
        write_tensor(&path, &TensorFile::f32(vec![1, 4, 3], vec![0.5; 12]).unwrap()).unwrap();
        fs::write(sidecar_path(&path), r#"{"layers":[5],"grid":[3,3]}"#).unwrap();
        let err = extract_patches(BackboneInput::Precomputed(&path), &BackboneConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn text_feature_loading() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("t.mtns");
        write_tensor(&ok, &TensorFile::f32(vec![32], vec![0.1; 32]).unwrap()).unwrap();
        assert_eq!(extract_text(&ok).unwrap().dim(), 32);

        let rank2 = dir.path().join("r2.mtns");
        write_tensor(&rank2, &TensorFile::f32(vec![2, 16], vec![0.1; 32]).unwrap()).unwrap();
        assert!(matches!(extract_text(&rank2), Err(Error::Shape(_))));

        let zeros = dir.path().join("z.mtns");
        write_tensor(&zeros, &TensorFile::f32(vec![32], vec![0.0; 32]).unwrap()).unwrap();
        assert!(matches!(extract_text(&zeros), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn feature_map_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mtns");
        let backbone = Backbone::new(BackboneConfig {
            key_layer: 3,
            ..synthetic_cfg()
        })
        .unwrap();
        let map = backbone.extract(BackboneInput::Pixels(&grid(1.0))).unwrap();
        write_feature_map(&path, &map).unwrap();
        let cfg = BackboneConfig {
            key_layer: 3,
            ..Default::default()
        };
        let back = extract_patches(BackboneInput::Precomputed(&path), &cfg).unwrap();
        assert_eq!(back.grid(), map.grid());
        let a = map.tap(3).unwrap().round_to_f32();
        assert_eq!(back.tap(3).unwrap(), &a);
    }
}
